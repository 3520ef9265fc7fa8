//! Attack-agnostic detection of adversarial inputs.
//!
//! The toolkit extracts two families of per-sample features from a trained
//! ReLU classifier and its benign training data:
//!
//! * spectral features: projections of an input onto the eigenvectors of the
//!   benign data covariance that carry the *least* variance (`spectral`), and
//! * curvature features: l1 moduli of the Gauss-Newton loss curvature taken
//!   with respect to the input and each hidden activation (`curvature`).
//!
//! Benign-only anomaly detectors (`detect`) are fit on those features and
//! scored with ROC analysis (`eval`) against gradient attacks and random
//! noise (`attacks`).

pub mod attacks;
pub mod binio;
pub mod curvature;
pub mod detect;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod net;
pub mod spectral;

pub use error::{Error, Result};
