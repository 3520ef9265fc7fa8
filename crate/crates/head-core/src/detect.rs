//! Benign-only anomaly detectors over feature vectors: kernel density
//! estimation and a ν-one-class SVM, plus the feature standardizer both
//! share and the hyperparameter sweep harness.
//!
//! Scores follow one convention everywhere: larger = more anomalous.
//! Detectors are fit on benign features only; adversarial data never reaches
//! a fit function.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write as _};
use std::path::Path;
use std::str::FromStr;

use crate::binio;
use crate::error::{Error, Result};
use crate::eval::roc_auc;
use crate::linalg::{dot, Matrix};

pub const DET_MAGIC: &[u8; 8] = b"HEADDET1";

// ---------------------------------------------------------------------------
// Standardizer
// ---------------------------------------------------------------------------

/// Per-dimension z-score transform fit on benign training features.
/// Curvature moduli and spectral projections live on wildly different scales,
/// and both detectors are kernel methods, so this matters.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Dimensions whose std hit the 1e-12 floor (constant in training data).
    pub constant_dims: Vec<usize>,
}

pub const STD_FLOOR: f64 = 1e-12;

/// Fits per-dimension mean and population std (divisor N), flooring std at
/// 1e-12 so constant dimensions stay usable.
pub fn standardize_fit(features: &Matrix) -> Result<Standardizer> {
    let n = features.rows();
    let k = features.cols();
    if n < 2 {
        return Err(Error::DegenerateData(format!(
            "standardizer needs at least 2 samples, got {n}"
        )));
    }
    let mut mean = vec![0.0; k];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(features.row(i)) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut var = vec![0.0; k];
    for i in 0..n {
        for j in 0..k {
            let d = features.get(i, j) - mean[j];
            var[j] += d * d;
        }
    }
    let mut std = vec![0.0; k];
    let mut constant_dims = Vec::new();
    for j in 0..k {
        let s = (var[j] / n as f64).sqrt();
        if s < STD_FLOOR {
            std[j] = STD_FLOOR;
            constant_dims.push(j);
        } else {
            std[j] = s;
        }
    }
    Ok(Standardizer {
        mean,
        std,
        constant_dims,
    })
}

impl Standardizer {
    /// No-op transform (mean 0, std 1); the "standardization off" ablation.
    pub fn identity(k: usize) -> Self {
        Standardizer {
            mean: vec![0.0; k],
            std: vec![1.0; k],
            constant_dims: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, f: &[f64]) -> Result<Vec<f64>> {
        if f.len() != self.mean.len() {
            return Err(Error::Shape(format!(
                "feature has length {}, standardizer expects {}",
                f.len(),
                self.mean.len()
            )));
        }
        Ok(f.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect())
    }

    pub fn apply_matrix(&self, features: &Matrix) -> Result<Matrix> {
        let mut out = features.clone();
        if features.cols() != self.mean.len() {
            return Err(Error::Shape(format!(
                "feature width {} does not match standardizer dim {}",
                features.cols(),
                self.mean.len()
            )));
        }
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
        Ok(out)
    }
}

pub fn standardize_apply(s: &Standardizer, f: &[f64]) -> Result<Vec<f64>> {
    s.apply(f)
}

// ---------------------------------------------------------------------------
// Kernel density estimation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KdeKernel {
    Gaussian,
    Epanechnikov,
    Exponential,
    Linear,
    Uniform,
}

pub const KDE_KERNELS: [KdeKernel; 5] = [
    KdeKernel::Gaussian,
    KdeKernel::Epanechnikov,
    KdeKernel::Exponential,
    KdeKernel::Linear,
    KdeKernel::Uniform,
];

impl KdeKernel {
    pub fn name(&self) -> &'static str {
        match self {
            KdeKernel::Gaussian => "gaussian",
            KdeKernel::Epanechnikov => "epanechnikov",
            KdeKernel::Exponential => "exponential",
            KdeKernel::Linear => "linear",
            KdeKernel::Uniform => "uniform",
        }
    }

    /// Kernel profile at scaled distance u ≥ 0. Normalization constants are
    /// dropped: ROC AUC only sees score order, and constants are monotone.
    pub fn profile(&self, u: f64) -> f64 {
        match self {
            KdeKernel::Gaussian => (-0.5 * u * u).exp(),
            KdeKernel::Epanechnikov => (1.0 - u * u).max(0.0),
            KdeKernel::Exponential => (-u).exp(),
            KdeKernel::Linear => (1.0 - u).max(0.0),
            KdeKernel::Uniform => {
                if u < 1.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    fn id(&self) -> u8 {
        match self {
            KdeKernel::Gaussian => 0,
            KdeKernel::Epanechnikov => 1,
            KdeKernel::Exponential => 2,
            KdeKernel::Linear => 3,
            KdeKernel::Uniform => 4,
        }
    }

    fn from_id(id: u8) -> Result<Self> {
        Ok(match id {
            0 => KdeKernel::Gaussian,
            1 => KdeKernel::Epanechnikov,
            2 => KdeKernel::Exponential,
            3 => KdeKernel::Linear,
            4 => KdeKernel::Uniform,
            other => return Err(Error::Format(format!("unknown KDE kernel id {other}"))),
        })
    }
}

impl FromStr for KdeKernel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        KDE_KERNELS
            .iter()
            .find(|k| k.name() == s)
            .copied()
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown KDE kernel {s:?}; valid: gaussian, epanechnikov, exponential, linear, uniform"
                ))
            })
    }
}

/// Kernel density estimator state: the standardized benign training set plus
/// kernel and bandwidth.
#[derive(Debug, Clone, PartialEq)]
pub struct KdeModel {
    pub kernel: KdeKernel,
    pub bandwidth: f64,
    /// Standardized training features, one row per benign sample.
    pub train: Matrix,
    pub standardizer: Standardizer,
}

/// Stores the standardized training set. `standardizer` is applied to the
/// raw features here and to every query later; pass
/// `Standardizer::identity(k)` to disable scaling.
pub fn kde_fit(
    features: &Matrix,
    kernel: KdeKernel,
    bandwidth: f64,
    standardizer: &Standardizer,
) -> Result<KdeModel> {
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "bandwidth must be positive and finite, got {bandwidth}"
        )));
    }
    if features.rows() == 0 {
        return Err(Error::DegenerateData("KDE needs at least 1 sample".into()));
    }
    let train = standardizer.apply_matrix(features)?;
    Ok(KdeModel {
        kernel,
        bandwidth,
        train,
        standardizer: standardizer.clone(),
    })
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s.sqrt()
}

/// Anomaly score: −(1/N)·Σ_i K(‖f′ − x_i‖/h). Higher = more anomalous
/// (density negated).
pub fn kde_score(model: &KdeModel, f: &[f64]) -> Result<f64> {
    let q = model.standardizer.apply(f)?;
    let mut total = 0.0;
    for i in 0..model.train.rows() {
        let u = euclidean(&q, model.train.row(i)) / model.bandwidth;
        total += model.kernel.profile(u);
    }
    Ok(-total / model.train.rows() as f64)
}

// ---------------------------------------------------------------------------
// One-class SVM
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OcsvmKernel {
    Rbf { gamma: f64 },
    Sigmoid { gamma: f64, coef0: f64 },
    Linear,
    Poly { gamma: f64, degree: u32, coef0: f64 },
}

/// Conventional default γ = 1/k for a k-dimensional feature space.
pub fn default_gamma(k: usize) -> f64 {
    1.0 / k.max(1) as f64
}

impl OcsvmKernel {
    pub fn name(&self) -> &'static str {
        match self {
            OcsvmKernel::Rbf { .. } => "rbf",
            OcsvmKernel::Sigmoid { .. } => "sigmoid",
            OcsvmKernel::Linear => "linear",
            OcsvmKernel::Poly { .. } => "poly",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check_gamma = |g: f64| -> Result<()> {
            if !(g > 0.0) || !g.is_finite() {
                Err(Error::InvalidArgument(format!(
                    "kernel gamma must be positive and finite, got {g}"
                )))
            } else {
                Ok(())
            }
        };
        match *self {
            OcsvmKernel::Rbf { gamma } => check_gamma(gamma),
            OcsvmKernel::Sigmoid { gamma, coef0 } => {
                check_gamma(gamma)?;
                if !coef0.is_finite() {
                    return Err(Error::InvalidArgument("coef0 must be finite".into()));
                }
                Ok(())
            }
            OcsvmKernel::Linear => Ok(()),
            OcsvmKernel::Poly {
                gamma,
                degree,
                coef0,
            } => {
                check_gamma(gamma)?;
                if degree == 0 {
                    return Err(Error::InvalidArgument(
                        "poly kernel degree must be at least 1".into(),
                    ));
                }
                if !coef0.is_finite() {
                    return Err(Error::InvalidArgument("coef0 must be finite".into()));
                }
                Ok(())
            }
        }
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match *self {
            OcsvmKernel::Rbf { gamma } => {
                let mut s = 0.0;
                for (x, y) in a.iter().zip(b) {
                    let d = x - y;
                    s += d * d;
                }
                (-gamma * s).exp()
            }
            OcsvmKernel::Sigmoid { gamma, coef0 } => (gamma * dot(a, b) + coef0).tanh(),
            OcsvmKernel::Linear => dot(a, b),
            OcsvmKernel::Poly {
                gamma,
                degree,
                coef0,
            } => (gamma * dot(a, b) + coef0).powi(degree as i32),
        }
    }

    fn id(&self) -> u8 {
        match self {
            OcsvmKernel::Rbf { .. } => 0,
            OcsvmKernel::Sigmoid { .. } => 1,
            OcsvmKernel::Linear => 2,
            OcsvmKernel::Poly { .. } => 3,
        }
    }
}

/// Parses an OCSVM kernel name; parameters are attached separately because
/// γ defaults to 1/k, which is only known once the feature width is.
pub fn ocsvm_kernel_from_parts(
    name: &str,
    gamma: Option<f64>,
    degree: Option<u32>,
    coef0: Option<f64>,
    feature_dim: usize,
) -> Result<OcsvmKernel> {
    let g = gamma.unwrap_or_else(|| default_gamma(feature_dim));
    let kernel = match name {
        "rbf" => OcsvmKernel::Rbf { gamma: g },
        "sigmoid" => OcsvmKernel::Sigmoid {
            gamma: g,
            coef0: coef0.unwrap_or(0.0),
        },
        "linear" => OcsvmKernel::Linear,
        "poly" => OcsvmKernel::Poly {
            gamma: g,
            degree: degree.unwrap_or(3),
            coef0: coef0.unwrap_or(0.0),
        },
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown OCSVM kernel {other:?}; valid: rbf, sigmoid, linear, poly"
            )))
        }
    };
    kernel.validate()?;
    Ok(kernel)
}

#[derive(Debug, Clone)]
pub struct OcsvmParams {
    pub nu: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for OcsvmParams {
    fn default() -> Self {
        OcsvmParams {
            nu: 0.5,
            tol: 1e-6,
            max_iter: 100_000,
        }
    }
}

/// Fitted ν-one-class SVM: support vectors (standardized), their dual
/// coefficients, and the offset ρ.
#[derive(Debug, Clone, PartialEq)]
pub struct OcsvmModel {
    pub kernel: OcsvmKernel,
    pub nu: f64,
    pub alpha: Vec<f64>,
    pub rho: f64,
    pub support: Matrix,
    pub standardizer: Standardizer,
}

/// Raw SMO output before support-vector extraction.
pub struct SmoSolution {
    pub alpha: Vec<f64>,
    pub rho: f64,
    pub converged: bool,
    pub iterations: usize,
    pub residual: f64,
}

fn median(values: &mut Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Solves min ½αᵀKα s.t. 0 ≤ α_i ≤ 1/(νN), Σα = 1 by pairwise transfers
/// between the maximal-KKT-violating pair. `gram` is the full kernel matrix
/// of the training set. α starts uniform at 1/N, which is always feasible
/// (ν ≤ 1 ⇒ 1/N ≤ 1/(νN)) and preserves symmetry for symmetric inputs.
pub fn smo_solve(gram: &Matrix, nu: f64, tol: f64, max_iter: usize) -> Result<SmoSolution> {
    let n = gram.rows();
    if !gram.is_square() || n == 0 {
        return Err(Error::Shape(format!(
            "gram matrix is {}x{}, expected square nonempty",
            gram.rows(),
            gram.cols()
        )));
    }
    if !(nu > 0.0 && nu <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "nu must lie in (0, 1], got {nu}"
        )));
    }
    let c_box = 1.0 / (nu * n as f64);
    let mut alpha = vec![1.0 / n as f64; n];
    // Gradient of the objective: g = Kα.
    let mut g: Vec<f64> = (0..n)
        .map(|i| {
            let row = gram.row(i);
            let mut s = 0.0;
            for (k, a) in row.iter().zip(&alpha) {
                s += k * a;
            }
            s
        })
        .collect();

    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    let mut converged = false;
    while iterations < max_iter {
        // i: best receiver (α < C, smallest gradient);
        // j: best donor (α > 0, largest gradient).
        let mut i_best: Option<usize> = None;
        let mut j_best: Option<usize> = None;
        for t in 0..n {
            if alpha[t] < c_box && i_best.map_or(true, |i| g[t] < g[i]) {
                i_best = Some(t);
            }
            if alpha[t] > 0.0 && j_best.map_or(true, |j| g[t] > g[j]) {
                j_best = Some(t);
            }
        }
        let (i, j) = match (i_best, j_best) {
            (Some(i), Some(j)) => (i, j),
            // All α at the upper bound (ν = 1): nothing can move.
            _ => {
                residual = 0.0;
                converged = true;
                break;
            }
        };
        residual = g[j] - g[i];
        if residual <= tol {
            converged = true;
            break;
        }
        let denom = (gram.get(i, i) + gram.get(j, j) - 2.0 * gram.get(i, j)).max(1e-12);
        let head_i = c_box - alpha[i];
        let head_j = alpha[j];
        let t_step = (residual / denom).min(head_i).min(head_j);
        if t_step == head_i {
            alpha[i] = c_box;
        } else {
            alpha[i] += t_step;
        }
        if t_step == head_j {
            alpha[j] = 0.0;
        } else {
            alpha[j] -= t_step;
        }
        for t in 0..n {
            g[t] += t_step * (gram.get(t, i) - gram.get(t, j));
        }
        iterations += 1;
    }
    if !converged {
        // Recompute the exact residual for the error path.
        let mut min_up = f64::INFINITY;
        let mut max_down = f64::NEG_INFINITY;
        for t in 0..n {
            if alpha[t] < c_box {
                min_up = min_up.min(g[t]);
            }
            if alpha[t] > 0.0 {
                max_down = max_down.max(g[t]);
            }
        }
        residual = max_down - min_up;
        if residual <= tol {
            converged = true;
        }
    }

    // ρ: median of (Kα)_i over margin support vectors; fall back to the
    // midpoint of the active bounds when no α is strictly interior.
    let mut margin: Vec<f64> = (0..n)
        .filter(|&t| alpha[t] > 1e-12 && c_box - alpha[t] > 1e-12)
        .map(|t| g[t])
        .collect();
    let rho = if !margin.is_empty() {
        median(&mut margin)
    } else {
        let mut min_up = f64::INFINITY;
        let mut max_down = f64::NEG_INFINITY;
        for t in 0..n {
            if alpha[t] < c_box {
                min_up = min_up.min(g[t]);
            }
            if alpha[t] > 0.0 {
                max_down = max_down.max(g[t]);
            }
        }
        if min_up.is_finite() {
            0.5 * (min_up + max_down)
        } else {
            max_down
        }
    };

    Ok(SmoSolution {
        alpha,
        rho,
        converged,
        iterations,
        residual,
    })
}

/// Fits the ν-one-class SVM; errors if the solver does not reach the KKT
/// tolerance within `max_iter` pairwise steps.
pub fn ocsvm_fit(
    features: &Matrix,
    kernel: OcsvmKernel,
    params: &OcsvmParams,
    standardizer: &Standardizer,
) -> Result<OcsvmModel> {
    kernel.validate()?;
    let n = features.rows();
    if n < 2 {
        return Err(Error::DegenerateData(format!(
            "OCSVM needs at least 2 samples, got {n}"
        )));
    }
    let train = standardizer.apply_matrix(features)?;
    let mut gram = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = kernel.eval(train.row(i), train.row(j));
            gram.set(i, j, v);
            gram.set(j, i, v);
        }
    }
    let sol = smo_solve(&gram, params.nu, params.tol, params.max_iter)?;
    if !sol.converged {
        return Err(Error::Convergence {
            what: "one-class SVM SMO".into(),
            iterations: sol.iterations,
            residual: sol.residual,
        });
    }
    // Keep only support vectors (α > 1e-12).
    let mut alpha = Vec::new();
    let mut rows = Vec::new();
    for (t, &a) in sol.alpha.iter().enumerate() {
        if a > 1e-12 {
            alpha.push(a);
            rows.push(train.row(t).to_vec());
        }
    }
    if rows.is_empty() {
        return Err(Error::DegenerateData(
            "OCSVM fit produced no support vectors".into(),
        ));
    }
    Ok(OcsvmModel {
        kernel,
        nu: params.nu,
        alpha,
        rho: sol.rho,
        support: Matrix::from_rows(&rows)?,
        standardizer: standardizer.clone(),
    })
}

/// Anomaly score: ρ − Σ_i α_i k(x_i, f′); positive inside the "anomalous"
/// half-space, negative deep inside the benign region.
pub fn ocsvm_score(model: &OcsvmModel, f: &[f64]) -> Result<f64> {
    let q = model.standardizer.apply(f)?;
    let mut s = 0.0;
    for (i, a) in model.alpha.iter().enumerate() {
        s += a * model.kernel.eval(model.support.row(i), &q);
    }
    Ok(model.rho - s)
}

// ---------------------------------------------------------------------------
// Detector wrapper + serialization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum DetectorModel {
    Kde(KdeModel),
    Ocsvm(OcsvmModel),
}

impl DetectorModel {
    pub fn score(&self, f: &[f64]) -> Result<f64> {
        match self {
            DetectorModel::Kde(m) => kde_score(m, f),
            DetectorModel::Ocsvm(m) => ocsvm_score(m, f),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            DetectorModel::Kde(_) => "kde",
            DetectorModel::Ocsvm(_) => "ocsvm",
        }
    }
}

fn write_standardizer<W: std::io::Write>(w: &mut W, s: &Standardizer) -> Result<()> {
    binio::write_u32(w, s.mean.len() as u32)?;
    binio::write_f64_slice(w, &s.mean)?;
    binio::write_f64_slice(w, &s.std)?;
    Ok(())
}

fn read_standardizer<R: std::io::Read>(r: &mut R) -> Result<Standardizer> {
    let k = binio::read_len(r, "standardizer dim", 1 << 24)?;
    let mean = binio::read_f64_vec(r, k)?;
    let std = binio::read_f64_vec(r, k)?;
    if std.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Format("standardizer std entries must be positive".into()));
    }
    let constant_dims = std
        .iter()
        .enumerate()
        .filter(|(_, &s)| s <= STD_FLOOR)
        .map(|(i, _)| i)
        .collect();
    Ok(Standardizer {
        mean,
        std,
        constant_dims,
    })
}

/// HEADDET1 format: magic, u8 detector kind, u8 kernel id, kernel params,
/// standardizer, then the model payload (training matrix for KDE; α, ρ and
/// support vectors for OCSVM).
pub fn save_detector(model: &DetectorModel, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    binio::write_magic(&mut w, DET_MAGIC)?;
    match model {
        DetectorModel::Kde(m) => {
            binio::write_u8(&mut w, 0)?;
            binio::write_u8(&mut w, m.kernel.id())?;
            binio::write_f64(&mut w, m.bandwidth)?;
            write_standardizer(&mut w, &m.standardizer)?;
            binio::write_u32(&mut w, m.train.rows() as u32)?;
            binio::write_u32(&mut w, m.train.cols() as u32)?;
            binio::write_f64_slice(&mut w, m.train.as_slice())?;
        }
        DetectorModel::Ocsvm(m) => {
            binio::write_u8(&mut w, 1)?;
            binio::write_u8(&mut w, m.kernel.id())?;
            let (gamma, degree, coef0) = match m.kernel {
                OcsvmKernel::Rbf { gamma } => (gamma, 0u32, 0.0),
                OcsvmKernel::Sigmoid { gamma, coef0 } => (gamma, 0, coef0),
                OcsvmKernel::Linear => (0.0, 0, 0.0),
                OcsvmKernel::Poly {
                    gamma,
                    degree,
                    coef0,
                } => (gamma, degree, coef0),
            };
            binio::write_f64(&mut w, gamma)?;
            binio::write_u32(&mut w, degree)?;
            binio::write_f64(&mut w, coef0)?;
            binio::write_f64(&mut w, m.nu)?;
            write_standardizer(&mut w, &m.standardizer)?;
            binio::write_u32(&mut w, m.support.rows() as u32)?;
            binio::write_u32(&mut w, m.support.cols() as u32)?;
            binio::write_f64(&mut w, m.rho)?;
            binio::write_f64_slice(&mut w, &m.alpha)?;
            binio::write_f64_slice(&mut w, m.support.as_slice())?;
        }
    }
    Ok(())
}

pub fn load_detector(path: &Path) -> Result<DetectorModel> {
    let mut r = BufReader::new(File::open(path)?);
    binio::expect_magic(&mut r, DET_MAGIC)?;
    let kind = binio::read_u8(&mut r)?;
    match kind {
        0 => {
            let kernel = KdeKernel::from_id(binio::read_u8(&mut r)?)?;
            let bandwidth = binio::read_f64(&mut r)?;
            let standardizer = read_standardizer(&mut r)?;
            let n = binio::read_len(&mut r, "KDE training rows", 1 << 30)?;
            let k = binio::read_len(&mut r, "KDE feature width", 1 << 24)?;
            let data = binio::read_f64_vec(&mut r, n * k)?;
            binio::expect_eof(&mut r)?;
            Ok(DetectorModel::Kde(KdeModel {
                kernel,
                bandwidth,
                train: Matrix::from_vec(n, k, data)?,
                standardizer,
            }))
        }
        1 => {
            let kernel_id = binio::read_u8(&mut r)?;
            let gamma = binio::read_f64(&mut r)?;
            let degree = binio::read_u32(&mut r)?;
            let coef0 = binio::read_f64(&mut r)?;
            let nu = binio::read_f64(&mut r)?;
            let kernel = match kernel_id {
                0 => OcsvmKernel::Rbf { gamma },
                1 => OcsvmKernel::Sigmoid { gamma, coef0 },
                2 => OcsvmKernel::Linear,
                3 => OcsvmKernel::Poly {
                    gamma,
                    degree,
                    coef0,
                },
                other => return Err(Error::Format(format!("unknown OCSVM kernel id {other}"))),
            };
            let standardizer = read_standardizer(&mut r)?;
            let n = binio::read_len(&mut r, "support vector count", 1 << 30)?;
            let k = binio::read_len(&mut r, "feature width", 1 << 24)?;
            let rho = binio::read_f64(&mut r)?;
            let alpha = binio::read_f64_vec(&mut r, n)?;
            let sv = binio::read_f64_vec(&mut r, n * k)?;
            binio::expect_eof(&mut r)?;
            Ok(DetectorModel::Ocsvm(OcsvmModel {
                kernel,
                nu,
                alpha,
                rho,
                support: Matrix::from_vec(n, k, sv)?,
                standardizer,
            }))
        }
        other => Err(Error::Format(format!("unknown detector kind {other}"))),
    }
}

// ---------------------------------------------------------------------------
// Hyperparameter sweep
// ---------------------------------------------------------------------------

/// Grid definition for `hyperparameter_sweep`.
#[derive(Debug, Clone)]
pub enum SweepGrid {
    Kde {
        kernels: Vec<KdeKernel>,
        bandwidths: Vec<f64>,
    },
    Ocsvm {
        /// Kernel shapes; γ etc. must already be resolved.
        kernels: Vec<OcsvmKernel>,
        nus: Vec<f64>,
        tol: f64,
        max_iter: usize,
    },
}

/// Default grids: every kernel, bandwidth 1..=25, ν 0.1..=0.9 step 0.1.
pub fn default_kde_grid() -> SweepGrid {
    SweepGrid::Kde {
        kernels: KDE_KERNELS.to_vec(),
        bandwidths: (1..=25).map(|b| b as f64).collect(),
    }
}

pub fn default_ocsvm_grid(feature_dim: usize, tol: f64, max_iter: usize) -> SweepGrid {
    let g = default_gamma(feature_dim);
    SweepGrid::Ocsvm {
        kernels: vec![
            OcsvmKernel::Rbf { gamma: g },
            OcsvmKernel::Sigmoid { gamma: g, coef0: 0.0 },
            OcsvmKernel::Linear,
            OcsvmKernel::Poly {
                gamma: g,
                degree: 3,
                coef0: 0.0,
            },
        ],
        nus: (1..=9).map(|i| i as f64 / 10.0).collect(),
        tol,
        max_iter,
    }
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub kernel: String,
    /// Bandwidth for KDE rows, ν for OCSVM rows.
    pub hyperparameter: f64,
    pub auc_overall: f64,
    pub auc_per_attack: Vec<f64>,
    /// False when the SMO solver hit its iteration cap for this config; the
    /// row still reports the partial solution's AUC so the table is complete.
    pub converged: bool,
    pub best: bool,
}

/// Grid search over detector hyperparameters on fixed feature sets: fit on
/// benign `train`, score `benign_eval` against each attack set, report
/// per-attack and pooled-overall AUC per configuration, and flag the row
/// with the best overall AUC.
pub fn hyperparameter_sweep(
    train: &Matrix,
    benign_eval: &Matrix,
    attack_sets: &[(String, Matrix)],
    grid: &SweepGrid,
    standardize: bool,
) -> Result<Vec<SweepRow>> {
    let standardizer = if standardize {
        standardize_fit(train)?
    } else {
        Standardizer::identity(train.cols())
    };
    let strain = standardizer.apply_matrix(train)?;
    let sbenign = standardizer.apply_matrix(benign_eval)?;
    let sattacks: Vec<Matrix> = attack_sets
        .iter()
        .map(|(_, m)| standardizer.apply_matrix(m))
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    match grid {
        SweepGrid::Kde {
            kernels,
            bandwidths,
        } => {
            if kernels.is_empty() || bandwidths.is_empty() {
                return Err(Error::InvalidArgument("empty KDE sweep grid".into()));
            }
            // Distances are kernel- and bandwidth-independent: compute once.
            let dist = |queries: &Matrix| -> Vec<Vec<f64>> {
                (0..queries.rows())
                    .map(|q| {
                        (0..strain.rows())
                            .map(|t| euclidean(queries.row(q), strain.row(t)))
                            .collect()
                    })
                    .collect()
            };
            let benign_d = dist(&sbenign);
            let attack_d: Vec<Vec<Vec<f64>>> = sattacks.iter().map(|m| dist(m)).collect();
            let n = strain.rows() as f64;
            for kernel in kernels {
                for &h in bandwidths {
                    if !(h > 0.0) {
                        return Err(Error::InvalidArgument(format!(
                            "bandwidth must be positive, got {h}"
                        )));
                    }
                    let score = |d: &Vec<f64>| -> f64 {
                        -d.iter().map(|&u| kernel.profile(u / h)).sum::<f64>() / n
                    };
                    let benign_scores: Vec<f64> = benign_d.iter().map(score).collect();
                    let mut per_attack = Vec::new();
                    let mut pooled = Vec::new();
                    for ds in &attack_d {
                        let s: Vec<f64> = ds.iter().map(score).collect();
                        per_attack.push(roc_auc(&benign_scores, &s)?.auc);
                        pooled.extend(s);
                    }
                    let auc_overall = if pooled.is_empty() {
                        f64::NAN
                    } else {
                        roc_auc(&benign_scores, &pooled)?.auc
                    };
                    rows.push(SweepRow {
                        kernel: kernel.name().to_string(),
                        hyperparameter: h,
                        auc_overall,
                        auc_per_attack: per_attack,
                        converged: true,
                        best: false,
                    });
                }
            }
        }
        SweepGrid::Ocsvm {
            kernels,
            nus,
            tol,
            max_iter,
        } => {
            if kernels.is_empty() || nus.is_empty() {
                return Err(Error::InvalidArgument("empty OCSVM sweep grid".into()));
            }
            let n = strain.rows();
            for kernel in kernels {
                kernel.validate()?;
                let mut gram = Matrix::zeros(n, n);
                for i in 0..n {
                    for j in i..n {
                        let v = kernel.eval(strain.row(i), strain.row(j));
                        gram.set(i, j, v);
                        gram.set(j, i, v);
                    }
                }
                // Cross-kernel values query×train, shared across ν.
                let cross = |queries: &Matrix| -> Vec<Vec<f64>> {
                    (0..queries.rows())
                        .map(|q| {
                            (0..n)
                                .map(|t| kernel.eval(queries.row(q), strain.row(t)))
                                .collect()
                        })
                        .collect()
                };
                let benign_k = cross(&sbenign);
                let attack_k: Vec<Vec<Vec<f64>>> = sattacks.iter().map(|m| cross(m)).collect();
                for &nu in nus {
                    let sol = smo_solve(&gram, nu, *tol, *max_iter)?;
                    let score = |kv: &Vec<f64>| -> f64 {
                        let mut s = 0.0;
                        for (k, a) in kv.iter().zip(&sol.alpha) {
                            s += k * a;
                        }
                        sol.rho - s
                    };
                    let benign_scores: Vec<f64> = benign_k.iter().map(score).collect();
                    let mut per_attack = Vec::new();
                    let mut pooled = Vec::new();
                    for ks in &attack_k {
                        let s: Vec<f64> = ks.iter().map(score).collect();
                        per_attack.push(roc_auc(&benign_scores, &s)?.auc);
                        pooled.extend(s);
                    }
                    let auc_overall = if pooled.is_empty() {
                        f64::NAN
                    } else {
                        roc_auc(&benign_scores, &pooled)?.auc
                    };
                    rows.push(SweepRow {
                        kernel: kernel.name().to_string(),
                        hyperparameter: nu,
                        auc_overall,
                        auc_per_attack: per_attack,
                        converged: sol.converged,
                        best: false,
                    });
                }
            }
        }
    }

    // Flag the best overall AUC (first on ties).
    if let Some(best_idx) = (0..rows.len())
        .filter(|&i| rows[i].auc_overall.is_finite())
        .max_by(|&a, &b| {
            rows[a]
                .auc_overall
                .partial_cmp(&rows[b].auc_overall)
                .unwrap()
                .then(b.cmp(&a)) // earlier row wins ties
        })
    {
        rows[best_idx].best = true;
    }
    Ok(rows)
}

/// Sweep CSV: kernel, hyperparameter, overall AUC, one per-attack AUC column
/// per attack, solver convergence, and the best-row flag.
pub fn write_sweep_csv(rows: &[SweepRow], attack_names: &[String], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let mut header = String::from("kernel,hyperparameter,auc_overall");
    for name in attack_names {
        header.push_str(&format!(",auc_{name}"));
    }
    header.push_str(",converged,best");
    writeln!(w, "{header}")?;
    for r in rows {
        let mut line = format!("{},{},{}", r.kernel, r.hyperparameter, r.auc_overall);
        for a in &r.auc_per_attack {
            line.push_str(&format!(",{a}"));
        }
        line.push_str(&format!(",{},{}", r.converged, if r.best { 1 } else { 0 }));
        writeln!(w, "{line}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian_blob(rng: &mut ChaCha8Rng, n: usize, k: usize, center: f64, std: f64) -> Matrix {
        Matrix::from_fn(n, k, |_, _| {
            center + std * rng.sample::<f64, _>(StandardNormal)
        })
    }

    #[test]
    fn standardizer_population_convention() {
        let f = Matrix::from_rows(&[vec![0.0], vec![2.0]]).unwrap();
        let s = standardize_fit(&f).unwrap();
        assert_eq!(s.mean, vec![1.0]);
        assert_eq!(s.std, vec![1.0]); // population std, divisor N
        assert_eq!(s.apply(&[3.0]).unwrap(), vec![2.0]);
    }

    #[test]
    fn standardizer_maps_mean_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = gaussian_blob(&mut rng, 30, 4, 2.0, 1.5);
        let s = standardize_fit(&f).unwrap();
        let z = s.apply(&s.mean.clone()).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn standardizer_floors_constant_columns() {
        let f = Matrix::from_rows(&[vec![5.0, 1.0], vec![5.0, 3.0], vec![5.0, 5.0]]).unwrap();
        let s = standardize_fit(&f).unwrap();
        assert_eq!(s.std[0], STD_FLOOR);
        assert_eq!(s.constant_dims, vec![0]);
        assert!(s.apply(&[5.0, 2.0]).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn standardizer_needs_two_samples() {
        let f = Matrix::from_rows(&[vec![1.0]]).unwrap();
        assert!(matches!(
            standardize_fit(&f),
            Err(Error::DegenerateData(_))
        ));
    }

    #[test]
    fn kde_zero_distance_scores_minus_one() {
        let f = Matrix::from_rows(&[vec![0.0]]).unwrap();
        let m = kde_fit(&f, KdeKernel::Gaussian, 1.0, &Standardizer::identity(1)).unwrap();
        assert_eq!(kde_score(&m, &[0.0]).unwrap(), -1.0);
    }

    #[test]
    fn kde_unit_distance_gaussian() {
        let f = Matrix::from_rows(&[vec![0.0]]).unwrap();
        let m = kde_fit(&f, KdeKernel::Gaussian, 1.0, &Standardizer::identity(1)).unwrap();
        let s = kde_score(&m, &[1.0]).unwrap();
        assert!((s + (-0.5f64).exp()).abs() <= 1e-12);
    }

    #[test]
    fn kde_uniform_kernel_outside_support_scores_zero() {
        let f = Matrix::from_rows(&[vec![0.0], vec![0.5]]).unwrap();
        let m = kde_fit(&f, KdeKernel::Uniform, 1.0, &Standardizer::identity(1)).unwrap();
        assert_eq!(kde_score(&m, &[5.0]).unwrap(), 0.0);
        // Inside support the score is strictly below zero.
        assert!(kde_score(&m, &[0.2]).unwrap() < 0.0);
    }

    #[test]
    fn kde_scores_increase_with_distance_for_decaying_kernels() {
        let f = Matrix::from_rows(&[vec![0.0]]).unwrap();
        for kernel in [KdeKernel::Gaussian, KdeKernel::Exponential] {
            let m = kde_fit(&f, kernel, 2.0, &Standardizer::identity(1)).unwrap();
            let mut prev = f64::NEG_INFINITY;
            for step in 0..20 {
                let s = kde_score(&m, &[0.3 * step as f64]).unwrap();
                assert!(s > prev || step == 0, "{kernel:?} not increasing");
                prev = s;
            }
        }
    }

    #[test]
    fn kde_invariant_to_row_permutation_and_duplication() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = gaussian_blob(&mut rng, 20, 3, 0.0, 1.0);
        let s = standardize_fit(&f).unwrap();
        let m = kde_fit(&f, KdeKernel::Gaussian, 1.5, &s).unwrap();

        let mut perm_rows: Vec<Vec<f64>> = (0..20).map(|i| f.row(i).to_vec()).collect();
        perm_rows.reverse();
        let fp = Matrix::from_rows(&perm_rows).unwrap();
        let mp = kde_fit(&fp, KdeKernel::Gaussian, 1.5, &s).unwrap();

        let mut dup_rows: Vec<Vec<f64>> = (0..20).map(|i| f.row(i).to_vec()).collect();
        dup_rows.extend((0..20).map(|i| f.row(i).to_vec()));
        let fd = Matrix::from_rows(&dup_rows).unwrap();
        let md = kde_fit(&fd, KdeKernel::Gaussian, 1.5, &s).unwrap();

        let q = vec![0.4, -0.2, 1.0];
        let a = kde_score(&m, &q).unwrap();
        assert!((a - kde_score(&mp, &q).unwrap()).abs() <= 1e-12);
        assert!((a - kde_score(&md, &q).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn kde_rejects_bad_bandwidth_and_unknown_kernel_name() {
        let f = Matrix::from_rows(&[vec![0.0]]).unwrap();
        assert!(kde_fit(&f, KdeKernel::Gaussian, 0.0, &Standardizer::identity(1)).is_err());
        let err = "parabolic".parse::<KdeKernel>().unwrap_err().to_string();
        for name in ["gaussian", "epanechnikov", "exponential", "linear", "uniform"] {
            assert!(err.contains(name), "{err}");
        }
    }

    #[test]
    fn kde_allows_single_training_point() {
        let f = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert!(kde_fit(&f, KdeKernel::Linear, 1.0, &Standardizer::identity(2)).is_ok());
    }

    #[test]
    fn ocsvm_two_identical_points_split_mass_evenly() {
        let f = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let m = ocsvm_fit(
            &f,
            OcsvmKernel::Rbf { gamma: 1.0 },
            &OcsvmParams {
                nu: 0.5,
                ..Default::default()
            },
            &Standardizer::identity(2),
        )
        .unwrap();
        assert_eq!(m.alpha, vec![0.5, 0.5]);
    }

    #[test]
    fn ocsvm_nu_one_forces_uniform_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = gaussian_blob(&mut rng, 8, 2, 0.0, 1.0);
        let m = ocsvm_fit(
            &f,
            OcsvmKernel::Rbf { gamma: 0.5 },
            &OcsvmParams {
                nu: 1.0,
                ..Default::default()
            },
            &Standardizer::identity(2),
        )
        .unwrap();
        assert_eq!(m.alpha, vec![1.0 / 8.0; 8]);
    }

    /// Projection of v onto {α : Σα = 1, 0 ≤ α_i ≤ c} by bisection on the
    /// shift τ in α_i = clamp(v_i − τ, 0, c).
    fn project_capped_simplex(v: &[f64], c: f64) -> Vec<f64> {
        let mut lo = v.iter().fold(f64::INFINITY, |m, &x| m.min(x)) - c - 1.0;
        let mut hi = v.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x)) + 1.0;
        for _ in 0..200 {
            let tau = 0.5 * (lo + hi);
            let s: f64 = v.iter().map(|&x| (x - tau).clamp(0.0, c)).sum();
            if s > 1.0 {
                lo = tau;
            } else {
                hi = tau;
            }
        }
        let tau = 0.5 * (lo + hi);
        v.iter().map(|&x| (x - tau).clamp(0.0, c)).collect()
    }

    /// Dense projected-gradient oracle for the OCSVM dual.
    fn pg_oracle(gram: &Matrix, nu: f64, iters: usize) -> Vec<f64> {
        let n = gram.rows();
        let c = 1.0 / (nu * n as f64);
        // Lipschitz bound: row-sum norm of K.
        let mut l = 0.0f64;
        for i in 0..n {
            l = l.max(gram.row(i).iter().map(|v| v.abs()).sum());
        }
        let eta = 1.0 / l.max(1e-12);
        let mut alpha = vec![1.0 / n as f64; n];
        for _ in 0..iters {
            let g = gram.matvec(&alpha);
            let stepped: Vec<f64> = alpha.iter().zip(&g).map(|(a, gi)| a - eta * gi).collect();
            alpha = project_capped_simplex(&stepped, c);
        }
        alpha
    }

    fn dual_objective(gram: &Matrix, alpha: &[f64]) -> f64 {
        0.5 * dot(&gram.matvec(alpha), alpha)
    }

    #[test]
    fn ocsvm_matches_projected_gradient_oracle_on_planar_points() {
        let f = Matrix::from_rows(&[
            vec![0.0, 0.0],
            vec![1.0, 0.2],
            vec![0.1, 0.9],
            vec![1.1, 1.0],
        ])
        .unwrap();
        let kernel = OcsvmKernel::Rbf { gamma: 1.0 };
        let m = ocsvm_fit(
            &f,
            kernel,
            &OcsvmParams {
                nu: 0.5,
                ..Default::default()
            },
            &Standardizer::identity(2),
        )
        .unwrap();
        // Rebuild the full alpha vector (fit keeps only support vectors, but
        // with N=4 and nu=0.5 every point typically stays a support vector).
        let mut gram = Matrix::zeros(4, 4);
        for i in 0..4 {
            for j in 0..4 {
                gram.set(i, j, kernel.eval(f.row(i), f.row(j)));
            }
        }
        let oracle = pg_oracle(&gram, 0.5, 200_000);
        assert_eq!(m.alpha.len(), 4, "expected all points to stay support vectors");
        for (a, b) in m.alpha.iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-4, "{a} vs oracle {b}");
        }
    }

    #[test]
    fn ocsvm_objective_matches_oracle_for_small_n() {
        // Dense QP oracle equivalence on N ≤ 8 across all four kernels.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = gaussian_blob(&mut rng, 8, 3, 0.0, 1.0);
        let st = Standardizer::identity(3);
        let kernels = [
            OcsvmKernel::Rbf { gamma: 0.7 },
            OcsvmKernel::Sigmoid {
                gamma: 0.3,
                coef0: 0.1,
            },
            OcsvmKernel::Linear,
            OcsvmKernel::Poly {
                gamma: 0.5,
                degree: 2,
                coef0: 1.0,
            },
        ];
        for kernel in kernels {
            let strain = st.apply_matrix(&f).unwrap();
            let mut gram = Matrix::zeros(8, 8);
            for i in 0..8 {
                for j in 0..8 {
                    gram.set(i, j, kernel.eval(strain.row(i), strain.row(j)));
                }
            }
            let sol = smo_solve(&gram, 0.4, 1e-8, 200_000).unwrap();
            assert!(sol.converged, "{} did not converge", kernel.name());
            let oracle = pg_oracle(&gram, 0.4, 200_000);
            let obj_smo = dual_objective(&gram, &sol.alpha);
            let obj_pg = dual_objective(&gram, &oracle);
            assert!(
                (obj_smo - obj_pg).abs() <= 1e-6,
                "{}: {obj_smo} vs {obj_pg}",
                kernel.name()
            );
        }
    }

    #[test]
    fn ocsvm_dual_feasibility_always_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &nu in &[0.1, 0.3, 0.5, 0.7, 0.9, 1.0] {
            let f = gaussian_blob(&mut rng, 40, 4, 0.0, 1.0);
            let s = standardize_fit(&f).unwrap();
            let m = ocsvm_fit(
                &f,
                OcsvmKernel::Rbf { gamma: 0.25 },
                &OcsvmParams {
                    nu,
                    ..Default::default()
                },
                &s,
            )
            .unwrap();
            let c = 1.0 / (nu * 40.0);
            let sum: f64 = m.alpha.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-8, "nu={nu}: sum {sum}");
            assert!(m.alpha.iter().all(|&a| a >= 0.0 && a <= c + 1e-15));
            assert!(!m.alpha.is_empty());
        }
    }

    #[test]
    fn ocsvm_margin_support_vector_scores_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = gaussian_blob(&mut rng, 60, 2, 0.0, 1.0);
        let s = standardize_fit(&f).unwrap();
        let params = OcsvmParams {
            nu: 0.5,
            ..Default::default()
        };
        let m = ocsvm_fit(&f, OcsvmKernel::Rbf { gamma: 0.5 }, &params, &s).unwrap();
        let c = 1.0 / (0.5 * 60.0);
        let mut found = false;
        for (i, &a) in m.alpha.iter().enumerate() {
            if a > 1e-9 && c - a > 1e-9 {
                // support row i is already standardized; undo for the query.
                let raw: Vec<f64> = m
                    .support
                    .row(i)
                    .iter()
                    .enumerate()
                    .map(|(j, &v)| v * m.standardizer.std[j] + m.standardizer.mean[j])
                    .collect();
                let score = ocsvm_score(&m, &raw).unwrap();
                assert!(score.abs() <= 2e-6, "margin SV score {score}");
                found = true;
            }
        }
        assert!(found, "no margin support vector found");
    }

    #[test]
    fn ocsvm_outlier_scores_above_cluster_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = gaussian_blob(&mut rng, 80, 2, 0.0, 0.5);
        let s = standardize_fit(&f).unwrap();
        let m = ocsvm_fit(
            &f,
            OcsvmKernel::Rbf { gamma: 0.5 },
            &OcsvmParams::default(),
            &s,
        )
        .unwrap();
        let center = ocsvm_score(&m, &[0.0, 0.0]).unwrap();
        let outlier = ocsvm_score(&m, &[10.0, -8.0]).unwrap();
        assert!(outlier > center);
        // Far from everything, kernel sums vanish and the score tends to ρ.
        assert!((outlier - m.rho).abs() <= 1e-9);
    }

    #[test]
    fn ocsvm_nu_fraction_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = gaussian_blob(&mut rng, 200, 3, 0.0, 1.0);
        let s = standardize_fit(&f).unwrap();
        for &nu in &[0.2, 0.5, 0.8] {
            let m = ocsvm_fit(
                &f,
                OcsvmKernel::Rbf { gamma: 1.0 / 3.0 },
                &OcsvmParams {
                    nu,
                    ..Default::default()
                },
                &s,
            )
            .unwrap();
            let sv_fraction = m.alpha.len() as f64 / 200.0;
            let mut anomalous = 0;
            for i in 0..200 {
                if ocsvm_score(&m, f.row(i)).unwrap() > 0.0 {
                    anomalous += 1;
                }
            }
            let anom_fraction = anomalous as f64 / 200.0;
            assert!(
                anom_fraction <= nu + 0.05,
                "nu={nu}: anomalous fraction {anom_fraction}"
            );
            assert!(
                sv_fraction >= nu - 0.05,
                "nu={nu}: support vector fraction {sv_fraction}"
            );
        }
    }

    #[test]
    fn ocsvm_rejects_bad_nu_and_kernel_params() {
        let f = Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let s = Standardizer::identity(1);
        for nu in [0.0, -0.5, 1.5] {
            assert!(ocsvm_fit(
                &f,
                OcsvmKernel::Rbf { gamma: 1.0 },
                &OcsvmParams {
                    nu,
                    ..Default::default()
                },
                &s
            )
            .is_err());
        }
        assert!(OcsvmKernel::Rbf { gamma: 0.0 }.validate().is_err());
        assert!(OcsvmKernel::Poly {
            gamma: 1.0,
            degree: 0,
            coef0: 0.0
        }
        .validate()
        .is_err());
        let err = ocsvm_kernel_from_parts("laplace", None, None, None, 4)
            .unwrap_err()
            .to_string();
        for name in ["rbf", "sigmoid", "linear", "poly"] {
            assert!(err.contains(name), "{err}");
        }
    }

    #[test]
    fn ocsvm_nonconvergence_is_reported_with_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = gaussian_blob(&mut rng, 30, 2, 0.0, 1.0);
        let err = ocsvm_fit(
            &f,
            OcsvmKernel::Rbf { gamma: 1.0 },
            &OcsvmParams {
                nu: 0.3,
                tol: 1e-12,
                max_iter: 2,
            },
            &Standardizer::identity(2),
        )
        .unwrap_err();
        match err {
            Error::Convergence { iterations, residual, .. } => {
                assert_eq!(iterations, 2);
                assert!(residual > 1e-12);
            }
            other => panic!("expected convergence error, got {other}"),
        }
    }

    #[test]
    fn scores_depend_on_features_only_through_standardizer() {
        // Affinely rescale features and hand the detector the matching
        // standardizer: score order must not change.
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let f = gaussian_blob(&mut rng, 50, 3, 1.0, 2.0);
        let s = standardize_fit(&f).unwrap();
        let (a, b) = (2.0, 0.5);
        let scaled = Matrix::from_fn(50, 3, |i, j| a * f.get(i, j) + b);
        let s2 = Standardizer {
            mean: s.mean.iter().map(|m| a * m + b).collect(),
            std: s.std.iter().map(|v| a * v).collect(),
            constant_dims: Vec::new(),
        };
        let m1 = kde_fit(&f, KdeKernel::Gaussian, 2.0, &s).unwrap();
        let m2 = kde_fit(&scaled, KdeKernel::Gaussian, 2.0, &s2).unwrap();
        let queries = gaussian_blob(&mut rng, 30, 3, 1.0, 2.5);
        let s1: Vec<f64> = (0..30)
            .map(|i| kde_score(&m1, queries.row(i)).unwrap())
            .collect();
        let s2v: Vec<f64> = (0..30)
            .map(|i| {
                let q: Vec<f64> = queries.row(i).iter().map(|&v| a * v + b).collect();
                kde_score(&m2, &q).unwrap()
            })
            .collect();
        let argsort = |v: &Vec<f64>| -> Vec<usize> {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&x, &y| v[x].partial_cmp(&v[y]).unwrap());
            idx
        };
        assert_eq!(argsort(&s1), argsort(&s2v));
    }

    #[test]
    fn detector_files_round_trip_and_score_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let f = gaussian_blob(&mut rng, 25, 4, 0.0, 1.0);
        let s = standardize_fit(&f).unwrap();
        let dir = tempfile::tempdir().unwrap();

        let kde = DetectorModel::Kde(kde_fit(&f, KdeKernel::Epanechnikov, 3.0, &s).unwrap());
        let p1 = dir.path().join("kde.bin");
        save_detector(&kde, &p1).unwrap();
        let kde_back = load_detector(&p1).unwrap();
        assert_eq!(kde, kde_back);

        let oc = DetectorModel::Ocsvm(
            ocsvm_fit(
                &f,
                OcsvmKernel::Poly {
                    gamma: 0.25,
                    degree: 3,
                    coef0: 1.0,
                },
                &OcsvmParams::default(),
                &s,
            )
            .unwrap(),
        );
        let p2 = dir.path().join("ocsvm.bin");
        save_detector(&oc, &p2).unwrap();
        let oc_back = load_detector(&p2).unwrap();
        assert_eq!(oc, oc_back);

        let q = vec![0.3, -0.7, 0.2, 1.4];
        assert_eq!(kde.score(&q).unwrap(), kde_back.score(&q).unwrap());
        assert_eq!(oc.score(&q).unwrap(), oc_back.score(&q).unwrap());
    }

    #[test]
    fn detector_file_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        std::fs::write(&path, b"HEADFEA1xx").unwrap();
        assert!(load_detector(&path)
            .unwrap_err()
            .to_string()
            .contains("HEADDET1"));
    }

    fn sweep_fixture(rng: &mut ChaCha8Rng) -> (Matrix, Matrix, Vec<(String, Matrix)>) {
        let train = gaussian_blob(rng, 60, 3, 0.0, 1.0);
        let benign = gaussian_blob(rng, 30, 3, 0.0, 1.0);
        let attacks = vec![
            ("shift".to_string(), gaussian_blob(rng, 30, 3, 3.0, 1.0)),
            ("spread".to_string(), gaussian_blob(rng, 30, 3, 0.0, 4.0)),
        ];
        (train, benign, attacks)
    }

    #[test]
    fn sweep_single_config_equals_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (train, benign, attacks) = sweep_fixture(&mut rng);
        let grid = SweepGrid::Kde {
            kernels: vec![KdeKernel::Gaussian],
            bandwidths: vec![2.0],
        };
        let rows = hyperparameter_sweep(&train, &benign, &attacks, &grid, true).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(rows[0].best);

        let s = standardize_fit(&train).unwrap();
        let m = kde_fit(&train, KdeKernel::Gaussian, 2.0, &s).unwrap();
        let bs: Vec<f64> = (0..30)
            .map(|i| kde_score(&m, benign.row(i)).unwrap())
            .collect();
        let mut pooled = Vec::new();
        for (idx, (_, a)) in attacks.iter().enumerate() {
            let ss: Vec<f64> = (0..30).map(|i| kde_score(&m, a.row(i)).unwrap()).collect();
            let auc = roc_auc(&bs, &ss).unwrap().auc;
            assert!((rows[0].auc_per_attack[idx] - auc).abs() <= 1e-12);
            pooled.extend(ss);
        }
        let overall = roc_auc(&bs, &pooled).unwrap().auc;
        assert!((rows[0].auc_overall - overall).abs() <= 1e-12);
    }

    #[test]
    fn sweep_emits_full_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (train, benign, attacks) = sweep_fixture(&mut rng);
        let kde_rows = hyperparameter_sweep(
            &train,
            &benign,
            &attacks,
            &SweepGrid::Kde {
                kernels: KDE_KERNELS.to_vec(),
                bandwidths: vec![1.0, 2.0, 4.0],
            },
            true,
        )
        .unwrap();
        assert_eq!(kde_rows.len(), 5 * 3);
        assert_eq!(kde_rows.iter().filter(|r| r.best).count(), 1);

        let oc_rows = hyperparameter_sweep(
            &train,
            &benign,
            &attacks,
            &default_ocsvm_grid(3, 1e-6, 100_000),
            true,
        )
        .unwrap();
        assert_eq!(oc_rows.len(), 4 * 9);
        assert_eq!(oc_rows.iter().filter(|r| r.best).count(), 1);
        // The separable fixture should be detectable by the best config.
        let best = oc_rows.iter().find(|r| r.best).unwrap();
        assert!(best.auc_overall > 0.9, "best overall {}", best.auc_overall);
    }

    #[test]
    fn sweep_csv_layout() {
        let rows = vec![SweepRow {
            kernel: "gaussian".into(),
            hyperparameter: 2.0,
            auc_overall: 0.95,
            auc_per_attack: vec![0.9, 1.0],
            converged: true,
            best: true,
        }];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sweep.csv");
        write_sweep_csv(&rows, &["fgsm".into(), "pgd".into()], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "kernel,hyperparameter,auc_overall,auc_fgsm,auc_pgd,converged,best"
        );
        assert_eq!(lines.next().unwrap(), "gaussian,2,0.95,0.9,1,true,1");
    }
}
