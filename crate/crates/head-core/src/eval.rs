//! Dataset ingestion, ROC-AUC evaluation, and end-to-end experiment
//! orchestration: train/load a model, fit the spectral basis and detector on
//! benign data only, generate attacks, score, and emit CSV reports.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write as _};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{
    attack_dataset, noise_dataset, AttackConfig, AttackKind, NoiseConfig, NoiseKind,
};
use crate::binio;
use crate::curvature::{head_feature, hessian_feature, save_features};
use crate::detect::{
    kde_fit, ocsvm_fit, ocsvm_kernel_from_parts, save_detector, standardize_fit, DetectorModel,
    KdeKernel, OcsvmParams, Standardizer,
};
use crate::error::{Error, Result, StageExt};
use crate::linalg::{mean_variance, Matrix};
use crate::net::{accuracy, save_model, train_sgd, NetworkModel, NetworkSpec, TrainConfig};
use crate::spectral::{fit_basis, lscf, save_basis, EigenBasis};

pub const TEN_MAGIC: &[u8; 8] = b"HEADTEN1";
pub const CIFAR_RECORD_BYTES: usize = 3073;
pub const CIFAR_PIXELS: usize = 3072;

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

/// A labelled sample set; rows of `samples` live in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub samples: Matrix,
    pub labels: Vec<u16>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, samples: Matrix, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != samples.rows() {
            return Err(Error::Shape(format!(
                "{} labels for {} samples",
                labels.len(),
                samples.rows()
            )));
        }
        Ok(Dataset {
            name: name.into(),
            samples,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.samples.cols()
    }

    pub fn validate_labels(&self, classes: usize) -> Result<()> {
        if let Some((i, &l)) = self
            .labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l as usize >= classes)
        {
            return Err(Error::Index(format!(
                "label {l} at sample {i} exceeds class count {classes}"
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// ROC AUC
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct RocResult {
    pub auc: f64,
    /// (false-positive rate, true-positive rate) points, one per distinct
    /// threshold, from (0,0) to (1,1).
    pub curve: Vec<(f64, f64)>,
    pub n_benign: usize,
    pub n_adv: usize,
}

/// Mann–Whitney AUC with half-credit ties: the probability that a random
/// adversarial score exceeds a random benign score. Computed with midranks,
/// which is algebraically the pair-counting statistic.
pub fn roc_auc(benign: &[f64], adv: &[f64]) -> Result<RocResult> {
    if benign.is_empty() || adv.is_empty() {
        return Err(Error::DegenerateData(format!(
            "ROC needs both score sets nonempty (benign {}, adv {})",
            benign.len(),
            adv.len()
        )));
    }
    if benign.iter().chain(adv).any(|v| !v.is_finite()) {
        return Err(Error::DegenerateData("non-finite score".into()));
    }
    let nb = benign.len();
    let na = adv.len();
    let mut all: Vec<(f64, bool)> = benign
        .iter()
        .map(|&s| (s, false))
        .chain(adv.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

    let mut rank_sum_adv = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // Ranks are 1-based; a tie group spanning ranks i+1..=j averages out.
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for item in &all[i..j] {
            if item.1 {
                rank_sum_adv += avg_rank;
            }
        }
        i = j;
    }
    let auc = (rank_sum_adv - (na * (na + 1)) as f64 / 2.0) / (na as f64 * nb as f64);

    // ROC curve: classify "adversarial" when score >= threshold, thresholds
    // swept over distinct scores from high to low. Tie groups become single
    // segments, whose trapezoids reproduce the half-credit convention.
    let mut curve = vec![(0.0, 0.0)];
    let mut false_pos = 0usize;
    let mut true_pos = 0usize;
    let mut k = all.len();
    while k > 0 {
        let mut start = k;
        while start > 0 && all[start - 1].0 == all[k - 1].0 {
            start -= 1;
        }
        for item in &all[start..k] {
            if item.1 {
                true_pos += 1;
            } else {
                false_pos += 1;
            }
        }
        curve.push((false_pos as f64 / nb as f64, true_pos as f64 / na as f64));
        k = start;
    }
    Ok(RocResult {
        auc,
        curve,
        n_benign: nb,
        n_adv: na,
    })
}

// ---------------------------------------------------------------------------
// File formats: CIFAR-10 batches and tensor files
// ---------------------------------------------------------------------------

/// Standard CIFAR-10 binary batch: records of 1 label byte + 3072 pixel
/// bytes (R plane, G plane, B plane of a 32×32 image); pixels scaled to
/// [0, 1] by /255. An empty file yields an empty dataset (the CLI warns).
pub fn load_cifar10_batch(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "cifar10".into());
    if bytes.is_empty() {
        return Dataset::new(name, Matrix::zeros(0, CIFAR_PIXELS), Vec::new());
    }
    if bytes.len() % CIFAR_RECORD_BYTES != 0 {
        let boundary = (bytes.len() / CIFAR_RECORD_BYTES) * CIFAR_RECORD_BYTES;
        return Err(Error::Format(format!(
            "CIFAR-10 batch is {} bytes, not a multiple of {CIFAR_RECORD_BYTES}; \
             last whole record ends at byte {boundary}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * CIFAR_PIXELS);
    for rec in 0..n {
        let off = rec * CIFAR_RECORD_BYTES;
        let label = bytes[off];
        if label > 9 {
            return Err(Error::Format(format!(
                "record {rec} (byte {off}) has label byte {label}, expected 0..=9"
            )));
        }
        labels.push(label as u16);
        data.extend(
            bytes[off + 1..off + CIFAR_RECORD_BYTES]
                .iter()
                .map(|&b| b as f64 / 255.0),
        );
    }
    Dataset::new(name, Matrix::from_vec(n, CIFAR_PIXELS, data)?, labels)
}

/// Tensor file: magic, u32 N, u32 m, u8 has-labels, N u16 labels when
/// flagged, then row-major f64 entries. Round-trips bit-exact.
pub fn save_tensor_file(path: &Path, samples: &Matrix, labels: Option<&[u16]>) -> Result<()> {
    if let Some(l) = labels {
        if l.len() != samples.rows() {
            return Err(Error::Shape(format!(
                "{} labels for {} rows",
                l.len(),
                samples.rows()
            )));
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    binio::write_magic(&mut w, TEN_MAGIC)?;
    binio::write_u32(&mut w, samples.rows() as u32)?;
    binio::write_u32(&mut w, samples.cols() as u32)?;
    binio::write_u8(&mut w, labels.is_some() as u8)?;
    if let Some(l) = labels {
        for &v in l {
            binio::write_u16(&mut w, v)?;
        }
    }
    binio::write_f64_slice(&mut w, samples.as_slice())?;
    Ok(())
}

pub fn load_tensor_file(path: &Path) -> Result<(Matrix, Option<Vec<u16>>)> {
    let mut r = BufReader::new(File::open(path)?);
    binio::expect_magic(&mut r, TEN_MAGIC)?;
    let n = binio::read_len(&mut r, "tensor rows", 1 << 30)?;
    let m = binio::read_len(&mut r, "tensor width", 1 << 26)?;
    let flag = binio::read_u8(&mut r)?;
    let labels = match flag {
        0 => None,
        1 => {
            let mut l = Vec::with_capacity(n);
            for _ in 0..n {
                l.push(binio::read_u16(&mut r)?);
            }
            Some(l)
        }
        other => {
            return Err(Error::Format(format!(
                "has-labels flag must be 0 or 1, got {other}"
            )))
        }
    };
    let data = binio::read_f64_vec(&mut r, n * m)?;
    binio::expect_eof(&mut r)?;
    Ok((Matrix::from_vec(n, m, data)?, labels))
}

/// Like `load_tensor_file`, but the file must carry labels.
pub fn load_labelled_tensor(path: &Path) -> Result<(Matrix, Vec<u16>)> {
    let (samples, labels) = load_tensor_file(path)?;
    labels.ok_or_else(|| {
        Error::Format(format!(
            "{} has no labels but a labelled dataset is required",
            path.display()
        ))
    }).map(|l| (samples, l))
}

// ---------------------------------------------------------------------------
// Synthetic dataset
// ---------------------------------------------------------------------------

/// Recipe for the synthetic image-like dataset: class templates and sample
/// variation both live on a low-frequency 2D-DCT manifold, plus a small
/// isotropic pixel noise floor. Benign data thus has a few large covariance
/// eigenvalues (the manifold) and a flat tail of tiny ones — the regime the
/// spectral features rely on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticRecipe {
    /// Flattened side² pixels; must be a perfect square.
    #[serde(default = "default_input_dim")]
    pub input_dim: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    /// Number of low-frequency DCT components spanned (DC included).
    #[serde(default = "default_manifold_rank")]
    pub manifold_rank: usize,
    /// Per-component std of sample variation around the class template.
    #[serde(default = "default_manifold_std")]
    pub manifold_std: f64,
    /// Per-component std of the class template coefficients.
    #[serde(default = "default_template_spread")]
    pub template_spread: f64,
    /// Isotropic per-pixel noise std (the off-manifold floor).
    #[serde(default = "default_pixel_noise")]
    pub pixel_noise: f64,
}

fn default_input_dim() -> usize {
    256
}
fn default_classes() -> usize {
    10
}
fn default_n_train() -> usize {
    2500
}
fn default_n_test() -> usize {
    1000
}
fn default_manifold_rank() -> usize {
    24
}
fn default_manifold_std() -> f64 {
    0.06
}
fn default_template_spread() -> f64 {
    0.18
}
fn default_pixel_noise() -> f64 {
    6.0 / 255.0
}

impl Default for SyntheticRecipe {
    fn default() -> Self {
        SyntheticRecipe {
            input_dim: default_input_dim(),
            classes: default_classes(),
            n_train: default_n_train(),
            n_test: default_n_test(),
            manifold_rank: default_manifold_rank(),
            manifold_std: default_manifold_std(),
            template_spread: default_template_spread(),
            pixel_noise: default_pixel_noise(),
        }
    }
}

impl SyntheticRecipe {
    pub fn validate(&self) -> Result<()> {
        let side = (self.input_dim as f64).sqrt().round() as usize;
        if side * side != self.input_dim || side == 0 {
            return Err(Error::Config(format!(
                "synthetic input_dim {} is not a perfect square",
                self.input_dim
            )));
        }
        if self.classes < 2 {
            return Err(Error::Config("synthetic classes must be >= 2".into()));
        }
        if self.n_train < 2 || self.n_test < 1 {
            return Err(Error::Config(
                "synthetic needs n_train >= 2 and n_test >= 1".into(),
            ));
        }
        if self.manifold_rank == 0 || self.manifold_rank > self.input_dim {
            return Err(Error::Config(format!(
                "manifold_rank {} out of 1..={}",
                self.manifold_rank, self.input_dim
            )));
        }
        for (name, v) in [
            ("manifold_std", self.manifold_std),
            ("template_spread", self.template_spread),
            ("pixel_noise", self.pixel_noise),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Orthonormal 2D DCT-II basis restricted to the `rank` lowest frequencies
/// (ordered by u+v, then u), as an input_dim × rank matrix.
pub fn dct_basis(side: usize, rank: usize) -> Matrix {
    let mut freqs: Vec<(usize, usize)> = (0..side)
        .flat_map(|u| (0..side).map(move |v| (u, v)))
        .collect();
    freqs.sort_by_key(|&(u, v)| (u + v, u, v));
    freqs.truncate(rank);
    let alpha = |f: usize| -> f64 {
        if f == 0 {
            (1.0 / side as f64).sqrt()
        } else {
            (2.0 / side as f64).sqrt()
        }
    };
    Matrix::from_fn(side * side, rank, |p, k| {
        let (i, j) = (p / side, p % side);
        let (u, v) = freqs[k];
        let ci = (std::f64::consts::PI * (2 * i + 1) as f64 * u as f64 / (2 * side) as f64).cos();
        let cj = (std::f64::consts::PI * (2 * j + 1) as f64 * v as f64 / (2 * side) as f64).cos();
        alpha(u) * alpha(v) * ci * cj
    })
}

/// Generates (train, test). Class templates are drawn once from the seed;
/// train and test samples come from separate RNG streams of the same seed,
/// cycling through classes for exact balance.
pub fn synthetic_dataset(recipe: &SyntheticRecipe, seed: u64) -> Result<(Dataset, Dataset)> {
    recipe.validate()?;
    let side = (recipe.input_dim as f64).sqrt().round() as usize;
    let basis = dct_basis(side, recipe.manifold_rank);
    let mut template_rng = ChaCha8Rng::seed_from_u64(seed);
    let templates: Vec<Vec<f64>> = (0..recipe.classes)
        .map(|_| {
            (0..recipe.manifold_rank)
                .map(|_| recipe.template_spread * template_rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();

    let generate = |n: usize, stream: u64, name: &str| -> Result<Dataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let mut labels = Vec::with_capacity(n);
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % recipe.classes;
            labels.push(class as u16);
            let coeff: Vec<f64> = templates[class]
                .iter()
                .map(|&t| t + recipe.manifold_std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let mut pixels = basis.matvec(&coeff);
            for p in pixels.iter_mut() {
                *p = (0.5
                    + *p
                    + recipe.pixel_noise * rng.sample::<f64, _>(StandardNormal))
                .clamp(0.0, 1.0);
            }
            rows.push(pixels);
        }
        Dataset::new(name, Matrix::from_rows(&rows)?, labels)
    };

    Ok((
        generate(recipe.n_train, 1, "synthetic-train")?,
        generate(recipe.n_test, 2, "synthetic-test")?,
    ))
}

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    /// Spectral projections followed by curvature moduli (the default).
    Head,
    /// Spectral projections only.
    Lscf,
    /// Curvature moduli only.
    Hf,
}

impl Default for FeatureKind {
    fn default() -> Self {
        FeatureKind::Head
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSource {
    /// Path to a saved network file.
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// Training recipe used when no path is given.
    #[serde(default)]
    pub train: Option<TrainRecipe>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRecipe {
    pub dims: Vec<usize>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
}

fn default_epochs() -> usize {
    30
}
fn default_batch_size() -> usize {
    32
}
fn default_learning_rate() -> f64 {
    0.05
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Tensor,
    Cifar10,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSource {
    #[serde(default)]
    pub train_path: Option<PathBuf>,
    #[serde(default)]
    pub test_path: Option<PathBuf>,
    #[serde(default = "default_format")]
    pub format: DataFormat,
    #[serde(default)]
    pub synthetic: Option<SyntheticRecipe>,
}

fn default_format() -> DataFormat {
    DataFormat::Tensor
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectorKind {
    Kde,
    Ocsvm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    #[serde(default = "default_detector_kind")]
    pub kind: DetectorKind,
    /// KDE: gaussian/epanechnikov/exponential/linear/uniform.
    /// OCSVM: rbf/sigmoid/linear/poly.
    #[serde(default = "default_kernel")]
    pub kernel: String,
    #[serde(default = "default_bandwidth")]
    pub bandwidth: f64,
    #[serde(default = "default_nu")]
    pub nu: f64,
    /// OCSVM kernel γ; defaults to 1/feature_dim when omitted.
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default = "default_degree")]
    pub degree: u32,
    #[serde(default)]
    pub coef0: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

fn default_detector_kind() -> DetectorKind {
    DetectorKind::Kde
}
fn default_kernel() -> String {
    "gaussian".into()
}
fn default_bandwidth() -> f64 {
    5.0
}
fn default_nu() -> f64 {
    0.1
}
fn default_degree() -> u32 {
    3
}
fn default_tol() -> f64 {
    1e-6
}
fn default_max_iter() -> usize {
    100_000
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            kind: default_detector_kind(),
            kernel: default_kernel(),
            bandwidth: default_bandwidth(),
            nu: default_nu(),
            gamma: None,
            degree: default_degree(),
            coef0: 0.0,
            tol: default_tol(),
            max_iter: default_max_iter(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub kind: String,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub step_size: Option<f64>,
    #[serde(default)]
    pub random_start: Option<bool>,
    /// Report label; defaults to the kind (pgd includes its step count).
    #[serde(default)]
    pub name: Option<String>,
}

fn default_eps() -> f64 {
    8.0 / 255.0
}

impl AttackSpec {
    pub fn resolve(&self, seed: u64) -> Result<(String, AttackConfig)> {
        let kind: AttackKind = self.kind.parse()?;
        let mut cfg = match kind {
            AttackKind::Fgsm => AttackConfig::fgsm(self.eps),
            AttackKind::Bim => AttackConfig::bim(self.eps),
            AttackKind::Pgd => AttackConfig::pgd(self.eps),
        };
        if let Some(s) = self.steps {
            cfg.steps = s;
        }
        if let Some(s) = self.step_size {
            cfg.step_size = s;
        }
        if let Some(r) = self.random_start {
            cfg.random_start = r;
        }
        cfg.seed = seed;
        cfg.validate()?;
        let name = self.name.clone().unwrap_or_else(|| match kind {
            AttackKind::Pgd => format!("pgd{}", cfg.steps),
            _ => kind.name().to_string(),
        });
        Ok((name, cfg))
    }
}

fn default_attacks() -> Vec<AttackSpec> {
    let base = |kind: &str| AttackSpec {
        kind: kind.into(),
        eps: default_eps(),
        steps: None,
        step_size: None,
        random_start: None,
        name: None,
    };
    vec![base("fgsm"), base("bim"), base("pgd")]
}

pub fn default_noise_levels() -> Vec<f64> {
    [1.0, 2.0, 4.0, 8.0, 16.0, 32.0]
        .iter()
        .map(|v| v / 255.0)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_lscf_dim")]
    pub lscf_dim: usize,
    /// Center the covariance before the eigendecomposition.
    #[serde(default)]
    pub center_basis: bool,
    /// Z-score features before the detector (ablation switch).
    #[serde(default = "default_standardize")]
    pub standardize: bool,
    #[serde(default)]
    pub features: FeatureKind,
    pub model: ModelSource,
    pub dataset: DatasetSource,
    #[serde(default)]
    pub detector: DetectorConfig,
    #[serde(default = "default_attacks", rename = "attack")]
    pub attacks: Vec<AttackSpec>,
    #[serde(default = "default_noise_levels")]
    pub noise_levels: Vec<f64>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("head-out")
}
fn default_lscf_dim() -> usize {
    32
}
fn default_standardize() -> bool {
    true
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lscf_dim == 0 {
            return Err(Error::Config("lscf_dim must be >= 1".into()));
        }
        match (&self.model.path, &self.model.train) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "model: give either path or train recipe, not both".into(),
                ))
            }
            (None, None) => {
                return Err(Error::Config(
                    "model: either path or train recipe is required".into(),
                ))
            }
            _ => {}
        }
        let has_paths = self.dataset.train_path.is_some() || self.dataset.test_path.is_some();
        match (&self.dataset.synthetic, has_paths) {
            (Some(_), true) => {
                return Err(Error::Config(
                    "dataset: give either paths or a synthetic recipe, not both".into(),
                ))
            }
            (None, false) => {
                return Err(Error::Config(
                    "dataset: either train/test paths or a synthetic recipe is required".into(),
                ))
            }
            (None, true) => {
                if self.dataset.train_path.is_none() || self.dataset.test_path.is_none() {
                    return Err(Error::Config(
                        "dataset: both train_path and test_path are required".into(),
                    ));
                }
            }
            (Some(recipe), false) => recipe.validate()?,
        }
        if let Some(recipe) = &self.model.train {
            if recipe.dims.len() < 2 {
                return Err(Error::Config(
                    "model.train.dims needs at least input and output".into(),
                ));
            }
        }
        if self.noise_levels.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
            return Err(Error::Config("noise levels must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Reads and validates a TOML experiment config.
pub fn load_experiment_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    let cfg: ExperimentConfig = toml::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// Feature extraction
// ---------------------------------------------------------------------------

/// Extracts one feature row per sample, in parallel, in sample order.
pub fn extract_features(
    model: &NetworkModel,
    basis: &EigenBasis,
    d: usize,
    samples: &Matrix,
    kind: FeatureKind,
) -> Result<Matrix> {
    let rows: Vec<Vec<f64>> = (0..samples.rows())
        .into_par_iter()
        .map(|i| {
            let x = samples.row(i);
            match kind {
                FeatureKind::Head => head_feature(x, basis, d, model).map(|f| f.values),
                FeatureKind::Lscf => lscf(x, basis, d),
                FeatureKind::Hf => hessian_feature(model, x).map(|f| f.moduli),
            }
        })
        .collect::<Result<_>>()?;
    Matrix::from_rows(&rows)
}

fn score_matrix(detector: &DetectorModel, features: &Matrix) -> Result<Vec<f64>> {
    (0..features.rows())
        .into_par_iter()
        .map(|i| detector.score(features.row(i)))
        .collect()
}

// ---------------------------------------------------------------------------
// Pipeline and reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AttackArtifact {
    pub name: String,
    pub config: AttackConfig,
    pub adversarial: Matrix,
    pub features: Matrix,
    pub scores: Vec<f64>,
    pub accuracy_under_attack: f64,
}

/// Everything an experiment produces in memory; reports and the noise table
/// are derived from this.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub seed: u64,
    pub feature_kind: FeatureKind,
    pub lscf_dim: usize,
    pub model: NetworkModel,
    pub epoch_losses: Vec<f64>,
    pub basis: EigenBasis,
    pub detector: DetectorModel,
    pub standardizer: Standardizer,
    pub train: Dataset,
    pub test: Dataset,
    pub train_features: Matrix,
    pub test_features: Matrix,
    pub benign_scores: Vec<f64>,
    pub attacks: Vec<AttackArtifact>,
    pub clean_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome {
    pub name: String,
    pub n_benign: usize,
    pub n_adv: usize,
    pub auc: f64,
    pub accuracy_under_attack: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub clean_accuracy: f64,
    pub benign_score_mean: f64,
    pub benign_score_std: f64,
    pub benign_score_min: f64,
    pub benign_score_max: f64,
    pub attacks: Vec<AttackOutcome>,
    /// Union of all adversarial sets vs benign (the headline number).
    pub overall_pooled: Option<f64>,
    /// Mean of per-attack AUCs.
    pub overall_macro: Option<f64>,
}

/// Runs every pipeline stage without touching the filesystem. Adversarial
/// and noisy data never reach a fit function: the basis, standardizer, and
/// detector only ever see `train`.
pub fn build_pipeline(cfg: &ExperimentConfig) -> Result<Pipeline> {
    cfg.validate()?;

    let (train, test) = (|| -> Result<(Dataset, Dataset)> {
        if let Some(recipe) = &cfg.dataset.synthetic {
            synthetic_dataset(recipe, cfg.seed)
        } else {
            let load = |p: &PathBuf| -> Result<Dataset> {
                match cfg.dataset.format {
                    DataFormat::Cifar10 => load_cifar10_batch(p),
                    DataFormat::Tensor => {
                        let (samples, labels) = load_labelled_tensor(p)?;
                        let name = p
                            .file_stem()
                            .map(|s| s.to_string_lossy().into_owned())
                            .unwrap_or_else(|| "dataset".into());
                        Dataset::new(name, samples, labels)
                    }
                }
            };
            Ok((
                load(cfg.dataset.train_path.as_ref().unwrap())?,
                load(cfg.dataset.test_path.as_ref().unwrap())?,
            ))
        }
    })()
    .stage("dataset")?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::DegenerateData(format!(
            "need nonempty train and test sets (got {} / {})",
            train.len(),
            test.len()
        ))
        .in_stage("dataset"));
    }
    if train.dim() != test.dim() {
        return Err(Error::Shape(format!(
            "train width {} != test width {}",
            train.dim(),
            test.dim()
        ))
        .in_stage("dataset"));
    }

    let (model, epoch_losses) = (|| -> Result<(NetworkModel, Vec<f64>)> {
        if let Some(path) = &cfg.model.path {
            Ok((crate::net::load_model(path)?, Vec::new()))
        } else {
            let recipe = cfg.model.train.as_ref().unwrap();
            let spec = NetworkSpec::new(recipe.dims.clone())?;
            let init = NetworkModel::random(spec, cfg.seed);
            let outcome = train_sgd(
                &init,
                &train.samples,
                &train.labels,
                &TrainConfig {
                    epochs: recipe.epochs,
                    batch_size: recipe.batch_size,
                    learning_rate: recipe.learning_rate,
                    seed: cfg.seed,
                },
            )?;
            Ok((outcome.model, outcome.epoch_losses))
        }
    })()
    .stage("model")?;
    if model.input_dim() != train.dim() {
        return Err(Error::Shape(format!(
            "model input dim {} != dataset width {}",
            model.input_dim(),
            train.dim()
        ))
        .in_stage("model"));
    }
    train.validate_labels(model.n_classes()).stage("model")?;
    test.validate_labels(model.n_classes()).stage("model")?;
    let clean_accuracy = accuracy(&model, &test.samples, &test.labels).stage("model")?;

    let basis = fit_basis(&train.samples, cfg.center_basis).stage("basis")?;
    // The configured width is clamped to the input dimension; lscf itself
    // rejects out-of-range widths.
    let lscf_dim = cfg.lscf_dim.min(basis.dim());

    let train_features =
        extract_features(&model, &basis, lscf_dim, &train.samples, cfg.features)
            .stage("features")?;
    let test_features = extract_features(&model, &basis, lscf_dim, &test.samples, cfg.features)
        .stage("features")?;

    let (standardizer, detector) = (|| -> Result<(Standardizer, DetectorModel)> {
        let standardizer = if cfg.standardize {
            standardize_fit(&train_features)?
        } else {
            Standardizer::identity(train_features.cols())
        };
        let det = &cfg.detector;
        let detector = match det.kind {
            DetectorKind::Kde => {
                let kernel: KdeKernel = det.kernel.parse()?;
                DetectorModel::Kde(kde_fit(&train_features, kernel, det.bandwidth, &standardizer)?)
            }
            DetectorKind::Ocsvm => {
                let kernel = ocsvm_kernel_from_parts(
                    &det.kernel,
                    det.gamma,
                    Some(det.degree),
                    Some(det.coef0),
                    train_features.cols(),
                )?;
                DetectorModel::Ocsvm(ocsvm_fit(
                    &train_features,
                    kernel,
                    &OcsvmParams {
                        nu: det.nu,
                        tol: det.tol,
                        max_iter: det.max_iter,
                    },
                    &standardizer,
                )?)
            }
        };
        Ok((standardizer, detector))
    })()
    .stage("detector")?;

    let mut attacks = Vec::with_capacity(cfg.attacks.len());
    for spec in &cfg.attacks {
        let artifact = (|| -> Result<AttackArtifact> {
            let (name, attack_cfg) = spec.resolve(cfg.seed)?;
            let adversarial = attack_dataset(&model, &test.samples, &test.labels, &attack_cfg)?;
            let accuracy_under_attack = accuracy(&model, &adversarial, &test.labels)?;
            let features = extract_features(&model, &basis, lscf_dim, &adversarial, cfg.features)?;
            let scores = score_matrix(&detector, &features)?;
            Ok(AttackArtifact {
                name,
                config: attack_cfg,
                adversarial,
                features,
                scores,
                accuracy_under_attack,
            })
        })()
        .stage("attack")?;
        attacks.push(artifact);
    }

    let benign_scores = score_matrix(&detector, &test_features).stage("score")?;

    Ok(Pipeline {
        seed: cfg.seed,
        feature_kind: cfg.features,
        lscf_dim,
        model,
        epoch_losses,
        basis,
        detector,
        standardizer,
        train,
        test,
        train_features,
        test_features,
        benign_scores,
        attacks,
        clean_accuracy,
    })
}

/// Summarizes a built pipeline into per-attack AUCs plus pooled and macro
/// overalls (no AUC rows when the config had no attacks).
pub fn summarize(pipeline: &Pipeline) -> Result<ExperimentReport> {
    let b = &pipeline.benign_scores;
    let (mean, var) = mean_variance(b);
    let min = b.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = b.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

    let mut attacks = Vec::new();
    let mut pooled_scores = Vec::new();
    for art in &pipeline.attacks {
        let roc = roc_auc(b, &art.scores)?;
        attacks.push(AttackOutcome {
            name: art.name.clone(),
            n_benign: roc.n_benign,
            n_adv: roc.n_adv,
            auc: roc.auc,
            accuracy_under_attack: art.accuracy_under_attack,
        });
        pooled_scores.extend_from_slice(&art.scores);
    }
    let (overall_pooled, overall_macro) = if attacks.is_empty() {
        (None, None)
    } else {
        let pooled = roc_auc(b, &pooled_scores)?.auc;
        let macro_avg = attacks.iter().map(|a| a.auc).sum::<f64>() / attacks.len() as f64;
        (Some(pooled), Some(macro_avg))
    };
    Ok(ExperimentReport {
        clean_accuracy: pipeline.clean_accuracy,
        benign_score_mean: mean,
        benign_score_std: var.sqrt(),
        benign_score_min: min,
        benign_score_max: max,
        attacks,
        overall_pooled,
        overall_macro,
    })
}

pub fn write_report_csv(report: &ExperimentReport, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "attack,n_benign,n_adv,auc")?;
    let mut total_adv = 0usize;
    for a in &report.attacks {
        writeln!(w, "{},{},{},{}", a.name, a.n_benign, a.n_adv, a.auc)?;
        total_adv += a.n_adv;
    }
    if let (Some(pooled), Some(macro_avg)) = (report.overall_pooled, report.overall_macro) {
        let nb = report.attacks.first().map_or(0, |a| a.n_benign);
        writeln!(w, "overall_pooled,{nb},{total_adv},{pooled}")?;
        writeln!(w, "overall_macro,{nb},{total_adv},{macro_avg}")?;
    }
    Ok(())
}

fn write_scores_csv(pipeline: &Pipeline, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "sample_id,score,set")?;
    for (i, s) in pipeline.benign_scores.iter().enumerate() {
        writeln!(w, "{i},{s},benign")?;
    }
    for art in &pipeline.attacks {
        for (i, s) in art.scores.iter().enumerate() {
            writeln!(w, "{i},{s},{}", art.name)?;
        }
    }
    Ok(())
}

pub fn write_attack_manifest(pipeline: &Pipeline, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(
        w,
        "name,kind,eps,steps,step_size,random_start,seed,accuracy_under_attack"
    )?;
    for art in &pipeline.attacks {
        let c = &art.config;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            art.name,
            c.kind.name(),
            c.eps,
            c.steps,
            c.step_size,
            c.random_start,
            c.seed,
            art.accuracy_under_attack
        )?;
    }
    Ok(())
}

fn write_summary_csv(pipeline: &Pipeline, report: &ExperimentReport, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "key,value")?;
    writeln!(w, "seed,{}", pipeline.seed)?;
    writeln!(w, "n_train,{}", pipeline.train.len())?;
    writeln!(w, "n_test,{}", pipeline.test.len())?;
    writeln!(w, "input_dim,{}", pipeline.train.dim())?;
    writeln!(w, "lscf_dim,{}", pipeline.lscf_dim)?;
    writeln!(w, "feature_width,{}", pipeline.train_features.cols())?;
    writeln!(w, "detector,{}", pipeline.detector.kind_name())?;
    writeln!(w, "clean_accuracy,{}", pipeline.clean_accuracy)?;
    writeln!(w, "benign_score_mean,{}", report.benign_score_mean)?;
    writeln!(w, "benign_score_std,{}", report.benign_score_std)?;
    writeln!(w, "benign_score_min,{}", report.benign_score_min)?;
    writeln!(w, "benign_score_max,{}", report.benign_score_max)?;
    Ok(())
}

pub const INCOMPLETE_MARKER: &str = "INCOMPLETE";

/// Full experiment: build the pipeline, summarize, and write every artifact
/// (model, basis, detector, features, adversarial sets, scores, report) to
/// the output directory. An INCOMPLETE marker file exists while the run is
/// in flight and is removed on success, so aborted runs are recognizable.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(Pipeline, ExperimentReport)> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.output_dir)
        .map_err(Error::from)
        .stage("artifacts")?;
    let marker = cfg.output_dir.join(INCOMPLETE_MARKER);
    std::fs::write(&marker, b"experiment in progress\n")
        .map_err(Error::from)
        .stage("artifacts")?;

    let pipeline = build_pipeline(cfg)?;
    let report = summarize(&pipeline).stage("score")?;

    (|| -> Result<()> {
        let dir = &cfg.output_dir;
        save_model(&pipeline.model, &dir.join("model.bin"))?;
        save_basis(&pipeline.basis, &dir.join("basis.bin"))?;
        save_detector(&pipeline.detector, &dir.join("detector.bin"))?;
        save_features(&pipeline.train_features, &dir.join("features-train.bin"))?;
        save_features(&pipeline.test_features, &dir.join("features-test.bin"))?;
        for art in &pipeline.attacks {
            save_tensor_file(
                &dir.join(format!("adv-{}.ten", art.name)),
                &art.adversarial,
                Some(&pipeline.test.labels),
            )?;
            save_features(&art.features, &dir.join(format!("features-{}.bin", art.name)))?;
        }
        write_attack_manifest(&pipeline, &dir.join("attacks.csv"))?;
        write_scores_csv(&pipeline, &dir.join("scores.csv"))?;
        write_report_csv(&report, &dir.join("report.csv"))?;
        write_summary_csv(&pipeline, &report, &dir.join("summary.csv"))?;
        std::fs::remove_file(&marker)?;
        Ok(())
    })()
    .stage("artifacts")?;

    Ok((pipeline, report))
}

// ---------------------------------------------------------------------------
// Noise robustness
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseRow {
    pub noise: NoiseKind,
    pub level: f64,
    pub auc: f64,
    /// AUC lost relative to the previous level (the clean run for the first).
    pub drop: f64,
}

/// Re-scores the pooled benign-vs-adversarial AUC with noisy benign test
/// inputs, per noise kind and level. The detector stays exactly as fitted on
/// clean benign data; only the benign test side is perturbed. Level 0
/// reproduces the clean AUC bit-for-bit.
pub fn noise_robustness(pipeline: &Pipeline, levels: &[f64]) -> Result<Vec<NoiseRow>> {
    if pipeline.attacks.is_empty() {
        return Err(Error::InvalidArgument(
            "noise robustness needs at least one attack set".into(),
        ));
    }
    let pooled: Vec<f64> = pipeline
        .attacks
        .iter()
        .flat_map(|a| a.scores.iter().copied())
        .collect();
    let clean_auc = roc_auc(&pipeline.benign_scores, &pooled)?.auc;

    let mut rows = Vec::with_capacity(levels.len() * 2);
    for kind in [NoiseKind::Gaussian, NoiseKind::Uniform] {
        let mut previous = clean_auc;
        for &level in levels {
            let auc = if level == 0.0 {
                clean_auc
            } else {
                let cfg = NoiseConfig {
                    kind,
                    level,
                    clamp: (0.0, 1.0),
                    seed: pipeline.seed,
                };
                let noisy = noise_dataset(&pipeline.test.samples, &cfg)?;
                let features = extract_features(
                    &pipeline.model,
                    &pipeline.basis,
                    pipeline.lscf_dim,
                    &noisy,
                    pipeline.feature_kind,
                )?;
                let scores = score_matrix(&pipeline.detector, &features)?;
                roc_auc(&scores, &pooled)?.auc
            };
            rows.push(NoiseRow {
                noise: kind,
                level,
                auc,
                drop: previous - auc,
            });
            previous = auc;
        }
    }
    Ok(rows)
}

pub fn write_noise_csv(rows: &[NoiseRow], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "noise,level,auc,drop")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.noise.name(), r.level, r.auc, r.drop)?;
    }
    Ok(())
}
