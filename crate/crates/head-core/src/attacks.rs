//! Gradient-based l∞ attacks (FGSM, BIM, PGD) and benign noise generators.
//! These only ever touch evaluation data — detector training never sees
//! their output.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::net::NetworkModel;

pub const DEFAULT_EPS: f64 = 8.0 / 255.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackKind {
    Fgsm,
    Bim,
    Pgd,
}

impl AttackKind {
    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Bim => "bim",
            AttackKind::Pgd => "pgd",
        }
    }
}

impl std::str::FromStr for AttackKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fgsm" => Ok(AttackKind::Fgsm),
            "bim" => Ok(AttackKind::Bim),
            "pgd" => Ok(AttackKind::Pgd),
            other => Err(Error::InvalidArgument(format!(
                "unknown attack kind {other:?}; valid: fgsm, bim, pgd"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// l∞ budget in input units.
    pub eps: f64,
    pub steps: usize,
    pub step_size: f64,
    /// PGD only: start from a uniform point inside the eps-ball.
    pub random_start: bool,
    pub clamp: (f64, f64),
    pub seed: u64,
}

impl AttackConfig {
    pub fn fgsm(eps: f64) -> Self {
        AttackConfig {
            kind: AttackKind::Fgsm,
            eps,
            steps: 1,
            step_size: eps,
            random_start: false,
            clamp: (0.0, 1.0),
            seed: 0,
        }
    }

    pub fn bim(eps: f64) -> Self {
        AttackConfig {
            kind: AttackKind::Bim,
            eps,
            steps: 10,
            step_size: eps / 4.0,
            random_start: false,
            clamp: (0.0, 1.0),
            seed: 0,
        }
    }

    pub fn pgd(eps: f64) -> Self {
        AttackConfig {
            kind: AttackKind::Pgd,
            eps,
            steps: 10,
            step_size: eps / 4.0,
            random_start: true,
            clamp: (0.0, 1.0),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "attack eps must be positive, got {}",
                self.eps
            )));
        }
        if self.steps == 0 {
            return Err(Error::InvalidArgument("attack steps must be >= 1".into()));
        }
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "attack step_size must be positive, got {}",
                self.step_size
            )));
        }
        if !(self.clamp.0 < self.clamp.1) {
            return Err(Error::InvalidArgument(format!(
                "clamp range ({}, {}) is empty",
                self.clamp.0, self.clamp.1
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    Gaussian,
    Uniform,
}

impl NoiseKind {
    pub fn name(&self) -> &'static str {
        match self {
            NoiseKind::Gaussian => "gaussian",
            NoiseKind::Uniform => "uniform",
        }
    }
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(NoiseKind::Gaussian),
            "uniform" => Ok(NoiseKind::Uniform),
            other => Err(Error::InvalidArgument(format!(
                "unknown noise kind {other:?}; valid: gaussian, uniform"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseConfig {
    pub kind: NoiseKind,
    /// Std for gaussian, max magnitude for uniform.
    pub level: f64,
    pub clamp: (f64, f64),
    pub seed: u64,
}

impl NoiseConfig {
    pub fn new(kind: NoiseKind, level: f64) -> Self {
        NoiseConfig {
            kind,
            level,
            clamp: (0.0, 1.0),
            seed: 0,
        }
    }
}

/// sign with sign(0) = 0 — `f64::signum` maps ±0 to ±1, which would turn a
/// flat gradient into a full-budget step.
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Shared iterate: x ← clamp_ball(clamp_range(x + step·sign(∇_x L))). FGSM is
/// exactly one step of size eps, so all three attacks reduce to this kernel
/// and the FGSM/PGD1 equivalence holds bit-for-bit.
fn iterate_attack(
    model: &NetworkModel,
    x0: &[f64],
    label: usize,
    cfg: &AttackConfig,
    stream: u64,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if x0.len() != model.input_dim() {
        return Err(Error::Shape(format!(
            "input has length {}, model expects {}",
            x0.len(),
            model.input_dim()
        )));
    }
    let (lo, hi) = cfg.clamp;
    let mut x = x0.to_vec();
    if cfg.random_start {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(stream);
        for (xi, &oi) in x.iter_mut().zip(x0) {
            *xi = (oi + rng.gen_range(-cfg.eps..=cfg.eps)).clamp(lo, hi);
        }
    }
    for _ in 0..cfg.steps {
        let g = model.grad_from_layer_value(0, &x, label)?;
        for ((xi, gi), &oi) in x.iter_mut().zip(&g).zip(x0) {
            let stepped = (*xi + cfg.step_size * sign(*gi)).clamp(lo, hi);
            *xi = stepped.clamp(oi - cfg.eps, oi + cfg.eps);
        }
    }
    Ok(x)
}

pub fn fgsm(model: &NetworkModel, x: &[f64], label: usize, cfg: &AttackConfig) -> Result<Vec<f64>> {
    let mut one_step = cfg.clone();
    one_step.kind = AttackKind::Fgsm;
    one_step.steps = 1;
    one_step.step_size = cfg.eps;
    one_step.random_start = false;
    iterate_attack(model, x, label, &one_step, 0)
}

pub fn bim(model: &NetworkModel, x: &[f64], label: usize, cfg: &AttackConfig) -> Result<Vec<f64>> {
    let mut no_start = cfg.clone();
    no_start.random_start = false;
    iterate_attack(model, x, label, &no_start, 0)
}

pub fn pgd(model: &NetworkModel, x: &[f64], label: usize, cfg: &AttackConfig) -> Result<Vec<f64>> {
    iterate_attack(model, x, label, cfg, 0)
}

pub fn run_attack(
    model: &NetworkModel,
    x: &[f64],
    label: usize,
    cfg: &AttackConfig,
) -> Result<Vec<f64>> {
    match cfg.kind {
        AttackKind::Fgsm => fgsm(model, x, label, cfg),
        AttackKind::Bim => bim(model, x, label, cfg),
        AttackKind::Pgd => pgd(model, x, label, cfg),
    }
}

/// Attacks every row of `samples` with its ground-truth label. Sample i uses
/// RNG stream i of `cfg.seed`, so the result is deterministic no matter how
/// rayon schedules the rows (row 0 matches the single-sample call).
pub fn attack_dataset(
    model: &NetworkModel,
    samples: &Matrix,
    labels: &[u16],
    cfg: &AttackConfig,
) -> Result<Matrix> {
    if labels.len() != samples.rows() {
        return Err(Error::Shape(format!(
            "{} labels for {} samples",
            labels.len(),
            samples.rows()
        )));
    }
    let effective = match cfg.kind {
        AttackKind::Fgsm => {
            let mut c = cfg.clone();
            c.steps = 1;
            c.step_size = cfg.eps;
            c.random_start = false;
            c
        }
        AttackKind::Bim => {
            let mut c = cfg.clone();
            c.random_start = false;
            c
        }
        AttackKind::Pgd => cfg.clone(),
    };
    let rows: Vec<Vec<f64>> = (0..samples.rows())
        .into_par_iter()
        .map(|i| {
            iterate_attack(
                model,
                samples.row(i),
                labels[i] as usize,
                &effective,
                i as u64,
            )
        })
        .collect::<Result<_>>()?;
    Matrix::from_rows(&rows)
}

/// Adds zero-mean noise per entry and clamps. Level 0 returns the input
/// unchanged (bit-for-bit).
pub fn add_noise(x: &[f64], cfg: &NoiseConfig) -> Result<Vec<f64>> {
    add_noise_stream(x, cfg, 0)
}

fn add_noise_stream(x: &[f64], cfg: &NoiseConfig, stream: u64) -> Result<Vec<f64>> {
    if !(cfg.level >= 0.0) || !cfg.level.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "noise level must be nonnegative, got {}",
            cfg.level
        )));
    }
    if cfg.level == 0.0 {
        return Ok(x.to_vec());
    }
    let (lo, hi) = cfg.clamp;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let out = x
        .iter()
        .map(|&v| {
            let n = match cfg.kind {
                NoiseKind::Gaussian => cfg.level * rng.sample::<f64, _>(StandardNormal),
                NoiseKind::Uniform => rng.gen_range(-cfg.level..=cfg.level),
            };
            (v + n).clamp(lo, hi)
        })
        .collect();
    Ok(out)
}

/// Noisy copy of every row; sample i uses RNG stream i (see attack_dataset).
pub fn noise_dataset(samples: &Matrix, cfg: &NoiseConfig) -> Result<Matrix> {
    let rows: Vec<Vec<f64>> = (0..samples.rows())
        .into_par_iter()
        .map(|i| add_noise_stream(samples.row(i), cfg, i as u64))
        .collect::<Result<_>>()?;
    Matrix::from_rows(&rows)
}
