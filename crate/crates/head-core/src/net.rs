//! Minimal dense ReLU classifier: forward evaluation, reverse-mode gradients,
//! logit Jacobians, softmax cross-entropy, SGD training, and a binary file
//! format.
//!
//! Layer indexing convention used across the crate: layer 0 is the network
//! input, layer k (1-based) is the output of the k-th ReLU. The logits are not
//! a "layer" in this sense; they are reached separately.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::binio;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const NET_MAGIC: &[u8; 8] = b"HEADNET1";

/// Architecture description: input dim, hidden dims, output dim. Every hidden
/// layer is dense + ReLU; the final layer is dense only (logits).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    layer_dims: Vec<usize>,
}

impl NetworkSpec {
    pub fn new(layer_dims: Vec<usize>) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "network needs at least input and output dims, got {} entries",
                layer_dims.len()
            )));
        }
        if layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(
                "all layer dims must be at least 1".into(),
            ));
        }
        let c = *layer_dims.last().unwrap();
        if c < 2 {
            return Err(Error::InvalidArgument(format!(
                "output dim (number of classes) must be at least 2, got {c}"
            )));
        }
        Ok(NetworkSpec { layer_dims })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn n_classes(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    /// Number of dense layers.
    pub fn n_dense(&self) -> usize {
        self.layer_dims.len() - 1
    }

    /// Number of ReLU layers (one fewer than dense layers).
    pub fn n_relu(&self) -> usize {
        self.n_dense() - 1
    }

    /// Dimension of the activation at `layer` (0 = input, k = k-th ReLU out).
    pub fn layer_dim(&self, layer: usize) -> Result<usize> {
        if layer > self.n_relu() {
            return Err(Error::Index(format!(
                "layer {layer} out of range 0..={}",
                self.n_relu()
            )));
        }
        Ok(self.layer_dims[layer])
    }
}

/// Dense ReLU network weights. `weights[j]` maps activation j (dim `dims[j]`)
/// to pre-activation j+1 (dim `dims[j+1]`), stored out×in row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    spec: NetworkSpec,
    weights: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
}

/// Everything one forward pass produces: the input, each ReLU output, the
/// strictly-positive-pre-activation masks, and the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub input: Vec<f64>,
    pub relu_outputs: Vec<Vec<f64>>,
    pub relu_active_masks: Vec<Vec<bool>>,
    pub logits: Vec<f64>,
}

impl ActivationTrace {
    /// Activation vector at `layer` (0 = input, k = k-th ReLU output).
    pub fn layer_output(&self, layer: usize) -> Result<&[f64]> {
        if layer == 0 {
            Ok(&self.input)
        } else {
            self.relu_outputs
                .get(layer - 1)
                .map(|v| v.as_slice())
                .ok_or_else(|| {
                    Error::Index(format!(
                        "layer {layer} out of range 0..={}",
                        self.relu_outputs.len()
                    ))
                })
        }
    }
}

impl NetworkModel {
    pub fn new(spec: NetworkSpec, weights: Vec<Matrix>, biases: Vec<Vec<f64>>) -> Result<Self> {
        if weights.len() != spec.n_dense() || biases.len() != spec.n_dense() {
            return Err(Error::Shape(format!(
                "expected {} dense layers, got {} weight matrices and {} biases",
                spec.n_dense(),
                weights.len(),
                biases.len()
            )));
        }
        for j in 0..spec.n_dense() {
            let (inp, out) = (spec.layer_dims[j], spec.layer_dims[j + 1]);
            if weights[j].rows() != out || weights[j].cols() != inp {
                return Err(Error::Shape(format!(
                    "layer {j}: weight matrix is {}x{}, expected {out}x{inp}",
                    weights[j].rows(),
                    weights[j].cols()
                )));
            }
            if biases[j].len() != out {
                return Err(Error::Shape(format!(
                    "layer {j}: bias has length {}, expected {out}",
                    biases[j].len()
                )));
            }
        }
        Ok(NetworkModel {
            spec,
            weights,
            biases,
        })
    }

    /// He-initialized random model (normal weights scaled by √(2/fan_in),
    /// zero biases), deterministic in the seed.
    pub fn random(spec: NetworkSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(spec.n_dense());
        let mut biases = Vec::with_capacity(spec.n_dense());
        for j in 0..spec.n_dense() {
            let (inp, out) = (spec.layer_dims[j], spec.layer_dims[j + 1]);
            let scale = (2.0 / inp as f64).sqrt();
            let w = Matrix::from_fn(out, inp, |_, _| {
                let z: f64 = rng.sample(StandardNormal);
                z * scale
            });
            weights.push(w);
            biases.push(vec![0.0; out]);
        }
        NetworkModel {
            spec,
            weights,
            biases,
        }
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    pub fn n_classes(&self) -> usize {
        self.spec.n_classes()
    }

    pub fn n_relu(&self) -> usize {
        self.spec.n_relu()
    }

    /// Full forward pass recording every intermediate activation.
    pub fn forward(&self, x: &[f64]) -> Result<ActivationTrace> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has length {}, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let n_dense = self.spec.n_dense();
        let mut relu_outputs = Vec::with_capacity(self.n_relu());
        let mut masks = Vec::with_capacity(self.n_relu());
        let mut a = x.to_vec();
        for j in 0..n_dense {
            let mut pre = self.weights[j].matvec(&a);
            for (p, b) in pre.iter_mut().zip(&self.biases[j]) {
                *p += b;
            }
            if j + 1 < n_dense {
                let mask: Vec<bool> = pre.iter().map(|&v| v > 0.0).collect();
                let post: Vec<f64> = pre.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
                masks.push(mask);
                relu_outputs.push(post.clone());
                a = post;
            } else {
                return Ok(ActivationTrace {
                    input: x.to_vec(),
                    relu_outputs,
                    relu_active_masks: masks,
                    logits: pre,
                });
            }
        }
        unreachable!("spec guarantees at least one dense layer")
    }

    /// Logits as a function of the activation at `layer`, with downstream
    /// ReLUs re-evaluated at `v`. `layer = 0` is a plain forward pass.
    pub fn logits_from_layer(&self, layer: usize, v: &[f64]) -> Result<Vec<f64>> {
        let dim = self.spec.layer_dim(layer)?;
        if v.len() != dim {
            return Err(Error::Shape(format!(
                "layer {layer} value has length {}, expected {dim}",
                v.len()
            )));
        }
        let n_dense = self.spec.n_dense();
        let mut a = v.to_vec();
        for j in layer..n_dense {
            let mut pre = self.weights[j].matvec(&a);
            for (p, b) in pre.iter_mut().zip(&self.biases[j]) {
                *p += b;
            }
            if j + 1 < n_dense {
                for p in pre.iter_mut() {
                    if *p <= 0.0 {
                        *p = 0.0;
                    }
                }
            }
            a = pre;
        }
        Ok(a)
    }

    /// Gradient of the cross-entropy loss w.r.t. the activation at `layer`,
    /// treating that activation as a free vector (downstream masks are
    /// recomputed at `v`). Used by the finite-difference curvature oracle.
    pub fn grad_from_layer_value(&self, layer: usize, v: &[f64], label: usize) -> Result<Vec<f64>> {
        let dim = self.spec.layer_dim(layer)?;
        if v.len() != dim {
            return Err(Error::Shape(format!(
                "layer {layer} value has length {}, expected {dim}",
                v.len()
            )));
        }
        let n_dense = self.spec.n_dense();
        // Forward from the chosen layer, recording downstream masks.
        let mut a = v.to_vec();
        let mut masks: Vec<Vec<bool>> = Vec::new();
        for j in layer..n_dense - 1 {
            let mut pre = self.weights[j].matvec(&a);
            for (p, b) in pre.iter_mut().zip(&self.biases[j]) {
                *p += b;
            }
            masks.push(pre.iter().map(|&p| p > 0.0).collect());
            a = pre
                .into_iter()
                .map(|p| if p > 0.0 { p } else { 0.0 })
                .collect();
        }
        let mut logits = self.weights[n_dense - 1].matvec(&a);
        for (p, b) in logits.iter_mut().zip(&self.biases[n_dense - 1]) {
            *p += b;
        }
        let mut g = ce_grad_logits(&logits, label)?;
        // Backward through the same sub-network.
        for j in (layer..n_dense).rev() {
            g = self.weights[j].tr_matvec(&g);
            if j > layer {
                let mask = &masks[j - 1 - layer];
                for (gi, &m) in g.iter_mut().zip(mask) {
                    if !m {
                        *gi = 0.0;
                    }
                }
            }
        }
        Ok(g)
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Softmax cross-entropy: −log softmax(logits)[label], log-sum-exp stabilized.
pub fn loss_ce(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::Index(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = m + logits.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
    Ok(lse - logits[label])
}

/// Gradient of loss_ce w.r.t. the logits: softmax(logits) − onehot(label).
pub fn ce_grad_logits(logits: &[f64], label: usize) -> Result<Vec<f64>> {
    if label >= logits.len() {
        return Err(Error::Index(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let mut g = softmax(logits);
    g[label] -= 1.0;
    Ok(g)
}

/// Reverse-mode gradient of the loss w.r.t. the activation at `layer`, using
/// the masks stored in an existing trace. ReLU derivative at exactly 0 is 0
/// (masks mark strictly positive pre-activations).
pub fn grad_wrt_layer(
    model: &NetworkModel,
    trace: &ActivationTrace,
    label: usize,
    layer: usize,
) -> Result<Vec<f64>> {
    if layer > model.n_relu() {
        return Err(Error::Index(format!(
            "layer {layer} out of range 0..={}",
            model.n_relu()
        )));
    }
    let mut g = ce_grad_logits(&trace.logits, label)?;
    for j in (layer..model.spec.n_dense()).rev() {
        g = model.weights[j].tr_matvec(&g);
        if j > layer {
            let mask = &trace.relu_active_masks[j - 1];
            for (gi, &m) in g.iter_mut().zip(mask) {
                if !m {
                    *gi = 0.0;
                }
            }
        }
    }
    Ok(g)
}

/// Exact Jacobian of the logits w.r.t. the activation at `layer`: the product
/// of the downstream weight matrices with active-mask diagonals interleaved.
/// Row r is the gradient of logit r.
pub fn jacobian_logits(
    model: &NetworkModel,
    trace: &ActivationTrace,
    layer: usize,
) -> Result<Matrix> {
    if layer > model.n_relu() {
        return Err(Error::Index(format!(
            "layer {layer} out of range 0..={}",
            model.n_relu()
        )));
    }
    let n_dense = model.spec.n_dense();
    let mut j_acc = model.weights[n_dense - 1].clone();
    for j in (layer..n_dense - 1).rev() {
        // Zero the columns of inactive units, then fold in the next weight.
        let mask = &trace.relu_active_masks[j];
        for r in 0..j_acc.rows() {
            let row = j_acc.row_mut(r);
            for (c, &m) in mask.iter().enumerate() {
                if !m {
                    row[c] = 0.0;
                }
            }
        }
        j_acc = j_acc.matmul(&model.weights[j]);
    }
    Ok(j_acc)
}

/// Smallest |pre-activation| over all hidden units at this trace — the
/// distance to the nearest ReLU kink. Infinite when there are no hidden
/// layers. Curvature equivalence checks use this to skip inputs sitting on a
/// kink, where the Gauss-Newton matrix and the true Hessian legitimately
/// differ.
pub fn min_kink_margin(model: &NetworkModel, trace: &ActivationTrace) -> Result<f64> {
    let mut margin = f64::INFINITY;
    for j in 0..model.n_relu() {
        let a = trace.layer_output(j)?;
        let mut pre = model.weights[j].matvec(a);
        for (p, b) in pre.iter_mut().zip(&model.biases[j]) {
            *p += b;
        }
        for p in pre {
            margin = margin.min(p.abs());
        }
    }
    Ok(margin)
}

/// Predicted class: argmax of the logits, lowest index on ties.
pub fn predict(model: &NetworkModel, x: &[f64]) -> Result<usize> {
    let trace = model.forward(x)?;
    let mut best = 0;
    for (i, &z) in trace.logits.iter().enumerate() {
        if z > trace.logits[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Fraction of samples whose predicted class equals the label.
pub fn accuracy(model: &NetworkModel, samples: &Matrix, labels: &[u16]) -> Result<f64> {
    if samples.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} samples but {} labels",
            samples.rows(),
            labels.len()
        )));
    }
    if samples.rows() == 0 {
        return Err(Error::DegenerateData("accuracy of empty dataset".into()));
    }
    let mut hits = 0usize;
    for i in 0..samples.rows() {
        if predict(model, samples.row(i))? == labels[i] as usize {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.rows() as f64)
}

/// Mean cross-entropy loss over a labelled set.
pub fn mean_loss(model: &NetworkModel, samples: &Matrix, labels: &[u16]) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..samples.rows() {
        let trace = model.forward(samples.row(i))?;
        total += loss_ce(&trace.logits, labels[i] as usize)?;
    }
    Ok(total / samples.rows().max(1) as f64)
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            learning_rate: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: NetworkModel,
    /// Mean training loss of each epoch, in order.
    pub epoch_losses: Vec<f64>,
}

/// Plain minibatch SGD on softmax cross-entropy. Deterministic given the
/// seed; single-threaded.
pub fn train_sgd(
    model: &NetworkModel,
    samples: &Matrix,
    labels: &[u16],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let n = samples.rows();
    if n == 0 {
        return Err(Error::DegenerateData("empty training set".into()));
    }
    if samples.cols() != model.input_dim() {
        return Err(Error::Shape(format!(
            "training samples have dim {}, model expects {}",
            samples.cols(),
            model.input_dim()
        )));
    }
    if labels.len() != n {
        return Err(Error::Shape(format!("{n} samples but {} labels", labels.len())));
    }
    let c = model.n_classes();
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
        return Err(Error::Index(format!("label {bad} out of range for {c} classes")));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
    }
    if !cfg.learning_rate.is_finite() || cfg.learning_rate < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "learning_rate must be finite and nonnegative, got {}",
            cfg.learning_rate
        )));
    }

    let mut m = model.clone();
    let n_dense = m.spec.n_dense();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grad_w: Vec<Matrix> = m
                .weights
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect();
            let mut grad_b: Vec<Vec<f64>> = m.biases.iter().map(|b| vec![0.0; b.len()]).collect();
            for &i in batch {
                let trace = m.forward(samples.row(i))?;
                let label = labels[i] as usize;
                epoch_loss += loss_ce(&trace.logits, label)?;
                let mut delta = ce_grad_logits(&trace.logits, label)?;
                for j in (0..n_dense).rev() {
                    let a_in = trace.layer_output(j)?;
                    // Accumulate δ ⊗ a_inᵀ into the weight gradient.
                    {
                        let gw = &mut grad_w[j];
                        for (r, &d) in delta.iter().enumerate() {
                            if d == 0.0 {
                                continue;
                            }
                            let row = gw.row_mut(r);
                            for (cidx, &a) in a_in.iter().enumerate() {
                                row[cidx] += d * a;
                            }
                        }
                    }
                    for (gb, &d) in grad_b[j].iter_mut().zip(&delta) {
                        *gb += d;
                    }
                    if j > 0 {
                        delta = m.weights[j].tr_matvec(&delta);
                        let mask = &trace.relu_active_masks[j - 1];
                        for (d, &active) in delta.iter_mut().zip(mask) {
                            if !active {
                                *d = 0.0;
                            }
                        }
                    }
                }
            }
            let step = cfg.learning_rate / batch.len() as f64;
            for j in 0..n_dense {
                let gw = grad_w[j].as_slice();
                let w = m.weights[j].as_mut_slice();
                for (wv, gv) in w.iter_mut().zip(gw) {
                    *wv -= step * gv;
                }
                for (bv, gv) in m.biases[j].iter_mut().zip(&grad_b[j]) {
                    *bv -= step * gv;
                }
            }
        }
        epoch_losses.push(epoch_loss / n as f64);
    }
    Ok(TrainOutcome {
        model: m,
        epoch_losses,
    })
}

/// Writes the model in the HEADNET1 format: magic, u32 dense-layer count,
/// per-layer u32 in/out dims, then per layer the row-major weight matrix
/// followed by its bias vector, all little-endian f64.
pub fn save_model(model: &NetworkModel, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    binio::write_magic(&mut w, NET_MAGIC)?;
    let n_dense = model.spec.n_dense();
    binio::write_u32(&mut w, n_dense as u32)?;
    for j in 0..n_dense {
        binio::write_u32(&mut w, model.spec.layer_dims[j] as u32)?;
        binio::write_u32(&mut w, model.spec.layer_dims[j + 1] as u32)?;
    }
    for j in 0..n_dense {
        binio::write_f64_slice(&mut w, model.weights[j].as_slice())?;
        binio::write_f64_slice(&mut w, &model.biases[j])?;
    }
    Ok(())
}

pub fn load_model(path: &Path) -> Result<NetworkModel> {
    let mut r = BufReader::new(File::open(path)?);
    binio::expect_magic(&mut r, NET_MAGIC)?;
    let n_dense = binio::read_len(&mut r, "dense layer count", 10_000)?;
    if n_dense == 0 {
        return Err(Error::Format("model has zero dense layers".into()));
    }
    let mut dims_pairs = Vec::with_capacity(n_dense);
    for _ in 0..n_dense {
        let inp = binio::read_len(&mut r, "layer input dim", 1 << 24)?;
        let out = binio::read_len(&mut r, "layer output dim", 1 << 24)?;
        dims_pairs.push((inp, out));
    }
    // Consecutive layers must chain: out of layer j = in of layer j+1.
    let mut layer_dims = Vec::with_capacity(n_dense + 1);
    layer_dims.push(dims_pairs[0].0);
    for j in 0..n_dense {
        if j > 0 && dims_pairs[j].0 != dims_pairs[j - 1].1 {
            return Err(Error::Format(format!(
                "layer {j} input dim {} does not chain with previous output dim {}",
                dims_pairs[j].0,
                dims_pairs[j - 1].1
            )));
        }
        layer_dims.push(dims_pairs[j].1);
    }
    let spec = NetworkSpec::new(layer_dims).map_err(|e| Error::Format(e.to_string()))?;
    let mut weights = Vec::with_capacity(n_dense);
    let mut biases = Vec::with_capacity(n_dense);
    for &(inp, out) in &dims_pairs {
        let w = binio::read_f64_vec(&mut r, out * inp)?;
        weights.push(Matrix::from_vec(out, inp, w)?);
        biases.push(binio::read_f64_vec(&mut r, out)?);
    }
    binio::expect_eof(&mut r)?;
    NetworkModel::new(spec, weights, biases)
}
