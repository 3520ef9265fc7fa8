//! Loss-curvature features: the Generalized Gauss-Newton (GGN) matrix of the
//! softmax cross-entropy loss taken w.r.t. the input and each ReLU output,
//! its l1 modulus per layer, and the concatenated detection feature.
//!
//! For a ReLU network the loss is piecewise smooth and the GGN
//! G = Jᵀ·H_z·J (J = Jacobian of the logits w.r.t. the chosen layer,
//! H_z = curvature of the loss w.r.t. the logits) equals the exact Hessian
//! everywhere except on the measure-zero set of activation kinks — which is
//! what makes the cheap closed form usable as a curvature probe. H_z for
//! softmax cross-entropy is diag(p) − ppᵀ and never consumes a label, so all
//! features here are label-free.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write as _};
use std::path::Path;
use std::time::Instant;

use crate::binio;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::net::{jacobian_logits, softmax, ActivationTrace, NetworkModel, NetworkSpec};
use crate::spectral::{lscf, EigenBasis};

pub const FEA_MAGIC: &[u8; 8] = b"HEADFEA1";

/// Gauss-Newton curvature of the loss w.r.t. one layer's output.
#[derive(Debug, Clone, PartialEq)]
pub struct GgnMatrix {
    pub layer: usize,
    pub entries: Matrix,
}

/// Per-layer curvature moduli: index 0 is the network input, index k the
/// k-th ReLU output.
#[derive(Debug, Clone, PartialEq)]
pub struct HessianFeature {
    pub moduli: Vec<f64>,
}

/// Full detection feature for one sample: `d` spectral projections followed
/// by the per-layer curvature moduli.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadFeature {
    pub values: Vec<f64>,
}

/// Matrix modulus choice. l1 is the default throughout; l2 exists for
/// ablation and gives near-identical detections.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModulusKind {
    L1,
    L2,
}

/// Curvature of softmax cross-entropy w.r.t. the logits: diag(p) − ppᵀ with
/// p = softmax(logits). Symmetric, PSD, rows sum to zero, label-independent.
pub fn softmax_ce_hessian(logits: &[f64]) -> Result<Matrix> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "softmax_ce_hessian requires finite logits".into(),
        ));
    }
    let p = softmax(logits);
    let c = p.len();
    let mut h = Matrix::zeros(c, c);
    for i in 0..c {
        for j in 0..c {
            let v = if i == j { p[i] - p[i] * p[j] } else { -p[i] * p[j] };
            h.set(i, j, v);
        }
    }
    Ok(h)
}

/// G = Jᵀ·H_z·J with J the exact logit Jacobian at `layer`. Symmetrized to
/// remove accumulation-order dust.
pub fn ggn(model: &NetworkModel, trace: &ActivationTrace, layer: usize) -> Result<GgnMatrix> {
    let j = jacobian_logits(model, trace, layer)?;
    let h = softmax_ce_hessian(&trace.logits)?;
    let hj = h.matmul(&j);
    let mut g = j.tr_matmul(&hj);
    let n = g.rows();
    for a in 0..n {
        for b in (a + 1)..n {
            let avg = 0.5 * (g.get(a, b) + g.get(b, a));
            g.set(a, b, avg);
            g.set(b, a, avg);
        }
    }
    Ok(GgnMatrix { layer, entries: g })
}

/// l1 modulus: the sum of absolute values of all entries.
pub fn modulus_l1(m: &Matrix) -> f64 {
    m.iter().map(f64::abs).sum()
}

/// l2 (Frobenius) modulus, available as an alternative to l1.
pub fn modulus_l2(m: &Matrix) -> f64 {
    m.frobenius_norm()
}

pub fn modulus(m: &Matrix, kind: ModulusKind) -> f64 {
    match kind {
        ModulusKind::L1 => modulus_l1(m),
        ModulusKind::L2 => modulus_l2(m),
    }
}

/// Curvature moduli at the input and every ReLU output, sharing one forward
/// pass: moduli[0] = input-layer GGN modulus, moduli[k] = k-th ReLU's.
pub fn hessian_feature(model: &NetworkModel, x: &[f64]) -> Result<HessianFeature> {
    hessian_feature_with(model, x, ModulusKind::L1)
}

pub fn hessian_feature_with(
    model: &NetworkModel,
    x: &[f64],
    kind: ModulusKind,
) -> Result<HessianFeature> {
    let trace = model.forward(x)?;
    let mut moduli = Vec::with_capacity(1 + model.n_relu());
    for layer in 0..=model.n_relu() {
        let g = ggn(model, &trace, layer)?;
        moduli.push(modulus(&g.entries, kind));
    }
    Ok(HessianFeature { moduli })
}

/// The concatenated detection feature: lscf(x) first, curvature moduli after.
pub fn head_feature(
    x: &[f64],
    basis: &EigenBasis,
    d: usize,
    model: &NetworkModel,
) -> Result<HeadFeature> {
    let mut values = lscf(x, basis, d)?;
    values.extend(hessian_feature(model, x)?.moduli);
    Ok(HeadFeature { values })
}

/// Central-difference Hessian of the loss w.r.t. the activation at `layer`,
/// evaluated at the activation produced by input `x`: column j is
/// (g(v + h·e_j) − g(v − h·e_j))/(2h) with g the gradient w.r.t. that layer
/// (downstream ReLU masks re-evaluated at each probe). Symmetrized by
/// averaging with its transpose. This is the slow oracle the GGN replaces.
pub fn fd_hessian(
    model: &NetworkModel,
    x: &[f64],
    layer: usize,
    label: usize,
    h: f64,
) -> Result<Matrix> {
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let trace = model.forward(x)?;
    let v = trace.layer_output(layer)?;
    let n = v.len();
    let mut hess = Matrix::zeros(n, n);
    let mut probe = v.to_vec();
    for j in 0..n {
        let orig = probe[j];
        probe[j] = orig + h;
        let gp = model.grad_from_layer_value(layer, &probe, label)?;
        probe[j] = orig - h;
        let gm = model.grad_from_layer_value(layer, &probe, label)?;
        probe[j] = orig;
        for i in 0..n {
            hess.set(i, j, (gp[i] - gm[i]) / (2.0 * h));
        }
    }
    for a in 0..n {
        for b in (a + 1)..n {
            let avg = 0.5 * (hess.get(a, b) + hess.get(b, a));
            hess.set(a, b, avg);
            hess.set(b, a, avg);
        }
    }
    Ok(hess)
}

pub const DEFAULT_FD_STEP: f64 = 1e-3;

/// One row of the GGN-vs-finite-difference timing comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub dim: usize,
    pub ggn_seconds: f64,
    pub fd_seconds: f64,
    /// fd_seconds / ggn_seconds.
    pub ratio: f64,
}

/// Times `ggn` against `fd_hessian` at the input layer of a random
/// dim→dim→10 model, averaging wall-clock over `repeats` evaluations per
/// dim. The hidden width tracks the input so the probe reflects how the two
/// methods scale on networks sized to their input: finite differences pay a
/// full gradient per input dimension while the GGN reuses one Jacobian.
/// `repeats = 0` yields an empty table.
pub fn curvature_benchmark(dims: &[usize], repeats: usize) -> Result<Vec<BenchRow>> {
    if dims.is_empty() {
        return Err(Error::InvalidArgument(
            "benchmark needs at least one input dim".into(),
        ));
    }
    let mut rows = Vec::new();
    if repeats == 0 {
        return Ok(rows);
    }
    for (k, &dim) in dims.iter().enumerate() {
        let spec = NetworkSpec::new(vec![dim, dim, 10])?;
        let model = NetworkModel::random(spec, 1000 + k as u64);
        let x: Vec<f64> = (0..dim).map(|i| 0.5 + 0.3 * ((i as f64) * 0.7).sin()).collect();
        let trace = model.forward(&x)?;

        // One untimed pass per method so page faults and lazy allocations
        // don't land in the first timed sample.
        std::hint::black_box(modulus_l1(&ggn(&model, &trace, 0)?.entries));
        std::hint::black_box(modulus_l1(&fd_hessian(&model, &x, 0, 0, DEFAULT_FD_STEP)?));

        let t0 = Instant::now();
        for _ in 0..repeats {
            let g = ggn(&model, &trace, 0)?;
            std::hint::black_box(modulus_l1(&g.entries));
        }
        let ggn_seconds = t0.elapsed().as_secs_f64() / repeats as f64;

        let t1 = Instant::now();
        for _ in 0..repeats {
            let h = fd_hessian(&model, &x, 0, 0, DEFAULT_FD_STEP)?;
            std::hint::black_box(modulus_l1(&h));
        }
        let fd_seconds = t1.elapsed().as_secs_f64() / repeats as f64;

        rows.push(BenchRow {
            dim,
            ggn_seconds,
            fd_seconds,
            ratio: fd_seconds / ggn_seconds.max(1e-12),
        });
    }
    Ok(rows)
}

pub fn write_benchmark_csv(rows: &[BenchRow], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "dim,ggn_seconds,fd_seconds,ratio")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.dim, r.ggn_seconds, r.fd_seconds, r.ratio)?;
    }
    Ok(())
}

/// Writes a feature matrix (one row per sample) in the HEADFEA1 binary
/// format: magic, u32 count, u32 width, row-major little-endian f64.
pub fn save_features(features: &Matrix, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    binio::write_magic(&mut w, FEA_MAGIC)?;
    binio::write_u32(&mut w, features.rows() as u32)?;
    binio::write_u32(&mut w, features.cols() as u32)?;
    binio::write_f64_slice(&mut w, features.as_slice())?;
    Ok(())
}

pub fn load_features(path: &Path) -> Result<Matrix> {
    let mut r = BufReader::new(File::open(path)?);
    binio::expect_magic(&mut r, FEA_MAGIC)?;
    let count = binio::read_len(&mut r, "feature count", 1 << 30)?;
    let width = binio::read_len(&mut r, "feature width", 1 << 24)?;
    let data = binio::read_f64_vec(&mut r, count * width)?;
    binio::expect_eof(&mut r)?;
    Matrix::from_vec(count, width, data)
}

/// CSV twin of the binary feature file. Column layout: sample_id, the `d`
/// spectral projections, then the curvature moduli.
pub fn save_features_csv(features: &Matrix, d: usize, path: &Path) -> Result<()> {
    if d > features.cols() {
        return Err(Error::Shape(format!(
            "spectral dimension {d} exceeds feature width {}",
            features.cols()
        )));
    }
    let n_hf = features.cols() - d;
    let mut w = BufWriter::new(File::create(path)?);
    let mut header = String::from("sample_id");
    for i in 0..d {
        header.push_str(&format!(",lscf_{i}"));
    }
    for i in 0..n_hf {
        header.push_str(&format!(",hf_{i}"));
    }
    writeln!(w, "{header}")?;
    for i in 0..features.rows() {
        let mut line = i.to_string();
        for v in features.row(i) {
            line.push(',');
            line.push_str(&format!("{v}"));
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Reads the CSV twin back into a feature matrix (sample_id column dropped).
pub fn load_features_csv(path: &Path) -> Result<Matrix> {
    let r = BufReader::new(File::open(path)?);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if lineno == 0 {
            if !line.starts_with("sample_id") {
                return Err(Error::Format(format!(
                    "feature CSV must start with a sample_id header, got {line:?}"
                )));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        fields.next(); // sample_id
        let mut row = Vec::new();
        for f in fields {
            row.push(f.trim().parse::<f64>().map_err(|e| {
                Error::Format(format!("line {}: bad float {f:?}: {e}", lineno + 1))
            })?);
        }
        rows.push(row);
    }
    Matrix::from_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{loss_ce, min_kink_margin};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ce_hessian_two_uniform_logits() {
        let h = softmax_ce_hessian(&[0.0, 0.0]).unwrap();
        assert_eq!(h.row(0), &[0.25, -0.25]);
        assert_eq!(h.row(1), &[-0.25, 0.25]);
    }

    #[test]
    fn ce_hessian_three_uniform_logits() {
        let h = softmax_ce_hessian(&[0.0, 0.0, 0.0]).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 2.0 / 9.0 } else { -1.0 / 9.0 };
                assert!((h.get(i, j) - want).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn ce_hessian_rows_sum_to_zero_and_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let logits: Vec<f64> = (0..5).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let h = softmax_ce_hessian(&logits).unwrap();
            for i in 0..5 {
                let s: f64 = h.row(i).iter().sum();
                assert!(s.abs() <= 1e-12);
            }
            assert!(h.max_asymmetry() == 0.0);
        }
    }

    #[test]
    fn ce_hessian_matches_fd_of_loss_for_every_label() {
        // FD oracle on loss_ce directly; the closed form must agree for any
        // label, which also demonstrates label independence.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let logits: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let h = softmax_ce_hessian(&logits).unwrap();
        let step = 1e-4;
        for label in 0..4 {
            for j in 0..4 {
                for i in 0..4 {
                    let mut zpp = logits.clone();
                    zpp[i] += step;
                    zpp[j] += step;
                    let mut zpm = logits.clone();
                    zpm[i] += step;
                    zpm[j] -= step;
                    let mut zmp = logits.clone();
                    zmp[i] -= step;
                    zmp[j] += step;
                    let mut zmm = logits.clone();
                    zmm[i] -= step;
                    zmm[j] -= step;
                    let fd = (loss_ce(&zpp, label).unwrap() - loss_ce(&zpm, label).unwrap()
                        - loss_ce(&zmp, label).unwrap()
                        + loss_ce(&zmm, label).unwrap())
                        / (4.0 * step * step);
                    assert!(
                        (h.get(i, j) - fd).abs() <= 1e-5,
                        "label {label} ({i},{j}): {} vs {fd}",
                        h.get(i, j)
                    );
                }
            }
        }
    }

    #[test]
    fn ce_hessian_rejects_non_finite() {
        assert!(softmax_ce_hessian(&[f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn ggn_with_identity_jacobian_is_the_logit_hessian() {
        let spec = NetworkSpec::new(vec![2, 2]).unwrap();
        let model = NetworkModel::new(
            spec,
            vec![Matrix::identity(2)],
            vec![vec![0.0, 0.0]],
        )
        .unwrap();
        let trace = model.forward(&[0.0, 0.0]).unwrap();
        let g = ggn(&model, &trace, 0).unwrap();
        assert_eq!(g.entries.row(0), &[0.25, -0.25]);
        assert_eq!(g.entries.row(1), &[-0.25, 0.25]);
    }

    #[test]
    fn ggn_is_zero_when_relu_fully_inactive() {
        let spec = NetworkSpec::new(vec![2, 3, 2]).unwrap();
        let w0 = Matrix::from_fn(3, 2, |_, _| 0.1);
        let w1 = Matrix::from_fn(2, 3, |i, j| (i + j) as f64 * 0.3 + 0.1);
        let model =
            NetworkModel::new(spec, vec![w0, w1], vec![vec![-10.0; 3], vec![0.0; 2]]).unwrap();
        let trace = model.forward(&[0.5, 0.5]).unwrap();
        assert!(trace.relu_active_masks[0].iter().all(|&m| !m));
        let g = ggn(&model, &trace, 0).unwrap();
        assert!(g.entries.iter().all(|v| v == 0.0));
    }

    fn random_interior_case(
        rng: &mut ChaCha8Rng,
        dims: Vec<usize>,
    ) -> (NetworkModel, Vec<f64>, ActivationTrace) {
        loop {
            let model = NetworkModel::random(NetworkSpec::new(dims.clone()).unwrap(), rng.gen());
            let x: Vec<f64> = (0..dims[0]).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let trace = model.forward(&x).unwrap();
            if min_kink_margin(&model, &trace).unwrap() >= 1e-3 {
                return (model, x, trace);
            }
        }
    }

    #[test]
    fn ggn_matches_fd_hessian_away_from_kinks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..15 {
            let (model, x, trace) = random_interior_case(&mut rng, vec![4, 6, 5, 3]);
            for layer in 0..=model.n_relu() {
                let g = ggn(&model, &trace, layer).unwrap();
                let fd = fd_hessian(&model, &x, layer, 0, DEFAULT_FD_STEP).unwrap();
                let mut diff = 0.0f64;
                let mut scale = 0.0f64;
                for (a, b) in g.entries.iter().zip(fd.iter()) {
                    diff += (a - b) * (a - b);
                    scale += b * b;
                }
                let rel = diff.sqrt() / scale.sqrt().max(1e-12);
                assert!(rel <= 1e-4, "layer {layer}: relative error {rel:e}");
            }
        }
    }

    #[test]
    fn ggn_is_psd_on_random_models() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let (model, _x, trace) = random_interior_case(&mut rng, vec![5, 6, 4, 3]);
            for layer in 0..=model.n_relu() {
                let g = ggn(&model, &trace, layer).unwrap();
                assert!(g.entries.max_asymmetry() <= 1e-10);
                let basis = crate::spectral::eig_sym(&g.entries).unwrap();
                let min = basis.values().last().copied().unwrap();
                assert!(min >= -1e-8, "layer {layer}: min eigenvalue {min:e}");
            }
        }
    }

    #[test]
    fn modulus_l1_examples() {
        let m = Matrix::from_rows(&[vec![0.25, -0.25], vec![-0.25, 0.25]]).unwrap();
        assert_eq!(modulus_l1(&m), 1.0);
        assert_eq!(modulus_l1(&Matrix::zeros(3, 3)), 0.0);
    }

    #[test]
    fn modulus_l1_matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = Matrix::from_fn(5, 5, |_, _| rng.gen_range(-2.0..2.0));
        let mut oracle = 0.0;
        for i in 0..5 {
            for j in 0..5 {
                oracle += m.get(i, j).abs();
            }
        }
        assert_eq!(modulus_l1(&m), oracle);
    }

    #[test]
    fn modulus_scale_covariance_exact_for_power_of_two_factors() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = Matrix::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0));
        for alpha in [2.0, -4.0, 0.5] {
            let mut scaled = m.clone();
            scaled.scale(alpha);
            assert_eq!(modulus_l1(&scaled), alpha.abs() * modulus_l1(&m));
        }
    }

    #[test]
    fn hessian_feature_no_hidden_layers_has_length_one() {
        let model = NetworkModel::random(NetworkSpec::new(vec![3, 2]).unwrap(), 7);
        let hf = hessian_feature(&model, &[0.1, 0.2, 0.3]).unwrap();
        assert_eq!(hf.moduli.len(), 1);
        assert!(hf.moduli[0] >= 0.0 && hf.moduli[0].is_finite());
    }

    #[test]
    fn hessian_feature_zero_weights_all_zero() {
        let spec = NetworkSpec::new(vec![3, 4, 2]).unwrap();
        let model = NetworkModel::new(
            spec,
            vec![Matrix::zeros(4, 3), Matrix::zeros(2, 4)],
            vec![vec![0.0; 4], vec![0.0; 2]],
        )
        .unwrap();
        let hf = hessian_feature(&model, &[0.3, -0.1, 0.9]).unwrap();
        assert_eq!(hf.moduli, vec![0.0, 0.0]);
    }

    #[test]
    fn hessian_feature_matches_per_layer_recompute() {
        // Oracle: rebuild JᵀH_zJ per layer with explicit loops only.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (model, x, trace) = random_interior_case(&mut rng, vec![4, 5, 4, 3]);
        let hf = hessian_feature(&model, &x).unwrap();
        assert_eq!(hf.moduli.len(), 1 + model.n_relu());
        let p = softmax(&trace.logits);
        let c = p.len();
        for layer in 0..=model.n_relu() {
            let j = jacobian_logits(&model, &trace, layer).unwrap();
            let n = j.cols();
            let mut total = 0.0;
            for a in 0..n {
                for b in 0..n {
                    let mut s = 0.0;
                    for r in 0..c {
                        for t in 0..c {
                            let h_rt = if r == t {
                                p[r] - p[r] * p[t]
                            } else {
                                -p[r] * p[t]
                            };
                            s += j.get(r, a) * h_rt * j.get(t, b);
                        }
                    }
                    total += s.abs();
                }
            }
            assert!(
                (hf.moduli[layer] - total).abs() <= 1e-9 * total.max(1.0),
                "layer {layer}: {} vs oracle {total}",
                hf.moduli[layer]
            );
        }
    }

    #[test]
    fn head_feature_reference_dimensionality_is_45() {
        // Default configuration: 32 spectral projections + 13 curvature
        // moduli (input + 12 ReLU layers).
        let mut dims = vec![36];
        dims.extend(std::iter::repeat(4).take(12));
        dims.push(3);
        let model = NetworkModel::random(NetworkSpec::new(dims).unwrap(), 9);
        let basis = EigenBasis::new(
            Matrix::identity(36),
            (0..36).map(|i| (36 - i) as f64).collect(),
            false,
            vec![0.0; 36],
        )
        .unwrap();
        let x = vec![0.01; 36];
        let f = head_feature(&x, &basis, 32, &model).unwrap();
        assert_eq!(f.values.len(), 45);
    }

    #[test]
    fn head_feature_minimal_config_has_length_two() {
        let model = NetworkModel::random(NetworkSpec::new(vec![2, 2]).unwrap(), 10);
        let basis = EigenBasis::new(
            Matrix::identity(2),
            vec![2.0, 1.0],
            false,
            vec![0.0; 2],
        )
        .unwrap();
        let f = head_feature(&[0.4, 0.6], &basis, 1, &model).unwrap();
        assert_eq!(f.values.len(), 2);
    }

    #[test]
    fn head_feature_prefix_is_exactly_lscf() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data = Matrix::from_fn(20, 6, |_, _| rng.gen_range(0.0..1.0));
        let basis = crate::spectral::fit_basis(&data, false).unwrap();
        let model = NetworkModel::random(NetworkSpec::new(vec![6, 5, 3]).unwrap(), 12);
        let x: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..1.0)).collect();
        let f = head_feature(&x, &basis, 4, &model).unwrap();
        let proj = lscf(&x, &basis, 4).unwrap();
        assert_eq!(&f.values[..4], proj.as_slice());
    }

    #[test]
    fn fd_hessian_reproduces_logit_hessian_through_identity_model() {
        // With a single identity dense layer the input layer IS the logits,
        // so the FD Hessian must match the closed form.
        let spec = NetworkSpec::new(vec![3, 3]).unwrap();
        let model =
            NetworkModel::new(spec, vec![Matrix::identity(3)], vec![vec![0.0; 3]]).unwrap();
        let x = vec![0.4, -0.2, 1.1];
        let closed = softmax_ce_hessian(&x).unwrap();
        for label in 0..3 {
            let fd = fd_hessian(&model, &x, 0, label, 1e-5).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    assert!((fd.get(i, j) - closed.get(i, j)).abs() <= 1e-5);
                }
            }
        }
    }

    #[test]
    fn fd_hessian_step_robustness() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (model, x, _) = random_interior_case(&mut rng, vec![4, 5, 3]);
        let a = fd_hessian(&model, &x, 0, 1, 1e-3).unwrap();
        let b = fd_hessian(&model, &x, 0, 1, 1e-4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert!((a.get(i, j) - b.get(i, j)).abs() <= 1e-4);
            }
        }
    }

    #[test]
    fn fd_hessian_zero_weights_is_zero() {
        let spec = NetworkSpec::new(vec![2, 2]).unwrap();
        let model = NetworkModel::new(spec, vec![Matrix::zeros(2, 2)], vec![vec![0.0; 2]]).unwrap();
        let fd = fd_hessian(&model, &[0.7, 0.1], 0, 0, 1e-3).unwrap();
        assert!(fd.iter().all(|v| v == 0.0));
    }

    #[test]
    fn fd_hessian_rejects_nonpositive_step() {
        let model = NetworkModel::random(NetworkSpec::new(vec![2, 2]).unwrap(), 14);
        assert!(fd_hessian(&model, &[0.0, 0.0], 0, 0, 0.0).is_err());
        assert!(fd_hessian(&model, &[0.0, 0.0], 0, 0, -1.0).is_err());
    }

    #[test]
    fn benchmark_zero_repeats_is_empty_and_single_dim_one_row() {
        assert!(curvature_benchmark(&[8], 0).unwrap().is_empty());
        let rows = curvature_benchmark(&[8], 2).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].dim, 8);
        assert!(rows[0].ggn_seconds > 0.0 && rows[0].fd_seconds > 0.0);
        assert!(curvature_benchmark(&[], 1).is_err());
    }

    #[test]
    fn feature_files_round_trip_binary_and_csv() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let f = Matrix::from_fn(7, 5, |_, _| rng.gen_range(-3.0..3.0));
        let dir = tempfile::tempdir().unwrap();
        let bin = dir.path().join("features.bin");
        save_features(&f, &bin).unwrap();
        assert_eq!(load_features(&bin).unwrap(), f);

        let csv = dir.path().join("features.csv");
        save_features_csv(&f, 3, &csv).unwrap();
        let text = std::fs::read_to_string(&csv).unwrap();
        assert!(text.starts_with("sample_id,lscf_0,lscf_1,lscf_2,hf_0,hf_1\n"));
        let back = load_features_csv(&csv).unwrap();
        assert_eq!(back.rows(), 7);
        for i in 0..7 {
            for j in 0..5 {
                // Shortest-round-trip float formatting is exact for f64.
                assert_eq!(back.get(i, j), f.get(i, j));
            }
        }
    }

    #[test]
    fn feature_file_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        std::fs::write(&path, b"HEADEIG1xxxx").unwrap();
        assert!(load_features(&path)
            .unwrap_err()
            .to_string()
            .contains("HEADFEA1"));
    }
}
