//! Benign-data covariance, symmetric eigendecomposition, and the Least
//! Significant Component Feature (LSCF): projections of a sample onto the
//! eigenvectors of the benign covariance carrying the *smallest* eigenvalues.
//!
//! Adversarial perturbations are not constrained to the data manifold, so
//! they inject variance into directions where benign data has almost none;
//! `variance_bound_report` quantifies exactly how much they can inject
//! (at most the squared perturbation norm per component).

use std::fs::File;
use std::io::{BufReader, BufWriter, Write as _};
use std::path::Path;

use crate::binio;
use crate::error::{Error, Result};
use crate::linalg::{mean_variance, norm_l2, Matrix};

pub const EIG_MAGIC: &[u8; 8] = b"HEADEIG1";

/// Eigendecomposition of a benign-data covariance: `vectors` holds the
/// orthonormal eigenvectors as columns, ordered by descending eigenvalue.
/// `mean` is all zeros unless the covariance was centered.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenBasis {
    vectors: Matrix,
    values: Vec<f64>,
    centered: bool,
    mean: Vec<f64>,
}

impl EigenBasis {
    /// Assembles a basis from parts, checking shapes and eigenvalue order.
    /// Orthonormality of `vectors` is the caller's responsibility (checked in
    /// tests, not here — it costs O(m³)).
    pub fn new(vectors: Matrix, values: Vec<f64>, centered: bool, mean: Vec<f64>) -> Result<Self> {
        if !vectors.is_square() {
            return Err(Error::Shape(format!(
                "eigenvector matrix is {}x{}, expected square",
                vectors.rows(),
                vectors.cols()
            )));
        }
        let m = vectors.rows();
        if values.len() != m || mean.len() != m {
            return Err(Error::Shape(format!(
                "expected {m} eigenvalues and mean entries, got {} and {}",
                values.len(),
                mean.len()
            )));
        }
        if values.windows(2).any(|w| w[0] < w[1] - 1e-10) {
            return Err(Error::InvalidArgument(
                "eigenvalues must be in descending order".into(),
            ));
        }
        Ok(EigenBasis {
            vectors,
            values,
            centered,
            mean,
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Eigenvalues, descending.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Eigenvector matrix; column j pairs with `values()[j]`.
    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    pub fn centered(&self) -> bool {
        self.centered
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Eigenvector for the j-th largest eigenvalue.
    pub fn vector(&self, j: usize) -> Vec<f64> {
        self.vectors.column(j)
    }
}

/// C = DᵀD/(N−1); with `center` the per-dimension mean is removed first.
/// The result is symmetrized by averaging with its transpose.
pub fn covariance(data: &Matrix, center: bool) -> Result<Matrix> {
    let n = data.rows();
    let m = data.cols();
    if n < 2 {
        return Err(Error::DegenerateData(format!(
            "covariance needs at least 2 samples, got {n}"
        )));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateData(
            "covariance input contains non-finite entries".into(),
        ));
    }
    let mut work;
    let d = if center {
        let mut means = vec![0.0; m];
        for i in 0..n {
            for (mu, v) in means.iter_mut().zip(data.row(i)) {
                *mu += v;
            }
        }
        for mu in means.iter_mut() {
            *mu /= n as f64;
        }
        work = data.clone();
        for i in 0..n {
            for (v, mu) in work.row_mut(i).iter_mut().zip(&means) {
                *v -= mu;
            }
        }
        &work
    } else {
        data
    };
    let mut c = d.tr_matmul(d);
    c.scale(1.0 / (n - 1) as f64);
    // Accumulation order makes C symmetric already; enforce it anyway.
    let ct = c.transpose();
    for i in 0..m {
        for j in 0..m {
            let avg = 0.5 * (c.get(i, j) + ct.get(i, j));
            c.set(i, j, avg);
        }
    }
    Ok(c)
}

/// Per-dimension mean of the rows.
pub fn column_means(data: &Matrix) -> Vec<f64> {
    let n = data.rows().max(1);
    let mut means = vec![0.0; data.cols()];
    for i in 0..data.rows() {
        for (mu, v) in means.iter_mut().zip(data.row(i)) {
            *mu += v;
        }
    }
    for mu in means.iter_mut() {
        *mu /= n as f64;
    }
    means
}

const JACOBI_MAX_SWEEPS: usize = 100;

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Convergence: off-diagonal Frobenius norm ≤ 1e-12·‖C‖_F, at most 100
/// sweeps. Output is sorted by descending eigenvalue, and each eigenvector is
/// signed so its largest-magnitude entry is nonnegative (first such entry on
/// ties), making the result deterministic.
pub fn eig_sym(c: &Matrix) -> Result<EigenBasis> {
    if !c.is_square() {
        return Err(Error::Shape(format!(
            "eig_sym input is {}x{}, expected square",
            c.rows(),
            c.cols()
        )));
    }
    let asym = c.max_asymmetry();
    if asym > 1e-8 {
        return Err(Error::InvalidArgument(format!(
            "eig_sym input is not symmetric: max |a_ij - a_ji| = {asym:e}"
        )));
    }
    let n = c.rows();
    let mut a = c.clone();
    // Work on the exactly-symmetric average so rotations stay consistent.
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (a.get(i, j) + a.get(j, i));
            a.set(i, j, avg);
            a.set(j, i, avg);
        }
    }
    let mut v = Matrix::identity(n);
    let threshold = 1e-12 * c.frobenius_norm();

    let off_norm = |a: &Matrix| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                s += 2.0 * a.get(i, j) * a.get(i, j);
            }
        }
        s.sqrt()
    };

    let mut converged = off_norm(&a) <= threshold;
    let mut sweeps = 0;
    while !converged && sweeps < JACOBI_MAX_SWEEPS {
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let tau = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    1.0 / (tau - (1.0 + tau * tau).sqrt())
                };
                let cos = 1.0 / (1.0 + t * t).sqrt();
                let sin = t * cos;
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                a.set(p, p, app - t * apq);
                a.set(q, q, aqq + t * apq);
                a.set(p, q, 0.0);
                a.set(q, p, 0.0);
                for i in 0..n {
                    if i == p || i == q {
                        continue;
                    }
                    let aip = a.get(i, p);
                    let aiq = a.get(i, q);
                    a.set(i, p, cos * aip - sin * aiq);
                    a.set(p, i, cos * aip - sin * aiq);
                    a.set(i, q, sin * aip + cos * aiq);
                    a.set(q, i, sin * aip + cos * aiq);
                }
                for i in 0..n {
                    let vip = v.get(i, p);
                    let viq = v.get(i, q);
                    v.set(i, p, cos * vip - sin * viq);
                    v.set(i, q, sin * vip + cos * viq);
                }
            }
        }
        sweeps += 1;
        converged = off_norm(&a) <= threshold;
    }
    if !converged {
        return Err(Error::Convergence {
            what: "jacobi eigendecomposition".into(),
            iterations: sweeps,
            residual: off_norm(&a),
        });
    }

    // Sort descending, permuting eigenvector columns alongside.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.get(j, j).partial_cmp(&a.get(i, i)).unwrap());
    let values: Vec<f64> = order.iter().map(|&j| a.get(j, j)).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (new_j, &old_j) in order.iter().enumerate() {
        // Sign convention: largest-magnitude entry nonnegative.
        let mut pivot = 0;
        for i in 1..n {
            if v.get(i, old_j).abs() > v.get(pivot, old_j).abs() {
                pivot = i;
            }
        }
        let flip = v.get(pivot, old_j) < 0.0;
        for i in 0..n {
            let val = v.get(i, old_j);
            vectors.set(i, new_j, if flip { -val } else { val });
        }
    }
    let m = n;
    EigenBasis::new(vectors, values, false, vec![0.0; m])
}

/// Covariance + eigendecomposition in one step; records the mean when
/// centering so `lscf` can subtract it from queries.
pub fn fit_basis(data: &Matrix, center: bool) -> Result<EigenBasis> {
    let c = covariance(data, center)?;
    let eig = eig_sym(&c)?;
    let mean = if center {
        column_means(data)
    } else {
        vec![0.0; data.cols()]
    };
    EigenBasis::new(eig.vectors, eig.values, center, mean)
}

/// Least Significant Component Feature: projections of `x` onto the `d`
/// eigenvectors with the smallest eigenvalues, smallest first (component 0
/// pairs with the smallest eigenvalue).
pub fn lscf(x: &[f64], basis: &EigenBasis, d: usize) -> Result<Vec<f64>> {
    let m = basis.dim();
    if x.len() != m {
        return Err(Error::Shape(format!(
            "sample has length {}, basis dimension is {m}",
            x.len()
        )));
    }
    if d == 0 || d > m {
        return Err(Error::InvalidArgument(format!(
            "LSCF dimension {d} out of range 1..={m}"
        )));
    }
    let centered_x;
    let xs = if basis.centered {
        centered_x = crate::linalg::sub(x, &basis.mean);
        centered_x.as_slice()
    } else {
        x
    };
    let mut out = vec![0.0; d];
    for (i, o) in out.iter_mut().enumerate() {
        let col = m - 1 - i;
        let mut s = 0.0;
        for k in 0..m {
            s += xs[k] * basis.vectors.get(k, col);
        }
        *o = s;
    }
    Ok(out)
}

/// One row of the variance-bound diagnostic: how much variance the
/// perturbation injected into eigencomponent `component` (0 = largest
/// eigenvalue) versus the theoretical ceiling λ + ‖Δx‖².
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceBoundRow {
    pub component: usize,
    pub lambda: f64,
    pub var_benign: f64,
    pub var_perturbed: f64,
    pub bound: f64,
    pub gap: f64,
}

/// Projects benign and perturbed samples onto every eigenvector and compares
/// per-component variances against the bound λ_i + ‖Δx‖². Perturbation row i
/// applies to data row i; all perturbations must share (within 1%) the same
/// l2 norm, since the bound is stated for a fixed norm.
///
/// Variances are unbiased sample variances over the rows (mean removed,
/// divisor N−1).
pub fn variance_bound_report(
    basis: &EigenBasis,
    data: &Matrix,
    perturbations: &Matrix,
) -> Result<Vec<VarianceBoundRow>> {
    let m = basis.dim();
    let n = data.rows();
    if data.cols() != m || perturbations.cols() != m {
        return Err(Error::Shape(format!(
            "data/perturbation width {}/{} does not match basis dimension {m}",
            data.cols(),
            perturbations.cols()
        )));
    }
    if perturbations.rows() != n {
        return Err(Error::Shape(format!(
            "{n} data rows but {} perturbation rows",
            perturbations.rows()
        )));
    }
    if n < 2 {
        return Err(Error::DegenerateData(
            "variance report needs at least 2 samples".into(),
        ));
    }
    let norms: Vec<f64> = (0..n).map(|i| norm_l2(perturbations.row(i))).collect();
    let mean_norm = norms.iter().sum::<f64>() / n as f64;
    for (i, &ni) in norms.iter().enumerate() {
        if (ni - mean_norm).abs() > 0.01 * mean_norm {
            return Err(Error::InvalidArgument(format!(
                "perturbation norms must be equal within 1%: row {i} has norm {ni}, mean {mean_norm}"
            )));
        }
    }

    // Projections of benign and perturbed samples onto all m eigenvectors.
    let mut proj_benign = vec![vec![0.0; n]; m];
    let mut proj_pert = vec![vec![0.0; n]; m];
    for i in 0..n {
        let mut x = data.row(i).to_vec();
        let mut xp: Vec<f64> = x
            .iter()
            .zip(perturbations.row(i))
            .map(|(a, b)| a + b)
            .collect();
        if basis.centered {
            for (v, mu) in x.iter_mut().zip(&basis.mean) {
                *v -= mu;
            }
            for (v, mu) in xp.iter_mut().zip(&basis.mean) {
                *v -= mu;
            }
        }
        let pb = basis.vectors.tr_matvec(&x);
        let pp = basis.vectors.tr_matvec(&xp);
        for j in 0..m {
            proj_benign[j][i] = pb[j];
            proj_pert[j][i] = pp[j];
        }
    }

    let norm_sq = mean_norm * mean_norm;
    let mut rows = Vec::with_capacity(m);
    for j in 0..m {
        let (_, var_benign) = mean_variance(&proj_benign[j]);
        let (_, var_perturbed) = mean_variance(&proj_pert[j]);
        let lambda = basis.values[j];
        let bound = lambda + norm_sq;
        rows.push(VarianceBoundRow {
            component: j,
            lambda,
            var_benign,
            var_perturbed,
            bound,
            gap: bound - var_perturbed,
        });
    }
    Ok(rows)
}

/// Writes the variance report as CSV with one row per eigencomponent.
pub fn write_variance_report_csv(rows: &[VarianceBoundRow], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(
        w,
        "component_index,lambda,var_benign,var_perturbed,bound,gap"
    )?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.component, r.lambda, r.var_benign, r.var_perturbed, r.bound, r.gap
        )?;
    }
    Ok(())
}

/// HEADEIG1 format: magic, u32 m, u8 centered flag, mean vector, eigenvalues,
/// then the eigenvector matrix column-major, all little-endian f64.
pub fn save_basis(basis: &EigenBasis, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    binio::write_magic(&mut w, EIG_MAGIC)?;
    let m = basis.dim();
    binio::write_u32(&mut w, m as u32)?;
    binio::write_u8(&mut w, basis.centered as u8)?;
    binio::write_f64_slice(&mut w, &basis.mean)?;
    binio::write_f64_slice(&mut w, &basis.values)?;
    let mut cols = Vec::with_capacity(m * m);
    for j in 0..m {
        for i in 0..m {
            cols.push(basis.vectors.get(i, j));
        }
    }
    binio::write_f64_slice(&mut w, &cols)?;
    Ok(())
}

pub fn load_basis(path: &Path) -> Result<EigenBasis> {
    let mut r = BufReader::new(File::open(path)?);
    binio::expect_magic(&mut r, EIG_MAGIC)?;
    let m = binio::read_len(&mut r, "basis dimension", 1 << 24)?;
    let centered = match binio::read_u8(&mut r)? {
        0 => false,
        1 => true,
        other => {
            return Err(Error::Format(format!(
                "centered flag must be 0 or 1, got {other}"
            )))
        }
    };
    let mean = binio::read_f64_vec(&mut r, m)?;
    let values = binio::read_f64_vec(&mut r, m)?;
    let cols = binio::read_f64_vec(&mut r, m * m)?;
    binio::expect_eof(&mut r)?;
    let mut vectors = Matrix::zeros(m, m);
    for j in 0..m {
        for i in 0..m {
            vectors.set(i, j, cols[j * m + i]);
        }
    }
    EigenBasis::new(vectors, values, centered, mean)
}
