//! Masked robust PCA: split the agreement matrix into low-rank plus sparse.
//!
//! Solves
//!
//! ```text
//! min ||C||_* + lambda * ||vec(S)||_1   s.t.  Omega o Sigma = Omega o (C + S)
//! ```
//!
//! with an inexact augmented-Lagrangian scheme. Unobserved entries carry an
//! auxiliary free variable `E` so that every subproblem is a closed-form
//! proximal step: singular-value soft-thresholding for `C`, entrywise
//! soft-thresholding for `S` on the mask, and exact fill-in for `E` off the
//! mask. Inputs are symmetric, so SVT runs through a symmetric eigensolver.

use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::agreement::AgreementEstimate;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Lambda {
    /// `1 / sqrt(alpha * M)`, alpha the fraction of observed entries.
    #[default]
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RpcaConfig {
    pub lambda: Lambda,
    pub max_iterations: usize,
    /// Stop once the masked constraint violation (max-norm) drops below this.
    pub tolerance: f64,
    pub penalty_growth: f64,
}

impl Default for RpcaConfig {
    fn default() -> Self {
        Self {
            lambda: Lambda::Auto,
            max_iterations: 20000,
            tolerance: 1e-6,
            penalty_growth: 1.5,
        }
    }
}

impl RpcaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::Config("rpca tolerance must be positive".into()));
        }
        if !(self.penalty_growth > 1.0) {
            return Err(Error::Config("rpca penalty growth must exceed 1".into()));
        }
        if let Lambda::Fixed(l) = self.lambda {
            if !(l > 0.0) {
                return Err(Error::Config("rpca lambda must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RpcaStatus {
    Converged,
    MaxIterations,
}

#[derive(Debug, Clone, Serialize)]
pub struct RpcaDecomposition {
    pub c_hat: DMatrix<f64>,
    pub s_hat: DMatrix<f64>,
    pub iterations: usize,
    /// Max-norm of `Omega o (Sigma - C - S)`.
    pub primal_residual: f64,
    pub status: RpcaStatus,
    pub lambda: f64,
    pub objective: f64,
    pub residual_trace: Vec<f64>,
}

impl RpcaDecomposition {
    pub fn converged(&self) -> bool {
        self.status == RpcaStatus::Converged
    }

    /// Writes `C`, `S` and the residual trace as CSV blocks.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        for (name, m) in [("c_hat", &self.c_hat), ("s_hat", &self.s_hat)] {
            writeln!(w, "# {name}")?;
            for row in m.row_iter() {
                let cells: Vec<String> = row.iter().map(|x| x.to_string()).collect();
                writeln!(w, "{}", cells.join(","))?;
            }
        }
        writeln!(w, "# residual_trace")?;
        writeln!(w, "iteration,residual")?;
        for (i, r) in self.residual_trace.iter().enumerate() {
            writeln!(w, "{},{}", i + 1, r)?;
        }
        Ok(())
    }
}

/// `1 / sqrt(alpha * M)` with `alpha` the observed fraction of the `M x M` mask.
pub fn default_lambda(omega: &DMatrix<bool>, m: usize) -> Result<f64> {
    let observed = omega.iter().filter(|&&o| o).count();
    if observed == 0 || m == 0 {
        return Err(Error::Empty("observation mask has no entries".into()));
    }
    let alpha = observed as f64 / (m * m) as f64;
    Ok(1.0 / (alpha * m as f64).sqrt())
}

pub fn nuclear_norm(c: &DMatrix<f64>) -> f64 {
    c.singular_values().sum()
}

pub fn rpca_objective(c: &DMatrix<f64>, s: &DMatrix<f64>, lambda: f64) -> f64 {
    nuclear_norm(c) + lambda * s.iter().map(|x| x.abs()).sum::<f64>()
}

/// Over-relaxation factor of the splitting iteration.
const RELAXATION: f64 = 1.6;

fn soft(x: f64, t: f64) -> f64 {
    x.signum() * (x.abs() - t).max(0.0)
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Prox of `tau * ||.||_*` at a symmetric matrix.
fn singular_value_threshold(x: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(x));
    let shrunk = eig.eigenvalues.map(|l| soft(l, tau));
    let q = &eig.eigenvectors;
    let scaled = DMatrix::from_fn(q.nrows(), q.ncols(), |i, j| q[(i, j)] * shrunk[j]);
    symmetrize(&(scaled * q.transpose()))
}

/// Decomposes the masked agreement matrix into low-rank `C` and sparse `S`.
///
/// Never fails on slow convergence: the last iterate is returned with
/// `status = MaxIterations`.
pub fn rpca_decompose(sigma: &AgreementEstimate, cfg: &RpcaConfig) -> Result<RpcaDecomposition> {
    cfg.validate()?;
    let m = sigma.dim();
    let lambda = match cfg.lambda {
        Lambda::Auto => default_lambda(&sigma.omega, m)?,
        Lambda::Fixed(l) => l,
    };
    let mask = sigma.mask();
    let d = sigma.sigma_hat.component_mul(&mask);

    if d.amax() == 0.0 {
        return Ok(RpcaDecomposition {
            c_hat: DMatrix::zeros(m, m),
            s_hat: DMatrix::zeros(m, m),
            iterations: 0,
            primal_residual: 0.0,
            status: RpcaStatus::Converged,
            lambda,
            objective: 0.0,
            residual_trace: Vec::new(),
        });
    }

    let spectral = SymmetricEigen::new(symmetrize(&d)).eigenvalues.amax();
    // dual init scaled into the dual-norm ball
    let dual_norm = spectral.max(d.amax() / lambda);
    let mut y = &d / dual_norm;
    let mut mu = 1.25 / spectral;

    let mut c = DMatrix::zeros(m, m);
    let mut s = DMatrix::<f64>::zeros(m, m);
    // low-rank values imputed on unobserved entries (minus the free variable E)
    let mut fill = DMatrix::<f64>::zeros(m, m);
    let mut residual = f64::INFINITY;
    let mut trace = Vec::new();
    let mut status = RpcaStatus::MaxIterations;
    let mut iterations = 0;

    for it in 0..cfg.max_iterations {
        iterations = it + 1;
        let target = DMatrix::from_fn(m, m, |i, j| {
            if sigma.omega[(i, j)] {
                d[(i, j)] - s[(i, j)] + y[(i, j)] / mu
            } else {
                fill[(i, j)]
            }
        });
        c = singular_value_threshold(&target, 1.0 / mu);

        let mut dual: f64 = 0.0;
        residual = 0.0;
        for j in 0..m {
            for i in 0..m {
                if sigma.omega[(i, j)] {
                    let relaxed = RELAXATION * c[(i, j)] + (1.0 - RELAXATION) * (d[(i, j)] - s[(i, j)]);
                    let s_new = soft(d[(i, j)] - relaxed + y[(i, j)] / mu, lambda / mu);
                    dual = dual.max((s_new - s[(i, j)]).abs());
                    s[(i, j)] = s_new;
                    y[(i, j)] += mu * (d[(i, j)] - relaxed - s_new);
                    residual = residual.max((d[(i, j)] - c[(i, j)] - s_new).abs());
                } else {
                    let f_new = RELAXATION * c[(i, j)] + (1.0 - RELAXATION) * fill[(i, j)];
                    dual = dual.max((f_new - fill[(i, j)]).abs());
                    fill[(i, j)] = f_new;
                }
            }
        }
        dual *= mu;
        trace.push(residual);
        if residual <= cfg.tolerance && dual <= cfg.tolerance {
            status = RpcaStatus::Converged;
            break;
        }
        // keep primal and dual residuals within a factor of ten of each other
        if residual > 10.0 * dual {
            mu *= cfg.penalty_growth;
        } else if dual > 10.0 * residual {
            mu /= cfg.penalty_growth;
        }
    }

    let c_hat = symmetrize(&c);
    let s_hat = symmetrize(&s);
    let objective = rpca_objective(&c_hat, &s_hat, lambda);
    Ok(RpcaDecomposition {
        c_hat,
        s_hat,
        iterations,
        primal_residual: residual,
        status,
        lambda,
        objective,
        residual_trace: trace,
    })
}

/// Top-`r` eigenpairs of the symmetrized input, eigenvalues descending.
pub fn truncated_eig(c: &DMatrix<f64>, r: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let m = c.nrows();
    if c.ncols() != m {
        return Err(Error::Dimension(format!("matrix is {}x{}", m, c.ncols())));
    }
    if r == 0 || r > m {
        return Err(Error::Dimension(format!("requested {r} eigenpairs of a {m}x{m} matrix")));
    }
    let eig = SymmetricEigen::new(symmetrize(c));
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let values = DVector::from_fn(r, |i, _| eig.eigenvalues[order[i]]);
    let vectors = DMatrix::from_fn(m, r, |i, j| eig.eigenvectors[(i, order[j])]);
    Ok((values, vectors))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full(sigma: DMatrix<f64>) -> AgreementEstimate {
        let m = sigma.nrows();
        AgreementEstimate {
            sigma_hat: sigma,
            omega: DMatrix::from_element(m, m, true),
            co_counts: DMatrix::from_element(m, m, 100),
        }
    }

    #[test]
    fn default_lambda_values() {
        let full100 = DMatrix::from_element(100, 100, true);
        assert!((default_lambda(&full100, 100).unwrap() - 0.1).abs() < 1e-15);
        let quarter = DMatrix::from_fn(64, 64, |i, j| i < 32 && j < 32);
        assert!((default_lambda(&quarter, 64).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(default_lambda(&DMatrix::from_element(1, 1, true), 1).unwrap(), 1.0);
        assert!(default_lambda(&DMatrix::from_element(3, 3, false), 3).is_err());
    }

    #[test]
    fn zero_input_gives_zero_split() {
        let out = rpca_decompose(&full(DMatrix::zeros(6, 6)), &RpcaConfig::default()).unwrap();
        assert!(out.converged());
        assert_eq!(out.c_hat.amax(), 0.0);
        assert_eq!(out.s_hat.amax(), 0.0);
    }

    #[test]
    fn identity_goes_to_sparse_part() {
        let cfg = RpcaConfig {
            lambda: Lambda::Fixed(0.2),
            ..Default::default()
        };
        let out = rpca_decompose(&full(DMatrix::identity(25, 25)), &cfg).unwrap();
        assert!(out.converged());
        assert!(out.c_hat.amax() < 1e-4, "{}", out.c_hat.amax());
        assert!((&out.s_hat - DMatrix::<f64>::identity(25, 25)).amax() < 1e-4);
        assert!((out.objective - 5.0).abs() < 1e-4);
    }

    #[test]
    fn output_is_symmetric_and_feasible() {
        let m = 12;
        let sigma = DMatrix::from_fn(m, m, |i, j| {
            if i == j {
                1.0
            } else {
                0.3 + 0.01 * ((i * j) % 5) as f64 + 0.01 * ((i + j) % 3) as f64
            }
        });
        let out = rpca_decompose(&full(sigma), &RpcaConfig::default()).unwrap();
        assert!(out.converged());
        assert_eq!(out.c_hat, out.c_hat.transpose());
        assert!(out.primal_residual <= 1e-6);
    }

    #[test]
    fn truncated_eig_basics() {
        let (vals, _) = truncated_eig(&DMatrix::identity(4, 4), 2).unwrap();
        assert_eq!(vals.as_slice(), &[1.0, 1.0]);

        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 3.0, 2.0]));
        let (vals, vecs) = truncated_eig(&d, 2).unwrap();
        assert_eq!(vals.as_slice(), &[3.0, 2.0]);
        assert!((vecs[(1, 0)].abs() - 1.0).abs() < 1e-12);
        assert!((vecs[(2, 1)].abs() - 1.0).abs() < 1e-12);

        assert!(truncated_eig(&d, 4).is_err());
    }

    #[test]
    fn truncated_eig_full_reconstruction() {
        let m = 10;
        let a = DMatrix::from_fn(m, m, |i, j| ((i * 7 + j * 3) % 11) as f64 / 11.0 - 0.4);
        let sym = symmetrize(&a);
        let (vals, q) = truncated_eig(&sym, m).unwrap();
        let rec = &q * DMatrix::from_diagonal(&vals) * q.transpose();
        assert!((rec - &sym).amax() < 1e-10);
    }
}
