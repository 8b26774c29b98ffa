//! Pairwise annotator agreement rates.
//!
//! Under the Dawid–Skene model the agreement rate of two honest annotators is
//! `tr(H_m diag(pi) H_m'^T)`, an inner product of per-annotator vectors of
//! length `K^2`. Honest agreement matrices are therefore low rank plus identity.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::annotations::{AnnotationMatrix, ConfusionMatrix, Priors};
use crate::error::{Error, Result};

/// Co-observations below this count are treated as unobserved.
pub const DEFAULT_MIN_OVERLAP: usize = 5;

/// Empirical agreement matrix with its observation mask.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgreementEstimate {
    /// Agreement rates; entries with `omega = false` hold 0.
    pub sigma_hat: DMatrix<f64>,
    pub omega: DMatrix<bool>,
    /// Number of items answered by both annotators (diagonal: by the annotator).
    pub co_counts: DMatrix<usize>,
}

impl AgreementEstimate {
    pub fn dim(&self) -> usize {
        self.sigma_hat.nrows()
    }

    pub fn num_observed(&self) -> usize {
        self.omega.iter().filter(|&&o| o).count()
    }

    /// Mask as a 0/1 real matrix.
    pub fn mask(&self) -> DMatrix<f64> {
        self.omega.map(|o| if o { 1.0 } else { 0.0 })
    }

    /// Restriction to the given annotators (rows and columns).
    pub fn select(&self, idx: &[usize]) -> Self {
        let k = idx.len();
        Self {
            sigma_hat: DMatrix::from_fn(k, k, |i, j| self.sigma_hat[(idx[i], idx[j])]),
            omega: DMatrix::from_fn(k, k, |i, j| self.omega[(idx[i], idx[j])]),
            co_counts: DMatrix::from_fn(k, k, |i, j| self.co_counts[(idx[i], idx[j])]),
        }
    }

    /// Same estimate with the diagonal marked unobserved.
    pub fn without_diagonal(&self) -> Self {
        let mut out = self.clone();
        for i in 0..self.dim() {
            out.omega[(i, i)] = false;
            out.sigma_hat[(i, i)] = 0.0;
        }
        out
    }

    /// One-based `m,m',sigma,count` rows for every observed entry.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "m,m_prime,sigma,count")?;
        let m = self.dim();
        for i in 0..m {
            for j in 0..m {
                if self.omega[(i, j)] {
                    writeln!(
                        w,
                        "{},{},{},{}",
                        i + 1,
                        j + 1,
                        self.sigma_hat[(i, j)],
                        self.co_counts[(i, j)]
                    )?;
                }
            }
        }
        Ok(())
    }
}

/// Fraction of co-answered items on which each pair of annotators agrees.
pub fn empirical_agreement(a: &AnnotationMatrix, min_overlap: usize) -> Result<AgreementEstimate> {
    if min_overlap < 1 {
        return Err(Error::Validation("min_overlap must be at least 1".into()));
    }
    let m = a.num_annotators();
    if m == 0 || a.num_responses() == 0 {
        return Err(Error::Empty("annotation matrix has no responses".into()));
    }
    let mut agree = DMatrix::<usize>::zeros(m, m);
    let mut co_counts = DMatrix::<usize>::zeros(m, m);
    for n in 0..a.num_items() {
        let resp = a.item_responses(n);
        for (i, &(mi, li)) in resp.iter().enumerate() {
            co_counts[(mi, mi)] += 1;
            for &(mj, lj) in &resp[i + 1..] {
                co_counts[(mi, mj)] += 1;
                if li == lj {
                    agree[(mi, mj)] += 1;
                }
            }
        }
    }
    let mut sigma_hat = DMatrix::zeros(m, m);
    let mut omega = DMatrix::from_element(m, m, false);
    for i in 0..m {
        if co_counts[(i, i)] > 0 {
            sigma_hat[(i, i)] = 1.0;
            omega[(i, i)] = true;
        }
        for j in i + 1..m {
            let c = co_counts[(i, j)];
            co_counts[(j, i)] = c;
            if c >= min_overlap {
                let s = agree[(i, j)] as f64 / c as f64;
                sigma_hat[(i, j)] = s;
                sigma_hat[(j, i)] = s;
                omega[(i, j)] = true;
                omega[(j, i)] = true;
            }
        }
    }
    Ok(AgreementEstimate {
        sigma_hat,
        omega,
        co_counts,
    })
}

/// Population agreement rate `tr(H_m diag(pi) H_m'^T)`.
pub fn oracle_agreement(h_m: &ConfusionMatrix, h_m2: &ConfusionMatrix, pi: &Priors) -> Result<f64> {
    let k = pi.num_classes();
    if h_m.num_classes() != k || h_m2.num_classes() != k {
        return Err(Error::Dimension(format!(
            "K mismatch: {} / {} / {k}",
            h_m.num_classes(),
            h_m2.num_classes()
        )));
    }
    let (a, b) = (h_m.matrix(), h_m2.matrix());
    let mut s = 0.0;
    for (c, &p) in pi.as_slice().iter().enumerate() {
        s += p * a.column(c).dot(&b.column(c));
    }
    Ok(s)
}

/// `vec(diag(pi)^{1/2} H_m^T)`, stacked column-major: entry `k*K + c` is
/// `sqrt(pi_c) * h[k][c]`.
pub fn oracle_vector(h_m: &ConfusionMatrix, pi: &Priors) -> DVector<f64> {
    let k = h_m.num_classes();
    let sqrt_pi: Vec<f64> = pi.as_slice().iter().map(|p| p.sqrt()).collect();
    DVector::from_fn(k * k, |idx, _| {
        let (resp, class) = (idx / k, idx % k);
        sqrt_pi[class] * h_m.prob(resp, class)
    })
}

/// Oracle low-rank part `C = V^T V` for a population of DS annotators.
pub fn oracle_agreement_matrix(confusions: &[ConfusionMatrix], pi: &Priors) -> DMatrix<f64> {
    let vs: Vec<DVector<f64>> = confusions.iter().map(|h| oracle_vector(h, pi)).collect();
    let m = vs.len();
    DMatrix::from_fn(m, m, |i, j| vs[i].dot(&vs[j]))
}
