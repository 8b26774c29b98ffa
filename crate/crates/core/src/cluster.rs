//! Annotator clustering by elastic-net self-representation.
//!
//! Columns of the low-rank agreement part are the points being clustered.
//! Honest columns span a subspace of dimension at most `K^2`, so each is
//! expressed sparsely through the others; spectral clustering of the
//! coefficient affinity splits annotators in two, and side information decides
//! which half is honest.

use std::collections::{BTreeSet, VecDeque};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agreement::AgreementEstimate;
use crate::error::{Error, Result};
use crate::rng_from_seed;
use crate::rpca::truncated_eig;

/// `rho` grid searched by default.
pub const DEFAULT_RHO_GRID: [f64; 9] = [1.1, 2.0, 5.0, 10.0, 20.0, 100.0, 500.0, 800.0, 1000.0];
pub const DEFAULT_RHO2: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    /// Weight of the l1 term inside the elastic-net regularizer.
    pub rho2: f64,
    /// Not part of serialized configs; experiments carry their own grid.
    #[serde(skip, default = "default_grid")]
    pub rho_grid: Vec<f64>,
    pub kmeans_restarts: usize,
    /// k-means seed. Not serialized; experiments derive one per repetition.
    #[serde(skip)]
    pub seed: u64,
    /// Per-column stationarity tolerance of the elastic-net solve.
    pub kkt_tolerance: f64,
    pub max_sweeps: usize,
    /// Report a single cluster when the affinity spectrum has a larger gap
    /// after the first eigenvalue than after the second.
    pub eigengap_test: bool,
    pub single_cluster: SingleCluster,
}

/// Role of single-cluster grid points in the `rho` search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SingleCluster {
    /// Not a candidate; only chosen when no grid point yields a bipartition.
    Fallback,
    /// Competes with bipartitions, scored as `eps` of the full set.
    ScoreFullSet,
}

fn default_grid() -> Vec<f64> {
    DEFAULT_RHO_GRID.to_vec()
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            rho2: DEFAULT_RHO2,
            rho_grid: DEFAULT_RHO_GRID.to_vec(),
            kmeans_restarts: 20,
            seed: 0,
            kkt_tolerance: 1e-9,
            max_sweeps: 20_000,
            eigengap_test: true,
            single_cluster: SingleCluster::Fallback,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SelfRepresentation {
    pub z: DMatrix<f64>,
    pub rho: f64,
    pub rho2: f64,
    /// `||C - C Z||_F^2`
    pub residual: f64,
    /// Largest per-column stationarity violation.
    pub kkt_residual: f64,
}

/// Elastic-net coefficients for one target column. An active-set
/// (feature-sign) search solves the problem exactly; coordinate descent from
/// its last iterate is the fallback.
struct ColumnSolver<'a> {
    gram: &'a DMatrix<f64>,
    l1: f64,
    l2: f64,
    tol: f64,
    max_sweeps: usize,
}

impl ColumnSolver<'_> {
    fn grad(&self, gz: &DVector<f64>, target: &DVector<f64>, z: &DVector<f64>, i: usize) -> f64 {
        2.0 * (gz[i] - target[i]) + self.l2 * z[i]
    }

    fn kkt(&self, gz: &DVector<f64>, target: &DVector<f64>, z: &DVector<f64>, skip: usize) -> f64 {
        (0..z.len())
            .filter(|&i| i != skip)
            .map(|i| {
                let g = self.grad(gz, target, z, i);
                if z[i] != 0.0 {
                    (g + self.l1 * z[i].signum()).abs()
                } else {
                    (g.abs() - self.l1).max(0.0)
                }
            })
            .fold(0.0, f64::max)
    }

    /// Objective up to the constant `||c_j||^2`.
    fn objective(&self, z: &DVector<f64>, target: &DVector<f64>) -> f64 {
        let gz = self.gram * z;
        z.dot(&gz) - 2.0 * target.dot(z) + 0.5 * self.l2 * z.norm_squared() + self.l1 * z.lp_norm(1)
    }

    /// Minimizer of the smooth model on `active` with fixed signs.
    fn signed_solve(&self, active: &[usize], z: &DVector<f64>, target: &DVector<f64>) -> Option<DVector<f64>> {
        let s = active.len();
        let a = DMatrix::from_fn(s, s, |p, q| {
            2.0 * self.gram[(active[p], active[q])] + if p == q { self.l2 } else { 0.0 }
        });
        let b = DVector::from_fn(s, |p, _| 2.0 * target[active[p]] - self.l1 * z[active[p]].signum());
        let chol = a.clone().cholesky()?;
        let mut x = chol.solve(&b);
        // one refinement step
        let r = &b - &a * &x;
        x += chol.solve(&r);
        Some(x)
    }

    fn feature_sign(&self, j: usize, target: &DVector<f64>) -> Option<(DVector<f64>, f64)> {
        let m = self.gram.nrows();
        let mut z = DVector::<f64>::zeros(m);
        let mut active: Vec<usize> = Vec::new();
        // signs of active coordinates that are still zero
        let mut pending: Vec<(usize, f64)> = Vec::new();
        for _ in 0..20 * m + 20 {
            let gz = self.gram * &z;
            let nonzero_ok = active
                .iter()
                .all(|&i| (self.grad(&gz, target, &z, i) + self.l1 * z[i].signum()).abs() <= self.tol);
            if nonzero_ok {
                let entering = (0..m)
                    .filter(|&i| i != j && z[i] == 0.0)
                    .map(|i| (i, self.grad(&gz, target, &z, i)))
                    .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)));
                match entering {
                    Some((i, g)) if g.abs() - self.l1 > self.tol => {
                        active.push(i);
                        pending = vec![(i, -g.signum())];
                    }
                    _ => return Some((z.clone(), self.kkt(&gz, target, &z, j))),
                }
            }

            // signed direction with pending coordinates given their entry sign
            let mut signed = z.clone();
            for &(i, sgn) in &pending {
                signed[i] = sgn * f64::MIN_POSITIVE;
            }
            let x = self.signed_solve(&active, &signed, target)?;
            pending.clear();

            let mut best = z.clone();
            let mut best_obj = self.objective(&z, target);
            let start_obj = best_obj;
            let mut candidates = vec![1.0];
            for (p, &i) in active.iter().enumerate() {
                if z[i] != 0.0 && x[p].signum() != z[i].signum() {
                    candidates.push(z[i] / (z[i] - x[p]));
                }
            }
            for &alpha in &candidates {
                let mut trial = z.clone();
                for (p, &i) in active.iter().enumerate() {
                    trial[i] = z[i] + alpha * (x[p] - z[i]);
                    if z[i] != 0.0 && alpha < 1.0 && (z[i] / (z[i] - x[p]) - alpha).abs() <= 1e-15 {
                        trial[i] = 0.0;
                    }
                }
                let obj = self.objective(&trial, target);
                if obj < best_obj {
                    best_obj = obj;
                    best = trial;
                }
            }
            if best_obj >= start_obj {
                // no descent: let the fallback take over
                return None;
            }
            z = best;
            active.retain(|&i| z[i] != 0.0);
        }
        None
    }

    fn coordinate_descent(&self, j: usize, target: &DVector<f64>, mut z: DVector<f64>) -> (DVector<f64>, f64) {
        let m = self.gram.nrows();
        let mut gz = self.gram * &z;
        let mut kkt = self.kkt(&gz, target, &z, j);
        let mut sweep = 0;
        while kkt > self.tol && sweep < self.max_sweeps {
            sweep += 1;
            for i in 0..m {
                if i == j {
                    continue;
                }
                let denom = 2.0 * self.gram[(i, i)] + self.l2;
                if denom <= 0.0 {
                    continue;
                }
                let partial = target[i] - (gz[i] - self.gram[(i, i)] * z[i]);
                let new = soft(2.0 * partial, self.l1) / denom;
                let delta = new - z[i];
                if delta != 0.0 {
                    gz.axpy(delta, &self.gram.column(i), 1.0);
                    z[i] = new;
                }
            }
            kkt = self.kkt(&gz, target, &z, j);
        }
        (z, kkt)
    }

    fn solve(&self, j: usize) -> (DVector<f64>, f64) {
        let target = self.gram.column(j).into_owned();
        match self.feature_sign(j, &target) {
            Some((z, kkt)) if kkt <= self.tol => (z, kkt),
            Some((z, _)) => self.coordinate_descent(j, &target, z),
            None => self.coordinate_descent(j, &target, DVector::zeros(self.gram.nrows())),
        }
    }
}

fn soft(x: f64, t: f64) -> f64 {
    x.signum() * (x.abs() - t).max(0.0)
}

/// Solves, column by column, `min ||c_j - C z||^2 + rho (rho2 ||z||_1 +
/// (1 - rho2)/2 ||z||^2)` with `z_j = 0`.
pub fn self_representation(
    c_hat: &DMatrix<f64>,
    rho: f64,
    rho2: f64,
    cfg: &ClusterConfig,
) -> Result<SelfRepresentation> {
    if !(rho > 0.0) || !(0.0..=1.0).contains(&rho2) {
        return Err(Error::Config(format!("invalid elastic net weights rho={rho} rho2={rho2}")));
    }
    let m = c_hat.ncols();
    let gram = c_hat.transpose() * c_hat;
    let solver = ColumnSolver {
        gram: &gram,
        l1: rho * rho2,
        l2: rho * (1.0 - rho2),
        tol: cfg.kkt_tolerance,
        max_sweeps: cfg.max_sweeps,
    };
    let columns: Vec<(DVector<f64>, f64)> = map_columns(m, |j| solver.solve(j));
    let mut z = DMatrix::zeros(m, m);
    let mut kkt_residual: f64 = 0.0;
    for (j, (col, k)) in columns.into_iter().enumerate() {
        z.set_column(j, &col);
        kkt_residual = kkt_residual.max(k);
    }
    let residual = (c_hat - c_hat * &z).norm_squared();
    Ok(SelfRepresentation {
        z,
        rho,
        rho2,
        residual,
        kkt_residual,
    })
}

#[cfg(feature = "parallel")]
fn map_columns<T: Send>(m: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    use rayon::prelude::*;
    (0..m).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_columns<T>(m: usize, f: impl Fn(usize) -> T) -> Vec<T> {
    (0..m).map(f).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Bipartition {
    pub cluster_1: Vec<usize>,
    pub cluster_2: Vec<usize>,
    /// Everything landed in one cluster (`cluster_2` empty).
    pub degenerate: bool,
}

impl Bipartition {
    fn single(m: usize) -> Self {
        Self {
            cluster_1: (0..m).collect(),
            cluster_2: Vec::new(),
            degenerate: true,
        }
    }

    fn from_assignment(assign: &[usize]) -> Self {
        let (mut a, mut b) = (Vec::new(), Vec::new());
        // cluster_1 is whichever holds annotator 0
        for (i, &c) in assign.iter().enumerate() {
            if c == assign[0] {
                a.push(i);
            } else {
                b.push(i);
            }
        }
        let degenerate = b.is_empty();
        Self {
            cluster_1: a,
            cluster_2: b,
            degenerate,
        }
    }
}

fn components(w: &DMatrix<f64>, eps: f64) -> Vec<usize> {
    let m = w.nrows();
    let mut comp = vec![usize::MAX; m];
    let mut next = 0;
    for start in 0..m {
        if comp[start] != usize::MAX {
            continue;
        }
        comp[start] = next;
        let mut queue = VecDeque::from([start]);
        while let Some(u) = queue.pop_front() {
            for v in 0..m {
                if comp[v] == usize::MAX && w[(u, v)] > eps {
                    comp[v] = next;
                    queue.push_back(v);
                }
            }
        }
        next += 1;
    }
    comp
}

/// Spectral clustering of `|Z| + |Z^T|` into two groups.
pub fn spectral_bipartition(z: &SelfRepresentation, cfg: &ClusterConfig) -> Bipartition {
    let m = z.z.nrows();
    let w = z.z.abs() + z.z.transpose().abs();
    let wmax = w.amax();
    if m < 2 || wmax == 0.0 {
        return Bipartition::single(m);
    }
    let eps = wmax * 1e-12;
    let comp = components(&w, eps);
    if comp.iter().max() == Some(&1) {
        return Bipartition::from_assignment(&comp);
    }

    let degree: Vec<f64> = w.row_iter().map(|r| r.sum()).collect();
    let inv_sqrt: Vec<f64> = degree
        .iter()
        .map(|&d| if d > eps { 1.0 / d.sqrt() } else { 0.0 })
        .collect();
    let norm_aff = DMatrix::from_fn(m, m, |i, j| inv_sqrt[i] * w[(i, j)] * inv_sqrt[j]);
    // leading eigenvectors of D^-1/2 W D^-1/2 = trailing ones of the normalized Laplacian
    let eig = SymmetricEigen::new(norm_aff);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    if cfg.eigengap_test && m >= 3 {
        let lam: Vec<f64> = order.iter().take(3).map(|&i| eig.eigenvalues[i]).collect();
        if lam[0] - lam[1] > lam[1] - lam[2] {
            return Bipartition::single(m);
        }
    }
    let points: Vec<[f64; 2]> = (0..m)
        .map(|i| {
            let p = [
                eig.eigenvectors[(i, order[0])],
                eig.eigenvectors[(i, order[1])],
            ];
            let n = (p[0] * p[0] + p[1] * p[1]).sqrt();
            if n > 0.0 {
                [p[0] / n, p[1] / n]
            } else {
                p
            }
        })
        .collect();
    let assign = kmeans2(&points, cfg.kmeans_restarts.max(1), cfg.seed);
    Bipartition::from_assignment(&assign)
}

fn dist2(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Two-means with k-means++ seeding; best inertia over restarts.
fn kmeans2(points: &[[f64; 2]], restarts: usize, seed: u64) -> Vec<usize> {
    let mut rng = rng_from_seed(seed);
    let n = points.len();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..restarts {
        let first = rng.gen_range(0..n);
        let d: Vec<f64> = points.iter().map(|p| dist2(p, &points[first])).collect();
        let total: f64 = d.iter().sum();
        let second = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &di) in d.iter().enumerate() {
                if u < di {
                    pick = i;
                    break;
                }
                u -= di;
            }
            pick
        } else {
            (first + 1) % n
        };
        let mut centers = [points[first], points[second]];
        let mut assign = vec![0usize; n];
        for _ in 0..100 {
            let mut changed = false;
            for (i, p) in points.iter().enumerate() {
                let c = usize::from(dist2(p, &centers[1]) < dist2(p, &centers[0]));
                if c != assign[i] {
                    assign[i] = c;
                    changed = true;
                }
            }
            for (c, center) in centers.iter_mut().enumerate() {
                let members: Vec<&[f64; 2]> =
                    points.iter().zip(&assign).filter(|(_, &a)| a == c).map(|(p, _)| p).collect();
                if !members.is_empty() {
                    let k = members.len() as f64;
                    *center = [
                        members.iter().map(|p| p[0]).sum::<f64>() / k,
                        members.iter().map(|p| p[1]).sum::<f64>() / k,
                    ];
                }
            }
            if !changed {
                break;
            }
        }
        let inertia: f64 = points.iter().zip(&assign).map(|(p, &a)| dist2(p, &centers[a])).sum();
        if best.as_ref().map_or(true, |(b, _)| inertia < *b) {
            best = Some((inertia, assign));
        }
    }
    best.map(|(_, a)| a).unwrap_or_default()
}

/// Normalized off-diagonal misfit of a cluster's agreement block to the
/// rank-`K^2` part of its low-rank block. `+inf` when the cluster has fewer
/// than `K^2` members or no observed entries.
pub fn fit_score(sigma: &AgreementEstimate, c_hat: &DMatrix<f64>, cluster: &[usize], k: usize) -> f64 {
    let r = k * k;
    let card = cluster.len();
    if card == 0 || card < r {
        return f64::INFINITY;
    }
    let sub_c = DMatrix::from_fn(card, card, |i, j| c_hat[(cluster[i], cluster[j])]);
    let Ok((vals, q)) = truncated_eig(&sub_c, r) else {
        return f64::INFINITY;
    };
    let approx = &q * DMatrix::from_diagonal(&vals) * q.transpose();
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &a) in cluster.iter().enumerate() {
        for (j, &b) in cluster.iter().enumerate() {
            if !sigma.omega[(a, b)] {
                continue;
            }
            let s = sigma.sigma_hat[(a, b)];
            den += s * s;
            if i != j {
                num += (s - approx[(i, j)]).powi(2);
            }
        }
    }
    if den == 0.0 {
        return f64::INFINITY;
    }
    num / den / card as f64
}

/// External knowledge used to decide which cluster is honest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SideInfo {
    /// The larger cluster is honest.
    MajorityHonest,
    /// The cluster holding these (zero-based) annotators is honest.
    TrustedAnnotators(BTreeSet<usize>),
}

#[derive(Debug, Clone, Serialize)]
pub struct RhoDiagnostic {
    pub rho: f64,
    pub epsilon_1: f64,
    pub epsilon_2: f64,
    pub score: f64,
    pub size_1: usize,
    pub size_2: usize,
    pub degenerate: bool,
    /// `Z = 0` at this `rho`.
    pub empty_affinity: bool,
    pub kkt_residual: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AnnotatorPartition {
    pub cluster_1: Vec<usize>,
    pub cluster_2: Vec<usize>,
    pub honest: Vec<usize>,
    pub adversarial: Vec<usize>,
    pub epsilon_1: f64,
    pub epsilon_2: f64,
    pub chosen_rho: f64,
    /// No split was found; everyone is treated as honest.
    pub degenerate: bool,
    pub diagnostics: Vec<RhoDiagnostic>,
}

impl AnnotatorPartition {
    pub fn num_annotators(&self) -> usize {
        self.honest.len() + self.adversarial.len()
    }

    /// Treats every annotator as honest.
    pub fn all_honest(m: usize) -> Self {
        Self {
            cluster_1: (0..m).collect(),
            cluster_2: Vec::new(),
            honest: (0..m).collect(),
            adversarial: Vec::new(),
            epsilon_1: f64::NAN,
            epsilon_2: f64::NAN,
            chosen_rho: f64::NAN,
            degenerate: true,
            diagnostics: Vec::new(),
        }
    }
}

/// Grid-searches `rho`, keeps the bipartition with the smallest
/// `eps(C1) + eps(C2)` and labels it with side information.
///
/// How single-cluster grid points (including `Z = 0`) take part depends on
/// `cfg.single_cluster`. If no point has a finite score everyone is treated
/// as honest.
pub fn cluster_annotators(
    sigma: &AgreementEstimate,
    c_hat: &DMatrix<f64>,
    k: usize,
    side: &SideInfo,
    cfg: &ClusterConfig,
) -> Result<AnnotatorPartition> {
    if cfg.rho_grid.is_empty() {
        return Err(Error::Config("rho grid is empty".into()));
    }
    let m = c_hat.nrows();
    if let SideInfo::TrustedAnnotators(t) = side {
        if t.is_empty() {
            return Err(Error::Config("trusted annotator set is empty".into()));
        }
        if let Some(&bad) = t.iter().find(|&&i| i >= m) {
            return Err(Error::Config(format!("trusted annotator {} out of range", bad + 1)));
        }
    }

    let mut best: Option<(f64, Bipartition, f64, f64, f64)> = None;
    let mut diagnostics = Vec::with_capacity(cfg.rho_grid.len());
    for &rho in &cfg.rho_grid {
        let rep = self_representation(c_hat, rho, cfg.rho2, cfg)?;
        let bip = spectral_bipartition(&rep, cfg);
        let empty_affinity = rep.z.amax() == 0.0;
        let (e1, e2, score) = if bip.degenerate {
            let e = fit_score(sigma, c_hat, &bip.cluster_1, k);
            let score = match cfg.single_cluster {
                SingleCluster::ScoreFullSet => e,
                SingleCluster::Fallback => f64::INFINITY,
            };
            (e, f64::NAN, score)
        } else {
            let e1 = fit_score(sigma, c_hat, &bip.cluster_1, k);
            let e2 = fit_score(sigma, c_hat, &bip.cluster_2, k);
            (e1, e2, e1 + e2)
        };
        diagnostics.push(RhoDiagnostic {
            rho,
            epsilon_1: e1,
            epsilon_2: e2,
            score,
            size_1: bip.cluster_1.len(),
            size_2: bip.cluster_2.len(),
            degenerate: bip.degenerate,
            empty_affinity,
            kkt_residual: rep.kkt_residual,
        });
        if best.as_ref().map_or(true, |b| score < b.0) {
            best = Some((score, bip, e1, e2, rho));
        }
    }
    let (score, bip, e1, e2, rho) = best.expect("grid is non-empty");
    if bip.degenerate || !score.is_finite() {
        let mut p = AnnotatorPartition::all_honest(m);
        p.epsilon_1 = e1;
        p.epsilon_2 = e2;
        p.chosen_rho = rho;
        p.diagnostics = diagnostics;
        return Ok(p);
    }

    let honest_is_first = match side {
        SideInfo::MajorityHonest => bip.cluster_1.len() >= bip.cluster_2.len(),
        SideInfo::TrustedAnnotators(t) => {
            let in_first = t.iter().filter(|i| bip.cluster_1.binary_search(i).is_ok()).count();
            if in_first != 0 && in_first != t.len() {
                return Err(Error::AmbiguousSideInfo(format!(
                    "trusted annotators split across clusters ({in_first} of {})",
                    t.len()
                )));
            }
            in_first == t.len()
        }
    };
    let (honest, adversarial) = if honest_is_first {
        (bip.cluster_1.clone(), bip.cluster_2.clone())
    } else {
        (bip.cluster_2.clone(), bip.cluster_1.clone())
    };
    Ok(AnnotatorPartition {
        cluster_1: bip.cluster_1,
        cluster_2: bip.cluster_2,
        honest,
        adversarial,
        epsilon_1: e1,
        epsilon_2: e2,
        chosen_rho: rho,
        degenerate: false,
        diagnostics,
    })
}
