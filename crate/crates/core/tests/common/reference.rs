//! Interior-point reference solve of the masked RPCA program.
//!
//! For symmetric data and mask, the program has a symmetric optimum, so the
//! nuclear norm is modelled as `min tr(P) + tr(N)` with `C = P - N`, `P, N` PSD.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, NonnegativeConeT, PSDTriangleConeT,
    SolverStatus, SupportedConeT, ZeroConeT,
};
use nalgebra::DMatrix;

pub struct ReferenceSolution {
    pub c: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub objective: f64,
}

fn tri_index(i: usize, j: usize) -> usize {
    // upper triangle, column-major: (i <= j)
    j * (j + 1) / 2 + i
}

pub fn reference_rpca(sigma: &DMatrix<f64>, omega: &DMatrix<bool>, lambda: f64) -> ReferenceSolution {
    let m = sigma.nrows();
    let nt = m * (m + 1) / 2;
    let obs: Vec<(usize, usize)> = (0..m)
        .flat_map(|j| (0..=j).map(move |i| (i, j)))
        .filter(|&(i, j)| omega[(i, j)])
        .collect();
    let no = obs.len();
    // x = [svec(P); svec(N); s; t]
    let n = 2 * nt + 2 * no;
    let (p0, n0, s0, t0) = (0, nt, 2 * nt, 2 * nt + no);
    let r2 = std::f64::consts::SQRT_2;

    let mut q = vec![0.0; n];
    for i in 0..m {
        q[p0 + tri_index(i, i)] = 1.0;
        q[n0 + tri_index(i, i)] = 1.0;
    }
    for (k, &(i, j)) in obs.iter().enumerate() {
        q[t0 + k] = lambda * if i == j { 1.0 } else { 2.0 };
    }

    let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
    let mut b = Vec::new();
    let mut row = 0;
    // equality on observed entries
    for (k, &(i, j)) in obs.iter().enumerate() {
        let w = if i == j { 1.0 } else { 1.0 / r2 };
        triplets.push((row, p0 + tri_index(i, j), w));
        triplets.push((row, n0 + tri_index(i, j), -w));
        triplets.push((row, s0 + k, 1.0));
        b.push(sigma[(i, j)]);
        row += 1;
    }
    // t - s >= 0, t + s >= 0
    for k in 0..no {
        triplets.push((row, s0 + k, 1.0));
        triplets.push((row, t0 + k, -1.0));
        b.push(0.0);
        row += 1;
        triplets.push((row, s0 + k, -1.0));
        triplets.push((row, t0 + k, -1.0));
        b.push(0.0);
        row += 1;
    }
    // PSD cones
    for base in [p0, n0] {
        for k in 0..nt {
            triplets.push((row, base + k, -1.0));
            b.push(0.0);
            row += 1;
        }
    }
    let a = csc_from_triplets(row, n, triplets);
    let p = CscMatrix::zeros((n, n));
    let cones: Vec<SupportedConeT<f64>> = vec![
        ZeroConeT(no),
        NonnegativeConeT(2 * no),
        PSDTriangleConeT(m),
        PSDTriangleConeT(m),
    ];
    let settings = DefaultSettingsBuilder::default()
        .verbose(false)
        .tol_gap_abs(1e-10)
        .tol_gap_rel(1e-10)
        .tol_feas(1e-10)
        .max_iter(200)
        .build()
        .unwrap();
    let mut solver = DefaultSolver::new(&p, &q, &a, &b, &cones, settings).unwrap();
    solver.solve();
    assert!(
        matches!(
            solver.solution.status,
            SolverStatus::Solved | SolverStatus::AlmostSolved
        ),
        "reference solve failed: {:?}",
        solver.solution.status
    );
    let x = &solver.solution.x;
    let unsvec = |base: usize| {
        DMatrix::from_fn(m, m, |i, j| {
            let (a, b) = if i <= j { (i, j) } else { (j, i) };
            let v = x[base + tri_index(a, b)];
            if a == b { v } else { v / r2 }
        })
    };
    let c = unsvec(p0) - unsvec(n0);
    let mut s = DMatrix::zeros(m, m);
    for (k, &(i, j)) in obs.iter().enumerate() {
        s[(i, j)] = x[s0 + k];
        s[(j, i)] = x[s0 + k];
    }
    let objective = c.singular_values().sum() + lambda * s.iter().map(|v| v.abs()).sum::<f64>();
    ReferenceSolution { c, s, objective }
}

fn csc_from_triplets(m: usize, n: usize, mut t: Vec<(usize, usize, f64)>) -> CscMatrix<f64> {
    t.sort_by_key(|&(r, c, _)| (c, r));
    let mut colptr = vec![0usize; n + 1];
    let mut rowval = Vec::with_capacity(t.len());
    let mut nzval = Vec::with_capacity(t.len());
    for &(r, c, v) in &t {
        colptr[c + 1] += 1;
        rowval.push(r);
        nzval.push(v);
    }
    for c in 0..n {
        colptr[c + 1] += colptr[c];
    }
    CscMatrix::new(m, n, colptr, rowval, nzval)
}
