//! Magnetic Laplacian construction, smallest-eigenpair extraction and the
//! offline phase-token precomputation.

use std::time::Instant;

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bank::PhaseTokenBank;
use crate::direction::LowRankBasis;
use crate::error::{Error, Result};
use crate::geo::GeoGraph;

type C64 = Complex64;

/// Antisymmetric node-pair field on the graph edges: `A_ij = a_e` for
/// `i < j` and `A_ji = -a_e`.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionMatrix {
    values: Vec<f64>,
}

impl DirectionMatrix {
    /// `A_ij` for an arbitrary ordered pair.
    pub fn get(&self, graph: &GeoGraph, i: usize, j: usize) -> f64 {
        match graph.edge_id(i, j) {
            Some(e) if i < j => self.values[e],
            Some(e) => -self.values[e],
            None => 0.0,
        }
    }

    /// Per-edge values for the canonical orientation `i < j`.
    pub fn edge_values(&self) -> &[f64] {
        &self.values
    }
}

pub fn lift_antisymmetric(psi_row: &[f64], graph: &GeoGraph) -> Result<DirectionMatrix> {
    if psi_row.len() != graph.n_edges() {
        return Err(Error::invalid(format!(
            "direction row has {} entries for {} edges",
            psi_row.len(),
            graph.n_edges()
        )));
    }
    Ok(DirectionMatrix {
        values: psi_row.to_vec(),
    })
}

/// `L = I - D^{-1/2} H D^{-1/2}` with `H_ij = W_ij exp(i 2 pi q A_ij)`.
///
/// Only the `i < j` off-diagonal entries are stored; the lower triangle is
/// their conjugate, so `L` is Hermitian by construction. Isolated nodes
/// keep `L_ii = 1` and no off-diagonal entries.
#[derive(Debug, Clone)]
pub struct MagneticLaplacian<'g> {
    graph: &'g GeoGraph,
    q: f64,
    /// `L_ij` for each canonical edge `(i, j)`, `i < j`.
    upper: Vec<C64>,
}

impl<'g> MagneticLaplacian<'g> {
    pub fn n(&self) -> usize {
        self.graph.n_pois()
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn graph(&self) -> &GeoGraph {
        self.graph
    }

    /// Off-diagonal entry `L_ij`, `i != j`.
    pub fn entry(&self, i: usize, j: usize) -> C64 {
        if i == j {
            return C64::new(1.0, 0.0);
        }
        match self.graph.edge_id(i, j) {
            Some(e) if i < j => self.upper[e],
            Some(e) => self.upper[e].conj(),
            None => C64::new(0.0, 0.0),
        }
    }

    pub fn matvec(&self, x: &[C64], y: &mut [C64]) {
        y.copy_from_slice(x);
        for (e, edge) in self.graph.edges().iter().enumerate() {
            let (i, j) = (edge.i as usize, edge.j as usize);
            let l = self.upper[e];
            y[i] += l * x[j];
            y[j] += l.conj() * x[i];
        }
    }

    /// `x^* L x` (real up to rounding).
    pub fn quadratic_form(&self, x: &[C64]) -> C64 {
        let mut y = vec![C64::new(0.0, 0.0); x.len()];
        self.matvec(x, &mut y);
        x.iter().zip(&y).map(|(a, b)| a.conj() * b).sum()
    }

    pub fn to_dense(&self) -> DMatrix<C64> {
        let n = self.n();
        let mut m = DMatrix::identity(n, n);
        for (e, edge) in self.graph.edges().iter().enumerate() {
            let (i, j) = (edge.i as usize, edge.j as usize);
            m[(i, j)] = self.upper[e];
            m[(j, i)] = self.upper[e].conj();
        }
        m
    }
}

pub fn build_hermitian_laplacian<'g>(
    graph: &'g GeoGraph,
    direction: &DirectionMatrix,
    q: f64,
) -> Result<MagneticLaplacian<'g>> {
    if !(q >= 0.0 && q.is_finite()) {
        return Err(Error::invalid(format!("magnetic charge must be >= 0, got {q}")));
    }
    let d = graph.degrees();
    let two_pi_q = 2.0 * std::f64::consts::PI * q;
    let upper = graph
        .edges()
        .iter()
        .zip(direction.edge_values())
        .map(|(edge, &a)| {
            let (i, j) = (edge.i as usize, edge.j as usize);
            let scale = edge.weight / (d[i] * d[j]).sqrt();
            -C64::from_polar(scale, two_pi_q * a)
        })
        .collect();
    Ok(MagneticLaplacian { graph, q, upper })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigenOptions {
    /// Residual `||L x - lambda x||` below which a Ritz pair is accepted.
    pub tol: f64,
    /// Graphs with at most this many nodes use the dense solver.
    pub dense_threshold: usize,
    /// Lanczos cycles before giving up.
    pub max_restarts: usize,
    pub seed: u64,
    /// Basis index reported in errors and mixed into the start vector seed.
    pub basis: usize,
}

impl Default for EigenOptions {
    fn default() -> Self {
        EigenOptions {
            tol: 1e-10,
            dense_threshold: 512,
            max_restarts: 200,
            seed: 0x4d47_5531,
            basis: 0,
        }
    }
}

/// Smallest `k` eigenpairs, eigenvalues ascending; `vectors` is `n x k`
/// with orthonormal columns.
#[derive(Debug, Clone)]
pub struct Eigenpairs {
    pub values: Vec<f64>,
    pub vectors: DMatrix<C64>,
}

pub fn smallest_k_eigs(l: &MagneticLaplacian<'_>, k: usize, opts: &EigenOptions) -> Result<Eigenpairs> {
    let n = l.n();
    if k == 0 || k >= n {
        return Err(Error::invalid(format!("need 0 < k < {n}, got k = {k}")));
    }
    let pairs = if n <= opts.dense_threshold {
        dense_smallest_k(l, k)
    } else {
        lanczos_smallest_k(l, k, opts)?
    };
    for w in pairs.values.windows(2) {
        if (w[1] - w[0]).abs() < 1e-10 {
            log::warn!(
                "basis {}: near-degenerate eigenvalues {:.3e} / {:.3e}; eigenvectors are fixed only up to rotation",
                opts.basis,
                w[0],
                w[1]
            );
            break;
        }
    }
    Ok(pairs)
}

/// Dense Hermitian eigen-decomposition of the full matrix.
pub fn dense_smallest_k(l: &MagneticLaplacian<'_>, k: usize) -> Eigenpairs {
    let eig = SymmetricEigen::new(l.to_dense());
    let mut order: Vec<usize> = (0..l.n()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(a.cmp(&b)));
    let values = order[..k].iter().map(|&c| eig.eigenvalues[c]).collect();
    let cols: Vec<_> = order[..k].iter().map(|&c| eig.eigenvectors.column(c).into_owned()).collect();
    Eigenpairs {
        values,
        vectors: DMatrix::from_columns(&cols),
    }
}

fn dot(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn norm(a: &[C64]) -> f64 {
    a.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
}

fn orthogonalize(w: &mut [C64], against: &[Vec<C64>]) {
    for _ in 0..2 {
        for v in against {
            let c = dot(v, w);
            for (wi, vi) in w.iter_mut().zip(v) {
                *wi -= c * vi;
            }
        }
    }
}

struct RitzPair {
    value: f64,
    vector: Vec<C64>,
    residual: f64,
}

/// Lanczos with full reorthogonalization, run from `start` in the
/// orthogonal complement of `locked`. Returns Ritz pairs ascending.
fn lanczos_cycle(
    l: &MagneticLaplacian<'_>,
    start: Vec<C64>,
    locked: &[Vec<C64>],
    steps: usize,
) -> Vec<RitzPair> {
    let n = l.n();
    let mut q = start;
    orthogonalize(&mut q, locked);
    let nq = norm(&q);
    for x in &mut q {
        *x /= nq;
    }

    let mut basis: Vec<Vec<C64>> = Vec::with_capacity(steps);
    let mut alphas = Vec::with_capacity(steps);
    let mut betas: Vec<f64> = Vec::with_capacity(steps);
    let mut w = vec![C64::new(0.0, 0.0); n];
    let mut beta_last = 0.0;
    for j in 0..steps {
        l.matvec(&q, &mut w);
        let alpha = dot(&q, &w).re;
        for (wi, qi) in w.iter_mut().zip(&q) {
            *wi -= alpha * qi;
        }
        if let (Some(prev), Some(&b)) = (basis.last(), betas.last()) {
            for (wi, pi) in w.iter_mut().zip(prev) {
                *wi -= b * pi;
            }
        }
        basis.push(std::mem::take(&mut q));
        alphas.push(alpha);
        orthogonalize(&mut w, locked);
        orthogonalize(&mut w, &basis);
        let beta = norm(&w);
        beta_last = beta;
        if beta < 1e-13 || j + 1 == steps {
            break;
        }
        betas.push(beta);
        q = w.iter().map(|x| x / beta).collect();
    }

    let m = alphas.len();
    let mut t = DMatrix::<f64>::zeros(m, m);
    for i in 0..m {
        t[(i, i)] = alphas[i];
        if i + 1 < m {
            t[(i, i + 1)] = betas[i];
            t[(i + 1, i)] = betas[i];
        }
    }
    let eig = SymmetricEigen::new(t);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(a.cmp(&b)));
    order
        .into_iter()
        .map(|c| {
            let s = eig.eigenvectors.column(c);
            let mut v = vec![C64::new(0.0, 0.0); n];
            for (bj, &sj) in basis.iter().zip(s.iter()) {
                for (vi, bi) in v.iter_mut().zip(bj) {
                    *vi += sj * bi;
                }
            }
            let nv = norm(&v);
            for x in &mut v {
                *x /= nv;
            }
            RitzPair {
                value: eig.eigenvalues[c],
                vector: v,
                residual: beta_last * s[m - 1].abs(),
            }
        })
        .collect()
}

/// Restarted Lanczos with locking for the `k` smallest eigenpairs.
///
/// Converged Ritz pairs are locked and deflated. Once `k` pairs are locked
/// the search continues from fresh random vectors in the deflated space
/// until its smallest eigenvalue is confirmed not to lie below the current
/// `k`-th value; this recovers extra copies of degenerate eigenvalues that a
/// single Krylov sequence cannot see.
pub fn lanczos_smallest_k(l: &MagneticLaplacian<'_>, k: usize, opts: &EigenOptions) -> Result<Eigenpairs> {
    let n = l.n();
    if k == 0 || k >= n {
        return Err(Error::invalid(format!("need 0 < k < {n}, got k = {k}")));
    }
    let steps = (10 * k).max(20);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (opts.basis as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let random_start = |rng: &mut ChaCha8Rng| -> Vec<C64> {
        (0..n)
            .map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect()
    };
    let kth_value = |vals: &[f64]| {
        let mut sorted = vals.to_vec();
        sorted.sort_by(f64::total_cmp);
        sorted[k - 1]
    };

    let mut locked_vals: Vec<f64> = Vec::new();
    let mut locked: Vec<Vec<C64>> = Vec::new();
    let mut restart: Option<Vec<C64>> = None;
    let mut last_residual = f64::INFINITY;
    let mut iterations = 0;
    let mut done = false;

    for _ in 0..opts.max_restarts {
        let free = n - locked.len();
        if free == 0 {
            done = true;
            break;
        }
        let start = restart.take().unwrap_or_else(|| random_start(&mut rng));
        let m = steps.min(free);
        let ritz = lanczos_cycle(l, start, &locked, m);
        iterations += m;
        let bound = (locked.len() >= k).then(|| kth_value(&locked_vals));

        let mut newly_locked = 0;
        for pair in &ritz {
            if pair.residual >= opts.tol || bound.is_some_and(|kth| pair.value >= kth - opts.tol) {
                break;
            }
            let mut v = pair.vector.clone();
            orthogonalize(&mut v, &locked);
            let nv = norm(&v);
            if nv < 0.5 {
                break;
            }
            v.iter_mut().for_each(|x| *x /= nv);
            locked.push(v);
            locked_vals.push(pair.value);
            newly_locked += 1;
        }

        let rest = &ritz[newly_locked..];
        if locked.len() >= k {
            if newly_locked > 0 || rest.is_empty() {
                // verify from a fresh direction that nothing smaller was missed
                if rest.is_empty() && locked.len() == n {
                    done = true;
                    break;
                }
                continue;
            }
            let lowest = &rest[0];
            if lowest.residual < opts.tol {
                // converged and not below the k-th locked value
                done = true;
                break;
            }
            last_residual = lowest.residual;
            restart = Some(lowest.vector.clone());
        } else {
            if let Some(first) = rest.first() {
                last_residual = first.residual;
            }
            let wanted = (k - locked.len()).min(rest.len());
            if wanted > 0 {
                let mut v = vec![C64::new(0.0, 0.0); n];
                for pair in &rest[..wanted] {
                    for (vi, pi) in v.iter_mut().zip(&pair.vector) {
                        *vi += pi;
                    }
                }
                restart = Some(v);
            }
        }
    }

    if !done || locked.len() < k {
        return Err(Error::NoConvergence {
            basis: opts.basis,
            residual: last_residual,
            iterations,
        });
    }

    let mut order: Vec<usize> = (0..locked.len()).collect();
    order.sort_by(|&a, &b| locked_vals[a].total_cmp(&locked_vals[b]).then(a.cmp(&b)));
    let values = order[..k].iter().map(|&i| locked_vals[i]).collect();
    let mut vectors = DMatrix::zeros(n, k);
    for (c, &i) in order[..k].iter().enumerate() {
        for (r, x) in locked[i].iter().enumerate() {
            vectors[(r, c)] = *x;
        }
    }
    Ok(Eigenpairs { values, vectors })
}

/// Angles of `exp(i arg V)`; entries with modulus below `1e-12` map to 0.
/// Output is `n x k`, row-major.
pub fn phase_tokens(vectors: &DMatrix<C64>) -> Vec<f64> {
    let (n, k) = vectors.shape();
    let mut out = Vec::with_capacity(n * k);
    for i in 0..n {
        for m in 0..k {
            out.push(token_angle(vectors[(i, m)]));
        }
    }
    out
}

pub fn token_angle(z: C64) -> f64 {
    if z.norm() < 1e-12 {
        0.0
    } else {
        z.im.atan2(z.re)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BankReport {
    pub seconds_per_basis: Vec<f64>,
    pub eigenvalues: Vec<Vec<f64>>,
}

/// Runs lift, Laplacian, eigensolve and tokenization for every basis.
/// Bases are processed in parallel; the result does not depend on the
/// thread count.
pub fn precompute_bank(
    graph: &GeoGraph,
    basis: &LowRankBasis,
    q: f64,
    k: usize,
    opts: &EigenOptions,
) -> Result<(PhaseTokenBank, BankReport)> {
    if basis.n_edges() != graph.n_edges() {
        return Err(Error::invalid(format!(
            "basis covers {} edges, graph has {}",
            basis.n_edges(),
            graph.n_edges()
        )));
    }
    let results: Vec<Result<(Vec<f64>, Vec<f64>, f64)>> = (0..basis.rank())
        .into_par_iter()
        .map(|r| {
            let t0 = Instant::now();
            let row: Vec<f64> = basis.psi.row(r).iter().copied().collect();
            let a = lift_antisymmetric(&row, graph)?;
            let lap = build_hermitian_laplacian(graph, &a, q)?;
            let opts = EigenOptions { basis: r, ..*opts };
            let eig = smallest_k_eigs(&lap, k, &opts)?;
            Ok((phase_tokens(&eig.vectors), eig.values, t0.elapsed().as_secs_f64()))
        })
        .collect();

    let mut angles = Vec::with_capacity(basis.rank());
    let mut report = BankReport {
        seconds_per_basis: Vec::new(),
        eigenvalues: Vec::new(),
    };
    for res in results {
        let (a, vals, secs) = res?;
        angles.push(a);
        report.eigenvalues.push(vals);
        report.seconds_per_basis.push(secs);
    }
    let pi = crate::direction::row_major(&basis.pi);
    let bank = PhaseTokenBank::new(
        graph.n_pois(),
        k,
        q,
        graph.content_hash(),
        angles,
        pi,
        basis.n_bins(),
    )?;
    Ok((bank, report))
}
