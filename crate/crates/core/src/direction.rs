//! Time-binned directional edge signal and its low-rank factorization.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::binio::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::geo::GeoGraph;
use crate::ingest::{TimeBinner, Trajectory};

const BASIS_MAGIC: &[u8; 4] = b"MGB1";

/// Directed transition counts `(bin, from, to) -> N`, keyed only on ordered
/// pairs whose unordered pair is a graph edge.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TransitionCounts {
    pub n_bins: usize,
    pub counts: BTreeMap<(u32, u32, u32), u64>,
    pub report: CountReport,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CountReport {
    pub counted: u64,
    pub skipped_non_edge: u64,
    pub skipped_self: u64,
}

impl TransitionCounts {
    pub fn get(&self, bin: usize, from: usize, to: usize) -> u64 {
        self.counts
            .get(&(bin as u32, from as u32, to as u32))
            .copied()
            .unwrap_or(0)
    }

    /// Swaps the direction of every transition.
    pub fn reversed(&self) -> Self {
        TransitionCounts {
            n_bins: self.n_bins,
            counts: self.counts.iter().map(|(&(b, i, j), &n)| ((b, j, i), n)).collect(),
            report: self.report,
        }
    }

    fn merge(mut self, other: Self) -> Self {
        for (k, v) in other.counts {
            *self.counts.entry(k).or_insert(0) += v;
        }
        self.report.counted += other.report.counted;
        self.report.skipped_non_edge += other.report.skipped_non_edge;
        self.report.skipped_self += other.report.skipped_self;
        self
    }
}

/// Tallies consecutive transitions of the given (training) trajectories.
/// Each transition lands in the bin of its destination timestamp.
pub fn count_transitions<'a, I>(trajectories: I, graph: &GeoGraph, binner: TimeBinner) -> TransitionCounts
where
    I: IntoParallelIterator<Item = &'a Trajectory>,
{
    let empty = || TransitionCounts {
        n_bins: binner.n_bins,
        ..Default::default()
    };
    trajectories
        .into_par_iter()
        .fold(empty, |mut acc, traj| {
            for w in traj.steps.windows(2) {
                let (from, to) = (w[0].poi_id, w[1].poi_id);
                if from == to {
                    acc.report.skipped_self += 1;
                    continue;
                }
                if graph.edge_id(from, to).is_none() {
                    acc.report.skipped_non_edge += 1;
                    continue;
                }
                let b = binner.bin(w[1].timestamp) as u32;
                *acc.counts.entry((b, from as u32, to as u32)).or_insert(0) += 1;
                acc.report.counted += 1;
            }
            acc
        })
        .reduce(empty, TransitionCounts::merge)
}

/// `N_b x |E|` matrix of squashed log-ratios, every entry in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalMatrix {
    pub s: DMatrix<f64>,
}

/// `S[b, e] = tanh((ln(N_ij + alpha) - ln(N_ji + alpha)) / kappa)` for the
/// canonical endpoints `i < j` of edge `e`.
pub fn edge_signal(
    counts: &TransitionCounts,
    graph: &GeoGraph,
    alpha: f64,
    kappa: f64,
) -> Result<SignalMatrix> {
    if !(alpha > 0.0 && kappa > 0.0) {
        return Err(Error::invalid(format!(
            "alpha and kappa must be positive (alpha={alpha}, kappa={kappa})"
        )));
    }
    let mut pairs: HashMap<(usize, usize), (u64, u64)> = HashMap::new();
    for (&(b, from, to), &n) in &counts.counts {
        let e = graph
            .edge_id(from as usize, to as usize)
            .ok_or_else(|| Error::invalid(format!("count on non-edge ({from}, {to})")))?;
        let slot = pairs.entry((b as usize, e)).or_insert((0, 0));
        if from < to {
            slot.0 += n;
        } else {
            slot.1 += n;
        }
    }
    let mut s = DMatrix::zeros(counts.n_bins, graph.n_edges());
    for ((b, e), (fwd, bwd)) in pairs {
        s[(b, e)] = signal_value(fwd, bwd, alpha, kappa);
    }
    Ok(SignalMatrix { s })
}

pub fn signal_value(forward: u64, backward: u64, alpha: f64, kappa: f64) -> f64 {
    (((forward as f64 + alpha).ln() - (backward as f64 + alpha).ln()) / kappa).tanh()
}

/// `S ~ Pi * Psi` with `Pi = U diag(sigma)` (`N_b x R`) and `Psi = V^T`
/// (`R x |E|`, orthonormal rows).
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankBasis {
    pub pi: DMatrix<f64>,
    pub psi: DMatrix<f64>,
    pub singular_values: Vec<f64>,
}

impl LowRankBasis {
    pub fn rank(&self) -> usize {
        self.psi.nrows()
    }

    pub fn n_bins(&self) -> usize {
        self.pi.nrows()
    }

    pub fn n_edges(&self) -> usize {
        self.psi.ncols()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.pi * &self.psi
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(BASIS_MAGIC);
        w.u64(self.n_bins() as u64)
            .u64(self.n_edges() as u64)
            .u64(self.rank() as u64);
        w.f64s(&row_major(&self.pi)).f64s(&row_major(&self.psi));
        w.into_bytes()
    }

    /// Singular values are not part of the cache; they are recovered as the
    /// column norms of `Pi`.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, BASIS_MAGIC, path)?;
        let n_bins = r.usize()?;
        let n_edges = r.usize()?;
        let rank = r.usize()?;
        let pi = DMatrix::from_row_slice(n_bins, rank, &r.f64s(n_bins * rank)?);
        let psi = DMatrix::from_row_slice(rank, n_edges, &r.f64s(rank * n_edges)?);
        r.finish()?;
        let singular_values = (0..rank).map(|c| pi.column(c).norm()).collect();
        Ok(LowRankBasis {
            pi,
            psi,
            singular_values,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&binio::read_file(path)?, path)
    }
}

pub(crate) fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

/// Relative threshold below which a singular value counts as zero.
const RANK_TOL: f64 = 1e-12;

/// Rank-`R` truncated SVD of `S` folded into `(Pi, Psi)`.
///
/// The dominant subspace comes from the eigen-decomposition of the smaller
/// Gram matrix; it is then refined by a thin QR of the projected matrix and
/// an `R x R` SVD, so `Psi` is orthonormal to working precision regardless
/// of the conditioning of the Gram matrix. Each row of `Psi` is signed so
/// that its largest-magnitude entry is positive.
pub fn factorize(s: &SignalMatrix, rank: usize) -> Result<LowRankBasis> {
    let (m, n) = s.s.shape();
    if rank == 0 || rank > m.min(n) {
        return Err(Error::invalid(format!(
            "rank {rank} must be in [1, {}] for a {m}x{n} signal matrix",
            m.min(n)
        )));
    }
    let (u, sigma, vt) = if m <= n {
        truncated_svd_wide(&s.s, rank)
    } else {
        let (u, sigma, vt) = truncated_svd_wide(&s.s.transpose(), rank);
        (vt.transpose(), sigma, u.transpose())
    };

    let top = sigma.first().copied().unwrap_or(0.0);
    let numeric_rank = sigma.iter().filter(|&&x| x > RANK_TOL * top.max(f64::MIN_POSITIVE)).count();
    let mut sigma = sigma;
    let mut vt = vt;
    if numeric_rank < rank {
        log::warn!(
            "signal matrix has numerical rank {numeric_rank} < requested rank {rank}; padding with zero-energy components"
        );
        for x in sigma.iter_mut().skip(numeric_rank) {
            *x = 0.0;
        }
        complete_rows(&mut vt, numeric_rank);
    }

    let mut pi = u;
    for (c, &sv) in sigma.iter().enumerate() {
        pi.column_mut(c).scale_mut(sv);
    }
    let mut psi = vt;
    for r in 0..rank {
        let row = psi.row(r);
        let mut best = 0;
        for e in 1..row.len() {
            if row[e].abs() > row[best].abs() {
                best = e;
            }
        }
        if row[best] < 0.0 {
            psi.row_mut(r).neg_mut();
            pi.column_mut(r).neg_mut();
        }
    }
    Ok(LowRankBasis {
        pi,
        psi,
        singular_values: sigma,
    })
}

/// Truncated SVD of an `m x n` matrix with `m <= n`.
fn truncated_svd_wide(a: &DMatrix<f64>, rank: usize) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let m = a.nrows();
    let gram = a * a.transpose();
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[y].total_cmp(&eig.eigenvalues[x]).then(x.cmp(&y)));
    let u_r = DMatrix::from_columns(
        &order[..rank]
            .iter()
            .map(|&c| eig.eigenvectors.column(c).into_owned())
            .collect::<Vec<DVector<f64>>>(),
    );

    // A_R = U_R U_R^T A = U_R Y^T with Y = A^T U_R = Q T
    let y = a.transpose() * &u_r;
    let qr = y.qr();
    let q = qr.q();
    let t = qr.r();
    // A_R = U_R T^T Q^T; SVD of the small factor T^T = L diag(s) Rt
    let small = t.transpose().svd(true, true);
    let l = small.u.expect("requested U");
    let rt = small.v_t.expect("requested V^T");
    let mut idx: Vec<usize> = (0..rank).collect();
    idx.sort_by(|&x, &y| small.singular_values[y].total_cmp(&small.singular_values[x]).then(x.cmp(&y)));
    let l = DMatrix::from_columns(&idx.iter().map(|&c| l.column(c).into_owned()).collect::<Vec<_>>());
    let rt = DMatrix::from_rows(&idx.iter().map(|&r| rt.row(r).into_owned()).collect::<Vec<_>>());
    let sigma: Vec<f64> = idx.iter().map(|&c| small.singular_values[c]).collect();

    let u = &u_r * l;
    let vt = rt * q.transpose();
    (u, sigma, vt)
}

/// Replaces rows `keep..` of `vt` with an orthonormal completion of the
/// first `keep` rows, built from canonical unit vectors.
fn complete_rows(vt: &mut DMatrix<f64>, keep: usize) {
    let (rows, n) = vt.shape();
    let mut basis: Vec<DVector<f64>> = (0..keep).map(|r| vt.row(r).transpose()).collect();
    let mut e = 0;
    while basis.len() < rows && e < n {
        let mut v = DVector::zeros(n);
        v[e] = 1.0;
        e += 1;
        for _ in 0..2 {
            for b in &basis {
                let d = b.dot(&v);
                v.axpy(-d, b, 1.0);
            }
        }
        let norm = v.norm();
        if norm > 1e-8 {
            basis.push(v / norm);
        }
    }
    for (r, b) in basis.iter().enumerate().skip(keep) {
        vt.row_mut(r).copy_from(&b.transpose());
    }
}
