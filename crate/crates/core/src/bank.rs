//! Cached per-basis phase tokens plus the time-bin mixing coefficients.

use std::path::Path;

use crate::binio::{self, Reader, Writer};
use crate::error::{Error, Result};

const BANK_MAGIC: &[u8; 4] = b"MGU1";

/// Unit-modulus phase tokens `U^(r)` for every POI, stored as angles so the
/// modulus is exactly one, together with the `N_b x R` mixing matrix `Pi`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseTokenBank {
    n_pois: usize,
    rank: usize,
    k: usize,
    n_bins: usize,
    q: f64,
    graph_hash: u64,
    /// `rank` blocks of `n_pois x k`, row-major.
    angles: Vec<f64>,
    /// `n_bins x rank`, row-major.
    pi: Vec<f64>,
}

impl PhaseTokenBank {
    pub fn new(
        n_pois: usize,
        k: usize,
        q: f64,
        graph_hash: u64,
        angles: Vec<Vec<f64>>,
        pi: Vec<f64>,
        n_bins: usize,
    ) -> Result<Self> {
        let rank = angles.len();
        if angles.iter().any(|a| a.len() != n_pois * k) {
            return Err(Error::invalid(format!(
                "every basis needs {n_pois}x{k} angles"
            )));
        }
        if pi.len() != n_bins * rank {
            return Err(Error::invalid(format!(
                "Pi must be {n_bins}x{rank}, got {} values",
                pi.len()
            )));
        }
        Ok(PhaseTokenBank {
            n_pois,
            rank,
            k,
            n_bins,
            q,
            graph_hash,
            angles: angles.concat(),
            pi,
        })
    }

    pub fn n_pois(&self) -> usize {
        self.n_pois
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn graph_hash(&self) -> u64 {
        self.graph_hash
    }

    /// Angles of `u^(r)_p`, length `k`.
    pub fn token_angles(&self, r: usize, poi: usize) -> &[f64] {
        let start = (r * self.n_pois + poi) * self.k;
        &self.angles[start..start + self.k]
    }

    pub fn basis_angles(&self, r: usize) -> &[f64] {
        let block = self.n_pois * self.k;
        &self.angles[r * block..(r + 1) * block]
    }

    /// Row `b` of `Pi`, length `rank`.
    pub fn pi_row(&self, bin: usize) -> &[f64] {
        &self.pi[bin * self.rank..(bin + 1) * self.rank]
    }

    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    /// Copy whose every `Pi` row is the column mean of `Pi`, removing the
    /// time dependence of the mixture.
    pub fn with_time_mean_mixing(&self) -> Self {
        let mut mean = vec![0.0; self.rank];
        for b in 0..self.n_bins {
            for (m, x) in mean.iter_mut().zip(self.pi_row(b)) {
                *m += x;
            }
        }
        for m in &mut mean {
            *m /= self.n_bins as f64;
        }
        PhaseTokenBank {
            pi: mean.repeat(self.n_bins),
            ..self.clone()
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(BANK_MAGIC);
        w.u64(self.n_pois as u64)
            .u64(self.rank as u64)
            .u64(self.k as u64)
            .f64(self.q)
            .u64(self.graph_hash);
        w.f64s(&self.angles).f64s(&self.pi);
        w.into_bytes()
    }

    /// The bin count is implied by the length of the trailing `Pi` block.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, BANK_MAGIC, path)?;
        let n_pois = r.usize()?;
        let rank = r.usize()?;
        let k = r.usize()?;
        let q = r.f64()?;
        let graph_hash = r.u64()?;
        let n_angles = rank
            .checked_mul(n_pois)
            .and_then(|x| x.checked_mul(k))
            .ok_or_else(|| r.malformed("header sizes overflow"))?;
        let angles = r.f64s(n_angles)?;
        let tail = r.remaining();
        if rank == 0 || tail % (8 * rank) != 0 {
            return Err(r.malformed(format!("Pi block of {tail} bytes does not divide by rank {rank}")));
        }
        let n_bins = tail / (8 * rank);
        let pi = r.f64s(n_bins * rank)?;
        r.finish()?;
        Ok(PhaseTokenBank {
            n_pois,
            rank,
            k,
            n_bins,
            q,
            graph_hash,
            angles,
            pi,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_file(path, &self.to_bytes())
    }

    /// Loads a bank and checks it was built on the graph with `graph_hash`.
    pub fn load(path: &Path, graph_hash: u64) -> Result<Self> {
        let bank = Self::from_bytes(&binio::read_file(path)?, path)?;
        if bank.graph_hash != graph_hash {
            return Err(Error::HashMismatch {
                what: format!("graph of phase bank {}", path.display()),
                expected: binio::hash_hex(graph_hash),
                found: binio::hash_hex(bank.graph_hash),
            });
        }
        Ok(bank)
    }
}
