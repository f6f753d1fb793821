//! Online phase-difference features. Every call is a handful of bank
//! lookups plus `O(R k)` arithmetic; nothing here touches the graph.

use crate::bank::PhaseTokenBank;
use crate::error::{Error, Result};
use crate::ingest::{TimeBinner, Trajectory};
use crate::scalar::Scalar;

/// `m_t = [Re(dU_mix), Im(dU_mix)]`, length `2k`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPhaseFeature<T> {
    pub m: Vec<T>,
    /// `|dU_mix|` per eigenvector slot.
    pub mix_magnitudes: Vec<T>,
}

/// Zero-based: position 0 uses itself as source.
pub fn source_poi(pois: &[usize], t: usize) -> usize {
    if t == 0 {
        pois[0]
    } else {
        pois[t - 1]
    }
}

pub fn step_phase_feature<T: Scalar>(
    bank: &PhaseTokenBank,
    p_t: usize,
    p_src: usize,
    bin: usize,
) -> Result<StepPhaseFeature<T>> {
    let n = bank.n_pois();
    if p_t >= n || p_src >= n {
        return Err(Error::invalid(format!(
            "POI id {} outside the bank's {n} POIs",
            p_t.max(p_src)
        )));
    }
    if bin >= bank.n_bins() {
        return Err(Error::invalid(format!("time bin {bin} outside [0, {})", bank.n_bins())));
    }
    let k = bank.k();
    let mut re = vec![0.0f64; k];
    let mut im = vec![0.0f64; k];
    for (r, &w) in bank.pi_row(bin).iter().enumerate() {
        let dst = bank.token_angles(r, p_t);
        let src = bank.token_angles(r, p_src);
        for m in 0..k {
            let (s, c) = (dst[m] - src[m]).sin_cos();
            re[m] += w * c;
            im[m] += w * s;
        }
    }
    let mix_magnitudes = re.iter().zip(&im).map(|(a, b)| T::of(a.hypot(*b))).collect();
    let m = re.iter().chain(&im).map(|&x| T::of(x)).collect();
    Ok(StepPhaseFeature { m, mix_magnitudes })
}

/// Features for every step, row-major `L x 2k`.
pub fn featurize_trajectory<T: Scalar>(
    bank: &PhaseTokenBank,
    trajectory: &Trajectory,
    binner: TimeBinner,
) -> Result<Vec<T>> {
    let pois: Vec<usize> = trajectory.pois().collect();
    let mut out = Vec::with_capacity(pois.len() * 2 * bank.k());
    for (t, step) in trajectory.steps.iter().enumerate() {
        let f = step_phase_feature::<T>(bank, pois[t], source_poi(&pois, t), binner.bin(step.timestamp))?;
        out.extend(f.m);
    }
    Ok(out)
}
