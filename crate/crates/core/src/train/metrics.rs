//! Single-relevant-item ranking metrics.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::Result;
use crate::model::{Model, SeqInput};
use crate::scalar::Scalar;

pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank >= 1 && rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

pub fn mrr(rank: usize) -> f64 {
    if rank == 0 {
        0.0
    } else {
        1.0 / rank as f64
    }
}

/// 1-based rank of `target`; ties go to the lower POI id.
pub fn rank_of<T: PartialOrd + Copy>(scores: &[T], target: usize) -> usize {
    let st = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(p, &s)| s > st || (s == st && p < target))
        .count()
}

/// Anything that ranks the next POI at every prediction position of a
/// sequence.
pub trait Scorer: Sync {
    /// Rank of `pois[t + 1]` for `t = 0..L-1`.
    fn target_ranks(&self, inp: &SeqInput<f64>) -> Result<Vec<usize>>;
}

impl<T: Scalar> Scorer for Model<T> {
    fn target_ranks(&self, inp: &SeqInput<f64>) -> Result<Vec<usize>> {
        let inp = cast_input::<T>(inp);
        let cache = self.forward(&inp)?;
        let logits = self.logits(&cache);
        Ok(logits
            .rows()
            .into_iter()
            .enumerate()
            .map(|(t, row)| rank_of(row.as_slice().expect("contiguous"), inp.pois[t + 1]))
            .collect())
    }
}

pub fn cast_input<T: Scalar>(inp: &SeqInput<f64>) -> SeqInput<T> {
    SeqInput {
        user: inp.user,
        pois: inp.pois.clone(),
        cats: inp.cats.clone(),
        hours: inp.hours.clone(),
        dows: inp.dows.clone(),
        ell: inp.ell.iter().map(|&x| T::of(x)).collect(),
        m: inp.m.mapv(T::of),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EvalReport {
    pub ndcg1: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
    pub mrr: f64,
    pub count: usize,
}

impl EvalReport {
    /// Position-level averages over a list of ranks.
    pub fn from_ranks(ranks: &[usize]) -> Self {
        let n = ranks.len();
        if n == 0 {
            return EvalReport::default();
        }
        let mean = |f: &dyn Fn(usize) -> f64| ranks.iter().map(|&r| f(r)).sum::<f64>() / n as f64;
        EvalReport {
            ndcg1: mean(&|r| ndcg_at_k(r, 1)),
            ndcg5: mean(&|r| ndcg_at_k(r, 5)),
            ndcg10: mean(&|r| ndcg_at_k(r, 10)),
            mrr: mean(&mrr),
            count: n,
        }
    }

    /// Flat `key = value` lines under `prefix`.
    pub fn write_flat(&self, prefix: &str, out: &mut String) {
        let p = if prefix.is_empty() { String::new() } else { format!("{prefix}.") };
        let _ = writeln!(out, "{p}ndcg@1 = {:.6}", self.ndcg1);
        let _ = writeln!(out, "{p}ndcg@5 = {:.6}", self.ndcg5);
        let _ = writeln!(out, "{p}ndcg@10 = {:.6}", self.ndcg10);
        let _ = writeln!(out, "{p}mrr = {:.6}", self.mrr);
        let _ = writeln!(out, "{p}count = {}", self.count);
    }
}

/// Ranks for every position of every sequence, in input order.
pub fn all_ranks<S: Scorer + ?Sized>(scorer: &S, inputs: &[SeqInput<f64>]) -> Result<Vec<Vec<usize>>> {
    inputs.par_iter().map(|inp| scorer.target_ranks(inp)).collect()
}

pub fn evaluate<S: Scorer + ?Sized>(scorer: &S, inputs: &[SeqInput<f64>]) -> Result<EvalReport> {
    let ranks: Vec<usize> = all_ranks(scorer, inputs)?.into_iter().flatten().collect();
    Ok(EvalReport::from_ranks(&ranks))
}
