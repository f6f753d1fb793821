//! Pairwise transition asymmetry and tertile-stratified evaluation.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use crate::direction::TransitionCounts;
use crate::error::Result;
use crate::model::SeqInput;

use super::metrics::{all_ranks, EvalReport, Scorer};

pub const DEFAULT_MIN_COUNT: u64 = 20;

/// `Asy(i, j) = (1/N_b) sum_b |P(j|i,b) - P(i|j,b)|` for pairs whose total
/// bidirectional count exceeds the threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct AsymmetryIndex {
    pub values: BTreeMap<(usize, usize), f64>,
    pub min_count: u64,
}

impl AsymmetryIndex {
    pub fn from_counts(counts: &TransitionCounts, min_count: u64) -> Self {
        let n_bins = counts.n_bins;
        // out-totals per (bin, source)
        let mut out_total: HashMap<(usize, usize), u64> = HashMap::new();
        let mut pair_total: BTreeMap<(usize, usize), u64> = BTreeMap::new();
        for (&(b, i, j), &c) in &counts.counts {
            let (b, i, j) = (b as usize, i as usize, j as usize);
            *out_total.entry((b, i)).or_default() += c;
            *pair_total.entry((i.min(j), i.max(j))).or_default() += c;
        }
        let prob = |b: usize, from: usize, to: usize| -> f64 {
            let n = counts.get(b, from, to);
            match out_total.get(&(b, from)) {
                Some(&tot) if tot > 0 => n as f64 / tot as f64,
                _ => 0.0,
            }
        };
        let values = pair_total
            .into_iter()
            .filter(|&(_, tot)| tot > min_count)
            .map(|((i, j), _)| {
                let s: f64 = (0..n_bins).map(|b| (prob(b, i, j) - prob(b, j, i)).abs()).sum();
                ((i, j), s / n_bins as f64)
            })
            .collect();
        AsymmetryIndex { values, min_count }
    }

    pub fn get(&self, a: usize, b: usize) -> Option<f64> {
        self.values.get(&(a.min(b), a.max(b))).copied()
    }

    pub fn median(&self) -> Option<f64> {
        median(self.values.values().copied().collect())
    }
}

pub fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stratum {
    pub name: String,
    /// Asy range covered, inclusive.
    pub lo: f64,
    pub hi: f64,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StratifiedReport {
    pub overall: EvalReport,
    pub strata: Vec<Stratum>,
    /// True when every eligible position has the same Asy, in which case a
    /// single stratum is reported.
    pub degenerate: bool,
    /// Positions whose pair is below the count threshold or is a self pair.
    pub excluded: usize,
}

impl StratifiedReport {
    pub fn stratum(&self, name: &str) -> Option<&Stratum> {
        self.strata.iter().find(|s| s.name == name)
    }

    pub fn to_flat(&self) -> String {
        let mut out = String::new();
        self.overall.write_flat("", &mut out);
        let _ = writeln!(out, "subgroup.degenerate = {}", self.degenerate);
        let _ = writeln!(out, "subgroup.excluded = {}", self.excluded);
        for s in &self.strata {
            let prefix = format!("subgroup.{}", s.name);
            let _ = writeln!(out, "{prefix}.asy_lo = {:.6}", s.lo);
            let _ = writeln!(out, "{prefix}.asy_hi = {:.6}", s.hi);
            s.report.write_flat(&prefix, &mut out);
        }
        out
    }
}

/// Position `t` predicts `pois[t + 1]` from step `t`, whose pair is its
/// source and current POI. Eligible positions are sorted by Asy (stable)
/// and cut into three parts of near-equal size.
pub fn asymmetry_stratified_eval<S: Scorer + ?Sized>(
    scorer: &S,
    inputs: &[SeqInput<f64>],
    index: &AsymmetryIndex,
) -> Result<StratifiedReport> {
    let ranks = all_ranks(scorer, inputs)?;
    let mut all = Vec::new();
    let mut tagged: Vec<(f64, usize)> = Vec::new();
    let mut excluded = 0;
    for (inp, rs) in inputs.iter().zip(&ranks) {
        for (t, &r) in rs.iter().enumerate() {
            all.push(r);
            let src = if t == 0 { inp.pois[0] } else { inp.pois[t - 1] };
            match index.get(src, inp.pois[t]).filter(|_| src != inp.pois[t]) {
                Some(a) => tagged.push((a, r)),
                None => excluded += 1,
            }
        }
    }
    tagged.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut strata = Vec::new();
    let degenerate = match (tagged.first(), tagged.last()) {
        (Some(a), Some(b)) => b.0 - a.0 < 1e-12,
        _ => true,
    };
    if degenerate {
        if !tagged.is_empty() {
            let rs: Vec<usize> = tagged.iter().map(|x| x.1).collect();
            strata.push(Stratum {
                name: "asym_all".into(),
                lo: tagged[0].0,
                hi: tagged[tagged.len() - 1].0,
                report: EvalReport::from_ranks(&rs),
            });
        }
    } else {
        let n = tagged.len();
        let cuts = [0, n / 3, (2 * n) / 3, n];
        for (s, name) in ["asym_low", "asym_mid", "asym_high"].iter().enumerate() {
            let part = &tagged[cuts[s]..cuts[s + 1]];
            if part.is_empty() {
                continue;
            }
            let rs: Vec<usize> = part.iter().map(|x| x.1).collect();
            strata.push(Stratum {
                name: (*name).into(),
                lo: part[0].0,
                hi: part[part.len() - 1].0,
                report: EvalReport::from_ranks(&rs),
            });
        }
    }
    Ok(StratifiedReport {
        overall: EvalReport::from_ranks(&all),
        strata,
        degenerate,
        excluded,
    })
}
