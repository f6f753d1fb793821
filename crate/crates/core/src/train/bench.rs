//! Inference latency and throughput over sequence length.

use std::fmt::Write as _;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{Model, SeqInput};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub batch: usize,
    pub warmup: usize,
    pub iters: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            lengths: vec![25, 50, 75, 100],
            batch: 128,
            warmup: 20,
            iters: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRow {
    pub l: usize,
    pub batch: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
    pub traj_per_s: f64,
    pub steps_per_s: f64,
}

pub const BENCH_HEADER: &str = "L,batch,mean_ms,p50_ms,p95_ms,p99_ms,traj_per_s,steps_per_s";

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = format!("{BENCH_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:.4},{:.4},{:.4},{:.4},{:.2},{:.2}",
            r.l, r.batch, r.mean_ms, r.p50_ms, r.p95_ms, r.p99_ms, r.traj_per_s, r.steps_per_s
        );
    }
    s
}

/// Random inputs matching the model's vocabularies.
pub fn random_inputs<T: Scalar>(model: &Model<T>, l: usize, n: usize, seed: u64) -> Vec<SeqInput<T>> {
    let dims = model.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let pois: Vec<usize> = (0..l).map(|_| rng.gen_range(0..dims.n_pois)).collect();
            SeqInput {
                user: rng.gen_range(0..dims.n_users),
                cats: pois.iter().map(|_| rng.gen_range(0..dims.n_cats)).collect(),
                pois,
                hours: (0..l).map(|_| rng.gen_range(0..24)).collect(),
                dows: (0..l).map(|_| rng.gen_range(0..7)).collect(),
                ell: (0..l).map(|t| T::of(if t == 0 { 0.0 } else { rng.gen_range(0.0..3.0) })).collect(),
                m: Array2::from_shape_fn((l, 2 * dims.k), |_| T::of(rng.gen_range(-1.0..1.0))),
            }
        })
        .collect()
}

/// One inference pass: the full recurrence plus scoring of the final step.
pub fn infer<T: Scalar>(model: &Model<T>, inp: &SeqInput<T>) -> Result<Vec<T>> {
    let cache = model.forward(inp)?;
    let z = cache.output();
    Ok(model.scores(z.row(z.nrows() - 1)))
}

/// Nearest-rank percentile of sorted values.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil().max(1.0) as usize;
    sorted[rank.min(n) - 1]
}

/// Times `iters` whole batches per length after `warmup` untimed ones, on
/// the calling thread.
pub fn bench<T: Scalar>(model: &Model<T>, cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for (li, &l) in cfg.lengths.iter().enumerate() {
        let inputs = random_inputs(model, l, cfg.batch, cfg.seed.wrapping_add(li as u64));
        let run = || -> Result<T> {
            let mut acc = T::zero();
            for inp in &inputs {
                acc += infer(model, inp)?[0];
            }
            Ok(acc)
        };
        for _ in 0..cfg.warmup {
            std::hint::black_box(run()?);
        }
        let mut times = Vec::with_capacity(cfg.iters);
        for _ in 0..cfg.iters {
            let t0 = Instant::now();
            std::hint::black_box(run()?);
            times.push(t0.elapsed().as_secs_f64() * 1e3);
        }
        let mean_ms = times.iter().sum::<f64>() / times.len() as f64;
        times.sort_by(f64::total_cmp);
        let traj_per_s = cfg.batch as f64 / (mean_ms / 1e3);
        rows.push(BenchRow {
            l,
            batch: cfg.batch,
            mean_ms,
            p50_ms: percentile(&times, 50.0),
            p95_ms: percentile(&times, 95.0),
            p99_ms: percentile(&times, 99.0),
            traj_per_s,
            steps_per_s: traj_per_s * l as f64,
        });
    }
    Ok(rows)
}
