//! Optimization, evaluation, synthetic data and benchmarking.

pub mod asymmetry;
pub mod bench;
pub mod metrics;
pub mod tidal;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{Layout, Model, SeqInput};
use crate::scalar::Scalar;

pub use asymmetry::{asymmetry_stratified_eval, AsymmetryIndex, StratifiedReport};
pub use metrics::{evaluate, mrr, ndcg_at_k, EvalReport, Scorer};

/// Trajectories whose gradients are summed sequentially before the
/// fixed-order merge; keeps results independent of the thread count.
const GRAD_CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            weight_decay: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    decay_mask: Vec<bool>,
}

impl OptimizerState {
    pub fn new(layout: &Layout) -> Self {
        let mut decay_mask = vec![false; layout.total];
        for b in &layout.blocks {
            decay_mask[b.range()].iter_mut().for_each(|x| *x = b.decays());
        }
        OptimizerState {
            m: vec![0.0; layout.total],
            v: vec![0.0; layout.total],
            step: 0,
            decay_mask,
        }
    }

    /// One AdamW update with decoupled weight decay. A zero learning rate
    /// leaves the parameters untouched.
    pub fn update<T: Scalar>(&mut self, cfg: &AdamWConfig, params: &mut [T], grad: &[T]) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..params.len() {
            let g = grad[i].as_f64();
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            if cfg.lr == 0.0 {
                continue;
            }
            let mut p = params[i].as_f64();
            if self.decay_mask[i] {
                p -= cfg.lr * cfg.weight_decay * p;
            }
            p -= cfg.lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + cfg.eps);
            params[i] = T::of(p);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub optimizer: AdamWConfig,
    pub batch: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps, 0 for no cap.
    pub max_steps: usize,
    pub seed: u64,
    /// Validate after every epoch and keep the best parameters by MRR.
    pub select_on_val: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: AdamWConfig::default(),
            batch: 128,
            epochs: 50,
            max_steps: 0,
            seed: 0,
            select_on_val: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_mrr: Option<f64>,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    /// Batch-mean loss of every optimizer step.
    pub step_losses: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub best_val_mrr: Option<f64>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,mean_loss,val_mrr,steps\n");
        for e in &self.epochs {
            let v = e.val_mrr.map(|x| format!("{x:.6}")).unwrap_or_default();
            s.push_str(&format!("{},{:.6},{},{}\n", e.epoch, e.mean_loss, v, e.steps));
        }
        s
    }
}

/// Mean loss of a batch and its gradient, summed in fixed-size chunks that
/// are merged in order.
pub fn batch_loss_and_grad<T: Scalar>(model: &Model<T>, batch: &[&SeqInput<T>]) -> Result<(f64, Vec<T>)> {
    let scale = T::of(1.0 / batch.len() as f64);
    let parts: Vec<Result<(f64, Vec<T>)>> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut g = vec![T::zero(); model.n_params()];
            let mut loss = 0.0;
            for inp in chunk {
                loss += model.loss_and_grad(inp, &mut g, scale)?.as_f64();
            }
            Ok((loss, g))
        })
        .collect();
    let mut total = 0.0;
    let mut grad = vec![T::zero(); model.n_params()];
    for part in parts {
        let (l, g) = part?;
        total += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += *b;
        }
    }
    Ok((total / batch.len() as f64, grad))
}

fn nan_diagnostics<T: Scalar>(model: &Model<T>, batch: &[&SeqInput<T>], step: usize) -> Error {
    let mut per_layer = vec![0.0f64; model.layout.layers.len()];
    let mut failed = None;
    for inp in batch {
        match model.forward(inp) {
            Ok(cache) => {
                for (i, lc) in cache.layers.iter().enumerate() {
                    let mx = lc.h.iter().chain(lc.out.iter()).fold(0.0f64, |a, x| {
                        let v = x.as_f64().abs();
                        if v.is_nan() {
                            f64::INFINITY
                        } else {
                            a.max(v)
                        }
                    });
                    per_layer[i] = per_layer[i].max(mx);
                }
            }
            Err(e) => failed = Some(e.to_string()),
        }
    }
    let acts = per_layer
        .iter()
        .enumerate()
        .map(|(i, v)| format!("layer {i} max|act| = {v:.3e}"))
        .collect::<Vec<_>>()
        .join(", ");
    Error::numerical(
        format!("training step {step}"),
        format!("non-finite loss; {acts}{}", failed.map(|f| format!("; {f}")).unwrap_or_default()),
    )
}

/// Mini-batch AdamW training. When `val` is given and selection is on,
/// the returned model holds the parameters of the epoch with the best
/// validation MRR.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    train_set: &[SeqInput<T>],
    val: Option<&[SeqInput<f64>]>,
    cfg: &TrainConfig,
) -> Result<TrainReport>
where
    Model<T>: Scorer,
{
    let usable: Vec<&SeqInput<T>> = train_set.iter().filter(|s| s.len() >= 2).collect();
    if usable.is_empty() {
        return Err(Error::invalid("no training sequence has two or more steps"));
    }
    if cfg.batch == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut opt = OptimizerState::new(&model.layout);
    let mut report = TrainReport {
        epochs: Vec::new(),
        step_losses: Vec::new(),
        best_epoch: None,
        best_val_mrr: None,
    };
    let mut best: Option<Vec<T>> = None;
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut steps = 0;
    'epochs: for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for ids in order.chunks(cfg.batch) {
            let batch: Vec<&SeqInput<T>> = ids.iter().map(|&i| usable[i]).collect();
            let (loss, grad) = batch_loss_and_grad(model, &batch)?;
            if !loss.is_finite() {
                return Err(nan_diagnostics(model, &batch, steps));
            }
            opt.update(&cfg.optimizer, &mut model.params, &grad);
            losses.push(loss);
            report.step_losses.push(loss);
            steps += 1;
            if cfg.max_steps > 0 && steps >= cfg.max_steps {
                finish_epoch(model, val, cfg, epoch, &losses, steps, &mut report, &mut best)?;
                break 'epochs;
            }
        }
        finish_epoch(model, val, cfg, epoch, &losses, steps, &mut report, &mut best)?;
        log::info!(
            "epoch {epoch}: loss {:.4}{}",
            report.epochs.last().map(|e| e.mean_loss).unwrap_or(f64::NAN),
            report.epochs.last().and_then(|e| e.val_mrr).map(|v| format!(", val MRR {v:.4}")).unwrap_or_default()
        );
    }
    if let Some(p) = best {
        model.params = p;
    }
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn finish_epoch<T: Scalar>(
    model: &Model<T>,
    val: Option<&[SeqInput<f64>]>,
    cfg: &TrainConfig,
    epoch: usize,
    losses: &[f64],
    steps: usize,
    report: &mut TrainReport,
    best: &mut Option<Vec<T>>,
) -> Result<()>
where
    Model<T>: Scorer,
{
    let mean_loss = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
    let val_mrr = match val.filter(|v| cfg.select_on_val && !v.is_empty()) {
        Some(v) => Some(evaluate(model, v)?.mrr),
        None => None,
    };
    if let Some(v) = val_mrr {
        if report.best_val_mrr.is_none_or(|b| v > b) {
            report.best_val_mrr = Some(v);
            report.best_epoch = Some(epoch);
            *best = Some(model.params.clone());
        }
    }
    report.epochs.push(EpochLog {
        epoch,
        mean_loss,
        val_mrr,
        steps,
    });
    Ok(())
}
