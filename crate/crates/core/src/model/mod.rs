//! Context embedding, stacked rotation-decay layers, tied-table scoring and
//! exact gradients.

pub mod checkpoint;
pub mod layer;
pub mod params;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::bank::PhaseTokenBank;
use crate::error::{Error, Result};
use crate::ingest::{day_of_week, hour_of_day, TimeBinner, Trajectory};
use crate::phase::featurize_trajectory;
use crate::scalar::Scalar;

pub use layer::{rotate_pairs, scan, step_coefficients, LayerCache, StepCoefficients};
pub use params::{Block, BlockKind, Layout, ModelDims};

use layer::{accumulate_bias, accumulate_weight, layer_backward, layer_forward, linear};

/// Model variants evaluated against the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Ablation {
    #[default]
    None,
    /// Phase bank rebuilt with zero charge, so every phase is zero.
    NoPhase,
    /// Time mixing replaced by its average over bins.
    NoTc,
    /// No rotation in the recurrence.
    RealMamba,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::None, Ablation::NoPhase, Ablation::NoTc, Ablation::RealMamba];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoPhase => "no_phase",
            Ablation::NoTc => "no_tc",
            Ablation::RealMamba => "real_mamba",
        }
    }

    pub fn rotates(self) -> bool {
        self != Ablation::RealMamba
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown ablation '{s}' (none|no_phase|no_tc|real_mamba)")))
    }
}

/// `ln(1 + gap)` with the gap measured in hours.
pub fn log_gap<T: Scalar>(gap_seconds: i64) -> T {
    T::of((gap_seconds.max(0) as f64 / 3600.0).ln_1p())
}

/// Model inputs for one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqInput<T> {
    pub user: usize,
    pub pois: Vec<usize>,
    pub cats: Vec<usize>,
    pub hours: Vec<usize>,
    pub dows: Vec<usize>,
    pub ell: Vec<T>,
    /// `L x 2k` phase features.
    pub m: Array2<T>,
}

impl<T: Scalar> SeqInput<T> {
    pub fn from_trajectory(
        traj: &Trajectory,
        poi_category: &[usize],
        bank: &PhaseTokenBank,
        binner: TimeBinner,
    ) -> Result<Self> {
        let l = traj.len();
        let m = featurize_trajectory::<T>(bank, traj, binner)?;
        let m = Array2::from_shape_vec((l, 2 * bank.k()), m).expect("feature shape");
        let pois: Vec<usize> = traj.pois().collect();
        let cats = pois
            .iter()
            .map(|&p| {
                poi_category
                    .get(p)
                    .copied()
                    .ok_or_else(|| Error::invalid(format!("POI {p} has no category")))
            })
            .collect::<Result<_>>()?;
        Ok(SeqInput {
            user: traj.user_id,
            pois,
            cats,
            hours: traj.steps.iter().map(|s| hour_of_day(s.timestamp)).collect(),
            dows: traj.steps.iter().map(|s| day_of_week(s.timestamp)).collect(),
            ell: traj.gaps.iter().map(|&g| log_gap(g)).collect(),
            m,
        })
    }

    pub fn len(&self) -> usize {
        self.pois.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pois.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct EmbedCache<T> {
    pub ctx: Array2<T>,
    pub fused: Array2<T>,
    pub gate: Array2<T>,
    pub x: Array2<T>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    pub embed: EmbedCache<T>,
    pub layers: Vec<LayerCache<T>>,
}

impl<T: Scalar> ForwardCache<T> {
    /// Final sequence representation `Z`, `L x D`.
    pub fn output(&self) -> ArrayView2<'_, T> {
        self.layers.last().map(|c| c.out.view()).unwrap_or(self.embed.x.view())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub layout: Layout,
    pub params: Vec<T>,
    pub ablation: Ablation,
}

impl<T: Scalar> Model<T> {
    pub fn new(dims: ModelDims, seed: u64) -> Result<Self> {
        let layout = Layout::new(dims)?;
        let params = layout.init(seed);
        Ok(Model {
            layout,
            params,
            ablation: Ablation::None,
        })
    }

    pub fn dims(&self) -> ModelDims {
        self.layout.dims
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.ablation = ablation;
        self
    }

    /// Same weights in another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            layout: self.layout.clone(),
            params: self.params.iter().map(|x| U::of(x.as_f64())).collect(),
            ablation: self.ablation,
        }
    }

    fn check_input(&self, inp: &SeqInput<T>) -> Result<()> {
        let dims = self.dims();
        let l = inp.len();
        if l == 0 {
            return Err(Error::invalid("empty sequence"));
        }
        if [inp.cats.len(), inp.hours.len(), inp.dows.len(), inp.ell.len(), inp.m.nrows()]
            .iter()
            .any(|&x| x != l)
        {
            return Err(Error::invalid("sequence fields differ in length"));
        }
        if inp.m.ncols() != 2 * dims.k {
            return Err(Error::invalid(format!(
                "phase features have {} columns, model expects {}",
                inp.m.ncols(),
                2 * dims.k
            )));
        }
        if inp.user >= dims.n_users {
            return Err(Error::invalid(format!("unknown user id {}", inp.user)));
        }
        if let Some(p) = inp.pois.iter().find(|&&p| p >= dims.n_pois) {
            return Err(Error::invalid(format!("unknown POI id {p}")));
        }
        if let Some(c) = inp.cats.iter().find(|&&c| c >= dims.n_cats) {
            return Err(Error::invalid(format!("unknown category id {c}")));
        }
        if inp.hours.iter().any(|&h| h >= 24) || inp.dows.iter().any(|&w| w >= 7) {
            return Err(Error::invalid("hour or weekday out of range"));
        }
        Ok(())
    }

    pub fn embed(&self, inp: &SeqInput<T>) -> EmbedCache<T> {
        let (lay, p) = (&self.layout, &self.params);
        let dims = self.dims();
        let e = &lay.emb;
        let (d, dc, dt) = (dims.d, dims.d_cat, dims.d_time);
        let l = inp.len();
        let gap_w = lay.slice(p, e.gap_w);
        let gap_b = lay.slice(p, e.gap_b);
        let mut ctx = Array2::zeros((l, dims.context_width()));
        for t in 0..l {
            let mut row = ctx.row_mut(t);
            let row = row.as_slice_mut().expect("contiguous");
            let mut at = 0;
            for (id, len, block) in [
                (inp.pois[t], d, e.poi),
                (inp.cats[t], dc, e.cat),
                (inp.user, d, e.user),
                (inp.hours[t], dt, e.hour),
                (inp.dows[t], dt, e.dow),
            ] {
                row[at..at + len].copy_from_slice(&lay.slice(p, block)[id * len..(id + 1) * len]);
                at += len;
            }
            for j in 0..dt {
                row[at + j] = gap_w[j] * inp.ell[t] + gap_b[j];
            }
        }
        let fused = linear(ctx.view(), lay.view(p, e.fuse_w), Some(lay.view(p, e.fuse_b).row(0)));
        let gate = linear(ctx.view(), lay.view(p, e.gate_w), Some(lay.view(p, e.gate_b).row(0))).mapv(Scalar::sigmoid);
        let x = &fused * &gate;
        EmbedCache { ctx, fused, gate, x }
    }

    pub fn forward(&self, inp: &SeqInput<T>) -> Result<ForwardCache<T>> {
        self.check_input(inp)?;
        let embed = self.embed(inp);
        let mut layers: Vec<LayerCache<T>> = Vec::with_capacity(self.layout.layers.len());
        for (li, idx) in self.layout.layers.iter().enumerate() {
            let x = layers.last().map(|c| c.out.clone()).unwrap_or_else(|| embed.x.clone());
            let cache = layer_forward(&self.layout, &self.params, idx, x, inp.m.view(), &inp.ell, self.ablation.rotates())
                .map_err(|e| match e {
                    Error::Numerical { context, msg } => Error::Numerical {
                        context: format!("layer {li}, {context}"),
                        msg,
                    },
                    other => other,
                })?;
            layers.push(cache);
        }
        Ok(ForwardCache { embed, layers })
    }

    /// Scores of every POI for one representation row.
    pub fn scores(&self, z: ArrayView1<T>) -> Vec<T> {
        let table = self.layout.view(&self.params, self.layout.emb.poi);
        table.dot(&z).to_vec()
    }

    /// Logits for the `L - 1` prediction positions, `(L - 1) x |P|`.
    pub fn logits(&self, cache: &ForwardCache<T>) -> Array2<T> {
        let z = cache.output();
        let l = z.nrows();
        let table = self.layout.view(&self.params, self.layout.emb.poi);
        z.slice(ndarray::s![0..l.saturating_sub(1), ..]).dot(&table.t())
    }

    /// Mean next-POI cross-entropy over the `L - 1` positions.
    pub fn loss(&self, inp: &SeqInput<T>) -> Result<T> {
        if inp.len() < 2 {
            return Err(Error::invalid("need at least two steps to score"));
        }
        let cache = self.forward(inp)?;
        let logits = self.logits(&cache);
        Ok(cross_entropy(&logits, &inp.pois[1..]).0)
    }

    /// Loss of one sequence; adds `scale * d(loss)/d(params)` into `grad`.
    pub fn loss_and_grad(&self, inp: &SeqInput<T>, grad: &mut [T], scale: T) -> Result<T> {
        if inp.len() < 2 {
            return Err(Error::invalid("need at least two steps to score"));
        }
        if grad.len() != self.params.len() {
            return Err(Error::invalid("gradient buffer has the wrong size"));
        }
        let cache = self.forward(inp)?;
        let logits = self.logits(&cache);
        let (loss, mut dlogits) = cross_entropy(&logits, &inp.pois[1..]);
        dlogits.mapv_inplace(|v| v * scale);
        self.backward(inp, &cache, dlogits.view(), grad);
        Ok(loss)
    }

    /// Reverse pass from logit adjoints.
    pub fn backward(&self, inp: &SeqInput<T>, cache: &ForwardCache<T>, dlogits: ArrayView2<T>, grad: &mut [T]) {
        let lay = &self.layout;
        let p = &self.params;
        let dims = self.dims();
        let l = inp.len();
        let z = cache.output();
        let table = lay.view(p, lay.emb.poi);

        let mut dz = Array2::zeros((l, dims.d));
        dz.slice_mut(ndarray::s![0..l - 1, ..]).assign(&dlogits.dot(&table));
        accumulate_weight(lay.slice_mut(grad, lay.emb.poi), dlogits, z.slice(ndarray::s![0..l - 1, ..]));

        for (idx, lc) in lay.layers.iter().zip(&cache.layers).rev() {
            dz = layer_backward(lay, p, idx, lc, inp.m.view(), &inp.ell, dz.view(), grad);
        }
        self.embed_backward(inp, &cache.embed, dz.view(), grad);
    }

    fn embed_backward(&self, inp: &SeqInput<T>, cache: &EmbedCache<T>, dx: ArrayView2<T>, grad: &mut [T]) {
        let lay = &self.layout;
        let p = &self.params;
        let e = &lay.emb;
        let dims = self.dims();
        let (d, dc, dt) = (dims.d, dims.d_cat, dims.d_time);
        let dfused = &dx * &cache.gate;
        let dgate_pre = ndarray::Zip::from(&dx)
            .and(&cache.fused)
            .and(&cache.gate)
            .map_collect(|&g, &f, &s| g * f * s * (T::one() - s));
        accumulate_weight(lay.slice_mut(grad, e.fuse_w), dfused.view(), cache.ctx.view());
        accumulate_bias(lay.slice_mut(grad, e.fuse_b), dfused.view());
        accumulate_weight(lay.slice_mut(grad, e.gate_w), dgate_pre.view(), cache.ctx.view());
        accumulate_bias(lay.slice_mut(grad, e.gate_b), dgate_pre.view());
        let mut dctx = dfused.dot(&lay.view(p, e.fuse_w));
        dctx += &dgate_pre.dot(&lay.view(p, e.gate_w));

        for t in 0..inp.len() {
            let row = dctx.row(t);
            let row = row.as_slice().expect("contiguous");
            let mut at = 0;
            for (id, len, block) in [
                (inp.pois[t], d, e.poi),
                (inp.cats[t], dc, e.cat),
                (inp.user, d, e.user),
                (inp.hours[t], dt, e.hour),
                (inp.dows[t], dt, e.dow),
            ] {
                let g = &mut lay.slice_mut(grad, block)[id * len..(id + 1) * len];
                for (gi, &v) in g.iter_mut().zip(&row[at..at + len]) {
                    *gi += v;
                }
                at += len;
            }
            let gw = lay.slice_mut(grad, e.gap_w);
            for j in 0..dt {
                gw[j] += row[at + j] * inp.ell[t];
            }
            let gb = lay.slice_mut(grad, e.gap_b);
            for j in 0..dt {
                gb[j] += row[at + j];
            }
        }
    }
}

/// Mean softmax cross-entropy over rows and its gradient w.r.t. the logits.
pub fn cross_entropy<T: Scalar>(logits: &Array2<T>, targets: &[usize]) -> (T, Array2<T>) {
    let n = logits.nrows();
    let inv_n = T::of(1.0 / n as f64);
    let mut grad = Array2::zeros(logits.dim());
    let mut total = T::zero();
    for (i, row) in logits.rows().into_iter().enumerate() {
        let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let sum: T = row.iter().map(|&v| (v - mx).exp()).sum();
        let lse = mx + sum.ln();
        total += lse - row[targets[i]];
        for (g, &v) in grad.row_mut(i).iter_mut().zip(row) {
            *g = (v - lse).exp() * inv_n;
        }
        grad[[i, targets[i]]] -= inv_n;
    }
    (total * inv_n, grad)
}
