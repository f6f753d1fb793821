//! Flat parameter storage with a fixed, named block layout.

use ndarray::{ArrayView2, ArrayViewMut2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    /// Hidden size, even.
    pub d: usize,
    pub d_time: usize,
    pub d_cat: usize,
    /// Eigenvectors per basis; phase features have `2k` entries.
    pub k: usize,
    pub n_layers: usize,
    pub n_pois: usize,
    pub n_users: usize,
    pub n_cats: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || !self.d.is_multiple_of(2) {
            return Err(Error::invalid(format!("hidden size must be even and positive, got {}", self.d)));
        }
        if self.d_time == 0 || self.d_cat == 0 || self.k == 0 || self.n_layers == 0 {
            return Err(Error::invalid("model sizes must be positive"));
        }
        if self.n_pois == 0 || self.n_users == 0 || self.n_cats == 0 {
            return Err(Error::invalid("empty vocabulary"));
        }
        Ok(())
    }

    /// Width of the concatenated context vector.
    pub fn context_width(&self) -> usize {
        2 * self.d + self.d_cat + 3 * self.d_time
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Table,
    Norm,
    Dense,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub kind: BlockKind,
}

impl Block {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    /// Decoupled weight decay applies to everything but lookup tables and
    /// normalization scales.
    pub fn decays(&self) -> bool {
        self.kind == BlockKind::Dense
    }
}

/// Block ids of the embedding stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbeddingIdx {
    pub poi: usize,
    pub cat: usize,
    pub user: usize,
    pub hour: usize,
    pub dow: usize,
    pub gap_w: usize,
    pub gap_b: usize,
    pub fuse_w: usize,
    pub fuse_b: usize,
    pub gate_w: usize,
    pub gate_b: usize,
}

/// Block ids of one recurrent layer. Linear maps are stored `out x in`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerIdx {
    pub in_w: usize,
    pub in_b: usize,
    pub theta_x: usize,
    pub theta_m: usize,
    pub delta_w: usize,
    pub delta_b: usize,
    pub rho: usize,
    pub lambda_w: usize,
    pub out_w: usize,
    pub out_b: usize,
    pub norm: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub dims: ModelDims,
    pub blocks: Vec<Block>,
    pub emb: EmbeddingIdx,
    pub layers: Vec<LayerIdx>,
    pub total: usize,
}

impl Layout {
    pub fn new(dims: ModelDims) -> Result<Self> {
        dims.validate()?;
        let mut blocks = Vec::new();
        let mut total = 0;
        let mut add = |name: String, rows: usize, cols: usize, kind: BlockKind| {
            blocks.push(Block {
                name,
                offset: total,
                rows,
                cols,
                kind,
            });
            total += rows * cols;
            blocks.len() - 1
        };
        let (d, dt) = (dims.d, dims.d_time);
        let cw = dims.context_width();
        use BlockKind::*;
        let emb = EmbeddingIdx {
            poi: add("emb.poi".into(), dims.n_pois, d, Table),
            cat: add("emb.category".into(), dims.n_cats, dims.d_cat, Table),
            user: add("emb.user".into(), dims.n_users, d, Table),
            hour: add("emb.hour".into(), 24, dt, Table),
            dow: add("emb.dow".into(), 7, dt, Table),
            gap_w: add("emb.gap_w".into(), dt, 1, Dense),
            gap_b: add("emb.gap_b".into(), 1, dt, Dense),
            fuse_w: add("emb.fuse_w".into(), d, cw, Dense),
            fuse_b: add("emb.fuse_b".into(), 1, d, Dense),
            gate_w: add("emb.gate_w".into(), d, cw, Dense),
            gate_b: add("emb.gate_b".into(), 1, d, Dense),
        };
        let layers = (0..dims.n_layers)
            .map(|l| LayerIdx {
                in_w: add(format!("layer{l}.in_w"), 3 * d, d, Dense),
                in_b: add(format!("layer{l}.in_b"), 1, 3 * d, Dense),
                theta_x: add(format!("layer{l}.theta_x"), d / 2, d, Dense),
                theta_m: add(format!("layer{l}.theta_m"), d / 2, 2 * dims.k, Dense),
                delta_w: add(format!("layer{l}.delta_w"), 1, d / 2, Dense),
                delta_b: add(format!("layer{l}.delta_b"), 1, d / 2, Dense),
                rho: add(format!("layer{l}.rho"), 1, d, Dense),
                lambda_w: add(format!("layer{l}.lambda_w"), d, d, Dense),
                out_w: add(format!("layer{l}.out_w"), d, d, Dense),
                out_b: add(format!("layer{l}.out_b"), 1, d, Dense),
                norm: add(format!("layer{l}.norm"), 1, d, Norm),
            })
            .collect();
        Ok(Layout {
            dims,
            blocks,
            emb,
            layers,
            total,
        })
    }

    pub fn block(&self, id: usize) -> &Block {
        &self.blocks[id]
    }

    pub fn view<'a, T>(&self, data: &'a [T], id: usize) -> ArrayView2<'a, T> {
        let b = &self.blocks[id];
        ArrayView2::from_shape((b.rows, b.cols), &data[b.range()]).expect("block shape")
    }

    pub fn view_mut<'a, T>(&self, data: &'a mut [T], id: usize) -> ArrayViewMut2<'a, T> {
        let b = &self.blocks[id];
        ArrayViewMut2::from_shape((b.rows, b.cols), &mut data[b.range()]).expect("block shape")
    }

    pub fn slice<'a, T>(&self, data: &'a [T], id: usize) -> &'a [T] {
        &data[self.blocks[id].range()]
    }

    pub fn slice_mut<'a, T>(&self, data: &'a mut [T], id: usize) -> &'a mut [T] {
        &mut data[self.blocks[id].range()]
    }

    /// Seeded initialization: tables uniform in `+-1/sqrt(D)`, linear maps
    /// and biases uniform in `+-1/sqrt(fan_in)`, `exp(rho)` log-uniform over
    /// `[0.001, 0.1]`, normalization scales one.
    pub fn init<T: Scalar>(&self, seed: u64) -> Vec<T> {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = vec![T::zero(); self.total];
        let d = self.dims.d;
        let cw = self.dims.context_width();
        let fan_in = |name: &str| -> usize {
            let base = name.rsplit('.').next().unwrap_or(name);
            match base {
                "gap_w" | "gap_b" | "delta_w" | "delta_b" => 1,
                "fuse_w" | "fuse_b" | "gate_w" | "gate_b" => cw,
                "theta_m" => 2 * self.dims.k,
                _ => d,
            }
        };
        for b in &self.blocks {
            let out = &mut data[b.range()];
            let base = b.name.rsplit('.').next().unwrap_or(&b.name);
            match (b.kind, base) {
                (BlockKind::Norm, _) => out.iter_mut().for_each(|x| *x = T::one()),
                (_, "rho") => {
                    let (lo, hi) = (0.001f64.ln(), 0.1f64.ln());
                    out.iter_mut().for_each(|x| *x = T::of(rng.gen_range(lo..hi)));
                }
                (BlockKind::Table, _) => uniform(&mut rng, out, 1.0 / (d as f64).sqrt()),
                _ => uniform(&mut rng, out, 1.0 / (fan_in(&b.name) as f64).sqrt()),
            }
        }
        data
    }
}

fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, out: &mut [T], bound: f64) {
    for x in out {
        *x = T::of(rng.gen_range(-bound..bound));
    }
}
