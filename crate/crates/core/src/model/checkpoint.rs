//! `MGM1` checkpoints: a u64 header followed by every parameter block in
//! layout order as little-endian f64.
//!
//! Header: `D, k, R, n_layers, |P|, |U|, |C|, config hash, D_time, D_cat`.

use std::path::Path;

use crate::binio::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{Ablation, Layout, Model, ModelDims};

const CHECKPOINT_MAGIC: &[u8; 4] = b"MGM1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub dims: ModelDims,
    pub rank: usize,
    pub config_hash: u64,
}

pub fn checkpoint_bytes<T: Scalar>(model: &Model<T>, rank: usize, config_hash: u64) -> Vec<u8> {
    let d = model.dims();
    let mut w = Writer::new(CHECKPOINT_MAGIC);
    for v in [d.d, d.k, rank, d.n_layers, d.n_pois, d.n_users, d.n_cats] {
        w.u64(v as u64);
    }
    w.u64(config_hash).u64(d.d_time as u64).u64(d.d_cat as u64);
    let params: Vec<f64> = model.params.iter().map(|x| x.as_f64()).collect();
    w.f64s(&params);
    w.into_bytes()
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, rank: usize, config_hash: u64, path: &Path) -> Result<()> {
    binio::write_file(path, &checkpoint_bytes(model, rank, config_hash))
}

pub fn parse_checkpoint(bytes: &[u8], path: &Path) -> Result<(Model<f64>, CheckpointHeader)> {
    let mut r = Reader::new(bytes, CHECKPOINT_MAGIC, path)?;
    let d = r.usize()?;
    let k = r.usize()?;
    let rank = r.usize()?;
    let n_layers = r.usize()?;
    let n_pois = r.usize()?;
    let n_users = r.usize()?;
    let n_cats = r.usize()?;
    let config_hash = r.u64()?;
    let d_time = r.usize()?;
    let d_cat = r.usize()?;
    let dims = ModelDims {
        d,
        d_time,
        d_cat,
        k,
        n_layers,
        n_pois,
        n_users,
        n_cats,
    };
    let layout = Layout::new(dims).map_err(|e| r.malformed(e.to_string()))?;
    let params = r.f64s(layout.total)?;
    r.finish()?;
    Ok((
        Model {
            layout,
            params,
            ablation: Ablation::None,
        },
        CheckpointHeader {
            dims,
            rank,
            config_hash,
        },
    ))
}

/// Loads a checkpoint and checks it was trained under `config_hash`.
pub fn load_checkpoint(path: &Path, config_hash: Option<u64>) -> Result<(Model<f64>, CheckpointHeader)> {
    let (model, header) = parse_checkpoint(&binio::read_file(path)?, path)?;
    if let Some(expected) = config_hash {
        if expected != header.config_hash {
            return Err(Error::HashMismatch {
                what: format!("model configuration of checkpoint {}", path.display()),
                expected: binio::hash_hex(expected),
                found: binio::hash_hex(header.config_hash),
            });
        }
    }
    Ok((model, header))
}
