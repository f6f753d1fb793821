//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::binio;
use crate::error::{Error, Result};
use crate::model::Ablation;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: PathBuf,
    pub work_dir: PathBuf,
    pub seed: u64,

    pub min_poi_visits: usize,
    pub min_len: usize,
    pub max_len: usize,

    pub radius_km: f64,
    pub sigma_geo_km: f64,
    pub alpha: f64,
    pub kappa: f64,
    pub n_bins: usize,
    pub rank: usize,
    pub k: usize,
    pub q: f64,
    pub eigen_tol: f64,

    pub d: usize,
    pub time_emb: usize,
    pub cat_emb: usize,
    pub layers: usize,

    pub lr: f64,
    pub wd: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Optimizer step cap, 0 for none.
    pub max_steps: usize,
    pub ablation: Ablation,

    pub gen_grid: usize,
    pub gen_users: usize,
    pub gen_trajectories: usize,
    pub gen_len: usize,
    pub gen_strength: f64,

    pub bench_lengths: Vec<usize>,
    pub bench_batch: usize,
    pub bench_warmup: usize,
    pub bench_iters: usize,
    pub bench_f32: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: PathBuf::from("checkins.csv"),
            work_dir: PathBuf::from("work"),
            seed: 0,
            min_poi_visits: 5,
            min_len: 3,
            max_len: 101,
            radius_km: 1.5,
            sigma_geo_km: 1.0,
            alpha: 1.0,
            kappa: 1.0,
            n_bins: 168,
            rank: 12,
            k: 16,
            q: 0.2,
            eigen_tol: 1e-10,
            d: 96,
            time_emb: 32,
            cat_emb: 32,
            layers: 2,
            lr: 1e-3,
            wd: 1e-3,
            batch: 128,
            epochs: 50,
            max_steps: 0,
            ablation: Ablation::None,
            gen_grid: 8,
            gen_users: 100,
            gen_trajectories: 10,
            gen_len: 20,
            gen_strength: 1.0,
            bench_lengths: vec![25, 50, 75, 100],
            bench_batch: 128,
            bench_warmup: 20,
            bench_iters: 200,
            bench_f32: false,
        }
    }
}

const KEYS: &[&str] = &[
    "data",
    "work_dir",
    "seed",
    "min_poi_visits",
    "min_len",
    "max_len",
    "radius_km",
    "sigma_geo_km",
    "alpha",
    "kappa",
    "n_bins",
    "R",
    "k",
    "q",
    "eigen_tol",
    "D",
    "time_emb",
    "cat_emb",
    "layers",
    "lr",
    "wd",
    "batch",
    "epochs",
    "max_steps",
    "ablation",
    "gen_grid",
    "gen_users",
    "gen_trajectories",
    "gen_len",
    "gen_strength",
    "bench_lengths",
    "bench_batch",
    "bench_warmup",
    "bench_iters",
    "bench_f32",
];

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::invalid(format!("config key '{key}': cannot parse '{v}'")))
}

impl RunConfig {
    pub fn keys() -> &'static [&'static str] {
        KEYS
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "data" => self.data = PathBuf::from(v),
            "work_dir" => self.work_dir = PathBuf::from(v),
            "seed" => self.seed = num(key, v)?,
            "min_poi_visits" => self.min_poi_visits = num(key, v)?,
            "min_len" => self.min_len = num(key, v)?,
            "max_len" => self.max_len = num(key, v)?,
            "radius_km" => self.radius_km = num(key, v)?,
            "sigma_geo_km" => self.sigma_geo_km = num(key, v)?,
            "alpha" => self.alpha = num(key, v)?,
            "kappa" => self.kappa = num(key, v)?,
            "n_bins" => self.n_bins = num(key, v)?,
            "R" => self.rank = num(key, v)?,
            "k" => self.k = num(key, v)?,
            "q" => self.q = num(key, v)?,
            "eigen_tol" => self.eigen_tol = num(key, v)?,
            "D" => self.d = num(key, v)?,
            "time_emb" => self.time_emb = num(key, v)?,
            "cat_emb" => self.cat_emb = num(key, v)?,
            "layers" => self.layers = num(key, v)?,
            "lr" => self.lr = num(key, v)?,
            "wd" => self.wd = num(key, v)?,
            "batch" => self.batch = num(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "max_steps" => self.max_steps = num(key, v)?,
            "ablation" => self.ablation = v.parse()?,
            "gen_grid" => self.gen_grid = num(key, v)?,
            "gen_users" => self.gen_users = num(key, v)?,
            "gen_trajectories" => self.gen_trajectories = num(key, v)?,
            "gen_len" => self.gen_len = num(key, v)?,
            "gen_strength" => self.gen_strength = num(key, v)?,
            "bench_lengths" => {
                self.bench_lengths = v
                    .split(',')
                    .map(|x| num(key, x.trim()))
                    .collect::<Result<_>>()?
            }
            "bench_batch" => self.bench_batch = num(key, v)?,
            "bench_warmup" => self.bench_warmup = num(key, v)?,
            "bench_iters" => self.bench_iters = num(key, v)?,
            "bench_f32" => self.bench_f32 = num(key, v)?,
            _ => return Err(Error::invalid(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "data" => self.data.display().to_string(),
            "work_dir" => self.work_dir.display().to_string(),
            "seed" => self.seed.to_string(),
            "min_poi_visits" => self.min_poi_visits.to_string(),
            "min_len" => self.min_len.to_string(),
            "max_len" => self.max_len.to_string(),
            "radius_km" => self.radius_km.to_string(),
            "sigma_geo_km" => self.sigma_geo_km.to_string(),
            "alpha" => self.alpha.to_string(),
            "kappa" => self.kappa.to_string(),
            "n_bins" => self.n_bins.to_string(),
            "R" => self.rank.to_string(),
            "k" => self.k.to_string(),
            "q" => self.q.to_string(),
            "eigen_tol" => self.eigen_tol.to_string(),
            "D" => self.d.to_string(),
            "time_emb" => self.time_emb.to_string(),
            "cat_emb" => self.cat_emb.to_string(),
            "layers" => self.layers.to_string(),
            "lr" => self.lr.to_string(),
            "wd" => self.wd.to_string(),
            "batch" => self.batch.to_string(),
            "epochs" => self.epochs.to_string(),
            "max_steps" => self.max_steps.to_string(),
            "ablation" => self.ablation.to_string(),
            "gen_grid" => self.gen_grid.to_string(),
            "gen_users" => self.gen_users.to_string(),
            "gen_trajectories" => self.gen_trajectories.to_string(),
            "gen_len" => self.gen_len.to_string(),
            "gen_strength" => self.gen_strength.to_string(),
            "bench_lengths" => self
                .bench_lengths
                .iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(","),
            "bench_batch" => self.bench_batch.to_string(),
            "bench_warmup" => self.bench_warmup.to_string(),
            "bench_iters" => self.bench_iters.to_string(),
            "bench_f32" => self.bench_f32.to_string(),
            _ => return None,
        })
    }

    /// Parses `key = value` lines; `#` starts a comment. Keys may appear
    /// once per file.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: (n + 1) as u64,
                msg,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err("expected 'key = value'".into()))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(err(format!("duplicate key '{k}'")));
            }
            cfg.set(k, v).map_err(|e| err(e.to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Applies `key=value` overrides, then revalidates.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("override '{o}' is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        self.validate()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            let _ = writeln!(out, "{k} = {}", self.get(k).expect("known key"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid(msg));
        if self.min_len < 2 || self.min_len > self.max_len {
            return bad(format!("need 2 <= min_len <= max_len, got {} / {}", self.min_len, self.max_len));
        }
        if !(self.radius_km > 0.0 && self.sigma_geo_km > 0.0) {
            return bad("radius_km and sigma_geo_km must be positive".into());
        }
        if !(self.alpha > 0.0 && self.kappa > 0.0) {
            return bad("alpha and kappa must be positive".into());
        }
        if self.n_bins != crate::ingest::N_BINS {
            return bad(format!("only hour-of-week binning (n_bins = 168) is supported, got {}", self.n_bins));
        }
        if self.rank == 0 || self.rank > self.n_bins {
            return bad(format!("R must be in 1..={}, got {}", self.n_bins, self.rank));
        }
        if self.k == 0 {
            return bad("k must be positive".into());
        }
        if !(self.q >= 0.0 && self.q.is_finite()) {
            return bad(format!("q must be >= 0, got {}", self.q));
        }
        if !(self.eigen_tol > 0.0) {
            return bad("eigen_tol must be positive".into());
        }
        if self.d == 0 || !self.d.is_multiple_of(2) {
            return bad(format!("D must be even and positive, got {}", self.d));
        }
        if self.time_emb == 0 || self.cat_emb == 0 || self.layers == 0 {
            return bad("time_emb, cat_emb and layers must be positive".into());
        }
        if !(self.lr >= 0.0 && self.wd >= 0.0) {
            return bad("lr and wd must be >= 0".into());
        }
        if self.batch == 0 {
            return bad("batch must be positive".into());
        }
        if self.gen_grid < 2 || !self.gen_grid.is_multiple_of(2) {
            return bad(format!("gen_grid must be even and >= 2, got {}", self.gen_grid));
        }
        if !(0.0..=1.0).contains(&self.gen_strength) {
            return bad(format!("gen_strength must be in [0, 1], got {}", self.gen_strength));
        }
        if self.gen_len < 2 {
            return bad("gen_len must be >= 2".into());
        }
        if self.bench_lengths.is_empty() || self.bench_lengths.contains(&0) {
            return bad("bench_lengths must be non-empty and positive".into());
        }
        if self.bench_batch == 0 || self.bench_iters == 0 {
            return bad("bench_batch and bench_iters must be positive".into());
        }
        Ok(())
    }

    /// Hash of every setting that shapes a trained model, including the
    /// cache inputs it was trained on.
    pub fn model_hash(&self) -> u64 {
        let keys = [
            "seed",
            "min_poi_visits",
            "min_len",
            "max_len",
            "radius_km",
            "sigma_geo_km",
            "alpha",
            "kappa",
            "n_bins",
            "R",
            "k",
            "q",
            "eigen_tol",
            "D",
            "time_emb",
            "cat_emb",
            "layers",
        ];
        let text: String = keys
            .iter()
            .map(|k| format!("{k}={}\n", self.get(k).expect("known key")))
            .collect();
        binio::content_hash(text.as_bytes())
    }
}
