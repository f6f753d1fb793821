//! The commands behind the CLI: generate, precompute, train, eval, bench.
//!
//! Every cache in the work directory is listed in `manifest.txt` with the
//! hash of its inputs (data file plus the settings it depends on) and the
//! hash of its own bytes. `precompute` reuses a cache only when both match
//! and rebuilds it with a warning otherwise. `train` and `eval` never
//! rebuild anything: a missing entry or a hash mismatch is an error.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::bank::PhaseTokenBank;
use crate::binio::{self, content_hash, hash_hex};
use crate::config::RunConfig;
use crate::direction::{count_transitions, edge_signal, factorize, LowRankBasis, TransitionCounts};
use crate::error::{Error, Result};
use crate::geo::{build_radius_graph, GeoGraph, GraphParams};
use crate::ingest::{parse_checkins, split_8_1_1, Dataset, DatasetSplit, SegmentParams, TimeBinner};
use crate::model::checkpoint::{load_checkpoint, save_checkpoint};
use crate::model::{Ablation, Model, ModelDims, SeqInput};
use crate::spectral::{precompute_bank, EigenOptions};
use crate::train::asymmetry::DEFAULT_MIN_COUNT;
use crate::train::bench::{bench, bench_csv, BenchConfig, BenchRow};
use crate::train::tidal::{generate_tidal, write_checkins_csv, TidalConfig};
use crate::train::{asymmetry_stratified_eval, train, AdamWConfig, AsymmetryIndex, StratifiedReport, TrainConfig, TrainReport};

pub const MANIFEST: &str = "manifest.txt";
pub const SPLIT_FILE: &str = "split.txt";
pub const GRAPH_FILE: &str = "graph.mgf";
pub const BASIS_FILE: &str = "basis.mgb";
pub const EFFECTIVE_CONFIG: &str = "config.effective.txt";
pub const BENCH_FILE: &str = "bench.csv";

/// Vocabulary sizes of the randomly initialized benchmark model used when no
/// trained checkpoint exists.
pub const BENCH_VOCAB: (usize, usize, usize) = (1000, 100, 10);

pub fn bank_file(q: f64) -> String {
    format!("bank_q{q:.4}.mgu")
}

pub fn model_file(ablation: Ablation) -> String {
    format!("model_{}.mgm", ablation.name())
}

pub fn metrics_file(ablation: Ablation) -> String {
    format!("metrics_{}.txt", ablation.name())
}

pub fn train_log_file(ablation: Ablation) -> String {
    format!("train_log_{}.csv", ablation.name())
}

/// Configuration a variant actually runs with: the no-phase variant uses a
/// zero magnetic charge.
pub fn effective_config(cfg: &RunConfig, ablation: Ablation) -> RunConfig {
    let mut c = cfg.clone();
    c.ablation = ablation;
    if ablation == Ablation::NoPhase {
        c.q = 0.0;
    }
    c
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Entry {
    input: u64,
    output: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct Manifest {
    entries: BTreeMap<String, Entry>,
}

impl Manifest {
    fn path(work: &Path) -> PathBuf {
        work.join(MANIFEST)
    }

    fn load(work: &Path) -> Result<Self> {
        let path = Self::path(work);
        if !path.exists() {
            return Ok(Manifest::default());
        }
        let text = String::from_utf8_lossy(&binio::read_file(&path)?).into_owned();
        let mut entries = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let hex = |s: &str| u64::from_str_radix(s, 16).ok();
            match parts.as_slice() {
                [name, i, o] if hex(i).is_some() && hex(o).is_some() => {
                    entries.insert(
                        (*name).to_string(),
                        Entry {
                            input: hex(i).unwrap_or_default(),
                            output: hex(o).unwrap_or_default(),
                        },
                    );
                }
                _ => {
                    return Err(Error::Parse {
                        path,
                        line: (n + 1) as u64,
                        msg: "expected `<artifact> <input hash> <output hash>`".into(),
                    })
                }
            }
        }
        Ok(Manifest { entries })
    }

    fn save(&self, work: &Path) -> Result<()> {
        let mut s = String::new();
        for (name, e) in &self.entries {
            let _ = writeln!(s, "{name} {} {}", hash_hex(e.input), hash_hex(e.output));
        }
        binio::write_file(&Self::path(work), s.as_bytes())
    }

    /// Bytes of a cache that is listed with `input` and still has the
    /// recorded content hash.
    fn fresh(&self, work: &Path, name: &str, input: u64) -> Option<Vec<u8>> {
        let e = self.entries.get(name)?;
        if e.input != input {
            log::warn!(
                "{name}: inputs changed (cached {}, now {}); rebuilding",
                hash_hex(e.input),
                hash_hex(input)
            );
            return None;
        }
        let bytes = binio::read_file(&work.join(name)).ok()?;
        if content_hash(&bytes) != e.output {
            log::warn!("{name}: file does not match its manifest hash; rebuilding");
            return None;
        }
        Some(bytes)
    }

    /// Bytes of a cache that must exist and match, for consumers that never
    /// rebuild.
    fn require(&self, work: &Path, name: &str, input: u64) -> Result<Vec<u8>> {
        let e = self.entries.get(name).ok_or_else(|| {
            Error::invalid(format!(
                "cache {name} is not listed in {}; run `precompute` first",
                work.join(MANIFEST).display()
            ))
        })?;
        if e.input != input {
            return Err(Error::HashMismatch {
                what: format!("inputs of cache {name} (rerun `precompute`)"),
                expected: hash_hex(input),
                found: hash_hex(e.input),
            });
        }
        let bytes = binio::read_file(&work.join(name))?;
        let found = content_hash(&bytes);
        if found != e.output {
            return Err(Error::HashMismatch {
                what: format!("contents of cache {name}"),
                expected: hash_hex(e.output),
                found: hash_hex(found),
            });
        }
        Ok(bytes)
    }

    fn record(&mut self, work: &Path, name: &str, input: u64, bytes: &[u8]) -> Result<()> {
        binio::write_file(&work.join(name), bytes)?;
        self.entries.insert(
            name.to_string(),
            Entry {
                input,
                output: content_hash(bytes),
            },
        );
        Ok(())
    }
}

fn key(parts: &[String]) -> u64 {
    content_hash(parts.join("\n").as_bytes())
}

/// Input hashes of every cache, derived from the data file and settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheKeys {
    pub data: u64,
    pub split: u64,
    pub graph: u64,
    pub basis: u64,
}

impl CacheKeys {
    fn new(cfg: &RunConfig, data_hash: u64) -> Self {
        let g = |k: &str| cfg.get(k).expect("known key");
        let data = key(&[
            hash_hex(data_hash),
            g("min_poi_visits"),
            g("min_len"),
            g("max_len"),
        ]);
        let split = key(&[hash_hex(data), g("seed")]);
        let graph = key(&[hash_hex(data), g("radius_km"), g("sigma_geo_km")]);
        let basis = key(&[
            hash_hex(graph),
            hash_hex(split),
            g("alpha"),
            g("kappa"),
            g("n_bins"),
            g("R"),
        ]);
        CacheKeys {
            data,
            split,
            graph,
            basis,
        }
    }

    pub fn bank(&self, cfg: &RunConfig, q: f64) -> u64 {
        key(&[
            hash_hex(self.basis),
            format!("{q}"),
            cfg.get("k").expect("known key"),
            cfg.get("eigen_tol").expect("known key"),
        ])
    }
}

fn segment_params(cfg: &RunConfig) -> SegmentParams {
    SegmentParams {
        min_poi_visits: cfg.min_poi_visits,
        min_len: cfg.min_len,
        max_len: cfg.max_len,
    }
}

fn load_dataset(cfg: &RunConfig) -> Result<(Dataset, CacheKeys)> {
    let bytes = binio::read_file(&cfg.data)?;
    let corpus = parse_checkins(bytes.as_slice(), &cfg.data)?;
    let (dataset, report) = Dataset::from_corpus(&corpus, segment_params(cfg));
    log::info!(
        "ingest: {} check-ins, {} trajectories over {} POIs ({} POIs and {} check-ins filtered, {} users dropped)",
        corpus.checkins.len(),
        report.trajectories,
        dataset.n_pois(),
        report.removed_pois,
        report.removed_checkins,
        report.dropped_users
    );
    Ok((dataset, CacheKeys::new(cfg, content_hash(&bytes))))
}

fn transition_counts(dataset: &Dataset, split: &DatasetSplit, graph: &GeoGraph) -> TransitionCounts {
    let train = DatasetSplit::select(&split.train, &dataset.trajectories);
    count_transitions(train, graph, TimeBinner::default())
}

fn eigen_options(cfg: &RunConfig) -> EigenOptions {
    EigenOptions {
        tol: cfg.eigen_tol,
        seed: cfg.seed ^ EigenOptions::default().seed,
        ..EigenOptions::default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
    pub cache_hit: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrecomputeReport {
    pub stages: Vec<StageTiming>,
    pub n_pois: usize,
    pub n_edges: usize,
    pub n_trajectories: usize,
    pub banks: Vec<PathBuf>,
}

impl PrecomputeReport {
    pub fn summary(&self) -> String {
        let mut s = format!(
            "{} POIs, {} edges, {} trajectories\n",
            self.n_pois, self.n_edges, self.n_trajectories
        );
        for st in &self.stages {
            let hit = if st.cache_hit { " (cache hit)" } else { "" };
            let _ = writeln!(s, "{:<12} {:>9.3} s{hit}", st.stage, st.seconds);
        }
        s
    }
}

/// Charges whose banks a variant needs.
fn bank_charges(cfg: &RunConfig, ablation: Ablation) -> Vec<f64> {
    let mut qs = vec![cfg.q];
    let eff = effective_config(cfg, ablation).q;
    if eff != cfg.q {
        qs.push(eff);
    }
    qs
}

/// Ingest, graph, direction basis and phase banks. Writes every cache plus
/// the manifest and the effective configuration.
pub fn cmd_precompute(cfg: &RunConfig, ablation: Ablation) -> Result<PrecomputeReport> {
    cfg.validate()?;
    let mut current = "ingest";
    precompute_stages(cfg, ablation, &mut current).inspect_err(|e| log::error!("precompute stage `{current}` failed: {e}"))
}

fn precompute_stages(cfg: &RunConfig, ablation: Ablation, current: &mut &'static str) -> Result<PrecomputeReport> {
    let work = cfg.work_dir.as_path();
    let mut manifest = Manifest::load(work)?;
    let mut stages = Vec::new();
    let mut stage = |name: &str, t0: Instant, hit: bool| {
        let seconds = t0.elapsed().as_secs_f64();
        log::info!("{name}: {seconds:.3} s{}", if hit { " (cache hit)" } else { "" });
        stages.push(StageTiming {
            stage: name.to_string(),
            seconds,
            cache_hit: hit,
        });
    };

    let t0 = Instant::now();
    let (dataset, keys) = load_dataset(cfg)?;
    let cached = manifest.fresh(work, SPLIT_FILE, keys.split);
    let hit = cached.is_some();
    let split = match cached {
        Some(b) => DatasetSplit::from_manifest(&String::from_utf8_lossy(&b))?,
        None => {
            let s = split_8_1_1(&dataset.trajectories, cfg.seed)?;
            manifest.record(work, SPLIT_FILE, keys.split, s.to_manifest().as_bytes())?;
            s
        }
    };
    if split.train.len() + split.val.len() + split.test.len() != dataset.trajectories.len() {
        return Err(Error::invalid("split does not cover the dataset"));
    }
    stage("ingest", t0, hit);

    *current = "graph";
    let t0 = Instant::now();
    let cached = manifest.fresh(work, GRAPH_FILE, keys.graph);
    let hit = cached.is_some();
    let graph = match cached {
        Some(b) => GeoGraph::from_bytes(&b, &work.join(GRAPH_FILE))?,
        None => {
            let params = GraphParams {
                radius_km: cfg.radius_km,
                sigma_geo_km: cfg.sigma_geo_km,
            };
            let g = build_radius_graph(&dataset.poi_coords, params)?;
            manifest.record(work, GRAPH_FILE, keys.graph, &g.to_bytes())?;
            g
        }
    };
    if graph.n_edges() == 0 {
        return Err(Error::invalid(format!(
            "the radius graph has no edges at radius {} km",
            cfg.radius_km
        )));
    }
    stage("graph", t0, hit);

    *current = "direction";
    let t0 = Instant::now();
    let cached = manifest.fresh(work, BASIS_FILE, keys.basis);
    let hit = cached.is_some();
    let basis = match cached {
        Some(b) => LowRankBasis::from_bytes(&b, &work.join(BASIS_FILE))?,
        None => {
            let counts = transition_counts(&dataset, &split, &graph);
            log::info!(
                "direction: {} transitions counted, {} self, {} off-graph",
                counts.report.counted,
                counts.report.skipped_self,
                counts.report.skipped_non_edge
            );
            let signal = edge_signal(&counts, &graph, cfg.alpha, cfg.kappa)?;
            let b = factorize(&signal, cfg.rank)?;
            manifest.record(work, BASIS_FILE, keys.basis, &b.to_bytes())?;
            b
        }
    };
    stage("direction", t0, hit);

    let mut banks = Vec::new();
    *current = "spectral";
    for q in bank_charges(cfg, ablation) {
        let t0 = Instant::now();
        let name = bank_file(q);
        let bank_key = keys.bank(cfg, q);
        let hit = manifest.fresh(work, &name, bank_key).is_some();
        if !hit {
            if cfg.k >= graph.n_pois() {
                return Err(Error::invalid(format!(
                    "k = {} needs more than {} POIs",
                    cfg.k,
                    graph.n_pois()
                )));
            }
            let (bank, report) = precompute_bank(&graph, &basis, q, cfg.k, &eigen_options(cfg))?;
            for (r, secs) in report.seconds_per_basis.iter().enumerate() {
                log::debug!("basis {r}: {secs:.3} s, eigenvalues {:?}", report.eigenvalues[r]);
            }
            manifest.record(work, &name, bank_key, &bank.to_bytes())?;
        }
        stage(&format!("spectral q={q}"), t0, hit);
        banks.push(work.join(name));
    }

    manifest.save(work)?;
    binio::write_file(&work.join(EFFECTIVE_CONFIG), cfg.to_text().as_bytes())?;
    Ok(PrecomputeReport {
        stages,
        n_pois: dataset.n_pois(),
        n_edges: graph.n_edges(),
        n_trajectories: dataset.trajectories.len(),
        banks,
    })
}

/// Everything a consumer needs, verified against the manifest.
pub struct Prepared {
    pub dataset: Dataset,
    pub split: DatasetSplit,
    pub graph: GeoGraph,
    /// Bank with the variant's charge and mixing applied.
    pub bank: PhaseTokenBank,
}

impl Prepared {
    pub fn open(cfg: &RunConfig, ablation: Ablation) -> Result<Self> {
        cfg.validate()?;
        let work = cfg.work_dir.as_path();
        let manifest = Manifest::load(work)?;
        let (dataset, keys) = load_dataset(cfg)?;
        let split = DatasetSplit::from_manifest(&String::from_utf8_lossy(&manifest.require(
            work,
            SPLIT_FILE,
            keys.split,
        )?))?;
        let graph = GeoGraph::from_bytes(&manifest.require(work, GRAPH_FILE, keys.graph)?, &work.join(GRAPH_FILE))?;
        manifest.require(work, BASIS_FILE, keys.basis)?;
        let q = effective_config(cfg, ablation).q;
        let name = bank_file(q);
        let bank = PhaseTokenBank::from_bytes(&manifest.require(work, &name, keys.bank(cfg, q))?, &work.join(&name))?;
        if bank.graph_hash() != graph.content_hash() {
            return Err(Error::HashMismatch {
                what: format!("graph of phase bank {name}"),
                expected: hash_hex(graph.content_hash()),
                found: hash_hex(bank.graph_hash()),
            });
        }
        let bank = if ablation == Ablation::NoTc {
            bank.with_time_mean_mixing()
        } else {
            bank
        };
        Ok(Prepared {
            dataset,
            split,
            graph,
            bank,
        })
    }

    pub fn inputs(&self, ids: &[usize]) -> Result<Vec<SeqInput<f64>>> {
        ids.iter()
            .map(|&i| {
                SeqInput::from_trajectory(
                    &self.dataset.trajectories[i],
                    &self.dataset.poi_category,
                    &self.bank,
                    TimeBinner::default(),
                )
            })
            .collect()
    }

    pub fn model_dims(&self, cfg: &RunConfig) -> ModelDims {
        ModelDims {
            d: cfg.d,
            d_time: cfg.time_emb,
            d_cat: cfg.cat_emb,
            k: cfg.k,
            n_layers: cfg.layers,
            n_pois: self.dataset.n_pois(),
            n_users: self.dataset.n_users(),
            n_cats: self.dataset.n_categories(),
        }
    }
}

pub fn train_config(cfg: &RunConfig) -> TrainConfig {
    TrainConfig {
        optimizer: AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.wd,
            ..AdamWConfig::default()
        },
        batch: cfg.batch,
        epochs: cfg.epochs,
        max_steps: cfg.max_steps,
        seed: cfg.seed,
        select_on_val: true,
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub checkpoint: PathBuf,
}

/// Trains the variant on the training split, selecting on validation MRR.
pub fn cmd_train(cfg: &RunConfig, ablation: Ablation) -> Result<TrainOutcome> {
    let prep = Prepared::open(cfg, ablation)?;
    let train_set = prep.inputs(&prep.split.train)?;
    let val_set = prep.inputs(&prep.split.val)?;
    let mut model = Model::<f64>::new(prep.model_dims(cfg), cfg.seed)?.with_ablation(ablation);
    log::info!(
        "training {ablation}: {} parameters, {} train / {} val trajectories",
        model.n_params(),
        train_set.len(),
        val_set.len()
    );
    let report = train(&mut model, &train_set, Some(&val_set), &train_config(cfg))?;
    let work = cfg.work_dir.as_path();
    let checkpoint = work.join(model_file(ablation));
    let hash = effective_config(cfg, ablation).model_hash();
    save_checkpoint(&model, cfg.rank, hash, &checkpoint)?;
    binio::write_file(&work.join(train_log_file(ablation)), report.to_csv().as_bytes())?;
    Ok(TrainOutcome { report, checkpoint })
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: StratifiedReport,
    pub metrics: PathBuf,
    /// Checkpoint that was evaluated.
    pub checkpoint: PathBuf,
}

/// Evaluates the variant on the test split. Without a checkpoint of its
/// own, the variant is applied at evaluation time to the full model.
pub fn cmd_eval(cfg: &RunConfig, ablation: Ablation) -> Result<EvalOutcome> {
    let prep = Prepared::open(cfg, ablation)?;
    let work = cfg.work_dir.as_path();
    let own = work.join(model_file(ablation));
    let (checkpoint, hash) = if own.exists() || ablation == Ablation::None {
        (own, effective_config(cfg, ablation).model_hash())
    } else {
        let full = work.join(model_file(Ablation::None));
        log::warn!(
            "{} not found; evaluating {} with the {ablation} variant applied",
            own.display(),
            full.display()
        );
        (full, effective_config(cfg, Ablation::None).model_hash())
    };
    let (model, header) = load_checkpoint(&checkpoint, Some(hash))?;
    let want = prep.model_dims(cfg);
    if header.dims != want || header.rank != cfg.rank {
        return Err(Error::invalid(format!(
            "checkpoint {} has dims {:?} (R = {}), the data and config need {:?} (R = {})",
            checkpoint.display(),
            header.dims,
            header.rank,
            want,
            cfg.rank
        )));
    }
    let model = model.with_ablation(ablation);
    let test_set = prep.inputs(&prep.split.test)?;
    let counts = transition_counts(&prep.dataset, &prep.split, &prep.graph);
    let index = AsymmetryIndex::from_counts(&counts, DEFAULT_MIN_COUNT);
    let report = asymmetry_stratified_eval(&model, &test_set, &index)?;
    let metrics = work.join(metrics_file(ablation));
    let mut text = format!("variant = {ablation}\ncheckpoint = {}\n", checkpoint.display());
    text.push_str(&report.to_flat());
    binio::write_file(&metrics, text.as_bytes())?;
    Ok(EvalOutcome {
        report,
        metrics,
        checkpoint,
    })
}

pub fn bench_config(cfg: &RunConfig) -> BenchConfig {
    BenchConfig {
        lengths: cfg.bench_lengths.clone(),
        batch: cfg.bench_batch,
        warmup: cfg.bench_warmup,
        iters: cfg.bench_iters,
        seed: cfg.seed,
    }
}

/// Times inference of the trained full model, or of a freshly initialized
/// one when no checkpoint exists, and writes `bench.csv`.
pub fn cmd_bench(cfg: &RunConfig) -> Result<Vec<BenchRow>> {
    cfg.validate()?;
    let work = cfg.work_dir.as_path();
    let path = work.join(model_file(Ablation::None));
    let model = if path.exists() {
        load_checkpoint(&path, None)?.0
    } else {
        let (n_pois, n_users, n_cats) = BENCH_VOCAB;
        log::info!("no checkpoint at {}; timing a randomly initialized model", path.display());
        Model::new(
            ModelDims {
                d: cfg.d,
                d_time: cfg.time_emb,
                d_cat: cfg.cat_emb,
                k: cfg.k,
                n_layers: cfg.layers,
                n_pois,
                n_users,
                n_cats,
            },
            cfg.seed,
        )?
    };
    let bc = bench_config(cfg);
    let rows = if cfg.bench_f32 {
        bench(&model.cast::<f32>(), &bc)?
    } else {
        bench(&model, &bc)?
    };
    binio::write_file(&work.join(BENCH_FILE), bench_csv(&rows).as_bytes())?;
    Ok(rows)
}

/// Writes the synthetic tidal corpus to the configured data path and
/// returns the number of check-ins.
pub fn cmd_generate(cfg: &RunConfig) -> Result<usize> {
    cfg.validate()?;
    let (_, checkins) = generate_tidal(&TidalConfig {
        grid: cfg.gen_grid,
        n_users: cfg.gen_users,
        trajectories_per_user: cfg.gen_trajectories,
        len: cfg.gen_len,
        strength: cfg.gen_strength,
        seed: cfg.seed,
    })?;
    write_checkins_csv(&checkins, &cfg.data)?;
    Ok(checkins.len())
}
