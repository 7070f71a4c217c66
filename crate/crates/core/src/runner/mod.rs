//! Sweep orchestration: pools, few-shot sets, ICL and CICL cells, persistence.

mod store;

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use indexmap::IndexMap;
use rand::seq::index;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analysis::metrics::macro_f1;
use crate::datamodel::{ConfigError, DataError, DatasetPair, Example, LabelSet, Mode, RunConfig};
use crate::modelclient::{build_backend, predict, LabelScorer, ModelError};
use crate::parallel::ordered_map;
use crate::prompting::{build_cicl_prompt, build_icl_prompt, PromptSpec};
use crate::selection::{
    classify_pool, derived_rng, sample_fewshot, ClassifiedPool, FewShotSet, SampleOptions, SelectionError,
};

pub use store::{config_hash, portable_config, write_atomic, CellKey, ExpectedCell, Manifest, RunDir};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellContext {
    pub dataset: String,
    pub backend: String,
    pub seed: u64,
    pub proportion: f64,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub query_id: String,
    pub mode: Mode,
    pub predicted_label: String,
    pub gold_label: String,
    pub scores: IndexMap<String, f64>,
    pub context: CellContext,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_prediction: Option<String>,
}

#[derive(Debug, Error)]
pub enum CellError {
    #[error("{failed} of {total} queries failed{} (first: {first})", if *.aborted { ", cell aborted" } else { "" })]
    Queries {
        failed: usize,
        total: usize,
        aborted: bool,
        transport: bool,
        first: String,
    },
    #[error("no initial prediction for query {0:?}")]
    MissingInitial(String),
}

impl CellError {
    pub fn is_transport(&self) -> bool {
        matches!(self, CellError::Queries { transport: true, .. })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CellOptions {
    pub workers: usize,
    /// Failed queries tolerated before the remaining queries are skipped.
    pub error_budget: usize,
}

fn score_queries<F>(queries: &[Example], opts: CellOptions, f: F) -> Result<Vec<PredictionRecord>, CellError>
where
    F: Fn(&Example) -> Result<PredictionRecord, ModelError> + Sync,
{
    let failures = AtomicUsize::new(0);
    let results = ordered_map(queries, opts.workers, |_, q| {
        if failures.load(Ordering::SeqCst) > opts.error_budget {
            return None;
        }
        let r = f(q);
        if r.is_err() {
            failures.fetch_add(1, Ordering::SeqCst);
        }
        Some(r.map_err(|e| (q.id.clone(), e)))
    });
    let mut records = Vec::with_capacity(queries.len());
    let mut errors = Vec::new();
    let mut skipped = false;
    for r in results {
        match r {
            Some(Ok(rec)) => records.push(rec),
            Some(Err(e)) => errors.push(e),
            None => skipped = true,
        }
    }
    if !errors.is_empty() {
        let (id, first) = &errors[0];
        return Err(CellError::Queries {
            failed: errors.len(),
            total: queries.len(),
            aborted: skipped,
            transport: errors.iter().any(|(_, e)| e.is_transport()),
            first: format!("{id}: {first}"),
        });
    }
    records.sort_by(|a, b| a.query_id.cmp(&b.query_id));
    Ok(records)
}

/// Standard ICL over `queries` with the few-shot set's gold labels.
pub fn run_icl_cell(
    ctx: &CellContext,
    labels: &LabelSet,
    backend: &dyn LabelScorer,
    fewshot: &FewShotSet,
    queries: &[Example],
    opts: CellOptions,
) -> Result<Vec<PredictionRecord>, CellError> {
    score_queries(queries, opts, |q| {
        let prompt = build_icl_prompt(fewshot.pairs(), &q.text, labels);
        let (label, scores) = predict(&prompt, backend, Some(&q.gold_label))?;
        Ok(PredictionRecord {
            query_id: q.id.clone(),
            mode: Mode::Icl,
            predicted_label: label,
            gold_label: q.gold_label.clone(),
            scores: scores.scores,
            context: ctx.clone(),
            initial_prediction: None,
        })
    })
}

/// Corrective ICL: each query carries its ICL prediction from `initial`.
pub fn run_cicl_cell(
    ctx: &CellContext,
    labels: &LabelSet,
    backend: &dyn LabelScorer,
    fewshot: &FewShotSet,
    queries: &[Example],
    initial: &[PredictionRecord],
    opts: CellOptions,
) -> Result<Vec<PredictionRecord>, CellError> {
    let by_id: BTreeMap<&str, &str> = initial
        .iter()
        .map(|r| (r.query_id.as_str(), r.predicted_label.as_str()))
        .collect();
    if let Some(q) = queries.iter().find(|q| !by_id.contains_key(q.id.as_str())) {
        return Err(CellError::MissingInitial(q.id.clone()));
    }
    score_queries(queries, opts, |q| {
        let first = by_id[q.id.as_str()];
        let prompt = build_cicl_prompt(fewshot.triplets(), &q.text, first, labels);
        let (label, scores) = predict(&prompt, backend, Some(&q.gold_label))?;
        Ok(PredictionRecord {
            query_id: q.id.clone(),
            mode: Mode::Cicl,
            predicted_label: label,
            gold_label: q.gold_label.clone(),
            scores: scores.scores,
            context: ctx.clone(),
            initial_prediction: Some(first.to_string()),
        })
    })
}

/// Order-preserving seeded subset of at most `cap` examples.
pub fn seeded_subset(examples: &[Example], cap: usize, tag: &str, parts: &[&[u8]]) -> Vec<Example> {
    if examples.len() <= cap {
        return examples.to_vec();
    }
    let mut rng = derived_rng(tag, parts);
    let mut idx = index::sample(&mut rng, examples.len(), cap).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| examples[i].clone()).collect()
}

/// The evaluation queries: the same for every seed and proportion.
pub fn eval_set(pair: &DatasetPair, cap: usize) -> Vec<Example> {
    seeded_subset(&pair.test.examples, cap, "eval", &[pair.test.name.as_bytes()])
}

/// The seed's slice of the training split that serves as the exemplar pool.
pub fn pool_examples(pair: &DatasetPair, pool_size: usize, seed: u64) -> Vec<Example> {
    seeded_subset(
        &pair.train.examples,
        pool_size,
        "pool",
        &[pair.train.name.as_bytes(), &seed.to_le_bytes()],
    )
}

#[derive(Debug, Clone, Default)]
pub struct SweepOptions {
    pub workers: usize,
    /// Reuse persisted cells instead of clearing the run directory.
    pub resume: bool,
    /// Stop after this many newly computed cells (simulates an interruption).
    pub cell_limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub cell: String,
    pub message: String,
    pub transport: bool,
}

#[derive(Debug, Error)]
pub enum SweepError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("backend setup failed: {0}")]
    Backend(#[from] ModelError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("interrupted after {executed} cells")]
    Interrupted { executed: usize },
    #[error("{} cell(s) incomplete; first: {} ({})", failures.len(), failures[0].cell, failures[0].message)]
    Incomplete { failures: Vec<CellFailure> },
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error("{message}")]
    Selection { message: String, transport: bool },
}

impl SweepError {
    pub fn is_transport(&self) -> bool {
        match self {
            SweepError::Backend(e) => e.is_transport(),
            SweepError::Incomplete { failures } => failures.iter().any(|f| f.transport),
            SweepError::Selection { transport, .. } => *transport,
            _ => false,
        }
    }
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{}: {message}", path.display())]
    Corrupt { path: PathBuf, message: String },
    #[error("{} cell(s) missing, e.g. {}", .0.len(), .0[0])]
    Missing(Vec<String>),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> SweepError + '_ {
    move |source| SweepError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    #[serde(flatten)]
    pub key: CellKey,
    pub macro_f1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub requested_corrected: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub achieved_corrected: Option<usize>,
    pub records: Vec<PredictionRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub started_unix: u64,
    pub wall_seconds: f64,
    pub backend_calls: u64,
    pub executed_cells: usize,
}

/// Every requested cell of a sweep, in grid order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub backend_id: String,
    pub config: RunConfig,
    pub cells: Vec<CellResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<RunMetadata>,
}

impl RunRecord {
    /// Hash over the results only: timing metadata and local paths excluded.
    pub fn canonical_hash(&self) -> String {
        let v = serde_json::json!({
            "config_hash": self.config_hash,
            "backend_id": self.backend_id,
            "config": portable_config(&self.config),
            "cells": self.cells,
        });
        hex::encode(Sha256::digest(serde_json::to_vec(&v).expect("record serializes")))
    }

    pub fn cell(&self, dataset: &str, mode: Mode, proportion: f64, seed: u64) -> Option<&CellResult> {
        self.cells.iter().find(|c| {
            c.key.dataset == dataset && c.key.mode == mode && c.key.proportion == proportion && c.key.seed == seed
        })
    }

    /// Macro-F1 per seed for one (dataset, mode, proportion), in seed order.
    pub fn f1_by_seed(&self, dataset: &str, mode: Mode, proportion: f64) -> Vec<(u64, f64)> {
        self.config
            .seeds
            .iter()
            .filter_map(|&s| self.cell(dataset, mode, proportion, s).map(|c| (s, c.macro_f1)))
            .collect()
    }

    pub fn modes(&self) -> Vec<Mode> {
        self.config.ordered_modes()
    }
}

fn read_cell(path: &Path) -> Result<Vec<PredictionRecord>, LoadError> {
    let body = fs::read_to_string(path).map_err(|source| LoadError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    body.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| LoadError::Corrupt {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
        })
        .collect()
}

fn cell_body(records: &[PredictionRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Reassembles a run from its directory; fails listing any missing cells.
pub fn load_run_record(run_dir: &Path) -> Result<RunRecord, LoadError> {
    let dir = RunDir::new(run_dir);
    let manifest = dir.read_manifest().map_err(|source| LoadError::Io {
        path: dir.manifest_path(),
        source,
    })?;
    let missing: Vec<String> = manifest
        .cells
        .iter()
        .filter(|c| !dir.cell_path(&c.key).exists())
        .map(|c| c.key.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(LoadError::Missing(missing));
    }
    let mut cells = Vec::with_capacity(manifest.cells.len());
    for expected in &manifest.cells {
        let path = dir.cell_path(&expected.key);
        let records = read_cell(&path)?;
        if records.len() != expected.queries {
            return Err(LoadError::Corrupt {
                path,
                message: format!("{} records, expected {}", records.len(), expected.queries),
            });
        }
        let gold: Vec<&str> = records.iter().map(|r| r.gold_label.as_str()).collect();
        let pred: Vec<&str> = records.iter().map(|r| r.predicted_label.as_str()).collect();
        let f1 = macro_f1(&gold, &pred).map_err(|e| LoadError::Corrupt {
            path: path.clone(),
            message: e.to_string(),
        })?;
        let fewshot_path = dir.fewshot_path(&expected.key.dataset, expected.key.proportion, expected.key.seed);
        let fewshot: Option<FewShotSet> = fs::read_to_string(&fewshot_path)
            .ok()
            .and_then(|b| serde_json::from_str(&b).ok());
        cells.push(CellResult {
            key: expected.key.clone(),
            macro_f1: f1,
            requested_corrected: fewshot.as_ref().map(|f| f.requested_corrected),
            achieved_corrected: fewshot.as_ref().map(|f| f.achieved_corrected),
            records,
        });
    }
    Ok(RunRecord {
        config_hash: manifest.config_hash,
        backend_id: manifest.backend_id,
        config: manifest.config,
        cells,
        metadata: None,
    })
}

/// Runs a sweep with the backend its config describes.
///
/// HTTP backends share a persistent score cache under `{out_dir}/cache`.
pub fn run_sweep(config: &RunConfig, opts: &SweepOptions) -> Result<RunRecord, SweepError> {
    let mut config = config.clone();
    config.backend = config.backend.clone().with_env_override();
    config.validate()?;
    let cache = config.out_dir.join("cache").join("scores.jsonl");
    let backend = build_backend(&config.backend, config.normalize, Some(&cache))?;
    run_sweep_with(&config, backend.as_ref(), opts)
}

struct Prepared {
    name: String,
    pair: DatasetPair,
    eval: Vec<Example>,
}

fn prepare_one(config: &RunConfig, name: &str) -> Result<(Prepared, String), SweepError> {
    let pair = DatasetPair::load(&config.data_dir, name)?;
    let dir = config.data_dir.join(name);
    let files = ["train.jsonl", "test.jsonl", "labels.txt"].map(|f| dir.join(f));
    let digest = store::digest_files(&files).map_err(io_err(&dir))?;
    let eval = eval_set(&pair, config.eval_cap);
    let p = Prepared {
        name: name.to_string(),
        pair,
        eval,
    };
    Ok((p, digest))
}

fn prepare(config: &RunConfig) -> Result<(Vec<Prepared>, BTreeMap<String, String>), SweepError> {
    let mut prepared = Vec::new();
    let mut digests = BTreeMap::new();
    for name in &config.datasets {
        let (p, digest) = prepare_one(config, name)?;
        digests.insert(name.clone(), digest);
        prepared.push(p);
    }
    Ok((prepared, digests))
}

/// The directory a sweep over `config` writes to (`{out_dir}/{config_hash}`).
pub fn resolve_run_dir(config: &RunConfig) -> Result<PathBuf, SweepError> {
    let (_, digests) = prepare(config)?;
    Ok(config.out_dir.join(config_hash(config, &digests)))
}

/// Classifies one seed's pool and stores it where a resumed sweep picks it up.
pub fn classify_pool_for(
    config: &RunConfig,
    backend: &dyn LabelScorer,
    dataset: &str,
    seed: u64,
    workers: usize,
) -> Result<(PathBuf, ClassifiedPool), SweepError> {
    config.validate()?;
    let (_, digests) = prepare(config)?;
    let (p, _) = prepare_one(config, dataset)?;
    let run_dir = RunDir::new(config.out_dir.join(config_hash(config, &digests)));
    let pool = ensure_pool(&run_dir, &p, p.pair.label_set(), backend, config, seed, workers.max(1))
        .map_err(|(message, transport)| SweepError::Selection { message, transport })?;
    Ok((run_dir.pool_path(dataset, seed), pool))
}

/// What to show for `first_query_prompt`.
#[derive(Debug, Clone)]
pub struct PromptRequest {
    pub dataset: String,
    pub seed: u64,
    pub mode: Mode,
    pub proportion: f64,
    /// Use this set instead of drawing one from a classified pool.
    pub fewshot: Option<FewShotSet>,
    /// CICL only: the query's first-pass prediction. Computed with ICL when absent.
    pub query_predicted: Option<String>,
}

/// The exact prompt the runner sends for the first evaluation query of a cell.
///
/// Nothing is persisted; without a supplied few-shot set the pool is
/// classified and sampled in memory.
pub fn first_query_prompt(
    config: &RunConfig,
    backend: &dyn LabelScorer,
    req: &PromptRequest,
    workers: usize,
) -> Result<PromptSpec, SweepError> {
    let (p, _) = prepare_one(config, &req.dataset)?;
    let labels = p.pair.label_set();
    let query = p
        .eval
        .first()
        .ok_or_else(|| DataError::EmptyDataset(req.dataset.clone()))?;
    let workers = workers.max(1);
    let fewshot = match &req.fewshot {
        Some(f) => f.clone(),
        None => {
            let sel = |e: SelectionError| {
                let transport = matches!(&e, SelectionError::Backend { source, .. } if source.is_transport());
                SweepError::Selection {
                    message: e.to_string(),
                    transport,
                }
            };
            let examples = pool_examples(&p.pair, config.pool_size, req.seed);
            let pool = classify_pool(&examples, labels, backend, config.k, req.seed, workers).map_err(sel)?;
            let opts = SampleOptions {
                strict: config.strict_proportion,
                workers,
            };
            sample_fewshot(&pool, config.k, req.proportion, req.seed, labels, backend, opts).map_err(sel)?
        }
    };
    Ok(match req.mode {
        Mode::Icl => build_icl_prompt(fewshot.pairs(), &query.text, labels),
        Mode::Cicl => {
            let first = match &req.query_predicted {
                Some(l) => l.clone(),
                None => {
                    let icl = build_icl_prompt(fewshot.pairs(), &query.text, labels);
                    predict(&icl, backend, Some(&query.gold_label))?.0
                }
            };
            build_cicl_prompt(fewshot.triplets(), &query.text, &first, labels)
        }
    })
}

/// Runs a sweep against an already constructed backend.
pub fn run_sweep_with(
    config: &RunConfig,
    backend: &dyn LabelScorer,
    opts: &SweepOptions,
) -> Result<RunRecord, SweepError> {
    config.validate()?;
    let started = Instant::now();
    let started_unix = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let calls_before = backend.calls();
    let workers = opts.workers.max(1);

    let (prepared, digests) = prepare(config)?;
    let hash = config_hash(config, &digests);
    let run_dir = RunDir::new(config.out_dir.join(&hash));
    if !opts.resume && run_dir.root().exists() {
        fs::remove_dir_all(run_dir.root()).map_err(io_err(run_dir.root()))?;
    }

    let modes = config.ordered_modes();
    let mut expected = Vec::new();
    for p in &prepared {
        for &mode in &modes {
            for &proportion in &config.proportions {
                for &seed in &config.seeds {
                    expected.push(ExpectedCell {
                        key: CellKey {
                            dataset: p.name.clone(),
                            mode,
                            proportion,
                            seed,
                        },
                        queries: p.eval.len(),
                    });
                }
            }
        }
    }
    let manifest = Manifest {
        config_hash: hash.clone(),
        backend_id: backend.backend_id().to_string(),
        config: config.clone(),
        dataset_digests: digests,
        cells: expected,
    };
    run_dir
        .write_manifest(&manifest)
        .map_err(io_err(&run_dir.manifest_path()))?;

    let cell_opts = CellOptions {
        workers,
        error_budget: config.error_budget,
    };
    let mut executed = 0usize;
    let mut failures: Vec<CellFailure> = Vec::new();
    // Set after the first transport failure; later cells are not attempted.
    let unreachable = std::cell::Cell::new(false);
    let want_icl = config.wants(Mode::Icl);
    let want_cicl = config.wants(Mode::Cicl);

    for p in &prepared {
        let labels = p.pair.label_set();
        for &seed in &config.seeds {
            let mut pool: Option<Result<ClassifiedPool, (String, bool)>> = None;
            for &proportion in &config.proportions {
                let key = |mode| CellKey {
                    dataset: p.name.clone(),
                    mode,
                    proportion,
                    seed,
                };
                let icl_key = key(Mode::Icl);
                let cicl_key = key(Mode::Cicl);
                let icl_done = run_dir.cell_path(&icl_key).exists();
                let cicl_done = run_dir.cell_path(&cicl_key).exists();
                if (!want_icl || icl_done) && (!want_cicl || cicl_done) {
                    continue;
                }
                let requested: Vec<String> = [(want_icl && !icl_done, &icl_key), (want_cicl && !cicl_done, &cicl_key)]
                    .iter()
                    .filter(|(w, _)| *w)
                    .map(|(_, k)| k.to_string())
                    .collect();
                let mut fail = |message: String, transport: bool| {
                    unreachable.set(unreachable.get() || transport);
                    for cell in &requested {
                        log::error!("cell {cell} failed: {message}");
                        failures.push(CellFailure {
                            cell: cell.clone(),
                            message: message.clone(),
                            transport,
                        });
                    }
                };

                if unreachable.get() {
                    fail("skipped: backend unreachable".to_string(), true);
                    continue;
                }
                if pool.is_none() {
                    pool = Some(ensure_pool(&run_dir, p, labels, backend, config, seed, workers));
                }
                let pool_ref = match pool.as_ref().expect("pool initialised") {
                    Ok(pool) => pool,
                    Err((msg, transport)) => {
                        fail(msg.clone(), *transport);
                        continue;
                    }
                };
                let fewshot = match ensure_fewshot(
                    &run_dir, p, pool_ref, labels, backend, config, proportion, seed, workers,
                ) {
                    Ok(f) => f,
                    Err(e) => {
                        let transport = matches!(&e, SelectionError::Backend { source, .. } if source.is_transport());
                        fail(e.to_string(), transport);
                        continue;
                    }
                };
                let ctx = CellContext {
                    dataset: p.name.clone(),
                    backend: backend.backend_id().to_string(),
                    seed,
                    proportion,
                    k: config.k,
                };

                let icl_path = run_dir.cell_path(&icl_key);
                let icl_records = if icl_done {
                    match read_cell(&icl_path) {
                        Ok(r) => r,
                        Err(e) => {
                            fail(e.to_string(), false);
                            continue;
                        }
                    }
                } else {
                    if opts.cell_limit == Some(executed) {
                        return Err(SweepError::Interrupted { executed });
                    }
                    match run_icl_cell(&ctx, labels, backend, &fewshot, &p.eval, cell_opts) {
                        Ok(r) => {
                            write_atomic(&icl_path, cell_body(&r).as_bytes()).map_err(io_err(&icl_path))?;
                            executed += 1;
                            log::info!("{icl_key}: done");
                            r
                        }
                        Err(e) => {
                            fail(e.to_string(), e.is_transport());
                            continue;
                        }
                    }
                };

                if want_cicl && !cicl_done {
                    if opts.cell_limit == Some(executed) {
                        return Err(SweepError::Interrupted { executed });
                    }
                    let cicl_path = run_dir.cell_path(&cicl_key);
                    match run_cicl_cell(&ctx, labels, backend, &fewshot, &p.eval, &icl_records, cell_opts) {
                        Ok(r) => {
                            write_atomic(&cicl_path, cell_body(&r).as_bytes()).map_err(io_err(&cicl_path))?;
                            executed += 1;
                            log::info!("{cicl_key}: done");
                        }
                        Err(e) => {
                            unreachable.set(unreachable.get() || e.is_transport());
                            let cell = cicl_key.to_string();
                            log::error!("cell {cell} failed: {e}");
                            failures.push(CellFailure {
                                cell,
                                message: e.to_string(),
                                transport: e.is_transport(),
                            });
                        }
                    }
                }
            }
        }
    }

    if !failures.is_empty() {
        return Err(SweepError::Incomplete { failures });
    }
    let mut record = load_run_record(run_dir.root())?;
    record.metadata = Some(RunMetadata {
        started_unix,
        wall_seconds: started.elapsed().as_secs_f64(),
        backend_calls: backend.calls() - calls_before,
        executed_cells: executed,
    });
    Ok(record)
}

fn ensure_pool(
    run_dir: &RunDir,
    p: &Prepared,
    labels: &LabelSet,
    backend: &dyn LabelScorer,
    config: &RunConfig,
    seed: u64,
    workers: usize,
) -> Result<ClassifiedPool, (String, bool)> {
    let examples = pool_examples(&p.pair, config.pool_size, seed);
    let path = run_dir.pool_path(&p.name, seed);
    if let Ok(body) = fs::read_to_string(&path) {
        if let Ok(pool) = ClassifiedPool::from_jsonl(&body, &examples, backend.backend_id(), config.k) {
            return Ok(pool);
        }
        log::warn!("{}: unreadable pool file, reclassifying", path.display());
    }
    let pool = classify_pool(&examples, labels, backend, config.k, seed, workers).map_err(|e| {
        let transport = matches!(&e, SelectionError::Backend { source, .. } if source.is_transport());
        (e.to_string(), transport)
    })?;
    write_atomic(&path, pool.to_jsonl().as_bytes()).map_err(|e| (format!("{}: {e}", path.display()), false))?;
    log::info!(
        "{}/pool/{seed}: {} correct, {} incorrect",
        p.name,
        pool.correct_count(),
        pool.incorrect_count()
    );
    Ok(pool)
}

#[allow(clippy::too_many_arguments)]
fn ensure_fewshot(
    run_dir: &RunDir,
    p: &Prepared,
    pool: &ClassifiedPool,
    labels: &LabelSet,
    backend: &dyn LabelScorer,
    config: &RunConfig,
    proportion: f64,
    seed: u64,
    workers: usize,
) -> Result<FewShotSet, SelectionError> {
    let path = run_dir.fewshot_path(&p.name, proportion, seed);
    if let Ok(body) = fs::read_to_string(&path) {
        if let Ok(set) = serde_json::from_str::<FewShotSet>(&body) {
            return Ok(set);
        }
    }
    let opts = SampleOptions {
        strict: config.strict_proportion,
        workers,
    };
    let set = sample_fewshot(pool, config.k, proportion, seed, labels, backend, opts)?;
    if set.achieved_corrected != set.requested_corrected {
        log::warn!(
            "{}/{}/{seed}: requested {} corrected exemplars, leave-one-out gives {}",
            p.name,
            crate::datamodel::proportion_key(proportion),
            set.requested_corrected,
            set.achieved_corrected
        );
    }
    let body = serde_json::to_string_pretty(&set).expect("few-shot set serializes");
    if let Err(e) = write_atomic(&path, body.as_bytes()) {
        log::warn!("{}: {e}", path.display());
    }
    Ok(set)
}
