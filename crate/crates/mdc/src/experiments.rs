//! Memoised corpora and training runs for the comparison experiments.
//! A run is reused when its directory (named by config hash) holds a
//! completed manifest and a final checkpoint.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use mdc_core::model::ModelParams;
use mdc_core::synth::vocabulary;
use mdc_core::train::{Objective, StepRecord};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::corpus::{read_corpus, write_corpus, Corpus};
use crate::run::{read_metrics, run_dir, train_run, RunManifest, FINAL_CKPT, METRICS_FILE};

pub fn experiments_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../experiments")
}

/// Reads `experiments/<name>.cfg`.
pub fn load_config(name: &str) -> Result<RunConfig> {
    let path = experiments_dir().join(format!("{name}.cfg"));
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    RunConfig::parse(&text, vocabulary().size())
}

/// The shared sweep config with objective, window and seed replaced.
pub fn sweep_variant(base: &RunConfig, objective: Objective, window: (f64, f64), seed: u64) -> RunConfig {
    let mut cfg = RunConfig::new(objective, base.preset, base.train.model.decoder.vocab);
    let model = cfg.train.model.clone();
    cfg.train = base.train.clone();
    cfg.train.objective = objective;
    cfg.train.model = model;
    cfg.train.window_lower = window.0;
    cfg.train.window_upper = window.1;
    cfg.train.seed = seed;
    cfg
}

/// Generates `count` records for `seed` under `root` unless already there.
pub fn ensure_corpus(root: &Path, count: usize, seed: u64) -> Result<Corpus> {
    let dir = root.join(format!("corpus-{count}-seed{seed}"));
    if let Ok(c) = read_corpus(&dir) {
        if c.manifest.count == count && c.manifest.master_seed == seed {
            return Ok(c);
        }
    }
    write_corpus(&dir, count, seed, true)?;
    read_corpus(&dir)
}

pub struct TrainedRun {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub params: ModelParams<f64>,
    pub log: Vec<StepRecord>,
    pub reused: bool,
}

/// Trains `cfg` on `corpus` under `root`, or reuses a completed run.
pub fn ensure_run(root: &Path, cfg: &RunConfig, corpus: &Corpus) -> Result<TrainedRun> {
    let dir = run_dir(root, cfg);
    let done = RunManifest::read(&dir)
        .map(|m| m.status == "complete" && m.config_hash == cfg.hash() && m.corpus_seed == corpus.manifest.master_seed && m.corpus_count == corpus.manifest.count)
        .unwrap_or(false)
        && dir.join(FINAL_CKPT).exists();
    let reused = done;
    if !done {
        train_run(cfg, corpus, &dir, true)?;
    }
    let manifest = RunManifest::read(&dir)?;
    let (_, params) = checkpoint::load_params_f64(&dir.join(FINAL_CKPT))?;
    let log = read_metrics(&dir.join(METRICS_FILE))?;
    Ok(TrainedRun {
        dir,
        manifest,
        params,
        log,
        reused,
    })
}
