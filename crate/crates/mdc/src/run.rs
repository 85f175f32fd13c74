//! Training runs on disk: manifest, config, metrics, timing, checkpoints.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, ensure, Context, Result};
use mdc_core::model::Image;
use mdc_core::train::{train, Dataset, Precision, StepRecord, TrainState};
use mdc_core::Scalar;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{fmt_f64, RunConfig};
use crate::corpus::{non_empty_dir, vocab_hash, Corpus};

pub const RUN_MANIFEST: &str = "run.json";
pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const FINAL_CKPT: &str = "final.ckpt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub code_version: String,
    pub objective: String,
    pub master_seed: u64,
    pub corpus_seed: u64,
    pub corpus_count: usize,
    pub vocab_hash: String,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub status: String,
    pub artifacts: Vec<String>,
}

impl RunManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(RUN_MANIFEST)).with_context(|| format!("reading run manifest in {}", dir.display()))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        fs::write(dir.join(RUN_MANIFEST), json)?;
        Ok(())
    }
}

pub fn code_version() -> String {
    format!("mdc-{}", env!("CARGO_PKG_VERSION"))
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn dataset(corpus: &Corpus) -> Result<Dataset> {
    Ok(Dataset {
        images: corpus.records.iter().map(|r| r.image()).collect::<mdc_core::Result<Vec<Image>>>()?,
        captions: corpus.records.iter().map(|r| r.caption.clone()).collect(),
    })
}

pub fn checkpoint_name(step: u64) -> String {
    format!("step_{step:07}.ckpt")
}

pub fn metrics_header() -> &'static str {
    "step,lr,loss\n"
}

pub fn metrics_row(r: &StepRecord) -> String {
    format!("{},{},{}\n", r.step, fmt_f64(r.lr), fmt_f64(r.loss))
}

/// Parses `metrics.csv` back into step records.
pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    ensure!(lines.next() == Some(metrics_header().trim_end()), "unexpected metrics header");
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            ensure!(f.len() == 3, "bad metrics row {l:?}");
            Ok(StepRecord {
                step: f[0].parse()?,
                lr: f[1].parse()?,
                loss: f[2].parse()?,
            })
        })
        .collect()
}

/// Trains per `cfg` on `corpus`, writing everything under `out`. Refuses a
/// non-empty `out` unless `force`. The manifest is written before the
/// first step and completed at the end.
pub fn train_run(cfg: &RunConfig, corpus: &Corpus, out: &Path, force: bool) -> Result<RunManifest> {
    if non_empty_dir(out) {
        if !force {
            bail!("{} is not empty; pass --force to overwrite", out.display());
        }
        fs::remove_dir_all(out)?;
    }
    fs::create_dir_all(out)?;
    ensure!(
        cfg.train.model.decoder.vocab == corpus.vocab.size(),
        "config vocabulary size {} does not match the corpus ({})",
        cfg.train.model.decoder.vocab,
        corpus.vocab.size()
    );
    let mut manifest = RunManifest {
        config_hash: cfg.hash(),
        code_version: code_version(),
        objective: cfg.train.objective.label(),
        master_seed: cfg.train.seed,
        corpus_seed: corpus.manifest.master_seed,
        corpus_count: corpus.manifest.count,
        vocab_hash: vocab_hash(&corpus.vocab),
        started_unix: unix_now(),
        finished_unix: None,
        status: "running".into(),
        artifacts: vec![CONFIG_FILE.into(), METRICS_FILE.into(), TIMING_FILE.into(), FINAL_CKPT.into()],
    };
    if cfg.train.checkpoint_every > 0 {
        let every = cfg.train.checkpoint_every;
        manifest
            .artifacts
            .extend((1..=cfg.train.steps / every).map(|k| checkpoint_name(k * every)));
    }
    manifest.write(out)?;
    fs::write(out.join(CONFIG_FILE), cfg.to_text())?;
    let data = dataset(corpus)?;
    match cfg.train.precision {
        Precision::F32 => run_loop::<f32>(cfg, &data, out, &manifest, None)?,
        Precision::F64 => run_loop::<f64>(cfg, &data, out, &manifest, None)?,
    }
    manifest.finished_unix = Some(unix_now());
    manifest.status = "complete".into();
    manifest.write(out)?;
    Ok(manifest)
}

/// Continues the run in `out` from checkpoint `ckpt` to `cfg.train.steps`,
/// appending to the metrics log.
pub fn resume_run(cfg: &RunConfig, corpus: &Corpus, out: &Path, ckpt: &Path) -> Result<RunManifest> {
    let mut manifest = RunManifest::read(out)?;
    ensure!(
        manifest.config_hash == cfg.hash(),
        "config hash {} does not match the run's {}",
        cfg.hash(),
        manifest.config_hash
    );
    let data = dataset(corpus)?;
    match cfg.train.precision {
        Precision::F32 => run_loop::<f32>(cfg, &data, out, &manifest, Some(ckpt))?,
        Precision::F64 => run_loop::<f64>(cfg, &data, out, &manifest, Some(ckpt))?,
    }
    manifest.finished_unix = Some(unix_now());
    manifest.status = "complete".into();
    manifest.write(out)?;
    Ok(manifest)
}

fn run_loop<T: Scalar>(cfg: &RunConfig, data: &Dataset, out: &Path, manifest: &RunManifest, resume: Option<&Path>) -> Result<()> {
    let mut state = match resume {
        Some(path) => {
            let (header, state) = checkpoint::load::<T>(path)?;
            ensure!(
                header.config_hash == manifest.config_hash,
                "checkpoint config hash {} does not match run config hash {}",
                header.config_hash,
                manifest.config_hash
            );
            state
        }
        None => TrainState::<T>::init(&cfg.train)?,
    };
    let mut metrics = open_log(&out.join(METRICS_FILE), metrics_header(), state.step)?;
    let mut timing = open_log(&out.join(TIMING_FILE), "step,wall_clock_s\n", state.step)?;
    let start = Instant::now();
    let every = cfg.train.checkpoint_every;
    train(&mut state, &cfg.train, data, |st, rec| {
        let io = |e: std::io::Error| mdc_core::Error::InvalidInput(format!("writing logs: {e}"));
        metrics.write_all(metrics_row(rec).as_bytes()).map_err(io)?;
        writeln!(timing, "{},{}", rec.step, fmt_f64(start.elapsed().as_secs_f64())).map_err(io)?;
        if every > 0 && st.step % every == 0 {
            checkpoint::save(&out.join(checkpoint_name(st.step)), st, &manifest.vocab_hash, &manifest.config_hash)
                .map_err(|e| mdc_core::Error::InvalidInput(format!("{e:#}")))?;
        }
        Ok(())
    })?;
    metrics.flush()?;
    timing.flush()?;
    checkpoint::save(&out.join(FINAL_CKPT), &state, &manifest.vocab_hash, &manifest.config_hash)
}

/// Opens a CSV log for appending, keeping only rows with step below
/// `keep_before` (so a resumed run rewrites nothing twice).
fn open_log(path: &Path, header: &str, keep_before: u64) -> Result<std::io::BufWriter<fs::File>> {
    let mut kept = String::from(header);
    if keep_before > 0 {
        if let Ok(text) = fs::read_to_string(path) {
            for l in text.lines().skip(1) {
                let step: u64 = l.split(',').next().unwrap_or("").parse().unwrap_or(u64::MAX);
                if step < keep_before {
                    kept.push_str(l);
                    kept.push('\n');
                }
            }
        }
    }
    fs::write(path, kept)?;
    Ok(std::io::BufWriter::new(fs::OpenOptions::new().append(true).open(path)?))
}

/// Path of a run directory for `cfg` under `root`, named by config hash.
pub fn run_dir(root: &Path, cfg: &RunConfig) -> PathBuf {
    root.join(format!("{}-{}", cfg.train.objective.label().replace(':', "_"), cfg.hash()))
}
