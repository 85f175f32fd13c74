//! Summary CSVs (`metric,value` rows) and the cross-run comparison table.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use mdc_core::train::{smooth, tail_variance};

use crate::config::fmt_f64;
use crate::run::{read_metrics, RunManifest, METRICS_FILE};

pub const SUMMARY_SUFFIX: &str = ".summary.csv";

/// Writes `metric,value` rows; refuses to overwrite unless `force`.
pub fn write_summary(path: &Path, rows: &[(String, f64)], force: bool) -> Result<()> {
    write_new(path, &summary_text(rows), force)
}

pub fn summary_text(rows: &[(String, f64)]) -> String {
    let mut s = String::from("metric,value\n");
    for (k, v) in rows {
        s.push_str(&format!("{k},{}\n", fmt_f64(*v)));
    }
    s
}

/// Writes `text` to `path`, refusing an existing file unless `force`.
pub fn write_new(path: &Path, text: &str, force: bool) -> Result<()> {
    if path.exists() && !force {
        bail!("{} exists; pass --force to overwrite", path.display());
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_summary(path: &Path) -> Result<Vec<(String, f64)>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    ensure!(lines.next() == Some("metric,value"), "{} is not a summary file", path.display());
    lines
        .map(|l| {
            let (k, v) = l.split_once(',').context("bad summary row")?;
            Ok((k.to_string(), v.parse()?))
        })
        .collect()
}

/// One row per run: identity columns plus every metric found in the run
/// directory (training-curve statistics and `*.summary.csv` files).
pub fn collect(run: &Path) -> Result<(RunManifest, BTreeMap<String, f64>)> {
    let manifest = RunManifest::read(run)?;
    let mut metrics = BTreeMap::new();
    if let Ok(log) = read_metrics(&run.join(METRICS_FILE)) {
        let losses: Vec<f64> = log.iter().map(|r| r.loss).collect();
        if let (Some(first), Some(last)) = (losses.first(), smooth(&losses, 0.02).last()) {
            metrics.insert("train.initial_loss".into(), *first);
            metrics.insert("train.smoothed_final_loss".into(), *last);
            metrics.insert("train.loss_var_last500".into(), tail_variance(&losses, 500));
            metrics.insert("train.steps".into(), losses.len() as f64);
        }
    }
    let mut entries: Vec<_> = fs::read_dir(run)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let name = e.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix(SUMMARY_SUFFIX) {
            for (k, v) in read_summary(&e.path())? {
                metrics.insert(format!("{stem}.{k}"), v);
            }
        }
    }
    Ok((manifest, metrics))
}

/// Long-format CSV (`run,objective,seed,config_hash,metric,value`) over
/// all runs.
pub fn merge(runs: &[&Path]) -> Result<String> {
    let mut s = String::from("run,objective,seed,config_hash,metric,value\n");
    for run in runs {
        let (m, metrics) = collect(run)?;
        let name = run.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        for (k, v) in metrics {
            s.push_str(&format!("{name},{},{},{},{k},{}\n", m.objective, m.master_seed, m.config_hash, fmt_f64(v)));
        }
    }
    Ok(s)
}

/// Objective-by-metric table of means over seeds, as aligned text.
pub fn table(runs: &[&Path]) -> Result<String> {
    let mut cells: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    let mut metrics = std::collections::BTreeSet::new();
    for run in runs {
        let (m, vals) = collect(run)?;
        for (k, v) in vals {
            metrics.insert(k.clone());
            cells.entry((m.objective.clone(), k)).or_default().push(v);
        }
    }
    let objectives: std::collections::BTreeSet<String> = cells.keys().map(|k| k.0.clone()).collect();
    let mut out = format!("{:<34}", "metric (mean over runs)");
    for o in &objectives {
        out.push_str(&format!(" {o:>14}"));
    }
    out.push('\n');
    for k in &metrics {
        out.push_str(&format!("{k:<34}"));
        for o in &objectives {
            match cells.get(&(o.clone(), k.clone())) {
                Some(v) => out.push_str(&format!(" {:>14.4}", v.iter().sum::<f64>() / v.len() as f64)),
                None => out.push_str(&format!(" {:>14}", "-")),
            }
        }
        out.push('\n');
    }
    Ok(out)
}
