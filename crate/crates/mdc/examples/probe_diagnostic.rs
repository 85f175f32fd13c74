//! Compares the pooled-feature probe with a probe on the full patch grid,
//! for random encoders and for the cached acceptance sweep runs.
//! Usage: probe_diagnostic <acceptance root>

use std::path::PathBuf;

use anyhow::Result;
use mdc::experiments::{ensure_corpus, ensure_run, load_config, sweep_variant};
use mdc_core::eval::{gap_features, linear_probe, ProbeConfig};
use mdc_core::model::{encode, AttentionMode, Image, ModelConfig, ModelParams};
use mdc_core::rng::{stream_rng, Stream};
use mdc_core::synth::{vocabulary, Record, NUM_CLASSES};
use mdc_core::train::Objective;

fn probes(params: &ModelParams<f64>, records: &[Record]) -> Result<(f64, f64)> {
    let images = records.iter().map(|r| r.image()).collect::<mdc_core::Result<Vec<Image>>>()?;
    let refs: Vec<&Image> = images.iter().collect();
    let labels: Vec<u32> = records.iter().map(|r| r.label).collect();
    let cfg = ProbeConfig::default();
    let gap = linear_probe(&gap_features(params, &refs)?, &labels, NUM_CLASSES, &cfg)?;
    let flat: Vec<Vec<f64>> = images
        .iter()
        .map(|img| encode(img, params).map(|v| v.features.data().to_vec()))
        .collect::<mdc_core::Result<_>>()?;
    let full = linear_probe(&flat, &labels, NUM_CLASSES, &cfg)?;
    Ok((gap.test_accuracy, full.test_accuracy))
}

fn main() -> Result<()> {
    let root = PathBuf::from(std::env::args().nth(1).expect("acceptance root"));
    let corpus = ensure_corpus(&root, 2000, 1)?;
    let vocab = vocabulary();
    println!("model,seed,gap_probe,patch_grid_probe");
    for seed in 0..3 {
        let cfg = ModelConfig::compact(vocab.size(), AttentionMode::Bidirectional);
        let p = ModelParams::init(&cfg, &mut stream_rng(seed, Stream::Init, 0))?;
        let (g, f) = probes(&p, &corpus.records)?;
        println!("random,{seed},{g:.4},{f:.4}");
    }
    let default = ensure_run(&root.join("runs"), &load_config("default")?, &corpus)?;
    let (g, f) = probes(&default.params, &corpus.records)?;
    println!("mdc-default-5000,0,{g:.4},{f:.4}");
    let sweep = load_config("sweep")?;
    for objective in [Objective::Mdc, Objective::Bert(0.15), Objective::Parallel, Objective::Cmlm] {
        for seed in 0..3 {
            let cfg = sweep_variant(&sweep, objective, (0.5, 1.0), seed);
            let run = ensure_run(&root.join("runs"), &cfg, &corpus)?;
            let (g, f) = probes(&run.params, &corpus.records)?;
            println!("{objective},{seed},{g:.4},{f:.4}");
        }
    }
    Ok(())
}
