use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use clap::{Parser, Subcommand};
use mdc_core::eval::{caption_metrics, compositionality_eval, probe_records, ProbeConfig};
use mdc_core::inference::{generate_with, score, ModelDenoiser, ScoreMethod, DEFAULT_MC_SAMPLES};
use mdc_core::model::{AttentionMode, ModelParams};
use mdc_core::rng::{stream_rng, Stream};
use mdc_core::synth::NegativeKind;
use mdc_core::vocab::{content_len, MASK};

use mdc::checkpoint::{self, Header};
use mdc::config::{fmt_f64, RunConfig};
use mdc::corpus::{read_corpus, write_corpus, Corpus};
use mdc::report::{self, write_new, write_summary};
use mdc::run::{resume_run, train_run};

#[derive(Parser)]
#[command(name = "mdc", version, about = "Masked diffusion captioning on a synthetic shapes corpus")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a corpus directory.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        force: bool,
    },
    /// Train a model from a key=value config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        /// Continue the run in --out from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate captions for the first --num images by confidence-ordered unmasking.
    Sample {
        #[command(flatten)]
        io: CkptArgs,
        #[arg(long)]
        length: usize,
        #[arg(long, default_value_t = 10)]
        num: usize,
    },
    /// Score the true captions of the first --num records.
    Score {
        #[command(flatten)]
        io: CkptArgs,
        #[arg(long)]
        method: String,
        #[arg(long, default_value_t = DEFAULT_MC_SAMPLES)]
        samples: usize,
        #[arg(long, default_value_t = 20)]
        num: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Linear probe on frozen pooled encoder features.
    Probe {
        #[command(flatten)]
        io: CkptArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// True-versus-negative caption matching per negative type.
    EvalComp {
        #[command(flatten)]
        io: CkptArgs,
        #[arg(long)]
        method: String,
        #[arg(long, default_value_t = DEFAULT_MC_SAMPLES)]
        samples: usize,
        #[arg(long, default_value_t = 500)]
        num: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference check of every primitive and the full training loss.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Merge run directories into one comparison table.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        /// Also write the merged long-format CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
}

#[derive(clap::Args)]
struct CkptArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output directory; defaults to the checkpoint's directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

impl CkptArgs {
    fn out_dir(&self) -> PathBuf {
        self.out
            .clone()
            .unwrap_or_else(|| self.ckpt.parent().map(Path::to_path_buf).unwrap_or_default())
    }

    /// Loads the checkpoint and corpus, refusing a vocabulary mismatch.
    fn load(&self) -> Result<(Header, ModelParams<f64>, Corpus)> {
        let (header, params) = checkpoint::load_params_f64(&self.ckpt)?;
        let corpus = read_corpus(&self.data)?;
        if header.vocab_hash != corpus.manifest.vocab_hash {
            bail!(
                "checkpoint vocabulary hash {} does not match corpus vocabulary hash {}",
                header.vocab_hash,
                corpus.manifest.vocab_hash
            );
        }
        Ok((header, params, corpus))
    }
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::GenData { out, count, seed, force } => {
            let m = write_corpus(&out, count, seed, force)?;
            println!("wrote {} records to {} (sha256 {})", m.count, out.display(), m.corpus_sha256);
        }
        Cmd::Train {
            config,
            data,
            out,
            force,
            resume,
        } => {
            let corpus = read_corpus(&data)?;
            let text = std::fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let cfg = RunConfig::parse(&text, corpus.vocab.size())?;
            let m = match resume {
                Some(ckpt) => resume_run(&cfg, &corpus, &out, &ckpt)?,
                None => train_run(&cfg, &corpus, &out, force)?,
            };
            println!("run {} ({}) complete in {}", m.config_hash, m.objective, out.display());
        }
        Cmd::Sample { io, length, num } => sample(&io, length, num)?,
        Cmd::Score {
            io,
            method,
            samples,
            num,
            seed,
        } => score_cmd(&io, ScoreMethod::parse(&method)?, samples, num, seed)?,
        Cmd::Probe { io, seed } => {
            let (_, params, corpus) = io.load()?;
            let cfg = ProbeConfig { seed, ..ProbeConfig::default() };
            let r = probe_records(&params, &corpus.records, &cfg)?;
            let rows = vec![
                ("test_accuracy".to_string(), r.test_accuracy),
                ("train_accuracy".to_string(), r.train_accuracy),
            ];
            write_summary(&io.out_dir().join("probe.summary.csv"), &rows, io.force)?;
            println!("probe accuracy {} (train {})", fmt_f64(r.test_accuracy), fmt_f64(r.train_accuracy));
        }
        Cmd::EvalComp {
            io,
            method,
            samples,
            num,
            seed,
        } => {
            let method = ScoreMethod::parse(&method)?;
            let (_, params, corpus) = io.load()?;
            check_mode(&params, method)?;
            let recs = &corpus.records[..num.min(corpus.records.len())];
            let rep = compositionality_eval(&params, recs, &NegativeKind::ALL, method, samples, seed)?;
            let mut rows = Vec::new();
            for (kind, (c, n)) in rep.per_kind() {
                rows.push((format!("{}_accuracy", kind.name()), c as f64 / n as f64));
                rows.push((format!("{}_pairs", kind.name()), n as f64));
                println!("{:<8} {c}/{n} = {}", kind.name(), fmt_f64(c as f64 / n as f64));
            }
            let stem = format!("comp-{}", method.name());
            write_summary(&io.out_dir().join(format!("{stem}.summary.csv")), &rows, io.force)?;
            let mut csv = String::from("record,negative,true_score,negative_score,correct\n");
            for d in &rep.decisions {
                csv.push_str(&format!(
                    "{},{},{},{},{}\n",
                    d.record,
                    d.kind.name(),
                    fmt_f64(d.true_score),
                    fmt_f64(d.negative_score),
                    u8::from(d.correct)
                ));
            }
            write_new(&io.out_dir().join(format!("{stem}.decisions.csv")), &csv, io.force)?;
        }
        Cmd::Gradcheck { seeds } => {
            let results = mdc_core::gradsuite::run_suite(seeds)?;
            let mut worst = 0.0f64;
            for (name, err) in &results {
                println!("{name:<26} {err:.3e}");
                worst = worst.max(*err);
            }
            println!("worst relative error {worst:.3e}");
            ensure!(worst < 1e-4, "gradcheck failed: worst relative error {worst:e} >= 1e-4");
        }
        Cmd::Report { runs, out, force } => {
            let refs: Vec<&Path> = runs.iter().map(PathBuf::as_path).collect();
            print!("{}", report::table(&refs)?);
            if let Some(out) = out {
                write_new(&out, &report::merge(&refs)?, force)?;
            }
        }
    }
    Ok(())
}

fn check_mode(params: &ModelParams<f64>, method: ScoreMethod) -> Result<()> {
    let mode = params.config().decoder.mode;
    let needs = match method {
        ScoreMethod::Arc => AttentionMode::Causal,
        _ => AttentionMode::Bidirectional,
    };
    ensure!(
        mode == needs,
        "method {} needs a {} model but the checkpoint is {}",
        method.name(),
        needs.name(),
        mode.name()
    );
    Ok(())
}

fn sample(io: &CkptArgs, length: usize, num: usize) -> Result<()> {
    let (_, params, corpus) = io.load()?;
    check_mode(&params, ScoreMethod::Heuristic)?;
    let mut csv = String::from("record,caption_ids,caption,exact,token_f1\n");
    for (i, rec) in corpus.records.iter().take(num).enumerate() {
        let image = rec.image()?;
        let mut model = ModelDenoiser::new(&params, &image)?;
        let mut prev: Option<Vec<u32>> = None;
        let mut violation = None;
        let caption = generate_with(&mut model, length, |st| {
            let masks = st.tokens.iter().filter(|&&t| t == MASK).count();
            if masks != length - st.step {
                violation = Some(format!("step {}: {masks} masks remain", st.step));
            }
            if let Some(p) = &prev {
                if p.iter().zip(&st.tokens).any(|(a, b)| *a != MASK && a != b) {
                    violation = Some(format!("step {}: a revealed token changed", st.step));
                }
            }
            prev = Some(st.tokens.clone());
        })?;
        if let Some(v) = violation {
            bail!("record {i}: decoding invariant violated at {v}");
        }
        ensure!(caption.len() == length && !caption.contains(&MASK), "record {i}: malformed caption");
        let reference = &rec.caption[..content_len(&rec.caption)];
        let m = caption_metrics(&caption, reference)?;
        let ids: Vec<String> = caption.iter().map(|t| t.to_string()).collect();
        csv.push_str(&format!(
            "{i},{},{},{},{}\n",
            ids.join(" "),
            corpus.vocab.decode(&caption),
            u8::from(m.exact),
            fmt_f64(m.token_f1)
        ));
        println!("{i}: {}", corpus.vocab.decode(&caption));
    }
    write_new(&io.out_dir().join("samples.csv"), &csv, io.force)
}

fn score_cmd(io: &CkptArgs, method: ScoreMethod, samples: usize, num: usize, seed: u64) -> Result<()> {
    let (_, params, corpus) = io.load()?;
    check_mode(&params, method)?;
    let mut csv = String::from("pair,method,value,samples,std_error,elapsed_ms\n");
    for (i, rec) in corpus.records.iter().take(num).enumerate() {
        let image = rec.image()?;
        let mut model = ModelDenoiser::new(&params, &image)?;
        let mut rng = stream_rng(seed, Stream::MonteCarlo, i as u64);
        let t0 = Instant::now();
        let r = score(&mut model, &rec.caption, method, samples, &mut rng).with_context(|| format!("scoring pair {i}"))?;
        ensure!(r.value.is_finite(), "pair {i}: non-finite score");
        csv.push_str(&format!(
            "{i},{},{},{},{},{}\n",
            method.name(),
            fmt_f64(r.value),
            r.samples,
            fmt_f64(r.std_error),
            t0.elapsed().as_millis()
        ));
    }
    write_new(&io.out_dir().join(format!("score-{}.csv", method.name())), &csv, io.force)?;
    print!("{csv}");
    Ok(())
}
