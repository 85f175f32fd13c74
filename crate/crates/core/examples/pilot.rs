//! Pilot run used to pick the experiment budget and pin acceptance thresholds.
//! Usage: pilot <objective> <steps> <lr> <batch> [seed] [window_lower]
use mdc_core::eval::*;
use mdc_core::inference::ScoreMethod;
use mdc_core::model::{AttentionMode, Image, ModelConfig};
use mdc_core::synth::{generate_corpus, vocabulary, NegativeKind};
use mdc_core::train::*;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let obj = Objective::parse(&args[1]).unwrap();
    let steps: u64 = args[2].parse().unwrap();
    let lr: f64 = args[3].parse().unwrap();
    let batch: usize = args[4].parse().unwrap();
    let seed: u64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(0);
    let lo: f64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(0.5);
    let vocab = vocabulary();
    let recs = generate_corpus(1, 2000, &vocab);
    let held = generate_corpus(2, 500, &vocab);
    let data = Dataset {
        images: recs.iter().map(|r| r.image().unwrap()).collect(),
        captions: recs.iter().map(|r| r.caption.clone()).collect(),
    };
    let mut cfg = TrainConfig::new(obj, ModelConfig::compact(vocab.size(), obj.mode()));
    cfg.batch_size = batch;
    cfg.steps = steps;
    cfg.warmup = steps / 20;
    cfg.lr = lr;
    cfg.seed = seed;
    cfg.window_lower = lo;
    let mut st = TrainState::<f32>::init(&cfg).unwrap();
    let t0 = Instant::now();
    let log = train(&mut st, &cfg, &data, |_, r| {
        if r.step % 500 == 0 {
            eprintln!("{} {:.4} {:?}", r.step, r.loss, t0.elapsed());
        }
        Ok(())
    })
    .unwrap();
    let losses: Vec<f64> = log.iter().map(|r| r.loss).collect();
    println!(
        "train {:?} tailvar {:.5}",
        t0.elapsed(),
        tail_variance(&losses, 200)
    );
    let himg: Vec<Image> = held.iter().map(|r| r.image().unwrap()).collect();
    let hi: Vec<&Image> = himg.iter().collect();
    let hc: Vec<&[u32]> = held.iter().map(|r| r.caption.as_slice()).collect();
    if obj.mode() == AttentionMode::Bidirectional {
        for vis in [true, false] {
            let m = masked_accuracy(&st.params, &hi, &hc, &[0.15, 0.5, 0.75, 1.0], vis, 9).unwrap();
            println!(
                "masked vis={vis} {:?}",
                m.iter().map(|a| (a.t, a.accuracy())).collect::<Vec<_>>()
            );
        }
    }
    let p = probe_records(&st.params, &recs, &ProbeConfig::default()).unwrap();
    println!("probe {:?}", p);
    let t1 = Instant::now();
    let method = if obj.mode() == AttentionMode::Causal {
        ScoreMethod::Arc
    } else {
        ScoreMethod::Heuristic
    };
    let c = compositionality_eval(&st.params, &held, &NegativeKind::ALL, method, 0, 0).unwrap();
    println!("comp {:?} {:?}", c.per_kind(), t1.elapsed());
}
