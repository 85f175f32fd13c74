use std::path::Path;
use std::process::{Command, Output};

fn mdc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mdc")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = mdc(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn fails(args: &[&str]) -> String {
    let out = mdc(args);
    assert!(!out.status.success(), "{args:?} should fail");
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn end_to_end_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let other = dir.path().join("other");
    ok(&["gen-data", "--out", s(&data), "--count", "48", "--seed", "1"]);
    assert!(fails(&["gen-data", "--out", s(&data), "--count", "48", "--seed", "1"]).contains("--force"));

    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "model = compact\nbatch_size = 4\nsteps = 8\nwarmup = 2\ncheckpoint_every = 4\n").unwrap();
    let run = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]);
    let ckpt = run.join("final.ckpt");
    assert!(ckpt.exists());

    ok(&["sample", "--ckpt", s(&ckpt), "--data", s(&data), "--length", "4", "--num", "3"]);
    assert_eq!(std::fs::read_to_string(run.join("samples.csv")).unwrap().lines().count(), 4);
    assert!(fails(&["sample", "--ckpt", s(&ckpt), "--data", s(&data), "--length", "4", "--num", "3"]).contains("exists"));

    let err = fails(&["score", "--ckpt", s(&ckpt), "--data", s(&data), "--method", "elbo_exact", "--num", "4"]);
    assert!(err.contains("capped at N <= 10"), "{err}");
    for method in ["elbo_mc", "heuristic"] {
        ok(&["score", "--ckpt", s(&ckpt), "--data", s(&data), "--method", method, "--samples", "16", "--num", "4"]);
        assert!(run.join(format!("score-{method}.csv")).exists());
    }
    // A bidirectional checkpoint cannot be scored autoregressively.
    fails(&["score", "--ckpt", s(&ckpt), "--data", s(&data), "--method", "arc", "--num", "2"]);
    fails(&["score", "--ckpt", s(&ckpt), "--data", s(&data), "--method", "bogus", "--num", "2"]);

    ok(&["probe", "--ckpt", s(&ckpt), "--data", s(&data)]);
    ok(&["eval-comp", "--ckpt", s(&ckpt), "--data", s(&data), "--method", "heuristic", "--num", "6"]);
    assert!(run.join("comp-heuristic.summary.csv").exists());
    let table = ok(&["report", "--runs", s(&run)]);
    assert!(table.contains("mdc"));

    // Resume from the mid-run checkpoint reproduces the uninterrupted log.
    let resumed = dir.path().join("resumed");
    std::fs::create_dir(&resumed).unwrap();
    for f in ["run.json", "config.txt", "metrics.csv", "timing.csv", "step_0000004.ckpt"] {
        std::fs::copy(run.join(f), resumed.join(f)).unwrap();
    }
    let mid = resumed.join("step_0000004.ckpt");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&resumed), "--resume", s(&mid)]);
    assert_eq!(
        std::fs::read(run.join("metrics.csv")).unwrap(),
        std::fs::read(resumed.join("metrics.csv")).unwrap()
    );

    // Vocabulary mismatch is refused with both hashes shown.
    ok(&["gen-data", "--out", s(&other), "--count", "4", "--seed", "2"]);
    std::fs::write(other.join("vocab.txt"), "<pad>\n").unwrap();
    fails(&["probe", "--ckpt", s(&ckpt), "--data", s(&other), "--out", s(&dir.path().join("x"))]);
}

#[test]
fn bad_inputs_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "objective = diffusion\n").unwrap();
    let data = dir.path().join("data");
    ok(&["gen-data", "--out", s(&data), "--count", "2", "--seed", "0"]);
    let err = fails(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&dir.path().join("r"))]);
    assert!(err.contains("mdc | arc"), "{err}");
    fails(&["sample", "--ckpt", s(&dir.path().join("missing.ckpt")), "--data", s(&data), "--length", "3"]);
}

#[test]
fn gradcheck_command_passes() {
    let out = ok(&["gradcheck", "--seeds", "2"]);
    assert!(out.contains("layer_norm"));
}
