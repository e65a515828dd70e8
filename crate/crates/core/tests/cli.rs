use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cmsf(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmsf")).args(args).current_dir(cwd).env_remove("CMSF_THREADS").output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = "gen_classes = 4\ngen_per_class = 30\ngen_dim = 6\nepochs = 2\nbatch_size = 16\nbank_capacity = 32\nhidden = 12\nembed = 6\npredictor_hidden = 12\n";

#[test]
fn pipeline_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = cmsf(&["gen-data", "--classes", "4", "--per-class", "30", "--dim", "6", "--seed", "1", "-o", "data.cmsf"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    fs::write(d.join("run.cfg"), format!("{SMALL}mode = self\ndata = data.cmsf\ncheckpoint_every = 1\n")).unwrap();

    let o = cmsf(&["train", "--config", "run.cfg", "--out", "run"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = fs::read_to_string(d.join("run/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    for line in metrics.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["loss_total"].is_f64());
    }
    for f in ["config.snapshot", "checkpoints/epoch-0001.ckpt", "checkpoints/final.ckpt", "reports/eval.json"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(report["nn1_acc"].as_f64().is_some_and(|a| (0.0..=1.0).contains(&a)));

    let o = cmsf(&["eval", "--run", "run", "--linear"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["linear_acc"].is_f64());
    assert!(d.join("run/reports/eval-final.json").exists());

    let o = cmsf(&["analyze", "--run", "run", "--checkpoint", "run/checkpoints/epoch-0001.ckpt", "--probes", "16"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(d.join("run/reports/diagnostics-epoch-0001.json").exists());
    let csv = fs::read_to_string(d.join("run/reports/rank-hist-epoch-0001.csv")).unwrap();
    assert!(csv.lines().count() > 1);
}

#[test]
fn snapshot_replays_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("run.cfg"), format!("{SMALL}mode = sup\n")).unwrap();
    let o = cmsf(&["train", "--config", "run.cfg", "--out", "first", "--seed", "3", "--set", "lr=0.07"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let snap = fs::read_to_string(d.join("first/config.snapshot")).unwrap();
    assert!(snap.contains("seed = 3\n") && snap.contains("lr = 0.07\n") && snap.contains("mode = sup\n"));
    // flags beat the file, the file beats the defaults
    assert!(snap.contains("epochs = 2\n"));

    let o = cmsf(&["train", "--config", "first/config.snapshot", "--out", "second"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(d.join("first/metrics.jsonl")).unwrap(), fs::read(d.join("second/metrics.jsonl")).unwrap());
}

#[test]
fn baselines_train() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("run.cfg"), SMALL).unwrap();
    for mode in ["msf", "byol", "xent", "semi-basic", "cross"] {
        let o = cmsf(&["train", "--config", "run.cfg", "--mode", mode, "--out", mode], d);
        assert!(o.status.success(), "{mode}: {}", stderr(&o));
        assert!(d.join(mode).join("checkpoints/final.ckpt").exists(), "{mode}");
        assert!(fs::read_to_string(d.join(mode).join("metrics.jsonl")).unwrap().lines().count() >= 1);
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(cmsf(&["frobnicate"], d).status.code(), Some(2));
    assert_eq!(cmsf(&["train", "--mode", "simclr", "--out", "x"], d).status.code(), Some(2));
    assert_eq!(cmsf(&["train", "--set", "bogus=1", "--out", "x"], d).status.code(), Some(2));
    assert_eq!(cmsf(&["flops", "--unl-fwd", "2"], d).status.code(), Some(2));

    let o = cmsf(&["train", "--data", "missing.cmsf", "--out", "x"], d);
    assert_eq!(o.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_str(stderr(&o).trim()).unwrap();
    assert_eq!(err["error"]["kind"], "io_error");

    let o = cmsf(&["train", "--set", "batch_size=0", "--out", "y"], d);
    assert_eq!(o.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_str(stderr(&o).trim()).unwrap();
    assert_eq!(err["error"]["kind"], "bad_config");

    assert_eq!(cmsf(&["--help"], d).status.code(), Some(0));
}

#[test]
fn threads_env_fallback_and_flag_agree() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("run.cfg"), format!("{SMALL}mode = self\n")).unwrap();
    let via_env = Command::new(env!("CARGO_BIN_EXE_cmsf"))
        .args(["train", "--config", "run.cfg", "--out", "env"])
        .current_dir(d)
        .env("CMSF_THREADS", "3")
        .output()
        .unwrap();
    assert!(via_env.status.success(), "{}", stderr(&via_env));
    let o = cmsf(&["train", "--config", "run.cfg", "--out", "flag", "--threads", "1"], d);
    assert!(o.status.success());
    assert_eq!(fs::read(d.join("env/metrics.jsonl")).unwrap(), fs::read(d.join("flag/metrics.jsonl")).unwrap());

    let bad = Command::new(env!("CARGO_BIN_EXE_cmsf")).args(["train", "--out", "z"]).current_dir(d).env("CMSF_THREADS", "many").output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn flops_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = cmsf(&["flops", "--table9"], dir.path());
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().count(), 14);
    let o = cmsf(&["flops", "--unl-fwd", "2", "--unl-bwd", "1", "--unl-batch", "256", "--iters-per-epoch", "5004", "--epochs", "200"], dir.path());
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[4], "7.6861");
    assert!(fs::read_dir(dir.path()).unwrap().next().is_none(), "flops must not write files");
}
