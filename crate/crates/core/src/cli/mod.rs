//! Command-line front end: `gen-data`, `train`, `eval`, `analyze`, `flops`.
//!
//! Exit codes: 0 on success, 2 on usage or config errors (message on
//! stderr), 1 on runtime errors (one JSON object on stderr with `kind` and
//! `message`).

pub mod config;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::constraint::{ConstraintMode, NeighborCount};
use crate::data::{gen_hierarchical, gen_mixture, inject_label_noise, load_dataset, save_csv, save_dataset, Dataset};
use crate::encoder::{load_checkpoint, save_checkpoint, Checkpoint, EncoderPair};
use crate::eval::{diagnostics_sweep, evaluate, write_json, DiagConfig, EvalReport, ProbeConfig};
use crate::flops::{row_csv, table9_csv, ComputeRow, StreamCost, RESNET50_FWD_FLOPS};
use crate::numeric::{SeededRng, Stream};
use crate::trainer::{train_xent_baseline, EvalPlan, Trainer};
use crate::CmsfError;

pub use config::{parse_entries, ConfigError, GenSpec, Method, RunConfig};

pub const SNAPSHOT_FILE: &str = "config.snapshot";
pub const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Parser, Debug)]
#[command(name = "cmsf", version, about = "Constrained mean-shift training, evaluation and compute accounting")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic Gaussian-mixture dataset.
    GenData(GenArgs),
    /// Train a model into a run directory.
    Train(TrainArgs),
    /// 1-NN / 20-NN (and optionally linear) evaluation of a checkpoint.
    Eval(EvalArgs),
    /// Constrained-rank and purity diagnostics of a checkpoint.
    Analyze(AnalyzeArgs),
    /// Training-compute accounting.
    Flops(FlopsArgs),
}

#[derive(Args, Debug)]
struct Threads {
    /// Worker threads; 0 uses all cores. Results do not depend on it.
    #[arg(long, env = "CMSF_THREADS", default_value_t = 0)]
    threads: usize,
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Classes (subclasses per superclass with --super-classes).
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 500)]
    per_class: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    /// Minimum distance between class means.
    #[arg(long, default_value_t = 3.0)]
    sep: f64,
    /// Generate a two-level hierarchy with this many superclasses.
    #[arg(long)]
    super_classes: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of labels replaced by a different random class.
    #[arg(long, default_value_t = 0.0)]
    label_noise: f64,
    /// Fraction of samples that keep their label.
    #[arg(long, default_value_t = 1.0)]
    label_fraction: f64,
    /// Output path; `.csv` writes CSV, anything else the binary format.
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// msf, byol, self, sup, semi, semi-basic, cross or xent.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    data: Option<String>,
    /// Run directory.
    #[arg(long)]
    out: Option<String>,
    /// Any config key, e.g. `--set lr=0.1`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(flatten)]
    threads: Threads,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    /// Defaults to the run's final checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Also fit a linear probe.
    #[arg(long)]
    linear: bool,
    #[command(flatten)]
    threads: Threads,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 512)]
    probes: usize,
    /// Analyze the self constraint with this k' instead of the run's constraint.
    #[arg(long)]
    k_prime: Option<usize>,
    /// Constrained neighbour whose rank is recorded.
    #[arg(long)]
    k: Option<usize>,
    #[command(flatten)]
    threads: Threads,
}

#[derive(Args, Debug)]
struct FlopsArgs {
    /// Print the published comparison table with recomputed totals as CSV.
    #[arg(long)]
    table9: bool,
    /// Forward crop count of the unlabeled stream.
    #[arg(long, required_unless_present = "table9")]
    unl_fwd: Option<f64>,
    #[arg(long, required_unless_present = "table9")]
    unl_bwd: Option<f64>,
    #[arg(long, required_unless_present = "table9")]
    unl_batch: Option<f64>,
    #[arg(long, requires_all = ["lab_bwd", "lab_batch"])]
    lab_fwd: Option<f64>,
    #[arg(long, requires_all = ["lab_fwd", "lab_batch"])]
    lab_bwd: Option<f64>,
    #[arg(long, requires_all = ["lab_fwd", "lab_bwd"])]
    lab_batch: Option<f64>,
    #[arg(long, required_unless_present = "table9")]
    iters_per_epoch: Option<f64>,
    #[arg(long, required_unless_present = "table9")]
    epochs: Option<f64>,
    /// Forward FLOPs per full-resolution image.
    #[arg(long, default_value_t = RESNET50_FWD_FLOPS)]
    fwd_flops: f64,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Run(CmsfError),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<CmsfError> for CliError {
    fn from(e: CmsfError) -> Self {
        CliError::Run(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(CmsfError::Io(e))
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Runs the CLI on `args` (including the program name) and returns the exit
/// code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match dispatch(cli.cmd, out) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            2
        }
        Err(CliError::Run(e)) => {
            let line = serde_json::json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
            let _ = writeln!(err, "{line}");
            1
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> CliResult<()> {
    match cmd {
        Command::GenData(a) => gen_data(&a, out),
        Command::Train(a) => buffered(a.threads.threads, out, |buf| train(&a, buf)),
        Command::Eval(a) => buffered(a.threads.threads, out, |buf| eval(&a, buf)),
        Command::Analyze(a) => buffered(a.threads.threads, out, |buf| analyze(&a, buf)),
        Command::Flops(a) => flops(&a, out),
    }
}

/// Runs `f` on a pool of `threads` workers (0: the global pool), collecting
/// its stdout in a buffer since `out` cannot cross threads.
fn buffered(threads: usize, out: &mut dyn Write, f: impl FnOnce(&mut Vec<u8>) -> CliResult<()> + Send) -> CliResult<()> {
    let mut buf = Vec::new();
    let res = with_threads(threads, || f(&mut buf));
    out.write_all(&buf)?;
    res
}

fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> CliResult<R> + Send) -> CliResult<R> {
    if threads == 0 {
        return f();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Run(CmsfError::BadConfig(e.to_string())))?;
    pool.install(f)
}

fn gen_data(a: &GenArgs, out: &mut dyn Write) -> CliResult<()> {
    let mut rng = SeededRng::for_stream(a.seed, Stream::Data);
    let mut d = match a.super_classes {
        Some(s) => gen_hierarchical(s, a.classes, a.per_class, a.dim, &mut rng)?,
        None => gen_mixture(a.classes, a.per_class, a.dim, a.sep, &mut rng)?,
    };
    let mut noise_rng = SeededRng::for_stream(a.seed, Stream::Noise);
    if a.label_noise > 0.0 {
        d = inject_label_noise(&d, a.label_noise, &mut noise_rng)?;
    }
    if a.label_fraction < 1.0 {
        d = d.mask_labels(a.label_fraction, &mut noise_rng)?;
    }
    if a.output.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        save_csv(&d, &a.output)?;
    } else {
        save_dataset(&d, &a.output)?;
    }
    writeln!(out, "{}", serde_json::json!({ "samples": d.len(), "dim": d.dim(), "classes": d.num_classes(), "path": a.output }))?;
    Ok(())
}

fn resolve_train_config(a: &TrainArgs) -> CliResult<RunConfig> {
    let mut entries = match &a.config {
        Some(p) => parse_entries(&fs::read_to_string(p)?)?,
        None => Vec::new(),
    };
    let mut flag = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            entries.push((k.to_string(), v));
        }
    };
    flag("mode", a.mode.clone());
    flag("seed", a.seed.map(|s| s.to_string()));
    flag("epochs", a.epochs.map(|e| e.to_string()));
    flag("data", a.data.clone());
    flag("out", a.out.clone());
    for kv in &a.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        entries.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(RunConfig::resolve(&entries)?)
}

/// Dataset, split and label treatment of a run, rebuilt identically by every
/// subcommand from the resolved config.
pub struct Prepared {
    pub full: Dataset,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    /// Training subset after label noise and masking.
    pub train_set: Dataset,
    /// Clean labels of the full dataset when every sample has one.
    pub eval_labels: Option<Vec<u32>>,
}

impl Prepared {
    /// Clean labels of the training subset, if known.
    pub fn train_truth(&self) -> Option<Vec<u32>> {
        self.eval_labels.as_ref().map(|l| self.train_idx.iter().map(|&i| l[i]).collect())
    }
}

pub fn prepare(cfg: &RunConfig) -> crate::Result<Prepared> {
    let seed = cfg.train.seed;
    let full = if cfg.data.is_empty() {
        let g = &cfg.gen;
        gen_mixture(g.classes, g.per_class, g.dim, g.sep, &mut SeededRng::for_stream(seed, Stream::Data))?
    } else {
        load_dataset(&cfg.data)?
    };
    let (train_idx, test_idx) = if cfg.test_fraction > 0.0 {
        full.split_indices(cfg.test_fraction, &mut SeededRng::for_stream(seed, Stream::Split))?
    } else {
        ((0..full.len()).collect(), Vec::new())
    };
    let mut train_set = full.subset(&train_idx)?;
    let mut noise_rng = SeededRng::for_stream(seed, Stream::Noise);
    if cfg.label_noise > 0.0 {
        train_set = inject_label_noise(&train_set, cfg.label_noise, &mut noise_rng)?;
    }
    if cfg.label_fraction < 1.0 {
        train_set = train_set.mask_labels(cfg.label_fraction, &mut noise_rng)?;
    }
    let eval_labels = (full.labeled_indices().len() == full.len()).then(|| full.labels().to_vec());
    Ok(Prepared { full, train_idx, test_idx, train_set, eval_labels })
}

fn final_eval(pair_target: &crate::encoder::MlpParams, prep: &Prepared, linear: bool, seed: u64) -> crate::Result<Option<EvalReport>> {
    let Some(labels) = &prep.eval_labels else { return Ok(None) };
    if prep.test_idx.is_empty() {
        return Ok(None);
    }
    let probe_cfg = ProbeConfig::default();
    let mut rng = SeededRng::for_stream(seed, Stream::Probe);
    let probe = linear.then_some((&probe_cfg, &mut rng));
    evaluate(pair_target, &prep.full, &prep.train_idx, &prep.test_idx, labels, probe).map(Some)
}

fn json_line<T: Serialize>(v: &T) -> crate::Result<String> {
    serde_json::to_string(v).map_err(|e| CmsfError::BadConfig(e.to_string()))
}

fn train(a: &TrainArgs, out: &mut Vec<u8>) -> CliResult<()> {
    let cfg = resolve_train_config(a)?;
    cfg.train.validate()?;
    let dir = PathBuf::from(&cfg.out);
    fs::create_dir_all(dir.join("checkpoints"))?;
    fs::create_dir_all(dir.join("reports"))?;
    fs::write(dir.join(SNAPSHOT_FILE), cfg.snapshot())?;
    let prep = prepare(&cfg)?;
    let mut metrics = fs::File::create(dir.join(METRICS_FILE))?;
    let tc = &cfg.train;

    let target = if cfg.method == Method::Xent {
        let model = train_xent_baseline(&prep.train_set, tc)?;
        let mut pair = EncoderPair::init(&tc.shape(prep.full.dim()), tc.ema_momentum, &mut SeededRng::for_stream(tc.seed, Stream::Init))?;
        pair.target = model.trunk.clone();
        pair.online = model.trunk;
        let ck = Checkpoint { pair, head: None, optimizer: None, step: 0, epoch: tc.epochs as u32 };
        save_checkpoint(&ck, dir.join("checkpoints/final.ckpt"))?;
        let acc = match &prep.eval_labels {
            Some(labels) if !prep.test_idx.is_empty() => {
                Some(evaluate(&ck.pair.target, &prep.full, &prep.train_idx, &prep.test_idx, labels, None)?)
            }
            _ => None,
        };
        let rec = serde_json::json!({
            "epoch": tc.epochs,
            "nn1_acc": acc.as_ref().map(|r| r.nn1_acc),
            "nn20_acc": acc.as_ref().map(|r| r.nn20_acc),
        });
        writeln!(metrics, "{rec}")?;
        ck.pair.target
    } else {
        let mut t = Trainer::new(&prep.train_set, tc)?;
        if let Some(truth) = prep.train_truth() {
            t = t.with_truth(&truth)?;
        }
        if let (Some(labels), true) = (&prep.eval_labels, cfg.eval_every > 0 && !prep.test_idx.is_empty()) {
            t = t.with_eval(EvalPlan {
                data: prep.full.clone(),
                train_idx: prep.train_idx.clone(),
                test_idx: prep.test_idx.clone(),
                labels: labels.clone(),
                every: cfg.eval_every,
            });
        }
        for e in 1..=tc.epochs {
            let m = t.run_epoch()?;
            writeln!(metrics, "{}", json_line(&m)?)?;
            if cfg.checkpoint_every > 0 && e % cfg.checkpoint_every == 0 {
                save_checkpoint(&t.checkpoint(), dir.join(format!("checkpoints/epoch-{e:04}.ckpt")))?;
            }
        }
        save_checkpoint(&t.checkpoint(), dir.join("checkpoints/final.ckpt"))?;
        t.pair().target.clone()
    };
    metrics.flush()?;

    if let Some(report) = final_eval(&target, &prep, cfg.linear_probe, tc.seed)? {
        write_json(&report, dir.join("reports/eval.json"))?;
        writeln!(out, "{}", json_line(&report)?)?;
    }
    Ok(())
}

/// Loads the run directory's snapshot and the chosen checkpoint.
fn open_run(run: &Path, checkpoint: Option<&Path>) -> CliResult<(RunConfig, Checkpoint, String)> {
    let text = fs::read_to_string(run.join(SNAPSHOT_FILE))?;
    let cfg = RunConfig::resolve(&parse_entries(&text)?)?;
    let path = checkpoint.map_or_else(|| run.join("checkpoints/final.ckpt"), Path::to_path_buf);
    let ck = load_checkpoint(&path)?;
    let stem = path.file_stem().map_or_else(|| "checkpoint".into(), |s| s.to_string_lossy().into_owned());
    Ok((cfg, ck, stem))
}

fn eval(a: &EvalArgs, out: &mut Vec<u8>) -> CliResult<()> {
    let (cfg, ck, stem) = open_run(&a.run, a.checkpoint.as_deref())?;
    let prep = prepare(&cfg)?;
    if prep.eval_labels.is_none() {
        return Err(CliError::Run(CmsfError::NoLabels));
    }
    let report = final_eval(&ck.pair.target, &prep, a.linear, cfg.train.seed)?.ok_or(CmsfError::EmptySplit)?;
    fs::create_dir_all(a.run.join("reports"))?;
    write_json(&report, a.run.join(format!("reports/eval-{stem}.json")))?;
    writeln!(out, "{}", json_line(&report)?)?;
    Ok(())
}

fn analyze(a: &AnalyzeArgs, out: &mut Vec<u8>) -> CliResult<()> {
    let (cfg, ck, stem) = open_run(&a.run, a.checkpoint.as_deref())?;
    if cfg.method == Method::Xent {
        return Err(CliError::Usage("analyze needs a run with a memory-bank method".into()));
    }
    let prep = prepare(&cfg)?;
    let mut spec = cfg.train.constraint;
    if let Some(kp) = a.k_prime {
        spec.mode = ConstraintMode::SelfAug { k_prime: kp };
    }
    if let Some(k) = a.k {
        spec.k = NeighborCount::Top(k);
    }
    let mut dc = DiagConfig::new(spec, cfg.train.bank_capacity, cfg.train.seed);
    dc.probes = a.probes;
    dc.cross_dim = cfg.train.cross_dim;
    let truth = prep.train_truth();
    let report = diagnostics_sweep(&ck, &prep.train_set, &dc, truth.as_deref())?;
    fs::create_dir_all(a.run.join("reports"))?;
    write_json(&report, a.run.join(format!("reports/diagnostics-{stem}.json")))?;
    fs::write(a.run.join(format!("reports/rank-hist-{stem}.csv")), report.histogram.to_csv())?;
    writeln!(
        out,
        "{}",
        serde_json::json!({
            "mode": report.mode,
            "k": report.k,
            "median_rank": report.median_rank,
            "constrained_purity": report.constrained_purity,
            "unconstrained_purity": report.unconstrained_purity,
            "unconstrained_top_m_purity": report.unconstrained_top_m_purity,
        })
    )?;
    Ok(())
}

fn flops(a: &FlopsArgs, out: &mut dyn Write) -> CliResult<()> {
    if a.table9 {
        write!(out, "{}", table9_csv())?;
        return Ok(());
    }
    let need = |v: Option<f64>| v.ok_or_else(|| CliError::Usage("missing row flags".into()));
    let labeled = match (a.lab_fwd, a.lab_bwd, a.lab_batch) {
        (Some(f), Some(b), Some(n)) => Some(StreamCost::new(f, b, n)),
        _ => None,
    };
    let row = ComputeRow {
        unlabeled: StreamCost::new(need(a.unl_fwd)?, need(a.unl_bwd)?, need(a.unl_batch)?),
        labeled,
        iters_per_epoch: need(a.iters_per_epoch)?,
        epochs: need(a.epochs)?,
        per_image_fwd_flops: a.fwd_flops,
    };
    row.validate()?;
    write!(out, "{}", row_csv(&row))?;
    Ok(())
}
