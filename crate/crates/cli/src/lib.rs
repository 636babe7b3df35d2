//! The `stfm` command line: train, eval, bench, check and preset.
//!
//! Every command writes human-readable lines to the given writer and returns
//! `Ok(false)` when it ran to completion but found a failure (a property
//! check, for instance). Errors map to exit codes in [`exit_code`].

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use stfm_core::autodiff::{inject_fault, OP_NAMES};
use stfm_core::harness::bench::BENCH_HEADER;
use stfm_core::harness::{load_checkpoint, run_bench, run_suite, save_checkpoint, BenchConfig, RunConfig};
use stfm_core::tasks::MogGenConfig;
use stfm_core::train::eval::{evaluate_clustering, evaluate_max_regression, evaluate_oracle, ClusteringReport};
use stfm_core::train::{presets, Task, Trainer, METRICS_HEADER};
use stfm_core::{Error, Result};

pub const CONFIG_FILE: &str = "config.cfg";
pub const METRICS_FILE: &str = "metrics.csv";
pub const MODEL_FILE: &str = "model.stfm";
pub const CLUSTER_EVAL_HEADER: &str = "dataset,n,ll0,ll1,ari0,ari1";
pub const REGRESSION_EVAL_HEADER: &str = "set,abs_error";

#[derive(Debug, Parser)]
#[command(name = "stfm", version, about = "Set Transformer training, evaluation and checks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a config file.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or the generating parameters) on fresh data.
    Eval(EvalArgs),
    /// Time the forward pass of one SAB or ISAB block against set size.
    Bench(BenchArgs),
    /// Run the gradient, permutation, construction and EM property suites.
    Check(CheckArgs),
    /// Print the config text of a built-in preset.
    Preset(PresetArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides both the config file and STFM_SEED.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; defaults to the config's `out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, value_parser = parse_task)]
    pub task: Task,
    #[arg(long, default_value_t = 500)]
    pub datasets: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Score the true generating parameters instead of a model.
    #[arg(long)]
    pub oracle: bool,
    /// Append one row per evaluated dataset (or set) to this CSV file.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub block: String,
    /// Inducing points for ISAB.
    #[arg(long, default_value_t = 4)]
    pub m: usize,
    #[arg(long, value_delimiter = ',', required = true)]
    pub sizes: Vec<usize>,
    #[arg(long)]
    pub reps: usize,
    /// Append raw timings to this CSV file.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[arg(long, default_value = "all")]
    pub suite: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Negate the adjoint of one op, to confirm the grad suite notices.
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

#[derive(Debug, Args)]
pub struct PresetArgs {
    /// Preset name; omit to list them.
    pub name: Option<String>,
}

fn parse_task(s: &str) -> std::result::Result<Task, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// 2 for configuration and usage errors, 1 for everything else.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        _ => 1,
    }
}

pub fn run(cli: Cli, out: &mut impl Write) -> Result<bool> {
    match cli.command {
        Command::Train(a) => train(&a, out).map(|_| true),
        Command::Eval(a) => eval(&a, out),
        Command::Bench(a) => bench(&a, out).map(|_| true),
        Command::Check(a) => check(&a, out),
        Command::Preset(a) => preset(&a, out).map(|_| true),
    }
}

/// Opens `path` for appending, writing `header` first if the file is new or
/// empty. An existing file with a different header is refused.
pub fn open_csv(path: &Path, header: &str) -> Result<File> {
    let existing = match File::open(path) {
        Ok(f) => {
            let mut first = String::new();
            BufReader::new(f).read_line(&mut first)?;
            Some(first.trim_end().to_string())
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(e.into()),
    };
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    match existing.as_deref() {
        None | Some("") => writeln!(f, "{header}")?,
        Some(h) if h == header => {}
        Some(h) => {
            return Err(Error::Format(format!(
                "{}: existing header `{h}` does not match `{header}`",
                path.display()
            )))
        }
    }
    Ok(f)
}

/// Config from file, then STFM_SEED, then command-line flags.
pub fn resolve_config(args: &TrainArgs) -> Result<RunConfig> {
    let text = fs::read_to_string(&args.config)?;
    let mut cfg = RunConfig::parse(&text)?;
    cfg.apply_env()?;
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(w) = args.workers {
        cfg.train.workers = w;
    }
    if let Some(dir) = &args.out {
        cfg.out_dir = Some(dir.clone());
    }
    cfg.train.validate()?;
    Ok(cfg)
}

fn train(args: &TrainArgs, out: &mut impl Write) -> Result<()> {
    let cfg = resolve_config(args)?;
    let dir = cfg
        .out_dir
        .clone()
        .ok_or_else(|| Error::Config("no output directory: pass --out or set `out_dir`".into()))?;
    fs::create_dir_all(&dir)?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_text())?;
    // the checkpoint describes the model, not where it was written
    let stored = RunConfig::from_train(cfg.train.clone());
    let ckpt = dir.join(MODEL_FILE);
    let mut metrics = open_csv(&dir.join(METRICS_FILE), METRICS_HEADER)?;
    let mut trainer = Trainer::new(cfg.train.clone())?;
    save_checkpoint(&ckpt, &stored, trainer.model())?;
    writeln!(
        out,
        "training {} for {} steps, seed {}, into {}",
        cfg.train.task,
        cfg.train.steps,
        cfg.train.seed,
        dir.display()
    )?;
    let result = trainer.run(|rec, model| {
        rec.write_csv(&mut metrics)?;
        metrics.flush()?;
        save_checkpoint(&ckpt, &stored, model)?;
        let shown: Vec<String> = rec.metrics.iter().map(|(k, v)| format!("{k} {v:.4}")).collect();
        writeln!(out, "step {:>6}  loss {:.5}  {}  ({:.0}s)", rec.step, rec.loss, shown.join("  "), rec.wall_s)?;
        Ok(())
    });
    if let Err(Error::Diverged { step }) = &result {
        writeln!(out, "diverged at step {step}; last good checkpoint kept at {}", ckpt.display())?;
    }
    result.map(|_| ())
}

fn print_clustering(out: &mut impl Write, label: &str, r: &ClusteringReport) -> Result<()> {
    writeln!(out, "{label} on {} datasets", r.datasets.len())?;
    for (name, s) in [("ll0", r.ll0), ("ll1", r.ll1), ("ari0", r.ari0), ("ari1", r.ari1)] {
        writeln!(out, "  {name:<5} {:>9.4} ± {:.4}", s.mean, s.std)?;
    }
    writeln!(out, "  em non-decreasing on {:.1}% of datasets", 100.0 * r.em_improves_fraction(1e-9))?;
    Ok(())
}

fn eval(args: &EvalArgs, out: &mut impl Write) -> Result<bool> {
    if args.datasets == 0 {
        return Err(Error::Config("--datasets must be positive".into()));
    }
    let ckpt = match (&args.model, args.oracle) {
        (Some(p), _) => Some(load_checkpoint(p)?),
        (None, true) => None,
        (None, false) => return Err(Error::Config("--model is required unless --oracle is given".into())),
    };
    if let Some(c) = &ckpt {
        if c.config.train.task != args.task {
            return Err(Error::Config(format!(
                "checkpoint was trained for task {}, not {}",
                c.config.train.task, args.task
            )));
        }
    }
    match args.task {
        Task::Clustering => {
            let gen = ckpt.as_ref().map_or_else(MogGenConfig::default, |c| c.config.train.mog.clone());
            let report = match (&ckpt, args.oracle) {
                (_, true) => evaluate_oracle(&gen, args.datasets, args.seed)?,
                (Some(c), false) => evaluate_clustering(&c.model, &gen, args.datasets, args.seed)?,
                (None, false) => unreachable!("checked above"),
            };
            print_clustering(out, if args.oracle { "oracle" } else { "model" }, &report)?;
            if let Some(path) = &args.csv {
                let mut f = open_csv(path, CLUSTER_EVAL_HEADER)?;
                for (i, d) in report.datasets.iter().enumerate() {
                    writeln!(f, "{i},{},{},{},{},{}", d.n, d.ll0, d.ll1, d.ari0, d.ari1)?;
                }
            }
        }
        Task::MaxRegression => {
            let Some(c) = &ckpt else {
                return Err(Error::Config("--oracle applies to the clustering task only".into()));
            };
            let report = evaluate_max_regression(&c.model, args.datasets, args.seed)?;
            writeln!(out, "model on {} sets", report.errors.len())?;
            writeln!(out, "  mae   {:>9.4} ± {:.4}", report.mae.mean, report.mae.std)?;
            if let Some(path) = &args.csv {
                let mut f = open_csv(path, REGRESSION_EVAL_HEADER)?;
                for (i, e) in report.errors.iter().enumerate() {
                    writeln!(f, "{i},{e}")?;
                }
            }
        }
    }
    Ok(true)
}

fn bench(args: &BenchArgs, out: &mut impl Write) -> Result<()> {
    let cfg = BenchConfig::new(args.block.parse()?, args.m, args.sizes.clone(), args.reps);
    let report = run_bench(&cfg)?;
    writeln!(out, "{:>8} {:>12} {:>12} {:>12}", "n", "median_s", "p10_s", "p90_s")?;
    for r in &report.rows {
        writeln!(out, "{:>8} {:>12.6} {:>12.6} {:>12.6}", r.n, r.median, r.p10, r.p90)?;
    }
    for (n, why) in &report.failed {
        writeln!(out, "{n:>8} failed: {why}")?;
    }
    match report.slope {
        Some(s) => writeln!(out, "log-log slope {s:.3}")?,
        None => writeln!(out, "log-log slope unavailable (fewer than two sizes completed)")?,
    }
    if let Some(path) = &args.csv {
        let mut f = open_csv(path, BENCH_HEADER)?;
        report.write_csv(&mut f)?;
    }
    Ok(())
}

fn check(args: &CheckArgs, out: &mut impl Write) -> Result<bool> {
    let suite = args.suite.parse()?;
    if let Some(op) = &args.inject_fault {
        let name = OP_NAMES
            .iter()
            .find(|n| **n == op.as_str())
            .ok_or_else(|| Error::Config(format!("unknown op `{op}`")))?;
        inject_fault(Some(name));
    }
    let report = run_suite(suite, args.seed);
    inject_fault(None);
    let report = report?;
    for case in &report.cases {
        writeln!(out, "{case}")?;
    }
    for s in ["grad", "perm", "lemma", "em"] {
        if let Some(w) = report.worst(s) {
            writeln!(out, "worst {s:<5} {w:.3e}")?;
        }
    }
    let failures: Vec<_> = report.failures().collect();
    if failures.is_empty() {
        writeln!(out, "all {} cases passed", report.cases.len())?;
    } else {
        for f in &failures {
            writeln!(out, "failed: {} {} (replay with --seed {})", f.suite, f.name, f.seed)?;
        }
    }
    Ok(failures.is_empty())
}

fn preset(args: &PresetArgs, out: &mut impl Write) -> Result<()> {
    match &args.name {
        None => {
            for n in presets::NAMES {
                writeln!(out, "{n}")?;
            }
        }
        Some(name) => {
            let cfg = presets::by_name(name).ok_or_else(|| Error::Config(format!("unknown preset `{name}`")))?;
            write!(out, "{}", RunConfig::from_train(cfg).to_text())?;
        }
    }
    Ok(())
}
