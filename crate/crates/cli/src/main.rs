//! `mscada`: dataset generation, training, evaluation, gradient checks and
//! hyperparameter sweeps.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use mscada_core::checks::{gradient_suite, DEFAULT_SEEDS, GRADCHECK_TOLERANCE};
use mscada_core::synthdata::{scenario_preset, write_scenario, GenConfig, ScenarioData};
use mscada_core::train::{
    load_trained, sweep, Ablation, SweepGrid, TrainConfig, Trainer, CHECKPOINT_FILE, CONFIG_FILE,
};

#[derive(Parser, Debug)]
#[command(name = "mscada", version, about = "Class-asymmetric multi-source domain adaptation for segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a scenario dataset on disk.
    GenData(GenArgs),
    /// Train a model and write metrics.csv, config.json and a checkpoint.
    Train(RunArgs),
    /// Evaluate a trained checkpoint on the target test set.
    Eval(EvalArgs),
    /// Run the gradient-check suite.
    Gradcheck(GradArgs),
    /// Grid search over mixing ratios or loss weights.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    scenario: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON file with image size and sample counts.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// JSON training configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory from `gen-data`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Built-in scenario generated in memory instead of `--data`.
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iters: Option<usize>,
    /// none, no_mixing, no_hgcn, combined_source, best_expert or summation.
    #[arg(long)]
    ablation: Option<String>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Training output directory holding config.json and the checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the dataset recorded in config.json.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradArgs {
    #[arg(long, default_value_t = DEFAULT_SEEDS)]
    seeds: u64,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// `mix` (class ratio × region ratio) or `loss` (alpha × beta).
    #[arg(long)]
    grid: String,
    #[command(flatten)]
    run: RunArgs,
}

/// Reads a JSON file; parse errors carry `path:line:column`.
fn parse_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| anyhow!("{}:{}:{}: {e}", path.display(), e.line(), e.column()))
}

fn train_config(args: &RunArgs) -> anyhow::Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(p) => parse_json::<TrainConfig>(p)?,
        None => TrainConfig::default(),
    };
    if let Some(d) = &args.data {
        cfg.data = Some(d.clone());
        cfg.scenario = None;
    }
    if let Some(s) = &args.scenario {
        cfg.scenario = Some(s.clone());
        cfg.data = None;
    }
    if cfg.data.is_none() && cfg.scenario.is_none() {
        bail!("pass --data or --scenario (or set one in the config)");
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.iters {
        cfg.iterations = n;
    }
    if let Some(a) = &args.ablation {
        Ablation::parse(a)?.apply(&mut cfg);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn gen_data(args: GenArgs) -> anyhow::Result<()> {
    let cfg = match &args.config {
        Some(p) => parse_json::<GenConfig>(p)?,
        None => GenConfig::default(),
    };
    let scenario = scenario_preset(&args.scenario)?;
    write_scenario(&args.out, &scenario, &cfg, args.seed)?;
    println!("wrote {} to {}", args.scenario, args.out.display());
    Ok(())
}

fn train(args: RunArgs) -> anyhow::Result<()> {
    let cfg = train_config(&args)?;
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from("runs/latest"));
    let data = cfg.load_data()?;
    let mut trainer = Trainer::new(cfg, data)?;
    let summary = trainer.run(Some(&out), |row| {
        println!(
            "iter {:>6}  sup {:.4}  ssl {:.4}  sslM {:.4}  mIoU {:.4}  mF1 {:.4}",
            row.iter, row.loss_sup, row.loss_ssl, row.loss_ssl_multi, row.miou, row.mf1
        );
    })?;
    println!(
        "final mIoU {:.4} mF1 {:.4}; outputs in {}",
        summary.report.miou,
        summary.report.mf1,
        out.display()
    );
    Ok(())
}

fn eval(args: EvalArgs) -> anyhow::Result<()> {
    let mut cfg: TrainConfig = parse_json(&args.out.join(CONFIG_FILE))?;
    if let Some(d) = args.data {
        cfg.data = Some(d);
        cfg.scenario = None;
    }
    let ckpt = args.checkpoint.unwrap_or_else(|| args.out.join(CHECKPOINT_FILE));
    let data = cfg.load_data()?;
    let trainer = load_trained(&cfg, data, &ckpt)?;
    let report = trainer.evaluate()?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn gradcheck(args: GradArgs) -> anyhow::Result<bool> {
    let results = gradient_suite(args.seeds)?;
    let mut ok = true;
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        ok &= r.passed();
        println!("{status:<4} {:<44} max rel err {:.3e}", r.name, r.max_rel_err);
    }
    println!(
        "{} of {} checks below {GRADCHECK_TOLERANCE:e} over {} seeds",
        results.iter().filter(|r| r.passed()).count(),
        results.len(),
        args.seeds
    );
    Ok(ok)
}

fn run_sweep(args: SweepArgs) -> anyhow::Result<()> {
    let grid = SweepGrid::parse(&args.grid)?;
    let cfg = train_config(&args.run)?;
    let data: ScenarioData = cfg.load_data()?;
    let mut sink: Box<dyn Write> = match &args.run.out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Box::new(fs::File::create(dir.join("sweep.csv"))?)
        }
        None => Box::new(std::io::stdout()),
    };
    writeln!(sink, "{}", grid.header())?;
    sweep(grid, &cfg, &data, |(x, y), r| {
        let line = format!("{x},{y},{},{}", r.miou, r.mf1);
        let _ = writeln!(sink, "{line}");
        let _ = sink.flush();
        if args.run.out.is_some() {
            println!("{line}");
        }
    })?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a).map(|_| true),
        Command::Train(a) => train(a).map(|_| true),
        Command::Eval(a) => eval(a).map(|_| true),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Sweep(a) => run_sweep(a).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
