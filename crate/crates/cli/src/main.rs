//! `dcr`: generate data, train and evaluate dual compensation residual
//! heads, and run the numerical self-checks.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dcr_core::baseline;
use dcr_core::checkpoint;
use dcr_core::data::{self, FeatureDataset, LongTailSpec};
use dcr_core::eval::{self, SplitThresholds};
use dcr_core::gradcheck::{self, GradCheckConfig};
use dcr_core::oracle::{self, BoundCheckConfig};
use dcr_core::stats;
use dcr_core::training::{self, TrainConfig};

#[derive(Parser, Debug)]
#[command(
    name = "dcr",
    version,
    about = "Long-tailed classification heads over fixed feature embeddings"
)]
#[command(arg_required_else_help = true)]
struct Cli {
    /// Root seed; overrides the seed in --config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for per-sample parallel work (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic long-tailed train/test pair as DCRF files.
    Gen(GenArgs),
    /// Print the per-class statistics table of a training set.
    Stats(StatsArgs),
    /// Train a model and write the checkpoint and training report.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a test set.
    Eval(EvalArgs),
    /// Write per-class drift diagnostics as CSV.
    Diagnose(DiagnoseArgs),
    /// Check the closed-form logit compensation against Monte-Carlo sampling.
    OracleCheck(OracleArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
}

/// Overrides for individual training configuration keys.
#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_uniform: Option<usize>,
    #[arg(long)]
    batch_balanced: Option<usize>,
    #[arg(long)]
    lr_initial: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    phi: Option<f64>,
    #[arg(long)]
    neighbors: Option<usize>,
    #[arg(long)]
    alpha0: Option<f64>,
    #[arg(long)]
    beta0: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    proxies: Option<usize>,
    #[arg(long)]
    head_threshold: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self, seed: Option<u64>) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::from_file(path).with_context(|| format!("reading config {}", path.display()))?,
            None => TrainConfig::default(),
        };
        macro_rules! apply {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { cfg.$field = v; })*
            };
        }
        apply!(
            epochs,
            batch_uniform,
            batch_balanced,
            lr_initial,
            momentum,
            phi,
            neighbors,
            alpha0,
            beta0,
            tau,
            proxies,
            head_threshold
        );
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Output directory; receives train.dcrf and test.dcrf.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = LongTailSpec::default().num_classes)]
    num_classes: usize,
    #[arg(long, default_value_t = LongTailSpec::default().samples_max)]
    samples_max: usize,
    #[arg(long, default_value_t = LongTailSpec::default().imbalance_factor)]
    imbalance_factor: f64,
    #[arg(long, default_value_t = LongTailSpec::default().dim)]
    dim: usize,
    #[arg(long, default_value_t = LongTailSpec::default().cluster_spread)]
    cluster_spread: f64,
    #[arg(long, default_value_t = LongTailSpec::default().drift_strength)]
    drift_strength: f64,
    #[arg(long, default_value_t = LongTailSpec::default().test_per_class)]
    test_per_class: usize,
    #[arg(long, default_value_t = LongTailSpec::default().head_threshold)]
    head_threshold: usize,
}

#[derive(Args, Debug)]
struct StatsArgs {
    /// Training features (DCRF, or CSV with a `label,f0,...` header).
    #[arg(long)]
    train: PathBuf,
    /// Also write the table to this file.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    /// Output directory; receives model.dcrm and train_report.json.
    #[arg(long)]
    out: PathBuf,
    /// Train the two-stage linear baseline instead.
    #[arg(long)]
    baseline: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Output directory; receives eval_report.json and per_class.csv.
    #[arg(long)]
    out: PathBuf,
    /// Classes with more training samples than this are Many-shot.
    #[arg(long, default_value_t = SplitThresholds::default().many_above)]
    many_above: usize,
    /// Classes with fewer training samples than this are Few-shot.
    #[arg(long, default_value_t = SplitThresholds::default().few_below)]
    few_below: usize,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Output directory; receives drift.csv.
    #[arg(long)]
    out: PathBuf,
    /// Add the distance from test features to feature-compensated training features.
    #[arg(long)]
    compensated: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
struct OracleArgs {
    #[arg(long, default_value_t = 20)]
    trials: usize,
    /// Monte-Carlo draws per trial.
    #[arg(long, default_value_t = BoundCheckConfig::default().samples)]
    samples: usize,
    /// Write the JSON report to this file.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 10)]
    trials: usize,
    #[arg(long, default_value_t = GradCheckConfig::default().dim)]
    dim: usize,
    /// Multiplier on the initial weight scale; large values saturate the logits.
    #[arg(long, default_value_t = 1.0)]
    weight_scale: f64,
    #[arg(long, default_value_t = GradCheckConfig::default().step)]
    step: f64,
    #[arg(long, default_value_t = GradCheckConfig::default().tolerance)]
    tolerance: f64,
    /// Write the JSON report to this file.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

fn load_features(path: &Path) -> Result<FeatureDataset> {
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let ds = if is_csv {
        data::read_csv(path, None)
    } else {
        data::read_features(path)
    };
    ds.with_context(|| format!("reading features from {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn gen(args: &GenArgs, seed: Option<u64>) -> Result<()> {
    let spec = LongTailSpec {
        num_classes: args.num_classes,
        samples_max: args.samples_max,
        imbalance_factor: args.imbalance_factor,
        dim: args.dim,
        cluster_spread: args.cluster_spread,
        drift_strength: args.drift_strength,
        test_per_class: args.test_per_class,
        head_threshold: args.head_threshold,
        seed: seed.unwrap_or(0),
    };
    let (train, test) = data::generate_longtail(&spec)?;
    create_dir(&args.out)?;
    write(&args.out.join("train.dcrf"), data::encode_features(&train))?;
    write(&args.out.join("test.dcrf"), data::encode_features(&test))?;
    println!(
        "generated {} training and {} test samples, {} classes, dimension {}",
        train.len(),
        test.len(),
        train.num_classes(),
        train.dim()
    );
    Ok(())
}

fn stats_cmd(args: &StatsArgs, seed: Option<u64>) -> Result<()> {
    let cfg = args.config.resolve(seed)?;
    let train = load_features(&args.train)?;
    let table = stats::build_class_stats(&train, &cfg.stats_config())?;
    let report = table.report();
    print!("{report}");
    if let Some(out) = &args.out {
        write(out, &report)?;
    }
    Ok(())
}

fn train_cmd(args: &TrainArgs, seed: Option<u64>) -> Result<()> {
    let cfg = args.config.resolve(seed)?;
    let train = load_features(&args.train)?;
    create_dir(&args.out)?;
    let report_json = if args.baseline {
        let (model, report) = baseline::train_crt(&train, &cfg)?;
        write(&args.out.join("model.dcrm"), checkpoint::encode_model(&model))?;
        serde_json::to_string_pretty(&serde_json::json!({ "config": cfg, "baseline": report }))?
    } else {
        let (model, report) = training::train(&train, &cfg)?;
        log::info!("training took {:.2} s", report.wall_clock_secs);
        if let Some(last) = report.epochs.last() {
            println!("final epoch loss {:.6}", last.loss);
        }
        write(&args.out.join("model.dcrm"), checkpoint::encode_model(&model))?;
        serde_json::to_string_pretty(&report)?
    };
    write(&args.out.join("train_report.json"), report_json + "\n")
}

fn eval_cmd(args: &EvalArgs) -> Result<()> {
    let model =
        checkpoint::read_model(&args.model).with_context(|| format!("reading model {}", args.model.display()))?;
    let test = load_features(&args.test)?;
    let thresholds = SplitThresholds {
        many_above: args.many_above,
        few_below: args.few_below,
    };
    if thresholds.few_below > thresholds.many_above + 1 {
        bail!(
            "--few-below ({}) must not exceed --many-above + 1 ({})",
            args.few_below,
            args.many_above + 1
        );
    }
    let report = eval::evaluate(&model, &test, &model.stats.class_counts, thresholds)?;
    create_dir(&args.out)?;
    write(
        &args.out.join("eval_report.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    write(&args.out.join("per_class.csv"), report.per_class_csv())?;
    let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |a| format!("{:.2}", 100.0 * a));
    println!(
        "overall {:.2}  many {}  medium {}  few {}",
        100.0 * report.overall,
        pct(report.many),
        pct(report.medium),
        pct(report.few)
    );
    Ok(())
}

fn diagnose_cmd(args: &DiagnoseArgs, seed: Option<u64>) -> Result<()> {
    let cfg = args.config.resolve(seed)?;
    let train = load_features(&args.train)?;
    let test = load_features(&args.test)?;
    let table = stats::build_class_stats(&train, &cfg.stats_config())?;
    let report = eval::drift_report(&train, &test, &table, args.compensated)?;
    create_dir(&args.out)?;
    write(&args.out.join("drift.csv"), report.to_csv(&table))
}

fn oracle_cmd(args: &OracleArgs, seed: Option<u64>) -> Result<bool> {
    let cfg = args.config.resolve(seed)?;
    let check = BoundCheckConfig {
        samples: args.samples,
        alpha0: cfg.alpha0,
        beta0: cfg.beta0,
        tau: cfg.tau,
        neighbors: cfg.neighbors,
        seed: cfg.seed,
        ..BoundCheckConfig::default()
    };
    let report = oracle::bound_check(&check, args.trials)?;
    for t in &report.trials {
        println!(
            "trial {:>3} class {} beta {:.3}: closed form {:.6}, sampled {:.6} ± {:.2e} {}",
            t.trial,
            t.class,
            t.beta,
            t.closed_form,
            t.sampled,
            t.std_error,
            if t.pass { "ok" } else { "VIOLATED" }
        );
    }
    if let Some(out) = &args.out {
        write(out, serde_json::to_string_pretty(&report)? + "\n")?;
    }
    println!("{}", if report.pass { "PASS" } else { "FAIL" });
    Ok(report.pass)
}

fn gradcheck_cmd(args: &GradcheckArgs, seed: Option<u64>) -> Result<bool> {
    let cfg = args.config.resolve(seed)?;
    let check = GradCheckConfig {
        dim: args.dim,
        weight_scale: args.weight_scale,
        step: args.step,
        tolerance: args.tolerance,
        ..GradCheckConfig::from_train(&cfg)
    };
    if check.dim == 0
        || !check.step.is_finite()
        || check.step <= 0.0
        || !check.weight_scale.is_finite()
        || check.weight_scale <= 0.0
    {
        bail!("--dim, --step and --weight-scale must be positive");
    }
    let report = gradcheck::gradcheck(&check, args.trials)?;
    for t in &report.trials {
        println!(
            "trial {:>3}: {} parameters, loss {:.4}, max relative error {:.3e}",
            t.trial, t.parameters, t.loss, t.max_relative_error
        );
    }
    if let Some(out) = &args.out {
        write(out, serde_json::to_string_pretty(&report)? + "\n")?;
    }
    println!(
        "{} (max relative error {:.3e}, tolerance {:.0e})",
        if report.pass { "PASS" } else { "FAIL" },
        report.max_relative_error,
        check.tolerance
    );
    Ok(report.pass)
}

fn run(cli: Cli) -> Result<bool> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be positive");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match &cli.command {
        Command::Gen(a) => gen(a, cli.seed).map(|_| true),
        Command::Stats(a) => stats_cmd(a, cli.seed).map(|_| true),
        Command::Train(a) => train_cmd(a, cli.seed).map(|_| true),
        Command::Eval(a) => eval_cmd(a).map(|_| true),
        Command::Diagnose(a) => diagnose_cmd(a, cli.seed).map(|_| true),
        Command::OracleCheck(a) => oracle_cmd(a, cli.seed),
        Command::Gradcheck(a) => gradcheck_cmd(a, cli.seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
