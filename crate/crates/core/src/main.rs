//! `dextac` command-line entry point: collect, train, eval, inspect.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use dextac::config::RunConfig;
use dextac::episode::{classify_outcome, EpisodeTrace};
use dextac::eval::{
    ablation_suite, check_disjoint, data_efficiency_suite, purely_tactile_suite, zero_shot_suite, SuiteConfig,
    SuiteReport,
};
use dextac::expert::{collect, Dataset, Manifest};
use dextac::policy::{train, write_log_csv, Policy};
use dextac::Error;

#[derive(Parser)]
#[command(
    name = "dextac",
    version,
    about = "Tactile syringe-press pipeline: collect, train, eval, inspect"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file; falls back to $DEXTAC_CONFIG, then the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed, overriding every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Collect scripted demonstrations.
    Collect {
        #[arg(long, value_delimiter = ',', default_value = "30,50,60")]
        sizes: Vec<u32>,
        #[arg(long, default_value_t = 30)]
        per_size: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train a policy on a collected dataset.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Use only the first N demonstrations of each size.
        #[arg(long)]
        per_size: Option<usize>,
        /// Train without the object proxy.
        #[arg(long)]
        no_vision: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Run an evaluation suite.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// ablation | zero-shot | data-efficiency | purely-tactile
        #[arg(long)]
        suite: String,
        #[arg(long)]
        out: PathBuf,
        /// Training dataset; required for zero-shot and data-efficiency.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Checkpoint trained without the object proxy (purely-tactile).
        #[arg(long)]
        blind_checkpoint: Option<PathBuf>,
        /// Override trials per size.
        #[arg(long)]
        trials: Option<usize>,
        /// Cap on concurrent episodes.
        #[arg(long)]
        jobs: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Print a summary of a trace, dataset or report.
    Inspect {
        #[arg(long, conflicts_with_all = ["dataset", "report"])]
        trace: Option<PathBuf>,
        #[arg(long, conflicts_with = "report")]
        dataset: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

/// Bad flags or configuration.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 2;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::InvalidConfig(_) | Error::UnknownSize(_) | Error::NonpositiveThreshold(_)) => 2,
        Some(
            Error::Data { .. }
            | Error::Json(_)
            | Error::IncompleteTrace(_)
            | Error::ShapeMismatch(_)
            | Error::EmptyDataset,
        ) => 3,
        _ => 4,
    }
}

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    config_hash: String,
    seed: u64,
    versions: BTreeMap<&'static str, &'static str>,
    inputs: BTreeMap<&'static str, String>,
}

fn write_run_record(
    out: &Path,
    command: &str,
    config: &RunConfig,
    seed: u64,
    inputs: BTreeMap<&'static str, String>,
) -> anyhow::Result<()> {
    let record = RunRecord {
        command,
        config_hash: config.hash(),
        seed,
        versions: BTreeMap::from([("dextac", env!("CARGO_PKG_VERSION")), ("format", "1")]),
        inputs,
    };
    let path = out.join("run.json");
    let mut text = serde_json::to_string_pretty(&record)?;
    text.push('\n');
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_config(common: &Common) -> anyhow::Result<(RunConfig, u64)> {
    let config = RunConfig::load(common.config.as_deref())?;
    Ok(match common.seed {
        Some(s) => (config.with_seed(s), s),
        None => {
            let s = config.policy.seed;
            (config, s)
        }
    })
}

fn require_dir(path: &Path, what: &str) -> anyhow::Result<()> {
    if !path.is_dir() {
        return Err(usage(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

fn require_file(path: &Path, what: &str) -> anyhow::Result<()> {
    if !path.is_file() {
        return Err(usage(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

fn create_out(out: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn cmd_collect(sizes: &[u32], per_size: usize, out: &Path, common: &Common) -> anyhow::Result<()> {
    if per_size == 0 {
        return Err(usage("--per-size must be at least 1"));
    }
    if sizes.is_empty() {
        return Err(usage("--sizes is empty"));
    }
    let (config, seed) = load_config(common)?;
    for &s in sizes {
        config.sim.syringe(s)?;
    }
    create_out(out)?;
    let ds = collect(
        per_size,
        sizes,
        seed,
        &config.sim,
        &config.controller()?,
        &config.expert,
        &config.hash(),
        out,
    )?;
    write_run_record(out, "collect", &config, seed, BTreeMap::new())?;
    let m = &ds.manifest;
    println!("collected {} demonstrations (seed {seed})", m.total);
    for (size, n) in &m.counts {
        println!("  size {size}: {n} kept of {} attempts", m.attempts[size]);
    }
    Ok(())
}

fn cmd_train(
    dataset: &Path,
    out: &Path,
    per_size: Option<usize>,
    no_vision: bool,
    common: &Common,
) -> anyhow::Result<()> {
    require_dir(dataset, "dataset")?;
    if per_size == Some(0) {
        return Err(usage("--per-size must be at least 1"));
    }
    let (mut config, seed) = load_config(common)?;
    if no_vision {
        config.policy.vision = false;
    }
    let ds = Dataset::load(dataset)?;
    let demos = match per_size {
        Some(n) => ds.subset(n),
        None => ds.demos.iter().collect(),
    };
    let norm = match per_size {
        Some(_) => dextac::policy::Normalization::fit(demos.iter().copied())?,
        None => ds.manifest.normalization.clone(),
    };
    create_out(out)?;
    let (policy, log) = train(&demos, &norm, &config.policy)?;
    policy.save(&out.join("policy.ckpt"))?;
    write_log_csv(&log, &out.join("train_log.csv"))?;
    let inputs = BTreeMap::from([
        ("dataset", dataset.display().to_string()),
        ("dataset_config_hash", ds.manifest.config_hash.clone()),
    ]);
    write_run_record(out, "train", &config, seed, inputs)?;
    let (first, last) = (&log[0], &log[log.len() - 1]);
    println!(
        "trained {} steps on {} demonstrations: loss {:.4} -> {:.4}",
        config.policy.train_steps,
        demos.len(),
        first.total,
        last.total
    );
    Ok(())
}

fn load_policy(path: Option<&Path>, flag: &str) -> anyhow::Result<Policy> {
    let path = path.ok_or_else(|| usage(format!("{flag} is required for this suite")))?;
    require_file(path, "checkpoint")?;
    Ok(Policy::load(path)?)
}

fn load_dataset(path: Option<&Path>) -> anyhow::Result<Dataset> {
    let path = path.ok_or_else(|| usage("--dataset is required for this suite"))?;
    require_dir(path, "dataset")?;
    Ok(Dataset::load(path)?)
}

fn print_report(report: &SuiteReport) {
    println!("{} suite", report.suite);
    println!(
        "{:<12} {:>5} {:>4} {:>4} {:>4} {:>6}",
        "policy", "size", "F", "P", "S", "rate"
    );
    for c in &report.cells {
        println!(
            "{:<12} {:>5} {:>4} {:>4} {:>4} {:>6.2}",
            c.policy, c.size, c.failure, c.partial, c.success, c.success_rate
        );
    }
    for p in report.policies() {
        let t = report.tally(p);
        println!(
            "{p}: success {}/{} ({:.2}), force settled {:.2}, CoP settled {:.2}",
            t.success,
            t.trials,
            t.success_rate(),
            t.force_rate(),
            t.cop_rate()
        );
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    checkpoint: Option<&Path>,
    suite: &str,
    out: &Path,
    dataset: Option<&Path>,
    blind: Option<&Path>,
    trials: Option<usize>,
    jobs: Option<usize>,
    common: &Common,
) -> anyhow::Result<()> {
    let (config, seed) = load_config(common)?;
    let mut suite_config: SuiteConfig = config.suites.get(suite).cloned().ok_or_else(|| {
        usage(format!(
            "unknown suite {suite:?}; expected ablation, zero-shot, data-efficiency or purely-tactile"
        ))
    })?;
    if let Some(n) = trials {
        if n == 0 {
            return Err(usage("--trials must be at least 1"));
        }
        suite_config.trials_per_size = n;
    }
    if jobs == Some(0) {
        return Err(usage("--jobs must be at least 1"));
    }
    let ctx = config.eval_context()?;
    let hash = config.hash();
    let mut inputs = BTreeMap::from([("suite", suite.to_string())]);
    for (k, v) in [
        ("checkpoint", checkpoint),
        ("dataset", dataset),
        ("blind_checkpoint", blind),
    ] {
        if let Some(p) = v {
            inputs.insert(k, p.display().to_string());
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| anyhow!("thread pool: {e}"))?;
    let run = || -> anyhow::Result<SuiteReport> {
        let out = Some(out);
        Ok(match suite {
            "ablation" => {
                let policy = load_policy(checkpoint, "--checkpoint")?;
                if let Some(ds) = dataset {
                    require_dir(ds, "dataset")?;
                    check_disjoint(&suite_config, &Manifest::read(ds)?)?;
                }
                ablation_suite(&ctx, &policy, &suite_config, &hash, out)?
            }
            "zero-shot" => {
                let policy = load_policy(checkpoint, "--checkpoint")?;
                let path = dataset.ok_or_else(|| usage("--dataset is required for zero-shot"))?;
                require_dir(path, "dataset")?;
                zero_shot_suite(&ctx, &policy, &Manifest::read(path)?, &suite_config, &hash, out)?
            }
            "data-efficiency" => {
                let ds = load_dataset(dataset)?;
                let counts = &config.suites.efficiency_counts;
                let (report, _) = data_efficiency_suite(&ctx, &ds, &config.policy, counts, &suite_config, &hash, out)?;
                for r in &report.rows {
                    let size = r.size.map_or("all".to_string(), |s| s.to_string());
                    println!(
                        "{:>3} demos/size, size {size:>3}: {}/{}",
                        r.demos_per_size, r.success, r.trials
                    );
                }
                report.suite
            }
            "purely-tactile" => {
                let visual = load_policy(checkpoint, "--checkpoint")?;
                let blind = load_policy(blind, "--blind-checkpoint")?;
                if let Some(ds) = dataset {
                    require_dir(ds, "dataset")?;
                    check_disjoint(&suite_config, &Manifest::read(ds)?)?;
                }
                purely_tactile_suite(&ctx, &visual, &blind, &suite_config, &hash, out)?
            }
            _ => unreachable!("suite names were validated"),
        })
    };
    create_out(out)?;
    let report = pool.install(run)?;
    write_run_record(out, "eval", &config, seed, inputs)?;
    print_report(&report);
    Ok(())
}

fn cmd_inspect(trace: Option<&Path>, dataset: Option<&Path>, report: Option<&Path>) -> anyhow::Result<()> {
    if let Some(path) = trace {
        require_file(path, "trace")?;
        let t = EpisodeTrace::read_jsonl(path)?;
        let o = classify_outcome(&t)?;
        let h = &t.header;
        println!(
            "episode: size {} seed {} mode {:?} agent {}",
            h.size, h.seed, h.mode, h.agent
        );
        println!("outcome: {:?} ({:?})", o.label, o.termination);
        println!("plunger_fraction = {:.2}", o.plunger_fraction);
        println!("slip events: {}, contact losses: {}", o.slip_events, o.contact_losses);
        println!(
            "duration: {:.2} s over {} steps, {} faults",
            o.duration,
            t.steps.len(),
            o.fault_log.len()
        );
    } else if let Some(path) = dataset {
        require_dir(path, "dataset")?;
        let ds = Dataset::load(path)?;
        let m = &ds.manifest;
        println!(
            "dataset: {} demonstrations, seed {}, config {}",
            m.total, m.seed, m.config_hash
        );
        let mut counted: BTreeMap<u32, usize> = BTreeMap::new();
        for d in &ds.demos {
            *counted.entry(d.size).or_default() += 1;
        }
        for (size, n) in &counted {
            let kept: usize = ds
                .demos
                .iter()
                .filter(|d| d.size == *size)
                .map(|d| d.kept().count())
                .sum();
            println!("  size {size}: {n} demonstrations, {kept} retained steps");
        }
        if counted != m.counts {
            bail!(Error::Data {
                path: path.join("manifest.json"),
                line: 0,
                message: "per-size counts disagree with the demonstration files".into(),
            });
        }
    } else if let Some(path) = report {
        require_dir(path, "report directory")?;
        print_report(&SuiteReport::read(path)?);
    } else {
        return Err(usage("inspect needs --trace, --dataset or --report"));
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Collect {
            sizes,
            per_size,
            out,
            common,
        } => cmd_collect(&sizes, per_size, &out, &common),
        Command::Train {
            dataset,
            out,
            per_size,
            no_vision,
            common,
        } => cmd_train(&dataset, &out, per_size, no_vision, &common),
        Command::Eval {
            checkpoint,
            suite,
            out,
            dataset,
            blind_checkpoint,
            trials,
            jobs,
            common,
        } => cmd_eval(
            checkpoint.as_deref(),
            &suite,
            &out,
            dataset.as_deref(),
            blind_checkpoint.as_deref(),
            trials,
            jobs,
            &common,
        ),
        Command::Inspect { trace, dataset, report } => {
            cmd_inspect(trace.as_deref(), dataset.as_deref(), report.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
