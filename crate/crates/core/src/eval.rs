//! Evaluation suites: ablation over controller modes, zero-shot size
//! transfer, the data-efficiency sweep and the purely tactile conditions.
//!
//! Episodes run in parallel on the ambient rayon pool; results are gathered
//! in construction order, (policy, size, seed), so reports do not depend on
//! scheduling.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controller::{ControllerMode, TactileController};
use crate::episode::{
    classify_outcome, run_episode_with, settles_below, EpisodeHeader, EpisodeOutcome, EpisodeTrace, OutcomeLabel,
};
use crate::error::{Error, Result};
use crate::expert::{demo_seed, Dataset, Manifest};
use crate::policy::{train, Normalization, Policy, PolicyAgent, PolicyConfig};
use crate::rng::derive_seed;
use crate::sim::{SimParams, SimWorld, Termination};
use crate::tactile::Finger;

/// Steps after thumb contact within which the errors must have settled.
pub const CONVERGENCE_WINDOW: usize = 150;
/// Consecutive samples that must sit below the bound at the end of the window.
pub const SETTLE_TAIL: usize = 15;
/// Force error bound (calibrated force units).
pub const FORCE_BOUND: f64 = 0.2;
/// CoP error bound (mm).
pub const COP_BOUND: f64 = 0.5;

/// Simulator and controller shared by every episode of a suite.
#[derive(Debug, Clone)]
pub struct EvalContext {
    pub sim: SimParams,
    pub controller: TactileController,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteConfig {
    pub sizes: Vec<u32>,
    pub trials_per_size: usize,
    /// Eval seeds are derived from this; see [`eval_seeds`].
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            sizes: vec![30, 50, 60],
            trials_per_size: 20,
            seed: 0,
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials_per_size == 0 {
            return Err(Error::InvalidConfig("suite: trials_per_size must be at least 1".into()));
        }
        if self.sizes.is_empty() {
            return Err(Error::InvalidConfig("suite: no sizes".into()));
        }
        let distinct: BTreeSet<_> = self.sizes.iter().collect();
        if distinct.len() != self.sizes.len() {
            return Err(Error::InvalidConfig("suite: repeated size".into()));
        }
        let mut seen = BTreeSet::new();
        for &size in &self.sizes {
            for s in eval_seeds(self.seed, size, self.trials_per_size) {
                if !seen.insert(s) {
                    return Err(Error::InvalidConfig(format!("suite: eval seed {s} repeats")));
                }
            }
        }
        Ok(())
    }

    fn with_sizes(&self, sizes: &[u32]) -> Self {
        Self {
            sizes: sizes.to_vec(),
            ..self.clone()
        }
    }
}

/// World seeds for evaluating `size`. They come from their own substream,
/// never from the one demonstrations are drawn from.
pub fn eval_seeds(seed: u64, size: u32, n: usize) -> Vec<u64> {
    (0..n as u64)
        .map(|i| derive_seed(seed, &format!("eval/{size}"), i))
        .collect()
}

/// Every world seed the collection behind `manifest` touched, including
/// rejected attempts.
pub fn demonstration_seeds(manifest: &Manifest) -> BTreeSet<u64> {
    let mut seeds: BTreeSet<u64> = manifest.demos.iter().map(|d| d.seed).collect();
    for (&size, &attempts) in &manifest.attempts {
        seeds.extend((0..attempts).map(|k| demo_seed(manifest.seed, size, k)));
    }
    seeds
}

/// Fails if any eval seed of `config` was used for a demonstration.
pub fn check_disjoint(config: &SuiteConfig, manifest: &Manifest) -> Result<()> {
    let demo = demonstration_seeds(manifest);
    for &size in &config.sizes {
        if let Some(s) = eval_seeds(config.seed, size, config.trials_per_size)
            .iter()
            .find(|s| demo.contains(s))
        {
            return Err(Error::InvalidConfig(format!(
                "eval seed {s} was used for a demonstration"
            )));
        }
    }
    Ok(())
}

/// Whether the thumb's force and CoP errors settled after contact.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    /// First step with thumb contact.
    pub onset: Option<usize>,
    pub force: bool,
    pub cop: bool,
}

pub fn thumb_convergence(trace: &EpisodeTrace) -> Convergence {
    let i = Finger::Thumb.index();
    let onset = trace.contact_onset(Finger::Thumb);
    let settled = |bound: f64, series: Vec<f64>| {
        onset.is_some_and(|o| settles_below(&series, o, CONVERGENCE_WINDOW, SETTLE_TAIL, bound))
    };
    Convergence {
        onset,
        force: settled(FORCE_BOUND, trace.steps.iter().map(|s| s.force_err[i]).collect()),
        cop: settled(COP_BOUND, trace.steps.iter().map(|s| s.cop_err[i]).collect()),
    }
}

/// Runs `policy` closed-loop in a fresh world. Whether the object proxy is
/// visible is a property of the checkpoint (`config.vision`).
pub fn run_episode(
    ctx: &EvalContext,
    policy: &Policy,
    mode: ControllerMode,
    size: u32,
    seed: u64,
    pregrasped: bool,
) -> Result<(EpisodeOutcome, EpisodeTrace)> {
    let geometry = &ctx.controller.geometry;
    let world = if pregrasped {
        SimWorld::spawn_grasped(size, seed, &ctx.sim, geometry)?
    } else {
        SimWorld::spawn(size, seed, &ctx.sim, geometry)?
    };
    let header = EpisodeHeader {
        size,
        seed,
        mode,
        agent: "policy".into(),
        pregrasped,
        vision: policy.config.vision,
    };
    let mut agent = PolicyAgent::new(policy);
    let trace = run_episode_with(world, &ctx.controller, mode, &mut agent, header);
    let outcome = classify_outcome(&trace)?;
    Ok((outcome, trace))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub seed: u64,
    pub label: OutcomeLabel,
    pub plunger_fraction: f64,
    pub slip_events: usize,
    pub contact_losses: usize,
    pub duration: f64,
    pub termination: Termination,
    pub faults: usize,
    pub convergence: Convergence,
    /// Trace and error-series files, relative to the report directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub errors: Option<String>,
}

/// One (policy, size) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub policy: String,
    pub size: u32,
    pub failure: usize,
    pub partial: usize,
    pub success: usize,
    pub success_rate: f64,
    pub mean_plunger_fraction: f64,
    pub mean_slip_events: f64,
    pub episodes: Vec<EpisodeRecord>,
}

impl CellReport {
    pub fn trials(&self) -> usize {
        self.episodes.len()
    }
}

/// Totals for one policy over all its cells.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tally {
    pub trials: usize,
    pub success: usize,
    pub force_converged: usize,
    pub cop_converged: usize,
}

impl Tally {
    pub fn success_rate(&self) -> f64 {
        ratio(self.success, self.trials)
    }

    pub fn force_rate(&self) -> f64 {
        ratio(self.force_converged, self.trials)
    }

    pub fn cop_rate(&self) -> f64 {
        ratio(self.cop_converged, self.trials)
    }
}

fn ratio(k: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        k as f64 / n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub config_hash: String,
    pub seed: u64,
    pub cells: Vec<CellReport>,
}

impl SuiteReport {
    pub fn cell(&self, policy: &str, size: u32) -> Option<&CellReport> {
        self.cells.iter().find(|c| c.policy == policy && c.size == size)
    }

    pub fn policies(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for c in &self.cells {
            if !out.contains(&c.policy.as_str()) {
                out.push(&c.policy);
            }
        }
        out
    }

    pub fn tally(&self, policy: &str) -> Tally {
        let mut t = Tally {
            trials: 0,
            success: 0,
            force_converged: 0,
            cop_converged: 0,
        };
        for c in self.cells.iter().filter(|c| c.policy == policy) {
            t.trials += c.trials();
            t.success += c.success;
            t.force_converged += c.episodes.iter().filter(|e| e.convergence.force).count();
            t.cop_converged += c.episodes.iter().filter(|e| e.convergence.cop).count();
        }
        t
    }

    /// `report.json` and `report.csv` in `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        create_dir(dir)?;
        let path = dir.join("report.json");
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        let mut csv = String::from("policy,size,F,P,S,rate\n");
        for c in &self.cells {
            csv.push_str(&format!(
                "{},{},{},{},{},{:.4}\n",
                c.policy, c.size, c.failure, c.partial, c.success, c.success_rate
            ));
        }
        let path = dir.join("report.csv");
        std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("report.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data {
            path,
            line: e.line(),
            message: e.to_string(),
        })
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// One episode to run.
struct Trial<'a> {
    policy_label: String,
    policy: &'a Policy,
    mode: ControllerMode,
    size: u32,
    seed: u64,
    pregrasped: bool,
}

fn write_error_csv(trace: &EpisodeTrace, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut body = || -> std::io::Result<()> {
        writeln!(w, "t,finger,force_err,cop_err")?;
        for s in &trace.steps {
            for f in Finger::ALL {
                let i = f.index();
                writeln!(w, "{:.4},{},{:.6},{:.6}", s.t, f, s.force_err[i], s.cop_err[i])?;
            }
        }
        w.flush()
    };
    body().map_err(|e| Error::io(path, e))
}

fn run_trial(ctx: &EvalContext, trial: &Trial, out: Option<&Path>) -> Result<EpisodeRecord> {
    let (o, trace) = run_episode(ctx, trial.policy, trial.mode, trial.size, trial.seed, trial.pregrasped)?;
    let (trace_file, error_file) = match out {
        Some(dir) => {
            let stem = format!("{}_{}_{}", trial.policy_label.replace('/', "-"), trial.size, trial.seed);
            let t = format!("traces/{stem}.jsonl");
            let e = format!("errors/{stem}.csv");
            trace.write_jsonl(&dir.join(&t))?;
            write_error_csv(&trace, &dir.join(&e))?;
            (Some(t), Some(e))
        }
        None => (None, None),
    };
    Ok(EpisodeRecord {
        seed: trial.seed,
        label: o.label,
        plunger_fraction: o.plunger_fraction,
        slip_events: o.slip_events,
        contact_losses: o.contact_losses,
        duration: o.duration,
        termination: o.termination,
        faults: o.fault_log.len(),
        convergence: thumb_convergence(&trace),
        trace: trace_file,
        errors: error_file,
    })
}

/// Runs every trial and groups the records into cells in trial order.
fn run_trials(ctx: &EvalContext, trials: Vec<Trial>, out: Option<&Path>) -> Result<Vec<CellReport>> {
    if let Some(dir) = out {
        create_dir(&dir.join("traces"))?;
        create_dir(&dir.join("errors"))?;
    }
    let records: Vec<EpisodeRecord> = trials
        .par_iter()
        .map(|t| run_trial(ctx, t, out))
        .collect::<Result<_>>()?;
    let mut cells: Vec<CellReport> = Vec::new();
    for (t, r) in trials.iter().zip(records) {
        let fresh = cells
            .last()
            .is_none_or(|c| c.policy != t.policy_label || c.size != t.size);
        if fresh {
            cells.push(CellReport {
                policy: t.policy_label.clone(),
                size: t.size,
                failure: 0,
                partial: 0,
                success: 0,
                success_rate: 0.0,
                mean_plunger_fraction: 0.0,
                mean_slip_events: 0.0,
                episodes: Vec::new(),
            });
        }
        let c = cells.last_mut().expect("a cell was just pushed");
        match r.label {
            OutcomeLabel::Failure => c.failure += 1,
            OutcomeLabel::PartialSuccess => c.partial += 1,
            OutcomeLabel::Success => c.success += 1,
        }
        c.episodes.push(r);
    }
    for c in &mut cells {
        let n = c.episodes.len() as f64;
        c.success_rate = c.success as f64 / n;
        c.mean_plunger_fraction = c.episodes.iter().map(|e| e.plunger_fraction).sum::<f64>() / n;
        c.mean_slip_events = c.episodes.iter().map(|e| e.slip_events as f64).sum::<f64>() / n;
    }
    Ok(cells)
}

fn mode_trials<'a>(policy: &'a Policy, modes: &[ControllerMode], config: &SuiteConfig) -> Vec<Trial<'a>> {
    let mut trials = Vec::new();
    for &mode in modes {
        for &size in &config.sizes {
            for seed in eval_seeds(config.seed, size, config.trials_per_size) {
                trials.push(Trial {
                    policy_label: mode.policy_name().into(),
                    policy,
                    mode,
                    size,
                    seed,
                    pregrasped: false,
                });
            }
        }
    }
    trials
}

fn finish(
    suite: &str,
    config_hash: &str,
    config: &SuiteConfig,
    cells: Vec<CellReport>,
    out: Option<&Path>,
) -> Result<SuiteReport> {
    let report = SuiteReport {
        suite: suite.into(),
        config_hash: config_hash.into(),
        seed: config.seed,
        cells,
    };
    if let Some(dir) = out {
        report.write(dir)?;
    }
    Ok(report)
}

/// One checkpoint under all three controller modes.
pub fn ablation_suite(
    ctx: &EvalContext,
    policy: &Policy,
    config: &SuiteConfig,
    config_hash: &str,
    out: Option<&Path>,
) -> Result<SuiteReport> {
    config.validate()?;
    let cells = run_trials(ctx, mode_trials(policy, &ControllerMode::ALL, config), out)?;
    finish("ablation", config_hash, config, cells, out)
}

/// Like the ablation, on sizes the training data never contained.
pub fn zero_shot_suite(
    ctx: &EvalContext,
    policy: &Policy,
    manifest: &Manifest,
    config: &SuiteConfig,
    config_hash: &str,
    out: Option<&Path>,
) -> Result<SuiteReport> {
    config.validate()?;
    for &size in &config.sizes {
        if manifest.sizes.contains(&size) || manifest.demos.iter().any(|d| d.size == size) {
            return Err(Error::InvalidConfig(format!(
                "size {size} appears in the training data"
            )));
        }
    }
    let cells = run_trials(ctx, mode_trials(policy, &ControllerMode::ALL, config), out)?;
    finish("zero-shot", config_hash, config, cells, out)
}

/// Success rate against the number of demonstrations per size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyRow {
    pub demos_per_size: usize,
    /// `None` for the row over all sizes.
    pub size: Option<u32>,
    pub success: usize,
    pub trials: usize,
    pub success_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub rows: Vec<EfficiencyRow>,
    pub suite: SuiteReport,
}

impl EfficiencyReport {
    pub fn rate(&self, demos_per_size: usize, size: u32) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.demos_per_size == demos_per_size && r.size == Some(size))
            .map(|r| r.success_rate)
    }
}

pub const EFFICIENCY_COUNTS: [usize; 5] = [10, 20, 30, 40, 50];

fn efficiency_label(n: usize) -> String {
    format!("demos_{n}")
}

/// Trains one checkpoint per entry of `counts` on the nested subsets of
/// `dataset` and evaluates each in ForceAndCoP mode. Normalization is
/// refitted on each subset. Checkpoints go to `out/checkpoints/`, the
/// curve to `out/efficiency.csv`.
pub fn data_efficiency_suite(
    ctx: &EvalContext,
    dataset: &Dataset,
    policy_config: &PolicyConfig,
    counts: &[usize],
    config: &SuiteConfig,
    config_hash: &str,
    out: Option<&Path>,
) -> Result<(EfficiencyReport, Vec<Policy>)> {
    config.validate()?;
    check_disjoint(config, &dataset.manifest)?;
    if counts.is_empty() || counts.contains(&0) {
        return Err(Error::InvalidConfig(
            "data efficiency: subset sizes must be positive".into(),
        ));
    }
    for &size in &config.sizes {
        let have = dataset.demos.iter().filter(|d| d.size == size).count();
        let want = counts.iter().copied().max().unwrap_or(0);
        if have < want {
            return Err(Error::InvalidConfig(format!(
                "data efficiency: size {size} has {have} demonstrations, need {want}"
            )));
        }
    }
    let policies: Vec<Policy> = counts
        .par_iter()
        .map(|&n| {
            let demos: Vec<_> = dataset
                .subset(n)
                .into_iter()
                .filter(|d| config.sizes.contains(&d.size))
                .collect();
            let norm = Normalization::fit(demos.iter().copied())?;
            train(&demos, &norm, policy_config).map(|(p, _)| p)
        })
        .collect::<Result<_>>()?;
    if let Some(dir) = out {
        let ck = dir.join("checkpoints");
        create_dir(&ck)?;
        for (n, p) in counts.iter().zip(&policies) {
            p.save(&ck.join(format!("{}.ckpt", efficiency_label(*n))))?;
        }
    }

    let mut trials = Vec::new();
    for (&n, p) in counts.iter().zip(&policies) {
        for mut t in mode_trials(p, &[ControllerMode::ForceAndCoP], config) {
            t.policy_label = efficiency_label(n);
            trials.push(t);
        }
    }
    let cells = run_trials(ctx, trials, out)?;
    let suite = finish("data-efficiency", config_hash, config, cells, out)?;

    let mut rows = Vec::new();
    for &n in counts {
        let label = efficiency_label(n);
        for &size in &config.sizes {
            let c = suite.cell(&label, size).expect("every (count, size) cell was run");
            rows.push(EfficiencyRow {
                demos_per_size: n,
                size: Some(size),
                success: c.success,
                trials: c.trials(),
                success_rate: c.success_rate,
            });
        }
        let t = suite.tally(&label);
        rows.push(EfficiencyRow {
            demos_per_size: n,
            size: None,
            success: t.success,
            trials: t.trials,
            success_rate: t.success_rate(),
        });
    }
    let report = EfficiencyReport { rows, suite };
    if let Some(dir) = out {
        let mut csv = String::from("demos_per_size,size,success,trials,rate\n");
        for r in &report.rows {
            let size = r.size.map_or("all".to_string(), |s| s.to_string());
            csv.push_str(&format!(
                "{},{},{},{},{:.4}\n",
                r.demos_per_size, size, r.success, r.trials, r.success_rate
            ));
        }
        let path = dir.join("efficiency.csv");
        std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
        let path = dir.join("efficiency.json");
        let mut text = serde_json::to_string_pretty(&report.rows)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok((report, policies))
}

/// Labels of the four purely tactile conditions.
pub const TACTILE_CONDITIONS: [&str; 4] = ["A/visual", "A/blind", "B/visual", "B/blind"];

/// Condition A starts from the open hand, B from an established grasp;
/// each is run with a checkpoint that sees the object proxy and one
/// trained without it. Always in ForceAndCoP mode.
pub fn purely_tactile_suite(
    ctx: &EvalContext,
    visual: &Policy,
    blind: &Policy,
    config: &SuiteConfig,
    config_hash: &str,
    out: Option<&Path>,
) -> Result<SuiteReport> {
    config.validate()?;
    if !visual.config.vision || blind.config.vision {
        return Err(Error::InvalidConfig(
            "purely tactile: need one checkpoint with vision and one without".into(),
        ));
    }
    let mut trials = Vec::new();
    for (label, (pregrasped, policy)) in
        TACTILE_CONDITIONS
            .iter()
            .zip([(false, visual), (false, blind), (true, visual), (true, blind)])
    {
        for &size in &config.sizes {
            for seed in eval_seeds(config.seed, size, config.trials_per_size) {
                trials.push(Trial {
                    policy_label: (*label).into(),
                    policy,
                    mode: ControllerMode::ForceAndCoP,
                    size,
                    seed,
                    pregrasped,
                });
            }
        }
    }
    let cells = run_trials(ctx, trials, out)?;
    finish("purely-tactile", config_hash, config, cells, out)
}

/// Resolves a trace reference from a report in `dir`.
pub fn trace_path(dir: &Path, record: &EpisodeRecord) -> Option<PathBuf> {
    record.trace.as_ref().map(|t| dir.join(t))
}

/// Default suite settings: the training sizes for the ablation and the sweep,
/// the unseen size for zero-shot, the middle size for the tactile study.
pub fn default_suite(name: &str) -> Option<SuiteConfig> {
    let base = SuiteConfig::default();
    match name {
        "ablation" | "data-efficiency" => Some(base),
        "zero-shot" => Some(base.with_sizes(&[20])),
        "purely-tactile" => Some(base.with_sizes(&[50])),
        _ => None,
    }
}
