//! Scripted expert: a three-phase press routine that stands in for
//! hand-over-hand teaching, plus dataset collection and filtering.
//!
//! APPROACH moves index and middle to a standoff beside the barrel and the
//! thumb to a hover point above the head. GRASP closes index and middle
//! until contact and ramps their force. PRESS lowers the thumb onto the head,
//! ramps its force above the plunger resistance, and follows the head down.
//! The expert aims the thumb with a small per-episode offset and never
//! corrects sideways by joint motion once in contact: lateral centring is
//! left to the CoP term, with the pad centre as the desired CoP.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use nalgebra::{Vector2, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::action::{ActionStep, MAX_JOINT_STEP};
use crate::controller::{ControllerMode, TactileController};
use crate::episode::{
    classify_outcome, run_episode_with, Agent, EpisodeHeader, EpisodeTrace, Observation, OutcomeLabel,
};
use crate::error::{Error, Result};
use crate::policy::Normalization;
use crate::rng::{derive_seed, substream};
use crate::sim::{SimParams, SimWorld};
use crate::tactile::Finger;

/// Keep a step if some joint moves at least this much (rad).
pub const MIN_JOINT_CHANGE: f64 = 0.5 * std::f64::consts::PI / 180.0;
/// ... or if a tactile reference changes by more than this.
pub const MIN_REFERENCE_CHANGE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpertConfig {
    /// Std-dev of the joint-delta jitter (rad).
    pub jitter: f64,
    pub grasp_force: f64,
    /// Thumb force margin above the current plunger resistance.
    pub press_margin: f64,
    /// Radius of the per-episode thumb aim offset (mm).
    pub aim_radius: f64,
    pub hover: f64,
    pub standoff: f64,
    /// Fraction of the remaining distance covered per approach step ...
    pub approach_gain: f64,
    /// ... capped at this many mm.
    pub approach_speed: f64,
    pub close_speed: f64,
    pub descend_speed: f64,
    pub follow_speed: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            jitter: 0.005,
            grasp_force: 1.0,
            press_margin: 0.5,
            aim_radius: 1.5,
            hover: 10.0,
            standoff: 3.0,
            approach_gain: 0.35,
            approach_speed: 4.0,
            close_speed: 0.4,
            descend_speed: 1.0,
            follow_speed: 0.7,
        }
    }
}

impl ExpertConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("grasp_force", self.grasp_force),
            ("press_margin", self.press_margin),
            ("hover", self.hover),
            ("standoff", self.standoff),
            ("approach_gain", self.approach_gain),
            ("approach_speed", self.approach_speed),
            ("close_speed", self.close_speed),
            ("descend_speed", self.descend_speed),
            ("follow_speed", self.follow_speed),
        ];
        for (name, v) in fields {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("expert.{name} must be positive")));
            }
        }
        if !(self.jitter >= 0.0 && self.aim_radius >= 0.0) {
            return Err(Error::InvalidConfig(
                "expert jitter and aim radius must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Approach,
    Grasp,
    Press,
}

pub struct Expert {
    config: ExpertConfig,
    rng: ChaCha8Rng,
    jitter: Normal<f64>,
    pub phase: Phase,
    phase_steps: usize,
    aim: Vector2<f64>,
    f_d: [f64; 3],
    settled: usize,
    last_gap: [f64; 3],
}

fn clamp_norm(v: Vector3<f64>, max: f64) -> Vector3<f64> {
    let n = v.norm();
    if n > max {
        v * (max / n)
    } else {
        v
    }
}

impl Expert {
    pub fn new(config: ExpertConfig, seed: u64, size: u32) -> Self {
        let mut rng = substream(seed, "expert", size as u64);
        let r = config.aim_radius * rng.random::<f64>().sqrt();
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        let jitter = Normal::new(0.0, config.jitter.max(0.0)).expect("finite jitter");
        Self {
            aim: Vector2::new(r * phi.cos(), r * phi.sin()),
            config,
            rng,
            jitter,
            phase: Phase::Approach,
            phase_steps: 0,
            f_d: [0.0; 3],
            settled: 0,
            last_gap: [f64::INFINITY; 3],
        }
    }

    fn enter(&mut self, phase: Phase) {
        self.phase = phase;
        self.phase_steps = 0;
    }

    /// Thumb aim point: nominal head centre shifted by the aim offset in
    /// the plane normal to the axis.
    fn thumb_aim(&self, world: &SimWorld) -> Vector3<f64> {
        let a = world.syringe_axis;
        let e1 = (Vector3::x() - a * a.x).normalize();
        let e2 = a.cross(&e1);
        world.nominal_head_center() + e1 * self.aim.x + e2 * self.aim.y
    }

    fn goals(&self, world: &SimWorld) -> [Vector3<f64>; 3] {
        let c = &self.config;
        let a = world.syringe_axis;
        let (pi, ni) = world.feature(Finger::Index);
        let (pm, nm) = world.feature(Finger::Middle);
        [
            self.thumb_aim(world) + a * c.hover,
            pi + ni * c.standoff,
            pm + nm * c.standoff,
        ]
    }

    /// Desired CoP: the pad centre for every loaded finger.
    fn desired_cop(&self, _obs: &Observation) -> [[f64; 2]; 3] {
        [[0.0; 2]; 3]
    }
}

impl Agent for Expert {
    fn act(&mut self, obs: &Observation, world: &SimWorld) -> ActionStep {
        let c = self.config.clone();
        let a = world.syringe_axis;
        let tips = Finger::ALL.map(|f| world.fingertip_pose(f).position);
        let in_contact = Finger::ALL.map(|f| world.contacts[f.index()].in_contact);
        let goals = self.goals(world);
        let mut targets = tips;
        self.phase_steps += 1;

        match self.phase {
            Phase::Approach => {
                for f in 0..3 {
                    targets[f] = tips[f] + clamp_norm((goals[f] - tips[f]) * c.approach_gain, c.approach_speed);
                }
                // Done once every finger is on its goal or has stopped
                // closing in (the middle finger cannot adjust its height).
                let gaps = [0, 1, 2].map(|f| (goals[f] - tips[f]).norm());
                let done = (0..3).all(|f| gaps[f] < 1.0 || (gaps[f] < 4.0 && gaps[f] > self.last_gap[f] - 0.02));
                self.last_gap = gaps;
                if done || self.phase_steps > 90 || in_contact[1] || in_contact[2] {
                    self.enter(Phase::Grasp);
                }
            }
            Phase::Grasp | Phase::Press => {
                for f in [Finger::Index, Finger::Middle] {
                    let i = f.index();
                    if in_contact[i] {
                        self.f_d[i] = (self.f_d[i] + c.grasp_force / 5.0).min(c.grasp_force);
                    } else {
                        let (_, n) = world.feature(f);
                        targets[i] = tips[i] - n * c.close_speed;
                    }
                }
                if self.phase == Phase::Grasp {
                    targets[0] = tips[0] + clamp_norm((goals[0] - tips[0]) * c.approach_gain, c.approach_speed);
                    let held =
                        in_contact[1] && in_contact[2] && self.f_d[1] >= c.grasp_force && self.f_d[2] >= c.grasp_force;
                    self.settled = if held { self.settled + 1 } else { 0 };
                    if self.settled >= 10 {
                        self.enter(Phase::Press);
                    }
                } else if in_contact[0] {
                    let want = world.syringe.resistance_at(world.plunger_displacement) + c.press_margin;
                    self.f_d[0] = if self.f_d[0] < want {
                        (self.f_d[0] + 0.25).min(want)
                    } else {
                        want
                    };
                    targets[0] = tips[0] - a * c.follow_speed;
                } else {
                    // Descend along the axis while steering onto the aim line.
                    let aim = self.thumb_aim(world);
                    let rel = tips[0] - aim;
                    let lateral = rel - a * rel.dot(&a);
                    targets[0] = tips[0] - clamp_norm(lateral, c.approach_speed) - a * c.descend_speed;
                }
            }
        }

        let mut action = ActionStep {
            f_d: self.f_d,
            c_d: self.desired_cop(obs),
            ..ActionStep::default()
        };
        for f in Finger::ALL {
            let range = world.geometry.joint_range(f);
            let q = &obs.q[range.clone()];
            let normal = if f == Finger::Thumb { -a } else { -world.feature(f).1 };
            let sol = world
                .geometry
                .solve_posture(f, &targets[f.index()], &normal, 20.0, q, 30);
            let mut dq: Vec<f64> = sol.iter().zip(q).map(|(s, q)| s - q).collect();
            let peak = dq.iter().fold(0.0f64, |m, d| m.max(d.abs()));
            if peak > MAX_JOINT_STEP {
                dq.iter_mut().for_each(|d| *d *= MAX_JOINT_STEP / peak);
            }
            // Jitter only in free space: on a loaded contact it would just
            // rattle the finger off the surface.
            let free = !in_contact[f.index()];
            for (slot, d) in action.dq_d[range].iter_mut().zip(dq) {
                let noise = self.jitter.sample(&mut self.rng);
                *slot = if free { d + noise } else { d };
            }
        }
        action.sanitized()
    }
}

/// Keeps steps that move some joint by at least 0.5° or change a tactile
/// reference; the first step is always kept.
pub fn keep_mask(actions: &[ActionStep]) -> Vec<bool> {
    actions
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let moved = a.dq_d.iter().any(|d| d.abs() >= MIN_JOINT_CHANGE);
            let changed = i == 0 || {
                let p = &actions[i - 1];
                let df = a
                    .f_d
                    .iter()
                    .zip(&p.f_d)
                    .any(|(x, y)| (x - y).abs() > MIN_REFERENCE_CHANGE);
                let dc = a
                    .c_d
                    .iter()
                    .flatten()
                    .zip(p.c_d.iter().flatten())
                    .any(|(x, y)| (x - y).abs() > MIN_REFERENCE_CHANGE);
                df || dc
            };
            moved || changed
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoStep {
    pub t: f64,
    /// False for steps removed by the stationary-step filter; they are kept
    /// on disk so demonstrations replay exactly.
    pub kept: bool,
    pub obs: Observation,
    pub action: ActionStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub size: u32,
    pub seed: u64,
    pub outcome: OutcomeLabel,
    pub steps: Vec<DemoStep>,
}

impl Demonstration {
    pub fn from_trace(trace: &EpisodeTrace) -> Result<Self> {
        let outcome = classify_outcome(trace)?.label;
        let actions: Vec<ActionStep> = trace.steps.iter().map(|s| s.action).collect();
        let keep = keep_mask(&actions);
        Ok(Self {
            size: trace.header.size,
            seed: trace.header.seed,
            outcome,
            steps: trace
                .steps
                .iter()
                .zip(keep)
                .map(|(s, kept)| DemoStep {
                    t: s.t,
                    kept,
                    obs: s.obs,
                    action: s.action,
                })
                .collect(),
        })
    }

    pub fn kept(&self) -> impl Iterator<Item = &DemoStep> {
        self.steps.iter().filter(|s| s.kept)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        for s in &self.steps {
            serde_json::to_writer(&mut buf, s)?;
            buf.push(b'\n');
        }
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path, size: u32, seed: u64) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut steps = Vec::new();
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let step: DemoStep = serde_json::from_str(&line).map_err(|e| Error::Data {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            steps.push(step);
        }
        Ok(Self {
            size,
            seed,
            outcome: OutcomeLabel::Success,
            steps,
        })
    }
}

pub fn expert_header(size: u32, seed: u64, agent: &str) -> EpisodeHeader {
    EpisodeHeader {
        size,
        seed,
        mode: ControllerMode::ForceAndCoP,
        agent: agent.into(),
        pregrasped: false,
        vision: true,
    }
}

/// One expert episode in a fresh world.
pub fn run_expert(
    size: u32,
    seed: u64,
    sim: &SimParams,
    controller: &TactileController,
    config: &ExpertConfig,
) -> Result<EpisodeTrace> {
    let world = SimWorld::spawn(size, seed, sim, &controller.geometry)?;
    let mut expert = Expert::new(config.clone(), seed, size);
    Ok(run_episode_with(
        world,
        controller,
        ControllerMode::ForceAndCoP,
        &mut expert,
        expert_header(size, seed, "expert"),
    ))
}

/// Re-executes stored actions open-loop in a fresh world.
pub fn replay(demo: &Demonstration, sim: &SimParams, controller: &TactileController) -> Result<EpisodeTrace> {
    let world = SimWorld::spawn(demo.size, demo.seed, sim, &controller.geometry)?;
    let mut agent = crate::episode::ReplayAgent::new(demo.steps.iter().map(|s| s.action).collect());
    Ok(run_episode_with(
        world,
        controller,
        ControllerMode::ForceAndCoP,
        &mut agent,
        expert_header(demo.size, demo.seed, "replay"),
    ))
}

/// Seed of the `attempt`-th demonstration episode for `size`.
pub fn demo_seed(seed: u64, size: u32, attempt: usize) -> u64 {
    derive_seed(seed, &format!("demo/{size}"), attempt as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoEntry {
    pub size: u32,
    pub seed: u64,
    pub file: String,
    pub steps: usize,
    pub kept_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub sizes: Vec<u32>,
    pub per_size: usize,
    /// Retained demonstrations per size.
    pub counts: BTreeMap<u32, usize>,
    /// Episodes run per size to reach the count.
    pub attempts: BTreeMap<u32, usize>,
    pub total: usize,
    /// Feature and action scales fitted over every retained step.
    pub normalization: Normalization,
    pub demos: Vec<DemoEntry>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data {
            path,
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.json");
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub demos: Vec<Demonstration>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = Manifest::read(dir)?;
        let mut demos = Vec::with_capacity(manifest.demos.len());
        for entry in &manifest.demos {
            let path = dir.join(&entry.file);
            let demo = Demonstration::read_jsonl(&path, entry.size, entry.seed)?;
            if demo.steps.len() != entry.steps || demo.kept().count() != entry.kept_steps {
                return Err(Error::Data {
                    path,
                    line: 0,
                    message: "record count disagrees with the manifest".into(),
                });
            }
            demos.push(demo);
        }
        Ok(Self { manifest, demos })
    }

    /// The first `n` demonstrations of every size (collection order), so
    /// smaller subsets are nested in larger ones.
    pub fn subset(&self, n: usize) -> Vec<&Demonstration> {
        let mut taken: BTreeMap<u32, usize> = BTreeMap::new();
        self.demos
            .iter()
            .filter(|d| {
                let k = taken.entry(d.size).or_default();
                *k += 1;
                *k <= n
            })
            .collect()
    }
}

/// Collects `per_size` successful demonstrations per size and writes
/// `manifest.json` and `demos/<size>/<seed>.jsonl` under `out`.
#[allow(clippy::too_many_arguments)]
pub fn collect(
    per_size: usize,
    sizes: &[u32],
    seed: u64,
    sim: &SimParams,
    controller: &TactileController,
    config: &ExpertConfig,
    config_hash: &str,
    out: &Path,
) -> Result<Dataset> {
    if per_size == 0 {
        return Err(Error::InvalidConfig(
            "per-size demonstration count must be at least 1".into(),
        ));
    }
    for &s in sizes {
        sim.syringe(s)?;
    }
    let budget = 5 * per_size;
    let mut demos = Vec::new();
    let mut counts = BTreeMap::new();
    let mut attempts = BTreeMap::new();
    for &size in sizes {
        let mut kept: Vec<Demonstration> = Vec::new();
        let mut tried = 0;
        while kept.len() < per_size && tried < budget {
            let batch = (per_size - kept.len()).max(4).min(budget - tried);
            let results: Vec<Result<EpisodeTrace>> = (tried..tried + batch)
                .into_par_iter()
                .map(|k| run_expert(size, demo_seed(seed, size, k), sim, controller, config))
                .collect();
            for r in results {
                tried += 1;
                let trace = r?;
                if kept.len() < per_size && classify_outcome(&trace)?.label == OutcomeLabel::Success {
                    kept.push(Demonstration::from_trace(&trace)?);
                }
            }
        }
        if kept.len() < per_size {
            return Err(Error::ExpertStarvation {
                size,
                successes: kept.len(),
                wanted: per_size,
                attempts: tried,
            });
        }
        counts.insert(size, kept.len());
        attempts.insert(size, tried);
        demos.extend(kept);
    }

    let mut entries = Vec::with_capacity(demos.len());
    for d in &demos {
        let rel = PathBuf::from("demos")
            .join(d.size.to_string())
            .join(format!("{}.jsonl", d.seed));
        let path = out.join(&rel);
        let parent = path.parent().expect("demo path has a parent");
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        d.write_jsonl(&path)?;
        entries.push(DemoEntry {
            size: d.size,
            seed: d.seed,
            file: rel.to_string_lossy().replace('\\', "/"),
            steps: d.steps.len(),
            kept_steps: d.kept().count(),
        });
    }
    let manifest = Manifest {
        config_hash: config_hash.into(),
        seed,
        sizes: sizes.to_vec(),
        per_size,
        counts,
        attempts,
        total: demos.len(),
        normalization: Normalization::fit(&demos)?,
        demos: entries,
    };
    manifest.write(out)?;
    Ok(Dataset { manifest, demos })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::ImpedanceParams;
    use crate::hand::HandGeometry;

    fn controller() -> TactileController {
        TactileController::new(HandGeometry::default(), ImpedanceParams::default()).unwrap()
    }

    #[test]
    fn stationary_segment_is_filtered() {
        let a = ActionStep {
            f_d: [0.0, 1.0, 1.0],
            ..ActionStep::default()
        };
        let mut moving = a;
        moving.dq_d[4] = 0.02;
        let actions = vec![moving, a, a, a, moving];
        assert_eq!(keep_mask(&actions), vec![true, false, false, false, true]);
    }

    #[test]
    fn reference_change_is_kept_even_when_static() {
        let a = ActionStep::default();
        let mut b = a;
        b.f_d[0] = 1e-5;
        assert_eq!(keep_mask(&[a, a, b]), vec![true, false, true]);
    }

    #[test]
    fn approach_has_zero_force() {
        let sim = SimParams::default();
        let ctl = controller();
        let world = SimWorld::spawn(30, 1, &sim, &ctl.geometry).unwrap();
        let mut e = Expert::new(ExpertConfig::default(), 1, 30);
        let obs = Observation::from_world(&world);
        let a = e.act(&obs, &world);
        assert_eq!(e.phase, Phase::Approach);
        assert_eq!(a.f_d, [0.0; 3]);
        assert!(a.is_valid());
    }

    #[test]
    fn expert_episode_succeeds() {
        let sim = SimParams::default();
        let ctl = controller();
        let trace = run_expert(30, 5, &sim, &ctl, &ExpertConfig::default()).unwrap();
        let out = classify_outcome(&trace).unwrap();
        assert_eq!(out.label, OutcomeLabel::Success, "{out:?}");
    }
}
