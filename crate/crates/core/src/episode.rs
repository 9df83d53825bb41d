//! Closed-loop episodes: observation, agent, controller, simulator; the
//! per-step trace and outcome classification.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::action::ActionStep;
use crate::controller::{ControllerMode, TactileController};
use crate::error::{Error, Result};
use crate::hand::{HandState, NUM_JOINTS};
use crate::sim::{ContactState, SimEvent, SimWorld, Termination};
use crate::tactile::{Finger, TactileSummary};

pub const OBJECT_PROXY_DIM: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// Joint angles (rad).
    pub q: [f64; NUM_JOINTS],
    /// Per-finger tactile summaries, thumb first.
    pub tactile: [TactileSummary; 3],
    /// Flange position (mm), barrel axis, barrel radius (mm).
    pub object_proxy: [f64; OBJECT_PROXY_DIM],
}

impl Observation {
    pub fn from_world(world: &SimWorld) -> Self {
        Self {
            q: world.q.q,
            tactile: world.summaries(),
            object_proxy: world.object_proxy(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(&self.object_proxy).all(|v| v.is_finite())
            && self
                .tactile
                .iter()
                .all(|s| s.force_z.is_finite() && s.cop_xy.iter().all(|v| v.is_finite()))
    }
}

/// Anything that maps observations to actions. The world is passed for
/// privileged agents (the scripted expert); learned policies ignore it.
pub trait Agent {
    fn act(&mut self, obs: &Observation, world: &SimWorld) -> ActionStep;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub t: f64,
    pub obs: Observation,
    pub action: ActionStep,
    pub command: [f64; NUM_JOINTS],
    /// Cartesian references (absent when the controller faulted).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_p: Option<[f64; 9]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_f: Option<[f64; 9]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_r: Option<[f64; 9]>,
    /// Contact state after the step.
    pub contacts: [ContactState; 3],
    /// Plunger fraction after the step.
    pub plunger_fraction: f64,
    /// `|F_d - f̂|` per finger, with `f̂` the calibrated tactile force.
    pub force_err: [f64; 3],
    /// `‖C_d - C_t‖` per finger (mm).
    pub cop_err: [f64; 3],
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub clamped: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fault: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub events: Vec<SimEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeHeader {
    pub size: u32,
    pub seed: u64,
    pub mode: ControllerMode,
    /// `"expert"`, `"policy"`, `"replay"`, ...
    pub agent: String,
    /// Episode started with the grasp already established.
    pub pregrasped: bool,
    pub vision: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub header: EpisodeHeader,
    pub steps: Vec<TraceStep>,
    pub termination: Option<Termination>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OutcomeLabel {
    Failure,
    PartialSuccess,
    Success,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub label: OutcomeLabel,
    pub plunger_fraction: f64,
    pub slip_events: usize,
    pub contact_losses: usize,
    pub duration: f64,
    pub termination: Termination,
    pub fault_log: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum TraceLine {
    Header(EpisodeHeader),
    Step(Box<TraceStep>),
    End {
        termination: Option<Termination>,
        outcome: Option<EpisodeOutcome>,
    },
}

impl EpisodeTrace {
    pub fn final_fraction(&self) -> f64 {
        self.steps.last().map_or(0.0, |s| s.plunger_fraction)
    }

    pub fn duration(&self) -> f64 {
        self.steps.last().map_or(0.0, |s| s.t + 1.0 / 30.0)
    }

    /// Steps at which `finger`'s pad registers contact.
    pub fn contact_onset(&self, finger: Finger) -> Option<usize> {
        self.steps
            .iter()
            .position(|s| s.obs.tactile[finger.index()].pressed_count > 0)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let outcome = classify_outcome(self).ok();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let mut line = |l: &TraceLine| -> Result<()> {
            serde_json::to_writer(&mut w, l)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))
        };
        line(&TraceLine::Header(self.header.clone()))?;
        for s in &self.steps {
            line(&TraceLine::Step(Box::new(s.clone())))?;
        }
        line(&TraceLine::End {
            termination: self.termination,
            outcome,
        })?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut header = None;
        let mut steps = Vec::new();
        let mut termination = None;
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: TraceLine = serde_json::from_str(&line).map_err(|e| Error::Data {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            match parsed {
                TraceLine::Header(h) => header = Some(h),
                TraceLine::Step(s) => steps.push(*s),
                TraceLine::End { termination: t, .. } => termination = t,
            }
        }
        let header = header.ok_or_else(|| Error::Data {
            path: path.to_path_buf(),
            line: 1,
            message: "missing trace header".into(),
        })?;
        Ok(Self {
            header,
            steps,
            termination,
        })
    }
}

/// Success: plunger fully depressed with no contact lost after the grasp.
/// Partial: some depression but not full, a thumb slip after depression
/// started, or full depression with a lost contact along the way.
/// Failure: no depression by the end, or the barrel escaped the grasp.
pub fn classify_outcome(trace: &EpisodeTrace) -> Result<EpisodeOutcome> {
    let termination = trace
        .termination
        .ok_or_else(|| Error::IncompleteTrace("episode has not terminated".into()))?;
    if trace.steps.is_empty() {
        return Err(Error::IncompleteTrace("trace has no steps".into()));
    }
    let fraction = trace.final_fraction();
    let mut slip_events = 0;
    let mut contact_losses = 0;
    for s in &trace.steps {
        for e in &s.events {
            match e {
                SimEvent::SlipStart { .. } => slip_events += 1,
                SimEvent::Lost { after_grasp: true, .. } => contact_losses += 1,
                _ => {}
            }
        }
    }
    let label = match termination {
        Termination::Escaped => OutcomeLabel::Failure,
        Termination::Depressed if contact_losses == 0 => OutcomeLabel::Success,
        Termination::Depressed => OutcomeLabel::PartialSuccess,
        Termination::ThumbSlipped | Termination::Timeout => {
            if fraction > 0.0 {
                OutcomeLabel::PartialSuccess
            } else {
                OutcomeLabel::Failure
            }
        }
    };
    Ok(EpisodeOutcome {
        label,
        plunger_fraction: fraction,
        slip_events,
        contact_losses,
        duration: trace.duration(),
        termination,
        fault_log: trace.steps.iter().filter_map(|s| s.fault.clone()).collect(),
    })
}

/// Runs `agent` in `world` through the controller until termination.
/// Controller faults are logged and the previous command is held.
pub fn run_episode_with(
    mut world: SimWorld,
    controller: &TactileController,
    mode: ControllerMode,
    agent: &mut dyn Agent,
    header: EpisodeHeader,
) -> EpisodeTrace {
    let mut steps = Vec::new();
    let mut last_command: HandState = world.q;
    while !world.is_terminated() {
        let obs = Observation::from_world(&world);
        let action = agent.act(&obs, &world).sanitized();
        let (command, reference, clamped, fault) = match controller.control_step(&world.q, &obs.tactile, &action, mode)
        {
            Ok(out) => (out.command, Some(out.reference), out.clamped, None),
            Err(e) => (last_command, None, false, Some(e.to_string())),
        };
        last_command = command;
        let t = world.time;
        let events = world.step(&command);
        let mut force_err = [0.0; 3];
        let mut cop_err = [0.0; 3];
        for f in 0..3 {
            let s = &obs.tactile[f];
            force_err[f] = (action.f_d[f] - world.estimate_force(s.force_z)).abs();
            cop_err[f] = ((action.c_d[f][0] - s.cop_xy.x).powi(2) + (action.c_d[f][1] - s.cop_xy.y).powi(2)).sqrt();
        }
        let flat = |v: nalgebra::SMatrix<f64, 9, 1>| -> [f64; 9] { v.into() };
        let x_p = reference.as_ref().map(|r| flat(r.x_p));
        let x_f = reference.as_ref().map(|r| flat(r.x_f));
        let x_r = reference.as_ref().map(|r| flat(r.x_r));
        steps.push(TraceStep {
            t,
            obs,
            action,
            command: command.q,
            x_p,
            x_f,
            x_r,
            contacts: world.contacts,
            plunger_fraction: world.plunger_fraction(),
            force_err,
            cop_err,
            clamped,
            fault,
            events,
        });
    }
    EpisodeTrace {
        header,
        steps,
        termination: world.termination,
    }
}

/// Replays a fixed action sequence open-loop; steps past the end hold
/// still with no tactile references.
pub struct ReplayAgent {
    actions: Vec<ActionStep>,
    next: usize,
}

impl ReplayAgent {
    pub fn new(actions: Vec<ActionStep>) -> Self {
        Self { actions, next: 0 }
    }
}

impl Agent for ReplayAgent {
    fn act(&mut self, _obs: &Observation, _world: &SimWorld) -> ActionStep {
        let a = self.actions.get(self.next).copied().unwrap_or_default();
        self.next += 1;
        a
    }
}

/// Whether an error series settles below `bound` within `window` steps of
/// `onset`: the last `tail` samples of the window must all be below it.
/// The window is cut short when the series ends; a window shorter than
/// `tail` does not count as converged.
pub fn settles_below(series: &[f64], onset: usize, window: usize, tail: usize, bound: f64) -> bool {
    let end = (onset + window).min(series.len());
    if end < onset + tail {
        return false;
    }
    series[end - tail..end].iter().all(|&e| e < bound)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::LossReason;

    fn step(fraction: f64, events: Vec<SimEvent>) -> TraceStep {
        TraceStep {
            t: 0.0,
            obs: Observation {
                q: [0.0; NUM_JOINTS],
                tactile: [TactileSummary::default(); 3],
                object_proxy: [0.0; 7],
            },
            action: ActionStep::default(),
            command: [0.0; NUM_JOINTS],
            x_p: None,
            x_f: None,
            x_r: None,
            contacts: [ContactState::default(); 3],
            plunger_fraction: fraction,
            force_err: [0.0; 3],
            cop_err: [0.0; 3],
            clamped: false,
            fault: None,
            events,
        }
    }

    fn trace(steps: Vec<TraceStep>, termination: Option<Termination>) -> EpisodeTrace {
        EpisodeTrace {
            header: EpisodeHeader {
                size: 30,
                seed: 0,
                mode: ControllerMode::ForceAndCoP,
                agent: "test".into(),
                pregrasped: false,
                vision: true,
            },
            steps,
            termination,
        }
    }

    #[test]
    fn full_depression_without_losses_is_success() {
        let t = trace(vec![step(0.5, vec![]), step(1.0, vec![])], Some(Termination::Depressed));
        assert_eq!(classify_outcome(&t).unwrap().label, OutcomeLabel::Success);
    }

    #[test]
    fn thumb_slip_after_partial_depression_is_partial() {
        let lost = SimEvent::Lost {
            finger: Finger::Thumb,
            reason: LossReason::SlippedOff,
            after_grasp: true,
        };
        let t = trace(
            vec![step(0.4, vec![]), step(0.4, vec![lost])],
            Some(Termination::ThumbSlipped),
        );
        assert_eq!(classify_outcome(&t).unwrap().label, OutcomeLabel::PartialSuccess);
    }

    #[test]
    fn timeout_without_depression_is_failure() {
        let t = trace(vec![step(0.0, vec![])], Some(Termination::Timeout));
        assert_eq!(classify_outcome(&t).unwrap().label, OutcomeLabel::Failure);
        let t = trace(vec![step(0.3, vec![])], Some(Termination::Escaped));
        assert_eq!(classify_outcome(&t).unwrap().label, OutcomeLabel::Failure);
    }

    #[test]
    fn unterminated_trace_is_incomplete() {
        let t = trace(vec![step(0.0, vec![])], None);
        assert!(matches!(classify_outcome(&t), Err(Error::IncompleteTrace(_))));
    }

    #[test]
    fn settling_window() {
        let s = [1.0, 0.8, 0.3, 0.1, 0.1, 0.1];
        assert!(settles_below(&s, 0, 150, 3, 0.2));
        assert!(!settles_below(&s, 0, 4, 3, 0.2));
        assert!(!settles_below(&s, 4, 150, 3, 0.2));
    }
}
