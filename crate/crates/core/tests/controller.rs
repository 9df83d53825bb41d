mod common;

use nalgebra::Vector2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dextac::action::ActionStep;
use dextac::controller::ControllerMode;
use dextac::episode::{run_episode_with, Agent, EpisodeHeader, Observation};
use dextac::hand::NUM_JOINTS;
use dextac::sim::{SimParams, SimWorld};
use dextac::tactile::{Finger, TactileSummary};

fn random_inputs(seed: u64) -> (dextac::hand::HandState, [TactileSummary; 3], ActionStep) {
    let ctl = common::controller();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = common::random_state(&ctl.geometry, &mut rng);
    let summaries = [0; 3].map(|_| TactileSummary {
        force_z: rng.random_range(0.0..5.0),
        cop_xy: Vector2::new(rng.random_range(-5.0..5.0), rng.random_range(-3.0..3.0)),
        pressed_count: rng.random_range(1..40),
    });
    let mut a = ActionStep::default();
    for d in a.dq_d.iter_mut() {
        *d = rng.random_range(-0.02..0.02);
    }
    a.f_d = [0; 3].map(|_| rng.random_range(0.0..2.0));
    a.c_d = [0; 3].map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0)]);
    (q, summaries, a)
}

proptest! {
    #[test]
    fn modes_nest(seed in any::<u64>()) {
        let ctl = common::controller();
        let (q, s, a) = random_inputs(seed);
        let nt = ctl.control_step(&q, &s, &a, ControllerMode::NoTactile).unwrap().reference;
        prop_assert_eq!(nt.x_f, nt.x_p);
        prop_assert_eq!(nt.x_r, nt.x_p);
        if let Ok(out) = ctl.control_step(&q, &s, &a, ControllerMode::ForceOnly) {
            prop_assert_eq!(out.reference.x_r, out.reference.x_f);
            prop_assert_eq!(out.reference.x_p, nt.x_p);
        }
    }

    #[test]
    fn matched_references_leave_the_plan_alone(seed in any::<u64>()) {
        let ctl = common::controller();
        let (q, s, mut a) = random_inputs(seed);
        a.f_d = [0.0; 3];
        a.c_d = s.map(|t| [t.cop_xy.x, t.cop_xy.y]);
        let r = ctl.control_step(&q, &s, &a, ControllerMode::ForceAndCoP).unwrap().reference;
        prop_assert!((r.x_r - r.x_p).norm() <= 1e-12);
    }

    #[test]
    fn without_contact_cop_reference_is_ignored(seed in any::<u64>()) {
        let ctl = common::controller();
        let (q, mut s, a) = random_inputs(seed);
        for t in s.iter_mut() {
            t.pressed_count = 0;
        }
        if let Ok(out) = ctl.control_step(&q, &s, &a, ControllerMode::ForceAndCoP) {
            prop_assert_eq!(out.reference.x_r, out.reference.x_f);
        }
    }
}

/// Holds the posture, presses with unit force and asks for a fixed thumb CoP.
struct HoldAt {
    c_d: [f64; 2],
}

impl Agent for HoldAt {
    fn act(&mut self, _obs: &Observation, _world: &SimWorld) -> ActionStep {
        ActionStep {
            dq_d: [0.0; NUM_JOINTS],
            f_d: [1.0; 3],
            c_d: [self.c_d, [0.0; 2], [0.0; 2]],
        }
    }
}

#[test]
fn thumb_cop_converges_to_a_fixed_target() {
    let ctl = common::controller();
    let sim = SimParams::default();
    for (seed, c_d) in [(1, [1.0, 0.5]), (2, [-1.5, 0.0]), (3, [0.0, -1.0])] {
        let world = SimWorld::spawn_grasped(50, seed, &sim, &ctl.geometry).unwrap();
        let header = EpisodeHeader {
            size: 50,
            seed,
            mode: ControllerMode::ForceAndCoP,
            agent: "hold".into(),
            pregrasped: true,
            vision: true,
        };
        let trace = run_episode_with(world, &ctl, ControllerMode::ForceAndCoP, &mut HoldAt { c_d }, header);
        let i = Finger::Thumb.index();
        let err: Vec<f64> = trace.steps.iter().map(|s| s.cop_err[i]).collect();
        assert!(
            trace.steps.iter().all(|s| s.contacts[i].in_contact),
            "seed {seed}: thumb lost contact"
        );
        assert!(err[149] < 0.5, "seed {seed}: CoP error {} after 150 steps", err[149]);
        // past the transient the error only rises by CoP quantization on the lattice
        let mut best = f64::INFINITY;
        for (t, &e) in err[..150].iter().enumerate() {
            if t >= 10 {
                assert!(
                    e <= best + 0.05,
                    "seed {seed}: CoP error rose to {e} from {best} at step {t}"
                );
            }
            best = best.min(e);
        }
    }
}

#[test]
fn no_tactile_mode_never_corrects_the_cop() {
    let ctl = common::controller();
    let sim = SimParams::default();
    let world = SimWorld::spawn_grasped(50, 1, &sim, &ctl.geometry).unwrap();
    let header = EpisodeHeader {
        size: 50,
        seed: 1,
        mode: ControllerMode::NoTactile,
        agent: "hold".into(),
        pregrasped: true,
        vision: true,
    };
    let trace = run_episode_with(
        world,
        &ctl,
        ControllerMode::NoTactile,
        &mut HoldAt { c_d: [1.0, 0.5] },
        header,
    );
    // holding the measured (deflected) posture backs the fingers off the barrel
    let i = Finger::Thumb.index();
    assert!(trace.steps.iter().all(|s| s.cop_err[i] > 0.5));
}
