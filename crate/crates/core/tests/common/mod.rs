//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use std::sync::OnceLock;

use rand::Rng;

use dextac::controller::{ImpedanceParams, TactileController};
use dextac::eval::EvalContext;
use dextac::expert::{run_expert, Demonstration, ExpertConfig};
use dextac::hand::{HandGeometry, HandState, NUM_JOINTS};
use dextac::policy::PolicyConfig;
use dextac::sim::SimParams;

pub fn controller() -> TactileController {
    TactileController::new(HandGeometry::default(), ImpedanceParams::default()).unwrap()
}

pub fn context() -> EvalContext {
    EvalContext {
        sim: SimParams::default(),
        controller: controller(),
    }
}

pub fn random_state(g: &HandGeometry, rng: &mut impl Rng) -> HandState {
    let mut q = [0.0; NUM_JOINTS];
    for (v, (lo, hi)) in q.iter_mut().zip(g.limits()) {
        *v = rng.random_range(lo..=hi);
    }
    HandState::new(q)
}

/// A few successful expert demonstrations, computed once per test binary.
pub fn demos() -> &'static [Demonstration] {
    static DEMOS: OnceLock<Vec<Demonstration>> = OnceLock::new();
    DEMOS.get_or_init(|| {
        let ctl = controller();
        let sim = SimParams::default();
        [(30, 1), (50, 2), (60, 3)]
            .iter()
            .map(|&(size, seed)| {
                let trace = run_expert(size, seed, &sim, &ctl, &ExpertConfig::default()).unwrap();
                Demonstration::from_trace(&trace).unwrap()
            })
            .collect()
    })
}

/// A network small enough to train in well under a second.
pub fn tiny_policy_config() -> PolicyConfig {
    PolicyConfig {
        chunk_k: 4,
        latent_dim: 2,
        hidden: vec![16],
        train_steps: 20,
        batch_size: 8,
        ..PolicyConfig::default()
    }
}
