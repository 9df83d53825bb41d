mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dextac::hand::HandState;
use dextac::sim::{SimParams, SimWorld};

fn sizes() -> impl Strategy<Value = u32> {
    prop::sample::select(vec![20u32, 30, 50, 60])
}

/// Drives the world with random small joint moves from `rng`; returns the
/// plunger fraction after every step.
fn wander(world: &mut SimWorld, rng: &mut ChaCha8Rng, steps: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for _ in 0..steps {
        if world.is_terminated() {
            break;
        }
        let mut q = world.q.q;
        for v in q.iter_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
        let (cmd, _) = world.geometry.clamp(&q);
        world.step(&cmd);
        out.push(world.plunger_fraction());
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn plunger_only_moves_forward(size in sizes(), seed in any::<u64>(), drive in any::<u64>()) {
        let g = common::controller().geometry;
        let mut world = SimWorld::spawn_grasped(size, seed, &SimParams::default(), &g).unwrap();
        let series = wander(&mut world, &mut ChaCha8Rng::seed_from_u64(drive), 120);
        let mut last = 0.0;
        for f in series {
            prop_assert!((0.0..=1.0).contains(&f));
            prop_assert!(f >= last);
            last = f;
        }
    }

    #[test]
    fn worlds_replay_exactly(size in sizes(), seed in any::<u64>(), drive in any::<u64>()) {
        let g = common::controller().geometry;
        let sim = SimParams::default();
        let mut a = SimWorld::spawn(size, seed, &sim, &g).unwrap();
        let mut b = SimWorld::spawn(size, seed, &sim, &g).unwrap();
        wander(&mut a, &mut ChaCha8Rng::seed_from_u64(drive), 60);
        wander(&mut b, &mut ChaCha8Rng::seed_from_u64(drive), 60);
        prop_assert_eq!(a.q, b.q);
        prop_assert_eq!(a.contacts, b.contacts);
        prop_assert_eq!(a.plunger_displacement, b.plunger_displacement);
        prop_assert_eq!(a.summaries(), b.summaries());
    }

    #[test]
    fn grasped_spawn_touches_with_every_finger(size in sizes(), seed in any::<u64>()) {
        let g = common::controller().geometry;
        let world = SimWorld::spawn_grasped(size, seed, &SimParams::default(), &g).unwrap();
        prop_assert!(world.contacts.iter().all(|c| c.in_contact));
        prop_assert!(world.summaries().iter().all(|s| s.pressed_count > 0));
        prop_assert_eq!(world.time, 0.0);
    }

    #[test]
    fn time_advances_by_dt(seed in any::<u64>()) {
        let g = common::controller().geometry;
        let sim = SimParams::default();
        let mut world = SimWorld::spawn(30, seed, &sim, &g).unwrap();
        let hold: HandState = world.q;
        for k in 1..=10 {
            world.step(&hold);
            prop_assert!((world.time - k as f64 * sim.dt).abs() < 1e-12);
        }
    }
}

#[test]
fn unknown_size_is_rejected() {
    let g = common::controller().geometry;
    assert!(matches!(
        SimWorld::spawn(25, 0, &SimParams::default(), &g),
        Err(dextac::Error::UnknownSize(25))
    ));
}

#[test]
fn idle_world_times_out_without_depression() {
    let g = common::controller().geometry;
    let sim = SimParams::default();
    let mut world = SimWorld::spawn(50, 4, &sim, &g).unwrap();
    let hold = world.q;
    while !world.is_terminated() {
        world.step(&hold);
    }
    assert_eq!(world.termination, Some(dextac::sim::Termination::Timeout));
    assert_eq!(world.plunger_fraction(), 0.0);
    assert!((world.time - sim.timeout).abs() < sim.dt);
}
