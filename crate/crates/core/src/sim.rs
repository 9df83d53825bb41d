//! Quasi-static syringe-press simulator.
//!
//! The syringe is held fixed in space: flange at `syringe_position`, barrel
//! hanging along `-axis`, plunger head riding `head_clearance + travel -
//! displacement` above the flange. The index and middle fingers press the
//! barrel sides at fixed heights, the thumb presses the plunger head.
//!
//! Fingers are position-servoed with a first-order joint lag. A servo that
//! ends up inside an object is pushed back out along the object normal by a
//! spring balance between servo stiffness and contact stiffness. Tangential
//! contact is an elastic stick band of width `mu N / k_t` on top of Coulomb
//! sliding. The pad coordinates follow the camera-side (mirrored) view of
//! the gel, so the reported contact point moves with the fingertip when the
//! pad slides.
//!
//! The plunger carries a small hidden wobble: the head drifts sideways in
//! proportion to its depression. Holding the thumb centred therefore needs
//! contact feedback; open-loop presses walk off the head.

use nalgebra::{Rotation3, Vector2, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hand::{FingertipPose, HandGeometry, HandState, NUM_JOINTS};
use crate::rng::substream;
use crate::tactile::{
    pad_contains, simulate_deformation, summarize, ContactPatch, Finger, TactileCloud, TactileSummary,
    DEFAULT_PRESS_THRESHOLD,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyringeModel {
    pub size_label: u32,
    pub barrel_radius: f64,
    pub barrel_length: f64,
    pub plunger_travel: f64,
    /// Piecewise-constant resistance: `[start_of_segment_mm, force]`, sorted.
    pub plunger_resistance: Vec<[f64; 2]>,
    pub friction_mu: f64,
    /// Largest plunger wobble angle (deg); drawn uniformly per episode.
    pub max_wobble_deg: f64,
}

impl SyringeModel {
    pub fn resistance_at(&self, displacement: f64) -> f64 {
        let mut r = 0.0;
        for seg in &self.plunger_resistance {
            if displacement >= seg[0] {
                r = seg[1];
            }
        }
        r
    }

    pub fn validate(&self) -> Result<()> {
        let geometric = [
            self.barrel_radius,
            self.barrel_length,
            self.plunger_travel,
            self.friction_mu,
        ];
        if geometric.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::InvalidConfig(format!(
                "syringe {} needs positive geometry",
                self.size_label
            )));
        }
        if self.plunger_resistance.is_empty()
            || self.plunger_resistance[0][0] != 0.0
            || self.plunger_resistance.iter().any(|s| !(s[1] >= 0.0))
            || self.plunger_resistance.windows(2).any(|w| !(w[0][0] < w[1][0]))
        {
            return Err(Error::InvalidConfig(format!(
                "syringe {} resistance must start at 0, be sorted and nonnegative",
                self.size_label
            )));
        }
        if !(self.max_wobble_deg >= 0.0 && self.max_wobble_deg < 45.0) {
            return Err(Error::InvalidConfig(format!(
                "syringe {} wobble out of range",
                self.size_label
            )));
        }
        Ok(())
    }
}

fn syringe(size_label: u32, barrel_radius: f64, plunger_travel: f64, max_wobble_deg: f64) -> SyringeModel {
    SyringeModel {
        size_label,
        barrel_radius,
        barrel_length: plunger_travel + 10.0,
        plunger_travel,
        plunger_resistance: vec![[0.0, 2.0], [2.0, 1.5]],
        friction_mu: 0.6,
        max_wobble_deg,
    }
}

/// Size table: larger labels have larger barrels and longer travel.
pub fn default_syringes() -> Vec<SyringeModel> {
    vec![
        syringe(20, 9.0, 45.0, 12.0),
        syringe(30, 11.0, 55.0, 10.0),
        syringe(50, 13.0, 70.0, 6.0),
        syringe(60, 15.0, 80.0, 4.5),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimParams {
    pub dt: f64,
    /// Joint servo time constant (s).
    pub servo_tau: f64,
    /// Contact stiffness `k_c`, pseudo-force/mm.
    pub contact_stiffness: f64,
    /// Servo stiffness at the fingertip, pseudo-force/mm.
    pub servo_stiffness: f64,
    /// Tangential pad stiffness, pseudo-force/mm.
    pub tangential_stiffness: f64,
    /// Plunger speed per unit of excess force (mm/s).
    pub plunger_admittance: f64,
    pub max_plunger_rate: f64,
    pub timeout: f64,
    pub success_fraction: f64,
    pub grasp_hold_force: f64,
    pub escape_window: f64,
    /// Thumb must stay within this fraction of the barrel radius of the head centre.
    pub thumb_rest_fraction: f64,
    pub position_jitter: f64,
    pub tilt_jitter_deg: f64,
    pub syringe_origin: [f64; 3],
    pub head_clearance: f64,
    /// Heights of the index and middle contacts along the axis (mm, below the flange when negative).
    pub index_height: f64,
    pub middle_height: f64,
    pub press_threshold: f64,
    pub syringes: Vec<SyringeModel>,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            dt: 1.0 / 30.0,
            servo_tau: 0.05,
            contact_stiffness: 10.0,
            servo_stiffness: 2.0,
            tangential_stiffness: 5.0,
            plunger_admittance: 30.0,
            max_plunger_rate: 20.0,
            timeout: 15.0,
            success_fraction: 0.99,
            grasp_hold_force: 0.2,
            escape_window: 0.5,
            thumb_rest_fraction: 0.5,
            position_jitter: 7.0,
            tilt_jitter_deg: 5.0,
            syringe_origin: [70.0, 0.0, 0.0],
            head_clearance: 5.0,
            index_height: -12.0,
            middle_height: -24.0,
            press_threshold: DEFAULT_PRESS_THRESHOLD,
            syringes: default_syringes(),
        }
    }
}

impl SimParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dt", self.dt),
            ("servo_tau", self.servo_tau),
            ("contact_stiffness", self.contact_stiffness),
            ("servo_stiffness", self.servo_stiffness),
            ("tangential_stiffness", self.tangential_stiffness),
            ("plunger_admittance", self.plunger_admittance),
            ("max_plunger_rate", self.max_plunger_rate),
            ("timeout", self.timeout),
            ("press_threshold", self.press_threshold),
            ("escape_window", self.escape_window),
            ("thumb_rest_fraction", self.thumb_rest_fraction),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::InvalidConfig(format!("sim.{name} must be positive")));
            }
        }
        if !(self.success_fraction > 0.0 && self.success_fraction <= 1.0) {
            return Err(Error::InvalidConfig("sim.success_fraction must be in (0, 1]".into()));
        }
        if !(self.position_jitter >= 0.0 && self.tilt_jitter_deg >= 0.0) {
            return Err(Error::InvalidConfig("spawn jitter must be nonnegative".into()));
        }
        for s in &self.syringes {
            s.validate()?;
        }
        let mut sorted = self.syringes.clone();
        sorted.sort_by_key(|s| s.size_label);
        for w in sorted.windows(2) {
            if w[0].size_label == w[1].size_label {
                return Err(Error::InvalidConfig(format!(
                    "duplicate syringe size {}",
                    w[0].size_label
                )));
            }
            if !(w[0].barrel_radius < w[1].barrel_radius && w[0].plunger_travel < w[1].plunger_travel) {
                return Err(Error::InvalidConfig("syringe table must be monotone in size".into()));
            }
        }
        Ok(())
    }

    pub fn syringe(&self, size_label: u32) -> Result<&SyringeModel> {
        self.syringes
            .iter()
            .find(|s| s.size_label == size_label)
            .ok_or(Error::UnknownSize(size_label))
    }

    /// Free servo penetration per unit of settled penetration.
    fn penetration_ratio(&self) -> f64 {
        self.servo_stiffness / (self.servo_stiffness + self.contact_stiffness)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContactState {
    pub in_contact: bool,
    /// Contact location on the pad (mm, sensor frame).
    pub contact_point_pad_xy: [f64; 2],
    pub normal_force: f64,
    pub tangential_force: [f64; 2],
    pub slipping: bool,
    pub cumulative_slip: f64,
}

impl Default for ContactState {
    fn default() -> Self {
        Self {
            in_contact: false,
            contact_point_pad_xy: [0.0; 2],
            normal_force: 0.0,
            tangential_force: [0.0; 2],
            slipping: false,
            cumulative_slip: 0.0,
        }
    }
}

impl ContactState {
    fn released(&self) -> Self {
        Self {
            cumulative_slip: self.cumulative_slip,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossReason {
    /// The finger withdrew from the surface.
    LiftOff,
    /// The contact point left the pad (or the thumb left the head).
    SlippedOff,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SimEvent {
    Onset {
        finger: Finger,
    },
    Lost {
        finger: Finger,
        reason: LossReason,
        after_grasp: bool,
    },
    SlipStart {
        finger: Finger,
    },
    Grasped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// Plunger reached the success fraction.
    Depressed,
    ThumbSlipped,
    /// Neither grasping finger held the barrel while the thumb pushed.
    Escaped,
    Timeout,
}

/// Maps tactile `f_z` readings back to normal force for a centred patch of
/// one radius; used for force-error metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct ForceCalibration {
    /// `(f_z, normal_force)` pairs with strictly increasing `f_z`.
    table: Vec<(f64, f64)>,
}

impl ForceCalibration {
    pub fn new(radius: f64, contact_stiffness: f64, threshold: f64) -> Result<Self> {
        let rest = TactileCloud::at_rest(Finger::Thumb, 0.0);
        let mut table = vec![(0.0, 0.0)];
        for k in 1..=600 {
            let depth = k as f64 * 0.005;
            let patch = ContactPatch::new(Vector2::zeros(), depth, radius)?;
            let fz = summarize(&simulate_deformation(&rest, &patch), threshold)?.force_z;
            if fz > table.last().unwrap().0 {
                table.push((fz, depth * contact_stiffness));
            }
        }
        Ok(Self { table })
    }

    pub fn estimate_force(&self, force_z: f64) -> f64 {
        if !(force_z > 0.0) {
            return 0.0;
        }
        let i = self.table.partition_point(|e| e.0 < force_z);
        if i >= self.table.len() {
            let (f, n) = *self.table.last().unwrap();
            return n * force_z / f;
        }
        let (f1, n1) = self.table[i];
        let (f0, n0) = self.table[i - 1];
        n0 + (n1 - n0) * (force_z - f0) / (f1 - f0)
    }
}

/// Fixed pre-grasp posture: thumb raised above the work area with its pad
/// down, index and middle opened away from the barrel sides.
pub fn home_state(geometry: &HandGeometry) -> HandState {
    // Seeds pick the elbow branch that keeps the pads facing the work area
    // throughout the reachable space.
    let targets = [
        (
            Finger::Thumb,
            Vector3::new(64.0, 0.0, 100.0),
            Vector3::new(0.0, 0.0, -1.0),
            [0.0, -0.6, -1.2, 1.8],
        ),
        (
            Finger::Index,
            Vector3::new(70.0, 26.0, -12.0),
            Vector3::new(0.0, -1.0, 0.0),
            [0.0, 1.0, -1.4, 0.4],
        ),
        (
            Finger::Middle,
            Vector3::new(70.0, -26.0, -24.0),
            Vector3::new(0.0, 1.0, 0.0),
            [1.0, -1.4, 0.4, 0.0],
        ),
    ];
    let mut q = [0.0; NUM_JOINTS];
    for (finger, target, normal, seed) in targets {
        let range = geometry.joint_range(finger);
        let seed = &seed[..range.len()];
        let sol = geometry.solve_posture(finger, &target, &normal, 20.0, seed, 400);
        q[range].copy_from_slice(&sol);
    }
    HandState::new(q)
}

#[derive(Debug, Clone)]
pub struct SimWorld {
    pub params: SimParams,
    pub geometry: HandGeometry,
    pub syringe: SyringeModel,
    pub seed: u64,
    /// Flange centre (mm, hand base frame).
    pub syringe_position: Vector3<f64>,
    /// Unit barrel axis, pointing from the barrel toward the plunger head.
    pub syringe_axis: Vector3<f64>,
    wobble_dir: Vector3<f64>,
    wobble_tan: f64,
    pub plunger_displacement: f64,
    pub contacts: [ContactState; 3],
    strain: [Vector2<f64>; 3],
    pub time: f64,
    pub steps: usize,
    /// Measured joint state (after contact deflection).
    pub q: HandState,
    servo: [f64; NUM_JOINTS],
    pub grasp_time: Option<f64>,
    pub contact_losses: usize,
    pub slip_events: usize,
    escape_timer: f64,
    pub termination: Option<Termination>,
    calibration: ForceCalibration,
}

impl SimWorld {
    /// Seeded spawn with the fingers at the home posture.
    pub fn spawn(size_label: u32, seed: u64, params: &SimParams, geometry: &HandGeometry) -> Result<Self> {
        let syringe = params.syringe(size_label)?.clone();
        let mut rng = substream(seed, "spawn", size_label as u64);
        let j = params.position_jitter;
        let t = params.tilt_jitter_deg.to_radians();
        let dx = if j > 0.0 { rng.random_range(-j..=j) } else { 0.0 };
        let dy = if j > 0.0 { rng.random_range(-j..=j) } else { 0.0 };
        let tx = if t > 0.0 { rng.random_range(-t..=t) } else { 0.0 };
        let ty = if t > 0.0 { rng.random_range(-t..=t) } else { 0.0 };
        let wobble = syringe.max_wobble_deg.to_radians() * rng.random::<f64>();
        let phase = rng.random_range(0.0..std::f64::consts::TAU);

        let axis = (Rotation3::from_axis_angle(&Vector3::x_axis(), tx)
            * Rotation3::from_axis_angle(&Vector3::y_axis(), ty)
            * Vector3::z())
        .normalize();
        let e1 = (Vector3::x() - axis * axis.x).normalize();
        let e2 = axis.cross(&e1);
        let wobble_dir = e1 * phase.cos() + e2 * phase.sin();

        let radius = (0.3 * syringe.barrel_radius).clamp(1.5, 4.0);
        let calibration = ForceCalibration::new(radius, params.contact_stiffness, params.press_threshold)?;
        let home = home_state(geometry);
        Ok(Self {
            params: params.clone(),
            geometry: geometry.clone(),
            syringe,
            seed,
            syringe_position: Vector3::from(params.syringe_origin) + Vector3::new(dx, dy, 0.0),
            syringe_axis: axis,
            wobble_dir,
            wobble_tan: wobble.tan(),
            plunger_displacement: 0.0,
            contacts: [ContactState::default(); 3],
            strain: [Vector2::zeros(); 3],
            time: 0.0,
            steps: 0,
            q: home,
            servo: home.q,
            grasp_time: None,
            contact_losses: 0,
            slip_events: 0,
            escape_timer: 0.0,
            termination: None,
            calibration,
        })
    }

    /// Spawn with all three fingers already pressing their features with
    /// unit normal force (the grasp is established at `t = 0`).
    pub fn spawn_grasped(size_label: u32, seed: u64, params: &SimParams, geometry: &HandGeometry) -> Result<Self> {
        let mut world = Self::spawn(size_label, seed, params, geometry)?;
        let free_depth = 1.0 / (params.contact_stiffness * params.penetration_ratio());
        for finger in Finger::ALL {
            let (point, normal) = world.feature(finger);
            let target = point - normal * free_depth;
            let range = geometry.joint_range(finger);
            let sol = geometry.solve_posture(finger, &target, &(-normal), 20.0, &world.servo[range.clone()], 400);
            world.servo[range].copy_from_slice(&sol);
        }
        world.resolve_contacts();
        if world.contacts.iter().any(|c| !c.in_contact) {
            return Err(Error::InvalidConfig(format!(
                "could not establish the initial grasp for size {size_label}, seed {seed}"
            )));
        }
        Ok(world)
    }

    pub fn plunger_fraction(&self) -> f64 {
        self.plunger_displacement / self.syringe.plunger_travel
    }

    pub fn thumb_rest_radius(&self) -> f64 {
        self.params.thumb_rest_fraction * self.syringe.barrel_radius
    }

    /// Head centre without the hidden wobble drift.
    pub fn nominal_head_center(&self) -> Vector3<f64> {
        self.syringe_position
            + self.syringe_axis * (self.params.head_clearance + self.syringe.plunger_travel - self.plunger_displacement)
    }

    pub fn head_center(&self) -> Vector3<f64> {
        self.nominal_head_center() + self.wobble_dir * (self.plunger_displacement * self.wobble_tan)
    }

    /// Outward unit normal of the barrel facing the index finger.
    fn side_normal(&self) -> Vector3<f64> {
        let a = self.syringe_axis;
        (Vector3::y() - a * a.y).normalize()
    }

    /// Contact feature for a finger: surface point and outward object
    /// normal (pointing from the object toward the finger).
    pub fn feature(&self, finger: Finger) -> (Vector3<f64>, Vector3<f64>) {
        let a = self.syringe_axis;
        let r = self.syringe.barrel_radius;
        match finger {
            Finger::Thumb => (self.head_center(), a),
            Finger::Index => {
                let n = self.side_normal();
                (self.syringe_position + a * self.params.index_height + n * r, n)
            }
            Finger::Middle => {
                let n = -self.side_normal();
                (self.syringe_position + a * self.params.middle_height + n * r, n)
            }
        }
    }

    /// Same as [`Self::feature`] but for the thumb uses the nominal head.
    pub fn nominal_feature(&self, finger: Finger) -> (Vector3<f64>, Vector3<f64>) {
        match finger {
            Finger::Thumb => (self.nominal_head_center(), self.syringe_axis),
            f => self.feature(f),
        }
    }

    fn thumb_lateral(&self, tip: &Vector3<f64>) -> f64 {
        let a = self.syringe_axis;
        let rel = tip - self.head_center();
        (rel - a * rel.dot(&a)).norm()
    }

    pub fn fingertip_pose(&self, finger: Finger) -> FingertipPose {
        self.geometry
            .finger_pose(finger, &self.q.q[self.geometry.joint_range(finger)])
    }

    /// Object proxy: flange position, axis and barrel radius.
    pub fn object_proxy(&self) -> [f64; 7] {
        let p = self.syringe_position;
        let a = self.syringe_axis;
        [p.x, p.y, p.z, a.x, a.y, a.z, self.syringe.barrel_radius]
    }

    pub fn is_terminated(&self) -> bool {
        self.termination.is_some()
    }

    pub fn grasp_established(&self) -> bool {
        self.grasp_time.is_some()
    }

    /// Advances one control period toward `command`.
    pub fn step(&mut self, command: &HandState) -> Vec<SimEvent> {
        if self.termination.is_some() {
            return Vec::new();
        }
        let (cmd, _) = self.geometry.clamp(&command.q);
        let alpha = 1.0 - (-self.params.dt / self.params.servo_tau).exp();
        for (s, c) in self.servo.iter_mut().zip(cmd.q.iter()) {
            *s += alpha * (c - *s);
        }
        let mut events = self.resolve_contacts();

        let thumb = self.contacts[Finger::Thumb.index()];
        if thumb.in_contact {
            let excess = thumb.normal_force - self.syringe.resistance_at(self.plunger_displacement);
            if excess > 0.0 {
                let rate = (self.params.plunger_admittance * excess).min(self.params.max_plunger_rate);
                // The head never runs past the point where the thumb's
                // force would have relaxed down to the resistance.
                let stiffness = self.params.contact_stiffness * self.params.penetration_ratio();
                let advance = (rate * self.params.dt).min(excess / stiffness);
                self.plunger_displacement = (self.plunger_displacement + advance).min(self.syringe.plunger_travel);
            }
        }

        let holding = [Finger::Index, Finger::Middle]
            .iter()
            .any(|f| self.contacts[f.index()].normal_force >= self.params.grasp_hold_force);
        if thumb.in_contact && thumb.normal_force > 0.0 && !holding {
            self.escape_timer += self.params.dt;
        } else {
            self.escape_timer = 0.0;
        }

        self.steps += 1;
        self.time = self.steps as f64 * self.params.dt;
        if self.termination.is_none() {
            if self.plunger_fraction() >= self.params.success_fraction {
                self.termination = Some(Termination::Depressed);
            } else if self.escape_timer >= self.params.escape_window - 1e-9 {
                self.termination = Some(Termination::Escaped);
            } else if self.time >= self.params.timeout - 1e-9 {
                self.termination = Some(Termination::Timeout);
            }
        }
        events.retain(|e| !matches!(e, SimEvent::Grasped) || self.grasp_time.is_some());
        events
    }

    /// Resolves finger contacts for the current servo state and sets the
    /// measured joint state. Thumb slip-off terminates the episode.
    fn resolve_contacts(&mut self) -> Vec<SimEvent> {
        let mut events = Vec::new();
        let ratio = self.params.penetration_ratio();
        let kc = self.params.contact_stiffness;
        let kt = self.params.tangential_stiffness;
        let mu = self.syringe.friction_mu;
        let mut q = self.servo;
        for finger in Finger::ALL {
            let f = finger.index();
            let range = self.geometry.joint_range(finger);
            let free = self.geometry.finger_pose(finger, &self.servo[range.clone()]);
            let (point, normal) = self.feature(finger);
            let depth = (point - free.position).dot(&normal);
            let prev = self.contacts[f];
            let lose = |reason| SimEvent::Lost {
                finger,
                reason,
                after_grasp: self.grasp_time.is_some(),
            };

            if depth <= 0.0 {
                if prev.in_contact {
                    events.push(lose(LossReason::LiftOff));
                    self.contacts[f] = prev.released();
                }
                continue;
            }
            let settled = ratio * depth;
            let normal_force = kc * settled;
            let tip = free.position + normal * (depth - settled);
            let local = free.orientation.transpose() * (tip - point);
            let o = Vector2::new(local.x, local.y);
            // A light touch anywhere on the head is stable; pushing the
            // plunger off-centre tips the thumb off the rim.
            let thumb_ok = |w: &Self| {
                finger != Finger::Thumb
                    || normal_force <= w.syringe.resistance_at(w.plunger_displacement)
                    || w.thumb_lateral(&tip) <= w.thumb_rest_radius()
            };

            let mut state = prev;
            if !prev.in_contact {
                if !pad_contains(&o) || !thumb_ok(self) {
                    continue;
                }
                self.strain[f] = Vector2::zeros();
                state.contact_point_pad_xy = [o.x, o.y];
                state.slipping = false;
                events.push(SimEvent::Onset { finger });
            } else {
                let c = Vector2::from(prev.contact_point_pad_xy);
                let trial = o - c;
                let band = mu * normal_force / kt;
                if trial.norm() > band {
                    let s = trial * (band / trial.norm());
                    let moved = o - s;
                    state.cumulative_slip += (moved - c).norm();
                    state.contact_point_pad_xy = [moved.x, moved.y];
                    if !prev.slipping {
                        self.slip_events += 1;
                        events.push(SimEvent::SlipStart { finger });
                    }
                    state.slipping = true;
                    self.strain[f] = s;
                } else {
                    state.slipping = false;
                    self.strain[f] = trial;
                }
                let c = Vector2::from(state.contact_point_pad_xy);
                if !pad_contains(&c) || !thumb_ok(self) {
                    events.push(lose(LossReason::SlippedOff));
                    self.contacts[f] = state.released();
                    if finger == Finger::Thumb {
                        self.termination = Some(Termination::ThumbSlipped);
                    }
                    continue;
                }
            }
            let s = self.strain[f] * kt;
            state.in_contact = true;
            state.normal_force = normal_force;
            state.tangential_force = [s.x, s.y];
            self.contacts[f] = state;
            let (sol, _) = self
                .geometry
                .solve_finger_with(finger, &tip, &self.servo[range.clone()], 20);
            q[range].copy_from_slice(&sol);
        }
        for e in &events {
            if let SimEvent::Lost { after_grasp: true, .. } = e {
                self.contact_losses += 1;
            }
        }
        if self.grasp_time.is_none()
            && self.contacts[Finger::Index.index()].in_contact
            && self.contacts[Finger::Middle.index()].in_contact
        {
            self.grasp_time = Some(self.time);
            events.push(SimEvent::Grasped);
        }
        self.q = HandState::new(q);
        events
    }

    /// Patch radius used for the tactile readout of this syringe.
    pub fn patch_radius(&self) -> f64 {
        (0.3 * self.syringe.barrel_radius).clamp(1.5, 4.0)
    }

    pub fn tactile_readout(&self, finger: Finger) -> TactileCloud {
        let rest = TactileCloud::at_rest(finger, self.time);
        let c = &self.contacts[finger.index()];
        if !c.in_contact {
            return rest;
        }
        let patch = ContactPatch {
            center_xy: Vector2::from(c.contact_point_pad_xy),
            depth: c.normal_force / self.params.contact_stiffness,
            radius: self.patch_radius(),
        };
        simulate_deformation(&rest, &patch)
    }

    pub fn summaries(&self) -> [TactileSummary; 3] {
        Finger::ALL.map(|f| {
            summarize(&self.tactile_readout(f), self.params.press_threshold)
                .expect("press threshold validated positive")
        })
    }

    /// Normal force implied by a tactile reading on this world's patch size.
    pub fn estimate_force(&self, force_z: f64) -> f64 {
        self.calibration.estimate_force(force_z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world(size: u32, seed: u64) -> SimWorld {
        SimWorld::spawn(size, seed, &SimParams::default(), &HandGeometry::default()).unwrap()
    }

    #[test]
    fn default_params_validate() {
        SimParams::default().validate().unwrap();
        assert!(matches!(
            SimWorld::spawn(40, 0, &SimParams::default(), &HandGeometry::default()),
            Err(Error::UnknownSize(40))
        ));
    }

    #[test]
    fn home_posture_reaches_targets() {
        let g = HandGeometry::default();
        let home = home_state(&g);
        g.check_limits(&home).unwrap();
        let poses = g.forward_kinematics(&home).unwrap();
        assert!((poses.get(Finger::Thumb).position - Vector3::new(64.0, 0.0, 100.0)).norm() < 0.5);
        assert!(poses.get(Finger::Thumb).pad_normal().z < -0.95);
        assert!(poses.get(Finger::Index).pad_normal().y < -0.95);
        assert!(poses.get(Finger::Middle).pad_normal().y > 0.95);
    }

    #[test]
    fn spawn_is_deterministic() {
        let a = world(30, 11);
        let b = world(30, 11);
        assert_eq!(a.syringe_position, b.syringe_position);
        assert_eq!(a.syringe_axis, b.syringe_axis);
        assert_eq!(a.head_center(), b.head_center());
        assert_ne!(world(30, 12).syringe_position, a.syringe_position);
    }

    #[test]
    fn idle_step_only_advances_time() {
        let mut w = world(50, 3);
        let q0 = w.q;
        w.step(&q0);
        assert_eq!(w.q, q0);
        assert!(w.contacts.iter().all(|c| !c.in_contact));
        assert_eq!(w.plunger_displacement, 0.0);
        assert!((w.time - 1.0 / 30.0).abs() < 1e-12);
    }

    #[test]
    fn grasped_spawn_has_all_contacts() {
        for seed in 0..10 {
            let w = SimWorld::spawn_grasped(30, seed, &SimParams::default(), &HandGeometry::default()).unwrap();
            for c in &w.contacts {
                assert!(c.in_contact);
                assert!((c.normal_force - 1.0).abs() < 0.2, "{}", c.normal_force);
            }
            assert!(w.grasp_established());
            let s = w.summaries();
            assert!(s.iter().all(|s| s.pressed_count > 0));
        }
    }

    #[test]
    fn calibration_inverts_centered_readings() {
        let w = world(30, 0);
        for n in [0.8, 1.0, 2.0, 3.5] {
            let patch = ContactPatch::new(Vector2::zeros(), n / 10.0, w.patch_radius()).unwrap();
            let fz = summarize(
                &simulate_deformation(&TactileCloud::at_rest(Finger::Thumb, 0.0), &patch),
                0.05,
            )
            .unwrap()
            .force_z;
            assert!((w.estimate_force(fz) - n).abs() < 0.02, "{n}");
        }
        assert_eq!(w.estimate_force(0.0), 0.0);
    }
}
