//! Tactile controller: joint-delta position reference, force correction
//! along the pad normal, CoP correction in the pad plane, then IK.
//!
//! All corrections act in each fingertip's sensor frame and are rotated into
//! the hand base frame with the reference pose's orientation.

use nalgebra::{Matrix3, SMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::action::ActionStep;
use crate::error::{Error, Result};
use crate::hand::{FingertipPoses, HandGeometry, HandState, NUM_JOINTS};
use crate::tactile::{Finger, TactileSummary};

pub type Stacked = SMatrix<f64, 9, 1>;
pub type CopGain = SMatrix<f64, 6, 6>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImpedanceParams {
    /// Stiffness per finger, pseudo-force/mm.
    pub k: [Matrix3<f64>; 3],
    pub d: [Matrix3<f64>; 3],
    pub m: [Matrix3<f64>; 3],
    /// CoP gain over the stacked `[thumb, index, middle]` xy errors.
    pub p: CopGain,
}

impl Default for ImpedanceParams {
    fn default() -> Self {
        Self {
            k: [Matrix3::identity() * 2.0; 3],
            d: [Matrix3::zeros(); 3],
            m: [Matrix3::zeros(); 3],
            p: CopGain::identity() * 0.5,
        }
    }
}

fn is_spd<const N: usize>(m: &SMatrix<f64, N, N>) -> bool
where
    nalgebra::Const<N>: nalgebra::DimMin<nalgebra::Const<N>, Output = nalgebra::Const<N>>,
{
    (m - m.transpose()).abs().max() <= 1e-12 && m.cholesky().is_some()
}

fn is_psd(m: &Matrix3<f64>) -> bool {
    (m - m.transpose()).abs().max() <= 1e-12 && m.symmetric_eigenvalues().iter().all(|&e| e >= -1e-12)
}

impl ImpedanceParams {
    pub fn validate(&self) -> Result<()> {
        for f in 0..3 {
            if !is_spd(&self.k[f]) {
                return Err(Error::InvalidConfig(format!(
                    "stiffness of finger {f} is not positive-definite"
                )));
            }
            if !is_psd(&self.d[f]) || !is_psd(&self.m[f]) {
                return Err(Error::InvalidConfig(format!(
                    "damping/inertia of finger {f} is not positive semi-definite"
                )));
            }
        }
        if !is_spd(&self.p) {
            return Err(Error::InvalidConfig("CoP gain is not positive-definite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerMode {
    NoTactile,
    ForceOnly,
    ForceAndCoP,
}

impl ControllerMode {
    pub const ALL: [ControllerMode; 3] = [Self::NoTactile, Self::ForceOnly, Self::ForceAndCoP];

    /// Name used for the policy variant in reports.
    pub fn policy_name(self) -> &'static str {
        match self {
            Self::NoTactile => "wo_tactile",
            Self::ForceOnly => "wo_cop",
            Self::ForceAndCoP => "dextac",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TactileReference {
    pub f_d: [f64; 3],
    pub c_d: [[f64; 2]; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CartesianReference {
    pub x_p: Stacked,
    pub x_f: Stacked,
    pub x_r: Stacked,
}

/// Impedance relation for one finger: `K Δx + D Δv + M Δa`.
#[allow(clippy::too_many_arguments)]
pub fn impedance_force(
    params: &ImpedanceParams,
    finger: Finger,
    x_d: &Vector3<f64>,
    x: &Vector3<f64>,
    xd_dot: &Vector3<f64>,
    x_dot: &Vector3<f64>,
    xd_ddot: &Vector3<f64>,
    x_ddot: &Vector3<f64>,
) -> Vector3<f64> {
    let f = finger.index();
    params.k[f] * (x_d - x) + params.d[f] * (xd_dot - x_dot) + params.m[f] * (xd_ddot - x_ddot)
}

/// FK of `q_t + dq_d`, clamped to the joint limits. Returns the stacked
/// positions, the poses, and whether clamping happened.
pub fn position_reference(
    geometry: &HandGeometry,
    q_t: &HandState,
    dq_d: &[f64; NUM_JOINTS],
) -> (Stacked, FingertipPoses, HandState, bool) {
    let mut q = q_t.q;
    for (v, d) in q.iter_mut().zip(dq_d) {
        *v += d;
    }
    let (q, clamped) = geometry.clamp(&q);
    let poses = geometry.forward_kinematics_unchecked(&q.q);
    (poses.stacked(), poses, q, clamped)
}

/// Offsets each finger by `(K⁻¹ F)_z` along its inward pad normal.
pub fn force_correction(
    x_p: &Stacked,
    f_d: &[f64; 3],
    params: &ImpedanceParams,
    orientations: &[Matrix3<f64>; 3],
) -> Result<Stacked> {
    let mut x_f = *x_p;
    for f in 0..3 {
        let k_inv = params.k[f].try_inverse().ok_or(Error::SingularStiffness)?;
        let dz = (k_inv * Vector3::new(0.0, 0.0, f_d[f]))[2];
        let offset = orientations[f] * Vector3::new(0.0, 0.0, dz);
        let mut seg = x_f.fixed_rows_mut::<3>(3 * f);
        seg += offset;
    }
    Ok(x_f)
}

/// Shifts each finger in its pad plane by its block of `P (C_d - C_t)`.
/// Fingers with `active[f] == false` are left untouched.
pub fn cop_correction(
    x_f: &Stacked,
    c_d: &[[f64; 2]; 3],
    c_t: &[[f64; 2]; 3],
    params: &ImpedanceParams,
    orientations: &[Matrix3<f64>; 3],
    active: &[bool; 3],
) -> Stacked {
    let mut err = SMatrix::<f64, 6, 1>::zeros();
    for f in 0..3 {
        if active[f] {
            err[2 * f] = c_d[f][0] - c_t[f][0];
            err[2 * f + 1] = c_d[f][1] - c_t[f][1];
        }
    }
    let shift = params.p * err;
    let mut x_r = *x_f;
    for f in 0..3 {
        if !active[f] {
            continue;
        }
        let offset = orientations[f] * Vector3::new(shift[2 * f], shift[2 * f + 1], 0.0);
        let mut seg = x_r.fixed_rows_mut::<3>(3 * f);
        seg += offset;
    }
    x_r
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlOutput {
    pub command: HandState,
    pub reference: CartesianReference,
    /// `q_t + dq_d` had to be clamped into the joint limits.
    pub clamped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TactileController {
    pub geometry: HandGeometry,
    pub params: ImpedanceParams,
}

impl TactileController {
    pub fn new(geometry: HandGeometry, params: ImpedanceParams) -> Result<Self> {
        geometry.validate()?;
        params.validate()?;
        Ok(Self { geometry, params })
    }

    /// One control tick. The CoP correction only acts on fingers whose pad
    /// currently registers a press: without contact the measured CoP is a
    /// placeholder and would drag the finger around in free space.
    pub fn control_step(
        &self,
        q_t: &HandState,
        summaries: &[TactileSummary; 3],
        action: &ActionStep,
        mode: ControllerMode,
    ) -> Result<ControlOutput> {
        let (x_p, poses, seed, clamped) = position_reference(&self.geometry, q_t, &action.dq_d);
        if mode == ControllerMode::NoTactile {
            return Ok(ControlOutput {
                command: seed,
                reference: CartesianReference {
                    x_p,
                    x_f: x_p,
                    x_r: x_p,
                },
                clamped,
            });
        }
        let rot = poses.orientations();
        let x_f = force_correction(&x_p, &action.f_d, &self.params, &rot)?;
        let x_r = if mode == ControllerMode::ForceAndCoP {
            let c_t = summaries.map(|s| [s.cop_xy.x, s.cop_xy.y]);
            let active = summaries.map(|s| s.pressed_count > 0);
            cop_correction(&x_f, &action.c_d, &c_t, &self.params, &rot, &active)
        } else {
            x_f
        };
        let command = self.geometry.inverse_kinematics(&x_r, &seed)?;
        Ok(ControlOutput {
            command,
            reference: CartesianReference { x_p, x_f, x_r },
            clamped,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        nalgebra::Rotation3::new(axis * 2.0).into_inner()
    }

    #[test]
    fn impedance_examples() {
        let p = ImpedanceParams::default();
        let z = Vector3::zeros();
        let x = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(
            impedance_force(&p, Finger::Index, &x, &x, &z, &z, &z, &z),
            Vector3::zeros()
        );
        let xd = x + Vector3::new(0.0, 0.0, 0.5);
        assert_eq!(
            impedance_force(&p, Finger::Index, &xd, &x, &z, &z, &z, &z),
            Vector3::new(0.0, 0.0, 1.0)
        );
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn impedance_matches_elementwise_expansion() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ImpedanceParams::default();
        let mut r = || Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        p.k[1] = r();
        p.d[1] = r();
        p.m[1] = r();
        let v: Vec<Vector3<f64>> = (0..6)
            .map(|_| Vector3::from_fn(|_, _| rng.random_range(-5.0..5.0)))
            .collect();
        let got = impedance_force(&p, Finger::Index, &v[0], &v[1], &v[2], &v[3], &v[4], &v[5]);
        for i in 0..3 {
            let mut want = 0.0;
            for j in 0..3 {
                want += p.k[1][(i, j)] * (v[0][j] - v[1][j])
                    + p.d[1][(i, j)] * (v[2][j] - v[3][j])
                    + p.m[1][(i, j)] * (v[4][j] - v[5][j]);
            }
            assert!((got[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn force_correction_pushes_along_inward_normal() {
        let p = ImpedanceParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rot = [
            random_rotation(&mut rng),
            random_rotation(&mut rng),
            random_rotation(&mut rng),
        ];
        let x_p = Stacked::from_fn(|i, _| i as f64);
        assert_eq!(force_correction(&x_p, &[0.0; 3], &p, &rot).unwrap(), x_p);
        let x_f = force_correction(&x_p, &[1.0, 0.0, 0.0], &p, &rot).unwrap();
        let d = x_f.fixed_rows::<3>(0) - x_p.fixed_rows::<3>(0);
        assert!((d - rot[0] * Vector3::new(0.0, 0.0, 0.5)).norm() < 1e-12);
        assert_eq!(x_f.fixed_rows::<6>(3), x_p.fixed_rows::<6>(3));
    }

    #[test]
    fn singular_stiffness_is_rejected() {
        let mut p = ImpedanceParams::default();
        p.k[2] = Matrix3::zeros();
        let rot = [Matrix3::identity(); 3];
        assert!(matches!(
            force_correction(&Stacked::zeros(), &[0.0; 3], &p, &rot),
            Err(Error::SingularStiffness)
        ));
        assert!(p.validate().is_err());
    }

    #[test]
    fn cop_correction_scalar_gain() {
        let p = ImpedanceParams::default();
        let rot = [Matrix3::identity(); 3];
        let x_f = Stacked::zeros();
        let c_d = [[0.0; 2], [2.0, 0.0], [0.0; 2]];
        let x_r = cop_correction(&x_f, &c_d, &[[0.0; 2]; 3], &p, &rot, &[true; 3]);
        assert_eq!(x_r.fixed_rows::<3>(3).into_owned(), Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(x_r.fixed_rows::<3>(0).into_owned(), Vector3::zeros());
        let same = cop_correction(&x_f, &c_d, &c_d, &p, &rot, &[true; 3]);
        assert_eq!(same, x_f);
        let gated = cop_correction(&x_f, &c_d, &[[0.0; 2]; 3], &p, &rot, &[true, false, true]);
        assert_eq!(gated, x_f);
    }

    #[test]
    fn no_tactile_passes_through() {
        let ctl = TactileController::new(HandGeometry::default(), ImpedanceParams::default()).unwrap();
        let q = HandState::new([0.1, 0.3, 0.4, 0.2, 0.0, 0.5, 0.4, 0.3, 0.5, 0.4, 0.3]);
        let mut a = ActionStep::default();
        a.dq_d[2] = 0.05;
        a.f_d = [1.0; 3];
        let out = ctl
            .control_step(&q, &[TactileSummary::default(); 3], &a, ControllerMode::NoTactile)
            .unwrap();
        let mut want = q.q;
        want[2] += 0.05;
        assert_eq!(out.command.q, want);
    }

    #[test]
    fn vanishing_references_reproduce_pass_through() {
        let ctl = TactileController::new(HandGeometry::default(), ImpedanceParams::default()).unwrap();
        let q = HandState::new([0.1, 0.3, 0.4, 0.2, 0.0, 0.5, 0.4, 0.3, 0.5, 0.4, 0.3]);
        let mut a = ActionStep::default();
        a.dq_d[5] = -0.04;
        let mut s = [TactileSummary::default(); 3];
        s[1].cop_xy = Vector2::new(0.7, -0.2);
        s[1].pressed_count = 9;
        a.c_d[1] = [0.7, -0.2];
        let base = ctl.control_step(&q, &s, &a, ControllerMode::NoTactile).unwrap();
        let full = ctl.control_step(&q, &s, &a, ControllerMode::ForceAndCoP).unwrap();
        let fk = |st: &HandState| ctl.geometry.forward_kinematics(st).unwrap().stacked();
        assert!((fk(&base.command) - fk(&full.command)).norm() <= 1e-3);
    }
}
