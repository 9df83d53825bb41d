//! Kinematics of the 11-joint, three-finger hand.
//!
//! Each finger is a serial chain of revolute joints. After each joint the
//! frame advances along its local x axis by the joint's link length, so the
//! fingertip sits at the end of the last link. The fingertip sensor frame is
//! the tip frame flipped about x: sensor x runs along the finger, sensor z
//! points out of the palmar pad.

use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3, Rotation3, SMatrix, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tactile::Finger;

pub const NUM_JOINTS: usize = 11;

/// Damping used by the position-only solver.
pub const IK_DAMPING: f64 = 1e-2;
pub const IK_MAX_ITERATIONS: usize = 100;
/// Convergence tolerance on fingertip position (mm).
pub const IK_TOLERANCE: f64 = 1e-3;
/// Residual above which a target is reported unreachable (mm). Below it
/// the least-squares solution is used as is: a finger without abduction
/// cannot follow sideways references exactly.
pub const IK_UNREACHABLE: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointSpec {
    /// Rotation axis in the joint's local frame.
    pub axis: [f64; 3],
    /// Offset along local x applied after the joint (mm).
    pub link_length: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FingerGeometry {
    pub finger: Finger,
    pub base_position: [f64; 3],
    /// Row-major base rotation (finger frame to hand base frame).
    pub base_rotation: [[f64; 3]; 3],
    pub joints: Vec<JointSpec>,
}

impl FingerGeometry {
    fn base_rotation(&self) -> Matrix3<f64> {
        let r = &self.base_rotation;
        Matrix3::new(
            r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
        )
    }

    pub fn total_length(&self) -> f64 {
        self.joints.iter().map(|j| j.link_length).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HandGeometry {
    pub fingers: Vec<FingerGeometry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HandState {
    pub q: [f64; NUM_JOINTS],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joint_velocities: Option<[f64; NUM_JOINTS]>,
}

impl HandState {
    pub fn new(q: [f64; NUM_JOINTS]) -> Self {
        Self {
            q,
            joint_velocities: None,
        }
    }

    pub fn zeros() -> Self {
        Self::new([0.0; NUM_JOINTS])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FingertipPose {
    pub position: Vector3<f64>,
    /// Maps sensor-frame vectors to the hand base frame.
    pub orientation: Matrix3<f64>,
}

impl FingertipPose {
    /// Outward pad normal in the base frame.
    pub fn pad_normal(&self) -> Vector3<f64> {
        self.orientation.column(2).into_owned()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FingertipPoses {
    pub poses: [FingertipPose; 3],
}

impl FingertipPoses {
    pub fn get(&self, finger: Finger) -> &FingertipPose {
        &self.poses[finger.index()]
    }

    /// Stacked positions `[thumb, index, middle]`.
    pub fn stacked(&self) -> SMatrix<f64, 9, 1> {
        let mut x = SMatrix::<f64, 9, 1>::zeros();
        for (f, pose) in self.poses.iter().enumerate() {
            x.fixed_rows_mut::<3>(3 * f).copy_from(&pose.position);
        }
        x
    }

    pub fn orientations(&self) -> [Matrix3<f64>; 3] {
        [
            self.poses[0].orientation,
            self.poses[1].orientation,
            self.poses[2].orientation,
        ]
    }
}

/// Flip from the tip frame to the sensor frame.
fn tip_to_sensor() -> Matrix3<f64> {
    Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0)
}

fn rot_x(angle: f64) -> [[f64; 3]; 3] {
    let (s, c) = angle.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

const ABDUCTION: [f64; 3] = [0.0, 0.0, 1.0];
const FLEXION: [f64; 3] = [0.0, 1.0, 0.0];

fn abduction(lower: f64, upper: f64) -> JointSpec {
    JointSpec {
        axis: ABDUCTION,
        link_length: 0.0,
        lower,
        upper,
    }
}

fn flexion(link_length: f64) -> JointSpec {
    JointSpec {
        axis: FLEXION,
        link_length,
        lower: -1.5,
        upper: 2.0,
    }
}

/// The thumb needs a wider flexion range to follow the plunger head down
/// the full travel with its pad facing the head.
fn thumb_flexion(link_length: f64) -> JointSpec {
    JointSpec {
        lower: -2.5,
        upper: 2.5,
        ..flexion(link_length)
    }
}

impl Default for HandGeometry {
    fn default() -> Self {
        Self {
            fingers: vec![
                FingerGeometry {
                    finger: Finger::Thumb,
                    base_position: [0.0, 0.0, 50.0],
                    base_rotation: rot_x(0.0),
                    joints: vec![
                        abduction(-0.7, 0.7),
                        thumb_flexion(45.0),
                        thumb_flexion(35.0),
                        thumb_flexion(25.0),
                    ],
                },
                FingerGeometry {
                    finger: Finger::Index,
                    base_position: [-20.0, 20.0, -12.0],
                    base_rotation: rot_x(-std::f64::consts::FRAC_PI_2),
                    joints: vec![abduction(-0.7, 0.7), flexion(50.0), flexion(30.0), flexion(20.0)],
                },
                FingerGeometry {
                    finger: Finger::Middle,
                    base_position: [-20.0, -20.0, -24.0],
                    base_rotation: rot_x(std::f64::consts::FRAC_PI_2),
                    joints: vec![flexion(50.0), flexion(30.0), flexion(20.0)],
                },
            ],
        }
    }
}

/// Origin and world-frame axis of one joint.
type JointFrame = (Vector3<f64>, Vector3<f64>);

impl HandGeometry {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let geometry: HandGeometry = serde_json::from_str(&text)?;
        geometry.validate()?;
        Ok(geometry)
    }

    /// Loads `path` when given, otherwise the embedded default.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::from_json_file(p),
            None => Ok(Self::default()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fingers.len() != 3 {
            return Err(Error::InvalidConfig("hand needs exactly three fingers".into()));
        }
        for (i, fg) in self.fingers.iter().enumerate() {
            if fg.finger.index() != i {
                return Err(Error::InvalidConfig(
                    "fingers must be ordered thumb, index, middle".into(),
                ));
            }
            let r = fg.base_rotation();
            if (r.transpose() * r - Matrix3::identity()).abs().max() > 1e-9 || (r.determinant() - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidConfig(format!(
                    "{} base rotation is not proper",
                    fg.finger
                )));
            }
            for j in &fg.joints {
                if j.link_length < 0.0 || !(j.lower < j.upper) || Vector3::from(j.axis).norm() < 1e-12 {
                    return Err(Error::InvalidConfig(format!("bad joint spec on {}", fg.finger)));
                }
            }
            if fg.total_length() <= 0.0 || fg.joints.last().is_none_or(|j| j.link_length <= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "{} needs positive link lengths",
                    fg.finger
                )));
            }
        }
        let total: usize = self.fingers.iter().map(|f| f.joints.len()).sum();
        if total != NUM_JOINTS {
            return Err(Error::InvalidConfig(format!(
                "joint counts sum to {total}, expected {NUM_JOINTS}"
            )));
        }
        Ok(())
    }

    pub fn finger(&self, finger: Finger) -> &FingerGeometry {
        &self.fingers[finger.index()]
    }

    /// Range of `HandState::q` indices owned by `finger`.
    pub fn joint_range(&self, finger: Finger) -> std::ops::Range<usize> {
        let start: usize = self.fingers[..finger.index()].iter().map(|f| f.joints.len()).sum();
        start..start + self.fingers[finger.index()].joints.len()
    }

    pub fn limits(&self) -> [(f64, f64); NUM_JOINTS] {
        let mut out = [(0.0, 0.0); NUM_JOINTS];
        let mut k = 0;
        for fg in &self.fingers {
            for j in &fg.joints {
                out[k] = (j.lower, j.upper);
                k += 1;
            }
        }
        out
    }

    pub fn check_limits(&self, state: &HandState) -> Result<()> {
        for (index, (&value, (lower, upper))) in state.q.iter().zip(self.limits()).enumerate() {
            if !(value >= lower && value <= upper) {
                return Err(Error::JointLimitViolation {
                    index,
                    value,
                    lower,
                    upper,
                });
            }
        }
        Ok(())
    }

    /// Clamps every joint into its limits; returns the clamped state and
    /// whether anything changed.
    pub fn clamp(&self, q: &[f64; NUM_JOINTS]) -> (HandState, bool) {
        let mut out = *q;
        let mut clamped = false;
        for (v, (lo, hi)) in out.iter_mut().zip(self.limits()) {
            let c = v.clamp(lo, hi);
            clamped |= c != *v;
            *v = c;
        }
        (HandState::new(out), clamped)
    }

    /// Joint frames along one finger: (origin, world axis) per joint, then
    /// the tip pose. No limit checks.
    fn chain(&self, finger: Finger, q: &[f64]) -> (Vec<JointFrame>, FingertipPose) {
        let fg = self.finger(finger);
        let mut rot = fg.base_rotation();
        let mut pos = Vector3::from(fg.base_position);
        let mut frames = Vec::with_capacity(fg.joints.len());
        for (j, &angle) in fg.joints.iter().zip(q) {
            let axis = Vector3::from(j.axis).normalize();
            frames.push((pos, rot * axis));
            rot *= Rotation3::from_axis_angle(&Unit::new_unchecked(axis), angle).matrix();
            pos += rot.column(0) * j.link_length;
        }
        let pose = FingertipPose {
            position: pos,
            orientation: rot * tip_to_sensor(),
        };
        (frames, pose)
    }

    pub fn finger_pose(&self, finger: Finger, q: &[f64]) -> FingertipPose {
        self.chain(finger, q).1
    }

    /// Positional Jacobian (3 x n) of one finger w.r.t. its own joints.
    pub fn finger_jacobian(&self, finger: Finger, q: &[f64]) -> DMatrix<f64> {
        let (frames, tip) = self.chain(finger, q);
        let mut jac = DMatrix::zeros(3, frames.len());
        for (c, (origin, axis)) in frames.iter().enumerate() {
            jac.column_mut(c).copy_from(&axis.cross(&(tip.position - origin)));
        }
        jac
    }

    pub fn forward_kinematics(&self, state: &HandState) -> Result<FingertipPoses> {
        self.check_limits(state)?;
        Ok(self.forward_kinematics_unchecked(&state.q))
    }

    pub(crate) fn forward_kinematics_unchecked(&self, q: &[f64; NUM_JOINTS]) -> FingertipPoses {
        let pose = |f: Finger| self.finger_pose(f, &q[self.joint_range(f)]);
        FingertipPoses {
            poses: [pose(Finger::Thumb), pose(Finger::Index), pose(Finger::Middle)],
        }
    }

    /// Per-finger positional Jacobians, thumb first.
    pub fn jacobian(&self, state: &HandState) -> Result<[DMatrix<f64>; 3]> {
        self.check_limits(state)?;
        Ok(Finger::ALL.map(|f| self.finger_jacobian(f, &state.q[self.joint_range(f)])))
    }

    /// Block-diagonal 9 x 11 Jacobian of the stacked fingertip positions.
    pub fn full_jacobian(&self, state: &HandState) -> Result<SMatrix<f64, 9, NUM_JOINTS>> {
        let blocks = self.jacobian(state)?;
        let mut full = SMatrix::<f64, 9, NUM_JOINTS>::zeros();
        for f in Finger::ALL {
            let range = self.joint_range(f);
            full.view_mut((3 * f.index(), range.start), (3, range.len()))
                .copy_from(&blocks[f.index()]);
        }
        Ok(full)
    }

    /// Damped least-squares position IK for one finger. Returns the best
    /// iterate and its residual (mm).
    pub fn solve_finger(&self, finger: Finger, target: &Vector3<f64>, seed: &[f64]) -> (Vec<f64>, f64) {
        self.solve_finger_with(finger, target, seed, IK_MAX_ITERATIONS)
    }

    pub(crate) fn solve_finger_with(
        &self,
        finger: Finger,
        target: &Vector3<f64>,
        seed: &[f64],
        max_iterations: usize,
    ) -> (Vec<f64>, f64) {
        let fg = self.finger(finger);
        let mut q: Vec<f64> = seed
            .iter()
            .zip(&fg.joints)
            .map(|(v, j)| v.clamp(j.lower, j.upper))
            .collect();
        let mut err = target - self.finger_pose(finger, &q).position;
        let mut best = (q.clone(), err.norm());
        let lambda2 = IK_DAMPING * IK_DAMPING;
        for _ in 0..max_iterations {
            // half the tolerance per finger keeps the stacked 9-vector error under it
            if best.1 < 0.5 * IK_TOLERANCE {
                break;
            }
            let mut jac = self.finger_jacobian(finger, &q);
            let e = DVector::from_column_slice(err.as_slice());
            let mut step = DVector::zeros(q.len());
            // Joints pinned at a limit and pushed outward are dropped and the
            // step is re-solved on the rest.
            for _ in 0..q.len() {
                let damped = &jac * jac.transpose() + Matrix3::identity() * lambda2;
                let Some(inv) = damped.try_inverse() else {
                    break;
                };
                step = jac.transpose() * (inv * &e);
                let mut pinned = false;
                for (c, j) in fg.joints.iter().enumerate() {
                    let at_upper = q[c] >= j.upper && step[c] > 0.0;
                    let at_lower = q[c] <= j.lower && step[c] < 0.0;
                    if (at_upper || at_lower) && jac.column(c).norm() > 0.0 {
                        jac.column_mut(c).fill(0.0);
                        pinned = true;
                    }
                }
                if !pinned {
                    break;
                }
            }
            for ((v, s), j) in q.iter_mut().zip(step.iter()).zip(&fg.joints) {
                *v = (*v + s).clamp(j.lower, j.upper);
            }
            err = target - self.finger_pose(finger, &q).position;
            let r = err.norm();
            if r < best.1 {
                best = (q.clone(), r);
            }
        }
        best
    }

    /// Position IK for all three fingers, each solved independently.
    pub fn inverse_kinematics(&self, target: &SMatrix<f64, 9, 1>, seed: &HandState) -> Result<HandState> {
        let mut q = seed.q;
        for f in Finger::ALL {
            let range = self.joint_range(f);
            let t = target.fixed_rows::<3>(3 * f.index()).into_owned();
            let (sol, residual) = self.solve_finger(f, &t, &seed.q[range.clone()]);
            if residual > IK_UNREACHABLE {
                return Err(Error::Unreachable {
                    finger: f.to_string(),
                    residual,
                });
            }
            q[range].copy_from_slice(&sol);
        }
        Ok(HandState::new(q))
    }

    /// IK with a soft pad-orientation objective: tracks `target` while
    /// pulling the outward pad normal toward `normal`. `weight` converts the
    /// unit-vector error into millimeters.
    pub fn solve_posture(
        &self,
        finger: Finger,
        target: &Vector3<f64>,
        normal: &Vector3<f64>,
        weight: f64,
        seed: &[f64],
        iterations: usize,
    ) -> Vec<f64> {
        let fg = self.finger(finger);
        let mut q: Vec<f64> = seed
            .iter()
            .zip(&fg.joints)
            .map(|(v, j)| v.clamp(j.lower, j.upper))
            .collect();
        let n = q.len();
        for _ in 0..iterations {
            let (frames, tip) = self.chain(finger, &q);
            let pad = tip.pad_normal();
            let mut err = DVector::zeros(6);
            err.fixed_rows_mut::<3>(0).copy_from(&(target - tip.position));
            err.fixed_rows_mut::<3>(3).copy_from(&((normal - pad) * weight));
            if err.norm() < 1e-6 {
                break;
            }
            let mut jac = DMatrix::zeros(6, n);
            for (c, (origin, axis)) in frames.iter().enumerate() {
                jac.view_mut((0, c), (3, 1))
                    .copy_from(&axis.cross(&(tip.position - origin)));
                jac.view_mut((3, c), (3, 1)).copy_from(&(axis.cross(&pad) * weight));
            }
            let damped = jac.transpose() * &jac + DMatrix::identity(n, n) * 0.25;
            let Some(step) = damped.lu().solve(&(jac.transpose() * err)) else {
                break;
            };
            for ((v, s), j) in q.iter_mut().zip(step.iter()).zip(&fg.joints) {
                *v = (*v + s).clamp(j.lower, j.upper);
            }
        }
        q
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_state(geom: &HandGeometry, rng: &mut impl Rng) -> HandState {
        let mut q = [0.0; NUM_JOINTS];
        for (v, (lo, hi)) in q.iter_mut().zip(geom.limits()) {
            *v = rng.random_range(lo..hi);
        }
        HandState::new(q)
    }

    /// Independent oracle: 4x4 homogeneous transforms multiplied in order.
    fn homogeneous_tip(fg: &FingerGeometry, q: &[f64]) -> Vector3<f64> {
        use nalgebra::Matrix4;
        let mut t = Matrix4::identity();
        let b = fg.base_rotation;
        for r in 0..3 {
            for c in 0..3 {
                t[(r, c)] = b[r][c];
            }
            t[(r, 3)] = fg.base_position[r];
        }
        for (j, &a) in fg.joints.iter().zip(q) {
            let (k, s, c) = (Vector3::from(j.axis).normalize(), a.sin(), a.cos());
            // Rodrigues, written out
            let mut rot = Matrix4::identity();
            let kx = Matrix3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
            let r3 = Matrix3::identity() + kx * s + kx * kx * (1.0 - c);
            rot.fixed_view_mut::<3, 3>(0, 0).copy_from(&r3);
            let mut tr = Matrix4::identity();
            tr[(0, 3)] = j.link_length;
            t = t * rot * tr;
        }
        Vector3::new(t[(0, 3)], t[(1, 3)], t[(2, 3)])
    }

    #[test]
    fn default_geometry_is_valid() {
        let g = HandGeometry::default();
        g.validate().unwrap();
        assert_eq!(g.joint_range(Finger::Thumb), 0..4);
        assert_eq!(g.joint_range(Finger::Index), 4..8);
        assert_eq!(g.joint_range(Finger::Middle), 8..11);
    }

    #[test]
    fn zero_angles_give_straight_chain() {
        let g = HandGeometry::default();
        let poses = g.forward_kinematics(&HandState::zeros()).unwrap();
        for f in Finger::ALL {
            let fg = g.finger(f);
            let axis = fg.base_rotation().column(0).into_owned();
            let expected = Vector3::from(fg.base_position) + axis * fg.total_length();
            assert_relative_eq!(poses.get(f).position, expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn single_joint_quarter_turn() {
        let g = HandGeometry {
            fingers: vec![FingerGeometry {
                finger: Finger::Thumb,
                base_position: [0.0; 3],
                base_rotation: rot_x(0.0),
                joints: vec![JointSpec {
                    axis: [0.0, 0.0, 1.0],
                    link_length: 10.0,
                    lower: -2.0,
                    upper: 2.0,
                }],
            }],
        };
        let p = g.finger_pose(Finger::Thumb, &[std::f64::consts::FRAC_PI_2]).position;
        assert_relative_eq!(p, Vector3::new(0.0, 10.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn fk_matches_homogeneous_oracle() {
        let g = HandGeometry::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let s = random_state(&g, &mut rng);
            let poses = g.forward_kinematics(&s).unwrap();
            for f in Finger::ALL {
                let oracle = homogeneous_tip(g.finger(f), &s.q[g.joint_range(f)]);
                assert!((poses.get(f).position - oracle).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn orientations_are_proper_rotations() {
        let g = HandGeometry::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let poses = g.forward_kinematics(&random_state(&g, &mut rng)).unwrap();
            for r in poses.orientations() {
                assert!((r.transpose() * r - Matrix3::identity()).abs().max() < 1e-9);
                assert!((r.determinant() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn planar_two_link_jacobian() {
        let (l1, l2) = (50.0, 30.0);
        let g = HandGeometry {
            fingers: vec![FingerGeometry {
                finger: Finger::Thumb,
                base_position: [0.0; 3],
                base_rotation: rot_x(0.0),
                joints: vec![
                    JointSpec {
                        axis: [0.0, 0.0, 1.0],
                        link_length: l1,
                        lower: -3.0,
                        upper: 3.0,
                    },
                    JointSpec {
                        axis: [0.0, 0.0, 1.0],
                        link_length: l2,
                        lower: -3.0,
                        upper: 3.0,
                    },
                ],
            }],
        };
        let jac = g.finger_jacobian(Finger::Thumb, &[0.0, 0.0]);
        // textbook planar 2R at zero: d/dq1 = (0, l1 + l2), d/dq2 = (0, l2)
        assert_relative_eq!(jac[(0, 0)], 0.0, epsilon = 1e-12);
        assert_relative_eq!(jac[(1, 0)], l1 + l2, epsilon = 1e-12);
        assert_relative_eq!(jac[(0, 1)], 0.0, epsilon = 1e-12);
        assert_relative_eq!(jac[(1, 1)], l2, epsilon = 1e-12);
    }

    #[test]
    fn off_chain_columns_are_zero() {
        let g = HandGeometry::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let full = g.full_jacobian(&random_state(&g, &mut rng)).unwrap();
        for f in Finger::ALL {
            let own = g.joint_range(f);
            for c in (0..NUM_JOINTS).filter(|c| !own.contains(c)) {
                for r in 3 * f.index()..3 * f.index() + 3 {
                    assert_eq!(full[(r, c)], 0.0);
                }
            }
        }
    }

    #[test]
    fn limit_violation_reports_joint() {
        let g = HandGeometry::default();
        let mut s = HandState::zeros();
        s.q[5] = 5.0;
        match g.forward_kinematics(&s) {
            Err(Error::JointLimitViolation { index, .. }) => assert_eq!(index, 5),
            other => panic!("expected limit violation, got {other:?}"),
        }
    }

    #[test]
    fn ik_fixed_point_returns_seed() {
        let g = HandGeometry::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = random_state(&g, &mut rng);
        let target = g.forward_kinematics(&s).unwrap().stacked();
        let sol = g.inverse_kinematics(&target, &s).unwrap();
        for (a, b) in sol.q.iter().zip(&s.q) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn ik_recovers_perturbed_seed() {
        let g = HandGeometry::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let s = random_state(&g, &mut rng);
            let target = g.forward_kinematics(&s).unwrap().stacked();
            let mut seed = s.q;
            for v in seed.iter_mut() {
                *v += 0.1;
            }
            let (seed, _) = g.clamp(&seed);
            let sol = g.inverse_kinematics(&target, &seed).unwrap();
            let back = g.forward_kinematics(&sol).unwrap().stacked();
            assert!(
                (back - target).norm() <= IK_TOLERANCE,
                "{} {:?} {:?}",
                (back - target).norm(),
                s.q,
                sol.q
            );
        }
    }

    #[test]
    fn far_target_is_unreachable() {
        let g = HandGeometry::default();
        let mut target = g.forward_kinematics(&HandState::zeros()).unwrap().stacked();
        let fg = g.finger(Finger::Index);
        let far = Vector3::from(fg.base_position) + Vector3::new(2.0 * fg.total_length(), 0.0, 0.0);
        target.fixed_rows_mut::<3>(3).copy_from(&far);
        assert!(matches!(
            g.inverse_kinematics(&target, &HandState::zeros()),
            Err(Error::Unreachable { .. })
        ));
    }

    #[test]
    fn posture_solver_aligns_pad() {
        let g = HandGeometry::default();
        let target = Vector3::new(70.0, 0.0, 40.0);
        let down = Vector3::new(0.0, 0.0, -1.0);
        let q = g.solve_posture(Finger::Thumb, &target, &down, 20.0, &[0.0, 0.3, 0.3, 0.0], 200);
        let pose = g.finger_pose(Finger::Thumb, &q);
        assert!((pose.position - target).norm() < 0.5, "{:?}", pose.position);
        assert!(pose.pad_normal().dot(&down) > 0.98);
    }
}
