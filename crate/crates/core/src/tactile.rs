//! Visuotactile fingertip pad model.
//!
//! Each fingertip carries a 415-point gel pad. Points are tracked in the
//! sensor frame (millimeters, `z` along the outward pad normal), and contact
//! is summarized by a press mask, a normal pseudo-force and a center of
//! pressure (CoP) in the pad plane.

use std::fmt;
use std::sync::OnceLock;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of tracked points on one pad.
pub const PAD_POINTS: usize = 415;

/// Pad ellipse half-axes in millimeters (along sensor x, sensor y).
pub const PAD_HALF_AXES: (f64, f64) = (8.0, 5.0);

/// In-row spacing of the hexagonal pad lattice (mm). Dyadic so that
/// coordinate sums over symmetric point sets cancel exactly.
pub const GRID_PITCH: f64 = 602.0 / 1024.0;

/// Row spacing of the lattice (mm), `GRID_PITCH * sqrt(3) / 2` rounded to 1/1024.
pub const ROW_PITCH: f64 = 521.0 / 1024.0;

/// Default press threshold (mm).
pub const DEFAULT_PRESS_THRESHOLD: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Finger {
    Thumb,
    Index,
    Middle,
}

impl Finger {
    pub const ALL: [Finger; 3] = [Finger::Thumb, Finger::Index, Finger::Middle];

    pub fn index(self) -> usize {
        match self {
            Finger::Thumb => 0,
            Finger::Index => 1,
            Finger::Middle => 2,
        }
    }
}

impl fmt::Display for Finger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Finger::Thumb => "thumb",
            Finger::Index => "index",
            Finger::Middle => "middle",
        };
        f.write_str(name)
    }
}

/// Rest layout of the pad: a hexagonal lattice clipped to the pad ellipse.
///
/// The lattice at [`GRID_PITCH`] holds 419 interior points; the outermost
/// symmetric group of four is dropped, leaving 415 points that are symmetric
/// under `x -> -x` and `y -> -y`.
pub fn pad_layout() -> &'static [Vector3<f64>] {
    static LAYOUT: OnceLock<Vec<Vector3<f64>>> = OnceLock::new();
    LAYOUT.get_or_init(|| {
        let (ax, ay) = PAD_HALF_AXES;
        let rows = (ay / ROW_PITCH) as i64 + 1;
        let cols = (ax / GRID_PITCH) as i64 + 1;
        let mut pts: Vec<(f64, i64, i64, Vector3<f64>)> = Vec::new();
        for j in -rows..=rows {
            let shift = if j.rem_euclid(2) == 1 { 0.5 } else { 0.0 };
            for i in -cols - 1..=cols {
                let x = (i as f64 + shift) * GRID_PITCH;
                let y = j as f64 * ROW_PITCH;
                let r = (x / ax).powi(2) + (y / ay).powi(2);
                if r < 1.0 {
                    pts.push((r, j, i, Vector3::new(x, y, 0.0)));
                }
            }
        }
        pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        pts.truncate(PAD_POINTS);
        // Restore raster order for readability of serialized clouds.
        pts.sort_by(|a, b| a.1.cmp(&b.1).then(a.2.cmp(&b.2)));
        pts.into_iter().map(|p| p.3).collect()
    })
}

/// True if `xy` (sensor frame, mm) lies inside the pad ellipse.
pub fn pad_contains(xy: &Vector2<f64>) -> bool {
    let (ax, ay) = PAD_HALF_AXES;
    (xy.x / ax).powi(2) + (xy.y / ay).powi(2) <= 1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TactileCloud {
    pub finger: Finger,
    #[serde(rename = "t")]
    pub timestamp: f64,
    #[serde(rename = "rest")]
    pub rest_positions: Vec<Vector3<f64>>,
    #[serde(rename = "cur")]
    pub current_positions: Vec<Vector3<f64>>,
}

impl TactileCloud {
    /// Undeformed cloud on the default pad layout.
    pub fn at_rest(finger: Finger, timestamp: f64) -> Self {
        let rest = pad_layout().to_vec();
        Self {
            finger,
            timestamp,
            current_positions: rest.clone(),
            rest_positions: rest,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rest_positions.len() != PAD_POINTS || self.current_positions.len() != PAD_POINTS {
            return Err(Error::InvalidConfig(format!(
                "tactile cloud must hold {PAD_POINTS} points, got {}/{}",
                self.rest_positions.len(),
                self.current_positions.len()
            )));
        }
        for (i, (r, c)) in self.rest_positions.iter().zip(&self.current_positions).enumerate() {
            if !(r.iter().chain(c.iter()).all(|v| v.is_finite())) {
                return Err(Error::InvalidConfig(format!("point {i} is not finite")));
            }
            if c.z > r.z {
                return Err(Error::InvalidConfig(format!("point {i} bulges outward")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PressMask {
    pub flags: Vec<bool>,
    pub threshold_used: f64,
}

impl PressMask {
    pub fn pressed_count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TactileSummary {
    pub force_z: f64,
    pub cop_xy: Vector2<f64>,
    pub pressed_count: usize,
}

impl Default for TactileSummary {
    fn default() -> Self {
        Self {
            force_z: 0.0,
            cop_xy: Vector2::zeros(),
            pressed_count: 0,
        }
    }
}

/// Synthetic indentation: a Gaussian bump pressed into the pad along `-z`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContactPatch {
    pub center_xy: Vector2<f64>,
    pub depth: f64,
    pub radius: f64,
}

impl ContactPatch {
    pub fn new(center_xy: Vector2<f64>, depth: f64, radius: f64) -> Result<Self> {
        if !(radius > 0.0) || !(depth >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "contact patch needs radius > 0 and depth >= 0 (radius {radius}, depth {depth})"
            )));
        }
        Ok(Self {
            center_xy,
            depth,
            radius,
        })
    }
}

pub fn compute_displacements(cloud: &TactileCloud) -> Vec<Vector3<f64>> {
    cloud
        .current_positions
        .iter()
        .zip(&cloud.rest_positions)
        .map(|(c, r)| c - r)
        .collect()
}

/// Flags points whose displacement norm strictly exceeds `delta`.
pub fn press_mask(displacements: &[Vector3<f64>], delta: f64) -> Result<PressMask> {
    if !(delta > 0.0) {
        return Err(Error::NonpositiveThreshold(delta));
    }
    Ok(PressMask {
        flags: displacements.iter().map(|d| d.norm() > delta).collect(),
        threshold_used: delta,
    })
}

/// Sum of `|dz|` over pressed points.
pub fn interaction_force(displacements: &[Vector3<f64>], mask: &PressMask) -> f64 {
    displacements
        .iter()
        .zip(&mask.flags)
        .filter(|(_, &pressed)| pressed)
        .map(|(d, _)| d.z.abs())
        .sum::<f64>()
        // an empty float sum is -0.0
        + 0.0
}

/// Pressed-point centroid of the current positions, or the rest centroid
/// when nothing is pressed. Only the pad-plane components are returned.
pub fn center_of_pressure(cloud: &TactileCloud, mask: &PressMask) -> Vector2<f64> {
    let mut sum = Vector3::zeros();
    let mut count = 0usize;
    for (p, &pressed) in cloud.current_positions.iter().zip(&mask.flags) {
        if pressed {
            sum += p;
            count += 1;
        }
    }
    if count == 0 {
        let total: Vector3<f64> = cloud.rest_positions.iter().sum();
        let mean = total / cloud.rest_positions.len() as f64;
        return mean.xy();
    }
    (sum / count as f64).xy()
}

pub fn simulate_deformation(rest_cloud: &TactileCloud, patch: &ContactPatch) -> TactileCloud {
    let two_r2 = 2.0 * patch.radius * patch.radius;
    let current_positions = rest_cloud
        .rest_positions
        .iter()
        .map(|p| {
            let d2 = (p.xy() - patch.center_xy).norm_squared();
            p - Vector3::new(0.0, 0.0, patch.depth * (-d2 / two_r2).exp())
        })
        .collect();
    TactileCloud {
        finger: rest_cloud.finger,
        timestamp: rest_cloud.timestamp,
        rest_positions: rest_cloud.rest_positions.clone(),
        current_positions,
    }
}

pub fn summarize(cloud: &TactileCloud, delta: f64) -> Result<TactileSummary> {
    let displacements = compute_displacements(cloud);
    let mask = press_mask(&displacements, delta)?;
    Ok(TactileSummary {
        force_z: interaction_force(&displacements, &mask),
        cop_xy: center_of_pressure(cloud, &mask),
        pressed_count: mask.pressed_count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_has_415_symmetric_points() {
        let pts = pad_layout();
        assert_eq!(pts.len(), PAD_POINTS);
        for p in pts {
            assert!(pad_contains(&p.xy()));
            for mirror in [Vector3::new(-p.x, p.y, 0.0), Vector3::new(p.x, -p.y, 0.0)] {
                assert!(pts.contains(&mirror), "missing mirror of {p:?}");
            }
        }
        let centroid: Vector3<f64> = pts.iter().sum();
        assert_eq!(centroid, Vector3::zeros());
    }

    #[test]
    fn undeformed_cloud_has_zero_displacement() {
        let cloud = TactileCloud::at_rest(Finger::Index, 0.0);
        assert!(compute_displacements(&cloud).iter().all(|d| *d == Vector3::zeros()));
    }

    #[test]
    fn single_point_displacement() {
        let mut cloud = TactileCloud::at_rest(Finger::Index, 0.0);
        cloud.current_positions[17].z -= 0.3;
        let d = compute_displacements(&cloud);
        assert_eq!(d[17], Vector3::new(0.0, 0.0, -0.3));
    }

    #[test]
    fn threshold_boundary_is_not_pressed() {
        let mut d = vec![Vector3::zeros(); PAD_POINTS];
        d[3] = Vector3::new(0.0, 0.0, -0.05);
        let mask = press_mask(&d, 0.05).unwrap();
        assert!(!mask.flags[3]);
        assert_eq!(mask.pressed_count(), 0);
    }

    #[test]
    fn nonpositive_threshold_rejected() {
        let d = vec![Vector3::zeros(); PAD_POINTS];
        assert!(matches!(press_mask(&d, 0.0), Err(Error::NonpositiveThreshold(_))));
        assert!(matches!(press_mask(&d, -1.0), Err(Error::NonpositiveThreshold(_))));
    }

    #[test]
    fn force_sums_absolute_z_of_pressed_points() {
        let mut d = vec![Vector3::zeros(); PAD_POINTS];
        d[0].z = -0.1;
        d[1].z = -0.2;
        d[2].z = -0.3;
        let mask = press_mask(&d, 0.05).unwrap();
        assert!((interaction_force(&d, &mask) - 0.6).abs() < 1e-15);
        let empty = press_mask(&vec![Vector3::zeros(); PAD_POINTS], 0.05).unwrap();
        assert_eq!(interaction_force(&d, &empty), 0.0);
    }

    #[test]
    fn cop_of_two_points_is_their_mean() {
        let mut cloud = TactileCloud::at_rest(Finger::Thumb, 0.0);
        cloud.current_positions[0] = Vector3::new(1.0, 0.0, -0.2);
        cloud.current_positions[1] = Vector3::new(3.0, 0.0, -0.2);
        let mut mask = PressMask {
            flags: vec![false; PAD_POINTS],
            threshold_used: 0.05,
        };
        mask.flags[0] = true;
        mask.flags[1] = true;
        assert_eq!(center_of_pressure(&cloud, &mask), Vector2::new(2.0, 0.0));
    }

    #[test]
    fn no_press_cop_is_pad_center() {
        let cloud = TactileCloud::at_rest(Finger::Middle, 0.0);
        let s = summarize(&cloud, DEFAULT_PRESS_THRESHOLD).unwrap();
        assert_eq!(s.force_z, 0.0);
        assert_eq!(s.cop_xy, Vector2::zeros());
        assert_eq!(s.pressed_count, 0);
    }

    #[test]
    fn zero_depth_leaves_cloud_unchanged() {
        let rest = TactileCloud::at_rest(Finger::Index, 0.0);
        let patch = ContactPatch::new(Vector2::new(1.0, 1.0), 0.0, 2.0).unwrap();
        assert_eq!(simulate_deformation(&rest, &patch), rest);
    }

    #[test]
    fn centered_patch_gives_centered_cop() {
        let rest = TactileCloud::at_rest(Finger::Index, 0.0);
        let patch = ContactPatch::new(Vector2::zeros(), 0.5, 3.0).unwrap();
        let s = summarize(&simulate_deformation(&rest, &patch), DEFAULT_PRESS_THRESHOLD).unwrap();
        assert_eq!(s.cop_xy, Vector2::zeros());
        assert!(s.force_z > 0.0);
    }

    #[test]
    fn narrow_patch_on_grid_point_presses_only_that_point() {
        let rest = TactileCloud::at_rest(Finger::Index, 0.0);
        let target = pad_layout()[200];
        let patch = ContactPatch::new(target.xy(), 0.5, 0.1).unwrap();
        let cloud = simulate_deformation(&rest, &patch);
        // independent evaluation of the bump at each point
        let mut expected_pressed = 0;
        for p in &rest.rest_positions {
            let d2 = (p.x - target.x).powi(2) + (p.y - target.y).powi(2);
            if 0.5 * f64::exp(-d2 / 0.02) > DEFAULT_PRESS_THRESHOLD {
                expected_pressed += 1;
            }
        }
        let s = summarize(&cloud, DEFAULT_PRESS_THRESHOLD).unwrap();
        assert_eq!(s.pressed_count, expected_pressed);
        assert_eq!(s.pressed_count, 1);
        assert!((s.cop_xy - target.xy()).norm() <= GRID_PITCH / 2.0);
    }

    #[test]
    fn validate_rejects_bulge_and_wrong_count() {
        let mut cloud = TactileCloud::at_rest(Finger::Index, 0.0);
        cloud.current_positions[0].z = 0.1;
        assert!(cloud.validate().is_err());
        cloud.current_positions.pop();
        assert!(cloud.validate().is_err());
        assert!(TactileCloud::at_rest(Finger::Index, 0.0).validate().is_ok());
    }

    #[test]
    fn cloud_json_uses_short_field_names() {
        let cloud = TactileCloud::at_rest(Finger::Thumb, 0.5);
        let v: serde_json::Value = serde_json::to_value(&cloud).unwrap();
        assert_eq!(v["finger"], "thumb");
        assert_eq!(v["t"], 0.5);
        assert_eq!(v["rest"].as_array().unwrap().len(), PAD_POINTS);
        assert_eq!(v["cur"][0].as_array().unwrap().len(), 3);
    }
}
