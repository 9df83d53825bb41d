//! Actions emitted by the expert and the policy: joint deltas plus desired
//! per-finger normal force and center of pressure.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hand::NUM_JOINTS;

/// Flattened width of one action: 11 joint deltas, 3 forces, 3 CoPs.
pub const ACTION_DIM: usize = NUM_JOINTS + 3 + 6;

/// Per-step joint rate limit (rad).
pub const MAX_JOINT_STEP: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionStep {
    /// Joint deltas (rad).
    pub dq_d: [f64; NUM_JOINTS],
    /// Desired normal force per finger, thumb first.
    pub f_d: [f64; 3],
    /// Desired CoP per finger (mm, sensor frame).
    pub c_d: [[f64; 2]; 3],
}

impl Default for ActionStep {
    fn default() -> Self {
        Self {
            dq_d: [0.0; NUM_JOINTS],
            f_d: [0.0; 3],
            c_d: [[0.0; 2]; 3],
        }
    }
}

impl ActionStep {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(ACTION_DIM);
        self.write_into(&mut v);
        v
    }

    pub fn write_into(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.dq_d);
        out.extend_from_slice(&self.f_d);
        for c in &self.c_d {
            out.extend_from_slice(c);
        }
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != ACTION_DIM {
            return Err(Error::ShapeMismatch(format!(
                "action has {} values, expected {ACTION_DIM}",
                v.len()
            )));
        }
        let mut a = Self::default();
        a.dq_d.copy_from_slice(&v[..NUM_JOINTS]);
        a.f_d.copy_from_slice(&v[NUM_JOINTS..NUM_JOINTS + 3]);
        for (f, c) in a.c_d.iter_mut().enumerate() {
            let o = NUM_JOINTS + 3 + 2 * f;
            c.copy_from_slice(&v[o..o + 2]);
        }
        Ok(a)
    }

    /// Enforces the rate limit and nonnegative forces.
    pub fn sanitized(mut self) -> Self {
        for d in &mut self.dq_d {
            *d = d.clamp(-MAX_JOINT_STEP, MAX_JOINT_STEP);
        }
        for f in &mut self.f_d {
            *f = f.max(0.0);
        }
        self
    }

    pub fn is_valid(&self) -> bool {
        self.to_vec().iter().all(|v| v.is_finite())
            && self.dq_d.iter().all(|d| d.abs() <= MAX_JOINT_STEP)
            && self.f_d.iter().all(|&f| f >= 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionChunk {
    pub actions: Vec<ActionStep>,
}

impl ActionChunk {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.actions.len() * ACTION_DIM);
        for a in &self.actions {
            a.write_into(&mut v);
        }
        v
    }

    pub fn from_flat(v: &[f64]) -> Result<Self> {
        if !v.len().is_multiple_of(ACTION_DIM) {
            return Err(Error::ShapeMismatch(format!(
                "chunk of {} values is not a multiple of {ACTION_DIM}",
                v.len()
            )));
        }
        let actions = v
            .chunks(ACTION_DIM)
            .map(ActionStep::from_slice)
            .collect::<Result<_>>()?;
        Ok(Self { actions })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_round_trip() {
        let mut a = ActionStep::default();
        a.dq_d[3] = 0.02;
        a.f_d = [1.0, 2.0, 3.0];
        a.c_d[2] = [0.5, -0.25];
        let chunk = ActionChunk {
            actions: vec![a, ActionStep::default()],
        };
        let flat = chunk.flatten();
        assert_eq!(flat.len(), 2 * ACTION_DIM);
        assert_eq!(ActionChunk::from_flat(&flat).unwrap(), chunk);
        assert!(ActionChunk::from_flat(&flat[1..]).is_err());
    }

    #[test]
    fn sanitize_limits_rate_and_force() {
        let mut a = ActionStep::default();
        a.dq_d[0] = 0.3;
        a.f_d[1] = -1.0;
        let s = a.sanitized();
        assert_eq!(s.dq_d[0], MAX_JOINT_STEP);
        assert_eq!(s.f_d[1], 0.0);
        assert!(s.is_valid());
    }
}
