use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

/// A point on a reference trajectory with its first four time derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub acceleration: Vector3<f64>,
    pub jerk: Vector3<f64>,
    pub snap: Vector3<f64>,
}

impl TrajectoryPoint {
    /// Stationary point: all derivatives zero.
    pub fn fixed(position: Vector3<f64>) -> Self {
        Self {
            position,
            ..Default::default()
        }
    }

    /// Derivative of order `level` (0 = position … 4 = snap).
    pub fn level(&self, level: usize) -> Vector3<f64> {
        match level {
            0 => self.position,
            1 => self.velocity,
            2 => self.acceleration,
            3 => self.jerk,
            4 => self.snap,
            _ => panic!("derivative level {level} out of range"),
        }
    }

    pub fn translated(&self, offset: &Vector3<f64>) -> Self {
        Self {
            position: self.position + offset,
            ..*self
        }
    }

    /// `Σ wᵢ pᵢ` applied to every derivative level.
    pub fn weighted_sum(weights: &[f64], points: &[TrajectoryPoint]) -> Self {
        debug_assert_eq!(weights.len(), points.len());
        let mut out = Self::default();
        for (w, p) in weights.iter().zip(points) {
            out.position += p.position * *w;
            out.velocity += p.velocity * *w;
            out.acceleration += p.acceleration * *w;
            out.jerk += p.jerk * *w;
            out.snap += p.snap * *w;
        }
        out
    }
}
