//! Trace-level checks of the rotor-speed envelope and the tracking bound.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrotor::RotorSpeeds;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotorVerdict {
    pub ok: bool,
    pub omega_max: f64,
    pub max_speed: f64,
    pub max_agent: usize,
    pub max_rotor: usize,
    pub max_step: usize,
    pub max_time: f64,
    pub min_speed: f64,
    /// `min(ω_max − max speed, min speed)`; positive iff the check passes.
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingVerdict {
    pub ok: bool,
    pub delta: f64,
    pub max_error: f64,
    pub max_agent: usize,
    pub max_step: usize,
    pub max_time: f64,
    /// `δ − max error`; positive iff the check passes.
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyReport {
    pub rotor: RotorVerdict,
    pub tracking: TrackingVerdict,
}

impl SafetyReport {
    pub fn ok(&self) -> bool {
        self.rotor.ok && self.tracking.ok
    }

    /// Which conditions fail, or `None` when both hold.
    pub fn failure_reason(&self) -> Option<String> {
        let mut parts = Vec::new();
        if !self.rotor.ok {
            parts.push(format!(
                "rotor speed {} outside (0, {}] (agent {}, rotor {}, t = {})",
                if self.rotor.min_speed <= 0.0 { self.rotor.min_speed } else { self.rotor.max_speed },
                self.rotor.omega_max,
                self.rotor.max_agent + 1,
                self.rotor.max_rotor + 1,
                self.rotor.max_time
            ));
        }
        if !self.tracking.ok {
            parts.push(format!(
                "tracking error {} ≥ {} (agent {}, t = {})",
                self.tracking.max_error,
                self.tracking.delta,
                self.tracking.max_agent + 1,
                self.tracking.max_time
            ));
        }
        (!parts.is_empty()).then(|| parts.join("; "))
    }
}

fn check_shape<T>(times: &[f64], per_step: &[Vec<T>], what: &str) -> Result<usize> {
    if times.is_empty() {
        return Err(Error::IncompleteTrace(format!("no {what} samples")));
    }
    if per_step.len() != times.len() {
        return Err(Error::IncompleteTrace(format!(
            "{} {what} records for {} time steps",
            per_step.len(),
            times.len()
        )));
    }
    let agents = per_step[0].len();
    if agents == 0 {
        return Err(Error::IncompleteTrace(format!("{what} records hold no agents")));
    }
    if let Some(k) = per_step.iter().position(|s| s.len() != agents) {
        return Err(Error::IncompleteTrace(format!(
            "step {k} has {} {what} records, expected {agents}",
            per_step[k].len()
        )));
    }
    Ok(agents)
}

/// Passes iff `0 < ω ≤ ω_max` for every rotor of every agent at every step.
/// `rotors[step][agent]`.
pub fn check_rotor_speeds(times: &[f64], rotors: &[Vec<RotorSpeeds>], omega_max: f64) -> Result<RotorVerdict> {
    check_shape(times, rotors, "rotor")?;
    let mut max = (f64::NEG_INFINITY, 0, 0, 0);
    let mut min = f64::INFINITY;
    let mut all_valid = true;
    for (k, step) in rotors.iter().enumerate() {
        for (i, speeds) in step.iter().enumerate() {
            for (r, &w) in speeds.0.iter().enumerate() {
                all_valid &= w > 0.0 && w <= omega_max;
                if w > max.0 || (max.0.is_nan() && !w.is_nan()) {
                    max = (w, i, r, k);
                }
                min = min.min(w);
            }
        }
    }
    let (max_speed, max_agent, max_rotor, max_step) = max;
    Ok(RotorVerdict {
        ok: all_valid,
        omega_max,
        max_speed,
        max_agent,
        max_rotor,
        max_step,
        max_time: times[max_step],
        min_speed: min,
        margin: (omega_max - max_speed).min(min),
    })
}

/// Passes iff `‖r − r_d‖ < δ` for every agent at every step.
pub fn check_tracking(
    times: &[f64],
    positions: &[Vec<Vector3<f64>>],
    desired: &[Vec<Vector3<f64>>],
    delta: f64,
) -> Result<TrackingVerdict> {
    let agents = check_shape(times, positions, "position")?;
    if check_shape(times, desired, "desired position")? != agents {
        return Err(Error::IncompleteTrace("position and desired records disagree on agent count".into()));
    }
    let mut max = (f64::NEG_INFINITY, 0, 0);
    let mut all_valid = true;
    for (k, (pos, des)) in positions.iter().zip(desired).enumerate() {
        for (i, (r, d)) in pos.iter().zip(des).enumerate() {
            let e = (r - d).norm();
            all_valid &= e < delta;
            if e > max.0 || (max.0.is_nan() && !e.is_nan()) {
                max = (e, i, k);
            }
        }
    }
    let (max_error, max_agent, max_step) = max;
    Ok(TrackingVerdict {
        ok: all_valid,
        delta,
        max_error,
        max_agent,
        max_step,
        max_time: times[max_step],
        margin: delta - max_error,
    })
}
