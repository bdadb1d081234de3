//! Closed-loop simulation: planner, noisy measurements, fusion center,
//! per-vehicle feedback-linearizing control and nonlinear truth propagation.

use nalgebra::{DVector, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::collective::{build_collective, leader_stack, stack_state, CollectiveModel, LEVELS};
use crate::continuum::{follower_desired, in_triangle, LEADERS};
use crate::error::{Error, Result};
use crate::flin::{propagate, Controller, ExtendedState};
use crate::kf::{simulate_noisy_measurement, FusionCenter};
use crate::planner::{bisect_travel_time, leader_trajectories, BisectionResult, PlanResult, Verdict};
use crate::quadrotor::{ControlWrench, RotorSpeeds};
use crate::reference::TrajectoryPoint;
use crate::safety::{check_rotor_speeds, check_tracking, SafetyReport};
use crate::scenario::Scenario;

/// Tolerance on barycentric coordinates for the containment check.
const CONTAINMENT_TOL: f64 = 1e-9;

const STREAM_INITIAL_ESTIMATE: u64 = 1;
const STREAM_MEASUREMENT: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub seed: u64,
    pub scenario_hash: String,
    pub dt: f64,
    pub n_agents: usize,
    pub travel_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Abort {
    pub step: usize,
    pub time: f64,
    pub cause: String,
}

/// Everything recorded at one step, indexed by agent.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub time: f64,
    pub truth: Vec<ExtendedState>,
    pub estimated_position: Vec<Vector3<f64>>,
    pub estimated_velocity: Vec<Vector3<f64>>,
    /// Position variance per axis from the filter covariance.
    pub position_variance: Vec<Vector3<f64>>,
    /// Planner-derived desired position.
    pub desired: Vec<Vector3<f64>>,
    /// Position reference actually handed to the controller.
    pub commanded: Vec<Vector3<f64>>,
    pub wrench: Vec<ControlWrench>,
    pub rotors: Vec<RotorSpeeds>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub header: TraceHeader,
    pub records: Vec<StepRecord>,
    pub abort: Option<Abort>,
}

impl SimTrace {
    pub fn times(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.time).collect()
    }

    pub fn positions(&self) -> Vec<Vec<Vector3<f64>>> {
        self.records
            .iter()
            .map(|r| r.truth.iter().map(|s| s.base.position).collect())
            .collect()
    }

    pub fn desired(&self) -> Vec<Vec<Vector3<f64>>> {
        self.records.iter().map(|r| r.desired.clone()).collect()
    }

    pub fn rotors(&self) -> Vec<Vec<RotorSpeeds>> {
        self.records.iter().map(|r| r.rotors.clone()).collect()
    }

    /// Largest follower position-estimation error over the run.
    pub fn max_follower_estimation_error(&self) -> f64 {
        self.records
            .iter()
            .flat_map(|r| {
                (LEADERS..r.truth.len()).map(move |i| (r.truth[i].base.position - r.estimated_position[i]).norm())
            })
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub trace: SimTrace,
    pub report: SafetyReport,
    /// Steps at which a follower's reference left the leader triangle.
    pub containment_violations: usize,
}

impl RunOutput {
    pub fn safe(&self) -> bool {
        self.trace.abort.is_none() && self.report.ok()
    }

    pub fn failure_reason(&self) -> Option<String> {
        match &self.trace.abort {
            Some(a) => Some(format!("aborted at step {} (t = {}): {}", a.step, a.time, a.cause)),
            None => self.report.failure_reason(),
        }
    }
}

/// Safety report computed from a trace.
pub fn verify_trace(trace: &SimTrace, delta: f64, omega_max: f64) -> Result<SafetyReport> {
    let times = trace.times();
    Ok(SafetyReport {
        rotor: check_rotor_speeds(&times, &trace.rotors(), omega_max)?,
        tracking: check_tracking(&times, &trace.positions(), &trace.desired(), delta)?,
    })
}

pub fn collective_model(scenario: &Scenario) -> Result<CollectiveModel> {
    build_collective(
        &scenario.continuum,
        &scenario.topology,
        scenario.collective_gains,
        scenario.noise.measured_levels,
    )
}

/// Number of steps after the initial record for a plan of duration `total`.
pub fn step_count(total: f64, dt: f64) -> usize {
    (total / dt).round() as usize
}

/// Plans with the scenario's travel time and simulates.
pub fn run(scenario: &Scenario) -> Result<RunOutput> {
    simulate(scenario, &scenario.plan()?)
}

fn truth_points(states: &[ExtendedState], scenario: &Scenario) -> Vec<TrajectoryPoint> {
    states
        .iter()
        .map(|s| {
            let [position, velocity, acceleration, jerk] = s.output_derivatives(&scenario.params);
            TrajectoryPoint {
                position,
                velocity,
                acceleration,
                jerk,
                snap: Vector3::zeros(),
            }
        })
        .collect()
}

/// Closed-loop run along `plan`. Errors raised inside the step loop end the
/// run early and are recorded in the trace rather than returned.
pub fn simulate(scenario: &Scenario, plan: &PlanResult) -> Result<RunOutput> {
    let n = scenario.n_agents();
    let dt = scenario.dt;
    let params = scenario.params;
    let cfg = &scenario.continuum;
    let model = collective_model(scenario)?;
    let controller =
        Controller::new(params, scenario.controller_gains)?.with_feedforward(scenario.feedforward);

    let start_leaders = leader_trajectories(plan, cfg, 0.0);
    let start_desired = cfg.h.clone() * nalgebra::DMatrix::from_fn(LEADERS, 3, |j, a| start_leaders[j].position[a]);
    let mut states: Vec<ExtendedState> = (0..n)
        .map(|i| {
            let p = Vector3::new(start_desired[(i, 0)], start_desired[(i, 1)], start_desired[(i, 2)]);
            ExtendedState::hover(p, &params)
        })
        .collect();

    let mut init_rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    init_rng.set_stream(STREAM_INITIAL_ESTIMATE);
    let mut meas_rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    meas_rng.set_stream(STREAM_MEASUREMENT);

    let x0 = stack_state(&truth_points(&states, scenario));
    let spread = Normal::new(0.0, scenario.noise.initial_std)
        .map_err(|e| Error::InvalidInput(format!("initial_std: {e}")))?;
    let x0_hat = DVector::from_fn(x0.len(), |i, _| x0[i] + spread.sample(&mut init_rng));
    let mut fusion = FusionCenter::new(&model, &scenario.noise, dt, &x0_hat)?;
    let r_cov = nalgebra::DMatrix::identity(model.measurement_dim(), model.measurement_dim())
        * scenario.noise.measurement_std.powi(2);

    let header = TraceHeader {
        seed: scenario.seed,
        scenario_hash: scenario.hash.clone(),
        dt,
        n_agents: n,
        travel_time: plan.total_time,
    };
    let steps = step_count(plan.total_time, dt);
    let mut records = Vec::with_capacity(steps + 1);
    let mut abort = None;
    let mut containment_violations = 0;
    let mut previous_input: Option<DVector<f64>> = None;

    for k in 0..=steps {
        let t = k as f64 * dt;
        let outcome = (|| -> Result<StepRecord> {
            let leaders = leader_trajectories(plan, cfg, t);
            let (s_l, _) = leader_stack(&leaders);

            let x = stack_state(&truth_points(&states, scenario));
            let y = simulate_noisy_measurement(&x, &model.c_sys, &r_cov, &mut meas_rng)?;
            if let Some(u) = &previous_input {
                fusion.predict(u);
            }
            fusion.update(&y)?;
            let x_hat = fusion.estimate();
            let variance = fusion.covariance_diagonal();
            let at = |v: &DVector<f64>, lvl: usize, i: usize| {
                Vector3::new(v[model.index(lvl, 0, i)], v[model.index(lvl, 1, i)], v[model.index(lvl, 2, i)])
            };
            let est_leaders = [0, 1, 2].map(|j| at(&x_hat, 0, j));

            let mut desired = Vec::with_capacity(n);
            let mut references = Vec::with_capacity(n);
            for i in 0..n {
                let alpha = cfg.alpha_row(i);
                let ideal = TrajectoryPoint::weighted_sum(&alpha, &leaders);
                desired.push(ideal.position);
                if scenario.topology.is_leader(i) {
                    references.push(ideal);
                } else {
                    let commanded = follower_desired(&alpha, &est_leaders);
                    let inside_estimate = in_triangle(&est_leaders, &commanded, CONTAINMENT_TOL);
                    let ideal_triangle = leaders.map(|p| p.position);
                    let inside_ideal = in_triangle(&ideal_triangle, &ideal.position, CONTAINMENT_TOL);
                    if !(inside_estimate && inside_ideal) {
                        containment_violations += 1;
                    }
                    references.push(TrajectoryPoint {
                        position: commanded,
                        ..ideal
                    });
                }
            }

            let mut wrench = Vec::with_capacity(n);
            let mut rotors = Vec::with_capacity(n);
            let mut inputs = Vec::with_capacity(n);
            for i in 0..n {
                let out = controller
                    .step(&states[i], &references[i], dt)
                    .map_err(|e| Error::InvalidInput(format!("agent {}: {e}", i + 1)))?;
                wrench.push(out.wrench);
                rotors.push(out.rotors);
                inputs.push(out.input);
            }

            let record = StepRecord {
                time: t,
                truth: states.clone(),
                estimated_position: (0..n).map(|i| at(&x_hat, 0, i)).collect(),
                estimated_velocity: (0..n).map(|i| at(&x_hat, 1, i)).collect(),
                position_variance: (0..n).map(|i| at(&variance, 0, i)).collect(),
                desired,
                commanded: references.iter().map(|r| r.position).collect(),
                wrench,
                rotors,
            };

            if k < steps {
                for i in 0..n {
                    let next = propagate(&states[i], &inputs[i], &params, dt)
                        .map_err(|e| Error::InvalidInput(format!("agent {}: {e}", i + 1)))?;
                    if !next.to_vector().iter().all(|v| v.is_finite()) {
                        return Err(Error::InvalidInput(format!("agent {}: non-finite state", i + 1)));
                    }
                    states[i] = next;
                }
            }
            previous_input = Some(s_l);
            Ok(record)
        })();

        match outcome {
            Ok(record) => records.push(record),
            Err(e) => {
                log::warn!("run aborted at step {k}: {e}");
                abort = Some(Abort {
                    step: k,
                    time: t,
                    cause: e.to_string(),
                });
                break;
            }
        }
    }

    let trace = SimTrace { header, records, abort };
    let report = if trace.records.is_empty() {
        return Err(Error::IncompleteTrace(format!(
            "run aborted before the first record: {}",
            trace.abort.as_ref().map_or("", |a| a.cause.as_str())
        )));
    } else {
        verify_trace(&trace, scenario.safety.delta, scenario.safety.omega_max)?
    };
    Ok(RunOutput {
        trace,
        report,
        containment_violations,
    })
}

/// Minimum safe travel time by bisection over closed-loop runs along the
/// scenario's waypoints.
pub fn bisect(scenario: &Scenario) -> Result<(PlanResult, BisectionResult)> {
    let base = scenario.plan()?;
    let b = scenario.bisection;
    let result = bisect_travel_time(
        |t| {
            let out = simulate(scenario, &base.with_total_time(t)?)?;
            Ok(Verdict {
                safe: out.safe(),
                reason: out.failure_reason(),
            })
        },
        b.t_lo,
        b.t_hi,
        b.tol,
    )?;
    Ok((base.with_total_time(result.travel_time)?, result))
}

/// Noise-free run of the linear collective model along a plan.
#[derive(Debug, Clone)]
pub struct LinearTrace {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    /// Position-level `‖X − Y_d‖` at every step.
    pub error_norms: Vec<f64>,
}

impl LinearTrace {
    pub fn peak_error(&self) -> f64 {
        self.error_norms.iter().copied().fold(0.0, f64::max)
    }
}

/// RK4 on `ẋ = A_sys x + B_sys S_L(t)` starting on the desired formation.
pub fn run_open_loop_linear(scenario: &Scenario, plan: &PlanResult) -> Result<LinearTrace> {
    let model = collective_model(scenario)?;
    run_linear_model(&model, scenario, plan)
}

pub fn run_linear_model(model: &CollectiveModel, scenario: &Scenario, plan: &PlanResult) -> Result<LinearTrace> {
    let cfg = &scenario.continuum;
    let dt = scenario.dt;
    let input = |t: f64| leader_stack(&leader_trajectories(plan, cfg, t)).0;
    let f = |t: f64, x: &DVector<f64>| model.derivative(x, &input(t));
    let pos_dim = 3 * model.n_agents;
    let position_error = |t: f64, x: &DVector<f64>| {
        let yd = model.desired_stack(&leader_trajectories(plan, cfg, t));
        (x.rows(0, pos_dim) - yd.rows(0, pos_dim)).norm()
    };

    let mut x = model.desired_stack(&leader_trajectories(plan, cfg, 0.0));
    let steps = step_count(plan.total_time, dt);
    let mut out = LinearTrace {
        times: Vec::with_capacity(steps + 1),
        states: Vec::with_capacity(steps + 1),
        error_norms: Vec::with_capacity(steps + 1),
    };
    for k in 0..=steps {
        let t = k as f64 * dt;
        out.times.push(t);
        out.error_norms.push(position_error(t, &x));
        out.states.push(x.clone());
        if k == steps {
            break;
        }
        let k1 = f(t, &x)?;
        let k2 = f(t + dt / 2.0, &(&x + &k1 * (dt / 2.0)))?;
        let k3 = f(t + dt / 2.0, &(&x + &k2 * (dt / 2.0)))?;
        let k4 = f(t + dt, &(&x + &k3 * dt))?;
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    }
    debug_assert_eq!(out.states[0].len(), LEVELS * pos_dim);
    Ok(out)
}
