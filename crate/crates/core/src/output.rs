//! Run outputs: wide CSV tables (one row per step), a JSON summary and a
//! matrix dump. Floats are written in shortest round-trip form so that a
//! persisted trace re-verifies to the identical report.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::engine::{collective_model, Abort, RunOutput, SimTrace};
use crate::error::{Error, Result};
use crate::planner::{BisectionResult, PlanResult};
use crate::quadrotor::RotorSpeeds;
use crate::safety::{check_rotor_speeds, check_tracking, SafetyReport};
use crate::scenario::Scenario;

pub const TRAJECTORY: &str = "trajectory.csv";
pub const DESIRED: &str = "desired.csv";
pub const ESTIMATE: &str = "estimate.csv";
pub const ERRORS: &str = "errors.csv";
pub const ROTORS: &str = "rotors.csv";
pub const ATTITUDE: &str = "attitude.csv";
pub const WAYPOINTS: &str = "waypoints.csv";
pub const SUMMARY: &str = "summary.json";
pub const MATRICES: &str = "matrices.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub scenario_hash: String,
    pub dt: f64,
    pub n_agents: usize,
    pub travel_time: f64,
    pub records: usize,
    pub delta: f64,
    pub omega_max: f64,
    pub safe: bool,
    pub report: SafetyReport,
    pub abort: Option<Abort>,
    pub containment_violations: usize,
    pub max_follower_estimation_error: f64,
    pub waypoints: Vec<[f64; 3]>,
    pub segment_times: Vec<f64>,
    pub bisection: Option<BisectionResult>,
}

impl RunSummary {
    pub fn new(scenario: &Scenario, plan: &PlanResult, out: &RunOutput, bisection: Option<&BisectionResult>) -> Self {
        Self {
            seed: out.trace.header.seed,
            scenario_hash: out.trace.header.scenario_hash.clone(),
            dt: out.trace.header.dt,
            n_agents: out.trace.header.n_agents,
            travel_time: plan.total_time,
            records: out.trace.records.len(),
            delta: scenario.safety.delta,
            omega_max: scenario.safety.omega_max,
            safe: out.safe(),
            report: out.report.clone(),
            abort: out.trace.abort.clone(),
            containment_violations: out.containment_violations,
            max_follower_estimation_error: out.trace.max_follower_estimation_error(),
            waypoints: plan.waypoints.iter().map(|w| [w.x, w.y, w.z]).collect(),
            segment_times: plan.segment_times.clone(),
            bisection: bisection.cloned(),
        }
    }
}

fn agent_columns(n: usize, fields: &[&str]) -> Vec<String> {
    let mut cols = vec!["time".to_string()];
    for i in 1..=n {
        cols.extend(fields.iter().map(|f| format!("a{i}_{f}")));
    }
    cols
}

fn push3(row: &mut Vec<String>, v: &Vector3<f64>) {
    row.extend(v.iter().map(|x| x.to_string()));
}

fn write_table<F>(path: &Path, header: Vec<String>, trace: &SimTrace, mut row: F) -> Result<()>
where
    F: FnMut(&crate::engine::StepRecord, &mut Vec<String>),
{
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&header)?;
    for rec in &trace.records {
        let mut r = vec![rec.time.to_string()];
        row(rec, &mut r);
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_waypoints(dir: &Path, plan: &PlanResult) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join(WAYPOINTS))?;
    w.write_record(["index", "x", "y", "z", "segment_time", "arrival_time"])?;
    let mut arrival = 0.0;
    for (j, p) in plan.waypoints.iter().enumerate() {
        let seg = if j == 0 { 0.0 } else { plan.segment_times[j - 1] };
        arrival += seg;
        w.write_record([
            (j + 1).to_string(),
            p.x.to_string(),
            p.y.to_string(),
            p.z.to_string(),
            seg.to_string(),
            arrival.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes every output family for a completed run. With `plot_data` off
/// only the tables needed for re-verification and the summary are written.
pub fn emit_outputs(
    dir: &Path,
    scenario: &Scenario,
    plan: &PlanResult,
    out: &RunOutput,
    bisection: Option<&BisectionResult>,
    plot_data: bool,
) -> Result<RunSummary> {
    std::fs::create_dir_all(dir)?;
    let trace = &out.trace;
    let n = trace.header.n_agents;

    write_table(
        &dir.join(TRAJECTORY),
        agent_columns(
            n,
            &["x", "y", "z", "vx", "vy", "vz", "phi", "theta", "psi", "p", "q", "r", "thrust", "thrust_rate"],
        ),
        trace,
        |rec, row| {
            for s in &rec.truth {
                push3(row, &s.base.position);
                push3(row, &s.base.velocity);
                push3(row, &s.base.euler);
                push3(row, &s.base.omega);
                row.push(s.thrust.to_string());
                row.push(s.thrust_rate.to_string());
            }
        },
    )?;
    write_table(
        &dir.join(DESIRED),
        agent_columns(n, &["x", "y", "z", "cmd_x", "cmd_y", "cmd_z"]),
        trace,
        |rec, row| {
            for (d, c) in rec.desired.iter().zip(&rec.commanded) {
                push3(row, d);
                push3(row, c);
            }
        },
    )?;
    let mut rotor_header = agent_columns(n, &["w1", "w2", "w3", "w4"]);
    rotor_header.push("omega_max".into());
    let omega_max = scenario.safety.omega_max.to_string();
    write_table(&dir.join(ROTORS), rotor_header, trace, |rec, row| {
        for w in &rec.rotors {
            row.extend(w.0.iter().map(|x| x.to_string()));
        }
        row.push(omega_max.clone());
    })?;

    if plot_data {
        write_table(
            &dir.join(ESTIMATE),
            agent_columns(n, &["x", "y", "z", "vx", "vy", "vz", "var_x", "var_y", "var_z"]),
            trace,
            |rec, row| {
                for i in 0..n {
                    push3(row, &rec.estimated_position[i]);
                    push3(row, &rec.estimated_velocity[i]);
                    push3(row, &rec.position_variance[i]);
                }
            },
        )?;
        let mut err_header = agent_columns(n, &["tracking", "estimation"]);
        err_header.extend(["max_tracking".to_string(), "delta".to_string()]);
        let delta = scenario.safety.delta.to_string();
        write_table(&dir.join(ERRORS), err_header, trace, |rec, row| {
            let mut worst = 0.0f64;
            for i in 0..n {
                let p = rec.truth[i].base.position;
                let tracking = (p - rec.desired[i]).norm();
                worst = worst.max(tracking);
                row.push(tracking.to_string());
                row.push((p - rec.estimated_position[i]).norm().to_string());
            }
            row.push(worst.to_string());
            row.push(delta.clone());
        })?;
        write_table(
            &dir.join(ATTITUDE),
            agent_columns(n, &["phi", "theta", "psi", "thrust", "tau_x", "tau_y", "tau_z"]),
            trace,
            |rec, row| {
                for (s, w) in rec.truth.iter().zip(&rec.wrench) {
                    push3(row, &s.base.euler);
                    row.push(w.thrust.to_string());
                    push3(row, &w.torque);
                }
            },
        )?;
        let model = collective_model(scenario)?;
        let mut f = BufWriter::new(File::create(dir.join(MATRICES))?);
        model.write_diagnostics(&mut f)?;
        f.flush()?;
    }
    write_waypoints(dir, plan)?;

    let summary = RunSummary::new(scenario, plan, out, bisection);
    write_summary(dir, &summary)?;
    Ok(summary)
}

pub fn write_summary(dir: &Path, summary: &RunSummary) -> Result<()> {
    let mut f = BufWriter::new(File::create(dir.join(SUMMARY))?);
    serde_json::to_writer_pretty(&mut f, summary)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

pub fn read_summary(dir: &Path) -> Result<RunSummary> {
    let text = std::fs::read_to_string(dir.join(SUMMARY))
        .map_err(|e| Error::IncompleteTrace(format!("{}: {e}", dir.join(SUMMARY).display())))?;
    Ok(serde_json::from_str(&text)?)
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<f64>>,
}

impl Table {
    fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)
            .map_err(|e| Error::IncompleteTrace(format!("{}: {e}", path.display())))?;
        let header = r.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for (k, rec) in r.records().enumerate() {
            let rec = rec?;
            let row = rec
                .iter()
                .map(|v| {
                    v.parse::<f64>().map_err(|_| {
                        Error::IncompleteTrace(format!("{} row {}: bad number `{v}`", path.display(), k + 1))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Ok(Self { header, rows })
    }

    fn column(&self, name: &str, path: &Path) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::IncompleteTrace(format!("{} lacks column `{name}`", path.display())))
    }

    fn vectors(&self, n: usize, fields: [&str; 3], path: &Path) -> Result<Vec<Vec<Vector3<f64>>>> {
        let mut cols = Vec::with_capacity(n);
        for i in 1..=n {
            let mut c = [0usize; 3];
            for (slot, f) in c.iter_mut().zip(fields) {
                *slot = self.column(&format!("a{i}_{f}"), path)?;
            }
            cols.push(c);
        }
        Ok(self
            .rows
            .iter()
            .map(|r| cols.iter().map(|c| Vector3::new(r[c[0]], r[c[1]], r[c[2]])).collect())
            .collect())
    }
}

/// Outcome of re-verifying a persisted run.
#[derive(Debug, Clone, PartialEq)]
pub struct Verification {
    pub recomputed: SafetyReport,
    pub recorded: SafetyReport,
    pub abort: Option<Abort>,
}

impl Verification {
    /// Whether the recomputed report serializes identically to the recorded one.
    pub fn matches(&self) -> bool {
        serde_json::to_string(&self.recomputed).ok() == serde_json::to_string(&self.recorded).ok()
    }

    pub fn safe(&self) -> bool {
        self.abort.is_none() && self.recomputed.ok()
    }
}

/// Reloads a run directory and recomputes its safety report.
pub fn verify_dir(dir: &Path) -> Result<Verification> {
    let summary = read_summary(dir)?;
    let n = summary.n_agents;
    let traj_path = dir.join(TRAJECTORY);
    let des_path = dir.join(DESIRED);
    let rot_path = dir.join(ROTORS);
    let traj = Table::read(&traj_path)?;
    let des = Table::read(&des_path)?;
    let rot = Table::read(&rot_path)?;
    if [traj.rows.len(), des.rows.len(), rot.rows.len()] != [summary.records; 3] {
        return Err(Error::IncompleteTrace(format!(
            "expected {} rows, found {} / {} / {}",
            summary.records,
            traj.rows.len(),
            des.rows.len(),
            rot.rows.len()
        )));
    }
    let time_col = traj.column("time", &traj_path)?;
    let times: Vec<f64> = traj.rows.iter().map(|r| r[time_col]).collect();
    let positions = traj.vectors(n, ["x", "y", "z"], &traj_path)?;
    let desired = des.vectors(n, ["x", "y", "z"], &des_path)?;
    let mut rotor_cols = Vec::with_capacity(n);
    for i in 1..=n {
        let mut c = [0usize; 4];
        for (r, slot) in c.iter_mut().enumerate() {
            *slot = rot.column(&format!("a{i}_w{}", r + 1), &rot_path)?;
        }
        rotor_cols.push(c);
    }
    let rotors: Vec<Vec<RotorSpeeds>> = rot
        .rows
        .iter()
        .map(|r| rotor_cols.iter().map(|c| RotorSpeeds(c.map(|k| r[k]))).collect())
        .collect();

    let recomputed = SafetyReport {
        rotor: check_rotor_speeds(&times, &rotors, summary.omega_max)?,
        tracking: check_tracking(&times, &positions, &desired, summary.delta)?,
    };
    Ok(Verification {
        recomputed,
        recorded: summary.report,
        abort: summary.abort,
    })
}
