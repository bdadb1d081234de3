//! Scenario files: a strict TOML schema with defaults for everything except
//! the formation and the environment.

use std::path::{Path, PathBuf};

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::collective::CollectiveGains;
use crate::continuum::{build_matrices, ContinuumConfig, Topology, LEADERS};
use crate::error::{Error, Result};
use crate::flin::ControllerGains;
use crate::kf::NoiseConfig;
use crate::planner::{plan_waypoints, OccupancyGrid, PlanResult};
use crate::quadrotor::QuadParams;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_dt")]
    dt: f64,
    #[serde(default = "default_altitude")]
    altitude: f64,
    #[serde(default)]
    vehicle: QuadParams,
    formation: RawFormation,
    environment: RawEnvironment,
    #[serde(default)]
    gains: RawGains,
    #[serde(default)]
    noise: NoiseConfig,
    #[serde(default)]
    mission: RawMission,
    #[serde(default)]
    safety: SafetyLimits,
    #[serde(default)]
    bisection: RawBisection,
}

fn default_dt() -> f64 {
    0.01
}

fn default_altitude() -> f64 {
    2.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFormation {
    leaders: [[f64; 2]; 3],
    #[serde(default)]
    followers: Vec<RawFollower>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFollower {
    position: Option<[f64; 2]>,
    alpha: Option<[f64; 3]>,
    /// One-based agent indices.
    neighbors: [usize; 3],
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEnvironment {
    #[serde(default = "default_cell_size")]
    cell_size: f64,
    #[serde(default)]
    origin: [f64; 2],
    map: Option<Vec<String>>,
    map_file: Option<PathBuf>,
    start: [f64; 2],
    goal: [f64; 2],
    /// Obstacle clearance in metres; defaults to the formation radius.
    clearance: Option<f64>,
}

fn default_cell_size() -> f64 {
    1.0
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGains {
    #[serde(default)]
    collective: CollectiveGains,
    yaw: Option<[f64; 2]>,
    tracking: Option<[f64; 4]>,
    #[serde(default)]
    feedforward: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMission {
    #[serde(default = "default_travel_time")]
    travel_time: f64,
}

impl Default for RawMission {
    fn default() -> Self {
        Self {
            travel_time: default_travel_time(),
        }
    }
}

fn default_travel_time() -> f64 {
    60.0
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBisection {
    t_lo: Option<f64>,
    t_hi: Option<f64>,
    tol: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SafetyLimits {
    /// Tracking bound in metres.
    pub delta: f64,
    /// Rotor speed bound in rad/s.
    pub omega_max: f64,
}

impl Default for SafetyLimits {
    fn default() -> Self {
        Self {
            delta: 0.5,
            omega_max: 750.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BisectionConfig {
    pub t_lo: f64,
    pub t_hi: f64,
    pub tol: f64,
}

/// A validated scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub seed: u64,
    pub dt: f64,
    pub altitude: f64,
    pub params: QuadParams,
    pub topology: Topology,
    pub continuum: ContinuumConfig,
    pub grid: OccupancyGrid,
    pub start: Vector2<f64>,
    pub goal: Vector2<f64>,
    pub clearance: f64,
    pub collective_gains: CollectiveGains,
    pub controller_gains: ControllerGains,
    pub feedforward: bool,
    pub noise: NoiseConfig,
    pub travel_time: f64,
    pub safety: SafetyLimits,
    pub bisection: BisectionConfig,
    /// SHA-256 of the scenario text and any map file it references.
    pub hash: String,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::scenario(path.display().to_string(), e.to_string()))?;
        Self::from_toml_str(&text, path.parent())
    }

    /// Parses a scenario; relative map paths resolve against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::scenario("<root>", e.message()))?;
        let raw: RawScenario = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::scenario(if path == "." { "<root>".into() } else { path }, e.inner().message())
        })?;
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        let map_text = match (&raw.environment.map, &raw.environment.map_file) {
            (Some(_), Some(_)) => {
                return Err(Error::scenario("environment", "give either `map` or `map_file`, not both"))
            }
            (None, None) => return Err(Error::scenario("environment", "missing `map` or `map_file`")),
            (Some(rows), None) => rows.join("\n"),
            (None, Some(file)) => {
                let full = base_dir.map_or_else(|| file.clone(), |d| d.join(file));
                let t = std::fs::read_to_string(&full)
                    .map_err(|e| Error::scenario("environment.map_file", format!("{}: {e}", full.display())))?;
                hasher.update(t.as_bytes());
                t
            }
        };
        let hash = hex::encode(hasher.finalize());
        build(raw, &map_text, hash)
    }

    pub fn n_agents(&self) -> usize {
        self.topology.n_agents()
    }

    /// Waypoints at flight altitude for the configured start and goal.
    pub fn waypoints(&self) -> Result<Vec<Vector3<f64>>> {
        let wps = plan_waypoints(&self.grid, &self.start, &self.goal, self.clearance)?;
        Ok(wps.iter().map(|p| Vector3::new(p.x, p.y, self.altitude)).collect())
    }

    pub fn plan(&self) -> Result<PlanResult> {
        PlanResult::new(self.waypoints()?, self.travel_time)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

fn positive(path: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::scenario(path, format!("must be positive and finite, got {v}")))
    }
}

fn build(raw: RawScenario, map_text: &str, hash: String) -> Result<Scenario> {
    positive("dt", raw.dt)?;
    if !raw.altitude.is_finite() {
        return Err(Error::scenario("altitude", "must be finite"));
    }
    raw.vehicle
        .validate()
        .map_err(|e| Error::scenario("vehicle", e.to_string()))?;

    let leaders = raw.formation.leaders.map(|[x, y]| Vector3::new(x, y, 0.0));
    let n = LEADERS + raw.formation.followers.len();
    let mut refs: Vec<Vector3<f64>> = leaders.to_vec();
    let mut neighbors = Vec::with_capacity(raw.formation.followers.len());
    for (f, follower) in raw.formation.followers.iter().enumerate() {
        let path = format!("formation.followers[{f}]");
        let from_alpha = match follower.alpha {
            Some(a) => {
                let sum: f64 = a.iter().sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(Error::scenario(
                        format!("{path}.alpha"),
                        format!("weights must sum to 1 within 1e-9, got {sum}"),
                    ));
                }
                Some(leaders[0] * a[0] + leaders[1] * a[1] + leaders[2] * a[2])
            }
            None => None,
        };
        let position = match (follower.position, from_alpha) {
            (Some([x, y]), Some(p)) => {
                let given = Vector3::new(x, y, 0.0);
                if (given - p).norm() > 1e-9 * (1.0 + given.norm()) {
                    return Err(Error::scenario(
                        format!("{path}.alpha"),
                        format!("weights place the follower at {p:?}, not at the given position {given:?}"),
                    ));
                }
                given
            }
            (Some([x, y]), None) => Vector3::new(x, y, 0.0),
            (None, Some(p)) => p,
            (None, None) => return Err(Error::scenario(&path, "needs `position` or `alpha`")),
        };
        refs.push(position);
        let mut set = [0usize; 3];
        for (k, &j) in follower.neighbors.iter().enumerate() {
            if j == 0 || j > n {
                return Err(Error::scenario(
                    format!("{path}.neighbors[{k}]"),
                    format!("agent index {j} out of range 1..={n}"),
                ));
            }
            set[k] = j - 1;
        }
        neighbors.push(set);
    }
    let topology = Topology::new(n, neighbors).map_err(|e| Error::scenario("formation", e.to_string()))?;
    let continuum = build_matrices(&topology, &refs).map_err(|e| Error::scenario("formation", e.to_string()))?;

    let env = &raw.environment;
    positive("environment.cell_size", env.cell_size)?;
    let grid = OccupancyGrid::parse(map_text, env.cell_size, Vector2::from(env.origin))
        .map_err(|e| Error::scenario("environment.map", e.to_string()))?;
    let clearance = match env.clearance {
        Some(c) if !(c.is_finite() && c >= 0.0) => {
            return Err(Error::scenario("environment.clearance", format!("must be non-negative, got {c}")))
        }
        Some(c) => c,
        None => continuum.formation_radius(),
    };

    let collective_gains = raw.gains.collective;
    if !collective_gains.is_stable() {
        return Err(Error::scenario(
            "gains.collective",
            format!("{:?} do not give stable tracking dynamics", collective_gains.0),
        ));
    }
    let defaults = ControllerGains::default();
    let controller_gains = ControllerGains {
        yaw: raw.gains.yaw.unwrap_or(defaults.yaw),
        track: raw.gains.tracking.unwrap_or(defaults.track),
    };
    controller_gains
        .validate()
        .map_err(|e| Error::scenario("gains", e.to_string()))?;
    raw.noise
        .validate()
        .map_err(|e| Error::scenario("noise", e.to_string()))?;

    positive("mission.travel_time", raw.mission.travel_time)?;
    if !(raw.safety.delta.is_finite() && raw.safety.delta >= 0.0) {
        return Err(Error::scenario(
            "safety.delta",
            format!("must be non-negative and finite, got {}", raw.safety.delta),
        ));
    }
    positive("safety.omega_max", raw.safety.omega_max)?;

    let bisection = BisectionConfig {
        t_lo: raw.bisection.t_lo.unwrap_or(1.0),
        t_hi: raw.bisection.t_hi.unwrap_or(raw.mission.travel_time),
        tol: raw.bisection.tol.unwrap_or(1.0),
    };
    positive("bisection.t_lo", bisection.t_lo)?;
    positive("bisection.t_hi", bisection.t_hi)?;
    positive("bisection.tol", bisection.tol)?;
    if bisection.t_lo >= bisection.t_hi {
        return Err(Error::scenario("bisection", "t_lo must be below t_hi"));
    }

    Ok(Scenario {
        seed: raw.seed,
        dt: raw.dt,
        altitude: raw.altitude,
        params: raw.vehicle,
        topology,
        continuum,
        grid,
        start: Vector2::from(env.start),
        goal: Vector2::from(env.goal),
        clearance,
        collective_gains,
        controller_gains,
        feedforward: raw.gains.feedforward,
        noise: raw.noise,
        travel_time: raw.mission.travel_time,
        safety: raw.safety,
        bisection,
        hash,
    })
}
