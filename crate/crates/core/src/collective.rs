//! Stacked fourth-order linear model of the whole team.
//!
//! State layout is level-major then axis-major: index `level·3N + axis·N + agent`
//! for levels position, velocity, acceleration, jerk. The leader input stack
//! uses `level·9 + axis·3 + leader`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::continuum::{ContinuumConfig, Topology, LEADERS};
use crate::error::{Error, Result};
use crate::flin::is_hurwitz_quartic;
use crate::reference::TrajectoryPoint;

pub const LEVELS: usize = 4;

/// Consensus gains ordered `[K1, K2, K3, K4]`: `K1` weights jerk, `K4` position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CollectiveGains(pub [f64; 4]);

impl Default for CollectiveGains {
    fn default() -> Self {
        Self([10.0, 35.0, 50.0, 35.0])
    }
}

impl CollectiveGains {
    /// Gain multiplying derivative `level` (0 = position).
    pub fn for_level(&self, level: usize) -> f64 {
        self.0[3 - level]
    }

    pub fn is_stable(&self) -> bool {
        is_hurwitz_quartic(self.0)
    }
}

#[derive(Debug, Clone)]
pub struct CollectiveModel {
    pub n_agents: usize,
    pub gains: CollectiveGains,
    pub a_sys: DMatrix<f64>,
    pub b_sys: DMatrix<f64>,
    pub c0: DMatrix<f64>,
    pub c_sys: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub l: DMatrix<f64>,
    pub measured_levels: usize,
}

/// Rows of the per-agent measurement matrix: one per leader self-loop, then
/// one per follower in-edge.
pub fn measurement_matrix(topology: &Topology) -> DMatrix<f64> {
    let n = topology.n_agents();
    let edges = topology.edges();
    let mut c0 = DMatrix::zeros(edges.len(), n);
    for (row, &(j, i)) in edges.iter().enumerate() {
        c0[(row, j)] += 1.0;
        if i != j {
            c0[(row, i)] -= 1.0;
        }
    }
    c0
}

pub fn build_collective(
    continuum: &ContinuumConfig,
    topology: &Topology,
    gains: CollectiveGains,
    measured_levels: usize,
) -> Result<CollectiveModel> {
    let n = topology.n_agents();
    if continuum.n_agents() != n {
        return Err(Error::InvalidInput(format!(
            "continuum has {} agents, topology {n}",
            continuum.n_agents()
        )));
    }
    if !(1..=LEVELS).contains(&measured_levels) {
        return Err(Error::InvalidInput(format!(
            "measured derivative levels must be in 1..=4, got {measured_levels}"
        )));
    }
    if !gains.is_stable() {
        return Err(Error::InvalidInput(format!(
            "collective gains {:?} do not give stable tracking dynamics",
            gains.0
        )));
    }

    let i3 = DMatrix::<f64>::identity(3, 3);
    let il = i3.kronecker(&continuum.l);
    let il0 = i3.kronecker(&continuum.l0);
    let s = 3 * n;

    let mut a_sys = DMatrix::zeros(LEVELS * s, LEVELS * s);
    for lvl in 0..LEVELS - 1 {
        a_sys
            .view_mut((lvl * s, (lvl + 1) * s), (s, s))
            .fill_with_identity();
    }
    let mut b_sys = DMatrix::zeros(LEVELS * s, LEVELS * 9);
    for lvl in 0..LEVELS {
        let k = gains.for_level(lvl);
        a_sys
            .view_mut((3 * s, lvl * s), (s, s))
            .copy_from(&(&il * k));
        b_sys
            .view_mut((3 * s, lvl * 9), (s, 9))
            .copy_from(&(&il0 * k));
    }

    let c0 = measurement_matrix(topology);
    let mut c_sys = DMatrix::zeros(3 * measured_levels * c0.nrows(), LEVELS * s);
    c_sys
        .view_mut((0, 0), (3 * measured_levels * c0.nrows(), 3 * measured_levels * n))
        .copy_from(&DMatrix::<f64>::identity(3 * measured_levels, 3 * measured_levels).kronecker(&c0));

    let model = CollectiveModel {
        n_agents: n,
        gains,
        a_sys,
        b_sys,
        c0,
        c_sys,
        h: continuum.h.clone(),
        l: continuum.l.clone(),
        measured_levels,
    };
    let worst = model.max_real_eigenvalue();
    if worst >= 0.0 {
        return Err(Error::InvalidInput(format!(
            "collective model is not stable: eigenvalue with real part {worst}"
        )));
    }
    Ok(model)
}

impl CollectiveModel {
    pub fn state_dim(&self) -> usize {
        LEVELS * 3 * self.n_agents
    }

    pub fn measurement_dim(&self) -> usize {
        self.c_sys.nrows()
    }

    /// Index of `(level, axis, agent)` in the stacked state.
    pub fn index(&self, level: usize, axis: usize, agent: usize) -> usize {
        level * 3 * self.n_agents + axis * self.n_agents + agent
    }

    /// Per-axis closed-loop block; `A_sys` is three interleaved copies of it.
    pub fn axis_block(&self) -> DMatrix<f64> {
        let n = self.n_agents;
        let mut a = DMatrix::zeros(LEVELS * n, LEVELS * n);
        for lvl in 0..LEVELS - 1 {
            a.view_mut((lvl * n, (lvl + 1) * n), (n, n)).fill_with_identity();
        }
        for lvl in 0..LEVELS {
            a.view_mut((3 * n, lvl * n), (n, n))
                .copy_from(&(&self.l * self.gains.for_level(lvl)));
        }
        a
    }

    /// Largest real part among the eigenvalues of the closed-loop block.
    pub fn max_real_eigenvalue(&self) -> f64 {
        self.axis_block()
            .complex_eigenvalues()
            .iter()
            .map(|z| z.re)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn derivative(&self, x: &DVector<f64>, s_l: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_state(x)?;
        if s_l.len() != LEVELS * 9 {
            return Err(Error::InvalidInput(format!(
                "leader input has length {}, expected 36",
                s_l.len()
            )));
        }
        Ok(&self.a_sys * x + &self.b_sys * s_l)
    }

    pub fn measure(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.c_sys * x
    }

    /// `Y_d` at every derivative level, laid out like the state.
    pub fn desired_stack(&self, leaders: &[TrajectoryPoint; 3]) -> DVector<f64> {
        let n = self.n_agents;
        let mut out = DVector::zeros(self.state_dim());
        for lvl in 0..LEVELS {
            for a in 0..3 {
                for i in 0..n {
                    let mut v = 0.0;
                    for (j, p) in leaders.iter().enumerate() {
                        v += self.h[(i, j)] * p.level(lvl)[a];
                    }
                    out[self.index(lvl, a, i)] = v;
                }
            }
        }
        out
    }

    pub fn error_state(&self, x: &DVector<f64>, leaders: &[TrajectoryPoint; 3]) -> Result<DVector<f64>> {
        self.check_state(x)?;
        Ok(x - self.desired_stack(leaders))
    }

    /// `Ė = A_sys E - [0; 0; 0; (I₃⊗H) S_L⁗]`.
    pub fn error_derivative(&self, e: &DVector<f64>, leader_snap: &[nalgebra::Vector3<f64>; 3]) -> DVector<f64> {
        let n = self.n_agents;
        let mut d = &self.a_sys * e;
        for a in 0..3 {
            for i in 0..n {
                let forcing: f64 = (0..LEADERS).map(|j| self.h[(i, j)] * leader_snap[j][a]).sum();
                d[self.index(3, a, i)] -= forcing;
            }
        }
        d
    }

    fn check_state(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.state_dim() {
            return Err(Error::InvalidInput(format!(
                "state has length {}, expected {}",
                x.len(),
                self.state_dim()
            )));
        }
        Ok(())
    }

    /// Dense row-major dump of the model matrices.
    pub fn write_diagnostics<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "# agents {}", self.n_agents)?;
        writeln!(out, "# gains K1..K4 {:?}", self.gains.0)?;
        writeln!(out, "# state index = level*3N + axis*N + agent; input index = level*9 + axis*3 + leader")?;
        for (name, m) in [
            ("H", &self.h),
            ("L", &self.l),
            ("C0", &self.c0),
            ("A_sys", &self.a_sys),
            ("B_sys", &self.b_sys),
            ("C_sys", &self.c_sys),
        ] {
            writeln!(out, "{name} {} {}", m.nrows(), m.ncols())?;
            for r in 0..m.nrows() {
                let row: Vec<String> = m.row(r).iter().map(|v| v.to_string()).collect();
                writeln!(out, "{}", row.join(" "))?;
            }
        }
        Ok(())
    }
}

/// Stacks `S_L` and its first three derivatives, plus the fourth derivative.
pub fn leader_stack(leaders: &[TrajectoryPoint; 3]) -> (DVector<f64>, [nalgebra::Vector3<f64>; 3]) {
    let mut s = DVector::zeros(LEVELS * 9);
    for lvl in 0..LEVELS {
        for a in 0..3 {
            for (j, p) in leaders.iter().enumerate() {
                s[lvl * 9 + a * 3 + j] = p.level(lvl)[a];
            }
        }
    }
    (s, leaders.map(|p| p.snap))
}

/// Stacks per-agent trajectory points into the model state layout.
pub fn stack_state(points: &[TrajectoryPoint]) -> DVector<f64> {
    let n = points.len();
    let mut x = DVector::zeros(LEVELS * 3 * n);
    for lvl in 0..LEVELS {
        for a in 0..3 {
            for (i, p) in points.iter().enumerate() {
                x[lvl * 3 * n + a * n + i] = p.level(lvl)[a];
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::continuum::build_matrices;
    use crate::presets::eight_agent_formation;
    use approx::assert_relative_eq;
    use nalgebra::Vector3;
    use proptest::prelude::*;

    fn eight() -> (ContinuumConfig, Topology, CollectiveModel) {
        let (topo, refs) = eight_agent_formation();
        let cfg = build_matrices(&topo, &refs).unwrap();
        let model = build_collective(&cfg, &topo, CollectiveGains::default(), 4).unwrap();
        (cfg, topo, model)
    }

    fn four() -> (ContinuumConfig, Topology, CollectiveModel) {
        let topo = Topology::new(4, vec![[0, 1, 2]]).unwrap();
        let refs = [(0.0, 0.0), (3.0, 0.0), (0.0, 3.0), (1.0, 1.0)].map(|(x, y)| Vector3::new(x, y, 0.0));
        let cfg = build_matrices(&topo, &refs).unwrap();
        let model = build_collective(&cfg, &topo, CollectiveGains::default(), 4).unwrap();
        (cfg, topo, model)
    }

    #[test]
    fn eight_agent_dimensions() {
        let (_, _, m) = eight();
        assert_eq!(m.c0.shape(), (18, 8));
        assert_eq!(m.c_sys.shape(), (216, 96));
        assert_eq!(m.a_sys.shape(), (96, 96));
        assert_eq!(m.b_sys.shape(), (96, 36));
    }

    #[test]
    fn block_structure() {
        let (cfg, _, m) = eight();
        let s = 24;
        let il = DMatrix::<f64>::identity(3, 3).kronecker(&cfg.l);
        assert_eq!(m.a_sys.view((3 * s, 0), (s, s)).into_owned(), &il * 35.0);
        assert_eq!(m.a_sys.view((3 * s, 3 * s), (s, s)).into_owned(), &il * 10.0);
        for lvl in 0..3 {
            assert_eq!(
                m.a_sys.view((lvl * s, (lvl + 1) * s), (s, s)).into_owned(),
                DMatrix::identity(s, s)
            );
        }
        // leader rows of L carry only the -1 diagonal
        for i in 0..3 {
            for j in 0..8 {
                assert_eq!(cfg.l[(i, j)], if i == j { -1.0 } else { 0.0 });
            }
        }
        // follower rows of C0 sum to zero
        for r in 3..18 {
            assert_eq!(m.c0.row(r).sum(), 0.0);
        }
    }

    #[test]
    fn eigenvalues_match_quartic_roots() {
        let (_, _, m) = four();
        // Every eigenvalue of L is -1, so each closed-loop eigenvalue solves
        // λ⁴ + K1λ³ + K2λ² + K3λ + K4 = 0.
        for z in m.axis_block().complex_eigenvalues().iter() {
            let p = z.powi(4) + z.powi(3) * 10.0 + z.powi(2) * 35.0 + z * 50.0 + 35.0;
            assert!(p.norm() < 1e-5, "residual {} at {z}", p.norm());
            assert!(z.re < 0.0);
        }
        assert!(m.max_real_eigenvalue() < 0.0);
    }

    #[test]
    fn unstable_gains_rejected() {
        let (cfg, topo, _) = four();
        assert!(build_collective(&cfg, &topo, CollectiveGains([1.0, 1.0, 50.0, 35.0]), 4).is_err());
    }

    #[test]
    fn equilibrium_and_zero() {
        let (cfg, _, m) = eight();
        let leaders = [0, 1, 2].map(|j| TrajectoryPoint::fixed(cfg.ref_positions[j] + Vector3::new(1.0, -2.0, 3.0)));
        let x = m.desired_stack(&leaders);
        let (s, _) = leader_stack(&leaders);
        assert!(m.derivative(&x, &s).unwrap().amax() < 1e-12);
        let z = DVector::zeros(96);
        assert_eq!(m.derivative(&z, &DVector::zeros(36)).unwrap(), z);
        assert!(m.derivative(&DVector::zeros(5), &s).is_err());
    }

    #[test]
    fn measurement_cases() {
        let (_, _, m) = eight();
        let common = TrajectoryPoint {
            position: Vector3::new(1.0, 2.0, 3.0),
            velocity: Vector3::new(0.1, 0.2, 0.3),
            acceleration: Vector3::new(-1.0, 0.0, 1.0),
            jerk: Vector3::new(4.0, 5.0, 6.0),
            snap: Vector3::zeros(),
        };
        let y = m.measure(&stack_state(&vec![common; 8]));
        let rows = m.c0.nrows();
        for lvl in 0..4 {
            for a in 0..3 {
                for r in 0..rows {
                    let v = y[(lvl * 3 + a) * rows + r];
                    if r < 3 {
                        assert_eq!(v, common.level(lvl)[a]);
                    } else {
                        assert_eq!(v, 0.0);
                    }
                }
            }
        }
    }

    fn random_vec(len: usize, seed: u64) -> DVector<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        DVector::from_fn(len, |_, _| rng.random_range(-3.0..3.0))
    }

    proptest! {
        #[test]
        fn derivative_matches_per_agent_law(seed in any::<u64>()) {
            let (cfg, _, m) = eight();
            let x = random_vec(96, seed);
            let s = random_vec(36, seed ^ 1);
            let d = m.derivative(&x, &s).unwrap();
            let k = m.gains;
            for a in 0..3 {
                for i in 0..8 {
                    for lvl in 0..3 {
                        prop_assert_eq!(d[m.index(lvl, a, i)], x[m.index(lvl + 1, a, i)]);
                    }
                    let mut want = 0.0;
                    for lvl in 0..4 {
                        let own = x[m.index(lvl, a, i)];
                        let target = if i < 3 {
                            s[lvl * 9 + a * 3 + i]
                        } else {
                            (0..3).map(|j| cfg.alpha[(i - 3, j)] * x[m.index(lvl, a, j)]).sum()
                        };
                        want += k.for_level(lvl) * (target - own);
                    }
                    prop_assert!((d[m.index(3, a, i)] - want).abs() < 1e-12 * (1.0 + want.abs()) * 100.0);
                }
            }
        }

        #[test]
        fn measurement_matches_edge_oracle(seed in any::<u64>(), shift in -5.0..5.0f64) {
            let (_, topo, m) = eight();
            let x = random_vec(96, seed);
            let y = m.measure(&x);
            let edges = topo.edges();
            let rows = edges.len();
            for lvl in 0..4 {
                for a in 0..3 {
                    for (r, &(j, i)) in edges.iter().enumerate() {
                        let want = if i == j {
                            x[m.index(lvl, a, j)]
                        } else {
                            x[m.index(lvl, a, j)] - x[m.index(lvl, a, i)]
                        };
                        prop_assert!((y[(lvl * 3 + a) * rows + r] - want).abs() < 1e-12);
                    }
                }
            }
            // translation invariance of relative rows
            let mut xs = x.clone();
            for a in 0..3 { for i in 0..8 { xs[m.index(0, a, i)] += shift; } }
            let ys = m.measure(&xs);
            for a in 0..3 {
                for r in 3..rows {
                    prop_assert!((ys[a * rows + r] - y[a * rows + r]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn on_trajectory_error_is_zero() {
        let (_, _, m) = eight();
        let leaders = [0, 1, 2].map(|j| TrajectoryPoint {
            position: Vector3::new(j as f64, 1.0, 2.0),
            velocity: Vector3::new(0.5, 0.0, 0.0),
            acceleration: Vector3::new(0.0, 0.1, 0.0),
            jerk: Vector3::new(0.0, 0.0, 0.2),
            snap: Vector3::zeros(),
        });
        let x = m.desired_stack(&leaders);
        assert!(m.error_state(&x, &leaders).unwrap().amax() < 1e-15);
    }

    fn rk4_error(m: &CollectiveModel, e: &DVector<f64>, dt: f64, snap: impl Fn(f64) -> [Vector3<f64>; 3], t: f64) -> DVector<f64> {
        let k1 = m.error_derivative(e, &snap(t));
        let k2 = m.error_derivative(&(e + &k1 * (dt / 2.0)), &snap(t + dt / 2.0));
        let k3 = m.error_derivative(&(e + &k2 * (dt / 2.0)), &snap(t + dt / 2.0));
        let k4 = m.error_derivative(&(e + &k3 * dt), &snap(t + dt));
        e + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
    }

    #[test]
    fn hover_error_decays() {
        let (_, _, m) = eight();
        let mut e = random_vec(96, 7);
        let e0 = e.norm();
        let mut t = 0.0;
        while t < 20.0 {
            e = rk4_error(&m, &e, 0.01, |_| [Vector3::zeros(); 3], t);
            t += 0.01;
        }
        assert!(e.norm() < 1e-3 * e0, "residual {}", e.norm());
    }

    #[test]
    fn error_response_matches_convolution() {
        // A snap σ(t) = sin t on leader 0's x axis drives that leader's error
        // through -1 / (s⁴ + K1 s³ + K2 s² + K3 s + K4); compare against the
        // convolution of the impulse response with σ.
        let (_, _, m) = four();
        let snap = |t: f64| [Vector3::new(t.sin(), 0.0, 0.0), Vector3::zeros(), Vector3::zeros()];
        let dt = 1e-3;
        let mut e = DVector::zeros(48);
        let mut t = 0.0;
        let steps = 5000;
        for _ in 0..steps {
            e = rk4_error(&m, &e, dt, snap, t);
            t += dt;
        }
        // Impulse response g of the scalar quartic, via its own state space.
        let companion = |z: &[f64; 4]| {
            [z[1], z[2], z[3], -35.0 * z[0] - 50.0 * z[1] - 35.0 * z[2] - 10.0 * z[3]]
        };
        let mut z = [0.0, 0.0, 0.0, 1.0];
        let mut g = vec![0.0; steps + 1];
        for (k, gk) in g.iter_mut().enumerate() {
            *gk = z[0];
            if k == steps { break; }
            let add = |a: &[f64; 4], b: &[f64; 4], s: f64| [a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2], a[3] + s * b[3]];
            let k1 = companion(&z);
            let k2 = companion(&add(&z, &k1, dt / 2.0));
            let k3 = companion(&add(&z, &k2, dt / 2.0));
            let k4 = companion(&add(&z, &k3, dt));
            for i in 0..4 { z[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]); }
        }
        // trapezoidal convolution ∫ g(t-τ) σ(τ) dτ
        let mut conv = 0.0;
        for k in 0..=steps {
            let w = if k == 0 || k == steps { 0.5 } else { 1.0 };
            conv += w * g[steps - k] * (k as f64 * dt).sin() * dt;
        }
        // leader 0 has H row e₀; leaders 1 and 2 see no forcing
        assert_relative_eq!(e[m.index(0, 0, 0)], -conv, epsilon = 1e-6);
        assert_relative_eq!(e[m.index(0, 0, 1)], 0.0, epsilon = 1e-12);
        assert_relative_eq!(e[m.index(0, 1, 0)], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn diagnostics_export() {
        let (_, _, m) = four();
        let mut buf = Vec::new();
        m.write_diagnostics(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("A_sys 48 48"));
        assert!(text.contains("C0 6 4"));
    }
}
