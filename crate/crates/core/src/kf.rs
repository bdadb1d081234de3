//! Centralized Kalman filter over the discretized collective model.
//!
//! [`predict`] and [`update`] work on arbitrary dense models. [`FusionCenter`]
//! exploits the fact that the three spatial axes of the collective model are
//! identical and uncoupled: it runs one shared covariance recursion on a
//! `4N`-dimensional per-axis model and applies the resulting gain to all three
//! axes. With isotropic noise this is exactly the full `12N` filter.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::collective::{CollectiveModel, LEVELS};
use crate::continuum::LEADERS;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub process_std: f64,
    pub measurement_std: f64,
    /// Standard deviation of the initial estimate error.
    pub initial_std: f64,
    /// Number of derivative levels (from position upward) that are measured.
    pub measured_levels: usize,
    /// Use the matrix exponential instead of forward Euler.
    pub exact_discretization: bool,
    /// Use the Joseph form for the covariance update.
    pub joseph_form: bool,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            process_std: 0.1,
            measurement_std: 0.1,
            initial_std: 0.1,
            measured_levels: LEVELS,
            exact_discretization: false,
            joseph_form: false,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("process_std", self.process_std),
            ("measurement_std", self.measurement_std),
            ("initial_std", self.initial_std),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidInput(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if !(1..=LEVELS).contains(&self.measured_levels) {
            return Err(Error::InvalidInput(format!(
                "measured_levels must be in 1..=4, got {}",
                self.measured_levels
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub x_hat: DVector<f64>,
    pub p: DMatrix<f64>,
    pub k: usize,
}

/// Forward Euler (`I + A dt`, `B dt`) or zero-order-hold exact discretization.
pub fn discretize(a: &DMatrix<f64>, b: &DMatrix<f64>, dt: f64, exact: bool) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    if !exact {
        return (DMatrix::identity(n, n) + a * dt, b * dt);
    }
    let m = b.ncols();
    let mut aug = DMatrix::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(&(a * dt));
    aug.view_mut((0, n), (n, m)).copy_from(&(b * dt));
    let e = aug.exp();
    (e.view((0, 0), (n, n)).into_owned(), e.view((0, n), (n, m)).into_owned())
}

pub fn predict(
    fs: &FilterState,
    u: &DVector<f64>,
    a_d: &DMatrix<f64>,
    b_d: &DMatrix<f64>,
    q: &DMatrix<f64>,
) -> FilterState {
    FilterState {
        x_hat: a_d * &fs.x_hat + b_d * u,
        p: a_d * &fs.p * a_d.transpose() + q,
        k: fs.k + 1,
    }
}

/// Kalman gain `P Cᵀ S⁻¹`; zero when the prior covariance vanishes.
fn kalman_gain(p: &DMatrix<f64>, c: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if p.iter().all(|v| *v == 0.0) {
        return Ok(DMatrix::zeros(p.nrows(), c.nrows()));
    }
    let pct = p * c.transpose();
    let s = c * &pct + r;
    let chol = s.cholesky().ok_or(Error::FilterDegenerate)?;
    // K = P Cᵀ S⁻¹  ⇔  S Kᵀ = C P
    Ok(chol.solve(&pct.transpose()).transpose())
}

fn posterior_covariance(
    p: &DMatrix<f64>,
    k: &DMatrix<f64>,
    c: &DMatrix<f64>,
    r: &DMatrix<f64>,
    joseph: bool,
) -> DMatrix<f64> {
    let n = p.nrows();
    let ikc = DMatrix::identity(n, n) - k * c;
    let post = if joseph {
        &ikc * p * ikc.transpose() + k * r * k.transpose()
    } else {
        ikc * p
    };
    (&post + post.transpose()) * 0.5
}

pub fn update(
    fs: &FilterState,
    y: &DVector<f64>,
    c: &DMatrix<f64>,
    r: &DMatrix<f64>,
    joseph: bool,
) -> Result<FilterState> {
    let k = kalman_gain(&fs.p, c, r)?;
    let innovation = y - c * &fs.x_hat;
    Ok(FilterState {
        x_hat: &fs.x_hat + &k * innovation,
        p: posterior_covariance(&fs.p, &k, c, r, joseph),
        k: fs.k,
    })
}

/// `y = C x + ν` with `ν ~ N(0, R)`.
pub fn simulate_noisy_measurement<R: Rng + ?Sized>(
    x: &DVector<f64>,
    c: &DMatrix<f64>,
    r: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let m = c.nrows();
    let clean = c * x;
    let diagonal = (0..m).all(|i| (0..m).all(|j| i == j || r[(i, j)] == 0.0));
    let noise = if diagonal {
        DVector::from_fn(m, |i, _| {
            let z: f64 = rng.sample(StandardNormal);
            r[(i, i)].sqrt() * z
        })
    } else {
        let l = r.clone().cholesky().ok_or(Error::FilterDegenerate)?.unpack();
        let z = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
        l * z
    };
    Ok(clean + noise)
}

/// Axis-decoupled fusion center for the collective model.
#[derive(Debug, Clone)]
pub struct FusionCenter {
    n_agents: usize,
    rows: usize,
    levels: usize,
    a_d: DMatrix<f64>,
    b_d: DMatrix<f64>,
    c: DMatrix<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    joseph: bool,
    /// Per-axis estimates, each `4N` long.
    x_hat: [DVector<f64>; 3],
    p: DMatrix<f64>,
    k: usize,
}

impl FusionCenter {
    /// Builds the filter with an initial estimate (full stacked layout) and
    /// initial covariance `initial_std² I`.
    pub fn new(model: &CollectiveModel, noise: &NoiseConfig, dt: f64, x0_hat: &DVector<f64>) -> Result<Self> {
        noise.validate()?;
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::InvalidInput(format!("time step must be positive, got {dt}")));
        }
        let n = model.n_agents;
        if x0_hat.len() != model.state_dim() {
            return Err(Error::InvalidInput(format!(
                "initial estimate has length {}, expected {}",
                x0_hat.len(),
                model.state_dim()
            )));
        }
        let dim = LEVELS * n;
        let a = model.axis_block();
        let mut b = DMatrix::zeros(dim, LEVELS * LEADERS);
        for lvl in 0..LEVELS {
            let k = model.gains.for_level(lvl);
            for j in 0..LEADERS {
                b[(3 * n + j, lvl * LEADERS + j)] = k;
            }
        }
        let (a_d, b_d) = discretize(&a, &b, dt, noise.exact_discretization);
        let c0 = &model.c0;
        let rows = c0.nrows();
        let levels = model.measured_levels;
        let mut c = DMatrix::zeros(levels * rows, dim);
        for lvl in 0..levels {
            c.view_mut((lvl * rows, lvl * n), (rows, n)).copy_from(c0);
        }
        let mut fc = Self {
            n_agents: n,
            rows,
            levels,
            a_d,
            b_d,
            c,
            q: DMatrix::identity(dim, dim) * noise.process_std.powi(2),
            r: DMatrix::identity(levels * rows, levels * rows) * noise.measurement_std.powi(2),
            joseph: noise.joseph_form,
            x_hat: [DVector::zeros(dim), DVector::zeros(dim), DVector::zeros(dim)],
            p: DMatrix::identity(dim, dim) * noise.initial_std.powi(2),
            k: 0,
        };
        for a in 0..3 {
            fc.x_hat[a] = fc.axis_state(x0_hat, a);
        }
        Ok(fc)
    }

    fn axis_state(&self, x: &DVector<f64>, axis: usize) -> DVector<f64> {
        let n = self.n_agents;
        DVector::from_fn(LEVELS * n, |idx, _| {
            let (lvl, i) = (idx / n, idx % n);
            x[lvl * 3 * n + axis * n + i]
        })
    }

    fn axis_input(u: &DVector<f64>, axis: usize) -> DVector<f64> {
        DVector::from_fn(LEVELS * LEADERS, |idx, _| {
            let (lvl, j) = (idx / LEADERS, idx % LEADERS);
            u[lvl * 9 + axis * LEADERS + j]
        })
    }

    fn axis_measurement(&self, y: &DVector<f64>, axis: usize) -> DVector<f64> {
        let m = self.rows;
        DVector::from_fn(self.levels * m, |idx, _| {
            let (lvl, row) = (idx / m, idx % m);
            y[(lvl * 3 + axis) * m + row]
        })
    }

    pub fn step_index(&self) -> usize {
        self.k
    }

    /// Time update with the leader input stack `u` (36 entries).
    pub fn predict(&mut self, u: &DVector<f64>) {
        for a in 0..3 {
            let ua = Self::axis_input(u, a);
            self.x_hat[a] = &self.a_d * &self.x_hat[a] + &self.b_d * ua;
        }
        self.p = &self.a_d * &self.p * self.a_d.transpose() + &self.q;
        self.k += 1;
    }

    /// Measurement update with a full stacked measurement vector.
    pub fn update(&mut self, y: &DVector<f64>) -> Result<()> {
        if y.len() != 3 * self.levels * self.rows {
            return Err(Error::InvalidInput(format!(
                "measurement has length {}, expected {}",
                y.len(),
                3 * self.levels * self.rows
            )));
        }
        let gain = kalman_gain(&self.p, &self.c, &self.r)?;
        for a in 0..3 {
            let ya = self.axis_measurement(y, a);
            let innovation = ya - &self.c * &self.x_hat[a];
            self.x_hat[a] += &gain * innovation;
        }
        self.p = posterior_covariance(&self.p, &gain, &self.c, &self.r, self.joseph);
        Ok(())
    }

    /// Estimate in the full stacked layout.
    pub fn estimate(&self) -> DVector<f64> {
        let n = self.n_agents;
        DVector::from_fn(LEVELS * 3 * n, |idx, _| {
            let lvl = idx / (3 * n);
            let a = (idx / n) % 3;
            let i = idx % n;
            self.x_hat[a][lvl * n + i]
        })
    }

    /// Shared per-axis covariance (`4N × 4N`).
    pub fn axis_covariance(&self) -> &DMatrix<f64> {
        &self.p
    }

    /// Covariance in the full stacked layout.
    pub fn covariance(&self) -> DMatrix<f64> {
        let n = self.n_agents;
        let dim = LEVELS * 3 * n;
        DMatrix::from_fn(dim, dim, |r, c| {
            let (lr, ar, ir) = (r / (3 * n), (r / n) % 3, r % n);
            let (lc, ac, ic) = (c / (3 * n), (c / n) % 3, c % n);
            if ar == ac {
                self.p[(lr * n + ir, lc * n + ic)]
            } else {
                0.0
            }
        })
    }

    /// Diagonal of the full covariance, in the stacked layout.
    pub fn covariance_diagonal(&self) -> DVector<f64> {
        let n = self.n_agents;
        DVector::from_fn(LEVELS * 3 * n, |idx, _| {
            let lvl = idx / (3 * n);
            let i = idx % n;
            self.p[(lvl * n + i, lvl * n + i)]
        })
    }
}
