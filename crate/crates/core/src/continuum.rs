//! Leader-follower continuum deformation geometry.
//!
//! Agents `0, 1, 2` are the leaders at the vertices of a planar triangle; every
//! other agent is a follower whose desired position is a fixed barycentric
//! combination of the leaders. The follower weights populate the weight
//! matrix `W`, from which `L = W - I`, the selector `L₀ = [I₃; 0]` and
//! `H = -L⁻¹L₀` follow. `H` maps the three leader positions onto desired
//! positions for the whole team.

use nalgebra::{DMatrix, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LEADERS: usize = 3;

/// Measurement graph: leaders have self-loops, every follower measures
/// exactly three in-neighbors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    n_agents: usize,
    /// `in_neighbors[f]` belongs to agent `f + 3`. Zero-based agent indices.
    in_neighbors: Vec<[usize; 3]>,
}

impl Topology {
    pub fn new(n_agents: usize, in_neighbors: Vec<[usize; 3]>) -> Result<Self> {
        if n_agents < LEADERS {
            return Err(Error::DegenerateTopology(format!(
                "need at least {LEADERS} agents, got {n_agents}"
            )));
        }
        if in_neighbors.len() != n_agents - LEADERS {
            return Err(Error::DegenerateTopology(format!(
                "expected in-neighbor sets for {} followers, got {}",
                n_agents - LEADERS,
                in_neighbors.len()
            )));
        }
        for (f, set) in in_neighbors.iter().enumerate() {
            let agent = f + LEADERS;
            for (k, &j) in set.iter().enumerate() {
                if j >= n_agents {
                    return Err(Error::DegenerateTopology(format!(
                        "agent {agent} lists unknown in-neighbor {j}"
                    )));
                }
                if j == agent {
                    return Err(Error::DegenerateTopology(format!(
                        "follower {agent} lists itself as in-neighbor"
                    )));
                }
                if set[..k].contains(&j) {
                    return Err(Error::DegenerateTopology(format!(
                        "follower {agent} lists in-neighbor {j} twice"
                    )));
                }
            }
        }
        Ok(Self {
            n_agents,
            in_neighbors,
        })
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn n_followers(&self) -> usize {
        self.n_agents - LEADERS
    }

    pub fn leaders(&self) -> std::ops::Range<usize> {
        0..LEADERS
    }

    pub fn followers(&self) -> std::ops::Range<usize> {
        LEADERS..self.n_agents
    }

    pub fn is_leader(&self, agent: usize) -> bool {
        agent < LEADERS
    }

    /// In-neighbors of a follower (by agent index).
    pub fn in_neighbors(&self, follower: usize) -> &[usize; 3] {
        &self.in_neighbors[follower - LEADERS]
    }

    /// Directed edges `(j, i)`: agent `i` measures agent `j`. Leader self-loops
    /// come first, then follower in-edges in listing order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut edges: Vec<_> = self.leaders().map(|i| (i, i)).collect();
        for i in self.followers() {
            edges.extend(self.in_neighbors(i).iter().map(|&j| (j, i)));
        }
        edges
    }
}

/// Barycentric weights of `follower` with respect to the three leader
/// reference points.
pub fn barycentric_weights(leaders: &[Vector2<f64>; 3], follower: &Vector2<f64>) -> Result<[f64; 3]> {
    let m = Matrix3::new(
        leaders[0].x, leaders[1].x, leaders[2].x, //
        leaders[0].y, leaders[1].y, leaders[2].y, //
        1.0, 1.0, 1.0,
    );
    let scale = (leaders[1] - leaders[0]).norm().max((leaders[2] - leaders[0]).norm());
    if scale == 0.0 || m.determinant().abs() <= 1e-12 * scale * scale {
        return Err(Error::SingularReference);
    }
    let alpha = m
        .lu()
        .solve(&Vector3::new(follower.x, follower.y, 1.0))
        .ok_or(Error::SingularReference)?;
    Ok([alpha.x, alpha.y, alpha.z])
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContinuumConfig {
    pub ref_positions: Vec<Vector3<f64>>,
    /// `(N-3) × 3`, row `f` holds the weights of agent `f + 3`.
    pub alpha: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub w0: DMatrix<f64>,
    pub l: DMatrix<f64>,
    pub l0: DMatrix<f64>,
    pub h: DMatrix<f64>,
}

impl ContinuumConfig {
    pub fn n_agents(&self) -> usize {
        self.ref_positions.len()
    }

    pub fn alpha_row(&self, agent: usize) -> [f64; 3] {
        let r = self.h.row(agent);
        [r[0], r[1], r[2]]
    }

    /// Centroid of the leader reference positions.
    pub fn leader_centroid(&self) -> Vector3<f64> {
        (self.ref_positions[0] + self.ref_positions[1] + self.ref_positions[2]) / 3.0
    }

    /// Largest distance from the leader centroid to any agent.
    pub fn formation_radius(&self) -> f64 {
        let c = self.leader_centroid();
        self.ref_positions
            .iter()
            .map(|r| (r - c).norm())
            .fold(0.0, f64::max)
    }

    pub fn all_weights_nonnegative(&self) -> bool {
        self.alpha.iter().all(|a| *a >= 0.0)
    }
}

/// Derives `α`, `W`, `W₀`, `L`, `L₀` and `H` from reference positions.
pub fn build_matrices(topology: &Topology, ref_positions: &[Vector3<f64>]) -> Result<ContinuumConfig> {
    let n = topology.n_agents();
    if ref_positions.len() != n {
        return Err(Error::InvalidInput(format!(
            "expected {n} reference positions, got {}",
            ref_positions.len()
        )));
    }
    if let Some((i, r)) = ref_positions.iter().enumerate().find(|(_, r)| r.z != 0.0) {
        return Err(Error::InvalidInput(format!(
            "reference position of agent {i} must lie in the z = 0 plane, got z = {}",
            r.z
        )));
    }
    let leaders = [
        ref_positions[0].xy(),
        ref_positions[1].xy(),
        ref_positions[2].xy(),
    ];

    let nf = n - LEADERS;
    let mut alpha = DMatrix::zeros(nf, LEADERS);
    for f in 0..nf {
        let a = barycentric_weights(&leaders, &ref_positions[f + LEADERS].xy())?;
        if a.iter().any(|x| *x < 0.0) {
            log::warn!(
                "agent {} lies outside the leader triangle (weights {a:?}); containment no longer holds",
                f + LEADERS
            );
        }
        for j in 0..LEADERS {
            alpha[(f, j)] = a[j];
        }
    }

    let mut w = DMatrix::zeros(n, n);
    w.view_mut((LEADERS, 0), (nf, LEADERS)).copy_from(&alpha);
    let w0 = alpha.clone();
    let l = &w - DMatrix::identity(n, n);
    let mut l0 = DMatrix::zeros(n, LEADERS);
    l0.view_mut((0, 0), (LEADERS, LEADERS)).fill_with_identity();
    let h = l
        .clone()
        .lu()
        .solve(&(-&l0))
        .ok_or_else(|| Error::DegenerateTopology("L is singular".into()))?;

    Ok(ContinuumConfig {
        ref_positions: ref_positions.to_vec(),
        alpha,
        w,
        w0,
        l,
        l0,
        h,
    })
}

/// Affine map `r ↦ Q (r - d₀) + d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomogeneousTransform {
    pub q: Matrix3<f64>,
    pub d: Vector3<f64>,
    pub d0: Vector3<f64>,
}

impl HomogeneousTransform {
    pub fn translation(d0: Vector3<f64>, d: Vector3<f64>) -> Self {
        Self {
            q: Matrix3::identity(),
            d,
            d0,
        }
    }
}

pub fn homogeneous_desired(transform: &HomogeneousTransform, r0: &Vector3<f64>) -> Vector3<f64> {
    transform.q * (r0 - transform.d0) + transform.d
}

/// `Σⱼ αⱼ rⱼ` over the three leaders.
pub fn follower_desired(alpha: &[f64; 3], leaders: &[Vector3<f64>; 3]) -> Vector3<f64> {
    leaders[0] * alpha[0] + leaders[1] * alpha[1] + leaders[2] * alpha[2]
}

/// Barycentric coordinates of `p` in the (3-D) triangle `tri`, together with
/// the distance of `p` from the triangle's plane.
pub fn triangle_coordinates(tri: &[Vector3<f64>; 3], p: &Vector3<f64>) -> ([f64; 3], f64) {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let v = p - tri[0];
    let (d11, d12, d22) = (e1.dot(&e1), e1.dot(&e2), e2.dot(&e2));
    let (dv1, dv2) = (v.dot(&e1), v.dot(&e2));
    let det = d11 * d22 - d12 * d12;
    let b1 = (d22 * dv1 - d12 * dv2) / det;
    let b2 = (d11 * dv2 - d12 * dv1) / det;
    let off_plane = (v - e1 * b1 - e2 * b2).norm();
    ([1.0 - b1 - b2, b1, b2], off_plane)
}

/// Whether `p` lies inside the triangle, up to `tol` in barycentric
/// coordinates and in metres off the plane.
pub fn in_triangle(tri: &[Vector3<f64>; 3], p: &Vector3<f64>, tol: f64) -> bool {
    let (b, off) = triangle_coordinates(tri, p);
    b.iter().all(|x| *x >= -tol) && off <= tol
}
