//! Built-in formation layouts.

use nalgebra::Vector3;

use crate::continuum::Topology;

/// Eight-agent team: three leaders on a triangle, five followers inside it.
/// Agent indices are zero-based.
pub fn eight_agent_formation() -> (Topology, Vec<Vector3<f64>>) {
    let refs = [
        (0.0, 0.0),
        (6.0, 0.0),
        (3.0, 5.0),
        (1.5, 1.0),
        (3.0, 1.0),
        (4.5, 1.0),
        (2.2, 2.5),
        (3.8, 2.5),
    ]
    .map(|(x, y)| Vector3::new(x, y, 0.0))
    .to_vec();
    let neighbors = vec![[0, 4, 6], [1, 3, 5], [1, 4, 7], [2, 3, 7], [2, 5, 6]];
    let topology = Topology::new(8, neighbors).expect("preset topology is valid");
    (topology, refs)
}
