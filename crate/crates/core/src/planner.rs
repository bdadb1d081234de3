//! Grid path planning, quintic segment timing and travel-time search.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::continuum::ContinuumConfig;
use crate::error::{Error, Result};
use crate::reference::TrajectoryPoint;

pub type Cell = (usize, usize);

/// Occupancy grid. Cell `(x, y)` has its centre at `origin + cell_size·(x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub width: usize,
    pub height: usize,
    pub cell_size: f64,
    pub origin: Vector2<f64>,
    occupied: Vec<bool>,
}

impl OccupancyGrid {
    pub fn empty(width: usize, height: usize, cell_size: f64, origin: Vector2<f64>) -> Self {
        Self {
            width,
            height,
            cell_size,
            origin,
            occupied: vec![false; width * height],
        }
    }

    /// Parses a text map: `#` occupied, `.` free, one row per line. The first
    /// line is the row with the largest `y`.
    pub fn parse(text: &str, cell_size: f64, origin: Vector2<f64>) -> Result<Self> {
        let rows: Vec<&str> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .collect();
        let rows: Vec<String> = rows.iter().map(|r| r.to_string()).collect();
        Self::from_rows(&rows, cell_size, origin)
    }

    pub fn from_rows(rows: &[String], cell_size: f64, origin: Vector2<f64>) -> Result<Self> {
        if !(cell_size.is_finite() && cell_size > 0.0) {
            return Err(Error::InvalidInput(format!("cell size must be positive, got {cell_size}")));
        }
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.chars().count());
        if width == 0 {
            return Err(Error::InvalidInput("map is empty".into()));
        }
        let mut grid = Self::empty(width, height, cell_size, origin);
        for (line, row) in rows.iter().enumerate() {
            if row.chars().count() != width {
                return Err(Error::InvalidInput(format!(
                    "map row {} has {} cells, expected {width}",
                    line + 1,
                    row.chars().count()
                )));
            }
            let y = height - 1 - line;
            for (x, ch) in row.chars().enumerate() {
                match ch {
                    '#' => grid.set_occupied((x, y), true),
                    '.' => {}
                    other => {
                        return Err(Error::InvalidInput(format!(
                            "map row {} contains '{other}'; only '#' and '.' are allowed",
                            line + 1
                        )))
                    }
                }
            }
        }
        Ok(grid)
    }

    pub fn is_occupied(&self, (x, y): Cell) -> bool {
        self.occupied[y * self.width + x]
    }

    pub fn set_occupied(&mut self, (x, y): Cell, value: bool) {
        self.occupied[y * self.width + x] = value;
    }

    pub fn occupied_count(&self) -> usize {
        self.occupied.iter().filter(|o| **o).count()
    }

    pub fn cell_center(&self, (x, y): Cell) -> Vector2<f64> {
        self.origin + Vector2::new(x as f64, y as f64) * self.cell_size
    }

    /// Cell whose centre is nearest to `p`, if inside the grid.
    pub fn cell_at(&self, p: &Vector2<f64>) -> Option<Cell> {
        let rel = (p - self.origin) / self.cell_size;
        let (x, y) = (rel.x.round(), rel.y.round());
        if x < 0.0 || y < 0.0 || x >= self.width as f64 || y >= self.height as f64 {
            return None;
        }
        Some((x as usize, y as usize))
    }

    /// Marks every cell whose centre lies within `radius` of an occupied
    /// cell's square footprint.
    pub fn inflated(&self, radius: f64) -> Self {
        if radius <= 0.0 {
            return self.clone();
        }
        let mut out = self.clone();
        let half = 0.5 * self.cell_size;
        let reach = (radius / self.cell_size).ceil() as isize + 1;
        for oy in 0..self.height {
            for ox in 0..self.width {
                if !self.is_occupied((ox, oy)) {
                    continue;
                }
                let c = self.cell_center((ox, oy));
                for dy in -reach..=reach {
                    for dx in -reach..=reach {
                        let (x, y) = (ox as isize + dx, oy as isize + dy);
                        if x < 0 || y < 0 || x >= self.width as isize || y >= self.height as isize {
                            continue;
                        }
                        let p = self.cell_center((x as usize, y as usize));
                        let gap = Vector2::new(
                            ((p.x - c.x).abs() - half).max(0.0),
                            ((p.y - c.y).abs() - half).max(0.0),
                        );
                        if gap.norm() <= radius {
                            out.set_occupied((x as usize, y as usize), true);
                        }
                    }
                }
            }
        }
        out
    }

    /// 8-connected moves that do not cut past an occupied corner.
    pub fn neighbors(&self, (x, y): Cell) -> impl Iterator<Item = (Cell, bool)> + '_ {
        const MOVES: [(isize, isize); 8] = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)];
        MOVES.iter().filter_map(move |&(dx, dy)| {
            let (nx, ny) = (x as isize + dx, y as isize + dy);
            if nx < 0 || ny < 0 || nx >= self.width as isize || ny >= self.height as isize {
                return None;
            }
            let n = (nx as usize, ny as usize);
            if self.is_occupied(n) {
                return None;
            }
            let diagonal = dx != 0 && dy != 0;
            if diagonal && (self.is_occupied((nx as usize, y)) || self.is_occupied((x, ny as usize))) {
                return None;
            }
            Some((n, diagonal))
        })
    }
}

/// Path length as counts of straight and diagonal moves, so that equal
/// paths compare exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StepCount {
    pub straight: u32,
    pub diagonal: u32,
}

impl StepCount {
    pub fn cost(&self) -> f64 {
        self.straight as f64 + self.diagonal as f64 * std::f64::consts::SQRT_2
    }

    pub fn after(self, diagonal: bool) -> Self {
        if diagonal {
            Self {
                diagonal: self.diagonal + 1,
                ..self
            }
        } else {
            Self {
                straight: self.straight + 1,
                ..self
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridPath {
    pub cells: Vec<Cell>,
    pub steps: StepCount,
}

impl GridPath {
    /// Length in cell units.
    pub fn cost(&self) -> f64 {
        self.steps.cost()
    }

    /// Start, goal and every cell where the direction changes.
    pub fn corners(&self) -> Vec<Cell> {
        let c = &self.cells;
        if c.len() <= 2 {
            return c.clone();
        }
        let dir = |a: Cell, b: Cell| (b.0 as isize - a.0 as isize, b.1 as isize - a.1 as isize);
        let mut out = vec![c[0]];
        for i in 1..c.len() - 1 {
            if dir(c[i - 1], c[i]) != dir(c[i], c[i + 1]) {
                out.push(c[i]);
            }
        }
        out.push(c[c.len() - 1]);
        out
    }
}

#[derive(PartialEq)]
struct Open {
    f: f64,
    h: f64,
    cell: Cell,
}

impl Eq for Open {}

impl Ord for Open {
    // Reversed so that BinaryHeap pops the smallest f, then smallest h, then
    // the lexicographically smallest cell.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .f
            .total_cmp(&self.f)
            .then(other.h.total_cmp(&self.h))
            .then(other.cell.cmp(&self.cell))
    }
}

impl PartialOrd for Open {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn euclidean_heuristic(a: Cell, b: Cell) -> f64 {
    let dx = a.0 as f64 - b.0 as f64;
    let dy = a.1 as f64 - b.1 as f64;
    dx.hypot(dy)
}

/// A* over the 8-connected grid with Euclidean move costs and heuristic.
pub fn astar(grid: &OccupancyGrid, start: Cell, goal: Cell) -> Result<GridPath> {
    for (name, c) in [("start", start), ("goal", goal)] {
        if c.0 >= grid.width || c.1 >= grid.height {
            return Err(Error::InvalidInput(format!("{name} cell {c:?} outside the grid")));
        }
        if grid.is_occupied(c) {
            return Err(Error::InvalidInput(format!("{name} cell {c:?} is occupied")));
        }
    }
    let idx = |c: Cell| c.1 * grid.width + c.0;
    let mut best: Vec<Option<StepCount>> = vec![None; grid.width * grid.height];
    let mut parent: Vec<Option<Cell>> = vec![None; grid.width * grid.height];
    let mut closed = vec![false; grid.width * grid.height];
    let mut open = BinaryHeap::new();
    best[idx(start)] = Some(StepCount::default());
    let h0 = euclidean_heuristic(start, goal);
    open.push(Open { f: h0, h: h0, cell: start });

    while let Some(Open { cell, .. }) = open.pop() {
        if closed[idx(cell)] {
            continue;
        }
        closed[idx(cell)] = true;
        if cell == goal {
            let mut cells = vec![goal];
            let mut cur = goal;
            while let Some(p) = parent[idx(cur)] {
                cells.push(p);
                cur = p;
            }
            cells.reverse();
            return Ok(GridPath {
                cells,
                steps: best[idx(goal)].unwrap_or_default(),
            });
        }
        let g = best[idx(cell)].unwrap_or_default();
        for (n, diagonal) in grid.neighbors(cell) {
            let candidate = g.after(diagonal);
            let improves = best[idx(n)].is_none_or(|b| candidate.cost() < b.cost());
            if improves {
                best[idx(n)] = Some(candidate);
                parent[idx(n)] = Some(cell);
                closed[idx(n)] = false;
                let h = euclidean_heuristic(n, goal);
                open.push(Open {
                    f: candidate.cost() + h,
                    h,
                    cell: n,
                });
            }
        }
    }
    Err(Error::NoPath)
}

/// Plans a collinear-reduced waypoint list between two world points.
pub fn plan_waypoints(
    grid: &OccupancyGrid,
    start: &Vector2<f64>,
    goal: &Vector2<f64>,
    clearance: f64,
) -> Result<Vec<Vector2<f64>>> {
    let planning = grid.inflated(clearance);
    let locate = |name: &str, p: &Vector2<f64>| {
        planning
            .cell_at(p)
            .ok_or_else(|| Error::InvalidInput(format!("{name} {p:?} lies outside the map")))
    };
    let (s, g) = (locate("start", start)?, locate("goal", goal)?);
    let path = astar(&planning, s, g)?;
    Ok(path.corners().into_iter().map(|c| grid.cell_center(c)).collect())
}

/// Quintic blend `6τ⁵ − 15τ⁴ + 10τ³` (τ = t/T) and its first four time
/// derivatives; clamped outside `[0, T]`.
pub fn beta(t: f64, duration: f64) -> [f64; 5] {
    if t <= 0.0 {
        return [0.0; 5];
    }
    if t >= duration {
        return [1.0, 0.0, 0.0, 0.0, 0.0];
    }
    let s = t / duration;
    let (s2, s3) = (s * s, s * s * s);
    let (t1, t2, t3, t4) = (duration, duration.powi(2), duration.powi(3), duration.powi(4));
    [
        s3 * (10.0 - 15.0 * s + 6.0 * s2),
        30.0 * s2 * (1.0 - 2.0 * s + s2) / t1,
        60.0 * s * (1.0 - 3.0 * s + 2.0 * s2) / t2,
        60.0 * (1.0 - 6.0 * s + 6.0 * s2) / t3,
        (720.0 * s - 360.0) / t4,
    ]
}

/// Splits `total` across segments in proportion to their lengths.
pub fn allocate_times(waypoints: &[Vector3<f64>], total: f64) -> Result<Vec<f64>> {
    if waypoints.len() < 2 {
        return Err(Error::InvalidInput("need at least two waypoints".into()));
    }
    if !(total.is_finite() && total > 0.0) {
        return Err(Error::InvalidInput(format!("travel time must be positive, got {total}")));
    }
    let lengths: Vec<f64> = waypoints.windows(2).map(|w| (w[1] - w[0]).norm()).collect();
    if let Some(index) = lengths.iter().position(|l| *l == 0.0) {
        return Err(Error::DegenerateSegment { index });
    }
    let sum: f64 = lengths.iter().sum();
    Ok(lengths.iter().map(|l| total * l / sum).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    pub waypoints: Vec<Vector3<f64>>,
    pub segment_times: Vec<f64>,
    pub total_time: f64,
}

impl PlanResult {
    pub fn new(waypoints: Vec<Vector3<f64>>, total_time: f64) -> Result<Self> {
        let segment_times = allocate_times(&waypoints, total_time)?;
        Ok(Self {
            waypoints,
            segment_times,
            total_time,
        })
    }

    pub fn with_total_time(&self, total_time: f64) -> Result<Self> {
        Self::new(self.waypoints.clone(), total_time)
    }

    pub fn path_length(&self) -> f64 {
        self.waypoints.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
    }

    /// Start time of every segment.
    pub fn segment_starts(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.segment_times
            .iter()
            .map(|d| {
                let s = acc;
                acc += d;
                s
            })
            .collect()
    }

    /// Formation reference point and its derivatives at time `t`.
    pub fn formation_point(&self, t: f64) -> TrajectoryPoint {
        let last = self.waypoints.len() - 1;
        if t >= self.total_time {
            return TrajectoryPoint::fixed(self.waypoints[last]);
        }
        if t <= 0.0 {
            return TrajectoryPoint::fixed(self.waypoints[0]);
        }
        let starts = self.segment_starts();
        let j = starts.iter().rposition(|s| *s <= t).unwrap_or(0);
        let (a, b) = (self.waypoints[j], self.waypoints[j + 1]);
        let d = b - a;
        let [p, v, acc, jerk, snap] = beta(t - starts[j], self.segment_times[j]);
        TrajectoryPoint {
            position: a + d * p,
            velocity: d * v,
            acceleration: d * acc,
            jerk: d * jerk,
            snap: d * snap,
        }
    }
}

/// Desired leader trajectories: the reference formation rigidly translated
/// so that its leader centroid follows the plan.
pub fn leader_trajectories(plan: &PlanResult, continuum: &ContinuumConfig, t: f64) -> [TrajectoryPoint; 3] {
    let c = plan.formation_point(t);
    let centroid = continuum.leader_centroid();
    [0, 1, 2].map(|i| c.translated(&(continuum.ref_positions[i] - centroid)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BisectionStep {
    pub travel_time: f64,
    pub safe: bool,
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BisectionResult {
    pub travel_time: f64,
    pub transcript: Vec<BisectionStep>,
}

/// Outcome of a single safety evaluation at a candidate travel time.
#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub safe: bool,
    pub reason: Option<String>,
}

/// Smallest safe travel time in `(lo, hi]` to within `tol`, assuming safety
/// is monotone in the travel time. `hi` must be safe.
pub fn bisect_travel_time<F>(mut evaluate: F, lo: f64, hi: f64, tol: f64) -> Result<BisectionResult>
where
    F: FnMut(f64) -> Result<Verdict>,
{
    if !(tol.is_finite() && tol > 0.0) {
        return Err(Error::InvalidInput(format!("tolerance must be positive, got {tol}")));
    }
    if !(lo.is_finite() && hi.is_finite() && 0.0 < lo && lo < hi) {
        return Err(Error::InvalidInput(format!("need 0 < lo < hi, got lo {lo}, hi {hi}")));
    }
    let mut transcript = Vec::new();
    let top = evaluate(hi)?;
    transcript.push(BisectionStep {
        travel_time: hi,
        safe: top.safe,
        reason: top.reason.clone(),
    });
    if !top.safe {
        return Err(Error::InitialTimeUnsafe {
            t_hi: hi,
            reason: top.reason.unwrap_or_else(|| "unsafe".into()),
        });
    }
    let (mut lo, mut hi) = (lo, hi);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        let v = evaluate(mid)?;
        log::info!("travel time {mid:.3} s: {}", if v.safe { "safe" } else { "unsafe" });
        transcript.push(BisectionStep {
            travel_time: mid,
            safe: v.safe,
            reason: v.reason,
        });
        if v.safe {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(BisectionResult {
        travel_time: hi,
        transcript,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::continuum::build_matrices;
    use crate::presets::eight_agent_formation;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn grid_from(rows: &[&str]) -> OccupancyGrid {
        let rows: Vec<String> = rows.iter().map(|r| r.to_string()).collect();
        OccupancyGrid::from_rows(&rows, 1.0, Vector2::zeros()).unwrap()
    }

    /// Dijkstra with a sorted set as the queue, sharing only the move rules.
    fn dijkstra(grid: &OccupancyGrid, start: Cell, goal: Cell) -> Option<StepCount> {
        let mut dist = std::collections::HashMap::new();
        let mut queue = BTreeSet::new();
        let key = |s: StepCount| (s.cost().to_bits(), s.straight, s.diagonal);
        dist.insert(start, StepCount::default());
        queue.insert((key(StepCount::default()), start));
        while let Some((_, cell)) = queue.pop_first() {
            let d = dist[&cell];
            if cell == goal {
                return Some(d);
            }
            for (n, diagonal) in grid.neighbors(cell) {
                let nd = d.after(diagonal);
                if dist.get(&n).is_none_or(|old| nd.cost() < old.cost()) {
                    if let Some(old) = dist.get(&n) {
                        queue.remove(&(key(*old), n));
                    }
                    dist.insert(n, nd);
                    queue.insert((key(nd), n));
                }
            }
        }
        None
    }

    #[test]
    fn empty_grid_straight_line() {
        let g = OccupancyGrid::empty(8, 3, 1.0, Vector2::zeros());
        let p = astar(&g, (0, 0), (5, 0)).unwrap();
        assert_eq!(p.corners(), vec![(0, 0), (5, 0)]);
        assert_eq!(p.steps, StepCount { straight: 5, diagonal: 0 });
    }

    #[test]
    fn wall_with_gap() {
        let g = grid_from(&[
            "...#...",
            "...#...",
            ".......",
            "...#...",
            "...#...",
        ]);
        let p = astar(&g, (0, 0), (6, 0)).unwrap();
        assert!(p.cells.contains(&(3, 2)));
        assert_eq!(Some(p.steps), dijkstra(&g, (0, 0), (6, 0)));
    }

    #[test]
    fn closed_room_has_no_path() {
        let g = grid_from(&[
            ".......",
            "..###..",
            "..#.#..",
            "..###..",
            ".......",
        ]);
        assert!(matches!(astar(&g, (0, 0), (3, 2)), Err(Error::NoPath)));
    }

    #[test]
    fn occupied_endpoints_rejected() {
        let g = grid_from(&["#.."]);
        assert!(astar(&g, (0, 0), (2, 0)).is_err());
    }

    #[test]
    fn no_corner_cutting() {
        let g = grid_from(&["#.", ".#"]);
        // (0,0) and (1,1) touch only diagonally between two blocked cells
        assert!(matches!(astar(&g, (0, 0), (1, 1)), Err(Error::NoPath)));
    }

    #[test]
    fn map_parsing() {
        let g = OccupancyGrid::parse("#..\n...\n", 0.5, Vector2::new(1.0, 2.0)).unwrap();
        assert_eq!((g.width, g.height), (3, 2));
        assert!(g.is_occupied((0, 1)));
        assert!(!g.is_occupied((0, 0)));
        assert_eq!(g.cell_center((2, 1)), Vector2::new(2.0, 2.5));
        assert_eq!(g.cell_at(&Vector2::new(2.1, 2.4)), Some((2, 1)));
        assert!(OccupancyGrid::parse("#x.", 1.0, Vector2::zeros()).is_err());
        assert!(OccupancyGrid::parse("#..\n..", 1.0, Vector2::zeros()).is_err());
    }

    #[test]
    fn inflation_radius() {
        let mut g = OccupancyGrid::empty(9, 9, 1.0, Vector2::zeros());
        g.set_occupied((4, 4), true);
        let inf = g.inflated(1.0);
        assert!(inf.is_occupied((5, 4)));
        assert!(!inf.is_occupied((4, 6)));
        // corner gap is (√2/2 ≈ 0.707) for the diagonal neighbour
        assert!(inf.is_occupied((5, 5)));
        assert!(!inf.is_occupied((6, 6)));
        assert_eq!(g.inflated(0.0), g);
    }

    #[test]
    fn random_grids_match_dijkstra() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let mut g = OccupancyGrid::empty(20, 20, 1.0, Vector2::zeros());
            for y in 0..20 {
                for x in 0..20 {
                    g.set_occupied((x, y), rng.random_bool(0.2));
                }
            }
            g.set_occupied((0, 0), false);
            g.set_occupied((19, 19), false);
            match astar(&g, (0, 0), (19, 19)) {
                Ok(p) => assert_eq!(Some(p.steps), dijkstra(&g, (0, 0), (19, 19))),
                Err(Error::NoPath) => assert_eq!(dijkstra(&g, (0, 0), (19, 19)), None),
                Err(e) => panic!("{e}"),
            }
        }
    }

    #[test]
    fn beta_boundary_and_midpoint() {
        for t in [1.0f64, 10.0, 100.0] {
            let b0 = beta(0.0, t);
            let b1 = beta(t, t);
            assert_eq!(b0[0], 0.0);
            assert_eq!(b1[0], 1.0);
            for k in 1..3 {
                assert!(b0[k].abs() < 1e-12 && b1[k].abs() < 1e-12);
            }
            assert_relative_eq!(beta(t / 2.0, t)[0], 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn beta_derivatives_match_finite_differences() {
        let t = 7.0;
        let h = 1e-4;
        for s in [0.7, 2.0, 3.5, 5.1, 6.3] {
            let b = beta(s, t);
            for k in 0..4 {
                let fd = (beta(s + h, t)[k] - beta(s - h, t)[k]) / (2.0 * h);
                assert!((fd - b[k + 1]).abs() < 1e-6 * (1.0 + b[k + 1].abs()), "order {k} at {s}");
            }
        }
    }

    #[test]
    fn beta_snap_peak() {
        for t in [1.0f64, 10.0, 100.0] {
            // β⁗ = 720 t / T⁵ − 360 / T⁴ is linear, so the extremes sit at the
            // ends of the open interval.
            let expected = 360.0 / t.powi(4);
            let eps = 1e-12;
            let peak = (1..10_000)
                .map(|k| t * k as f64 / 10_000.0)
                .chain([t * eps, t * (1.0 - eps)])
                .map(|s| beta(s, t)[4].abs())
                .fold(0.0, f64::max);
            assert!(((peak - expected) / expected).abs() < 1e-9, "T = {t}: {peak}");
        }
    }

    #[test]
    fn allocation() {
        let w = |xs: &[f64]| xs.iter().map(|x| Vector3::new(*x, 0.0, 0.0)).collect::<Vec<_>>();
        assert_eq!(allocate_times(&w(&[0.0, 1.0, 4.0]), 8.0).unwrap(), vec![2.0, 6.0]);
        let eq = allocate_times(&w(&[0.0, 2.0, 4.0, 6.0]), 9.0).unwrap();
        assert!(eq.iter().all(|t| (*t - 3.0).abs() < 1e-15));
        assert!(matches!(allocate_times(&w(&[0.0, 1.0, 1.0]), 8.0), Err(Error::DegenerateSegment { index: 1 })));
    }

    proptest! {
        #[test]
        fn allocation_sums_to_total(
            pts in proptest::collection::vec((-50.0..50.0f64, -50.0..50.0f64), 2..12),
            total in 0.1..1000.0f64,
        ) {
            let w: Vec<_> = pts.iter().map(|(x, y)| Vector3::new(*x, *y, 2.0)).collect();
            prop_assume!(w.windows(2).all(|p| p[0] != p[1]));
            let times = allocate_times(&w, total).unwrap();
            let sum: f64 = times.iter().sum();
            prop_assert!((sum - total).abs() < 1e-12 * total.max(1.0));
        }

        #[test]
        fn beta_is_monotone(t in 0.5..200.0f64, a in 0.0..1.0f64, b in 0.0..1.0f64) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(beta(lo * t, t)[0] <= beta(hi * t, t)[0]);
        }
    }

    fn sample_plan() -> (PlanResult, ContinuumConfig) {
        let (topo, refs) = eight_agent_formation();
        let cfg = build_matrices(&topo, &refs).unwrap();
        let wps = vec![Vector3::new(0.0, 0.0, 2.0), Vector3::new(10.0, 0.0, 2.0), Vector3::new(10.0, 8.0, 2.0)];
        (PlanResult::new(wps, 36.0).unwrap(), cfg)
    }

    #[test]
    fn leader_start_and_junction() {
        let (plan, cfg) = sample_plan();
        let c = cfg.leader_centroid();
        let start = leader_trajectories(&plan, &cfg, 0.0);
        for i in 0..3 {
            assert_eq!(start[i].position, plan.waypoints[0] + (cfg.ref_positions[i] - c));
            assert_eq!(start[i].velocity, Vector3::zeros());
        }
        let junction = plan.segment_times[0];
        for t in [junction - 1e-9, junction, junction + 1e-9] {
            let p = leader_trajectories(&plan, &cfg, t);
            assert!(p[0].velocity.norm() < 1e-6);
            assert!(p[0].acceleration.norm() < 1e-6);
        }
        let end = leader_trajectories(&plan, &cfg, 100.0);
        assert_eq!(end[2].position, plan.waypoints[2] + (cfg.ref_positions[2] - c));
    }

    #[test]
    fn leader_derivatives_match_finite_differences() {
        let (plan, cfg) = sample_plan();
        let h = 1e-4;
        for t in [3.0, 7.5, 25.0, 30.0] {
            let p = leader_trajectories(&plan, &cfg, t);
            let (a, b) = (leader_trajectories(&plan, &cfg, t - h), leader_trajectories(&plan, &cfg, t + h));
            for i in 0..3 {
                let v = (b[i].position - a[i].position) / (2.0 * h);
                let acc = (b[i].velocity - a[i].velocity) / (2.0 * h);
                assert!((v - p[i].velocity).norm() < 1e-6);
                assert!((acc - p[i].acceleration).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn formation_is_rigid() {
        let (plan, cfg) = sample_plan();
        let d0 = [(0, 1), (1, 2), (0, 2)].map(|(a, b)| (cfg.ref_positions[a] - cfg.ref_positions[b]).norm());
        for k in 0..=360 {
            let p = leader_trajectories(&plan, &cfg, k as f64 * 0.1);
            let d = [(0, 1), (1, 2), (0, 2)].map(|(a, b)| (p[a].position - p[b].position).norm());
            for (x, y) in d.iter().zip(d0) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bisection_finds_threshold() {
        let threshold = 37.3;
        let eval = |t: f64| Ok(Verdict { safe: t >= threshold, reason: None });
        let r = bisect_travel_time(eval, 1.0, 100.0, 1.0).unwrap();
        assert!(r.travel_time >= threshold && r.travel_time - threshold <= 1.0);
        assert!(r.transcript[0].safe);
        // linear scan at the same granularity
        let scan = (1..=100).map(|t| t as f64).find(|t| *t >= threshold).unwrap();
        assert!((r.travel_time - scan).abs() <= 1.0);
    }

    #[test]
    fn bisection_edge_cases() {
        let r = bisect_travel_time(|_| Ok(Verdict { safe: true, reason: None }), 1.0, 64.0, 1.0).unwrap();
        assert!(r.travel_time <= 2.0);
        let err = bisect_travel_time(
            |_| Ok(Verdict { safe: false, reason: Some("tracking".into()) }),
            1.0,
            64.0,
            1.0,
        );
        assert!(matches!(err, Err(Error::InitialTimeUnsafe { .. })));
        assert!(bisect_travel_time(|_| Ok(Verdict { safe: true, reason: None }), 1.0, 64.0, 0.0).is_err());
    }
}
