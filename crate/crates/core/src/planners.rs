//! Geodesic distance fields, A* shortest paths, RRT* and path utilities.
//!
//! All planners take the grid they should plan on; callers pass the
//! robot-radius-inflated grid. Grid search is 8-connected with corner cutting
//! forbidden: a diagonal move needs both adjacent orthogonal cells free.

use crate::geometry::Point;
use crate::world::OccupancyGrid;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::f64::consts::SQRT_2;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("start ({0:.3}, {1:.3}) is not on a free cell")]
    StartBlocked(f64, f64),
    #[error("goal ({0:.3}, {1:.3}) is not on a free cell")]
    GoalBlocked(f64, f64),
    #[error("goal is unreachable from start")]
    Unreachable,
}

/// Polyline in world coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Path {
    pub points: Vec<Point>,
    pub length: f64,
}

impl Path {
    pub fn new(points: Vec<Point>) -> Self {
        let length = points.windows(2).map(|w| w[0].distance(&w[1])).sum();
        Self { points, length }
    }

    pub fn start(&self) -> Point {
        self.points[0]
    }

    pub fn end(&self) -> Point {
        *self.points.last().expect("non-empty path")
    }

    /// Point at arc length `s`, clamped to the path ends.
    pub fn point_at(&self, s: f64) -> Point {
        if s <= 0.0 {
            return self.start();
        }
        let mut remaining = s;
        for w in self.points.windows(2) {
            let seg = w[0].distance(&w[1]);
            if remaining <= seg && seg > 0.0 {
                return w[0].lerp(&w[1], remaining / seg);
            }
            remaining -= seg;
        }
        self.end()
    }

    /// Arc length of the point on the path closest to `p`, with that point.
    pub fn project(&self, p: Point) -> (f64, Point) {
        if self.points.len() == 1 {
            return (0.0, self.start());
        }
        let mut best = (f64::INFINITY, 0.0, self.start());
        let mut offset = 0.0;
        for w in self.points.windows(2) {
            let (a, b) = (w[0], w[1]);
            let (vx, vy) = (b.x - a.x, b.y - a.y);
            let seg2 = vx * vx + vy * vy;
            let t = if seg2 > 0.0 { (((p.x - a.x) * vx + (p.y - a.y) * vy) / seg2).clamp(0.0, 1.0) } else { 0.0 };
            let q = a.lerp(&b, t);
            let d = q.distance(&p);
            if d < best.0 {
                best = (d, offset + t * seg2.sqrt(), q);
            }
            offset += seg2.sqrt();
        }
        (best.1, best.2)
    }
}

#[derive(Clone, Copy)]
struct HeapEntry {
    key: f64,
    turn: u8,
    row: usize,
    col: usize,
}

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for HeapEntry {}
impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapEntry {
    // Reversed so BinaryHeap pops the smallest (key, turn, row, col).
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .key
            .total_cmp(&self.key)
            .then(other.turn.cmp(&self.turn))
            .then(other.row.cmp(&self.row))
            .then(other.col.cmp(&self.col))
    }
}

const MOVES: [(i64, i64); 8] = [(1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1)];

/// Legal 8-connected moves out of `(c, r)` as (neighbor, move index, cost).
fn neighbors(grid: &OccupancyGrid, c: usize, r: usize) -> impl Iterator<Item = ((usize, usize), usize, f64)> + '_ {
    let res = grid.resolution();
    MOVES.iter().enumerate().filter_map(move |(k, &(dc, dr))| {
        let (nc, nr) = (c as i64 + dc, r as i64 + dr);
        if !grid.is_free_signed(nc, nr) {
            return None;
        }
        let diagonal = dc != 0 && dr != 0;
        if diagonal && !(grid.is_free_signed(c as i64 + dc, r as i64) && grid.is_free_signed(c as i64, r as i64 + dr)) {
            return None;
        }
        Some(((nc as usize, nr as usize), k, if diagonal { res * SQRT_2 } else { res }))
    })
}

/// Per-cell geodesic distance to a goal; unreachable cells hold `+∞`.
#[derive(Debug, Clone)]
pub struct DistanceField {
    grid_width: usize,
    grid_height: usize,
    resolution: f64,
    origin: Point,
    goal: (usize, usize),
    dist: Vec<f64>,
}

impl DistanceField {
    pub fn at_cell(&self, col: usize, row: usize) -> f64 {
        self.dist[row * self.grid_width + col]
    }

    /// Geodesic distance of the cell containing `p`; `+∞` outside the grid.
    pub fn at_point(&self, p: Point) -> f64 {
        let c = ((p.x - self.origin.x) / self.resolution).floor();
        let r = ((p.y - self.origin.y) / self.resolution).floor();
        if c < 0.0 || r < 0.0 || c as usize >= self.grid_width || r as usize >= self.grid_height {
            return f64::INFINITY;
        }
        self.at_cell(c as usize, r as usize)
    }

    pub fn goal_cell(&self) -> (usize, usize) {
        self.goal
    }

    pub fn values(&self) -> &[f64] {
        &self.dist
    }
}

pub fn dijkstra_field(grid: &OccupancyGrid, goal: Point) -> Result<DistanceField, PlanError> {
    let (gc, gr) = grid
        .cell_of(goal)
        .filter(|&(c, r)| grid.is_free(c, r))
        .ok_or(PlanError::GoalBlocked(goal.x, goal.y))?;
    let w = grid.width();
    let mut dist = vec![f64::INFINITY; w * grid.height()];
    let mut heap = BinaryHeap::new();
    dist[gr * w + gc] = 0.0;
    heap.push(HeapEntry { key: 0.0, turn: 0, row: gr, col: gc });
    while let Some(HeapEntry { key, row, col, .. }) = heap.pop() {
        if key > dist[row * w + col] {
            continue;
        }
        for ((nc, nr), _, cost) in neighbors(grid, col, row) {
            let nd = key + cost;
            let j = nr * w + nc;
            if nd < dist[j] {
                dist[j] = nd;
                heap.push(HeapEntry { key: nd, turn: 0, row: nr, col: nc });
            }
        }
    }
    Ok(DistanceField {
        grid_width: w,
        grid_height: grid.height(),
        resolution: grid.resolution(),
        origin: grid.origin(),
        goal: (gc, gr),
        dist,
    })
}

fn octile(res: f64, a: (usize, usize), b: (usize, usize)) -> f64 {
    let dx = a.0.abs_diff(b.0) as f64;
    let dy = a.1.abs_diff(b.1) as f64;
    res * (dx.max(dy) + (SQRT_2 - 1.0) * dx.min(dy))
}

/// Shortest 8-connected path between the cells containing `start` and `goal`,
/// returned as a chain of cell centers.
pub fn astar_path(grid: &OccupancyGrid, start: Point, goal: Point) -> Result<Path, PlanError> {
    let free_cell = |p: Point| grid.cell_of(p).filter(|&(c, r)| grid.is_free(c, r));
    let s = free_cell(start).ok_or(PlanError::StartBlocked(start.x, start.y))?;
    let g = free_cell(goal).ok_or(PlanError::GoalBlocked(goal.x, goal.y))?;
    let w = grid.width();
    let n = w * grid.height();
    let res = grid.resolution();
    let mut cost = vec![f64::INFINITY; n];
    let mut parent = vec![usize::MAX; n];
    let mut incoming = vec![u8::MAX; n];
    let idx = |(c, r): (usize, usize)| r * w + c;
    cost[idx(s)] = 0.0;
    let mut open = BinaryHeap::new();
    open.push(HeapEntry { key: octile(res, s, g), turn: 0, row: s.1, col: s.0 });
    while let Some(e) = open.pop() {
        let cell = (e.col, e.row);
        let i = idx(cell);
        if cell == g {
            break;
        }
        let base = cost[i];
        if e.key > base + octile(res, cell, g) + 1e-12 {
            continue;
        }
        for (nb, k, step) in neighbors(grid, cell.0, cell.1) {
            let j = idx(nb);
            let nc = base + step;
            if nc < cost[j] {
                cost[j] = nc;
                parent[j] = i;
                incoming[j] = k as u8;
                let turn = if incoming[i] == u8::MAX {
                    0
                } else {
                    let d = (k as i64 - incoming[i] as i64).rem_euclid(8);
                    d.min(8 - d) as u8
                };
                open.push(HeapEntry { key: nc + octile(res, nb, g), turn, row: nb.1, col: nb.0 });
            }
        }
    }
    if cost[idx(g)].is_infinite() {
        return Err(PlanError::Unreachable);
    }
    let mut cells = vec![idx(g)];
    while *cells.last().unwrap() != idx(s) {
        cells.push(parent[*cells.last().unwrap()]);
    }
    cells.reverse();
    Ok(Path::new(cells.into_iter().map(|i| grid.cell_center(i % w, i / w)).collect()))
}

/// True if every point sampled along the segment (spacing ≤ res/2) is free.
pub fn segment_free(grid: &OccupancyGrid, a: Point, b: Point) -> bool {
    first_blocked_on_segment(grid, a, b).is_none()
}

fn first_blocked_on_segment(grid: &OccupancyGrid, a: Point, b: Point) -> Option<Point> {
    let spacing = grid.resolution() / 2.0;
    let steps = (a.distance(&b) / spacing).ceil().max(1.0) as usize;
    (0..=steps).map(|i| a.lerp(&b, i as f64 / steps as f64)).find(|&p| !grid.is_free_at(p))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathValidation {
    pub valid: bool,
    pub first_violation: Option<Point>,
}

pub fn validate_path(grid: &OccupancyGrid, path: &Path) -> PathValidation {
    let violation = if path.points.len() == 1 {
        Some(path.start()).filter(|&p| !grid.is_free_at(p))
    } else {
        path.points.windows(2).find_map(|w| first_blocked_on_segment(grid, w[0], w[1]))
    };
    PathValidation { valid: violation.is_none(), first_violation: violation }
}

/// Arc-length resampling at `spacing`, always ending with the path's final point.
pub fn extract_waypoints(path: &Path, spacing: f64) -> Vec<Point> {
    assert!(spacing > 0.0, "waypoint spacing must be positive");
    if path.points.len() == 1 || path.length == 0.0 {
        return vec![path.start()];
    }
    let mut out = Vec::new();
    let mut k = 0usize;
    while (k as f64) * spacing < path.length - 1e-9 {
        out.push(path.point_at(k as f64 * spacing));
        k += 1;
    }
    out.push(path.end());
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RrtParams {
    pub max_iterations: usize,
    /// meters
    pub steer_step: f64,
    pub goal_bias: f64,
    pub seed: u64,
}

impl Default for RrtParams {
    fn default() -> Self {
        Self { max_iterations: 5000, steer_step: 0.5, goal_bias: 0.05, seed: 0 }
    }
}

impl RrtParams {
    /// Rewiring radius for a tree of `n` nodes.
    pub fn neighbor_radius(&self, n: usize) -> f64 {
        let cap = 4.0 * self.steer_step;
        if n < 2 {
            return cap;
        }
        let gamma = 2.0 * cap;
        let n = n as f64;
        cap.min(gamma * (n.ln() / n).sqrt())
    }
}

/// RRT* in the continuous plane over the grid's extent.
pub fn rrt_star(grid: &OccupancyGrid, start: Point, goal: Point, params: &RrtParams) -> Result<Path, PlanError> {
    assert!(params.steer_step > 0.0 && (0.0..1.0).contains(&params.goal_bias));
    if !grid.is_free_at(start) {
        return Err(PlanError::StartBlocked(start.x, start.y));
    }
    if !grid.is_free_at(goal) {
        return Err(PlanError::GoalBlocked(goal.x, goal.y));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let lo = grid.origin();
    let (w, h) = (grid.width_m(), grid.height_m());
    let mut nodes = vec![start];
    let mut parent = vec![usize::MAX];
    let mut cost = vec![0.0f64];
    let mut children: Vec<Vec<usize>> = vec![Vec::new()];
    let mut goal_links = Vec::new();
    if start.distance(&goal) <= params.steer_step && segment_free(grid, start, goal) {
        goal_links.push(0);
    }
    for _ in 0..params.max_iterations {
        let sample = if rng.random::<f64>() < params.goal_bias {
            goal
        } else {
            Point::new(lo.x + rng.random::<f64>() * w, lo.y + rng.random::<f64>() * h)
        };
        let nearest = (0..nodes.len())
            .min_by(|&a, &b| nodes[a].distance(&sample).total_cmp(&nodes[b].distance(&sample)))
            .unwrap();
        let d = nodes[nearest].distance(&sample);
        if d == 0.0 {
            continue;
        }
        let new = nodes[nearest].lerp(&sample, (params.steer_step / d).min(1.0));
        if !segment_free(grid, nodes[nearest], new) {
            continue;
        }
        let radius = params.neighbor_radius(nodes.len() + 1);
        let near: Vec<usize> = (0..nodes.len()).filter(|&i| nodes[i].distance(&new) <= radius).collect();
        let mut best_parent = nearest;
        let mut best_cost = cost[nearest] + nodes[nearest].distance(&new);
        for &i in &near {
            let c = cost[i] + nodes[i].distance(&new);
            if c < best_cost && segment_free(grid, nodes[i], new) {
                best_parent = i;
                best_cost = c;
            }
        }
        let id = nodes.len();
        nodes.push(new);
        parent.push(best_parent);
        cost.push(best_cost);
        children.push(Vec::new());
        children[best_parent].push(id);
        for &i in &near {
            if i == best_parent || i == 0 {
                continue;
            }
            let c = best_cost + new.distance(&nodes[i]);
            if c < cost[i] && segment_free(grid, new, nodes[i]) {
                let old = parent[i];
                children[old].retain(|&x| x != i);
                parent[i] = id;
                children[id].push(i);
                let delta = cost[i] - c;
                let mut stack = vec![i];
                while let Some(x) = stack.pop() {
                    cost[x] -= delta;
                    stack.extend(children[x].iter().copied());
                }
            }
        }
        if new.distance(&goal) <= params.steer_step && segment_free(grid, new, goal) {
            goal_links.push(id);
        }
    }
    let best = goal_links
        .into_iter()
        .min_by(|&a, &b| (cost[a] + nodes[a].distance(&goal)).total_cmp(&(cost[b] + nodes[b].distance(&goal))))
        .ok_or(PlanError::Unreachable)?;
    let mut points = vec![];
    let mut cur = best;
    while cur != usize::MAX {
        points.push(nodes[cur]);
        cur = parent[cur];
    }
    points.reverse();
    if points.last() != Some(&goal) {
        points.push(goal);
    }
    Ok(Path::new(points))
}
