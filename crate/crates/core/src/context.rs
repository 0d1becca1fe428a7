//! Context inputs for the navigation policy: the heading-rotated occupancy
//! raster, the shortest-path trajectory raster and the next waypoint, plus the
//! noise models used to corrupt them.
//!
//! Raster layout: `[channel][row][col]` with row 0 at the top (largest y).
//! After rotation the robot's forward direction points along +col.

use crate::geometry::{normalize_angle, Point};
use crate::kinematics::Pose;
use crate::planners::Path;
use crate::world::{OccupancyGrid, FREE, OBSTACLE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ContextError {
    #[error("agent ({0:.3}, {1:.3}) is outside the world bounds")]
    AgentOutsideWorld(f64, f64),
    #[error("trajectory context needs a non-empty path")]
    EmptyPath,
    #[error("{0:?} noise does not apply to occupancy maps")]
    NotAMapNoise(NoiseKind),
}

/// Point about which the allocentric raster is rotated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RotationCenter {
    /// Raster covers the world; rotation about the raster center.
    RasterCenter,
    /// Raster is centered on the agent and spans twice the world extent.
    Agent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextConfig {
    /// Raster side N.
    pub size: usize,
    /// Meters per raster cell; derived from the world extent when absent.
    #[serde(default)]
    pub cell_m: Option<f64>,
    pub center: RotationCenter,
    pub goal_disk_cells: f64,
}

impl Default for ContextConfig {
    fn default() -> Self {
        Self { size: 100, cell_m: None, center: RotationCenter::RasterCenter, goal_disk_cells: 2.0 }
    }
}

/// The `2 × N × N` context tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextObservation {
    pub size: usize,
    pub cell_m: f64,
    pub data: Vec<f32>,
}

impl ContextObservation {
    fn zeros(size: usize, cell_m: f64) -> Self {
        Self { size, cell_m, data: vec![0.0; 2 * size * size] }
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.size * self.size;
        &self.data[c * n..(c + 1) * n]
    }

    fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.size * self.size;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn at(&self, c: usize, row: usize, col: usize) -> f32 {
        self.data[c * self.size * self.size + row * self.size + col]
    }

    /// Channel 0 in gray, channel-1 markers in red.
    pub fn to_image(&self) -> image::RgbImage {
        let n = self.size as u32;
        image::RgbImage::from_fn(n, n, |x, y| {
            let (r, c) = (y as usize, x as usize);
            if self.at(1, r, c) > 0.5 {
                image::Rgb([220, 30, 30])
            } else if self.at(0, r, c) > 0.5 {
                image::Rgb([235, 235, 235])
            } else {
                image::Rgb([40, 40, 40])
            }
        })
    }
}

/// Placement of the context raster in the world.
#[derive(Debug, Clone, Copy)]
struct RasterFrame {
    n: usize,
    cell: f64,
    center: Point,
    heading: f64,
}

impl RasterFrame {
    fn new(world: &OccupancyGrid, pose: &Pose, cfg: &ContextConfig) -> Self {
        let extent = world.width_m().max(world.height_m());
        let o = world.origin();
        let (cell, center) = match cfg.center {
            RotationCenter::RasterCenter => (
                cfg.cell_m.unwrap_or(extent / cfg.size as f64),
                Point::new(o.x + extent / 2.0, o.y + extent / 2.0),
            ),
            RotationCenter::Agent => (cfg.cell_m.unwrap_or(2.0 * extent / cfg.size as f64), pose.position()),
        };
        Self { n: cfg.size, cell, center, heading: pose.heading }
    }

    /// World point at the center of unrotated raster cell (row, col).
    fn world_of(&self, row: usize, col: usize) -> Point {
        let half = self.n as f64 / 2.0;
        Point::new(
            self.center.x + (col as f64 + 0.5 - half) * self.cell,
            self.center.y + (half - (row as f64 + 0.5)) * self.cell,
        )
    }

    /// Continuous (u, v) raster offsets of a world point in the rotated frame.
    fn rotated_uv(&self, p: Point) -> (f64, f64) {
        let (dx, dy) = ((p.x - self.center.x) / self.cell, (p.y - self.center.y) / self.cell);
        let (s, c) = self.heading.sin_cos();
        (dx * c + dy * s, -dx * s + dy * c)
    }

    fn cell_of_uv(&self, u: f64, v: f64) -> Option<(usize, usize)> {
        let half = self.n as f64 / 2.0;
        let (col, row) = ((u + half).floor(), (half - v).floor());
        (col >= 0.0 && row >= 0.0 && (col as usize) < self.n && (row as usize) < self.n)
            .then_some((row as usize, col as usize))
    }

    fn unrotated_cell(&self, p: Point) -> Option<(usize, usize)> {
        let (u, v) = ((p.x - self.center.x) / self.cell, (p.y - self.center.y) / self.cell);
        self.cell_of_uv(u, v)
    }

    /// Nearest-neighbor rotation of an N×N raster by −heading about its center.
    fn rotate(&self, src: &[f32], fill: f32, dst: &mut [f32]) {
        let n = self.n;
        let half = n as f64 / 2.0;
        let (s, c) = self.heading.sin_cos();
        for row in 0..n {
            let v = half - (row as f64 + 0.5);
            for col in 0..n {
                let u = col as f64 + 0.5 - half;
                let su = u * c - v * s;
                let sv = u * s + v * c;
                dst[row * n + col] = match self.cell_of_uv(su, sv) {
                    Some((sr, sc)) => src[sr * n + sc],
                    None => fill,
                };
            }
        }
    }

    fn draw_markers(&self, pose: &Pose, goal: Point, disk: f64, ch: &mut [f32]) {
        let n = self.n;
        let (gu, gv) = self.rotated_uv(goal);
        if let Some((gr, gc)) = self.cell_of_uv(gu, gv) {
            let reach = disk.ceil() as i64;
            for dr in -reach..=reach {
                for dc in -reach..=reach {
                    if ((dr * dr + dc * dc) as f64) > disk * disk {
                        continue;
                    }
                    let (r, c) = (gr as i64 + dr, gc as i64 + dc);
                    if r >= 0 && c >= 0 && (r as usize) < n && (c as usize) < n {
                        ch[r as usize * n + c as usize] = 1.0;
                    }
                }
            }
        }
        let (au, av) = self.rotated_uv(pose.position());
        if let Some((ar, ac)) = self.cell_of_uv(au, av) {
            ch[ar * n + ac] = 1.0;
        }
    }
}

/// Occupancy channel plus agent/goal channel, rotated to the robot's heading.
pub fn build_context_map(
    map: &OccupancyGrid,
    pose: &Pose,
    goal: Point,
    cfg: &ContextConfig,
) -> Result<ContextObservation, ContextError> {
    if !map.contains(pose.position()) {
        return Err(ContextError::AgentOutsideWorld(pose.x, pose.y));
    }
    let frame = RasterFrame::new(map, pose, cfg);
    let n = cfg.size;
    let mut raster = vec![0.0f32; n * n];
    for row in 0..n {
        for col in 0..n {
            raster[row * n + col] = if map.is_free_at(frame.world_of(row, col)) { 1.0 } else { 0.0 };
        }
    }
    let mut obs = ContextObservation::zeros(n, frame.cell);
    frame.rotate(&raster, OBSTACLE as f32, obs.channel_mut(0));
    frame.draw_markers(pose, goal, cfg.goal_disk_cells, obs.channel_mut(1));
    Ok(obs)
}

fn bresenham(a: (i64, i64), b: (i64, i64), mut plot: impl FnMut(i64, i64)) {
    let (mut x, mut y) = a;
    let dx = (b.0 - a.0).abs();
    let dy = -(b.1 - a.1).abs();
    let sx = if a.0 < b.0 { 1 } else { -1 };
    let sy = if a.1 < b.1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        plot(x, y);
        if (x, y) == b {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Rasterized path (1 on the path, 0 elsewhere) plus the agent/goal channel.
pub fn build_context_trajectory(
    map: &OccupancyGrid,
    path: &Path,
    pose: &Pose,
    goal: Point,
    cfg: &ContextConfig,
) -> Result<ContextObservation, ContextError> {
    if path.points.is_empty() {
        return Err(ContextError::EmptyPath);
    }
    if !map.contains(pose.position()) {
        return Err(ContextError::AgentOutsideWorld(pose.x, pose.y));
    }
    let frame = RasterFrame::new(map, pose, cfg);
    let n = cfg.size as i64;
    let mut raster = vec![0.0f32; (n * n) as usize];
    let signed_cell = |p: Point| {
        let half = n as f64 / 2.0;
        let u = (p.x - frame.center.x) / frame.cell;
        let v = (p.y - frame.center.y) / frame.cell;
        ((half - v).floor() as i64, (u + half).floor() as i64)
    };
    let mut plot = |r: i64, c: i64| {
        if r >= 0 && c >= 0 && r < n && c < n {
            raster[(r * n + c) as usize] = 1.0;
        }
    };
    if path.points.len() == 1 {
        let (r, c) = signed_cell(path.points[0]);
        plot(r, c);
    }
    for w in path.points.windows(2) {
        let (a, b) = (signed_cell(w[0]), signed_cell(w[1]));
        bresenham((a.1, a.0), (b.1, b.0), |c, r| plot(r, c));
    }
    let mut obs = ContextObservation::zeros(cfg.size, frame.cell);
    frame.rotate(&raster, 0.0, obs.channel_mut(0));
    frame.draw_markers(pose, goal, cfg.goal_disk_cells, obs.channel_mut(1));
    Ok(obs)
}

/// Raster cell of a world point before rotation; used by tests and renderers.
pub fn unrotated_raster_cell(map: &OccupancyGrid, pose: &Pose, p: Point, cfg: &ContextConfig) -> Option<(usize, usize)> {
    RasterFrame::new(map, pose, cfg).unrotated_cell(p)
}

/// Robot-relative polar coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolarGoal {
    pub r: f64,
    pub theta: f64,
}

impl PolarGoal {
    pub fn of(pose: &Pose, target: Point) -> Self {
        let (dx, dy) = (target.x - pose.x, target.y - pose.y);
        let r = dx.hypot(dy);
        let theta = if r == 0.0 { 0.0 } else { normalize_angle(dy.atan2(dx) - pose.heading) };
        Self { r, theta }
    }

    fn from_cartesian(x: f64, y: f64) -> Self {
        let r = x.hypot(y);
        Self { r, theta: if r == 0.0 { 0.0 } else { y.atan2(x) } }
    }

    pub fn to_cartesian(&self) -> (f64, f64) {
        (self.r * self.theta.cos(), self.r * self.theta.sin())
    }
}

pub const WAYPOINT_LOOKAHEAD_M: f64 = 1.0;

/// Target `lookahead` meters of arc length past the pose's projection onto the path.
pub fn next_waypoint(path: &Path, pose: &Pose, lookahead: f64) -> PolarGoal {
    let (s, _) = path.project(pose.position());
    PolarGoal::of(pose, path.point_at(s + lookahead))
}

/// `[ln(1 + r), cos θ, sin θ]`
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GoalEncoding(pub [f64; 3]);

pub fn encode_polar(p: PolarGoal) -> GoalEncoding {
    GoalEncoding([p.r.ln_1p(), p.theta.cos(), p.theta.sin()])
}

pub fn encode_goal(pose: &Pose, goal: Point) -> GoalEncoding {
    encode_polar(PolarGoal::of(pose, goal))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    Shift,
    Cutout,
    WaypointShift,
    Blank,
}

/// Corruption model. `magnitude` is a fraction of the raster side (shift), a
/// target altered-cell fraction (cutout) or meters (waypoint shift).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub magnitude: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(kind: NoiseKind, magnitude: f64, seed: u64) -> Self {
        Self { kind, magnitude, seed }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

/// Applies shift, cutout or blank noise; deterministic in `spec.seed`.
pub fn corrupt_map(map: &OccupancyGrid, spec: &NoiseSpec) -> Result<OccupancyGrid, ContextError> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (w, h) = (map.width() as i64, map.height() as i64);
    let mut out = map.clone();
    match spec.kind {
        NoiseKind::WaypointShift => return Err(ContextError::NotAMapNoise(spec.kind)),
        NoiseKind::Blank => {
            for r in 0..h as usize {
                for c in 0..w as usize {
                    out.set(c, r, FREE);
                }
            }
        }
        NoiseKind::Shift => {
            let f = spec.magnitude.clamp(0.0, 1.0);
            let (mx, my) = ((f * w as f64).round() as i64, (f * h as f64).round() as i64);
            let dx = rng.random_range(-mx..=mx);
            let dy = rng.random_range(-my..=my);
            for r in 0..h {
                for c in 0..w {
                    let (sc, sr) = (c - dx, r - dy);
                    let v = if sc >= 0 && sr >= 0 && sc < w && sr < h { map.get(sc as usize, sr as usize) } else { FREE };
                    out.set(c as usize, r as usize, v);
                }
            }
        }
        NoiseKind::Cutout => {
            let f = spec.magnitude.clamp(0.0, 1.0);
            if f >= 1.0 {
                return corrupt_map(map, &NoiseSpec { kind: NoiseKind::Blank, ..*spec });
            }
            let target = (f * (w * h) as f64).ceil() as usize;
            if target == 0 {
                return Ok(out);
            }
            let side = |n: i64| ((n / 20).max(1), (n / 4).max(1));
            let (sx, sy) = (side(w), side(h));
            let mean_area = ((sx.0 + sx.1) as f64 / 2.0) * ((sy.0 + sy.1) as f64 / 2.0);
            // Half the patches carry the value a cell already has.
            let expected = (2.0 * target as f64 / mean_area).ceil().max(1.0) as usize;
            let mut diff = 0usize;
            for _ in 0..10 * expected {
                if diff >= target {
                    break;
                }
                let pw = rng.random_range(sx.0..=sx.1);
                let ph = rng.random_range(sy.0..=sy.1);
                let c0 = rng.random_range(0..=(w - pw));
                let r0 = rng.random_range(0..=(h - ph));
                let value = if rng.random_bool(0.5) { FREE } else { OBSTACLE };
                for r in r0..r0 + ph {
                    for c in c0..c0 + pw {
                        let (cu, ru) = (c as usize, r as usize);
                        let before = out.get(cu, ru) != map.get(cu, ru);
                        out.set(cu, ru, value);
                        let after = value != map.get(cu, ru);
                        match (before, after) {
                            (false, true) => diff += 1,
                            (true, false) => diff -= 1,
                            _ => {}
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Adds independent per-axis uniform noise in `[−magnitude, magnitude]` to a waypoint.
pub fn corrupt_waypoint<R: Rng + ?Sized>(wp: PolarGoal, magnitude: f64, rng: &mut R) -> PolarGoal {
    assert!(magnitude >= 0.0);
    if magnitude == 0.0 {
        return wp;
    }
    let (x, y) = wp.to_cartesian();
    PolarGoal::from_cartesian(
        x + rng.random_range(-magnitude..=magnitude),
        y + rng.random_range(-magnitude..=magnitude),
    )
}

/// Per-axis uniform noise on a list of world-frame waypoints.
pub fn corrupt_waypoints<R: Rng + ?Sized>(points: &[Point], magnitude: f64, rng: &mut R) -> Vec<Point> {
    if magnitude == 0.0 {
        return points.to_vec();
    }
    points
        .iter()
        .map(|p| {
            Point::new(
                p.x + rng.random_range(-magnitude..=magnitude),
                p.y + rng.random_range(-magnitude..=magnitude),
            )
        })
        .collect()
}
