//! Unicycle agent state, Euler stepping with collision-freeze, raycast depth
//! sensing and depth augmentation.

use crate::geometry::{normalize_angle, Point};
use crate::world::{inflate_obstacles, OccupancyGrid, ROBOT_RADIUS};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Control period (2 Hz).
pub const CONTROL_DT: f64 = 0.5;
pub const MAX_LINEAR: f64 = 0.5;
pub const MAX_ANGULAR: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    /// Radians in (−π, π].
    pub heading: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self { x, y, heading: normalize_angle(heading) }
    }

    pub fn position(&self) -> Point {
        Point::new(self.x, self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VelocityAction {
    /// m/s
    pub linear: f64,
    /// rad/s
    pub angular: f64,
}

impl VelocityAction {
    pub const ZERO: Self = Self { linear: 0.0, angular: 0.0 };

    pub fn new(linear: f64, angular: f64) -> Self {
        Self { linear, angular }
    }

    pub fn clipped(self) -> Self {
        Self {
            linear: self.linear.clamp(-MAX_LINEAR, MAX_LINEAR),
            angular: self.angular.clamp(-MAX_ANGULAR, MAX_ANGULAR),
        }
    }
}

/// Explicit Euler update; the position advances along the pre-step heading.
pub fn integrate_unicycle(pose: Pose, action: VelocityAction, dt: f64) -> Pose {
    Pose {
        x: pose.x + action.linear * pose.heading.cos() * dt,
        y: pose.y + action.linear * pose.heading.sin() * dt,
        heading: normalize_angle(pose.heading + action.angular * dt),
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum KinematicsError {
    #[error("starting pose ({x:.3}, {y:.3}) is already in collision")]
    StartInCollision { x: f64, y: f64 },
}

/// A world pre-inflated by the robot radius, so collision checks reduce to a
/// point lookup.
#[derive(Debug, Clone)]
pub struct CollisionMap {
    inflated: OccupancyGrid,
    radius: f64,
}

impl CollisionMap {
    pub fn new(world: &OccupancyGrid, radius: f64) -> Self {
        Self { inflated: inflate_obstacles(world, radius), radius }
    }

    pub fn for_robot(world: &OccupancyGrid) -> Self {
        Self::new(world, ROBOT_RADIUS)
    }

    pub fn from_inflated(inflated: OccupancyGrid, radius: f64) -> Self {
        Self { inflated, radius }
    }

    pub fn grid(&self) -> &OccupancyGrid {
        &self.inflated
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// Points outside the grid always collide.
    pub fn collides(&self, p: Point) -> bool {
        !self.inflated.is_free_at(p)
    }
}

/// One control step. Actions are clipped to the velocity limits first. When the
/// candidate position collides, the position is frozen but the heading still
/// turns.
pub fn step_kinematic(
    map: &CollisionMap,
    pose: Pose,
    action: VelocityAction,
    dt: f64,
) -> Result<(Pose, bool), KinematicsError> {
    if map.collides(pose.position()) {
        return Err(KinematicsError::StartInCollision { x: pose.x, y: pose.y });
    }
    let candidate = integrate_unicycle(pose, action.clipped(), dt);
    if map.collides(candidate.position()) {
        Ok((Pose { x: pose.x, y: pose.y, heading: candidate.heading }, true))
    } else {
        Ok((candidate, false))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorConfig {
    pub rays: usize,
    pub fov: f64,
    pub max_range: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self { rays: 128, fov: 2.094, max_range: 3.5 }
    }
}

impl SensorConfig {
    pub fn bearing(&self, i: usize) -> f64 {
        -self.fov / 2.0 + i as f64 * self.fov / (self.rays - 1) as f64
    }
}

/// Normalized depths in [0, 1]; 1.0 means nothing within range.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthScan {
    pub rays: Vec<f64>,
    pub fov: f64,
    pub max_range: f64,
}

/// Distance along a ray to the first obstacle-cell boundary (Amanatides–Woo
/// traversal), or `None` if nothing is hit within `max_range` or the ray leaves
/// the grid.
pub fn cast_ray(world: &OccupancyGrid, origin: Point, angle: f64, max_range: f64) -> Option<f64> {
    let res = world.resolution();
    let (dx, dy) = (angle.cos(), angle.sin());
    let (mut c, mut r) = world.cell_of_signed(origin);
    let inside = |c: i64, r: i64| c >= 0 && r >= 0 && (c as usize) < world.width() && (r as usize) < world.height();
    if !inside(c, r) {
        return None;
    }
    if !world.is_free(c as usize, r as usize) {
        return Some(0.0);
    }
    let lx = (origin.x - world.origin().x) / res;
    let ly = (origin.y - world.origin().y) / res;
    let step_c: i64 = if dx > 0.0 { 1 } else { -1 };
    let step_r: i64 = if dy > 0.0 { 1 } else { -1 };
    let t_delta_x = if dx != 0.0 { res / dx.abs() } else { f64::INFINITY };
    let t_delta_y = if dy != 0.0 { res / dy.abs() } else { f64::INFINITY };
    let mut t_max_x = if dx > 0.0 {
        ((c + 1) as f64 - lx) * res / dx
    } else if dx < 0.0 {
        (lx - c as f64) * res / -dx
    } else {
        f64::INFINITY
    };
    let mut t_max_y = if dy > 0.0 {
        ((r + 1) as f64 - ly) * res / dy
    } else if dy < 0.0 {
        (ly - r as f64) * res / -dy
    } else {
        f64::INFINITY
    };
    loop {
        let t = if t_max_x < t_max_y {
            c += step_c;
            let t = t_max_x;
            t_max_x += t_delta_x;
            t
        } else {
            r += step_r;
            let t = t_max_y;
            t_max_y += t_delta_y;
            t
        };
        if t > max_range || !inside(c, r) {
            return None;
        }
        if !world.is_free(c as usize, r as usize) {
            return Some(t);
        }
    }
}

pub fn raycast_depth(world: &OccupancyGrid, pose: Pose, cfg: &SensorConfig) -> DepthScan {
    let origin = pose.position();
    let rays = (0..cfg.rays)
        .map(|i| match cast_ray(world, origin, pose.heading + cfg.bearing(i), cfg.max_range) {
            Some(d) => (d / cfg.max_range).min(1.0),
            None => 1.0,
        })
        .collect();
    DepthScan { rays, fov: cfg.fov, max_range: cfg.max_range }
}

/// Random erasing on a 1-D scan: one contiguous segment of at most
/// `fraction · R` rays is set to the far value 1.0.
pub fn random_erase_depth<R: Rng + ?Sized>(scan: &DepthScan, fraction: f64, rng: &mut R) -> DepthScan {
    assert!((0.0..=0.5).contains(&fraction), "erase fraction {fraction} outside [0, 0.5]");
    let mut out = scan.clone();
    let n = scan.rays.len();
    let budget = (fraction * n as f64).floor() as usize;
    if budget == 0 {
        return out;
    }
    let len = rng.random_range(1..=budget);
    let start = rng.random_range(0..=n - len);
    out.rays[start..start + len].fill(1.0);
    out
}
