//! Episode-level navigation environment shared by training and evaluation:
//! kinematic stepping on the true world, sensing, context construction on the
//! (possibly outdated or corrupted) context map, reward and termination.

use crate::context::{
    build_context_map, build_context_trajectory, corrupt_map, corrupt_waypoints, encode_goal, next_waypoint,
    ContextConfig, ContextError, NoiseKind, NoiseSpec, PolarGoal, WAYPOINT_LOOKAHEAD_M,
};
use crate::episodes::{stream_rng, Episode, EpisodeDataset, EpisodeIoError};
use crate::geometry::Point;
use crate::kinematics::{
    random_erase_depth, raycast_depth, step_kinematic, CollisionMap, KinematicsError, Pose, SensorConfig,
    VelocityAction, CONTROL_DT,
};
use crate::planners::{astar_path, dijkstra_field, extract_waypoints, DistanceField, Path};
use crate::policy::{action_to_velocity, ContextInput, ObservationBundle, PolicyKind};
use crate::world::{inflate_obstacles, OccupancyGrid, ROBOT_RADIUS};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::Arc;
use thiserror::Error;

pub const SUCCESS_RADIUS: f64 = 0.425;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error("goal ({0:.2}, {1:.2}) is not in free space of the true world")]
    GoalBlocked(f64, f64),
    #[error("episode already finished")]
    Finished,
}

/// Reward terms; penalties are non-positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    pub success_reward: f64,
    pub slack: f64,
    pub backward: f64,
    pub collision: f64,
    pub geo_scale: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { success_reward: 10.0, slack: -0.002, backward: -0.3, collision: -0.003, geo_scale: 1.0 }
    }
}

/// Success bonus + geodesic progress + slack + backward and collision penalties.
pub fn compute_reward(
    prev_geo: f64,
    cur_geo: f64,
    action: VelocityAction,
    collided: bool,
    success: bool,
    cfg: &RewardConfig,
) -> f64 {
    let mut r = cfg.geo_scale * (prev_geo - cur_geo) + cfg.slack;
    if success {
        r += cfg.success_reward;
    }
    if action.linear < 0.0 {
        r += cfg.backward;
    }
    if collided {
        r += cfg.collision;
    }
    r
}

/// True world, its inflated collision map and the map handed to the agent as context.
#[derive(Debug, Clone)]
pub struct NavWorld {
    pub truth: OccupancyGrid,
    pub collision: CollisionMap,
    pub context_map: OccupancyGrid,
}

impl NavWorld {
    pub fn new(truth: OccupancyGrid) -> Self {
        Self::with_context_map(truth.clone(), truth)
    }

    /// A world whose context map differs from the truth (e.g. an outdated map).
    pub fn with_context_map(truth: OccupancyGrid, context_map: OccupancyGrid) -> Self {
        let collision = CollisionMap::for_robot(&truth);
        Self { truth, collision, context_map }
    }
}

/// Resolves every episode's world, sharing identical map references.
pub fn load_worlds(ds: &EpisodeDataset, base_dir: &std::path::Path) -> Result<Vec<Arc<NavWorld>>, EpisodeIoError> {
    let mut cache: HashMap<String, Arc<NavWorld>> = HashMap::new();
    ds.episodes
        .iter()
        .map(|ep| {
            let r = ds.map_for(ep);
            let key = serde_json::to_string(r).expect("map refs serialize");
            if let Some(w) = cache.get(&key) {
                return Ok(w.clone());
            }
            let w = Arc::new(NavWorld::new(r.resolve(base_dir)?));
            cache.insert(key, w.clone());
            Ok(w)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub sensor: SensorConfig,
    pub reward: RewardConfig,
    pub collision_budget: u32,
    /// Random-erasing fraction for depth scans; 0 disables.
    pub depth_erase: f64,
    /// Corruption applied to the context map once per episode.
    pub map_noise: Option<NoiseSpec>,
    /// Per-axis uniform offset (m) added once per episode to every waypoint.
    pub waypoint_noise: f64,
    pub context: ContextConfig,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            sensor: SensorConfig::default(),
            reward: RewardConfig::default(),
            collision_budget: 50,
            depth_erase: 0.0,
            map_noise: None,
            waypoint_noise: 0.0,
            context: ContextConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    Success,
    Timeout,
    CollisionBudget,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub collided: bool,
    pub done: Option<Termination>,
}

/// splitmix64 mix of two seeds.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One running episode.
pub struct NavEnv {
    pub world: Arc<NavWorld>,
    pub episode: Episode,
    cfg: EnvConfig,
    kind: PolicyKind,
    context_map: OccupancyGrid,
    field: DistanceField,
    path: Option<Path>,
    pub pose: Pose,
    pub prev_action: [f64; 2],
    pub steps: u32,
    pub collisions: u32,
    pub taken: f64,
    geo: f64,
    pub done: Option<Termination>,
    rng: ChaCha8Rng,
}

impl NavEnv {
    /// `seed` drives depth augmentation and per-episode noise.
    pub fn new(world: Arc<NavWorld>, episode: Episode, cfg: &EnvConfig, kind: PolicyKind, seed: u64) -> Result<Self, SimError> {
        let mut rng = stream_rng(seed, episode.id);
        if world.collision.collides(episode.start.position()) {
            return Err(KinematicsError::StartInCollision { x: episode.start.x, y: episode.start.y }.into());
        }
        let field = dijkstra_field(world.collision.grid(), episode.goal)
            .map_err(|_| SimError::GoalBlocked(episode.goal.x, episode.goal.y))?;
        let episode_seed = derive_seed(seed, episode.id);
        let (context_map, waypoint_noise) = match cfg.map_noise {
            Some(spec) if spec.kind == NoiseKind::WaypointShift => {
                (world.context_map.clone(), cfg.waypoint_noise.max(spec.magnitude))
            }
            Some(spec) if spec.magnitude > 0.0 || spec.kind == NoiseKind::Blank => (
                corrupt_map(&world.context_map, &spec.with_seed(derive_seed(spec.seed, episode_seed)))?,
                cfg.waypoint_noise,
            ),
            _ => (world.context_map.clone(), cfg.waypoint_noise),
        };
        let path = matches!(kind, PolicyKind::Trajectory | PolicyKind::Waypoint)
            .then(|| plan_context_path(&context_map, episode.start.position(), episode.goal, waypoint_noise, &mut rng));
        let geo = field.at_point(episode.start.position());
        Ok(Self {
            pose: episode.start,
            world,
            cfg: cfg.clone(),
            kind,
            context_map,
            field,
            path,
            prev_action: [0.0, 0.0],
            steps: 0,
            collisions: 0,
            taken: 0.0,
            geo,
            done: None,
            rng,
            episode,
        })
    }

    pub fn context_map(&self) -> &OccupancyGrid {
        &self.context_map
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_ref()
    }

    pub fn geodesic(&self) -> f64 {
        self.geo
    }

    pub fn distance_to_goal(&self) -> f64 {
        self.pose.position().distance(&self.episode.goal)
    }

    pub fn is_success(&self) -> bool {
        self.distance_to_goal() <= SUCCESS_RADIUS
    }

    /// Lookahead waypoint on the context path and whether it is the path's end.
    pub fn waypoint(&self) -> Option<(PolarGoal, bool)> {
        self.path.as_ref().map(|p| {
            let (s, _) = p.project(self.pose.position());
            let is_final = s + WAYPOINT_LOOKAHEAD_M >= p.length;
            (next_waypoint(p, &self.pose, WAYPOINT_LOOKAHEAD_M), is_final)
        })
    }

    pub fn observe(&mut self) -> Result<ObservationBundle, SimError> {
        let mut depth = raycast_depth(&self.world.truth, self.pose, &self.cfg.sensor);
        if self.cfg.depth_erase > 0.0 {
            depth = random_erase_depth(&depth, self.cfg.depth_erase, &mut self.rng);
        }
        let goal = self.episode.goal;
        let context = match self.kind {
            PolicyKind::NoContext => ContextInput::None,
            PolicyKind::Map => ContextInput::Raster(build_context_map(&self.context_map, &self.pose, goal, &self.cfg.context)?),
            PolicyKind::Trajectory => ContextInput::Raster(build_context_trajectory(
                &self.context_map,
                self.path.as_ref().expect("trajectory policies plan a path"),
                &self.pose,
                goal,
                &self.cfg.context,
            )?),
            PolicyKind::Waypoint => ContextInput::Waypoint(self.waypoint().expect("waypoint policies plan a path").0),
        };
        Ok(ObservationBundle { depth, goal: encode_goal(&self.pose, goal), prev_action: self.prev_action, context })
    }

    /// Applies a normalized action.
    pub fn step(&mut self, action: [f64; 2]) -> Result<StepOutcome, SimError> {
        self.step_velocity(action_to_velocity(action))
    }

    pub fn step_velocity(&mut self, vel: VelocityAction) -> Result<StepOutcome, SimError> {
        if self.done.is_some() {
            return Err(SimError::Finished);
        }
        let vel = vel.clipped();
        let (pose, collided) = step_kinematic(&self.world.collision, self.pose, vel, CONTROL_DT)?;
        self.taken += pose.position().distance(&self.pose.position());
        self.pose = pose;
        self.prev_action = crate::policy::velocity_to_action(vel);
        self.steps += 1;
        self.collisions += collided as u32;
        let cur = self.field.at_point(pose.position());
        let cur = if cur.is_finite() { cur } else { self.geo };
        let success = self.is_success();
        let reward = compute_reward(self.geo, cur, vel, collided, success, &self.cfg.reward);
        self.geo = cur;
        self.done = if success {
            Some(Termination::Success)
        } else if self.collisions >= self.cfg.collision_budget {
            Some(Termination::CollisionBudget)
        } else if self.steps >= self.episode.budget {
            Some(Termination::Timeout)
        } else {
            None
        };
        Ok(StepOutcome { reward, collided, done: self.done })
    }

    /// Immediate success check before any step.
    pub fn check_start(&mut self) -> Option<Termination> {
        if self.is_success() {
            self.done = Some(Termination::Success);
        }
        self.done
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// A* on the inflated context map. With noise, the path is resampled into
/// waypoints [`WAYPOINT_LOOKAHEAD_M`] apart and each is perturbed once.
/// Falls back to the straight segment when the context map admits no path.
pub fn plan_context_path<R: Rng + ?Sized>(context_map: &OccupancyGrid, start: Point, goal: Point, waypoint_noise: f64, rng: &mut R) -> Path {
    let inflated = inflate_obstacles(context_map, ROBOT_RADIUS);
    let path = astar_path(&inflated, start, goal).unwrap_or_else(|_| Path::new(vec![start, goal]));
    if waypoint_noise > 0.0 {
        let waypoints = extract_waypoints(&path, WAYPOINT_LOOKAHEAD_M);
        Path::new(corrupt_waypoints(&waypoints, waypoint_noise, rng))
    } else {
        path
    }
}
