//! SR/SPL metrics, closed-loop episode execution, seeded evaluation, noise
//! sweeps and trajectory rendering.

use crate::context::{NoiseKind, NoiseSpec};
use crate::geometry::Point;
use crate::kinematics::{Pose, VelocityAction};
use crate::policy::{
    action_to_velocity, scripted_beeline, scripted_waypoint_follower, Policy, PolicyKind, RecurrentState,
};
use crate::sim::{derive_seed, EnvConfig, NavEnv, SimError, Termination};
use crate::training::TrainEpisode;
use crate::world::{grid_to_pixels, OccupancyGrid};
use image::{Rgb, RgbImage};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shortest path length {0} must be positive")]
    NonPositiveShortest(f64),
    #[error("episode {id}: {source}")]
    Sim { id: u64, source: SimError },
    #[error("policy error: {0}")]
    Policy(#[from] crate::nn::NnError),
    #[error("empty episode set")]
    Empty,
    #[error("{0}")]
    Mismatch(String),
    #[error("cannot write {path}: {msg}")]
    Render { path: String, msg: String },
}

/// `shortest / max(taken, shortest)` on success, 0 otherwise.
pub fn compute_spl(success: bool, shortest: f64, taken: f64) -> Result<f64, EvalError> {
    if !(shortest > 0.0) {
        return Err(EvalError::NonPositiveShortest(shortest));
    }
    Ok(if success { shortest / taken.max(shortest) } else { 0.0 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub episode_id: u64,
    pub success: bool,
    pub steps: u32,
    pub taken: f64,
    pub shortest: f64,
    pub collisions: u32,
    pub termination: Termination,
    pub final_distance: f64,
    pub spl: f64,
}

/// Poses visited (start included) and the context path, if one was planned.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub poses: Vec<Pose>,
    pub planned: Option<Vec<Point>>,
}

/// Something that picks actions.
pub enum Agent<'a> {
    /// Deterministic (mean) actions of a trained policy.
    Learned(&'a Policy),
    Beeline,
    WaypointFollower,
    Random,
}

impl Agent<'_> {
    pub fn kind(&self) -> PolicyKind {
        match self {
            Agent::Learned(p) => p.kind(),
            Agent::WaypointFollower => PolicyKind::Waypoint,
            Agent::Beeline | Agent::Random => PolicyKind::NoContext,
        }
    }

    pub fn label(&self) -> String {
        match self {
            Agent::Learned(p) => format!("learned-{}", p.kind()),
            Agent::Beeline => "beeline".into(),
            Agent::WaypointFollower => "waypoint-follower".into(),
            Agent::Random => "random".into(),
        }
    }

    /// Environment settings the agent needs: a learned policy fixes the ray
    /// count and raster geometry.
    pub fn env_config(&self, base: &EnvConfig) -> EnvConfig {
        let mut cfg = base.clone();
        if let Agent::Learned(p) = self {
            cfg.sensor.rays = p.config.rays;
            cfg.context = p.config.context.clone();
        }
        cfg
    }
}

/// Runs one episode to termination. `seed` drives noise and any randomness
/// of the agent.
pub fn run_episode(
    ep: &TrainEpisode,
    agent: &Agent,
    cfg: &EnvConfig,
    seed: u64,
    record: bool,
) -> Result<(EpisodeResult, Option<Trace>), EvalError> {
    let (world, episode) = ep;
    let id = episode.id;
    let sim = |source| EvalError::Sim { id, source };
    let mut env = NavEnv::new(world.clone(), episode.clone(), cfg, agent.kind(), seed).map_err(sim)?;
    let mut trace = record.then(|| Trace { poses: vec![env.pose], planned: env.path().map(|p| p.points.clone()) });
    let mut state = match agent {
        Agent::Learned(p) => Some(RecurrentState::zeros(&p.config)),
        _ => None,
    };
    let mut done = env.check_start();
    while done.is_none() {
        let vel = match agent {
            Agent::Learned(p) => {
                let obs = env.observe().map_err(sim)?;
                let st = state.as_mut().expect("learned agents carry state");
                let out = p.step(&[&obs], &mut [st])?;
                action_to_velocity([out[0].mu[0] as f64, out[0].mu[1] as f64])
            }
            Agent::Beeline => {
                let obs = env.observe().map_err(sim)?;
                scripted_beeline(&obs.goal)
            }
            Agent::WaypointFollower => {
                let (wp, is_final) = env.waypoint().expect("waypoint agents plan a path");
                scripted_waypoint_follower(wp, is_final)
            }
            Agent::Random => {
                let a = [env.rng().random_range(-1.0..=1.0), env.rng().random_range(-1.0..=1.0)];
                action_to_velocity(a)
            }
        };
        done = env.step_velocity(vel).map_err(sim)?.done;
        if let Some(t) = trace.as_mut() {
            t.poses.push(env.pose);
        }
    }
    let termination = done.expect("loop exits on termination");
    let success = termination == Termination::Success;
    let shortest = episode.geodesic;
    let spl = if success && shortest <= 0.0 { 1.0 } else { compute_spl(success, shortest, env.taken)? };
    let result = EpisodeResult {
        episode_id: id,
        success,
        steps: env.steps,
        taken: env.taken,
        shortest,
        collisions: env.collisions,
        termination,
        final_distance: env.distance_to_goal(),
        spl,
    };
    Ok((result, trace))
}

/// Per-seed aggregate, as percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub sr: f64,
    pub spl: f64,
    pub n_episodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub agent: String,
    pub noise: Option<NoiseSpec>,
    pub per_seed: Vec<SeedSummary>,
    pub sr_mean: f64,
    pub sr_std: f64,
    pub spl_mean: f64,
    pub spl_std: f64,
    /// `(seed, result)` in seed-then-episode order.
    pub results: Vec<(u64, EpisodeResult)>,
}

fn mean_std(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count().max(1) as f64;
    let m = xs.clone().sum::<f64>() / n;
    let v = xs.map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// Every episode under every seed, episodes in parallel.
pub fn evaluate(
    episodes: &[TrainEpisode],
    agent: &Agent,
    base: &EnvConfig,
    noise: Option<NoiseSpec>,
    seeds: &[u64],
) -> Result<EvalReport, EvalError> {
    if episodes.is_empty() || seeds.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut cfg = agent.env_config(base);
    cfg.map_noise = noise;
    if noise.is_some_and(|n| n.kind != NoiseKind::WaypointShift) && !agent.kind().has_context() {
        return Err(EvalError::Mismatch(format!("{} has no map context to corrupt", agent.label())));
    }
    let mut per_seed = Vec::with_capacity(seeds.len());
    let mut results = Vec::with_capacity(seeds.len() * episodes.len());
    for &seed in seeds {
        let rs: Vec<EpisodeResult> = episodes
            .par_iter()
            .enumerate()
            .map(|(i, ep)| run_episode(ep, agent, &cfg, derive_seed(seed, i as u64), false).map(|r| r.0))
            .collect::<Result<_, _>>()?;
        let n = rs.len() as f64;
        per_seed.push(SeedSummary {
            seed,
            sr: 100.0 * rs.iter().filter(|r| r.success).count() as f64 / n,
            spl: 100.0 * rs.iter().map(|r| r.spl).sum::<f64>() / n,
            n_episodes: rs.len(),
        });
        results.extend(rs.into_iter().map(|r| (seed, r)));
    }
    let (sr_mean, sr_std) = mean_std(per_seed.iter().map(|s| s.sr));
    let (spl_mean, spl_std) = mean_std(per_seed.iter().map(|s| s.spl));
    Ok(EvalReport { agent: agent.label(), noise, per_seed, sr_mean, sr_std, spl_mean, spl_std, results })
}

/// One report per noise level (`None` is the clean row).
pub fn noise_sweep(
    episodes: &[TrainEpisode],
    agent: &Agent,
    base: &EnvConfig,
    levels: &[Option<NoiseSpec>],
    seeds: &[u64],
) -> Result<Vec<EvalReport>, EvalError> {
    levels.iter().map(|&n| evaluate(episodes, agent, base, n, seeds)).collect()
}

pub const REPORT_CSV_HEADER: &str = "noise_type,noise_level,seed,SR,SPL,n_episodes";

fn noise_columns(noise: Option<NoiseSpec>) -> (&'static str, String) {
    match noise {
        None => ("none", "0".into()),
        Some(n) => match n.kind {
            NoiseKind::Shift => ("shift", format!("{}", round6(n.magnitude * 100.0))),
            NoiseKind::Cutout => ("cutout", format!("{}", round6(n.magnitude * 100.0))),
            NoiseKind::Blank => ("blank", "100".into()),
            NoiseKind::WaypointShift => ("waypoint-shift", format!("{}", round6(n.magnitude))),
        },
    }
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

/// Rows per (report, seed). Map noise levels are percent; waypoint shift is meters.
pub fn reports_csv(reports: &[EvalReport]) -> String {
    let mut s = String::from(REPORT_CSV_HEADER);
    s.push('\n');
    for r in reports {
        let (ty, level) = noise_columns(r.noise);
        for p in &r.per_seed {
            s.push_str(&format!("{ty},{level},{},{:.2},{:.2},{}\n", p.seed, p.sr, p.spl, p.n_episodes));
        }
    }
    s
}

/// Parses `kind:l1,l2,...` with map levels in percent and waypoint levels in meters.
pub fn parse_noise_levels(spec: &str, seed: u64) -> Result<Vec<Option<NoiseSpec>>, String> {
    let (kind, levels) = spec.split_once(':').ok_or_else(|| format!("noise spec {spec:?} needs the form kind:levels"))?;
    let kind = match kind {
        "shift" => NoiseKind::Shift,
        "cutout" => NoiseKind::Cutout,
        "blank" => NoiseKind::Blank,
        "waypoint" | "waypoint-shift" => NoiseKind::WaypointShift,
        other => return Err(format!("unknown noise kind {other:?}")),
    };
    levels
        .split(',')
        .map(|l| {
            let v: f64 = l.trim().parse().map_err(|_| format!("bad noise level {l:?}"))?;
            if !(v >= 0.0) {
                return Err(format!("noise level {v} must be non-negative"));
            }
            let mag = if kind == NoiseKind::WaypointShift { v } else { v / 100.0 };
            Ok(Some(NoiseSpec::new(kind, mag, seed)))
        })
        .collect()
}

const TRACE_COLOR: Rgb<u8> = Rgb([30, 90, 220]);
const PLAN_COLOR: Rgb<u8> = Rgb([20, 170, 60]);
const START_COLOR: Rgb<u8> = Rgb([240, 160, 0]);
const GOAL_COLOR: Rgb<u8> = Rgb([220, 30, 30]);

/// World raster with the planned path, the driven trajectory and start/goal markers.
pub fn render_trajectory_image(
    world: &OccupancyGrid,
    trace: &Trace,
    goal: Option<Point>,
    scale: u32,
) -> RgbImage {
    let scale = scale.max(1);
    let gray = grid_to_pixels(world);
    let (w, h) = (gray.width() * scale, gray.height() * scale);
    let mut img = RgbImage::from_fn(w, h, |x, y| {
        let v = gray.get_pixel(x / scale, y / scale).0[0];
        Rgb([v, v, v])
    });
    let to_px = |p: Point| -> (i64, i64) {
        let o = world.origin();
        let fx = (p.x - o.x) / world.resolution() * scale as f64;
        let fy = (p.y - o.y) / world.resolution() * scale as f64;
        (fx.floor() as i64, h as i64 - 1 - fy.floor() as i64)
    };
    let put = |img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>| {
        if x >= 0 && y >= 0 && (x as u32) < w && (y as u32) < h {
            img.put_pixel(x as u32, y as u32, c);
        }
    };
    let polyline = |img: &mut RgbImage, pts: &[Point], c: Rgb<u8>| {
        for s in pts.windows(2) {
            let (a, b) = (to_px(s[0]), to_px(s[1]));
            let n = (b.0 - a.0).abs().max((b.1 - a.1).abs()).max(1);
            for i in 0..=n {
                let t = i as f64 / n as f64;
                let x = a.0 as f64 + t * (b.0 - a.0) as f64;
                let y = a.1 as f64 + t * (b.1 - a.1) as f64;
                put(img, x.round() as i64, y.round() as i64, c);
            }
        }
    };
    if let Some(plan) = &trace.planned {
        polyline(&mut img, plan, PLAN_COLOR);
    }
    let driven: Vec<Point> = trace.poses.iter().map(Pose::position).collect();
    polyline(&mut img, &driven, TRACE_COLOR);
    let r = (2 * scale) as i64;
    let disk = |img: &mut RgbImage, p: Point, c: Rgb<u8>| {
        let (cx, cy) = to_px(p);
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy <= r * r {
                    put(img, cx + dx, cy + dy, c);
                }
            }
        }
    };
    if let Some(p) = driven.first() {
        disk(&mut img, *p, START_COLOR);
    }
    if let Some(g) = goal {
        disk(&mut img, g, GOAL_COLOR);
    }
    img
}

/// Writes [`render_trajectory_image`] as a PNG.
pub fn render_trajectory(
    world: &OccupancyGrid,
    trace: &Trace,
    goal: Option<Point>,
    scale: u32,
    out: &Path,
) -> Result<(), EvalError> {
    render_trajectory_image(world, trace, goal, scale)
        .save_with_format(out, image::ImageFormat::Png)
        .map_err(|e| EvalError::Render { path: out.display().to_string(), msg: e.to_string() })
}

/// Velocity the scripted follower would command right now; exposed for replay tooling.
pub fn follower_command(env: &NavEnv) -> Option<VelocityAction> {
    env.waypoint().map(|(wp, fin)| scripted_waypoint_follower(wp, fin))
}
