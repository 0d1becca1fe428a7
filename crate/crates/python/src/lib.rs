//! Python bindings: maps, planners, kinematics, sensing, context rasters,
//! noise models, metrics, policies, training and evaluation.

use cn::context::{build_context_map, corrupt_map, ContextConfig, NoiseKind, NoiseSpec, RotationCenter};
use cn::episodes::load_dataset;
use cn::eval::{compute_spl, evaluate, Agent};
use cn::kinematics::{raycast_depth, step_kinematic, CollisionMap, Pose, SensorConfig, VelocityAction, CONTROL_DT};
use cn::planners::{astar_path, dijkstra_field, rrt_star, validate_path, Path, RrtParams};
use cn::policy::{Policy, PolicyConfig, PolicyKind};
use cn::sim::{compute_reward, load_worlds, EnvConfig, RewardConfig};
use cn::training::{compute_gae, load_policy, save_policy, train, TrainConfig, TrainEpisode};
use cn::world::{generate_map, inflate_obstacles, load_map, save_map, OccupancyGrid, WorldKind, WorldSpec, ROBOT_RADIUS};
use cn::Point;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use std::sync::Arc;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn bad<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn pt(p: (f64, f64)) -> Point {
    Point::new(p.0, p.1)
}

/// Binary occupancy grid (1 free, 0 obstacle), row 0 at the bottom.
#[pyclass(name = "Grid", module = "contextnav", skip_from_py_object)]
#[derive(Clone)]
struct PyGrid {
    inner: OccupancyGrid,
}

#[pymethods]
impl PyGrid {
    #[staticmethod]
    #[pyo3(signature = (kind, width_m, height_m, seed, gap_width_m=None, gap_offset_m=None, wall_thickness_m=None, resolution=0.1))]
    #[allow(clippy::too_many_arguments)]
    fn generate(
        kind: &str,
        width_m: f64,
        height_m: f64,
        seed: u64,
        gap_width_m: Option<f64>,
        gap_offset_m: Option<f64>,
        wall_thickness_m: Option<f64>,
        resolution: f64,
    ) -> PyResult<Self> {
        let kind: WorldKind = kind.parse().map_err(bad)?;
        let mut spec = WorldSpec::new(kind, width_m, height_m, seed);
        spec.resolution = resolution;
        spec.gap_offset_m = gap_offset_m;
        if let Some(g) = gap_width_m {
            spec.gap_width_m = g;
        }
        if let Some(w) = wall_thickness_m {
            spec.wall_thickness_m = w;
        }
        Ok(Self { inner: generate_map(&spec).map_err(bad)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: load_map(std::path::Path::new(path)).map_err(err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_map(&self.inner, std::path::Path::new(path)).map_err(err)
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn resolution(&self) -> f64 {
        self.inner.resolution()
    }

    fn is_free(&self, x: f64, y: f64) -> bool {
        self.inner.is_free_at(Point::new(x, y))
    }

    fn free_count(&self) -> usize {
        self.inner.free_count()
    }

    /// Rows bottom-up, each a list of 0/1 cells.
    fn rows(&self) -> Vec<Vec<u8>> {
        self.inner.cells().chunks(self.inner.width()).map(|r| r.to_vec()).collect()
    }

    #[pyo3(signature = (radius=ROBOT_RADIUS))]
    fn inflate(&self, radius: f64) -> Self {
        Self { inner: inflate_obstacles(&self.inner, radius) }
    }

    /// Corrupted copy: kind is shift, cutout or blank.
    fn corrupt(&self, kind: &str, magnitude: f64, seed: u64) -> PyResult<Self> {
        let kind = match kind {
            "shift" => NoiseKind::Shift,
            "cutout" => NoiseKind::Cutout,
            "blank" => NoiseKind::Blank,
            other => return Err(bad(format!("unknown map noise {other:?}"))),
        };
        Ok(Self { inner: corrupt_map(&self.inner, &NoiseSpec::new(kind, magnitude, seed)).map_err(bad)? })
    }

    fn __repr__(&self) -> String {
        format!("Grid({}x{} @ {} m)", self.inner.width(), self.inner.height(), self.inner.resolution())
    }
}

fn points(p: &Path) -> Vec<(f64, f64)> {
    p.points.iter().map(|q| (q.x, q.y)).collect()
}

/// A* on `grid` (inflate it first for a disk robot); returns (points, length).
#[pyfunction]
fn plan_astar(grid: &PyGrid, start: (f64, f64), goal: (f64, f64)) -> PyResult<(Vec<(f64, f64)>, f64)> {
    let p = astar_path(&grid.inner, pt(start), pt(goal)).map_err(err)?;
    Ok((points(&p), p.length))
}

#[pyfunction]
#[pyo3(signature = (grid, start, goal, seed=0, iterations=5000))]
fn plan_rrt_star(
    grid: &PyGrid,
    start: (f64, f64),
    goal: (f64, f64),
    seed: u64,
    iterations: usize,
) -> PyResult<(Vec<(f64, f64)>, f64)> {
    let params = RrtParams { max_iterations: iterations, seed, ..RrtParams::default() };
    let p = rrt_star(&grid.inner, pt(start), pt(goal), &params).map_err(err)?;
    Ok((points(&p), p.length))
}

#[pyfunction]
fn path_is_valid(grid: &PyGrid, pts: Vec<(f64, f64)>) -> bool {
    validate_path(&grid.inner, &Path::new(pts.into_iter().map(pt).collect())).valid
}

/// Geodesic distance from `point` to `goal` on `grid`.
#[pyfunction]
fn geodesic(grid: &PyGrid, point: (f64, f64), goal: (f64, f64)) -> PyResult<f64> {
    Ok(dijkstra_field(&grid.inner, pt(goal)).map_err(err)?.at_point(pt(point)))
}

/// One kinematic step of a disk robot on the true (non-inflated) `grid`.
/// Returns ((x, y, heading), collided).
#[pyfunction]
fn step(grid: &PyGrid, pose: (f64, f64, f64), linear: f64, angular: f64) -> PyResult<((f64, f64, f64), bool)> {
    let map = CollisionMap::for_robot(&grid.inner);
    let (p, hit) =
        step_kinematic(&map, Pose::new(pose.0, pose.1, pose.2), VelocityAction::new(linear, angular), CONTROL_DT)
            .map_err(err)?;
    Ok(((p.x, p.y, p.heading), hit))
}

/// Normalized depth rays in [0, 1].
#[pyfunction]
#[pyo3(signature = (grid, pose, rays=128))]
fn raycast(grid: &PyGrid, pose: (f64, f64, f64), rays: usize) -> Vec<f64> {
    let cfg = SensorConfig { rays, ..SensorConfig::default() };
    raycast_depth(&grid.inner, Pose::new(pose.0, pose.1, pose.2), &cfg).rays
}

/// Egocentric 2×N×N context raster as nested lists `[channel][row][col]`.
#[pyfunction]
#[pyo3(signature = (grid, pose, goal, size=100, agent_centered=false))]
fn context_map(
    grid: &PyGrid,
    pose: (f64, f64, f64),
    goal: (f64, f64),
    size: usize,
    agent_centered: bool,
) -> PyResult<Vec<Vec<Vec<f32>>>> {
    let cfg = ContextConfig {
        size,
        center: if agent_centered { RotationCenter::Agent } else { RotationCenter::RasterCenter },
        ..ContextConfig::default()
    };
    let obs = build_context_map(&grid.inner, &Pose::new(pose.0, pose.1, pose.2), pt(goal), &cfg).map_err(bad)?;
    Ok((0..2).map(|c| obs.channel(c).chunks(size).map(|r| r.to_vec()).collect()).collect())
}

#[pyfunction]
fn reward(prev_geo: f64, cur_geo: f64, linear: f64, angular: f64, collided: bool, success: bool) -> f64 {
    compute_reward(prev_geo, cur_geo, VelocityAction::new(linear, angular), collided, success, &RewardConfig::default())
}

#[pyfunction]
fn spl(success: bool, shortest: f64, taken: f64) -> PyResult<f64> {
    compute_spl(success, shortest, taken).map_err(bad)
}

/// GAE for a single environment; returns (advantages, returns).
#[pyfunction]
fn gae(
    rewards: Vec<f32>,
    values: Vec<f32>,
    dones: Vec<bool>,
    last_value: f32,
    gamma: f64,
    lam: f64,
) -> PyResult<(Vec<f32>, Vec<f32>)> {
    if rewards.len() != values.len() || rewards.len() != dones.len() {
        return Err(bad("rewards, values and dones must have equal length"));
    }
    Ok(compute_gae(&rewards, &values, &dones, &[last_value], gamma, lam))
}

/// Recurrent attention policy.
#[pyclass(name = "Policy", module = "contextnav")]
struct PyPolicy {
    inner: Policy,
}

#[pymethods]
impl PyPolicy {
    #[new]
    #[pyo3(signature = (kind, preset="desk", seed=0))]
    fn new(kind: &str, preset: &str, seed: u64) -> PyResult<Self> {
        let kind: PolicyKind = kind.parse().map_err(bad)?;
        let cfg = match preset {
            "desk" => PolicyConfig::desk(kind),
            "paper" => PolicyConfig::paper(kind),
            "tiny" => PolicyConfig::tiny(kind),
            other => return Err(bad(format!("unknown preset {other:?}"))),
        };
        Ok(Self { inner: Policy::new(cfg, seed).map_err(err)? })
    }

    #[staticmethod]
    fn load(run_dir: &str) -> PyResult<Self> {
        Ok(Self { inner: load_policy(std::path::Path::new(run_dir), None).map_err(err)? })
    }

    fn save(&self, run_dir: &str) -> PyResult<()> {
        save_policy(&self.inner, std::path::Path::new(run_dir)).map_err(err)
    }

    #[getter]
    fn kind(&self) -> String {
        self.inner.kind().to_string()
    }

    fn num_params(&self) -> usize {
        self.inner.params.scalar_count()
    }

    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner.config).map_err(err)
    }
}

fn dataset_episodes(path: &str) -> PyResult<Vec<TrainEpisode>> {
    let p = std::path::Path::new(path);
    let ds = load_dataset(p).map_err(err)?;
    let worlds = load_worlds(&ds, p.parent().unwrap_or(std::path::Path::new("."))).map_err(err)?;
    Ok(worlds.into_iter().zip(ds.episodes).collect())
}

/// Trains on an episode file; returns the policy and per-update metrics.
#[pyfunction]
#[pyo3(signature = (kind, episodes, steps, seed, preset="desk", out=None))]
fn train_policy<'py>(
    py: Python<'py>,
    kind: &str,
    episodes: &str,
    steps: u64,
    seed: u64,
    preset: &str,
    out: Option<&str>,
) -> PyResult<(PyPolicy, Vec<Bound<'py, PyDict>>)> {
    let base = PyPolicy::new(kind, preset, seed)?;
    let mut cfg = TrainConfig::new(base.inner.config.clone(), seed);
    cfg.ppo.total_steps = steps;
    let eps: Arc<[TrainEpisode]> = dataset_episodes(episodes)?.into();
    let outcome = py
        .detach(|| train(&cfg, eps, out.map(std::path::Path::new), |_, _| std::ops::ControlFlow::Continue(())))
        .map_err(err)?;
    let rows = outcome
        .metrics
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("step", r.step)?;
            d.set_item("success_rate", r.success_rate)?;
            d.set_item("mean_return", r.mean_return)?;
            d.set_item("policy_loss", r.update.policy_loss)?;
            d.set_item("value_loss", r.update.value_loss)?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    Ok((PyPolicy { inner: outcome.policy }, rows))
}

/// Evaluates an agent ("learned" needs `policy`) on an episode file.
/// Returns a dict with SR and SPL means (percent) and per-seed values.
#[pyfunction]
#[pyo3(signature = (episodes, agent="learned", policy=None, seeds=vec![0, 1, 2], noise=None, magnitude=0.0))]
fn evaluate_agent<'py>(
    py: Python<'py>,
    episodes: &str,
    agent: &str,
    policy: Option<&PyPolicy>,
    seeds: Vec<u64>,
    noise: Option<&str>,
    magnitude: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let a = match (agent, policy) {
        ("learned", Some(p)) => Agent::Learned(&p.inner),
        ("learned", None) => return Err(bad("a learned agent needs a policy")),
        ("beeline", _) => Agent::Beeline,
        ("waypoint-follower", _) => Agent::WaypointFollower,
        ("random", _) => Agent::Random,
        (other, _) => return Err(bad(format!("unknown agent {other:?}"))),
    };
    let noise = match noise {
        None => None,
        Some(k) => {
            let kind = match k {
                "shift" => NoiseKind::Shift,
                "cutout" => NoiseKind::Cutout,
                "blank" => NoiseKind::Blank,
                "waypoint" | "waypoint-shift" => NoiseKind::WaypointShift,
                other => return Err(bad(format!("unknown noise {other:?}"))),
            };
            Some(NoiseSpec::new(kind, magnitude, 0))
        }
    };
    let eps = dataset_episodes(episodes)?;
    let report = py.detach(|| evaluate(&eps, &a, &EnvConfig::default(), noise, &seeds)).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("agent", &report.agent)?;
    d.set_item("sr", report.sr_mean)?;
    d.set_item("spl", report.spl_mean)?;
    d.set_item("sr_per_seed", report.per_seed.iter().map(|s| s.sr).collect::<Vec<_>>())?;
    d.set_item("spl_per_seed", report.per_seed.iter().map(|s| s.spl).collect::<Vec<_>>())?;
    Ok(d)
}

#[pymodule]
fn contextnav(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGrid>()?;
    m.add_class::<PyPolicy>()?;
    m.add_function(wrap_pyfunction!(plan_astar, m)?)?;
    m.add_function(wrap_pyfunction!(plan_rrt_star, m)?)?;
    m.add_function(wrap_pyfunction!(path_is_valid, m)?)?;
    m.add_function(wrap_pyfunction!(geodesic, m)?)?;
    m.add_function(wrap_pyfunction!(step, m)?)?;
    m.add_function(wrap_pyfunction!(raycast, m)?)?;
    m.add_function(wrap_pyfunction!(context_map, m)?)?;
    m.add_function(wrap_pyfunction!(reward, m)?)?;
    m.add_function(wrap_pyfunction!(spl, m)?)?;
    m.add_function(wrap_pyfunction!(gae, m)?)?;
    m.add_function(wrap_pyfunction!(train_policy, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_agent, m)?)?;
    m.add("ROBOT_RADIUS", ROBOT_RADIUS)?;
    Ok(())
}
