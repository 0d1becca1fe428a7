//! Episode definition, sampling, step budgets and dataset files.

use crate::geometry::{normalize_angle, Point};
use crate::kinematics::{CollisionMap, Pose};
use crate::planners::dijkstra_field;
use crate::world::{generate_map, load_map, MapIoError, OccupancyGrid, WorldError, WorldSpec};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const DATASET_VERSION: u32 = 1;
pub const STEPS_PER_BUDGET_UNIT: u32 = 500;
pub const BUDGET_UNIT_M: f64 = 50.0;

/// Where an episode's world comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MapRef {
    /// Map image (PGM/PNG + sidecar), relative to the dataset file's directory.
    File { path: PathBuf },
    Generated { spec: WorldSpec },
}

impl MapRef {
    pub fn resolve(&self, base_dir: &Path) -> Result<OccupancyGrid, EpisodeIoError> {
        match self {
            MapRef::File { path } => {
                let full = base_dir.join(path);
                if !full.exists() {
                    return Err(EpisodeIoError::MissingMap(full));
                }
                Ok(load_map(&full)?)
            }
            MapRef::Generated { spec } => Ok(generate_map(spec)?),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Episode {
    pub id: u64,
    /// Overrides the dataset-level map for this episode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map_ref: Option<MapRef>,
    pub start: Pose,
    pub goal: Point,
    /// Geodesic start-to-goal distance on the inflated grid, meters.
    pub geodesic: f64,
    pub euclidean: f64,
    pub budget: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeDataset {
    pub version: u32,
    pub map_ref: MapRef,
    pub split: Split,
    /// Snapshot of the generation settings.
    #[serde(default)]
    pub config: serde_json::Value,
    pub episodes: Vec<Episode>,
}

impl EpisodeDataset {
    pub fn map_for<'a>(&'a self, episode: &'a Episode) -> &'a MapRef {
        episode.map_ref.as_ref().unwrap_or(&self.map_ref)
    }
}

/// Step budget: 500 steps per started 50 m of geodesic distance.
pub fn step_budget(geodesic: f64) -> u32 {
    assert!(geodesic.is_finite(), "step budget needs a finite geodesic distance");
    let units = (geodesic / BUDGET_UNIT_M).ceil().max(1.0);
    STEPS_PER_BUDGET_UNIT * units as u32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeConstraints {
    pub min_geodesic: f64,
    pub max_geodesic: f64,
    /// Minimum geodesic/euclidean ratio ("complex path"); off when `None`.
    pub min_ratio: Option<f64>,
    pub max_attempts: usize,
}

impl Default for EpisodeConstraints {
    fn default() -> Self {
        Self { min_geodesic: 1.5, max_geodesic: 30.0, min_ratio: None, max_attempts: 1000 }
    }
}

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error("world has no free cells after inflation")]
    NoFreeSpace,
    #[error(
        "no episode satisfied the constraints after {attempts} samples \
         (too short: {too_short}, too long: {too_long}, unreachable: {unreachable}, ratio: {ratio})"
    )]
    Unsatisfiable { attempts: usize, too_short: usize, too_long: usize, unreachable: usize, ratio: usize },
}

/// Samples one episode on `world`. Start and goal are inflated-free cell
/// centers; the geodesic comes from the goal's distance field.
pub fn generate_episode<R: Rng + ?Sized>(
    collision: &CollisionMap,
    rng: &mut R,
    constraints: &EpisodeConstraints,
    id: u64,
) -> Result<Episode, EpisodeError> {
    let grid = collision.grid();
    let free: Vec<(usize, usize)> = (0..grid.height())
        .flat_map(|r| (0..grid.width()).map(move |c| (c, r)))
        .filter(|&(c, r)| grid.is_free(c, r))
        .collect();
    if free.is_empty() {
        return Err(EpisodeError::NoFreeSpace);
    }
    const STARTS_PER_GOAL: usize = 20;
    let (mut too_short, mut too_long, mut unreachable, mut ratio_fail) = (0, 0, 0, 0);
    let mut attempts = 0;
    while attempts < constraints.max_attempts {
        let (gc, gr) = free[rng.random_range(0..free.len())];
        let goal = grid.cell_center(gc, gr);
        let field = dijkstra_field(grid, goal).expect("goal sampled from free cells");
        for _ in 0..STARTS_PER_GOAL {
            if attempts >= constraints.max_attempts {
                break;
            }
            attempts += 1;
            let (sc, sr) = free[rng.random_range(0..free.len())];
            let geodesic = field.at_cell(sc, sr);
            let start = grid.cell_center(sc, sr);
            let euclidean = start.distance(&goal);
            if geodesic.is_infinite() {
                unreachable += 1;
                continue;
            }
            if geodesic < constraints.min_geodesic {
                too_short += 1;
                continue;
            }
            if geodesic > constraints.max_geodesic {
                too_long += 1;
                continue;
            }
            if let Some(min_ratio) = constraints.min_ratio {
                if geodesic / euclidean < min_ratio {
                    ratio_fail += 1;
                    continue;
                }
            }
            let heading = normalize_angle(rng.random_range(-PI..PI));
            return Ok(Episode {
                id,
                map_ref: None,
                start: Pose::new(start.x, start.y, heading),
                goal,
                geodesic,
                euclidean,
                budget: step_budget(geodesic),
            });
        }
    }
    Err(EpisodeError::Unsatisfiable { attempts, too_short, too_long, unreachable, ratio: ratio_fail })
}

/// Independent, reproducible RNG stream `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generates `count` episodes spread round-robin over `worlds`; episode `i`
/// draws from its own stream so the result does not depend on thread count.
pub fn generate_dataset(
    worlds: &[(MapRef, CollisionMap)],
    count: usize,
    constraints: &EpisodeConstraints,
    seed: u64,
    split: Split,
) -> Result<EpisodeDataset, EpisodeError> {
    assert!(!worlds.is_empty(), "need at least one world");
    let episodes = (0..count)
        .into_par_iter()
        .map(|i| {
            let (map_ref, collision) = &worlds[i % worlds.len()];
            let mut rng = stream_rng(seed, i as u64);
            let mut ep = generate_episode(collision, &mut rng, constraints, i as u64)?;
            if worlds.len() > 1 {
                ep.map_ref = Some(map_ref.clone());
            }
            Ok(ep)
        })
        .collect::<Result<Vec<_>, EpisodeError>>()?;
    Ok(EpisodeDataset {
        version: DATASET_VERSION,
        map_ref: worlds[0].0.clone(),
        split,
        config: serde_json::json!({ "seed": seed, "count": count, "constraints": constraints }),
        episodes,
    })
}

#[derive(Debug, Error)]
pub enum EpisodeIoError {
    #[error("cannot access {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed episode file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("schema violation at `{field}`: {reason}")]
    Schema { field: String, reason: String },
    #[error("dataset references missing map {0}")]
    MissingMap(PathBuf),
    #[error(transparent)]
    Map(#[from] MapIoError),
    #[error(transparent)]
    World(#[from] WorldError),
}

fn schema(field: String, reason: impl Into<String>) -> EpisodeIoError {
    EpisodeIoError::Schema { field, reason: reason.into() }
}

/// Checks dataset invariants; `base_dir` is used to confirm referenced map files exist.
pub fn validate_dataset(ds: &EpisodeDataset, base_dir: &Path) -> Result<(), EpisodeIoError> {
    if ds.version != DATASET_VERSION {
        return Err(schema("version".into(), format!("unsupported version {}", ds.version)));
    }
    let mut ids = HashSet::new();
    let check_map = |r: &MapRef| match r {
        MapRef::File { path } if !base_dir.join(path).exists() => Err(EpisodeIoError::MissingMap(base_dir.join(path))),
        _ => Ok(()),
    };
    check_map(&ds.map_ref)?;
    for (i, ep) in ds.episodes.iter().enumerate() {
        let field = |name: &str| format!("episodes[{i}].{name}");
        if !ids.insert(ep.id) {
            return Err(schema(field("id"), format!("duplicate id {}", ep.id)));
        }
        if !(ep.geodesic.is_finite() && ep.geodesic >= 0.0) {
            return Err(schema(field("geodesic"), format!("{} is not a finite non-negative distance", ep.geodesic)));
        }
        if !(ep.euclidean.is_finite() && ep.euclidean >= 0.0) {
            return Err(schema(field("euclidean"), format!("{} is not a finite non-negative distance", ep.euclidean)));
        }
        if ep.geodesic < ep.euclidean - 1e-6 {
            return Err(schema(field("geodesic"), "shorter than the euclidean distance"));
        }
        if ep.budget == 0 {
            return Err(schema(field("budget"), "must be positive"));
        }
        for (name, v) in [("start.x", ep.start.x), ("start.y", ep.start.y), ("start.heading", ep.start.heading)] {
            if !v.is_finite() {
                return Err(schema(field(name), "not finite"));
            }
        }
        if let Some(r) = &ep.map_ref {
            check_map(r)?;
        }
    }
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<EpisodeDataset, EpisodeIoError> {
    let text = fs::read_to_string(path).map_err(|source| EpisodeIoError::Io { path: path.to_path_buf(), source })?;
    let ds: EpisodeDataset = serde_json::from_str(&text)?;
    validate_dataset(&ds, path.parent().unwrap_or(Path::new(".")))?;
    Ok(ds)
}

pub fn save_dataset(ds: &EpisodeDataset, path: &Path) -> Result<(), EpisodeIoError> {
    let text = serde_json::to_string_pretty(ds)?;
    fs::write(path, text).map_err(|source| EpisodeIoError::Io { path: path.to_path_buf(), source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{WorldKind, WorldSpec};

    fn room(kind: WorldKind, seed: u64) -> (MapRef, CollisionMap) {
        let spec = WorldSpec::new(kind, 12.0, 12.0, seed);
        let grid = generate_map(&spec).unwrap();
        (MapRef::Generated { spec }, CollisionMap::for_robot(&grid))
    }

    #[test]
    fn budget_rule() {
        assert_eq!(step_budget(8.0), 500);
        assert_eq!(step_budget(50.0), 500);
        assert_eq!(step_budget(50.1), 1000);
        assert_eq!(step_budget(120.0), 1500);
        assert_eq!(step_budget(0.0), 500);
    }

    #[test]
    fn open_room_episode_is_nearly_straight() {
        let (_, map) = room(WorldKind::OpenRoom, 0);
        let mut rng = stream_rng(3, 0);
        let ep = generate_episode(&map, &mut rng, &EpisodeConstraints::default(), 0).unwrap();
        assert!(ep.geodesic >= 1.5);
        assert!(ep.geodesic / ep.euclidean < 1.1);
        assert!(!map.collides(ep.start.position()) && !map.collides(ep.goal));
    }

    #[test]
    fn maze_ratio_constraint_holds() {
        let (_, map) = room(WorldKind::Maze, 4);
        let c = EpisodeConstraints { min_ratio: Some(1.1), ..Default::default() };
        for s in 0..5 {
            let ep = generate_episode(&map, &mut stream_rng(s, 0), &c, s).unwrap();
            let field = dijkstra_field(map.grid(), ep.goal).unwrap();
            let geo = field.at_point(ep.start.position());
            assert_eq!(geo, ep.geodesic);
            assert!(geo / ep.start.position().distance(&ep.goal) >= 1.1);
        }
    }

    #[test]
    fn same_seed_same_episode() {
        let (_, map) = room(WorldKind::RoomsAndCorridors, 1);
        let c = EpisodeConstraints::default();
        let a = generate_episode(&map, &mut stream_rng(11, 2), &c, 0).unwrap();
        let b = generate_episode(&map, &mut stream_rng(11, 2), &c, 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn impossible_constraints_report_diagnostics() {
        let (_, map) = room(WorldKind::OpenRoom, 0);
        let c = EpisodeConstraints { min_geodesic: 100.0, max_geodesic: 200.0, ..Default::default() };
        match generate_episode(&map, &mut stream_rng(0, 0), &c, 0) {
            Err(EpisodeError::Unsatisfiable { attempts, too_short, .. }) => {
                assert_eq!(attempts, 1000);
                assert_eq!(too_short, 1000);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn dataset_roundtrip_and_schema_errors() {
        let worlds = vec![room(WorldKind::OpenRoom, 0)];
        let ds = generate_dataset(&worlds, 100, &EpisodeConstraints::default(), 5, Split::Val).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("episodes.json");
        save_dataset(&ds, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), ds);

        let mut bad = ds.clone();
        bad.episodes[3].geodesic = -1.0;
        save_dataset(&bad, &path).unwrap();
        match load_dataset(&path) {
            Err(EpisodeIoError::Schema { field, .. }) => assert_eq!(field, "episodes[3].geodesic"),
            other => panic!("{other:?}"),
        }

        let mut missing = ds.clone();
        missing.map_ref = MapRef::File { path: "nowhere.pgm".into() };
        save_dataset(&missing, &path).unwrap();
        assert!(matches!(load_dataset(&path), Err(EpisodeIoError::MissingMap(_))));

        let mut value = serde_json::to_value(&ds).unwrap();
        value["episodes"][0]["extra"] = serde_json::json!(1);
        fs::write(&path, value.to_string()).unwrap();
        assert!(matches!(load_dataset(&path), Err(EpisodeIoError::Parse(_))));
    }

    #[test]
    fn dataset_generation_is_reproducible() {
        let worlds = vec![room(WorldKind::ScatterObstacles, 2), room(WorldKind::OpenRoom, 3)];
        let a = generate_dataset(&worlds, 20, &EpisodeConstraints::default(), 9, Split::Train).unwrap();
        let b = generate_dataset(&worlds, 20, &EpisodeConstraints::default(), 9, Split::Train).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }
}
