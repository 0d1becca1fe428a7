//! Resolved settings of each subcommand. Precedence: flags, then the
//! `--config` JSON file, then built-in defaults.

use crate::{
    default_train_config, single_noise, usage, AgentArgs, EvalArgs, GenEpisodesArgs, GenMapsArgs, PlanArgs,
    RenderArgs, SweepArgs, TrainArgs, UsageError,
};
use anyhow::Context as _;
use contextnav::context::NoiseSpec;
use contextnav::eval::parse_noise_levels;
use contextnav::policy::PolicyKind;
use contextnav::sim::EnvConfig;
use contextnav::training::TrainConfig;
use contextnav::world::{WorldKind, WorldSpec};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::fs;
use std::path::{Path, PathBuf};

fn abs(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn read_config(path: Option<&PathBuf>) -> anyhow::Result<Value> {
    match path {
        None => Ok(Value::Object(Default::default())),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| UsageError(format!("config {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| UsageError(format!("config {}: {e}", p.display())).into())
        }
    }
}

fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

fn layered<T: Serialize + DeserializeOwned>(defaults: &T, file: &Value) -> anyhow::Result<T> {
    let mut v = serde_json::to_value(defaults)?;
    merge(&mut v, file);
    serde_json::from_value(v).map_err(|e| UsageError(format!("config: {e}")).into())
}

fn lookup<'a>(v: &'a Value, path: &[&str]) -> Option<&'a Value> {
    path.iter().try_fold(v, |v, k| v.get(k))
}

fn parse_seeds(s: &str) -> anyhow::Result<Vec<u64>> {
    s.split(',')
        .map(|x| x.trim().parse::<u64>().map_err(|_| UsageError(format!("bad seed {x:?}")).into()))
        .collect()
}

fn parse_xy(s: &str) -> anyhow::Result<[f64; 2]> {
    let v: Vec<f64> = s.split(',').map(|x| x.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|_| {
        UsageError(format!("expected x,y but got {s:?}"))
    })?;
    match v.as_slice() {
        [x, y] => Ok([*x, *y]),
        _ => crate::usage(format!("expected x,y but got {s:?}")),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenMapsSettings {
    pub kind: WorldKind,
    pub count: usize,
    pub seed: u64,
    pub width_m: f64,
    pub height_m: f64,
    pub resolution: f64,
    pub gap_width_m: Option<f64>,
    pub gap_offset_m: Option<f64>,
    pub obstacle_density: Option<f64>,
    pub wall_thickness_m: Option<f64>,
    pub format: String,
    pub out: PathBuf,
}

impl GenMapsSettings {
    pub fn spec(&self, seed: u64) -> WorldSpec {
        let mut s = WorldSpec::new(self.kind, self.width_m, self.height_m, seed);
        s.resolution = self.resolution;
        if let Some(g) = self.gap_width_m {
            s.gap_width_m = g;
        }
        s.gap_offset_m = self.gap_offset_m;
        if let Some(d) = self.obstacle_density {
            s.obstacle_density = d;
        }
        if let Some(w) = self.wall_thickness_m {
            s.wall_thickness_m = w;
        }
        s
    }
}

pub fn gen_maps(a: GenMapsArgs) -> anyhow::Result<GenMapsSettings> {
    if a.format != "pgm" && a.format != "png" {
        return usage(format!("format must be pgm or png, got {:?}", a.format));
    }
    Ok(GenMapsSettings {
        kind: a.kind,
        count: a.count,
        seed: a.seed,
        width_m: a.width,
        height_m: a.height,
        resolution: a.resolution,
        gap_width_m: a.gap_width,
        gap_offset_m: a.gap_offset,
        obstacle_density: a.density,
        wall_thickness_m: a.wall,
        format: a.format,
        out: abs(&a.out),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenEpisodesSettings {
    pub maps: Vec<PathBuf>,
    pub count: usize,
    pub seed: u64,
    pub min_geodesic: f64,
    pub max_geodesic: f64,
    pub min_ratio: Option<f64>,
    pub split: String,
    pub out: PathBuf,
}

impl GenEpisodesSettings {
    /// Map images named directly or found in the given directories, sorted.
    pub fn map_files(&self) -> anyhow::Result<Vec<PathBuf>> {
        let mut files = Vec::new();
        for m in &self.maps {
            if m.is_dir() {
                let mut found: Vec<PathBuf> = fs::read_dir(m)
                    .with_context(|| format!("listing {}", m.display()))?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("pgm" | "png")))
                    .collect();
                found.sort();
                files.extend(found);
            } else if m.exists() {
                files.push(m.clone());
            } else {
                return usage(format!("map {} does not exist", m.display()));
            }
        }
        if files.is_empty() {
            return usage("no map files found");
        }
        Ok(files)
    }
}

pub fn gen_episodes(a: GenEpisodesArgs) -> anyhow::Result<GenEpisodesSettings> {
    let d = contextnav::episodes::EpisodeConstraints::default();
    Ok(GenEpisodesSettings {
        maps: a.maps.iter().map(|p| abs(p)).collect(),
        count: a.count,
        seed: a.seed,
        min_geodesic: a.min_geodesic.unwrap_or(d.min_geodesic),
        max_geodesic: a.max_geodesic.unwrap_or(d.max_geodesic),
        min_ratio: a.min_ratio,
        split: a.split,
        out: abs(&a.out),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub preset: String,
    pub train: TrainConfig,
    pub episodes: PathBuf,
    pub maps: Option<PathBuf>,
    pub out: PathBuf,
}

pub fn train(a: TrainArgs) -> anyhow::Result<TrainSettings> {
    let file = read_config(a.config.as_ref())?;
    let kind = match (a.policy, lookup(&file, &["train", "policy", "kind"])) {
        (Some(k), _) => k,
        (None, Some(v)) => serde_json::from_value(v.clone()).map_err(|e| UsageError(format!("config: {e}")))?,
        (None, None) => return usage("--policy is required"),
    };
    let preset = match (&a.preset, lookup(&file, &["preset"]).and_then(Value::as_str)) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => p.to_string(),
        (None, None) => "desk".to_string(),
    };
    let Some(seed) = a.seed.or_else(|| lookup(&file, &["train", "seed"]).and_then(Value::as_u64)) else {
        return usage("--seed is required");
    };
    let defaults = TrainSettings {
        preset: preset.clone(),
        train: default_train_config(kind, &preset, seed)?,
        episodes: PathBuf::new(),
        maps: None,
        out: PathBuf::new(),
    };
    let mut s: TrainSettings = layered(&defaults, &file)?;
    s.preset = preset;
    s.train.seed = seed;
    s.train.policy.kind = kind;
    let ppo = &mut s.train.ppo;
    ppo.total_steps = a.steps.unwrap_or(ppo.total_steps);
    ppo.lr = a.lr.unwrap_or(ppo.lr);
    ppo.num_envs = a.envs.unwrap_or(ppo.num_envs);
    ppo.rollout_len = a.rollout.unwrap_or(ppo.rollout_len);
    ppo.epochs = a.epochs.unwrap_or(ppo.epochs);
    s.train.checkpoint_every = a.checkpoint_every.unwrap_or(s.train.checkpoint_every);
    if let Some(n) = &a.noise {
        s.train.env.map_noise = single_noise(n, seed)?;
    }
    if s.train.env.map_noise.is_some() && !kind.has_context() {
        return usage(format!("--noise needs a context policy, not {kind}"));
    }
    if let Some(e) = a.episodes {
        s.episodes = e;
    }
    if let Some(o) = a.out {
        s.out = o;
    }
    if a.maps.is_some() {
        s.maps = a.maps;
    }
    if s.episodes.as_os_str().is_empty() || s.out.as_os_str().is_empty() {
        return usage("--episodes and --out are required");
    }
    s.episodes = abs(&s.episodes);
    s.out = abs(&s.out);
    s.maps = s.maps.as_deref().map(abs);
    s.train.ppo.validate().map_err(|e| UsageError(e.to_string()))?;
    s.train.policy.validate().map_err(|e| UsageError(e.to_string()))?;
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub agent: String,
    pub run: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub policy: Option<PolicyKind>,
}

impl Default for AgentSpec {
    fn default() -> Self {
        Self { agent: "learned".into(), run: None, checkpoint: None, policy: None }
    }
}

fn apply_agent(spec: &mut AgentSpec, a: &AgentArgs) {
    if let Some(x) = &a.agent {
        spec.agent = x.clone();
    }
    if let Some(r) = &a.run {
        spec.run = Some(abs(r));
    }
    if let Some(c) = &a.checkpoint {
        spec.checkpoint = Some(abs(c));
    }
    if a.policy.is_some() {
        spec.policy = a.policy;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub agent: AgentSpec,
    pub episodes: PathBuf,
    pub maps: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub levels: Vec<Option<NoiseSpec>>,
    pub env: EnvConfig,
    pub sweep: bool,
    pub out: PathBuf,
}

struct Common<'a> {
    agent: &'a AgentArgs,
    episodes: &'a Option<PathBuf>,
    maps: &'a Option<PathBuf>,
    seeds: &'a Option<String>,
    out: &'a Option<PathBuf>,
    config: &'a Option<PathBuf>,
}

fn eval_common(c: Common, sweep: bool) -> anyhow::Result<EvalSettings> {
    let file = read_config(c.config.as_ref())?;
    let defaults = EvalSettings {
        agent: AgentSpec::default(),
        episodes: PathBuf::new(),
        maps: None,
        seeds: Vec::new(),
        levels: vec![None],
        env: EnvConfig::default(),
        sweep,
        out: PathBuf::new(),
    };
    let mut s: EvalSettings = layered(&defaults, &file)?;
    s.sweep = sweep;
    apply_agent(&mut s.agent, c.agent);
    if let Some(e) = c.episodes {
        s.episodes = e.clone();
    }
    if c.maps.is_some() {
        s.maps = c.maps.clone();
    }
    if let Some(x) = c.seeds {
        s.seeds = parse_seeds(x)?;
    }
    if let Some(o) = c.out {
        s.out = o.clone();
    }
    if s.seeds.is_empty() {
        return usage("--seeds is required");
    }
    if s.episodes.as_os_str().is_empty() || s.out.as_os_str().is_empty() {
        return usage("--episodes and --out are required");
    }
    s.episodes = abs(&s.episodes);
    s.out = abs(&s.out);
    s.maps = s.maps.as_deref().map(abs);
    Ok(s)
}

pub fn eval(a: EvalArgs) -> anyhow::Result<EvalSettings> {
    let mut s = eval_common(
        Common {
            agent: &a.agent,
            episodes: &a.episodes,
            maps: &a.maps,
            seeds: &a.seeds,
            out: &a.out,
            config: &a.config,
        },
        false,
    )?;
    if let Some(n) = &a.noise {
        s.levels = vec![single_noise(n, 0)?];
    }
    if s.levels.len() != 1 {
        return usage("eval takes exactly one noise setting; use sweep for several");
    }
    Ok(s)
}

pub fn sweep(a: SweepArgs) -> anyhow::Result<EvalSettings> {
    let mut s = eval_common(
        Common {
            agent: &a.agent,
            episodes: &a.episodes,
            maps: &a.maps,
            seeds: &a.seeds,
            out: &a.out,
            config: &a.config,
        },
        true,
    )?;
    if !a.noise.is_empty() {
        let mut levels = Vec::new();
        if a.include_clean {
            levels.push(None);
        }
        for n in &a.noise {
            levels.extend(parse_noise_levels(n, 0).map_err(UsageError)?);
        }
        s.levels = levels;
    }
    if s.levels.is_empty() {
        return usage("sweep needs at least one --noise level");
    }
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSettings {
    pub algo: String,
    pub map: Option<PathBuf>,
    pub fixture: Option<String>,
    pub start: Option<[f64; 2]>,
    pub goal: Option<[f64; 2]>,
    pub seed: u64,
    pub iterations: usize,
    pub validate_on: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

pub fn plan(a: PlanArgs) -> anyhow::Result<PlanSettings> {
    Ok(PlanSettings {
        algo: a.algo,
        map: a.map.as_deref().map(abs),
        fixture: a.fixture,
        start: a.start.as_deref().map(parse_xy).transpose()?,
        goal: a.goal.as_deref().map(parse_xy).transpose()?,
        seed: a.seed,
        iterations: a.iterations,
        validate_on: a.validate_on.as_deref().map(abs),
        out: a.out.as_deref().map(abs),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderSettings {
    pub map: Option<PathBuf>,
    pub fixture: Option<String>,
    pub episodes: Option<PathBuf>,
    pub maps: Option<PathBuf>,
    pub episode_id: Option<u64>,
    pub agent: AgentSpec,
    pub env: EnvConfig,
    pub seed: u64,
    pub scale: u32,
    pub out: PathBuf,
}

pub fn render(a: RenderArgs) -> anyhow::Result<RenderSettings> {
    let mut agent = AgentSpec { agent: "waypoint-follower".into(), ..AgentSpec::default() };
    apply_agent(&mut agent, &a.agent);
    if a.agent.agent.is_none() && agent.run.is_some() {
        agent.agent = "learned".into();
    }
    Ok(RenderSettings {
        map: a.map.as_deref().map(abs),
        fixture: a.fixture,
        episodes: a.episodes.as_deref().map(abs),
        maps: a.maps.as_deref().map(abs),
        episode_id: a.episode_id,
        agent,
        env: EnvConfig::default(),
        seed: a.seed,
        scale: a.scale,
        out: abs(&a.out),
    })
}
