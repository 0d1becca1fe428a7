//! `contextnav` command line: map and episode generation, training,
//! evaluation, noise sweeps, planning, rendering and manifest replay.

mod manifest;
mod settings;

use anyhow::{anyhow, bail, Context as _};
use clap::{Args, Parser, Subcommand};
use contextnav::context::{NoiseKind, NoiseSpec};
use contextnav::episodes::{generate_dataset, load_dataset, save_dataset, EpisodeConstraints, MapRef, Split};
use contextnav::eval::{
    evaluate, noise_sweep, parse_noise_levels, render_trajectory, reports_csv, run_episode, Agent, EvalReport, Trace,
};
use contextnav::fixtures;
use contextnav::kinematics::CollisionMap;
use contextnav::planners::{astar_path, rrt_star, validate_path, RrtParams};
use contextnav::policy::{Policy, PolicyConfig, PolicyKind};
use contextnav::sim::{derive_seed, load_worlds};
use contextnav::training::{load_policy, train, TrainConfig, TrainEpisode};
use contextnav::world::{generate_map, inflate_obstacles, load_map, save_map, WorldKind, ROBOT_RADIUS};
use contextnav::Point;
pub use manifest::{sha256_file, FileHash, RunManifest};
use serde::{Deserialize, Serialize};
pub use settings::{
    AgentSpec, EvalSettings, GenEpisodesSettings, GenMapsSettings, PlanSettings, RenderSettings, TrainSettings,
};
use std::ffi::OsString;
use std::fs;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::sync::Arc;

/// Bad invocation: unknown flag, missing input, contradictory configuration.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage<T>(msg: impl Into<String>) -> anyhow::Result<T> {
    Err(UsageError(msg.into()).into())
}

#[derive(Parser, Debug)]
#[command(name = "contextnav", version, about = "Context-guided point-goal navigation laboratory")]
pub struct Cli {
    /// Worker threads for parallel sections.
    #[arg(long, global = true, env = "CONTEXTNAV_WORKERS")]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate procedural maps (PGM/PNG + JSON sidecar).
    GenMaps(GenMapsArgs),
    /// Sample start/goal episodes on a set of maps.
    GenEpisodes(GenEpisodesArgs),
    /// Train a policy with PPO.
    Train(TrainArgs),
    /// Evaluate an agent under one noise setting.
    Eval(EvalArgs),
    /// Evaluate an agent across noise levels.
    Sweep(SweepArgs),
    /// Plan a path on a map and optionally validate it on another.
    Plan(PlanArgs),
    /// Render a map, optionally with an executed episode.
    Render(RenderArgs),
    /// Re-run a command from its manifest.
    Replay(ReplayArgs),
}

#[derive(Args, Debug)]
pub struct GenMapsArgs {
    #[arg(long)]
    kind: WorldKind,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10.0)]
    width: f64,
    #[arg(long, default_value_t = 10.0)]
    height: f64,
    #[arg(long, default_value_t = 0.1)]
    resolution: f64,
    #[arg(long)]
    gap_width: Option<f64>,
    #[arg(long)]
    gap_offset: Option<f64>,
    #[arg(long)]
    density: Option<f64>,
    #[arg(long)]
    wall: Option<f64>,
    /// pgm or png
    #[arg(long, default_value = "pgm")]
    format: String,
}

#[derive(Args, Debug)]
pub struct GenEpisodesArgs {
    /// Map files or directories of maps.
    #[arg(long, num_args = 1.., required = true)]
    maps: Vec<PathBuf>,
    #[arg(long)]
    count: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    min_geodesic: Option<f64>,
    #[arg(long)]
    max_geodesic: Option<f64>,
    #[arg(long)]
    min_ratio: Option<f64>,
    /// train or val
    #[arg(long, default_value = "train")]
    split: String,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    policy: Option<PolicyKind>,
    /// Network size preset: desk, paper or tiny.
    #[arg(long)]
    preset: Option<String>,
    /// Directory that map references in the episode file are relative to.
    #[arg(long)]
    maps: Option<PathBuf>,
    #[arg(long)]
    episodes: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Train with noisy maps, e.g. `cutout:25`.
    #[arg(long)]
    noise: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON file with (partial) settings; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    envs: Option<usize>,
    #[arg(long)]
    rollout: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
}

#[derive(Args, Debug, Clone)]
pub struct AgentArgs {
    /// learned, beeline, waypoint-follower or random.
    #[arg(long)]
    agent: Option<String>,
    /// Training run directory holding policy.json and policy.ckpt.
    #[arg(long)]
    run: Option<PathBuf>,
    /// Parameter file overriding the run's final checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Expected policy kind; must match the run.
    #[arg(long)]
    policy: Option<PolicyKind>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    agent: AgentArgs,
    #[arg(long)]
    episodes: Option<PathBuf>,
    #[arg(long)]
    maps: Option<PathBuf>,
    /// Comma-separated evaluation seeds.
    #[arg(long)]
    seeds: Option<String>,
    /// Single noise setting, e.g. `cutout:100` or `waypoint:0.5`.
    #[arg(long)]
    noise: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    agent: AgentArgs,
    #[arg(long)]
    episodes: Option<PathBuf>,
    #[arg(long)]
    maps: Option<PathBuf>,
    #[arg(long)]
    seeds: Option<String>,
    /// `kind:levels`, repeatable: `shift:5,10,20`, `cutout:10,25,50,100`, `waypoint:0.25,0.5,1`.
    #[arg(long, num_args = 1..)]
    noise: Vec<String>,
    /// Also emit the clean (no-noise) row.
    #[arg(long)]
    include_clean: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PlanArgs {
    /// astar or rrtstar
    #[arg(long, default_value = "astar")]
    algo: String,
    #[arg(long, required_unless_present = "fixture")]
    map: Option<PathBuf>,
    /// Built-in scenario instead of --map/--start/--goal: `outdated-map`.
    #[arg(long)]
    fixture: Option<String>,
    /// `x,y` in meters.
    #[arg(long)]
    start: Option<String>,
    #[arg(long)]
    goal: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5000)]
    iterations: usize,
    /// Ground-truth map to validate the planned path against.
    #[arg(long)]
    validate_on: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[arg(long, required_unless_present_any = ["fixture", "episodes"])]
    map: Option<PathBuf>,
    /// Built-in scenario: `outdated-map`.
    #[arg(long)]
    fixture: Option<String>,
    #[arg(long)]
    episodes: Option<PathBuf>,
    #[arg(long)]
    maps: Option<PathBuf>,
    #[arg(long)]
    episode_id: Option<u64>,
    #[command(flatten)]
    agent: AgentArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    scale: u32,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReplayArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Output location; defaults to a `replay` sibling of the original output.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fail unless every output hash matches the manifest.
    #[arg(long)]
    verify: bool,
}

/// Parses and runs; returns the process exit status.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    if let Some(w) = cli.workers {
        // Later calls in the same process keep the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(w.max(1)).build_global();
    }
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                2
            } else {
                1
            }
        }
    }
}

fn dispatch(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::GenMaps(a) => run_gen_maps(settings::gen_maps(a)?),
        Command::GenEpisodes(a) => run_gen_episodes(settings::gen_episodes(a)?),
        Command::Train(a) => run_train(settings::train(a)?),
        Command::Eval(a) => run_eval(settings::eval(a)?),
        Command::Sweep(a) => run_eval(settings::sweep(a)?),
        Command::Plan(a) => run_plan(settings::plan(a)?),
        Command::Render(a) => run_render(settings::render(a)?),
        Command::Replay(a) => replay(a),
    }
}

fn mkdir(p: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn write(p: &Path, data: impl AsRef<[u8]>) -> anyhow::Result<()> {
    fs::write(p, data).with_context(|| format!("writing {}", p.display()))
}

pub fn run_gen_maps(s: GenMapsSettings) -> anyhow::Result<()> {
    let started = manifest::now();
    mkdir(&s.out)?;
    let mut outputs = Vec::new();
    for i in 0..s.count {
        let spec = s.spec(derive_seed(s.seed, i as u64));
        let grid = generate_map(&spec).map_err(|e| UsageError(format!("map {i}: {e}")))?;
        let path = s.out.join(format!("{}_{i:03}.{}", s.kind, s.format));
        save_map(&grid, &path)?;
        outputs.push(path.clone());
        outputs.push(contextnav::world::sidecar_path(&path));
    }
    RunManifest::build("gen-maps", &s, vec![s.seed], &[], &outputs, started)?.write(&s.out.join(manifest::FILE))?;
    println!("wrote {} maps to {}", s.count, s.out.display());
    Ok(())
}

pub fn run_gen_episodes(s: GenEpisodesSettings) -> anyhow::Result<()> {
    let started = manifest::now();
    let files = s.map_files()?;
    let base = s.out.parent().map(Path::to_path_buf).unwrap_or_default();
    if !base.as_os_str().is_empty() {
        mkdir(&base)?;
    }
    let base_abs = base.canonicalize().unwrap_or(base.clone());
    let worlds = files
        .iter()
        .map(|f| {
            let grid = load_map(f)?;
            let rel = f.strip_prefix(&base_abs).map(Path::to_path_buf).unwrap_or_else(|_| f.clone());
            Ok((MapRef::File { path: rel }, CollisionMap::for_robot(&grid)))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let split = match s.split.as_str() {
        "train" => Split::Train,
        "val" => Split::Val,
        other => return usage(format!("unknown split {other:?}")),
    };
    let cons = EpisodeConstraints {
        min_geodesic: s.min_geodesic,
        max_geodesic: s.max_geodesic,
        min_ratio: s.min_ratio,
        ..EpisodeConstraints::default()
    };
    let ds = generate_dataset(&worlds, s.count, &cons, s.seed, split)?;
    save_dataset(&ds, &s.out)?;
    let m = manifest::sidecar(&s.out);
    RunManifest::build("gen-episodes", &s, vec![s.seed], &files, &[s.out.clone()], started)?.write(&m)?;
    println!("wrote {} episodes to {}", ds.episodes.len(), s.out.display());
    Ok(())
}

/// Episodes of a dataset file with their worlds; also returns every input file.
pub fn load_episodes(path: &Path, maps_dir: Option<&Path>) -> anyhow::Result<(Vec<TrainEpisode>, Vec<PathBuf>)> {
    if !path.exists() {
        return usage(format!("episode file {} does not exist", path.display()));
    }
    let ds = load_dataset(path)?;
    let base = maps_dir.map(Path::to_path_buf).unwrap_or_else(|| path.parent().unwrap_or(Path::new(".")).to_path_buf());
    let worlds = load_worlds(&ds, &base)?;
    let mut inputs = vec![path.to_path_buf()];
    for ep in &ds.episodes {
        if let MapRef::File { path } = ds.map_for(ep) {
            let p = base.join(path);
            if !inputs.contains(&p) {
                inputs.push(contextnav::world::sidecar_path(&p));
                inputs.push(p);
            }
        }
    }
    Ok((worlds.into_iter().zip(ds.episodes).collect(), inputs))
}

pub fn run_train(s: TrainSettings) -> anyhow::Result<()> {
    let started = manifest::now();
    let (episodes, inputs) = load_episodes(&s.episodes, s.maps.as_deref())?;
    mkdir(&s.out)?;
    let episodes: Arc<[TrainEpisode]> = episodes.into();
    let total = s.train.ppo.total_steps;
    let t0 = std::time::Instant::now();
    let outcome = train(&s.train, episodes, Some(&s.out), |row, _| {
        eprintln!(
            "step {:>9}/{total}  sr {:.2}  return {:7.2}  kl {:.4}  {:.0}s",
            row.step,
            row.success_rate,
            row.mean_return,
            row.update.approx_kl,
            t0.elapsed().as_secs_f64()
        );
        ControlFlow::Continue(())
    })?;
    let outputs: Vec<PathBuf> = ["config.json", "metrics.csv", "policy.json", "policy.ckpt"]
        .iter()
        .map(|f| s.out.join(f))
        .collect();
    RunManifest::build("train", &s, vec![s.train.seed], &inputs, &outputs, started)?.write(&s.out.join(manifest::FILE))?;
    println!("trained {} steps into {}", outcome.env_steps, s.out.display());
    Ok(())
}

/// The agent an [`AgentSpec`] describes, plus its input files.
pub fn load_agent(spec: &AgentSpec) -> anyhow::Result<(Option<Policy>, Vec<PathBuf>)> {
    match spec.agent.as_str() {
        "learned" => {
            let Some(run) = &spec.run else { return usage("a learned agent needs --run") };
            let policy = load_policy(run, spec.checkpoint.as_deref())?;
            if let Some(k) = spec.policy {
                if k != policy.kind() {
                    return usage(format!("--policy {k} contradicts the {} policy in {}", policy.kind(), run.display()));
                }
            }
            let ckpt = spec.checkpoint.clone().unwrap_or_else(|| run.join("policy.ckpt"));
            Ok((Some(policy), vec![run.join("policy.json"), ckpt]))
        }
        "beeline" | "waypoint-follower" | "random" => Ok((None, Vec::new())),
        other => usage(format!("unknown agent {other:?}")),
    }
}

fn agent_of<'a>(name: &str, policy: Option<&'a Policy>) -> Agent<'a> {
    match (name, policy) {
        (_, Some(p)) => Agent::Learned(p),
        ("beeline", _) => Agent::Beeline,
        ("waypoint-follower", _) => Agent::WaypointFollower,
        _ => Agent::Random,
    }
}

pub const EVAL_CSV: &str = "report.csv";
pub const SWEEP_CSV: &str = "sweep.csv";

/// Shared by `eval` (one level) and `sweep`.
pub fn run_eval(s: EvalSettings) -> anyhow::Result<()> {
    let started = manifest::now();
    let (policy, mut inputs) = load_agent(&s.agent)?;
    let agent = agent_of(&s.agent.agent, policy.as_ref());
    for n in s.levels.iter().flatten() {
        if n.kind != NoiseKind::WaypointShift && !agent.kind().has_context() {
            return usage(format!("{:?} noise needs a context policy, got {}", n.kind, agent.label()));
        }
        if n.kind == NoiseKind::WaypointShift && agent.kind() != PolicyKind::Waypoint {
            return usage(format!("waypoint noise needs a waypoint agent, got {}", agent.label()));
        }
    }
    let (episodes, ep_inputs) = load_episodes(&s.episodes, s.maps.as_deref())?;
    inputs.extend(ep_inputs);
    mkdir(&s.out)?;
    let reports: Vec<EvalReport> = noise_sweep(&episodes, &agent, &s.env, &s.levels, &s.seeds)?;
    let (csv_name, json_name, cmd) =
        if s.sweep { (SWEEP_CSV, "sweep.json", "sweep") } else { (EVAL_CSV, "report.json", "eval") };
    let csv = s.out.join(csv_name);
    write(&csv, reports_csv(&reports))?;
    let json = s.out.join(json_name);
    write(&json, serde_json::to_string_pretty(&reports)?)?;
    RunManifest::build(cmd, &s, s.seeds.clone(), &inputs, &[csv.clone(), json], started)?
        .write(&s.out.join(manifest::FILE))?;
    for r in &reports {
        let level = r.noise.map(|n| format!("{:?} {}", n.kind, n.magnitude)).unwrap_or_else(|| "clean".into());
        println!("{:<24} SR {:6.2} ± {:5.2}  SPL {:6.2} ± {:5.2}", level, r.sr_mean, r.sr_std, r.spl_mean, r.spl_std);
    }
    println!("wrote {}", csv.display());
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct PlanOutput {
    algo: String,
    points: Vec<[f64; 2]>,
    length: f64,
    valid_on_map: bool,
    valid_on_truth: Option<bool>,
    first_violation: Option<[f64; 2]>,
}

pub fn run_plan(s: PlanSettings) -> anyhow::Result<()> {
    let started = manifest::now();
    let (map, truth, start, goal, inputs) = match &s.fixture {
        Some(f) if f == "outdated-map" => {
            let fx = fixtures::outdated_map();
            (fx.planning_map, Some(fx.truth), fx.start.position(), fx.goal, vec![])
        }
        Some(other) => return usage(format!("unknown fixture {other:?}")),
        None => {
            let map_path = s.map.as_ref().expect("clap enforces --map without --fixture");
            let (Some(st), Some(g)) = (s.start, s.goal) else { return usage("--start and --goal are required") };
            let mut inputs = vec![map_path.clone()];
            let truth = match &s.validate_on {
                Some(p) => {
                    inputs.push(p.clone());
                    Some(load_map(p)?)
                }
                None => None,
            };
            (load_map(map_path)?, truth, Point::new(st[0], st[1]), Point::new(g[0], g[1]), inputs)
        }
    };
    let inflated = inflate_obstacles(&map, ROBOT_RADIUS);
    let path = match s.algo.as_str() {
        "astar" => astar_path(&inflated, start, goal)?,
        "rrtstar" => rrt_star(
            &inflated,
            start,
            goal,
            &RrtParams { max_iterations: s.iterations, seed: s.seed, ..RrtParams::default() },
        )?,
        other => return usage(format!("unknown planner {other:?}")),
    };
    let on_map = validate_path(&inflated, &path);
    let on_truth = truth.as_ref().map(|t| validate_path(&inflate_obstacles(t, ROBOT_RADIUS), &path));
    let out = PlanOutput {
        algo: s.algo.clone(),
        points: path.points.iter().map(|p| [p.x, p.y]).collect(),
        length: path.length,
        valid_on_map: on_map.valid,
        valid_on_truth: on_truth.as_ref().map(|v| v.valid),
        first_violation: on_truth.as_ref().and_then(|v| v.first_violation).map(|p| [p.x, p.y]),
    };
    println!("path length {:.3} m, {} points", path.length, path.points.len());
    println!("planning map: {}", if on_map.valid { "valid" } else { "invalid" });
    if let Some(v) = &on_truth {
        println!("ground truth: {}", if v.valid { "valid" } else { "invalid" });
    }
    if let Some(dir) = &s.out {
        mkdir(dir)?;
        let p = dir.join("path.json");
        write(&p, serde_json::to_string_pretty(&out)?)?;
        RunManifest::build("plan", &s, vec![s.seed], &inputs, &[p], started)?.write(&dir.join(manifest::FILE))?;
    }
    Ok(())
}

pub fn run_render(s: RenderSettings) -> anyhow::Result<()> {
    let started = manifest::now();
    let (policy, mut inputs) = match s.episodes.is_some() || s.fixture.is_some() {
        true => load_agent(&s.agent)?,
        false => (None, Vec::new()),
    };
    let agent = agent_of(&s.agent.agent, policy.as_ref());
    let (world_grid, trace, goal) = if let Some(f) = &s.fixture {
        if f != "outdated-map" {
            return usage(format!("unknown fixture {f:?}"));
        }
        let ep = fixtures::outdated_map().episode();
        let (_, trace) = run_episode(&ep, &agent, &s.env, s.seed, true)?;
        (ep.0.truth.clone(), trace.unwrap_or_default(), Some(ep.1.goal))
    } else if let Some(eps) = &s.episodes {
        let (episodes, ep_inputs) = load_episodes(eps, s.maps.as_deref())?;
        inputs.extend(ep_inputs);
        let id = s.episode_id.unwrap_or(0);
        let Some(ep) = episodes.iter().find(|e| e.1.id == id) else {
            return usage(format!("episode {id} not in {}", eps.display()));
        };
        let (_, trace) = run_episode(ep, &agent, &agent.env_config(&s.env), s.seed, true)?;
        (ep.0.truth.clone(), trace.unwrap_or_default(), Some(ep.1.goal))
    } else {
        let m = s.map.as_ref().expect("clap enforces a map source");
        inputs.push(m.clone());
        (load_map(m)?, Trace::default(), None)
    };
    if let Some(parent) = s.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        mkdir(parent)?;
    }
    render_trajectory(&world_grid, &trace, goal, s.scale, &s.out)?;
    RunManifest::build("render", &s, vec![s.seed], &inputs, &[s.out.clone()], started)?
        .write(&manifest::sidecar(&s.out))?;
    println!("wrote {}", s.out.display());
    Ok(())
}

fn replay(a: ReplayArgs) -> anyhow::Result<()> {
    let text = fs::read_to_string(&a.manifest).map_err(|e| UsageError(format!("{}: {e}", a.manifest.display())))?;
    let m: RunManifest = serde_json::from_str(&text).map_err(|e| UsageError(format!("bad manifest: {e}")))?;
    for f in &m.inputs {
        let now = sha256_file(Path::new(&f.path)).with_context(|| format!("hashing input {}", f.path))?;
        if now != f.sha256 {
            bail!("input {} changed since the run (hash mismatch)", f.path);
        }
    }
    let cfg = m.config.clone();
    let outputs = match m.subcommand.as_str() {
        "eval" | "sweep" => {
            let mut s: EvalSettings = serde_json::from_value(cfg)?;
            let old = s.out.clone();
            s.out = a.out.clone().unwrap_or_else(|| sibling(&old, "replay"));
            let dir = s.out.clone();
            run_eval(s)?;
            relocate(&m.outputs, &old, &dir)
        }
        "gen-maps" => {
            let mut s: GenMapsSettings = serde_json::from_value(cfg)?;
            let old = s.out.clone();
            s.out = a.out.clone().unwrap_or_else(|| sibling(&old, "replay"));
            let dir = s.out.clone();
            run_gen_maps(s)?;
            relocate(&m.outputs, &old, &dir)
        }
        "gen-episodes" => {
            let mut s: GenEpisodesSettings = serde_json::from_value(cfg)?;
            let old = s.out.clone();
            s.out = a.out.clone().unwrap_or_else(|| old.with_extension("replay.json"));
            let new = s.out.clone();
            run_gen_episodes(s)?;
            vec![(m.outputs[0].clone(), new)]
        }
        "train" => {
            let mut s: TrainSettings = serde_json::from_value(cfg)?;
            let old = s.out.clone();
            s.out = a.out.clone().unwrap_or_else(|| sibling(&old, "replay"));
            let dir = s.out.clone();
            run_train(s)?;
            relocate(&m.outputs, &old, &dir)
        }
        "plan" => {
            let mut s: PlanSettings = serde_json::from_value(cfg)?;
            let old = s.out.clone().ok_or_else(|| anyhow!("plan manifest without an output directory"))?;
            s.out = Some(a.out.clone().unwrap_or_else(|| sibling(&old, "replay")));
            let dir = s.out.clone().unwrap();
            run_plan(s)?;
            relocate(&m.outputs, &old, &dir)
        }
        "render" => {
            let mut s: RenderSettings = serde_json::from_value(cfg)?;
            let old = s.out.clone();
            s.out = a.out.clone().unwrap_or_else(|| old.with_extension("replay.png"));
            let new = s.out.clone();
            run_render(s)?;
            vec![(m.outputs[0].clone(), new)]
        }
        other => return usage(format!("cannot replay {other:?}")),
    };
    if a.verify {
        for (orig, new) in &outputs {
            let h = sha256_file(new)?;
            if h != orig.sha256 {
                bail!("output {} differs from {}", new.display(), orig.path);
            }
        }
        println!("replay matches all {} recorded outputs", outputs.len());
    }
    Ok(())
}

fn sibling(dir: &Path, suffix: &str) -> PathBuf {
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    dir.with_file_name(format!("{name}-{suffix}"))
}

fn relocate(outputs: &[FileHash], old: &Path, new: &Path) -> Vec<(FileHash, PathBuf)> {
    outputs
        .iter()
        .map(|f| {
            let p = Path::new(&f.path);
            let rel = p.strip_prefix(old).unwrap_or(p);
            (f.clone(), new.join(rel))
        })
        .collect()
}

/// Resolves a noise argument with exactly one level.
pub fn single_noise(spec: &str, seed: u64) -> anyhow::Result<Option<NoiseSpec>> {
    let levels = parse_noise_levels(spec, seed).map_err(UsageError)?;
    match levels.as_slice() {
        [one] => Ok(*one),
        _ => usage(format!("expected a single noise level, got {spec:?}")),
    }
}

/// Policy config of a preset name.
pub fn preset(name: &str, kind: PolicyKind) -> anyhow::Result<PolicyConfig> {
    match name {
        "desk" => Ok(PolicyConfig::desk(kind)),
        "paper" => Ok(PolicyConfig::paper(kind)),
        "tiny" => Ok(PolicyConfig::tiny(kind)),
        other => usage(format!("unknown preset {other:?}")),
    }
}

/// Built-in training defaults for a policy kind and preset.
pub fn default_train_config(kind: PolicyKind, preset_name: &str, seed: u64) -> anyhow::Result<TrainConfig> {
    Ok(TrainConfig::new(preset(preset_name, kind)?, seed))
}

#[doc(hidden)]
pub fn evaluate_agent(
    episodes: &[TrainEpisode],
    spec: &AgentSpec,
    env: &contextnav::sim::EnvConfig,
    noise: Option<NoiseSpec>,
    seeds: &[u64],
) -> anyhow::Result<EvalReport> {
    let (policy, _) = load_agent(spec)?;
    let agent = agent_of(&spec.agent, policy.as_ref());
    Ok(evaluate(episodes, &agent, env, noise, seeds)?)
}
