//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `cargo test --test acceptance -- 3 7` runs a subset by number.

use contextnav::context::{
    corrupt_map, corrupt_waypoint, encode_goal, ContextObservation, NoiseKind, NoiseSpec, PolarGoal,
};
use contextnav::episodes::{generate_dataset, EpisodeConstraints, EpisodeDataset, MapRef, Split};
use contextnav::eval::{compute_spl, evaluate, run_episode, Agent, EvalReport};
use contextnav::fixtures::outdated_map;
use contextnav::kinematics::{
    cast_ray, raycast_depth, step_kinematic, CollisionMap, DepthScan, Pose, SensorConfig, VelocityAction,
};
use contextnav::nn::{grad_check, scaled_dot_attention, Conv, GruCell, Linear, ParamStore, Tape, Tensor, Var};
use contextnav::planners::{astar_path, dijkstra_field, rrt_star, validate_path, RrtParams};
use contextnav::policy::{ContextInput, ObservationBundle, Policy, PolicyConfig, PolicyKind};
use contextnav::sim::{compute_reward, load_worlds, EnvConfig, RewardConfig};
use contextnav::training::{train, TrainConfig, TrainEpisode};
use contextnav::world::{generate_map, inflate_obstacles, OccupancyGrid, WorldKind, WorldSpec, ROBOT_RADIUS};
use contextnav::Point;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use std::ops::ControlFlow;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Instant;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_time(t0: Instant, limit_s: f64) -> Result<f64, String> {
    let s = t0.elapsed().as_secs_f64();
    ensure(s < limit_s, || format!("took {s:.1}s, limit {limit_s}s"))?;
    Ok(s)
}

// ---------------------------------------------------------------------------
// 1. Planners

/// Label-correcting shortest paths over the 8-connected cell graph.
fn bellman_ford(g: &OccupancyGrid, goal: (usize, usize)) -> Vec<f64> {
    let (w, h) = (g.width(), g.height());
    let res = g.resolution();
    let mut d = vec![f64::INFINITY; w * h];
    d[goal.1 * w + goal.0] = 0.0;
    loop {
        let mut changed = false;
        for r in 0..h {
            for c in 0..w {
                if !g.is_free(c, r) {
                    continue;
                }
                for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        if dr == 0 && dc == 0 {
                            continue;
                        }
                        let (nc, nr) = (c as i64 + dc, r as i64 + dr);
                        if nc < 0 || nr < 0 || nc >= w as i64 || nr >= h as i64 {
                            continue;
                        }
                        let (nc, nr) = (nc as usize, nr as usize);
                        if !g.is_free(nc, nr) {
                            continue;
                        }
                        // Diagonal moves may not cut obstacle corners.
                        if dr != 0 && dc != 0 && !(g.is_free(nc, r) && g.is_free(c, nr)) {
                            continue;
                        }
                        let step = if dr != 0 && dc != 0 { res * 2f64.sqrt() } else { res };
                        let cand = d[nr * w + nc] + step;
                        if cand < d[r * w + c] - 1e-12 {
                            d[r * w + c] = cand;
                            changed = true;
                        }
                    }
                }
            }
        }
        if !changed {
            return d;
        }
    }
}

fn random_inflated_grid(rng: &mut ChaCha8Rng) -> OccupancyGrid {
    let mut g = OccupancyGrid::filled(32, 32, 0.1, Point::new(0.0, 0.0), 1).unwrap();
    for _ in 0..rng.random_range(3..9) {
        let (c, r) = (rng.random_range(0..32), rng.random_range(0..32));
        let (w, h) = (rng.random_range(1..8), rng.random_range(1..8));
        for rr in r..(r + h).min(32) {
            for cc in c..(c + w).min(32) {
                g.set(cc, rr, 0);
            }
        }
    }
    inflate_obstacles(&g, rng.random_range(0.0..0.25))
}

fn c1_planners() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut reachable, mut grids) = (0, 0);
    while grids < 100 {
        let g = random_inflated_grid(&mut rng);
        let free: Vec<(usize, usize)> =
            (0..32).flat_map(|r| (0..32).map(move |c| (c, r))).filter(|&(c, r)| g.is_free(c, r)).collect();
        if free.len() < 2 {
            continue;
        }
        grids += 1;
        let s = free[rng.random_range(0..free.len())];
        let t = free[rng.random_range(0..free.len())];
        let (sp, tp) = (g.cell_center(s.0, s.1), g.cell_center(t.0, t.1));
        let field = dijkstra_field(&g, tp).map_err(|e| e.to_string())?;
        let oracle = bellman_ford(&g, t)[s.1 * 32 + s.0];
        let fd = field.at_point(sp);
        match astar_path(&g, sp, tp) {
            Ok(p) => {
                reachable += 1;
                ensure((p.length - fd).abs() <= 1e-6 && (fd - oracle).abs() <= 1e-6, || {
                    format!("grid {grids}: astar {} dijkstra {fd} oracle {oracle}", p.length)
                })?;
            }
            Err(_) => ensure(fd.is_infinite() && oracle.is_infinite(), || {
                format!("grid {grids}: astar unreachable, dijkstra {fd}, oracle {oracle}")
            })?,
        }
    }
    let s = within_time(t0, 10.0)?;
    Ok(format!("100 grids ({reachable} reachable) agree to 1e-6 in {s:.2}s"))
}

// ---------------------------------------------------------------------------
// 2. Kinematics

fn c2_kinematics() -> Outcome {
    let t0 = Instant::now();
    let open = CollisionMap::for_robot(&OccupancyGrid::filled(200, 200, 0.1, Point::new(-10.0, -10.0), 1).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (x, y, h) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-PI..PI));
        let v = rng.random_range(-0.5..0.5);
        let w = rng.random_range(-0.3..0.3);
        let (p, _) = step_kinematic(&open, Pose::new(x, y, h), VelocityAction::new(v, 0.0), 0.5).unwrap();
        worst = worst.max((p.x - (x + v * 0.5 * h.cos())).abs()).max((p.y - (y + v * 0.5 * h.sin())).abs());
        worst = worst.max((p.heading - h).abs());
        let (q, _) = step_kinematic(&open, Pose::new(x, y, h), VelocityAction::new(0.0, w), 0.5).unwrap();
        let dh = contextnav::normalize_angle(q.heading - (h + 0.5 * w)).abs();
        worst = worst.max((q.x - x).abs()).max((q.y - y).abs()).max(dh);
    }
    ensure(worst <= 1e-9, || format!("closed-form error {worst:e}"))?;

    // A room with a wall; the oracle checks disk-versus-obstacle overlap directly.
    let mut world = OccupancyGrid::filled(60, 60, 0.1, Point::new(0.0, 0.0), 1).unwrap();
    for r in 0..60 {
        for c in 0..60 {
            if r == 0 || c == 0 || r == 59 || c == 59 || (c >= 30 && c < 33 && r > 10) {
                world.set(c, r, 0);
            }
        }
    }
    let obstacles: Vec<Point> = (0..60)
        .flat_map(|r| (0..60).map(move |c| (c, r)))
        .filter(|&(c, r)| !world.is_free(c, r))
        .map(|(c, r)| world.cell_center(c, r))
        .collect();
    let overlaps = |p: Point| -> bool {
        let Some((c, r)) = world.cell_of(p) else { return true };
        let center = world.cell_center(c, r);
        obstacles.iter().any(|o| o.distance(&center) < ROBOT_RADIUS)
    };
    let map = CollisionMap::for_robot(&world);
    let (mut frozen, mut steps) = (0, 0);
    while steps < 1000 {
        // Start near the wall, facing it.
        let p = Point::new(rng.random_range(2.0..2.8), rng.random_range(1.5..5.0));
        if overlaps(p) {
            continue;
        }
        steps += 1;
        let pose = Pose::new(p.x, p.y, rng.random_range(-0.6..0.6));
        let act = VelocityAction::new(rng.random_range(0.0..0.5), rng.random_range(-0.3..0.3));
        let (next, hit) = step_kinematic(&map, pose, act, 0.5).map_err(|e| e.to_string())?;
        let cand = Point::new(p.x + act.linear * 0.5 * pose.heading.cos(), p.y + act.linear * 0.5 * pose.heading.sin());
        let expect_freeze = overlaps(cand);
        ensure(hit == expect_freeze, || format!("collision flag {hit} at {cand:?}, oracle {expect_freeze}"))?;
        if expect_freeze {
            frozen += 1;
            ensure(next.x == pose.x && next.y == pose.y, || format!("position moved on collision at {p:?}"))?;
        } else {
            ensure(next.x == cand.x && next.y == cand.y, || format!("free step did not advance at {p:?}"))?;
        }
    }
    ensure(frozen >= 100, || format!("only {frozen} colliding steps sampled"))?;
    let s = within_time(t0, 5.0)?;
    Ok(format!("closed forms within {worst:.1e}; {frozen}/1000 wall steps froze as predicted; {s:.2}s"))
}

// ---------------------------------------------------------------------------
// 3. Raycasting

fn fine_step_ray(world: &OccupancyGrid, o: Point, angle: f64, max: f64) -> f64 {
    let step = world.resolution() / 1000.0;
    let (dx, dy) = (angle.cos(), angle.sin());
    let mut t = 0.0;
    while t <= max + world.resolution() {
        if !world.is_free_at(Point::new(o.x + t * dx, o.y + t * dy)) {
            return t;
        }
        t += step;
    }
    f64::INFINITY
}

fn c3_raycast() -> Outcome {
    let t0 = Instant::now();
    let world = generate_map(&WorldSpec::new(WorldKind::ScatterObstacles, 12.0, 12.0, 3)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cell = world.resolution();
    let (mut worst, mut saturated, mut rays) = (0.0f64, 0, 0);
    while rays < 1000 {
        let o = Point::new(rng.random_range(0.5..11.5), rng.random_range(0.5..11.5));
        if !world.is_free_at(o) {
            continue;
        }
        rays += 1;
        let a = rng.random_range(-PI..PI);
        let oracle = fine_step_ray(&world, o, a, 3.5);
        let got = cast_ray(&world, o, a, 3.5);
        match got {
            Some(d) => {
                worst = worst.max((d - oracle).abs());
                ensure((d - oracle).abs() <= cell, || format!("ray at {o:?} angle {a}: {d} vs oracle {oracle}"))?;
            }
            None => ensure(oracle >= 3.5 - cell, || format!("ray at {o:?} angle {a}: miss vs oracle {oracle}"))?,
        }
        let scan = raycast_depth(&world, Pose::new(o.x, o.y, a), &SensorConfig { rays: 1, fov: 0.0, max_range: 3.5 });
        if oracle > 3.5 + cell {
            saturated += 1;
            ensure(scan.rays[0] == 1.0, || format!("unsaturated {} beyond range", scan.rays[0]))?;
        }
    }
    let big = OccupancyGrid::filled(200, 200, 0.1, Point::new(-10.0, -10.0), 1).unwrap();
    let scan = raycast_depth(&big, Pose::new(0.0, 0.0, 0.3), &SensorConfig::default());
    ensure(scan.rays.iter().all(|&r| r == 1.0), || "open-space scan not saturated".into())?;
    let s = within_time(t0, 5.0)?;
    Ok(format!("1000 rays within {worst:.3} m of the fine-step oracle, {saturated} saturated at exactly 1.0; {s:.2}s"))
}

// ---------------------------------------------------------------------------
// 4. Reward

fn c4_reward() -> Outcome {
    let cfg = RewardConfig::default();
    ensure(
        (cfg.success_reward, cfg.slack, cfg.backward, cfg.collision) == (10.0, -0.002, -0.3, -0.003),
        || format!("constants {cfg:?}"),
    )?;
    let cases = [
        (compute_reward(3.0, 3.0, VelocityAction::new(0.0, 0.0), false, false, &cfg), -0.002),
        (compute_reward(1.0, 0.7, VelocityAction::new(0.5, 0.0), false, true, &cfg), 10.298),
        (compute_reward(2.0, 2.0, VelocityAction::new(-0.5, 0.0), true, false, &cfg), -0.305),
    ];
    for (i, (got, want)) in cases.iter().enumerate() {
        ensure((got - want).abs() <= 1e-9, || format!("example {}: {got} vs {want}", i + 1))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(2..200);
        let geo: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..30.0)).collect();
        let sum: f64 = geo
            .windows(2)
            .map(|w| compute_reward(w[0], w[1], VelocityAction::new(0.3, 0.0), false, false, &cfg) - cfg.slack)
            .sum();
        worst = worst.max((sum - (geo[0] - geo[n - 1])).abs());
    }
    ensure(worst <= 1e-9, || format!("telescoping error {worst:e}"))?;
    Ok(format!("3 examples exact; telescoping error {worst:.1e} over 100 trajectories"))
}

// ---------------------------------------------------------------------------
// 5. SPL

fn corridor_episodes(kind: WorldKind, worlds: std::ops::Range<u64>, count: usize, seed: u64, cons: &EpisodeConstraints) -> Vec<TrainEpisode> {
    episodes_for(worlds.map(|s| WorldSpec::new(kind, 10.0, 10.0, s)).collect(), count, seed, cons, Split::Val)
}

fn episodes_for(specs: Vec<WorldSpec>, count: usize, seed: u64, cons: &EpisodeConstraints, split: Split) -> Vec<TrainEpisode> {
    let worlds: Vec<(MapRef, CollisionMap)> = specs
        .into_iter()
        .map(|spec| {
            let g = generate_map(&spec).unwrap();
            (MapRef::Generated { spec }, CollisionMap::for_robot(&g))
        })
        .collect();
    let ds: EpisodeDataset = generate_dataset(&worlds, count, cons, seed, split).unwrap();
    let loaded = load_worlds(&ds, Path::new(".")).unwrap();
    loaded.into_iter().zip(ds.episodes).collect()
}

fn check_spl_le_sr(r: &EvalReport) -> Result<(), String> {
    ensure(r.spl_mean <= r.sr_mean + 1e-9, || format!("{}: SPL {} > SR {}", r.agent, r.spl_mean, r.sr_mean))?;
    for s in &r.per_seed {
        ensure(s.spl <= s.sr + 1e-9, || format!("{} seed {}: SPL {} > SR {}", r.agent, s.seed, s.spl, s.sr))?;
    }
    Ok(())
}

fn c5_spl() -> Outcome {
    let cases = [
        (compute_spl(false, 8.0, 10.0), 0.0),
        (compute_spl(true, 8.0, 8.0), 1.0),
        (compute_spl(true, 8.0, 10.0), 0.8),
    ];
    for (i, (got, want)) in cases.iter().enumerate() {
        let got = got.as_ref().map_err(|e| e.to_string())?;
        ensure((got - want).abs() <= 1e-12, || format!("case {}: {got} vs {want}", i + 1))?;
    }
    let eps = corridor_episodes(WorldKind::RoomsAndCorridors, 0..4, 30, 5, &EpisodeConstraints::default());
    let mut n = 0;
    for agent in [Agent::Beeline, Agent::WaypointFollower, Agent::Random] {
        for noise in [None, Some(NoiseSpec::new(NoiseKind::WaypointShift, 0.5, 0))] {
            if noise.is_some() && !matches!(agent, Agent::WaypointFollower) {
                continue;
            }
            let r = evaluate(&eps, &agent, &EnvConfig::default(), noise, &[0, 1]).map_err(|e| e.to_string())?;
            check_spl_le_sr(&r)?;
            n += 1;
        }
    }
    Ok(format!("3 cases exact; SPL <= SR on {n} generated reports"))
}

// ---------------------------------------------------------------------------
// 6. Gradient checks

fn probe(t: &mut Tape, y: Var, seed: u64) -> Var {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let shape = t.shape(y).to_vec();
    let n = shape.iter().product();
    let w = t.input(Tensor::new(&shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap());
    let p = t.mul(y, w);
    t.sum(p)
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    scaled_tensor(shape, seed, 1.0)
}

fn scaled_tensor(shape: &[usize], seed: u64, scale: f32) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| scale * r.random_range(-1.0f32..1.0)).collect()).unwrap()
}

/// Continuous random scans keep ReLU pre-activations off their kinks.
fn random_observations(cfg: &PolicyConfig, n: usize, seed: u64) -> Vec<ObservationBundle> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let size = cfg.context.size;
    (0..n)
        .map(|_| ObservationBundle {
            depth: DepthScan { rays: (0..cfg.rays).map(|_| r.random_range(0.0..1.0)).collect(), fov: 2.0, max_range: 3.5 },
            goal: encode_goal(&Pose::new(0.0, 0.0, r.random_range(-3.0..3.0)), Point::new(r.random_range(-4.0..4.0), 2.0)),
            prev_action: [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)],
            context: ContextInput::Raster(ContextObservation {
                size,
                cell_m: 0.1,
                data: (0..2 * size * size).map(|_| if r.random_bool(0.5) { 1.0 } else { 0.0 }).collect(),
            }),
        })
        .collect()
}

fn c6_gradients() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "l", 6, 4, 1.0, &mut rng);
    let x = random_tensor(&[3, 6], 61);
    let e_lin = grad_check(&mut store, 1e-3, |t| {
        let xv = t.input(x.clone());
        let y = lin.forward(t, xv);
        probe(t, y, 62)
    });

    let mut store = ParamStore::new();
    let c1 = Conv::new1d(&mut store, "c1", 2, 3, 5, 2, 2, &mut rng);
    let c2 = Conv::new2d(&mut store, "c2", 2, 3, 3, 2, 1, &mut rng);
    let (x1, x2) = (random_tensor(&[2, 2, 1, 13], 63), random_tensor(&[2, 2, 6, 5], 64));
    let e_conv = grad_check(&mut store, 1e-3, |t| {
        let a = t.input(x1.clone());
        let a = c1.forward(t, a);
        let b = t.input(x2.clone());
        let b = c2.forward(t, b);
        let (la, lb) = (probe(t, a, 65), probe(t, b, 66));
        t.add(la, lb)
    });

    let mut store = ParamStore::new();
    let gru = GruCell::new(&mut store, "g", 3, 4, &mut rng);
    let (xg, hg) = (random_tensor(&[2, 3], 67), random_tensor(&[2, 4], 68));
    let e_gru = grad_check(&mut store, 1e-3, |t| {
        let xv = t.input(xg.clone());
        let hv = t.input(hg.clone());
        let h1 = gru.forward(t, xv, hv);
        let h2 = gru.forward(t, xv, h1);
        probe(t, h2, 69)
    });

    let mut store = ParamStore::new();
    let q = store.add_uniform("q", &[2, 4], 1.0, &mut rng);
    let k = store.add_uniform("k", &[2, 5, 4], 1.0, &mut rng);
    let v = store.add_uniform("v", &[2, 5, 3], 1.0, &mut rng);
    // f32 rounding dominates the attention difference quotient at 1e-3.
    let e_att = grad_check(&mut store, 5e-3, |t| {
        let (qv, kv, vv) = (t.param(q), t.param(k), t.param(v));
        let (o, _) = scaled_dot_attention(t, qv, kv, vv).unwrap();
        probe(t, o, 70)
    });
    let mut worst_sum = 0.0f64;
    {
        let mut t = Tape::new(&store);
        for seed in 0..50 {
            let qv = t.input(scaled_tensor(&[3, 8], 100 + seed, 4.0));
            let kv = t.input(scaled_tensor(&[3, 7, 8], 200 + seed, 4.0));
            let vv = t.input(random_tensor(&[3, 7, 2], 300 + seed));
            let (_, w) = scaled_dot_attention(&mut t, qv, kv, vv).map_err(|e| e.to_string())?;
            for row in t.value(w).data().chunks(7) {
                worst_sum = worst_sum.max((row.iter().map(|&x| x as f64).sum::<f64>() - 1.0).abs());
            }
        }
    }

    let cfg = PolicyConfig::tiny(PolicyKind::Map);
    let mut policy = Policy::new(cfg.clone(), 71).map_err(|e| e.to_string())?;
    let obs = random_observations(&cfg, 2, 72);
    let frozen = policy.clone();
    let e_policy = grad_check(&mut policy.params, 3e-3, |t| {
        let hd = frozen.config.hidden;
        let mut h_a = t.input(Tensor::zeros(&[1, hd]));
        let mut h_b = Some(t.input(Tensor::zeros(&[1, hd])));
        let mut terms = Vec::new();
        for (i, o) in obs.iter().enumerate() {
            let out = frozen.forward(t, &frozen.batch(&[o]).unwrap(), h_a, h_b).unwrap();
            h_a = out.h_a;
            h_b = out.h_b;
            for (j, v) in [out.mu, out.sigma, out.value, out.h_a].into_iter().chain(out.h_b).enumerate() {
                terms.push(probe(t, v, 80 + 10 * i as u64 + j as u64));
            }
        }
        let all = t.concat(&terms);
        t.sum(all)
    });

    let s = t0.elapsed().as_secs_f64();
    let detail = format!(
        "linear {e_lin:.1e}, conv {e_conv:.1e}, gru {e_gru:.1e}, attention {e_att:.1e}, tiny context policy {e_policy:.1e}, weight sums within {worst_sum:.1e}; {s:.1}s"
    );
    ensure(
        e_lin <= 1e-4 && e_conv <= 1e-3 && e_gru <= 1e-3 && e_att <= 1e-3 && e_policy <= 1e-2 && worst_sum <= 1e-6,
        || detail.clone(),
    )?;
    within_time(t0, 60.0)?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 7. Noise statistics

fn c7_noise() -> Outcome {
    let map = generate_map(&WorldSpec::new(WorldKind::RoomsAndCorridors, 10.0, 10.0, 7)).unwrap();
    ensure(map.width() == 100 && map.height() == 100, || "raster is not 100x100".into())?;
    for seed in 0..10 {
        let same = corrupt_map(&map, &NoiseSpec::new(NoiseKind::Shift, 0.0, seed)).map_err(|e| e.to_string())?;
        ensure(same == map, || format!("shift f=0 changed the map (seed {seed})"))?;
        let blank = corrupt_map(&map, &NoiseSpec::new(NoiseKind::Blank, 1.0, seed)).map_err(|e| e.to_string())?;
        ensure(blank.free_count() == 100 * 100, || "blank map has obstacles".into())?;
        let full = corrupt_map(&map, &NoiseSpec::new(NoiseKind::Cutout, 1.0, seed)).map_err(|e| e.to_string())?;
        ensure(full == blank, || "cutout 100% differs from blank".into())?;
    }
    let mut ranges = Vec::new();
    for f in [0.1, 0.25, 0.5] {
        let (mut lo, mut hi) = (1.0f64, 0.0f64);
        for seed in 0..50 {
            let c = corrupt_map(&map, &NoiseSpec::new(NoiseKind::Cutout, f, seed)).map_err(|e| e.to_string())?;
            let frac = map.diff_count(&c) as f64 / 1e4;
            lo = lo.min(frac);
            hi = hi.max(frac);
        }
        ensure(lo >= f && hi <= f + 0.15, || format!("cutout {f}: altered fraction in [{lo:.3}, {hi:.3}]"))?;
        ranges.push(format!("{f}: [{lo:.3}, {hi:.3}]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for m in [0.25, 0.5, 1.0] {
        for _ in 0..10_000 {
            let wp = PolarGoal { r: rng.random_range(0.0..3.0), theta: rng.random_range(-PI..PI) };
            let (x0, y0) = wp.to_cartesian();
            let (x1, y1) = corrupt_waypoint(wp, m, &mut rng).to_cartesian();
            let d = (x1 - x0).abs().max((y1 - y0).abs());
            ensure(d <= m + 1e-9, || format!("waypoint displacement {d} > {m}"))?;
            worst = worst.max(d / m);
        }
    }
    Ok(format!("shift 0 identity, blank all-free, cutout fractions {}; waypoint max displacement {worst:.4}·magnitude", ranges.join(", ")))
}

// ---------------------------------------------------------------------------
// 8. Outdated map

fn c8_outdated_map() -> Outcome {
    let f = outdated_map();
    let plan = rrt_star(&f.inflated_planning_map(), f.start.position(), f.goal, &RrtParams::default())
        .map_err(|e| e.to_string())?;
    ensure(validate_path(&f.inflated_planning_map(), &plan).valid, || "plan invalid on the planning map".into())?;
    let truth = validate_path(&f.inflated_truth(), &plan);
    ensure(!truth.valid, || "plan valid on the true map".into())?;
    let (r, _) = run_episode(&f.episode(), &Agent::WaypointFollower, &EnvConfig::default(), 0, false)
        .map_err(|e| e.to_string())?;
    ensure(!r.success, || "waypoint follower reached the goal".into())?;
    let v = truth.first_violation.unwrap();
    Ok(format!(
        "plan length {:.2} m valid on map, first violation at ({:.2}, {:.2}) on truth; follower ended {:?} after {} steps",
        plan.length, v.x, v.y, r.termination, r.steps
    ))
}

// ---------------------------------------------------------------------------
// 9-11. Training

struct Trained {
    steps: u64,
    best_sr: f64,
}

/// PPO on `episodes`, scoring the greedy policy on `held_out` every `every` steps.
/// Stops early once the held-out SR reaches `stop_sr`.
fn train_and_score(
    cfg: &TrainConfig,
    episodes: &[TrainEpisode],
    held_out: &[TrainEpisode],
    every: u64,
    stop_sr: Option<f64>,
) -> Result<Trained, String> {
    let mut next = every;
    let mut best = 0.0f64;
    let mut failure = None;
    let out = train(cfg, Arc::from(episodes), None, |row, pol| {
        if row.step < next {
            return ControlFlow::Continue(());
        }
        next += every;
        match evaluate(held_out, &Agent::Learned(pol), &cfg.env, None, &[0]) {
            Ok(r) => {
                best = best.max(r.sr_mean);
                match stop_sr {
                    Some(t) if r.sr_mean >= t => ControlFlow::Break(()),
                    _ => ControlFlow::Continue(()),
                }
            }
            Err(e) => {
                failure = Some(e.to_string());
                ControlFlow::Break(())
            }
        }
    })
    .map_err(|e| e.to_string())?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(Trained { steps: out.env_steps, best_sr: best })
}

fn open_room_episodes(worlds: std::ops::Range<u64>, count: usize, seed: u64, split: Split) -> Vec<TrainEpisode> {
    let specs = worlds.map(|s| WorldSpec::new(WorldKind::OpenRoom, 10.0, 10.0, s)).collect();
    let cons = EpisodeConstraints { min_geodesic: 1.5, max_geodesic: 15.0, ..EpisodeConstraints::default() };
    episodes_for(specs, count, seed, &cons, split)
}

fn c9_training_smoke() -> Outcome {
    let train_eps = open_room_episodes(0..200, 4000, 1, Split::Train);
    let held_out = open_room_episodes(10_000..10_100, 100, 99, Split::Val);
    let mut passed = 0;
    let mut lines = Vec::new();
    for seed in 0..3u64 {
        if passed == 2 || (seed == 2 && passed == 0) {
            break;
        }
        let t0 = Instant::now();
        let mut cfg = TrainConfig::new(PolicyConfig::desk(PolicyKind::NoContext), seed);
        cfg.ppo.total_steps = 1_000_000;
        let run = train_and_score(&cfg, &train_eps, &held_out, 50_000, Some(80.0))?;
        let secs = t0.elapsed().as_secs_f64();
        let ok = run.best_sr >= 80.0 && secs <= 45.0 * 60.0;
        passed += ok as usize;
        lines.push(format!("seed {seed}: SR {:.0} at {} steps in {secs:.0}s", run.best_sr, run.steps));
    }
    ensure(passed >= 2, || format!("{passed}/3 seeds reached SR 80: {}", lines.join("; ")))?;
    Ok(lines.join("; "))
}

const GAP_STEPS: u64 = 600_000;

fn gap_specs(worlds: std::ops::Range<u64>) -> Vec<WorldSpec> {
    worlds
        .map(|s| {
            let mut spec = WorldSpec::new(WorldKind::HiddenGapCorridor, 10.0, 10.0, s);
            spec.gap_width_m = 2.0;
            spec.wall_thickness_m = 0.8;
            spec
        })
        .collect()
}

/// Start and goal on opposite sides of the wall, at least 20% longer than the beeline.
fn gap_episodes(worlds: std::ops::Range<u64>, count: usize, seed: u64, split: Split) -> Vec<TrainEpisode> {
    let cons = EpisodeConstraints { min_geodesic: 1.5, max_geodesic: 15.0, min_ratio: Some(1.2), ..EpisodeConstraints::default() };
    episodes_for(gap_specs(worlds), count, seed, &cons, split)
}

struct GapPair {
    seed: u64,
    map: Policy,
    nocontext: Policy,
    sr_map: f64,
    sr_nocontext: f64,
}

static GAP_RUNS: Mutex<Vec<GapPair>> = Mutex::new(Vec::new());

fn gap_eval_episodes() -> Vec<TrainEpisode> {
    gap_episodes(10_000..10_100, 100, 99, Split::Val)
}

fn train_gap_pair(seed: u64, train_eps: &[TrainEpisode], held_out: &[TrainEpisode]) -> Result<GapPair, String> {
    let mut trained = Vec::new();
    for kind in [PolicyKind::Map, PolicyKind::NoContext] {
        let mut cfg = TrainConfig::new(PolicyConfig::desk(kind), seed);
        cfg.ppo.total_steps = GAP_STEPS;
        cfg.ppo.epochs = 2;
        let out = train(&cfg, Arc::from(train_eps), None, |_, _| ControlFlow::Continue(())).map_err(|e| e.to_string())?;
        let r = evaluate(held_out, &Agent::Learned(&out.policy), &cfg.env, None, &[0]).map_err(|e| e.to_string())?;
        trained.push((out.policy, r.sr_mean));
    }
    let (nocontext, sr_nocontext) = trained.pop().unwrap();
    let (map, sr_map) = trained.pop().unwrap();
    Ok(GapPair { seed, map, nocontext, sr_map, sr_nocontext })
}

fn c10_context_benefit() -> Outcome {
    let train_eps = gap_episodes(0..200, 4000, 1, Split::Train);
    let held_out = gap_eval_episodes();
    let mut runs = GAP_RUNS.lock().unwrap();
    runs.clear();
    let wins = |runs: &[GapPair]| runs.iter().filter(|p| p.sr_map >= p.sr_nocontext + 10.0).count();
    for seed in 0..3u64 {
        let (w, n) = (wins(&runs), runs.len());
        if w == 2 || n - w == 2 {
            break;
        }
        runs.push(train_gap_pair(seed, &train_eps, &held_out)?);
    }
    let detail = runs
        .iter()
        .map(|p| format!("seed {}: map {:.0} vs no-context {:.0}", p.seed, p.sr_map, p.sr_nocontext))
        .collect::<Vec<_>>()
        .join("; ");
    ensure(wins(&runs) >= 2, || format!("map ahead by 10 on {}/3 seeds: {detail}", wins(&runs)))?;
    Ok(format!("{GAP_STEPS} steps each; {detail}"))
}

fn c11_blank_map() -> Outcome {
    let held_out = gap_eval_episodes();
    let mut runs = GAP_RUNS.lock().unwrap();
    if runs.is_empty() {
        let train_eps = gap_episodes(0..200, 4000, 1, Split::Train);
        runs.push(train_gap_pair(0, &train_eps, &held_out)?);
    }
    let mut lines = Vec::new();
    let mut first = None;
    for pair in runs.iter() {
        let env = TrainConfig::new(PolicyConfig::desk(PolicyKind::Map), pair.seed).env;
        let blank = NoiseSpec::new(NoiseKind::Cutout, 1.0, 0);
        let r = evaluate(&held_out, &Agent::Learned(&pair.map), &env, Some(blank), &[0]).map_err(|e| e.to_string())?;
        let nc = evaluate(&held_out, &Agent::Learned(&pair.nocontext), &env, None, &[0]).map_err(|e| e.to_string())?;
        first.get_or_insert((r.sr_mean, nc.sr_mean));
        lines.push(format!(
            "seed {}: map with 100% cutout {:.0}, no-context {:.0}, clean map {:.0}",
            pair.seed, r.sr_mean, nc.sr_mean, pair.sr_map
        ));
    }
    let (blank_sr, nc_sr) = first.unwrap();
    let detail = lines.join("; ");
    ensure((blank_sr - nc_sr).abs() <= 10.0, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 12. Waypoint noise

fn c12_waypoint_noise() -> Outcome {
    let cons = EpisodeConstraints { min_geodesic: 3.0, ..EpisodeConstraints::default() };
    let eps = corridor_episodes(WorldKind::RoomsAndCorridors, 0..10, 50, 12, &cons);
    let mut srs = Vec::new();
    for m in [0.0, 0.25, 0.5, 1.0] {
        let noise = (m > 0.0).then(|| NoiseSpec::new(NoiseKind::WaypointShift, m, 0));
        let r = evaluate(&eps, &Agent::WaypointFollower, &EnvConfig::default(), noise, &[0, 1, 2])
            .map_err(|e| e.to_string())?;
        check_spl_le_sr(&r)?;
        srs.push(r.sr_mean);
    }
    let detail = format!("SR at 0/0.25/0.5/1.0 m: {:.1}/{:.1}/{:.1}/{:.1}", srs[0], srs[1], srs[2], srs[3]);
    ensure(srs.windows(2).all(|w| w[1] <= w[0]), || format!("not non-increasing: {detail}"))?;
    ensure(srs[3] <= srs[0] - 20.0, || format!("drop under 20 points: {detail}"))?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 13. Reproducibility

fn cli(args: &[&str]) -> Result<(), String> {
    let mut full = vec!["contextnav"];
    full.extend_from_slice(args);
    match contextnav_cli::run_cli(full.iter().copied()) {
        0 => Ok(()),
        code => Err(format!("`{}` exited {code}", args.join(" "))),
    }
}

fn c13_replay() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = |p: &str| dir.path().join(p).to_string_lossy().into_owned();
    cli(&["gen-maps", "--kind", "rooms-and-corridors", "--count", "3", "--seed", "13", "--out", &d("maps")])?;
    cli(&["gen-episodes", "--maps", &d("maps"), "--count", "12", "--seed", "14", "--out", &d("eps.json")])?;
    cli(&["train", "--policy", "nocontext", "--preset", "tiny", "--episodes", &d("eps.json"), "--steps", "512",
        "--seed", "3", "--envs", "2", "--rollout", "64", "--out", &d("run")])?;
    cli(&["eval", "--agent", "learned", "--run", &d("run"), "--episodes", &d("eps.json"), "--seeds", "0,1",
        "--out", &d("eval")])?;
    cli(&["sweep", "--agent", "waypoint-follower", "--episodes", &d("eps.json"), "--seeds", "0,1",
        "--noise", "waypoint:0.25,1", "--include-clean", "--out", &d("sweep")])?;
    let mut compared = Vec::new();
    for (run, csv) in [("eval", "report.csv"), ("sweep", "sweep.csv")] {
        cli(&["replay", "--manifest", &d(&format!("{run}/manifest.json")), "--verify"])?;
        let a = std::fs::read(dir.path().join(run).join(csv)).map_err(|e| e.to_string())?;
        let b = std::fs::read(dir.path().join(format!("{run}-replay")).join(csv)).map_err(|e| e.to_string())?;
        ensure(!a.is_empty() && a == b, || format!("{run}/{csv} differs after replay"))?;
        compared.push(format!("{run}/{csv} ({} bytes)", a.len()));
    }
    Ok(format!("byte-identical after replay: {}", compared.join(", ")))
}

// ---------------------------------------------------------------------------

fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let checks: Vec<(usize, &str, fn() -> Outcome)> = vec![
        (1, "planner oracle equivalence", c1_planners),
        (2, "kinematics closed forms and collision freeze", c2_kinematics),
        (3, "raycast oracle and saturation", c3_raycast),
        (4, "reward examples and telescoping", c4_reward),
        (5, "SPL cases and SPL <= SR", c5_spl),
        (6, "gradient checks and attention weights", c6_gradients),
        (7, "noise model statistics", c7_noise),
        (8, "outdated-map fixture", c8_outdated_map),
        (9, "no-context training smoke on open rooms", c9_training_smoke),
        (10, "context benefit on hidden-gap corridors", c10_context_benefit),
        (11, "blank-map policy matches no-context", c11_blank_map),
        (12, "waypoint-noise degradation", c12_waypoint_noise),
        (13, "eval/sweep replay reproducibility", c13_replay),
    ];
    let mut failed = 0;
    for (id, name, f) in checks {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let t0 = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        let secs = t0.elapsed().as_secs_f64();
        match res {
            Ok(detail) => println!("PASS {id:>2} {name}: {detail} [{secs:.1}s]"),
            Err(why) => {
                failed += 1;
                println!("FAIL {id:>2} {name}: {why} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
