//! Reward shaping lives in [`crate::sim`]; this module collects synchronous
//! rollouts, computes GAE and applies clipped-PPO updates with recurrent BPTT.

use crate::episodes::Episode;
use crate::nn::{
    gaussian_entropy, gaussian_log_prob, gaussian_log_prob_f64, load_checkpoint, sample_gaussian, save_checkpoint,
    Gradients, NnError, ParamStore, Tape, Tensor, Var,
};
use crate::policy::{InputBatch, ObservationBundle, Policy, PolicyConfig, RecurrentState};
use crate::sim::{derive_seed, EnvConfig, NavEnv, NavWorld, SimError, Termination};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::ops::ControlFlow;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use thiserror::Error;

pub use crate::sim::{compute_reward, RewardConfig};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("environment {index}: {source}")]
    Env { index: usize, source: SimError },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no training episodes")]
    NoEpisodes,
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub lr: f64,
    /// Linearly decay the learning rate to zero over `total_steps`.
    pub lr_anneal: bool,
    pub clip: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    pub rollout_len: usize,
    pub num_envs: usize,
    pub total_steps: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            lr: 2.5e-4,
            lr_anneal: false,
            clip: 0.2,
            epochs: 4,
            minibatches: 2,
            gamma: 0.99,
            lambda: 0.95,
            entropy_coef: 0.01,
            value_coef: 0.5,
            max_grad_norm: 0.5,
            rollout_len: 128,
            num_envs: 8,
            total_steps: 1_000_000,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return bad("clip must lie in (0, 1)");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) || !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return bad("gamma and lambda must lie in (0, 1]");
        }
        if self.lr <= 0.0 || self.max_grad_norm <= 0.0 {
            return bad("lr and max_grad_norm must be positive");
        }
        if self.rollout_len == 0 || self.num_envs == 0 || self.epochs == 0 {
            return bad("rollout_len, num_envs and epochs must be positive");
        }
        if self.minibatches == 0 || self.minibatches > self.num_envs {
            return bad("minibatches must lie in 1..=num_envs");
        }
        Ok(())
    }

    pub fn steps_per_update(&self) -> u64 {
        (self.rollout_len * self.num_envs) as u64
    }
}

/// Everything needed to reproduce a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub policy: PolicyConfig,
    pub env: EnvConfig,
    pub ppo: PpoConfig,
    pub seed: u64,
    /// Checkpoint period in env steps; 0 keeps only the final parameters.
    #[serde(default)]
    pub checkpoint_every: u64,
}

impl TrainConfig {
    pub fn new(policy: PolicyConfig, seed: u64) -> Self {
        let mut env = EnvConfig::default();
        env.sensor.rays = policy.rays;
        env.context = policy.context.clone();
        Self { policy, env, ppo: PpoConfig::default(), seed, checkpoint_every: 0 }
    }

    /// The policy dictates the sensor width and raster geometry.
    pub fn resolved_env(&self) -> EnvConfig {
        let mut env = self.env.clone();
        env.sensor.rays = self.policy.rays;
        env.context = self.policy.context.clone();
        env
    }
}

/// A world paired with one of its episodes.
pub type TrainEpisode = (Arc<NavWorld>, Episode);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStat {
    pub success: bool,
    pub ret: f64,
    pub length: u32,
}

struct Slot {
    env: NavEnv,
    state: RecurrentState,
    obs: ObservationBundle,
    fresh: bool,
    ret: f64,
}

/// Synchronously stepped environments that resample episodes when one ends.
pub struct EnvPool {
    episodes: Arc<[TrainEpisode]>,
    cfg: EnvConfig,
    policy_cfg: PolicyConfig,
    slots: Vec<Slot>,
    rng: ChaCha8Rng,
    seed: u64,
    spawned: u64,
}

impl EnvPool {
    pub fn new(
        episodes: Arc<[TrainEpisode]>,
        cfg: EnvConfig,
        policy_cfg: PolicyConfig,
        num_envs: usize,
        seed: u64,
    ) -> Result<Self, TrainError> {
        if episodes.is_empty() {
            return Err(TrainError::NoEpisodes);
        }
        let mut pool = Self {
            episodes,
            cfg,
            policy_cfg,
            slots: Vec::with_capacity(num_envs),
            rng: ChaCha8Rng::seed_from_u64(seed),
            seed,
            spawned: 0,
        };
        for i in 0..num_envs {
            let slot = pool.spawn(i)?;
            pool.slots.push(slot);
        }
        Ok(pool)
    }

    fn spawn(&mut self, index: usize) -> Result<Slot, TrainError> {
        let (world, ep) = &self.episodes[self.rng.random_range(0..self.episodes.len())];
        let env_seed = derive_seed(self.seed, self.spawned);
        self.spawned += 1;
        let wrap = |source| TrainError::Env { index, source };
        let mut env = NavEnv::new(world.clone(), ep.clone(), &self.cfg, self.policy_cfg.kind, env_seed).map_err(wrap)?;
        let obs = env.observe().map_err(wrap)?;
        Ok(Slot { env, state: RecurrentState::zeros(&self.policy_cfg), obs, fresh: true, ret: 0.0 })
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

/// One synchronous step of every environment.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub input: InputBatch,
    /// The recurrent state was reset just before this step.
    pub first: Vec<bool>,
    pub actions: Vec<[f32; 2]>,
    pub logp: Vec<f32>,
    pub values: Vec<f32>,
    pub rewards: Vec<f32>,
    pub dones: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct RolloutBatch {
    pub steps: Vec<StepRecord>,
    /// Recurrent state of each environment before the first step.
    pub h0: Vec<RecurrentState>,
    pub last_values: Vec<f32>,
    /// `t * num_envs + env` layout, filled by [`RolloutBatch::finish`].
    pub advantages: Vec<f32>,
    pub returns: Vec<f32>,
    pub finished: Vec<EpisodeStat>,
}

impl RolloutBatch {
    pub fn num_envs(&self) -> usize {
        self.h0.len()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Computes GAE targets and normalizes advantages.
    pub fn finish(&mut self, gamma: f64, lambda: f64) {
        let rewards: Vec<f32> = self.steps.iter().flat_map(|s| s.rewards.iter().copied()).collect();
        let values: Vec<f32> = self.steps.iter().flat_map(|s| s.values.iter().copied()).collect();
        let dones: Vec<bool> = self.steps.iter().flat_map(|s| s.dones.iter().copied()).collect();
        let (mut adv, ret) = compute_gae(&rewards, &values, &dones, &self.last_values, gamma, lambda);
        normalize_advantages(&mut adv);
        self.advantages = adv;
        self.returns = ret;
    }
}

/// Runs `rollout_len` synchronous steps with a frozen policy.
pub fn collect_rollouts(
    pool: &mut EnvPool,
    policy: &Policy,
    rollout_len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<RolloutBatch, TrainError> {
    let n = pool.len();
    let h0: Vec<RecurrentState> = pool.slots.iter().map(|s| s.state.clone()).collect();
    let mut steps = Vec::with_capacity(rollout_len);
    let mut finished = Vec::new();
    for _ in 0..rollout_len {
        let input = {
            let obs: Vec<&ObservationBundle> = pool.slots.iter().map(|s| &s.obs).collect();
            policy.batch(&obs)?
        };
        let first: Vec<bool> = pool.slots.iter().map(|s| s.fresh).collect();
        let out = {
            let mut states: Vec<&mut RecurrentState> = pool.slots.iter_mut().map(|s| &mut s.state).collect();
            policy.step_batch(&input, &mut states)?
        };
        let mut actions = Vec::with_capacity(n);
        let mut logp = Vec::with_capacity(n);
        for o in &out {
            let a = sample_gaussian(&o.mu, &o.sigma, rng);
            let f = |x: &[f32]| x.iter().map(|&v| v as f64).collect::<Vec<_>>();
            logp.push(gaussian_log_prob_f64(&f(&o.mu), &f(&o.sigma), &f(&a)) as f32);
            actions.push([a[0], a[1]]);
        }
        let results: Vec<Result<(f64, Option<Termination>), (usize, SimError)>> = pool
            .slots
            .par_iter_mut()
            .zip(&actions)
            .enumerate()
            .map(|(i, (slot, a))| {
                let o = slot.env.step([a[0] as f64, a[1] as f64]).map_err(|e| (i, e))?;
                slot.ret += o.reward;
                slot.fresh = false;
                if o.done.is_none() {
                    slot.obs = slot.env.observe().map_err(|e| (i, e))?;
                }
                Ok((o.reward, o.done))
            })
            .collect();
        let mut rewards = Vec::with_capacity(n);
        let mut dones = Vec::with_capacity(n);
        for (i, r) in results.into_iter().enumerate() {
            let (reward, done) = r.map_err(|(index, source)| TrainError::Env { index, source })?;
            rewards.push(reward as f32);
            dones.push(done.is_some());
            if let Some(t) = done {
                let s = &pool.slots[i];
                finished.push(EpisodeStat { success: t == Termination::Success, ret: s.ret, length: s.env.steps });
                pool.slots[i] = pool.spawn(i)?;
            }
        }
        steps.push(StepRecord {
            input,
            first,
            actions,
            logp,
            values: out.iter().map(|o| o.value).collect(),
            rewards,
            dones,
        });
    }
    let last_values = {
        let obs: Vec<&ObservationBundle> = pool.slots.iter().map(|s| &s.obs).collect();
        let mut scratch: Vec<RecurrentState> = pool.slots.iter().map(|s| s.state.clone()).collect();
        let mut refs: Vec<&mut RecurrentState> = scratch.iter_mut().collect();
        policy.step(&obs, &mut refs)?.iter().map(|o| o.value).collect()
    };
    Ok(RolloutBatch { steps, h0, last_values, advantages: Vec::new(), returns: Vec::new(), finished })
}

/// Generalized advantage estimation over a `t * n + env` layout, where `n` is
/// `last_values.len()`. A done at step t cuts bootstrapping from t+1.
pub fn compute_gae(
    rewards: &[f32],
    values: &[f32],
    dones: &[bool],
    last_values: &[f32],
    gamma: f64,
    lambda: f64,
) -> (Vec<f32>, Vec<f32>) {
    let n = last_values.len();
    assert!(n > 0 && rewards.len() % n == 0 && values.len() == rewards.len() && dones.len() == rewards.len());
    let steps = rewards.len() / n;
    let mut adv = vec![0.0f32; rewards.len()];
    for e in 0..n {
        let mut next_adv = 0.0f64;
        let mut next_value = last_values[e] as f64;
        for t in (0..steps).rev() {
            let i = t * n + e;
            let live = if dones[i] { 0.0 } else { 1.0 };
            let delta = rewards[i] as f64 + gamma * next_value * live - values[i] as f64;
            next_adv = delta + gamma * lambda * live * next_adv;
            adv[i] = next_adv as f32;
            next_value = values[i] as f64;
        }
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Shifts and scales to mean 0, std 1 (left unscaled when nearly constant).
pub fn normalize_advantages(adv: &mut [f32]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().map(|&a| a as f64).sum::<f64>() / n;
    let var = adv.iter().map(|&a| (a as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let scale = if std > 1e-8 { 1.0 / std } else { 1.0 };
    adv.iter_mut().for_each(|a| *a = ((*a as f64 - mean) * scale) as f32);
}

/// Adam over every tensor of a parameter store.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f32>> = store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-5, m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = (lr * bc2.sqrt() / bc1) as f32;
        let (b1, b2, eps) = (self.beta1 as f32, self.beta2 as f32, (self.eps * bc2.sqrt()) as f32);
        for (id, g) in grads.iter() {
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = store.get_mut(id).data_mut();
            for (((p, g), m), v) in p.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step * *m / (v.sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_frac: f64,
    pub grad_norm: f64,
    /// Minibatch updates discarded because of non-finite losses or gradients.
    pub skipped: u32,
}

fn rows(data: &[f32], n: usize, t: usize, envs: &[usize]) -> Vec<f32> {
    envs.iter().map(|&e| data[t * n + e]).collect()
}

fn mask_var(t: &mut Tape, first: &[bool], envs: &[usize], hidden: usize) -> Option<Var> {
    if envs.iter().all(|&e| !first[e]) {
        return None;
    }
    let data = envs
        .iter()
        .flat_map(|&e| std::iter::repeat_n(if first[e] { 0.0 } else { 1.0 }, hidden))
        .collect();
    Some(t.input(Tensor::new(&[envs.len(), hidden], data).expect("mask shape")))
}

/// Clipped-PPO epochs over env-subset minibatches, each replayed through
/// time from its stored initial recurrent state.
pub fn ppo_update(
    policy: &mut Policy,
    opt: &mut Adam,
    batch: &RolloutBatch,
    cfg: &PpoConfig,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<UpdateStats, TrainError> {
    let n = batch.num_envs();
    let hidden = policy.config.hidden;
    let has_b = policy.config.kind.has_context();
    let mut stats = UpdateStats::default();
    let mut counted = 0u32;
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        let per = n.div_ceil(cfg.minibatches);
        for envs in order.chunks(per) {
            let b = envs.len();
            let (grads, loss_terms) = {
                let mut t = Tape::new(&policy.params);
                let gather = |f: fn(&RecurrentState) -> &Vec<f32>| -> Tensor {
                    let d = envs.iter().flat_map(|&e| f(&batch.h0[e]).iter().copied()).collect();
                    Tensor::new(&[b, hidden], d).expect("state shape")
                };
                let mut h_a = t.input(gather(|s| &s.h_a));
                let mut h_b = has_b.then(|| t.input(gather(|s| &s.h_b)));
                let mut total: Option<Var> = None;
                let (mut pg_sum, mut v_sum, mut ent_sum, mut kl_sum, mut clipped) = (0.0, 0.0, 0.0, 0.0, 0usize);
                for (step, rec) in batch.steps.iter().enumerate() {
                    if let Some(m) = mask_var(&mut t, &rec.first, envs, hidden) {
                        h_a = t.mul(h_a, m);
                        h_b = h_b.map(|h| t.mul(h, m));
                    }
                    let input = rec.input.select(envs);
                    let out = policy.forward(&mut t, &input, h_a, h_b)?;
                    h_a = out.h_a;
                    h_b = out.h_b;
                    let act: Vec<f32> = envs.iter().flat_map(|&e| rec.actions[e]).collect();
                    let act = t.input(Tensor::new(&[b, 2], act)?);
                    let old: Vec<f32> = envs.iter().map(|&e| rec.logp[e]).collect();
                    let adv = rows(&batch.advantages, n, step, envs);
                    let ret = rows(&batch.returns, n, step, envs);
                    let old_v = t.input(Tensor::new(&[b], old.clone())?);
                    let adv_v = t.input(Tensor::new(&[b], adv)?);
                    let ret_v = t.input(Tensor::new(&[b], ret)?);
                    let logp = gaussian_log_prob(&mut t, out.mu, out.sigma, act);
                    let diff = t.sub(logp, old_v);
                    let ratio = t.exp(diff);
                    let s1 = t.mul(ratio, adv_v);
                    let rc = t.clamp(ratio, 1.0 - cfg.clip as f32, 1.0 + cfg.clip as f32);
                    let s2 = t.mul(rc, adv_v);
                    let surr = t.minimum(s1, s2);
                    let pg = t.sum(surr);
                    let pg = t.scale(pg, -1.0);
                    let verr = t.sub(out.value, ret_v);
                    let vsq = t.square(verr);
                    let vl = t.sum(vsq);
                    let vl = t.scale(vl, 0.5);
                    let ent = gaussian_entropy(&mut t, out.sigma);
                    let ent = t.sum(ent);
                    pg_sum += t.value(pg).data()[0] as f64;
                    v_sum += t.value(vl).data()[0] as f64;
                    ent_sum += t.value(ent).data()[0] as f64;
                    for (new, old) in t.value(logp).data().iter().zip(&old) {
                        let r = ((new - old) as f64).exp();
                        kl_sum += (r - 1.0) - (new - old) as f64;
                        clipped += ((r - 1.0).abs() > cfg.clip) as usize;
                    }
                    let vterm = t.scale(vl, cfg.value_coef as f32);
                    let eterm = t.scale(ent, -(cfg.entropy_coef as f32));
                    let l = t.add(pg, vterm);
                    let l = t.add(l, eterm);
                    total = Some(match total {
                        Some(acc) => t.add(acc, l),
                        None => l,
                    });
                }
                let samples = (b * batch.len()) as f64;
                let loss = t.scale(total.expect("non-empty rollout"), (1.0 / samples) as f32);
                let finite = t.value(loss).is_finite();
                let g = finite.then(|| t.backward(loss));
                (g, [pg_sum / samples, v_sum / samples, ent_sum / samples, kl_sum / samples, clipped as f64 / samples])
            };
            let Some(mut grads) = grads.filter(Gradients::all_finite) else {
                stats.skipped += 1;
                continue;
            };
            let norm = grads.global_norm();
            if norm > cfg.max_grad_norm {
                grads.scale((cfg.max_grad_norm / norm) as f32);
            }
            let backup = policy.params.clone();
            opt.step(&mut policy.params, &grads, lr);
            if !policy.params.all_finite() {
                policy.params = backup;
                stats.skipped += 1;
                continue;
            }
            stats.policy_loss += loss_terms[0];
            stats.value_loss += loss_terms[1];
            stats.entropy += loss_terms[2];
            stats.approx_kl += loss_terms[3];
            stats.clip_frac += loss_terms[4];
            stats.grad_norm += norm;
            counted += 1;
        }
    }
    if counted > 0 {
        let c = counted as f64;
        stats.policy_loss /= c;
        stats.value_loss /= c;
        stats.entropy /= c;
        stats.approx_kl /= c;
        stats.clip_frac /= c;
        stats.grad_norm /= c;
    }
    Ok(stats)
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    /// Success rate over the last 100 finished training episodes.
    pub success_rate: f64,
    pub mean_return: f64,
    pub episodes: usize,
    pub update: UpdateStats,
}

pub const METRICS_HEADER: &str =
    "step,success_rate,mean_return,episodes,policy_loss,value_loss,entropy,approx_kl,clip_frac,grad_norm,skipped";

impl MetricsRow {
    pub fn csv(&self) -> String {
        let u = &self.update;
        format!(
            "{},{:.4},{:.4},{},{:.6},{:.6},{:.6},{:.6},{:.4},{:.4},{}",
            self.step,
            self.success_rate,
            self.mean_return,
            self.episodes,
            u.policy_loss,
            u.value_loss,
            u.entropy,
            u.approx_kl,
            u.clip_frac,
            u.grad_norm,
            u.skipped
        )
    }
}

pub const POLICY_CONFIG_FILE: &str = "policy.json";
pub const POLICY_PARAMS_FILE: &str = "policy.ckpt";

/// Writes `policy.json` and `policy.ckpt` into `dir`.
pub fn save_policy(policy: &Policy, dir: &Path) -> Result<(), TrainError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let p = dir.join(POLICY_CONFIG_FILE);
    fs::write(&p, serde_json::to_string_pretty(&policy.config)?).map_err(io_err(&p))?;
    save_checkpoint(&policy.params, &dir.join(POLICY_PARAMS_FILE))?;
    Ok(())
}

/// Loads a policy saved by [`save_policy`]; `ckpt` overrides the parameter file.
pub fn load_policy(dir: &Path, ckpt: Option<&Path>) -> Result<Policy, TrainError> {
    let p = dir.join(POLICY_CONFIG_FILE);
    let cfg: PolicyConfig = serde_json::from_str(&fs::read_to_string(&p).map_err(io_err(&p))?)?;
    let params = load_checkpoint(&ckpt.map(Path::to_path_buf).unwrap_or_else(|| dir.join(POLICY_PARAMS_FILE)))?;
    Ok(Policy::with_params(cfg, &params)?)
}

pub struct TrainOutcome {
    pub policy: Policy,
    pub metrics: Vec<MetricsRow>,
    pub env_steps: u64,
}

/// Full training loop. With `out`, writes `config.json`, `metrics.csv`,
/// periodic `checkpoints/step_*.ckpt` and the final policy files. `on_row`
/// sees each metrics row with the current policy and may stop training early.
pub fn train(
    cfg: &TrainConfig,
    episodes: Arc<[TrainEpisode]>,
    out: Option<&Path>,
    mut on_row: impl FnMut(&MetricsRow, &Policy) -> ControlFlow<()>,
) -> Result<TrainOutcome, TrainError> {
    cfg.ppo.validate()?;
    cfg.policy.validate()?;
    let env_cfg = cfg.resolved_env();
    let mut policy = Policy::new(cfg.policy.clone(), derive_seed(cfg.seed, 0))?;
    let mut pool = EnvPool::new(episodes, env_cfg, cfg.policy.clone(), cfg.ppo.num_envs, derive_seed(cfg.seed, 1))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2));
    let mut opt = Adam::new(&policy.params);
    let mut metrics_file = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            let c = dir.join("config.json");
            fs::write(&c, serde_json::to_string_pretty(cfg)?).map_err(io_err(&c))?;
            let m = dir.join("metrics.csv");
            let mut f = fs::File::create(&m).map_err(io_err(&m))?;
            writeln!(f, "{METRICS_HEADER}").map_err(io_err(&m))?;
            Some((f, m))
        }
        None => None,
    };
    let mut recent: VecDeque<EpisodeStat> = VecDeque::with_capacity(100);
    let mut metrics = Vec::new();
    let mut steps = 0u64;
    let mut next_ckpt = cfg.checkpoint_every;
    while steps < cfg.ppo.total_steps {
        let lr = if cfg.ppo.lr_anneal {
            cfg.ppo.lr * (1.0 - steps as f64 / cfg.ppo.total_steps as f64)
        } else {
            cfg.ppo.lr
        };
        let mut batch = collect_rollouts(&mut pool, &policy, cfg.ppo.rollout_len, &mut rng)?;
        batch.finish(cfg.ppo.gamma, cfg.ppo.lambda);
        let update = ppo_update(&mut policy, &mut opt, &batch, &cfg.ppo, lr, &mut rng)?;
        steps += cfg.ppo.steps_per_update();
        for s in &batch.finished {
            if recent.len() == 100 {
                recent.pop_front();
            }
            recent.push_back(*s);
        }
        let k = recent.len().max(1) as f64;
        let row = MetricsRow {
            step: steps,
            success_rate: recent.iter().filter(|s| s.success).count() as f64 / k,
            mean_return: recent.iter().map(|s| s.ret).sum::<f64>() / k,
            episodes: batch.finished.len(),
            update,
        };
        if let Some((f, path)) = metrics_file.as_mut() {
            writeln!(f, "{}", row.csv()).map_err(io_err(path))?;
        }
        if let Some(dir) = out {
            if cfg.checkpoint_every > 0 && steps >= next_ckpt {
                let ck = dir.join("checkpoints");
                fs::create_dir_all(&ck).map_err(io_err(&ck))?;
                save_checkpoint(&policy.params, &ck.join(format!("step_{steps:09}.ckpt")))?;
                next_ckpt += cfg.checkpoint_every;
            }
        }
        let flow = on_row(&row, &policy);
        metrics.push(row);
        if flow.is_break() {
            break;
        }
    }
    if let Some(dir) = out {
        save_policy(&policy, dir)?;
    }
    Ok(TrainOutcome { policy, metrics, env_steps: steps })
}
