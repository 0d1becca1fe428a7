//! No-Context and Context policies assembled from the `nn` primitives, plus
//! scripted controllers used as baselines and fixtures.
//!
//! Policies emit normalized actions; `a = (1, 1)` maps to the velocity limits.

use crate::context::{encode_polar, ContextConfig, ContextObservation, GoalEncoding, PolarGoal};
use crate::kinematics::{DepthScan, VelocityAction, MAX_ANGULAR, MAX_LINEAR};
use crate::nn::{
    scaled_dot_attention, Conv, GaussianHead, GroupNorm, GruCell, Linear, NnError, ParamStore, Tape, Tensor, Var,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    NoContext,
    Map,
    Trajectory,
    Waypoint,
}

impl PolicyKind {
    pub fn uses_raster(self) -> bool {
        matches!(self, Self::Map | Self::Trajectory)
    }

    pub fn has_context(self) -> bool {
        self != Self::NoContext
    }
}

impl FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "nocontext" | "no-context" => Ok(Self::NoContext),
            "map" => Ok(Self::Map),
            "trajectory" => Ok(Self::Trajectory),
            "waypoint" => Ok(Self::Waypoint),
            _ => Err(format!("unknown policy kind '{s}' (nocontext, map, trajectory, waypoint)")),
        }
    }
}

impl std::fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::NoContext => "nocontext",
            Self::Map => "map",
            Self::Trajectory => "trajectory",
            Self::Waypoint => "waypoint",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    /// Global average pool over the final feature map.
    Gap,
    /// Flatten the final feature map before the projection.
    Flatten,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapEncoderConfig {
    pub stem_channels: usize,
    /// One residual block per entry: (output channels, stride).
    pub blocks: Vec<(usize, usize)>,
    pub pool: Pooling,
    pub group_norm: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    pub hidden: usize,
    pub feature: usize,
    pub tokens: usize,
    pub rays: usize,
    pub depth_channels: [usize; 3],
    pub depth_kernel: usize,
    pub depth_stride: usize,
    pub embed: usize,
    pub waypoint_hidden: usize,
    pub map: MapEncoderConfig,
    pub context: ContextConfig,
}

impl PolicyConfig {
    /// Full-size architecture: 512-dim features and hidden states.
    pub fn paper(kind: PolicyKind) -> Self {
        Self {
            kind,
            hidden: 512,
            feature: 512,
            tokens: 8,
            rays: 128,
            depth_channels: [32, 64, 64],
            depth_kernel: 5,
            depth_stride: 2,
            embed: 32,
            waypoint_hidden: 512,
            map: MapEncoderConfig {
                stem_channels: 32,
                blocks: vec![(32, 2), (64, 2), (128, 2), (256, 1)],
                pool: Pooling::Gap,
                group_norm: true,
            },
            context: ContextConfig::default(),
        }
    }

    /// Reduced widths for single-machine training runs.
    pub fn desk(kind: PolicyKind) -> Self {
        Self {
            kind,
            hidden: 128,
            feature: 128,
            tokens: 4,
            rays: 64,
            depth_channels: [8, 16, 16],
            depth_kernel: 5,
            depth_stride: 2,
            embed: 32,
            waypoint_hidden: 64,
            map: MapEncoderConfig {
                stem_channels: 8,
                blocks: vec![(16, 2), (16, 2)],
                pool: Pooling::Flatten,
                group_norm: false,
            },
            context: ContextConfig {
                size: 32,
                center: crate::context::RotationCenter::Agent,
                ..ContextConfig::default()
            },
        }
    }

    /// Very small network for gradient checks and oracle comparisons.
    pub fn tiny(kind: PolicyKind) -> Self {
        Self {
            kind,
            hidden: 16,
            feature: 8,
            tokens: 2,
            rays: 16,
            depth_channels: [2, 3, 3],
            depth_kernel: 5,
            depth_stride: 2,
            embed: 4,
            waypoint_hidden: 6,
            map: MapEncoderConfig { stem_channels: 2, blocks: vec![(3, 2)], pool: Pooling::Gap, group_norm: true },
            context: ContextConfig { size: 8, ..ContextConfig::default() },
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.tokens == 0 || self.feature % self.tokens != 0 {
            return Err(NnError::Config(format!("tokens {} must divide feature {}", self.tokens, self.feature)));
        }
        if self.rays == 0 || self.hidden == 0 {
            return Err(NnError::Config("rays and hidden must be positive".into()));
        }
        if self.kind.uses_raster() && self.context.size < 2 {
            return Err(NnError::Config("context raster too small".into()));
        }
        Ok(())
    }

    pub fn token_dim(&self) -> usize {
        self.feature / self.tokens
    }

    fn depth_len(&self) -> usize {
        let mut l = self.rays;
        for _ in 0..3 {
            l = (l + 2 * (self.depth_kernel / 2) - self.depth_kernel) / self.depth_stride + 1;
        }
        l
    }
}

#[derive(Debug, Clone)]
struct DepthEncoder {
    convs: [Conv; 3],
    proj: Linear,
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv,
    norm1: Option<GroupNorm>,
    conv2: Conv,
    norm2: Option<GroupNorm>,
    shortcut: Option<Conv>,
}

#[derive(Debug, Clone)]
struct MapEncoder {
    stem: Conv,
    stem_norm: Option<GroupNorm>,
    blocks: Vec<ResBlock>,
    pool: Pooling,
    proj: Linear,
}

#[derive(Debug, Clone)]
enum ContextEncoder {
    Raster(MapEncoder),
    Waypoint(Linear, Linear),
}

#[derive(Debug, Clone)]
struct ContextNet {
    encoder: ContextEncoder,
    q_h: Linear,
    k_c: Linear,
    q_c: Linear,
    k_d: Linear,
    gru_b: GruCell,
}

#[derive(Debug, Clone)]
struct Net {
    depth: DepthEncoder,
    goal: Linear,
    action: Linear,
    gru_a: GruCell,
    context: Option<ContextNet>,
    head: GaussianHead,
    value: Linear,
}

fn conv_len(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - k) / stride + 1
}

impl Net {
    fn build(cfg: &PolicyConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let [c1, c2, c3] = cfg.depth_channels;
        let (k, s) = (cfg.depth_kernel, cfg.depth_stride);
        let depth = DepthEncoder {
            convs: [
                Conv::new1d(store, "depth.conv1", 1, c1, k, s, k / 2, rng),
                Conv::new1d(store, "depth.conv2", c1, c2, k, s, k / 2, rng),
                Conv::new1d(store, "depth.conv3", c2, c3, k, s, k / 2, rng),
            ],
            proj: Linear::new(store, "depth.proj", c3 * cfg.depth_len(), cfg.feature, 1.0, rng),
        };
        let goal = Linear::new(store, "goal_embed", 3, cfg.embed, 1.0, rng);
        let action = Linear::new(store, "action_embed", 2, cfg.embed, 1.0, rng);
        let gru_a = GruCell::new(store, "gru_a", cfg.feature + 2 * cfg.embed, cfg.hidden, rng);
        let dk = cfg.token_dim();
        let context = cfg.kind.has_context().then(|| {
            let encoder = if cfg.kind.uses_raster() {
                ContextEncoder::Raster(MapEncoder::build(cfg, store, rng))
            } else {
                ContextEncoder::Waypoint(
                    Linear::new(store, "waypoint.fc1", 3, cfg.waypoint_hidden, 1.0, rng),
                    Linear::new(store, "waypoint.fc2", cfg.waypoint_hidden, cfg.feature, 1.0, rng),
                )
            };
            ContextNet {
                encoder,
                q_h: Linear::new(store, "attn.q_h", cfg.hidden, dk, 1.0, rng),
                k_c: Linear::new(store, "attn.k_c", dk, dk, 1.0, rng),
                q_c: Linear::new(store, "attn.q_c", dk, dk, 1.0, rng),
                k_d: Linear::new(store, "attn.k_d", dk, dk, 1.0, rng),
                gru_b: GruCell::new(store, "gru_b", 2 * dk + 2 * cfg.embed + cfg.hidden, cfg.hidden, rng),
            }
        });
        let head = GaussianHead::new(store, "action_head", cfg.hidden, 2, rng);
        let value = Linear::new(store, "value_head", cfg.hidden, 1, 1.0, rng);
        Self { depth, goal, action, gru_a, context, head, value }
    }
}

impl MapEncoder {
    fn build(cfg: &PolicyConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let m = &cfg.map;
        let norm = |store: &mut ParamStore, name: &str, c: usize| m.group_norm.then(|| GroupNorm::new(store, name, c));
        let stem = Conv::new2d(store, "map.stem", 2, m.stem_channels, 3, 2, 1, rng);
        let stem_norm = norm(store, "map.stem_norm", m.stem_channels);
        let mut side = conv_len(cfg.context.size, 3, 2, 1);
        let mut ch = m.stem_channels;
        let mut blocks = Vec::new();
        for (i, &(out, stride)) in m.blocks.iter().enumerate() {
            let name = format!("map.block{i}");
            let conv1 = Conv::new2d(store, &format!("{name}.conv1"), ch, out, 3, stride, 1, rng);
            let norm1 = norm(store, &format!("{name}.norm1"), out);
            let conv2 = Conv::new2d(store, &format!("{name}.conv2"), out, out, 3, 1, 1, rng);
            let norm2 = norm(store, &format!("{name}.norm2"), out);
            let shortcut =
                (stride != 1 || ch != out).then(|| Conv::new2d(store, &format!("{name}.shortcut"), ch, out, 1, stride, 0, rng));
            blocks.push(ResBlock { conv1, norm1, conv2, norm2, shortcut });
            side = conv_len(side, 3, stride, 1);
            ch = out;
        }
        let flat = match m.pool {
            Pooling::Gap => ch,
            Pooling::Flatten => ch * side * side,
        };
        let proj = Linear::new(store, "map.proj", flat, cfg.feature, 1.0, rng);
        Self { stem, stem_norm, blocks, pool: m.pool, proj }
    }

    fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let mut y = self.stem.forward(t, x);
        if let Some(n) = &self.stem_norm {
            y = n.forward(t, y);
        }
        y = t.relu(y);
        for b in &self.blocks {
            let mut z = b.conv1.forward(t, y);
            if let Some(n) = &b.norm1 {
                z = n.forward(t, z);
            }
            z = t.relu(z);
            z = b.conv2.forward(t, z);
            if let Some(n) = &b.norm2 {
                z = n.forward(t, z);
            }
            let skip = match &b.shortcut {
                Some(c) => c.forward(t, y),
                None => y,
            };
            let sum = t.add(z, skip);
            y = t.relu(sum);
        }
        let bsz = t.shape(y)[0];
        let pooled = match self.pool {
            Pooling::Gap => t.global_avg_pool(y),
            Pooling::Flatten => {
                let n = t.value(y).len() / bsz;
                t.reshape(y, &[bsz, n])
            }
        };
        let f = self.proj.forward(t, pooled);
        t.relu(f)
    }
}

/// Context input for one step.
#[derive(Debug, Clone, PartialEq)]
pub enum ContextInput {
    None,
    Raster(ContextObservation),
    Waypoint(PolarGoal),
}

/// Everything the policy sees at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationBundle {
    pub depth: DepthScan,
    pub goal: GoalEncoding,
    /// Normalized previous action.
    pub prev_action: [f64; 2],
    pub context: ContextInput,
}

/// Recurrent hidden states of one environment.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentState {
    pub h_a: Vec<f32>,
    pub h_b: Vec<f32>,
}

impl RecurrentState {
    pub fn zeros(cfg: &PolicyConfig) -> Self {
        let hb = if cfg.kind.has_context() { cfg.hidden } else { 0 };
        Self { h_a: vec![0.0; cfg.hidden], h_b: vec![0.0; hb] }
    }

    pub fn reset(&mut self) {
        self.h_a.fill(0.0);
        self.h_b.fill(0.0);
    }

    pub fn is_finite(&self) -> bool {
        self.h_a.iter().chain(&self.h_b).all(|v| v.is_finite())
    }
}

/// Batched observation tensors.
#[derive(Debug, Clone)]
pub struct InputBatch {
    pub depth: Tensor,
    pub goal: Tensor,
    pub prev_action: Tensor,
    pub context: Option<Tensor>,
}

fn select_rows(t: &Tensor, rows: &[usize]) -> Tensor {
    let row_len = t.len() / t.shape()[0];
    let mut shape = t.shape().to_vec();
    shape[0] = rows.len();
    let data = rows.iter().flat_map(|&r| t.data()[r * row_len..(r + 1) * row_len].iter().copied()).collect();
    Tensor::new(&shape, data).expect("row selection keeps the row shape")
}

impl InputBatch {
    pub fn len(&self) -> usize {
        self.depth.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sub-batch of the given sample indices, in order.
    pub fn select(&self, rows: &[usize]) -> InputBatch {
        InputBatch {
            depth: select_rows(&self.depth, rows),
            goal: select_rows(&self.goal, rows),
            prev_action: select_rows(&self.prev_action, rows),
            context: self.context.as_ref().map(|c| select_rows(c, rows)),
        }
    }
}

/// Tape variables produced by one forward step.
#[derive(Debug, Clone, Copy)]
pub struct StepVars {
    pub mu: Var,
    pub sigma: Var,
    /// `[B]`
    pub value: Var,
    pub h_a: Var,
    pub h_b: Option<Var>,
}

/// Plain values from one inference step.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyStep {
    pub mu: [f32; 2],
    pub sigma: [f32; 2],
    pub value: f32,
}

#[derive(Debug, Clone)]
pub struct Policy {
    pub config: PolicyConfig,
    pub params: ParamStore,
    net: Net,
}

impl Policy {
    pub fn new(config: PolicyConfig, seed: u64) -> Result<Self, NnError> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Net::build(&config, &mut params, &mut rng);
        Ok(Self { config, params, net })
    }

    /// Rebuilds the architecture and loads `params` into it.
    pub fn with_params(config: PolicyConfig, params: &ParamStore) -> Result<Self, NnError> {
        let mut p = Self::new(config, 0)?;
        p.params.assign_from(params)?;
        Ok(p)
    }

    pub fn kind(&self) -> PolicyKind {
        self.config.kind
    }

    pub fn batch(&self, obs: &[&ObservationBundle]) -> Result<InputBatch, NnError> {
        let cfg = &self.config;
        let b = obs.len();
        let mut depth = Vec::with_capacity(b * cfg.rays);
        let mut goal = Vec::with_capacity(b * 3);
        let mut act = Vec::with_capacity(b * 2);
        let mut ctx: Vec<f32> = Vec::new();
        for o in obs {
            if o.depth.rays.len() != cfg.rays {
                return Err(NnError::Shape(format!("depth has {} rays, policy expects {}", o.depth.rays.len(), cfg.rays)));
            }
            depth.extend(o.depth.rays.iter().map(|&v| v as f32));
            goal.extend(o.goal.0.iter().map(|&v| v as f32));
            act.extend(o.prev_action.iter().map(|&v| v as f32));
            match (&o.context, cfg.kind) {
                (ContextInput::None, PolicyKind::NoContext) => {}
                (ContextInput::Raster(r), PolicyKind::Map | PolicyKind::Trajectory) => {
                    if r.size != cfg.context.size {
                        return Err(NnError::Shape(format!("context raster {} vs {}", r.size, cfg.context.size)));
                    }
                    ctx.extend_from_slice(&r.data);
                }
                (ContextInput::Waypoint(w), PolicyKind::Waypoint) => ctx.extend(encode_polar(*w).0.iter().map(|&v| v as f32)),
                (c, k) => return Err(NnError::Config(format!("{k} policy cannot take context {c:?}"))),
            }
        }
        let n = cfg.context.size;
        let context = match cfg.kind {
            PolicyKind::NoContext => None,
            PolicyKind::Map | PolicyKind::Trajectory => Some(Tensor::new(&[b, 2, n, n], ctx)?),
            PolicyKind::Waypoint => Some(Tensor::new(&[b, 3], ctx)?),
        };
        Ok(InputBatch {
            depth: Tensor::new(&[b, 1, 1, cfg.rays], depth)?,
            goal: Tensor::new(&[b, 3], goal)?,
            prev_action: Tensor::new(&[b, 2], act)?,
            context,
        })
    }

    /// Depth feature `[B, F]`.
    pub fn encode_depth(&self, t: &mut Tape, depth: Var) -> Var {
        let mut y = depth;
        for c in &self.net.depth.convs {
            y = c.forward(t, y);
            y = t.relu(y);
        }
        let b = t.shape(y)[0];
        let n = t.value(y).len() / b;
        let y = t.reshape(y, &[b, n]);
        let f = self.net.depth.proj.forward(t, y);
        t.relu(f)
    }

    /// Context feature `[B, F]` from a raster `[B, 2, N, N]` or waypoint encoding `[B, 3]`.
    pub fn encode_context(&self, t: &mut Tape, ctx: Var) -> Result<Var, NnError> {
        let net = self.net.context.as_ref().ok_or_else(|| NnError::Config("policy has no context branch".into()))?;
        Ok(match &net.encoder {
            ContextEncoder::Raster(m) => m.forward(t, ctx),
            ContextEncoder::Waypoint(fc1, fc2) => {
                let h = fc1.forward(t, ctx);
                let h = t.relu(h);
                let f = fc2.forward(t, h);
                t.relu(f)
            }
        })
    }

    /// One recurrent step on tape. `h_a`/`h_b` are `[B, hidden]`.
    pub fn forward(&self, t: &mut Tape, input: &InputBatch, h_a: Var, h_b: Option<Var>) -> Result<StepVars, NnError> {
        let cfg = &self.config;
        let b = input.depth.shape()[0];
        let depth = t.input(input.depth.clone());
        let d = self.encode_depth(t, depth);
        let goal = t.input(input.goal.clone());
        let g = self.net.goal.forward(t, goal);
        let act = t.input(input.prev_action.clone());
        let a = self.net.action.forward(t, act);
        let xa = t.concat(&[d, g, a]);
        let h_a = self.net.gru_a.forward(t, xa, h_a);
        let (top, h_b) = match &self.net.context {
            None => (h_a, None),
            Some(net) => {
                let ctx = input.context.clone().ok_or_else(|| NnError::Config("missing context input".into()))?;
                let h_b = h_b.ok_or_else(|| NnError::Config("missing second recurrent state".into()))?;
                let ctx = t.input(ctx);
                let c = self.encode_context(t, ctx)?;
                let (s, dk) = (cfg.tokens, cfg.token_dim());
                let c_tok = t.reshape(c, &[b, s, dk]);
                let d_tok = t.reshape(d, &[b, s, dk]);
                let per_token = |t: &mut Tape, lin: &Linear, x: Var| {
                    let flat = t.reshape(x, &[b * s, dk]);
                    let y = lin.forward(t, flat);
                    t.reshape(y, &[b, s, dk])
                };
                let q_h = net.q_h.forward(t, h_a);
                let k_c = per_token(t, &net.k_c, c_tok);
                let (c_attn, _) = scaled_dot_attention(t, q_h, k_c, c_tok)?;
                let c_mean = t.mean_axis(c_tok, 1);
                let q_c = net.q_c.forward(t, c_mean);
                let k_d = per_token(t, &net.k_d, d_tok);
                let (d_attn, _) = scaled_dot_attention(t, q_c, k_d, d_tok)?;
                let xb = t.concat(&[c_attn, d_attn, g, a, h_a]);
                let h_b = net.gru_b.forward(t, xb, h_b);
                (h_b, Some(h_b))
            }
        };
        let (mu, sigma) = self.net.head.forward(t, top);
        let v = self.net.value.forward(t, top);
        let value = t.reshape(v, &[b]);
        Ok(StepVars { mu, sigma, value, h_a, h_b })
    }

    /// Batched inference step; updates `states` in place.
    pub fn step(&self, obs: &[&ObservationBundle], states: &mut [&mut RecurrentState]) -> Result<Vec<PolicyStep>, NnError> {
        assert_eq!(obs.len(), states.len());
        let input = self.batch(obs)?;
        self.step_batch(&input, states)
    }

    /// One recurrent step on an already assembled batch; updates `states` in place.
    pub fn step_batch(&self, input: &InputBatch, states: &mut [&mut RecurrentState]) -> Result<Vec<PolicyStep>, NnError> {
        let b = input.depth.shape()[0];
        assert_eq!(b, states.len());
        let hd = self.config.hidden;
        let mut t = Tape::new(&self.params);
        let ha: Vec<f32> = states.iter().flat_map(|s| s.h_a.iter().copied()).collect();
        let h_a = t.input(Tensor::new(&[b, hd], ha)?);
        let h_b = if self.config.kind.has_context() {
            let hb: Vec<f32> = states.iter().flat_map(|s| s.h_b.iter().copied()).collect();
            Some(t.input(Tensor::new(&[b, hd], hb)?))
        } else {
            None
        };
        let out = self.forward(&mut t, input, h_a, h_b)?;
        let (mu, sigma, value) = (t.value(out.mu).data(), t.value(out.sigma).data(), t.value(out.value).data());
        let (na, nb) = (t.value(out.h_a).data(), out.h_b.map(|v| t.value(v).data()));
        let mut res = Vec::with_capacity(b);
        for (i, s) in states.iter_mut().enumerate() {
            s.h_a.copy_from_slice(&na[i * hd..(i + 1) * hd]);
            if let Some(nb) = nb {
                s.h_b.copy_from_slice(&nb[i * hd..(i + 1) * hd]);
            }
            res.push(PolicyStep {
                mu: [mu[2 * i], mu[2 * i + 1]],
                sigma: [sigma[2 * i], sigma[2 * i + 1]],
                value: value[i],
            });
        }
        Ok(res)
    }
}

/// Maps a normalized action to velocities, clipping to `[−1, 1]` first.
pub fn action_to_velocity(a: [f64; 2]) -> VelocityAction {
    VelocityAction::new(a[0].clamp(-1.0, 1.0) * MAX_LINEAR, a[1].clamp(-1.0, 1.0) * MAX_ANGULAR)
}

pub fn velocity_to_action(v: VelocityAction) -> [f64; 2] {
    [v.linear / MAX_LINEAR, v.angular / MAX_ANGULAR]
}

const STEER_GAIN: f64 = 1.0;
pub const WAYPOINT_STOP_RADIUS: f64 = 0.2;

fn steer_toward(theta: f64) -> VelocityAction {
    let w = (STEER_GAIN * theta).clamp(-MAX_ANGULAR, MAX_ANGULAR);
    VelocityAction::new(MAX_LINEAR * theta.cos().max(0.0), w)
}

/// Turn toward the goal, drive when facing it. Ignores depth.
pub fn scripted_beeline(goal: &GoalEncoding) -> VelocityAction {
    let [_, c, s] = goal.0;
    steer_toward(s.atan2(c))
}

/// Same law as the beeline on the current waypoint; stops once the final
/// waypoint is within 0.2 m.
pub fn scripted_waypoint_follower(wp: PolarGoal, is_final: bool) -> VelocityAction {
    if is_final && wp.r <= WAYPOINT_STOP_RADIUS {
        return VelocityAction::ZERO;
    }
    steer_toward(wp.theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::encode_goal;
    use crate::geometry::Point;
    use crate::kinematics::Pose;
    use crate::nn::{grad_check, ParamId};
    use rand::Rng;

    fn random_obs(cfg: &PolicyConfig, seed: u64) -> ObservationBundle {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.context.size;
        let context = match cfg.kind {
            PolicyKind::NoContext => ContextInput::None,
            PolicyKind::Waypoint => ContextInput::Waypoint(PolarGoal { r: r.random_range(0.0..2.0), theta: r.random_range(-3.0..3.0) }),
            _ => ContextInput::Raster(ContextObservation {
                size: n,
                cell_m: 0.1,
                data: (0..2 * n * n).map(|_| if r.random_bool(0.5) { 1.0 } else { 0.0 }).collect(),
            }),
        };
        ObservationBundle {
            depth: DepthScan { rays: (0..cfg.rays).map(|_| r.random_range(0.0..1.0)).collect(), fov: 2.0, max_range: 3.5 },
            goal: encode_goal(&Pose::new(0.0, 0.0, r.random_range(-3.0..3.0)), Point::new(r.random_range(-4.0..4.0), 2.0)),
            prev_action: [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)],
            context,
        }
    }

    fn zero_params(p: &mut Policy) {
        for id in p.params.ids().collect::<Vec<_>>() {
            p.params.get_mut(id).data_mut().fill(0.0);
        }
    }

    #[test]
    fn zero_everything_gives_zero_outputs() {
        for kind in [PolicyKind::NoContext, PolicyKind::Map] {
            let cfg = PolicyConfig::tiny(kind);
            let mut p = Policy::new(cfg.clone(), 1).unwrap();
            zero_params(&mut p);
            let mut obs = random_obs(&cfg, 2);
            obs.depth.rays.fill(0.0);
            let mut s = RecurrentState::zeros(&cfg);
            let out = p.step(&[&obs], &mut [&mut s]).unwrap();
            assert_eq!(out[0].mu, [0.0, 0.0]);
            assert_eq!(out[0].value, 0.0);
        }
    }

    #[test]
    fn depth_changes_mu() {
        let cfg = PolicyConfig::tiny(PolicyKind::NoContext);
        let p = Policy::new(cfg.clone(), 3).unwrap();
        let a = random_obs(&cfg, 4);
        let mut b = a.clone();
        b.depth = random_obs(&cfg, 5).depth;
        let (mut s1, mut s2) = (RecurrentState::zeros(&cfg), RecurrentState::zeros(&cfg));
        let o1 = p.step(&[&a], &mut [&mut s1]).unwrap();
        let o2 = p.step(&[&b], &mut [&mut s2]).unwrap();
        assert_ne!(o1[0].mu, o2[0].mu);
    }

    #[test]
    fn deterministic_and_recurrent_consistent() {
        for kind in [PolicyKind::NoContext, PolicyKind::Map, PolicyKind::Waypoint] {
            let cfg = PolicyConfig::tiny(kind);
            let p = Policy::new(cfg.clone(), 7).unwrap();
            let o1 = random_obs(&cfg, 8);
            let o2 = random_obs(&cfg, 9);
            let mut s = RecurrentState::zeros(&cfg);
            p.step(&[&o1], &mut [&mut s]).unwrap();
            let stepped = p.step(&[&o2], &mut [&mut s]).unwrap();

            // Two-step unroll on one tape.
            let mut t = Tape::new(&p.params);
            let hd = cfg.hidden;
            let h_a = t.input(Tensor::zeros(&[1, hd]));
            let h_b = kind.has_context().then(|| t.input(Tensor::zeros(&[1, hd])));
            let first = p.forward(&mut t, &p.batch(&[&o1]).unwrap(), h_a, h_b).unwrap();
            let second = p.forward(&mut t, &p.batch(&[&o2]).unwrap(), first.h_a, first.h_b).unwrap();
            for j in 0..2 {
                assert!((t.value(second.mu).data()[j] - stepped[0].mu[j]).abs() <= 1e-6);
            }
            assert_eq!(t.value(second.h_a).data(), &s.h_a[..]);

            let mut s2 = RecurrentState::zeros(&cfg);
            p.step(&[&o1], &mut [&mut s2]).unwrap();
            assert_eq!(p.step(&[&o2], &mut [&mut s2]).unwrap(), stepped);
        }
    }

    #[test]
    fn context_reaches_head_and_blank_map_is_valid() {
        let cfg = PolicyConfig::tiny(PolicyKind::Map);
        let p = Policy::new(cfg.clone(), 11).unwrap();
        let structured = random_obs(&cfg, 12);
        let mut blank = structured.clone();
        if let ContextInput::Raster(r) = &mut blank.context {
            let n = r.size * r.size;
            r.data[..n].fill(1.0);
        }
        let (mut s1, mut s2) = (RecurrentState::zeros(&cfg), RecurrentState::zeros(&cfg));
        let a = p.step(&[&structured], &mut [&mut s1]).unwrap();
        let b = p.step(&[&blank], &mut [&mut s2]).unwrap();
        assert_ne!(a[0].mu, b[0].mu);
        assert!(b[0].mu.iter().chain(&b[0].sigma).all(|v| v.is_finite()));
    }

    #[test]
    fn context_kind_mismatch_is_an_error() {
        let cfg = PolicyConfig::tiny(PolicyKind::Map);
        let p = Policy::new(cfg.clone(), 1).unwrap();
        let obs = random_obs(&PolicyConfig::tiny(PolicyKind::NoContext), 2);
        assert!(p.batch(&[&obs]).is_err());
    }

    /// Random-signed weighted sum of every output over a short unroll.
    fn generic_loss(p: &Policy, t: &mut Tape, obs: &[ObservationBundle]) -> Var {
        let hd = p.config.hidden;
        let mut h_a = t.input(Tensor::zeros(&[1, hd]));
        let mut h_b = p.config.kind.has_context().then(|| t.input(Tensor::zeros(&[1, hd])));
        let mut r = ChaCha8Rng::seed_from_u64(99);
        let mut terms = Vec::new();
        for o in obs {
            let out = p.forward(t, &p.batch(&[o]).unwrap(), h_a, h_b).unwrap();
            h_a = out.h_a;
            h_b = out.h_b;
            for v in [out.mu, out.sigma, out.value, out.h_a].into_iter().chain(out.h_b) {
                let n = t.value(v).len();
                let w = Tensor::new(t.shape(v), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
                let w = t.input(w);
                let p = t.mul(v, w);
                terms.push(t.sum(p));
            }
        }
        let all = t.concat(&terms);
        t.sum(all)
    }

    #[test]
    fn map_encoder_receives_gradient() {
        let cfg = PolicyConfig::tiny(PolicyKind::Map);
        let p = Policy::new(cfg.clone(), 13).unwrap();
        let obs = vec![random_obs(&cfg, 14)];
        let mut t = Tape::new(&p.params);
        let loss = generic_loss(&p, &mut t, &obs);
        let g = t.backward(loss);
        let id = p.params.id("map.stem.w").unwrap();
        assert!(g.get(id).unwrap().norm_sq() > 0.0);
    }

    #[test]
    fn tiny_context_policy_grad_check() {
        let cfg = PolicyConfig::tiny(PolicyKind::Map);
        let mut p = Policy::new(cfg.clone(), 15).unwrap();
        let obs = vec![random_obs(&cfg, 16), random_obs(&cfg, 17)];
        let probe = p.clone();
        // A slightly larger step keeps f32 rounding in the loss below the tolerance.
        let err = grad_check(&mut p.params, 3e-3, |t| generic_loss(&probe, t, &obs));
        assert!(err < 1e-2, "{err}");
    }

    // Independent f64 re-implementation of the context forward pass.
    struct Oracle<'a> {
        p: &'a Policy,
    }

    impl Oracle<'_> {
        fn w(&self, name: &str) -> Vec<f64> {
            let id: ParamId = self.p.params.id(name).unwrap_or_else(|| panic!("{name}"));
            self.p.params.get(id).data().iter().map(|&v| v as f64).collect()
        }

        fn shape(&self, name: &str) -> Vec<usize> {
            self.p.params.get(self.p.params.id(name).unwrap()).shape().to_vec()
        }

        fn linear(&self, name: &str, x: &[f64]) -> Vec<f64> {
            let (w, b) = (self.w(&format!("{name}.w")), self.w(&format!("{name}.b")));
            let out = b.len();
            (0..out).map(|j| b[j] + x.iter().enumerate().map(|(i, xi)| xi * w[i * out + j]).sum::<f64>()).collect()
        }

        /// x: [C][H][W] → [O][OH][OW]
        fn conv(&self, name: &str, x: &[Vec<Vec<f64>>], stride: (usize, usize), pad: (usize, usize)) -> Vec<Vec<Vec<f64>>> {
            let s = self.shape(&format!("{name}.w"));
            let (o, c, kh, kw) = (s[0], s[1], s[2], s[3]);
            let (w, b) = (self.w(&format!("{name}.w")), self.w(&format!("{name}.b")));
            let (h, wd) = (x[0].len(), x[0][0].len());
            let oh = (h + 2 * pad.0 - kh) / stride.0 + 1;
            let ow = (wd + 2 * pad.1 - kw) / stride.1 + 1;
            (0..o)
                .map(|oc| {
                    (0..oh)
                        .map(|i| {
                            (0..ow)
                                .map(|j| {
                                    let mut acc = b[oc];
                                    for ci in 0..c {
                                        for a in 0..kh {
                                            for bb in 0..kw {
                                                let y = (i * stride.0 + a) as isize - pad.0 as isize;
                                                let xx = (j * stride.1 + bb) as isize - pad.1 as isize;
                                                if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                                                    acc += w[((oc * c + ci) * kh + a) * kw + bb] * x[ci][y as usize][xx as usize];
                                                }
                                            }
                                        }
                                    }
                                    acc
                                })
                                .collect()
                        })
                        .collect()
                })
                .collect()
        }

        fn group_norm(&self, name: &str, x: &mut [Vec<Vec<f64>>]) {
            let flat: Vec<f64> = x.iter().flatten().flatten().copied().collect();
            let n = flat.len() as f64;
            let mean = flat.iter().sum::<f64>() / n;
            let var = flat.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let (g, b) = (self.w(&format!("{name}.gamma")), self.w(&format!("{name}.beta")));
            for (c, ch) in x.iter_mut().enumerate() {
                for v in ch.iter_mut().flatten() {
                    *v = (*v - mean) / (var + 1e-5).sqrt() * g[c] + b[c];
                }
            }
        }

        fn relu3(x: &mut [Vec<Vec<f64>>]) {
            x.iter_mut().flatten().flatten().for_each(|v| *v = v.max(0.0));
        }

        fn gru(&self, name: &str, x: &[f64], h: &[f64]) -> Vec<f64> {
            let (wi, wh, bi, bh) =
                (self.w(&format!("{name}.w_ih")), self.w(&format!("{name}.w_hh")), self.w(&format!("{name}.b_ih")), self.w(&format!("{name}.b_hh")));
            let hd = h.len();
            let mv = |w: &[f64], v: &[f64], j: usize| v.iter().enumerate().map(|(i, vi)| vi * w[i * 3 * hd + j]).sum::<f64>();
            let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
            (0..hd)
                .map(|j| {
                    let r = sig(mv(&wi, x, j) + bi[j] + mv(&wh, h, j) + bh[j]);
                    let z = sig(mv(&wi, x, hd + j) + bi[hd + j] + mv(&wh, h, hd + j) + bh[hd + j]);
                    let n = (mv(&wi, x, 2 * hd + j) + bi[2 * hd + j] + r * (mv(&wh, h, 2 * hd + j) + bh[2 * hd + j])).tanh();
                    (1.0 - z) * n + z * h[j]
                })
                .collect()
        }

        fn attend(q: &[f64], k: &[Vec<f64>], v: &[Vec<f64>]) -> Vec<f64> {
            let dk = q.len() as f64;
            let scores: Vec<f64> = k.iter().map(|kr| kr.iter().zip(q).map(|(a, b)| a * b).sum::<f64>() / dk.sqrt()).collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            (0..v[0].len()).map(|j| e.iter().zip(v).map(|(w, vr)| w / z * vr[j]).sum()).collect()
        }

        fn forward(&self, o: &ObservationBundle, ha: &[f64], hb: &[f64]) -> (Vec<f64>, Vec<f64>, f64, Vec<f64>, Vec<f64>) {
            let cfg = &self.p.config;
            let relu = |v: Vec<f64>| v.into_iter().map(|x| x.max(0.0)).collect::<Vec<_>>();
            let mut x = vec![vec![o.depth.rays.clone()]];
            for i in 1..=3 {
                x = self.conv(&format!("depth.conv{i}"), &x, (1, 2), (0, 2));
                Self::relu3(&mut x);
            }
            let d = relu(self.linear("depth.proj", &x.iter().flatten().flatten().copied().collect::<Vec<_>>()));
            let g = self.linear("goal_embed", &o.goal.0);
            let a = self.linear("action_embed", &o.prev_action);
            let xa: Vec<f64> = d.iter().chain(&g).chain(&a).copied().collect();
            let ha = self.gru("gru_a", &xa, ha);
            let ContextInput::Raster(r) = &o.context else { panic!() };
            let n = r.size;
            let mut m: Vec<Vec<Vec<f64>>> = (0..2)
                .map(|c| (0..n).map(|i| (0..n).map(|j| r.data[(c * n + i) * n + j] as f64).collect()).collect())
                .collect();
            m = self.conv("map.stem", &m, (2, 2), (1, 1));
            self.group_norm("map.stem_norm", &mut m);
            Self::relu3(&mut m);
            for (bi, &(_, s)) in cfg.map.blocks.iter().enumerate() {
                let mut z = self.conv(&format!("map.block{bi}.conv1"), &m, (s, s), (1, 1));
                self.group_norm(&format!("map.block{bi}.norm1"), &mut z);
                Self::relu3(&mut z);
                let mut z = self.conv(&format!("map.block{bi}.conv2"), &z, (1, 1), (1, 1));
                self.group_norm(&format!("map.block{bi}.norm2"), &mut z);
                let skip = self.conv(&format!("map.block{bi}.shortcut"), &m, (s, s), (0, 0));
                for (zc, sc) in z.iter_mut().zip(&skip) {
                    for (zr, sr) in zc.iter_mut().zip(sc) {
                        for (zv, sv) in zr.iter_mut().zip(sr) {
                            *zv = (*zv + sv).max(0.0);
                        }
                    }
                }
                m = z;
            }
            let pooled: Vec<f64> = m.iter().map(|c| c.iter().flatten().sum::<f64>() / (c.len() * c[0].len()) as f64).collect();
            let c = relu(self.linear("map.proj", &pooled));
            let (s, dk) = (cfg.tokens, cfg.token_dim());
            let ctok: Vec<Vec<f64>> = (0..s).map(|i| c[i * dk..(i + 1) * dk].to_vec()).collect();
            let dtok: Vec<Vec<f64>> = (0..s).map(|i| d[i * dk..(i + 1) * dk].to_vec()).collect();
            let qh = self.linear("attn.q_h", &ha);
            let kc: Vec<Vec<f64>> = ctok.iter().map(|t| self.linear("attn.k_c", t)).collect();
            let c_attn = Self::attend(&qh, &kc, &ctok);
            let cmean: Vec<f64> = (0..dk).map(|j| ctok.iter().map(|t| t[j]).sum::<f64>() / s as f64).collect();
            let qc = self.linear("attn.q_c", &cmean);
            let kd: Vec<Vec<f64>> = dtok.iter().map(|t| self.linear("attn.k_d", t)).collect();
            let d_attn = Self::attend(&qc, &kd, &dtok);
            let xb: Vec<f64> = c_attn.iter().chain(&d_attn).chain(&g).chain(&a).chain(&ha).copied().collect();
            let hb = self.gru("gru_b", &xb, hb);
            let mu = self.linear("action_head.mu", &hb);
            let sigma = self
                .linear("action_head.sigma", &hb)
                .into_iter()
                .map(|v| v.max(0.0) + (-v.abs()).exp().ln_1p() + 1e-3)
                .collect();
            let value = self.linear("value_head", &hb)[0];
            (mu, sigma, value, ha, hb)
        }
    }

    #[test]
    fn tiny_context_forward_matches_f64_oracle() {
        let mut cfg = PolicyConfig::tiny(PolicyKind::Map);
        cfg.context.size = 10;
        let mut p = Policy::new(cfg.clone(), 21).unwrap();
        // Scale the heads up so the comparison is not dominated by tiny outputs.
        for name in ["action_head.mu.w", "action_head.sigma.w"] {
            let id = p.params.id(name).unwrap();
            p.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v *= 50.0);
        }
        let oracle = Oracle { p: &p };
        let mut s = RecurrentState::zeros(&cfg);
        let (mut ha, mut hb) = (vec![0.0; cfg.hidden], vec![0.0; cfg.hidden]);
        for k in 0..3 {
            let o = random_obs(&cfg, 30 + k);
            let got = p.step(&[&o], &mut [&mut s]).unwrap();
            let (mu, sigma, value, na, nb) = oracle.forward(&o, &ha, &hb);
            for j in 0..2 {
                assert!((got[0].mu[j] as f64 - mu[j]).abs() < 1e-5, "mu {} vs {}", got[0].mu[j], mu[j]);
                assert!((got[0].sigma[j] as f64 - sigma[j]).abs() < 1e-5);
            }
            assert!((got[0].value as f64 - value).abs() < 1e-5);
            ha = na;
            hb = nb;
            for (x, y) in s.h_a.iter().zip(&ha).chain(s.h_b.iter().zip(&hb)) {
                assert!((*x as f64 - y).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn scripted_controllers() {
        let pose = Pose::new(0.0, 0.0, 0.0);
        assert_eq!(scripted_beeline(&encode_goal(&pose, Point::new(3.0, 0.0))), VelocityAction::new(0.5, 0.0));
        let behind = scripted_beeline(&encode_goal(&pose, Point::new(-3.0, 0.0)));
        assert!(behind.linear.abs() < 1e-12);
        assert_eq!(behind.angular, 0.3);
        let g = GoalEncoding([1.0, 0.1f64.cos(), 0.1f64.sin()]);
        let a = scripted_beeline(&g);
        assert!((a.linear - 0.5 * 0.1f64.cos()).abs() < 1e-12 && (a.angular - 0.1).abs() < 1e-12);
        assert_eq!(scripted_waypoint_follower(PolarGoal { r: 1.0, theta: 0.0 }, false), VelocityAction::new(0.5, 0.0));
        assert_eq!(scripted_waypoint_follower(PolarGoal { r: 0.1, theta: 1.0 }, true), VelocityAction::ZERO);
        assert_eq!(action_to_velocity([2.0, -3.0]), VelocityAction::new(0.5, -0.3));
    }
}
