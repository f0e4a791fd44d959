//! The two-headed action model and its four-term loss.
//!
//! Wiring: each entity (end effector, then every object in slot order) becomes
//! one token, embedded by the `state_embed` MLP plus a learned per-slot type
//! embedding. The transformer encodes the tokens; their mean is the state
//! encoding. The `intermediate_head` maps the encoding to `a_m`; the
//! `final_head` maps `encoding ⊕ a_m/scale ⊕ a_u` to `a_f`.
//!
//! Raw head outputs are bounded before use: the translational triple through
//! a radial tanh (so its norm stays below `trans_scale`), rotations through a
//! per-axis tanh scaled by `rot_scale`. Losses are taken in physical units.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{IlsaError, Result};
use crate::math::{self, Vec3};
use crate::nn::layers::{init_mlp, init_transformer, mlp, transformer};
use crate::nn::{Adam, AdamConfig, DropoutCtx, Graph, NodeId, ParamSet, Partition, PartitionSet, Tensor, TransformerDims};
use crate::types::{Provenance, RobotAction, TaskState, Trajectory, UserAction};

/// Per-token feature width: position, orientation, offset to the end
/// effector, gripper/grasp flag.
pub const TOKEN_FEATURES: usize = 10;

/// Offsets to the end effector are small; this brings them to unit scale.
const OFFSET_FEATURE_SCALE: f64 = 10.0;

const SE: &str = "state_embed";
const TF: &str = "transformer";
const IH: &str = "intermediate_head";
const FH: &str = "final_head";
const TYPE_EMBED: &str = "state_embed.type";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub object_count: usize,
    pub hidden: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub dropout: f64,
    /// Bound on the translational norm of a predicted action, meters.
    pub trans_scale: f64,
    /// Bound on each predicted rotational component, radians.
    pub rot_scale: f64,
    pub init_seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            alpha: 1.0,
            beta: 1.0,
            gamma: 100.0,
            delta: 100.0,
            object_count: 2,
            hidden: 128,
            d_model: 64,
            layers: 2,
            heads: 4,
            ffn: 128,
            dropout: 0.0,
            trans_scale: 0.015,
            rot_scale: 0.075,
            init_seed: 0,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.alpha, self.beta, self.gamma, self.delta].iter().any(|w| !(*w >= 0.0)) {
            return Err(IlsaError::config("loss weights must be non-negative"));
        }
        if self.hidden == 0 || self.d_model == 0 || self.ffn == 0 || self.layers == 0 {
            return Err(IlsaError::config("network widths and depth must be positive"));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(IlsaError::config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(IlsaError::config("dropout must lie in [0, 1)"));
        }
        if !(self.trans_scale > 0.0 && self.rot_scale > 0.0) {
            return Err(IlsaError::config("action scales must be positive"));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.object_count + 1
    }
}

/// Which loss terms are active for a dataset, and its weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossMask {
    pub demo_m: bool,
    pub demo_f: bool,
    pub direc: bool,
    pub order: bool,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

impl LossMask {
    pub const ALL: LossMask = LossMask {
        demo_m: true,
        demo_f: true,
        direc: true,
        order: true,
        weight: 1.0,
    };
    pub const DEMO_M_ONLY: LossMask = LossMask {
        demo_m: true,
        demo_f: false,
        direc: false,
        order: false,
        weight: 1.0,
    };

    pub fn with_weight(mut self, weight: f64) -> Self {
        self.weight = weight;
        self
    }

    pub fn any_active(&self) -> bool {
        self.demo_m || self.demo_f || self.direc || self.order
    }

    fn flags(&self) -> [f64; 4] {
        [self.demo_m, self.demo_f, self.direc, self.order].map(|b| if b { 1.0 } else { 0.0 })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub intermediate: RobotAction,
    pub final_action: RobotAction,
    pub encoding: Tensor,
}

/// `‖pred − target‖²` over all six components.
pub fn loss_demo(pred: &RobotAction, target: &RobotAction) -> f64 {
    pred.delta.iter().zip(&target.delta).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Magnitude of every translational component of `a_f` whose sign opposes
/// the user's command on that axis.
pub fn loss_direc(final_action: &RobotAction, user: &UserAction) -> f64 {
    let f = final_action.translation();
    (0..3)
        .filter(|&i| f[i] * user.translation[i] < 0.0)
        .map(|i| f[i].abs())
        .sum()
}

const PAIRS: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

/// Pairwise penalty on axes whose magnitude ordering in `a_f` contradicts the
/// ordering in the user's command.
pub fn loss_order(final_action: &RobotAction, user: &UserAction) -> f64 {
    let f = final_action.translation().map(f64::abs);
    let u = user.translation.map(f64::abs);
    PAIRS
        .iter()
        .map(|&(i, j)| {
            let df = f[i] - f[j];
            if df * (u[i] - u[j]) < 0.0 {
                df.abs()
            } else {
                0.0
            }
        })
        .sum()
}

/// Expresses a physical action in the network's output units, where the
/// largest step the squash allows has unit size.
pub fn to_action_units(a: &RobotAction, cfg: &PolicyConfig) -> RobotAction {
    let mut d = a.delta;
    d[..3].iter_mut().for_each(|v| *v /= cfg.trans_scale);
    d[3..].iter_mut().for_each(|v| *v /= cfg.rot_scale);
    RobotAction::new(d)
}

/// Weighted, masked sum of the four terms for one sample, evaluated in action
/// units (the mask's dataset weight is not applied here).
pub fn loss_total(out: &PolicyOutput, target: &RobotAction, user: &UserAction, cfg: &PolicyConfig, mask: &LossMask) -> f64 {
    let out = PolicyOutput {
        intermediate: to_action_units(&out.intermediate, cfg),
        final_action: to_action_units(&out.final_action, cfg),
        encoding: Tensor::zeros(0, 0),
    };
    let target = &to_action_units(target, cfg);
    let mut total = 0.0;
    if mask.demo_m {
        total += cfg.alpha * loss_demo(&out.intermediate, target);
    }
    if mask.demo_f {
        total += cfg.beta * loss_demo(&out.final_action, target);
    }
    if mask.direc {
        total += cfg.gamma * loss_direc(&out.final_action, user);
    }
    if mask.order {
        total += cfg.delta * loss_order(&out.final_action, user);
    }
    total
}

/// Token features for one state, `[tokens × TOKEN_FEATURES]`.
pub fn state_features(state: &TaskState, object_count: usize) -> Result<Tensor> {
    if state.objects.len() != object_count {
        return Err(IlsaError::precondition(format!(
            "state has {} objects, model expects {object_count}",
            state.objects.len()
        )));
    }
    let mut t = Tensor::zeros(object_count + 1, TOKEN_FEATURES);
    write_features(state, t.data_mut());
    Ok(t)
}

fn write_features(state: &TaskState, out: &mut [f64]) {
    let ee = state.ee.position;
    let fill = |row: &mut [f64], pos: Vec3, ori: Vec3, off: Vec3, flag: bool| {
        row[0..3].copy_from_slice(&pos);
        row[3..6].copy_from_slice(&ori);
        row[6..9].copy_from_slice(&math::scale(off, OFFSET_FEATURE_SCALE));
        row[9] = if flag { 1.0 } else { 0.0 };
    };
    fill(&mut out[0..TOKEN_FEATURES], ee, state.ee.orientation, [0.0; 3], state.gripper_closed);
    for (k, o) in state.objects.iter().enumerate() {
        let row = &mut out[(k + 1) * TOKEN_FEATURES..(k + 2) * TOKEN_FEATURES];
        fill(row, o.position, o.orientation, math::sub(o.position, ee), state.grasped == Some(k));
    }
}

/// One supervised example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub state: TaskState,
    pub user: Vec3,
    pub target: RobotAction,
    pub mask: LossMask,
}

pub fn samples_from(trajs: &[Trajectory], mask: LossMask) -> Vec<Sample> {
    trajs
        .iter()
        .flat_map(|t| t.steps.iter())
        .map(|s| Sample {
            state: s.state.clone(),
            user: s.user.translation,
            target: s.robot,
            mask,
        })
        .collect()
}

fn unit_scale(cfg: &PolicyConfig, rows: usize) -> Tensor {
    let mut t = Tensor::zeros(rows, 6);
    for i in 0..rows {
        t.row_mut(i)[..3].fill(1.0 / cfg.trans_scale);
        t.row_mut(i)[3..].fill(1.0 / cfg.rot_scale);
    }
    t
}

/// Graph nodes of a batched forward pass.
pub struct BatchNodes {
    pub encoding: NodeId,
    pub intermediate: NodeId,
    pub final_action: NodeId,
}

/// Graph nodes of a batched loss, with per-term batch sums for reporting.
pub struct LossNodes {
    pub total: NodeId,
    pub terms: NodeId,
}

#[derive(Debug, Clone)]
pub struct Policy {
    pub cfg: PolicyConfig,
    pub params: ParamSet,
}

impl Policy {
    pub fn new(cfg: PolicyConfig) -> Result<Policy> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut params = ParamSet::new();
        let (h, d) = (cfg.hidden, cfg.d_model);
        init_mlp(&mut params, SE, Partition::StateEmbed, [TOKEN_FEATURES, h, h, d], &mut rng)?;
        params.insert(
            TYPE_EMBED,
            Partition::StateEmbed,
            crate::nn::params::glorot(cfg.tokens(), d, 1.0, &mut rng),
        )?;
        let dims = TransformerDims {
            d_model: d,
            layers: cfg.layers,
            heads: cfg.heads,
            ffn: cfg.ffn,
        };
        init_transformer(&mut params, TF, dims, &mut rng)?;
        init_mlp(&mut params, IH, Partition::IntermediateHead, [d, h, h, 6], &mut rng)?;
        init_mlp(&mut params, FH, Partition::FinalHead, [d + 9, h, h, 6], &mut rng)?;
        Ok(Policy { cfg, params })
    }

    /// Rebuilds a policy from stored parameters, checking that every tensor
    /// the configuration expects is present with the right shape.
    pub fn from_parts(cfg: PolicyConfig, params: ParamSet) -> Result<Policy> {
        let reference = Policy::new(cfg.clone())?;
        for e in reference.params.entries() {
            let got = params.get(&e.name)?;
            if !got.same_shape(&e.value) {
                return Err(IlsaError::structural(
                    format!("checkpoint parameter '{}'", e.name),
                    format!("expected {:?}, found {:?}", e.value.shape(), got.shape()),
                ));
            }
            if params.entry(params.id(&e.name)?).partition != e.partition {
                return Err(IlsaError::Format(format!("parameter '{}' has the wrong partition", e.name)));
            }
        }
        if params.len() != reference.params.len() {
            return Err(IlsaError::Format("checkpoint carries unexpected parameters".into()));
        }
        Ok(Policy { cfg, params })
    }

    /// Records the batched forward pass for `states`/`users` on `g`.
    pub fn forward_graph(&self, g: &mut Graph, states: &[&TaskState], users: &[Vec3]) -> Result<BatchNodes> {
        let cfg = &self.cfg;
        let tokens = cfg.tokens();
        let b = states.len();
        let mut feats = Tensor::zeros(b * tokens, TOKEN_FEATURES);
        for (i, s) in states.iter().enumerate() {
            if s.objects.len() != cfg.object_count {
                return Err(IlsaError::precondition(format!(
                    "state has {} objects, model expects {}",
                    s.objects.len(),
                    cfg.object_count
                )));
            }
            let span = tokens * TOKEN_FEATURES;
            write_features(s, &mut feats.data_mut()[i * span..(i + 1) * span]);
        }
        let x = g.constant(feats);
        let e = mlp(g, SE, x)?;
        let ty = g.param(TYPE_EMBED)?;
        let e = g.add_tiled(e, ty)?;
        let h = transformer(g, TF, e, tokens, cfg.heads, cfg.layers)?;
        let enc = g.mean_groups(h, tokens)?;

        let raw_m = mlp(g, IH, enc)?;
        let a_m = g.action_squash(raw_m, cfg.trans_scale, cfg.rot_scale)?;
        let mut user = Tensor::zeros(b, 3);
        for i in 0..b {
            user.row_mut(i).copy_from_slice(&users[i]);
        }
        let a_m_unit = g.mul_const(a_m, unit_scale(cfg, b))?;
        let u = g.constant(user);
        let head_in = g.concat_cols(&[enc, a_m_unit, u])?;
        let raw_f = mlp(g, FH, head_in)?;
        let a_f = g.action_squash(raw_f, cfg.trans_scale, cfg.rot_scale)?;
        Ok(BatchNodes {
            encoding: enc,
            intermediate: a_m,
            final_action: a_f,
        })
    }

    pub fn forward(&self, state: &TaskState, user: &UserAction) -> Result<PolicyOutput> {
        let mut g = Graph::inference(&self.params);
        let n = self.forward_graph(&mut g, &[state], &[user.translation])?;
        let row = |id| -> [f64; 6] { g.value(id).row(0).try_into().expect("six columns") };
        Ok(PolicyOutput {
            intermediate: RobotAction::new(row(n.intermediate)),
            final_action: RobotAction::new(row(n.final_action)),
            encoding: g.value(n.encoding).clone(),
        })
    }

    /// Writes a checkpoint whose metadata records the configuration.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let meta = serde_json::json!({ "policy": self.cfg });
        crate::nn::checkpoint::save(path, &self.params, &meta)
    }

    pub fn load(path: &std::path::Path) -> Result<Policy> {
        let (params, meta) = crate::nn::checkpoint::load(path)?;
        let cfg = meta
            .get("policy")
            .cloned()
            .ok_or_else(|| IlsaError::Format(format!("{}: checkpoint has no policy config", path.display())))?;
        let cfg: PolicyConfig = serde_json::from_value(cfg)
            .map_err(|e| IlsaError::Format(format!("{}: {e}", path.display())))?;
        Policy::from_parts(cfg, params)
    }

    pub fn encode_state(&self, state: &TaskState) -> Result<Tensor> {
        Ok(self.forward(state, &UserAction::idle())?.encoding)
    }

    /// Records the masked, weighted loss of `batch` on `g`, divided by `norm`.
    pub fn loss_graph(&self, g: &mut Graph, batch: &[&Sample], norm: f64) -> Result<LossNodes> {
        let cfg = &self.cfg;
        let b = batch.len();
        let states: Vec<&TaskState> = batch.iter().map(|s| &s.state).collect();
        let users: Vec<Vec3> = batch.iter().map(|s| s.user).collect();
        let n = self.forward_graph(g, &states, &users)?;

        // Losses are taken in action units so the demonstration terms are
        // commensurate with the direction and order terms.
        let mut target = Tensor::zeros(b, 6);
        for (i, s) in batch.iter().enumerate() {
            target.row_mut(i).copy_from_slice(&to_action_units(&s.target, cfg).delta);
        }
        let target = g.constant(target);
        let a_m = g.mul_const(n.intermediate, unit_scale(cfg, b))?;
        let a_f = g.mul_const(n.final_action, unit_scale(cfg, b))?;
        let dm = g.sub(a_m, target)?;
        let dm = g.square(dm);
        let dm = g.row_sum(dm);
        let df = g.sub(a_f, target)?;
        let df = g.square(df);
        let df = g.row_sum(df);

        // Indicator gates are evaluated on current values and held constant.
        let af = g.slice_cols(a_f, 0, 3)?;
        let af_vals = g.value(af).clone();
        let mut dir_gate = Tensor::zeros(b, 3);
        let mut ord_gate = Tensor::zeros(b, 3);
        for (i, s) in batch.iter().enumerate() {
            let f = af_vals.row(i);
            let u = s.user;
            for k in 0..3 {
                if f[k] * u[k] < 0.0 {
                    dir_gate.set(i, k, 1.0);
                }
            }
            for (c, &(p, q)) in PAIRS.iter().enumerate() {
                if (f[p].abs() - f[q].abs()) * (u[p].abs() - u[q].abs()) < 0.0 {
                    ord_gate.set(i, c, 1.0);
                }
            }
        }
        let af_abs = g.abs(af);
        let dir = g.mul_const(af_abs, dir_gate)?;
        let dir = g.row_sum(dir);

        // Columns of P form the pairwise differences |f_p| − |f_q|.
        let pairs = g.constant(Tensor::from_vec(3, 3, vec![1.0, 1.0, 0.0, -1.0, 0.0, 1.0, 0.0, -1.0, -1.0])?);
        let diffs = g.matmul(af_abs, pairs)?;
        let diffs = g.abs(diffs);
        let ord = g.mul_const(diffs, ord_gate)?;
        let ord = g.row_sum(ord);

        let terms = g.concat_cols(&[dm, df, dir, ord])?;
        let coef = [cfg.alpha, cfg.beta, cfg.gamma, cfg.delta];
        let mut w = Tensor::zeros(b, 4);
        for (i, s) in batch.iter().enumerate() {
            let flags = s.mask.flags();
            for k in 0..4 {
                w.set(i, k, s.mask.weight * coef[k] * flags[k] / norm);
            }
        }
        let total = g.weighted_sum(terms, w)?;
        Ok(LossNodes { total, terms })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 150,
            lr: 1e-3,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(IlsaError::config("epochs and batch_size must be >= 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(IlsaError::config("learning rate must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Mean weighted per-sample loss of each epoch.
pub type LossHistory = Vec<f64>;

/// Minibatch Adam over `samples`, updating only `trainable` partitions.
/// Each epoch reshuffles with a seeded stream; batch losses are normalised by
/// the nominal batch size. `on_epoch(epoch, mean_loss)` runs after each
/// epoch, counting from 1. A non-finite loss or gradient aborts with a training error; the
/// caller owns any rollback.
pub fn train(
    policy: &mut Policy,
    samples: &[Sample],
    trainable: &PartitionSet,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<LossHistory> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(IlsaError::precondition("training set is empty"));
    }
    let mut opt = Adam::new(&policy.params, AdamConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let norm = cfg.batch_size as f64;
    let dropout_seed = math::mix_seed(cfg.seed, 0xd0);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let grads = {
                let ctx = DropoutCtx {
                    prob: policy.cfg.dropout,
                    rng: ChaCha8Rng::seed_from_u64(math::mix_seed(dropout_seed, (epoch * 1_000_003 + bi) as u64)),
                };
                let mut g = Graph::new(&policy.params, trainable).with_dropout(Some(ctx));
                let loss = policy.loss_graph(&mut g, &batch, norm)?;
                let value = g.value(loss.total).item();
                if !value.is_finite() {
                    return Err(IlsaError::Training {
                        reason: format!("non-finite loss at epoch {}", epoch + 1),
                        param: "<loss>".into(),
                    });
                }
                total += value * norm;
                g.backward(loss.total)?
            };
            if let Some(name) = grads.first_non_finite(&policy.params) {
                return Err(IlsaError::Training {
                    reason: format!("non-finite gradient at epoch {}", epoch + 1),
                    param: name,
                });
            }
            opt.step(&mut policy.params, &grads, cfg.lr);
        }
        let mean = total / samples.len() as f64;
        history.push(mean);
        on_epoch(epoch + 1, mean);
    }
    Ok(history)
}

/// Trains a fresh policy on kinematic demonstrations with the full loss.
pub fn pretrain(
    policy_cfg: PolicyConfig,
    dataset: &[Trajectory],
    train_cfg: &TrainConfig,
    on_epoch: impl FnMut(usize, f64),
) -> Result<(Policy, LossHistory)> {
    if dataset.iter().all(|t| t.steps.is_empty()) {
        return Err(IlsaError::precondition("pretraining dataset is empty"));
    }
    if let Some(t) = dataset.iter().find(|t| t.provenance != Provenance::Kinematic) {
        return Err(IlsaError::precondition(format!(
            "pretraining expects kinematic trajectories, got {:?} ({}:{})",
            t.provenance, t.task_id, t.trial_index
        )));
    }
    let mut policy = Policy::new(policy_cfg)?;
    let samples = samples_from(dataset, LossMask::ALL);
    let history = train(&mut policy, &samples, &crate::nn::all_partitions(), train_cfg, on_epoch)?;
    Ok((policy, history))
}

/// Mean weighted loss of `samples` under the current parameters, without
/// touching them.
pub fn evaluate_loss(policy: &Policy, samples: &[Sample], batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch: Vec<&Sample> = chunk.iter().collect();
        let mut g = Graph::inference(&policy.params);
        let loss = policy.loss_graph(&mut g, &batch, 1.0)?;
        total += g.value(loss.total).item();
    }
    Ok(total / samples.len().max(1) as f64)
}
