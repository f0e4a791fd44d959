//! Fine-tuning from interaction data: corrected trajectories, layered
//! supervision plans, partial updates, and the ablation variants.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{IlsaError, Result};
use crate::math::{self, Vec3};
use crate::nn::{all_partitions, Partition, PartitionSet};
use crate::policy::{samples_from, train, LossMask, Policy, Sample, TrainConfig};
use crate::trajgen::{interpolate, synth_user_action, GenConfig};
use crate::types::{advance, Provenance, Step, StepSource, Trajectory};

/// One user correction: the policy ran from `t0`, the user took over at
/// `t1`, and the policy resumed at `t2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverwriteEpisode {
    pub t0: usize,
    pub t1: usize,
    pub t2: usize,
    pub p_t0: Vec3,
    pub p_t1: Vec3,
    pub p_t2: Vec3,
}

/// Maximal runs of override steps, each paired with the policy run that led
/// into it. Policy runs are cut at gripper events, so a correction never
/// reaches back across a grasp or release. Runs made only of rotation-bypass
/// commands start their correction at `t1`.
pub fn find_overwrite_episodes(traj: &Trajectory) -> Vec<OverwriteEpisode> {
    let steps = &traj.steps;
    let n = steps.len();
    let mut out = Vec::new();
    let mut t = 0;
    while t < n {
        if steps[t].source != StepSource::UserOverride {
            t += 1;
            continue;
        }
        let t1 = t;
        while t < n && steps[t].source == StepSource::UserOverride {
            t += 1;
        }
        let t2 = t.min(n - 1);
        if t2 <= t1 {
            break;
        }
        // A pure rotation fix says nothing about the path that led there.
        let rotation_only = steps[t1..t].iter().all(|s| s.user.rotation_bypass.is_some());
        let mut t0 = t1;
        while !rotation_only
            && t0 > 0
            && steps[t0 - 1].source == StepSource::Policy
            && !steps[t0 - 1].user.gripper_toggle
        {
            t0 -= 1;
        }
        if let Some(prev) = out.last().map(|e: &OverwriteEpisode| e.t2) {
            t0 = t0.max(prev);
        }
        out.push(OverwriteEpisode {
            t0,
            t1,
            t2,
            p_t0: steps[t0].state.ee.position,
            p_t1: steps[t1].state.ee.position,
            p_t2: steps[t2].state.ee.position,
        });
    }
    out
}

/// Replaces every episode's `[t0, t2)` with the straight segment from
/// pose(t0) to pose(t2), with fresh synthetic user commands aimed at
/// pose(t2). Gripper events inside a replaced span move to the corrected step
/// nearest their original position; everything after is replayed only when
/// that happens. Other steps are copied verbatim.
pub fn build_corrected_trajectory(traj: &Trajectory, gen: &GenConfig, grasp_radius: f64, rng: &mut ChaCha8Rng) -> Trajectory {
    let episodes = find_overwrite_episodes(traj);
    let src = &traj.steps;
    let mut out: Vec<Step> = Vec::with_capacity(src.len());
    let mut replay = false;

    let copy = |out: &mut Vec<Step>, range: std::ops::Range<usize>, replay: bool| {
        for i in range {
            let mut s = src[i].clone();
            if replay {
                if let Some(prev) = out.last() {
                    s.state = advance(&prev.state, &prev.user, &prev.robot, grasp_radius);
                }
            }
            out.push(s);
        }
    };

    let mut cursor = 0;
    for ep in &episodes {
        copy(&mut out, cursor..ep.t0, replay);
        let mut state = match out.last() {
            Some(prev) if replay => advance(&prev.state, &prev.user, &prev.robot, grasp_radius),
            _ => src[ep.t0].state.clone(),
        };
        let end = src[ep.t2].state.ee;
        let poses = interpolate(&state.ee, &end, gen.step_norm, gen.rot_step);
        let toggles: Vec<Vec3> = src[ep.t0..ep.t2]
            .iter()
            .filter(|s| s.user.gripper_toggle)
            .map(|s| s.state.ee.position)
            .collect();
        let n_steps = (poses.len() - 1).max(if toggles.is_empty() { 0 } else { 1 });
        let mut toggle_count = vec![0usize; n_steps];
        for p in &toggles {
            let k = (0..n_steps)
                .min_by(|&a, &b| {
                    let da = math::norm(math::sub(poses[a].position, *p));
                    let db = math::norm(math::sub(poses[b].position, *p));
                    da.total_cmp(&db)
                })
                .expect("at least one corrected step");
            toggle_count[k] += 1;
        }
        for k in 0..n_steps {
            let robot = if k + 1 < poses.len() {
                poses[k].delta_to(&poses[k + 1])
            } else {
                crate::types::RobotAction::zero()
            };
            // Each event toggles once; an even number at one step cancels.
            let mut user = synth_user_action(&state.ee, &end, gen.tie_epsilon, rng);
            user.gripper_toggle = toggle_count[k] % 2 == 1;
            let next = advance(&state, &user, &robot, grasp_radius);
            out.push(Step {
                state,
                user,
                robot,
                source: StepSource::Synthetic,
                gate_cosine: None,
            });
            state = next;
        }
        replay |= !toggles.is_empty();
        cursor = ep.t2;
    }
    copy(&mut out, cursor..src.len(), replay);

    Trajectory {
        task_id: traj.task_id.clone(),
        trial_index: traj.trial_index,
        seed: traj.seed,
        provenance: Provenance::Corrected,
        steps: out,
        aborted: traj.aborted,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "ilsa")]
    Ilsa,
    #[serde(rename = "a")]
    A,
    #[serde(rename = "b1")]
    B1,
    #[serde(rename = "b2")]
    B2,
    #[serde(rename = "b3")]
    B3,
    #[serde(rename = "b4")]
    B4,
    #[serde(rename = "c1")]
    C1,
    #[serde(rename = "c2")]
    C2,
    /// The pretrained policy, never updated.
    #[serde(rename = "static")]
    Static,
}

impl Variant {
    /// The eight fine-tuning variants (the static baseline excluded).
    pub const FINETUNED: [Variant; 8] = [
        Variant::Ilsa,
        Variant::A,
        Variant::B1,
        Variant::B2,
        Variant::B3,
        Variant::B4,
        Variant::C1,
        Variant::C2,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Ilsa => "ilsa",
            Variant::A => "a",
            Variant::B1 => "b1",
            Variant::B2 => "b2",
            Variant::B3 => "b3",
            Variant::B4 => "b4",
            Variant::C1 => "c1",
            Variant::C2 => "c2",
            Variant::Static => "static",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = IlsaError;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        Variant::FINETUNED
            .into_iter()
            .chain([Variant::Static])
            .find(|v| v.as_str() == lower)
            .ok_or_else(|| IlsaError::config(format!("unknown variant '{s}'")))
    }
}

/// Partitions a variant is allowed to update.
pub fn trainable_partitions_for(variant: Variant) -> PartitionSet {
    match variant {
        Variant::C1 => all_partitions(),
        Variant::C2 => all_partitions()
            .into_iter()
            .filter(|p| *p != Partition::Transformer)
            .collect(),
        Variant::Static => BTreeSet::new(),
        _ => [Partition::Transformer].into_iter().collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub variant: Variant,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub b3_sample_count: usize,
    pub seed: u64,
    /// Interpolation used to build corrected segments.
    pub correction: GenConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            variant: Variant::Ilsa,
            epochs: 10,
            lr: 1e-4,
            batch_size: 32,
            b3_sample_count: 10,
            seed: 0,
            correction: GenConfig::default(),
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(IlsaError::config("fine-tune epochs must be >= 1"));
        }
        if self.variant == Variant::Static {
            return Err(IlsaError::config("the static baseline is never fine-tuned"));
        }
        self.correction.validate()
    }

    pub fn trainable_partitions(&self) -> PartitionSet {
        trainable_partitions_for(self.variant)
    }
}

/// One dataset of the fine-tuning plan and how it supervises the model.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanEntry {
    pub name: &'static str,
    pub trajectories: Vec<Trajectory>,
    pub mask: LossMask,
}

fn step_count(trajs: &[Trajectory]) -> usize {
    trajs.iter().map(|t| t.steps.len()).sum()
}

/// Dataset weights `(w_new, w_kinematic)` that give both sources equal total
/// weight while preserving the overall sample mass.
pub fn b4_weights(n_new: usize, n_kin: usize) -> (f64, f64) {
    let total = (n_new + n_kin) as f64;
    (0.5 * total / n_new as f64, 0.5 * total / n_kin as f64)
}

pub fn assemble_finetune_plan(
    cfg: &FinetuneConfig,
    new_trajs: &[Trajectory],
    pretrain_trajs: &[Trajectory],
    grasp_radius: f64,
) -> Result<Vec<PlanEntry>> {
    cfg.validate()?;
    if step_count(new_trajs) == 0 {
        return Err(IlsaError::precondition("fine-tuning needs new interaction data"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let corrected = || -> Vec<Trajectory> {
        let mut crng = ChaCha8Rng::seed_from_u64(math::mix_seed(cfg.seed, 0xc0));
        new_trajs
            .iter()
            .map(|t| build_corrected_trajectory(t, &cfg.correction, grasp_radius, &mut crng))
            .collect()
    };
    let entry = |name, trajectories, mask| PlanEntry {
        name,
        trajectories,
        mask,
    };
    let plan = match cfg.variant {
        Variant::Ilsa | Variant::C1 | Variant::C2 => vec![
            entry("new", corrected(), LossMask::ALL),
            entry("pretrain", pretrain_trajs.to_vec(), LossMask::DEMO_M_ONLY),
        ],
        Variant::A => vec![
            entry("new", new_trajs.to_vec(), LossMask::ALL),
            entry("pretrain", pretrain_trajs.to_vec(), LossMask::DEMO_M_ONLY),
        ],
        Variant::B1 => vec![entry("new", corrected(), LossMask::ALL)],
        Variant::B2 => vec![
            entry("new", corrected(), LossMask::ALL),
            entry("pretrain", pretrain_trajs.to_vec(), LossMask::ALL),
        ],
        Variant::B3 => {
            let k = cfg.b3_sample_count.min(pretrain_trajs.len());
            let mut picked = sample(&mut rng, pretrain_trajs.len(), k).into_vec();
            picked.sort_unstable();
            vec![
                entry("new", corrected(), LossMask::ALL),
                entry("pretrain", picked.iter().map(|&i| pretrain_trajs[i].clone()).collect(), LossMask::ALL),
            ]
        }
        Variant::B4 => {
            let new = corrected();
            let (w_new, w_kin) = b4_weights(step_count(&new), step_count(pretrain_trajs).max(1));
            vec![
                entry("new", new, LossMask::ALL.with_weight(w_new)),
                entry("pretrain", pretrain_trajs.to_vec(), LossMask::ALL.with_weight(w_kin)),
            ]
        }
        Variant::Static => unreachable!("rejected by validate"),
    };
    Ok(plan.into_iter().filter(|e| step_count(&e.trajectories) > 0).collect())
}

pub fn plan_samples(plan: &[PlanEntry]) -> Vec<Sample> {
    plan.iter().flat_map(|e| samples_from(&e.trajectories, e.mask)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub variant: Variant,
    pub epoch_losses: Vec<f64>,
    pub changed_params: usize,
    pub changed_partitions: Vec<Partition>,
    pub samples: usize,
    pub wall_time_s: f64,
}

/// One incremental update. On failure the parameters are restored to their
/// values at entry.
pub fn finetune(
    policy: &mut Policy,
    cfg: &FinetuneConfig,
    new_trajs: &[Trajectory],
    pretrain_trajs: &[Trajectory],
    grasp_radius: f64,
    on_epoch: impl FnMut(usize, f64),
) -> Result<FinetuneReport> {
    let start = Instant::now();
    let plan = assemble_finetune_plan(cfg, new_trajs, pretrain_trajs, grasp_radius)?;
    let samples = plan_samples(&plan);
    let train_cfg = TrainConfig {
        epochs: cfg.epochs,
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        seed: math::mix_seed(cfg.seed, 0xf1),
    };
    let before = policy.params.clone();
    let losses = match train(policy, &samples, &cfg.trainable_partitions(), &train_cfg, on_epoch) {
        Ok(l) => l,
        Err(e) => {
            policy.params = before;
            return Err(e);
        }
    };
    Ok(FinetuneReport {
        variant: cfg.variant,
        epoch_losses: losses,
        changed_params: policy.params.changed_names(&before).len(),
        changed_partitions: policy.params.changed_partitions(&before).into_iter().collect(),
        samples: samples.len(),
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}
