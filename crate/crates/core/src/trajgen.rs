//! Rule-based kinematic pretraining data: random layouts, straight-line
//! interpolation between subtask targets, and synthetic user commands that
//! point toward the current target.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{IlsaError, Result};
use crate::math::{self, mix_seed};
use crate::task::{subtask_target, SubtaskKind, TaskSpec};
use crate::types::{transition, Pose, Provenance, RobotAction, Step, StepSource, TaskState, Trajectory, UserAction};

/// Maximum layout draws before a task is declared unsatisfiable.
pub const MAX_LAYOUT_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub trajectories_per_task: usize,
    /// Per-step translational displacement, meters.
    pub step_norm: f64,
    /// Per-step rotational displacement bound, radians.
    pub rot_step: f64,
    pub rng_seed: u64,
    pub tie_epsilon: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            trajectories_per_task: 50,
            step_norm: 0.01,
            rot_step: 0.05,
            rng_seed: 0,
            tie_epsilon: 1e-6,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trajectories_per_task < 1 {
            return Err(IlsaError::config("trajectories_per_task must be >= 1"));
        }
        if !(self.step_norm > 0.0 && self.rot_step > 0.0) {
            return Err(IlsaError::config("step sizes must be positive"));
        }
        Ok(())
    }
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Draws a fresh layout: objects uniformly in their sampling regions, the end
/// effector at home with the gripper open.
pub fn sample_layout(task: &TaskSpec, rng: &mut impl Rng) -> TaskState {
    let objects = task
        .sampling_regions
        .iter()
        .map(|r| {
            Pose::at([
                uniform(rng, r.min[0], r.max[0]),
                uniform(rng, r.min[1], r.max[1]),
                uniform(rng, r.min[2], r.max[2]),
            ])
        })
        .collect();
    TaskState::new(task.home, objects)
}

/// Evenly spaced poses along the straight segment from `start` to `end`,
/// inclusive of both. The number of intervals is the smallest count that
/// keeps each translational step within `step_norm` and each per-axis
/// rotation within `rot_step`. Orientations follow the shortest angular path.
pub fn interpolate(start: &Pose, end: &Pose, step_norm: f64, rot_step: f64) -> Vec<Pose> {
    let dp = math::sub(end.position, start.position);
    let dr = math::angle_diff(start.orientation, end.orientation);
    let n_pos = (math::norm(dp) / step_norm - 1e-10).ceil().max(0.0) as usize;
    let n_rot = (math::max_abs(dr) / rot_step - 1e-10).ceil().max(0.0) as usize;
    let n = n_pos.max(n_rot);
    if n == 0 {
        return vec![*start];
    }
    let mut out = Vec::with_capacity(n + 1);
    out.push(*start);
    for k in 1..n {
        let f = k as f64 / n as f64;
        out.push(Pose {
            position: math::add(start.position, math::scale(dp, f)),
            orientation: math::wrap_angles(math::add(start.orientation, math::scale(dr, f))),
        });
    }
    out.push(Pose::new(end.position, end.orientation));
    out
}

/// Synthetic translational user command toward `target`: per axis, uniform
/// in [0, 1] when the target lies ahead, [-1, 0] when behind, and exactly 0
/// when the difference is within `tie_epsilon`.
pub fn synth_user_action(current: &Pose, target: &Pose, tie_epsilon: f64, rng: &mut impl Rng) -> UserAction {
    let mut t = [0.0; 3];
    for i in 0..3 {
        let d = target.position[i] - current.position[i];
        t[i] = if d > tie_epsilon {
            rng.random_range(0.0..=1.0)
        } else if d < -tie_epsilon {
            rng.random_range(-1.0..=0.0)
        } else {
            0.0
        };
    }
    UserAction::translate(t)
}

/// Kinematic rollout of every subtask from `initial`. Returns `None` when a
/// subtask target falls outside the workspace.
pub fn rollout_subtasks(
    task: &TaskSpec,
    initial: TaskState,
    cfg: &GenConfig,
    rng: &mut impl Rng,
) -> Result<Option<Vec<Step>>> {
    let mut state = initial;
    let mut steps = Vec::new();
    let mut last_target = state.ee;
    for spec in &task.subtasks {
        let target = subtask_target(spec, &state)?;
        if !task.workspace.contains(target.position) {
            return Ok(None);
        }
        append_segment(&mut steps, &mut state, &target, &target, cfg, rng);
        if matches!(spec.kind, SubtaskKind::Grasp | SubtaskKind::Release) {
            let mut user = synth_user_action(&state.ee, &target, cfg.tie_epsilon, rng);
            user.gripper_toggle = true;
            steps.push(Step {
                state: state.clone(),
                user,
                robot: RobotAction::zero(),
                source: StepSource::Synthetic,
                gate_cosine: None,
            });
            state = state.toggle_gripper(task.grasp_radius);
        }
        last_target = target;
    }
    let user = synth_user_action(&state.ee, &last_target, cfg.tie_epsilon, rng);
    steps.push(Step {
        state,
        user,
        robot: RobotAction::zero(),
        source: StepSource::Synthetic,
        gate_cosine: None,
    });
    Ok(Some(steps))
}

/// Appends the straight-line steps from the current end-effector pose to
/// `end` (exclusive of the final pose, which becomes the new `state`). User
/// commands point toward `aim`.
pub(crate) fn append_segment(
    steps: &mut Vec<Step>,
    state: &mut TaskState,
    end: &Pose,
    aim: &Pose,
    cfg: &GenConfig,
    rng: &mut impl Rng,
) {
    let poses = interpolate(&state.ee, end, cfg.step_norm, cfg.rot_step);
    for pair in poses.windows(2) {
        let robot = pair[0].delta_to(&pair[1]);
        let user = synth_user_action(&state.ee, aim, cfg.tie_epsilon, rng);
        let next = transition(state, &robot);
        steps.push(Step {
            state: std::mem::replace(state, next),
            user,
            robot,
            source: StepSource::Synthetic,
            gate_cosine: None,
        });
    }
}

/// Generates `trajectories_per_task` kinematic trajectories. Obstacles are
/// ignored. Trajectory `i` uses its own RNG stream derived from the seed.
pub fn generate_task_trajectories(task: &TaskSpec, cfg: &GenConfig) -> Result<Vec<Trajectory>> {
    task.validate()?;
    cfg.validate()?;
    (0..cfg.trajectories_per_task)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.rng_seed, i as u64));
            for _ in 0..MAX_LAYOUT_ATTEMPTS {
                let layout = sample_layout(task, &mut rng);
                if let Some(steps) = rollout_subtasks(task, layout, cfg, &mut rng)? {
                    return Ok(Trajectory {
                        task_id: task.name.clone(),
                        trial_index: i as u32,
                        seed: cfg.rng_seed,
                        provenance: Provenance::Kinematic,
                        steps,
                        aborted: false,
                    });
                }
            }
            Err(IlsaError::config(format!(
                "task {}: no valid layout after {MAX_LAYOUT_ATTEMPTS} attempts",
                task.name
            )))
        })
        .collect()
}

/// Number of steps the kinematic generator needs for the layout `initial`
/// (the reference path length used to judge autonomous completion).
pub fn reference_length(task: &TaskSpec, initial: &TaskState, cfg: &GenConfig) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    rollout_subtasks(task, initial.clone(), cfg, &mut rng)?
        .map(|s| s.len())
        .ok_or_else(|| IlsaError::config("layout has a target outside the workspace"))
}
