//! Runtime shared control: cosine gating between the user's command and the
//! policy's final action, pause alerts, overrides, and the kinematic
//! evaluation environment the loop drives.

use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{IlsaError, Result};
use crate::math::{self, Vec3};
use crate::policy::Policy;
use crate::task::TaskSpec;
use crate::types::{advance, Provenance, RobotAction, Step, StepSource, TaskState, Trajectory, UserAction};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateConfig {
    pub cosine_threshold: f64,
    pub no_input_epsilon: f64,
    /// Ticks the robot holds still before accepting a disagreeing command.
    pub pause_ticks: usize,
    /// Minimum cosine with the pause-initiating command for the user to count
    /// as persisting.
    pub persistence_cosine: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            cosine_threshold: 0.5,
            no_input_epsilon: 1e-3,
            pause_ticks: 3,
            persistence_cosine: 0.9,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.cosine_threshold) || !(-1.0..=1.0).contains(&self.persistence_cosine) {
            return Err(IlsaError::config("cosine thresholds must lie in [-1, 1]"));
        }
        if self.pause_ticks < 1 {
            return Err(IlsaError::config("pause_ticks must be >= 1"));
        }
        if !(self.no_input_epsilon >= 0.0) {
            return Err(IlsaError::config("no_input_epsilon must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateOutcome {
    ExecuteFinal,
    Pause,
    ExecuteUser,
    ExecuteFinalNoInput,
    ExecuteRotationBypass,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub outcome: GateOutcome,
    pub cosine: Option<f64>,
}

/// Pause bookkeeping carried between ticks.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PauseState {
    pub counter: usize,
    /// The command that opened the current pause.
    pub reference: Option<Vec3>,
}

impl PauseState {
    fn reset(&mut self) {
        *self = PauseState::default();
    }
}

/// Decides what to execute this tick. Only directions matter: the cosine is
/// scale-free and the no-input test is the only magnitude check.
pub fn gate(user: &UserAction, final_action: &RobotAction, cfg: &GateConfig, pause: &mut PauseState) -> GateDecision {
    if user.rotation_bypass.is_some() {
        pause.reset();
        return GateDecision {
            outcome: GateOutcome::ExecuteRotationBypass,
            cosine: None,
        };
    }
    let u = user.translation;
    if math::norm(u) < cfg.no_input_epsilon {
        pause.reset();
        return GateDecision {
            outcome: GateOutcome::ExecuteFinalNoInput,
            cosine: None,
        };
    }
    // A motionless final action offers no direction to agree with.
    let cos = math::cosine(u, final_action.translation()).unwrap_or(0.0);
    if cos >= cfg.cosine_threshold {
        pause.reset();
        return GateDecision {
            outcome: GateOutcome::ExecuteFinal,
            cosine: Some(cos),
        };
    }
    let persisting = pause
        .reference
        .and_then(|r| math::cosine(u, r))
        .is_some_and(|c| c >= cfg.persistence_cosine);
    let outcome = if !persisting {
        pause.reference = Some(u);
        pause.counter = 1;
        GateOutcome::Pause
    } else if pause.counter < cfg.pause_ticks {
        pause.counter += 1;
        GateOutcome::Pause
    } else {
        GateOutcome::ExecuteUser
    };
    GateDecision {
        outcome,
        cosine: Some(cos),
    }
}

/// Maps a granted user command to a delta: translation scaled by `max_step`,
/// or the rotation bypass passed through unchanged.
pub fn user_to_robot_action(user: &UserAction, max_step: f64) -> RobotAction {
    match user.rotation_bypass {
        Some(r) => RobotAction::from_parts([0.0; 3], r),
        None => RobotAction::from_parts(math::scale(user.translation, max_step), [0.0; 3]),
    }
}

/// Backoff from an obstacle surface when a motion is truncated, meters.
pub const CONTACT_BACKOFF: f64 = 1e-6;

/// Kinematic world with workspace bounds, box obstacles and subtask progress.
#[derive(Debug, Clone)]
pub struct Env {
    task: TaskSpec,
    state: TaskState,
    progress: usize,
    collisions: usize,
}

impl Env {
    pub fn new(task: TaskSpec, initial: TaskState) -> Result<Env> {
        task.validate()?;
        if initial.objects.len() != task.object_count {
            return Err(IlsaError::config(format!(
                "layout has {} objects, task {} declares {}",
                initial.objects.len(),
                task.name,
                task.object_count
            )));
        }
        let progress = task.next_incomplete(0, &initial)?;
        Ok(Env {
            task,
            state: initial,
            progress,
            collisions: 0,
        })
    }

    pub fn task(&self) -> &TaskSpec {
        &self.task
    }

    pub fn state(&self) -> &TaskState {
        &self.state
    }

    /// Index of the first incomplete subtask (equals the subtask count when
    /// done). Subtasks complete in order.
    pub fn progress(&self) -> usize {
        self.progress
    }

    pub fn is_complete(&self) -> bool {
        self.progress >= self.task.subtasks.len()
    }

    pub fn collisions(&self) -> usize {
        self.collisions
    }

    /// Clips a motion to the workspace and truncates it at the first obstacle
    /// it would enter. Returns the executable delta and whether it collided.
    pub fn clip_motion(&self, action: &RobotAction) -> (RobotAction, bool) {
        let start = self.state.ee.position;
        let end = self.task.workspace.clamp(math::add(start, action.translation()));
        let mut delta = math::sub(end, start);
        let len = math::norm(delta);
        let mut collided = false;
        if len > 0.0 {
            let hit = self
                .task
                .obstacles
                .iter()
                .filter_map(|b| b.segment_entry(start, end))
                .fold(None, |m: Option<f64>, t| Some(m.map_or(t, |m| m.min(t))));
            if let Some(t) = hit {
                collided = true;
                let keep = ((t * len - CONTACT_BACKOFF).max(0.0)) / len;
                delta = math::scale(delta, keep);
            }
        }
        (RobotAction::from_parts(delta, action.rotation()), collided)
    }

    /// Applies the gripper event then the (clipped) motion; returns the delta
    /// actually executed.
    pub fn step(&mut self, user: &UserAction, action: &RobotAction) -> Result<RobotAction> {
        let (executed, collided) = self.clip_motion(action);
        if collided {
            self.collisions += 1;
        }
        self.state = advance(&self.state, user, &executed, self.task.grasp_radius);
        self.progress = self.task.next_incomplete(self.progress, &self.state)?;
        Ok(executed)
    }
}

/// Anything that predicts `(a_m, a_f)` for a state and user command.
pub trait ActionModel {
    fn predict(&self, state: &TaskState, user: &UserAction) -> Result<(RobotAction, RobotAction)>;
}

impl ActionModel for Policy {
    fn predict(&self, state: &TaskState, user: &UserAction) -> Result<(RobotAction, RobotAction)> {
        let out = self.forward(state, user)?;
        Ok((out.intermediate, out.final_action))
    }
}

/// Source of user commands for a running trial.
pub trait InputSource {
    fn next_input(&mut self, state: &TaskState, task: &TaskSpec, progress: usize) -> Result<UserAction>;
}

/// Single-slot mailbox with latest-value semantics: a writer overwrites any
/// unread command, a reader always sees the most recent one.
#[derive(Debug, Clone, Default)]
pub struct LatestInput {
    slot: Arc<Mutex<Option<UserAction>>>,
    last: UserAction,
}

impl LatestInput {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn publish(&self, action: UserAction) {
        *self.slot.lock().unwrap_or_else(|e| e.into_inner()) = Some(action);
    }

    /// Drops any unread command and forgets the last one.
    pub fn reset(&mut self) {
        self.slot.lock().unwrap_or_else(|e| e.into_inner()).take();
        self.last = UserAction::default();
    }

    /// Takes the newest command if one arrived, otherwise repeats the last
    /// translation. Gripper events fire once.
    pub fn take(&mut self) -> UserAction {
        let fresh = self.slot.lock().unwrap_or_else(|e| e.into_inner()).take();
        match fresh {
            Some(a) => {
                self.last = UserAction {
                    gripper_toggle: false,
                    ..a
                };
                a
            }
            None => self.last,
        }
    }
}

impl InputSource for LatestInput {
    fn next_input(&mut self, _: &TaskState, _: &TaskSpec, _: usize) -> Result<UserAction> {
        Ok(self.take())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrialConfig {
    pub step_budget: usize,
    /// Translation scale applied to an overriding user command, meters.
    pub user_max_step: f64,
}

impl Default for TrialConfig {
    fn default() -> Self {
        TrialConfig {
            step_budget: 2000,
            user_max_step: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub completion_steps: usize,
    pub override_count: usize,
    pub pause_count: usize,
    pub collision_count: usize,
    pub success: bool,
}

/// What happened in one control tick.
#[derive(Debug, Clone, PartialEq)]
pub struct TickReport {
    pub tick: usize,
    pub decision: GateDecision,
    pub executed: RobotAction,
    pub user: UserAction,
    pub complete: bool,
}

/// Tick-by-tick driver of one trial; [`run_trial`] loops it to the end.
pub struct TrialRunner<'a, M: ActionModel + ?Sized> {
    pub env: Env,
    model: &'a M,
    gate_cfg: GateConfig,
    cfg: TrialConfig,
    pause: PauseState,
    steps: Vec<Step>,
    metrics: Metrics,
}

impl<'a, M: ActionModel + ?Sized> TrialRunner<'a, M> {
    pub fn new(env: Env, model: &'a M, gate_cfg: GateConfig, cfg: TrialConfig) -> Result<Self> {
        gate_cfg.validate()?;
        Ok(TrialRunner {
            env,
            model,
            gate_cfg,
            cfg,
            pause: PauseState::default(),
            steps: Vec::new(),
            metrics: Metrics::default(),
        })
    }

    pub fn ticks(&self) -> usize {
        self.steps.len()
    }

    pub fn metrics(&self) -> Metrics {
        self.metrics
    }

    /// Whether the trial has ended (completed or out of budget).
    pub fn finished(&self) -> bool {
        self.env.is_complete() || self.steps.len() >= self.cfg.step_budget
    }

    pub fn tick(&mut self, user: UserAction) -> Result<TickReport> {
        if self.finished() {
            return Err(IlsaError::precondition("trial already finished"));
        }
        let user = user.clamped();
        let (_, a_f) = self.model.predict(self.env.state(), &user)?;
        let decision = gate(&user, &a_f, &self.gate_cfg, &mut self.pause);
        let (action, source) = match decision.outcome {
            GateOutcome::ExecuteFinal | GateOutcome::ExecuteFinalNoInput => (a_f, StepSource::Policy),
            GateOutcome::Pause => (RobotAction::zero(), StepSource::Policy),
            GateOutcome::ExecuteUser | GateOutcome::ExecuteRotationBypass => {
                (user_to_robot_action(&user, self.cfg.user_max_step), StepSource::UserOverride)
            }
        };
        let before = self.env.state().clone();
        let collisions = self.env.collisions();
        let executed = self.env.step(&user, &action)?;
        match decision.outcome {
            GateOutcome::Pause => self.metrics.pause_count += 1,
            GateOutcome::ExecuteUser => self.metrics.override_count += 1,
            _ => {}
        }
        self.metrics.collision_count += self.env.collisions() - collisions;
        self.steps.push(Step {
            state: before,
            user,
            robot: executed,
            source,
            gate_cosine: decision.cosine,
        });
        self.metrics.completion_steps = self.steps.len();
        self.metrics.success = self.env.is_complete();
        Ok(TickReport {
            tick: self.steps.len() - 1,
            decision,
            executed,
            user,
            complete: self.env.is_complete(),
        })
    }

    /// Closes the log with a terminal zero-action step holding the final state.
    pub fn finish(self, task_id: &str, trial_index: u32, seed: u64, aborted: bool) -> (Trajectory, Metrics) {
        let mut steps = self.steps;
        steps.push(Step {
            state: self.env.state().clone(),
            user: UserAction::idle(),
            robot: RobotAction::zero(),
            source: StepSource::Policy,
            gate_cosine: None,
        });
        let traj = Trajectory {
            task_id: task_id.to_string(),
            trial_index,
            seed,
            provenance: Provenance::Interaction,
            steps,
            aborted,
        };
        (traj, self.metrics)
    }
}

/// Runs one trial to completion or budget exhaustion. A trial that runs out
/// of budget still returns its trajectory, with `success = false`.
pub fn run_trial<M: ActionModel + ?Sized>(
    env: Env,
    model: &M,
    gate_cfg: &GateConfig,
    cfg: &TrialConfig,
    input: &mut dyn InputSource,
    trial_index: u32,
    seed: u64,
) -> Result<(Trajectory, Metrics)> {
    let task_id = env.task().name.clone();
    let mut runner = TrialRunner::new(env, model, *gate_cfg, *cfg)?;
    while !runner.finished() {
        let user = input.next_input(runner.env.state(), runner.env.task(), runner.env.progress())?;
        runner.tick(user)?;
    }
    Ok(runner.finish(&task_id, trial_index, seed, false))
}
