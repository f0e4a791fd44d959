//! Poses, actions, task states and trajectories, plus the kinematic
//! transition that links consecutive states.

use serde::{Deserialize, Serialize};

use crate::error::{IlsaError, Result};
use crate::math::{self, Vec3};

/// Tolerance of the trajectory replay check.
pub const REPLAY_TOLERANCE: f64 = 1e-9;

/// Absolute end-effector or object pose: position in meters, Euler angles
/// (roll, pitch, yaw) in radians normalized to (-π, π].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vec3,
    pub orientation: Vec3,
}

impl Pose {
    pub fn new(position: Vec3, orientation: Vec3) -> Self {
        Pose {
            position,
            orientation: math::wrap_angles(orientation),
        }
    }

    pub fn at(position: Vec3) -> Self {
        Pose {
            position,
            orientation: [0.0; 3],
        }
    }

    pub fn is_valid(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self
                .orientation
                .iter()
                .all(|a| a.is_finite() && *a > -std::f64::consts::PI && *a <= std::f64::consts::PI)
    }

    /// The pose as a flat `[x, y, z, roll, pitch, yaw]` array.
    pub fn to_array(&self) -> [f64; 6] {
        let p = self.position;
        let o = self.orientation;
        [p[0], p[1], p[2], o[0], o[1], o[2]]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Pose {
            position: [a[0], a[1], a[2]],
            orientation: [a[3], a[4], a[5]],
        }
    }

    /// Delta that moves `self` onto `target` (shortest angular difference).
    pub fn delta_to(&self, target: &Pose) -> RobotAction {
        let dp = math::sub(target.position, self.position);
        let dr = math::angle_diff(self.orientation, target.orientation);
        RobotAction::new([dp[0], dp[1], dp[2], dr[0], dr[1], dr[2]])
    }
}

/// Normalized translational command from the user, with an optional direct
/// rotational command that bypasses the policy.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UserAction {
    pub translation: Vec3,
    #[serde(default)]
    pub rotation_bypass: Option<Vec3>,
    #[serde(default)]
    pub gripper_toggle: bool,
}

impl UserAction {
    pub fn translate(translation: Vec3) -> Self {
        UserAction {
            translation,
            ..Default::default()
        }
    }

    pub fn idle() -> Self {
        UserAction::default()
    }

    pub fn toggle() -> Self {
        UserAction {
            gripper_toggle: true,
            ..Default::default()
        }
    }

    /// Clamps every translation component into [-1, 1]; NaN becomes 0.
    pub fn clamped(mut self) -> Self {
        for v in &mut self.translation {
            *v = if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) };
        }
        self
    }

    pub fn is_valid(&self) -> bool {
        self.translation
            .iter()
            .all(|v| v.is_finite() && (-1.0..=1.0).contains(v))
            && self
                .rotation_bypass
                .map_or(true, |r| r.iter().all(|v| v.is_finite()))
    }
}

/// Six-component delta end-effector action (meters, then radians).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RobotAction {
    pub delta: [f64; 6],
}

impl RobotAction {
    pub fn new(delta: [f64; 6]) -> Self {
        RobotAction { delta }
    }

    pub fn zero() -> Self {
        RobotAction::default()
    }

    pub fn from_parts(translation: Vec3, rotation: Vec3) -> Self {
        RobotAction::new([
            translation[0],
            translation[1],
            translation[2],
            rotation[0],
            rotation[1],
            rotation[2],
        ])
    }

    pub fn translation(&self) -> Vec3 {
        [self.delta[0], self.delta[1], self.delta[2]]
    }

    pub fn rotation(&self) -> Vec3 {
        [self.delta[3], self.delta[4], self.delta[5]]
    }

    pub fn translation_norm(&self) -> f64 {
        math::norm(self.translation())
    }

    pub fn is_zero(&self) -> bool {
        self.delta.iter().all(|v| *v == 0.0)
    }

    pub fn is_valid(&self, max_step: f64) -> bool {
        self.delta.iter().all(|v| v.is_finite()) && self.translation_norm() <= max_step
    }
}

/// Full task state: end-effector pose, gripper, and every object pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskState {
    pub ee: Pose,
    pub gripper_closed: bool,
    pub objects: Vec<Pose>,
    pub grasped: Option<usize>,
}

impl TaskState {
    pub fn new(ee: Pose, objects: Vec<Pose>) -> Self {
        TaskState {
            ee,
            gripper_closed: false,
            objects,
            grasped: None,
        }
    }

    /// Opens or closes the gripper. Closing attaches the nearest object whose
    /// position lies within `grasp_radius` of the end effector (if any).
    pub fn toggle_gripper(&self, grasp_radius: f64) -> TaskState {
        let mut next = self.clone();
        if self.gripper_closed {
            next.gripper_closed = false;
            next.grasped = None;
        } else {
            next.gripper_closed = true;
            next.grasped = self
                .objects
                .iter()
                .enumerate()
                .map(|(i, o)| (i, math::norm(math::sub(o.position, self.ee.position))))
                .filter(|(_, d)| *d <= grasp_radius)
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(i, _)| i);
        }
        next
    }
}

/// Applies a delta action: the end effector moves, and a grasped object moves
/// rigidly with it (its offset to the end effector is preserved). Angles are
/// composed per axis and renormalized.
pub fn transition(state: &TaskState, action: &RobotAction) -> TaskState {
    let mut next = state.clone();
    let dp = action.translation();
    let dr = action.rotation();
    next.ee = shift(&state.ee, dp, dr);
    if let Some(k) = state.grasped {
        if let Some(obj) = next.objects.get_mut(k) {
            *obj = shift(&state.objects[k], dp, dr);
        }
    }
    next
}

fn shift(p: &Pose, dp: Vec3, dr: Vec3) -> Pose {
    Pose {
        position: math::add(p.position, dp),
        orientation: math::wrap_angles(math::add(p.orientation, dr)),
    }
}

/// One control tick: optional gripper event, then the executed motion.
pub fn advance(
    state: &TaskState,
    user: &UserAction,
    executed: &RobotAction,
    grasp_radius: f64,
) -> TaskState {
    if user.gripper_toggle {
        transition(&state.toggle_gripper(grasp_radius), executed)
    } else {
        transition(state, executed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSource {
    /// The policy was in control (its action executed, or a pause/no-op).
    Policy,
    /// The user's command was executed in place of the policy's.
    UserOverride,
    /// Generated offline (kinematic or corrected data).
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub state: TaskState,
    pub user: UserAction,
    pub robot: RobotAction,
    pub source: StepSource,
    pub gate_cosine: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Kinematic,
    Interaction,
    Corrected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: String,
    pub trial_index: u32,
    pub seed: u64,
    pub provenance: Provenance,
    pub steps: Vec<Step>,
    /// Set when a live session ended before the trial completed.
    #[serde(default)]
    pub aborted: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn positions(&self) -> Vec<Vec3> {
        self.steps.iter().map(|s| s.state.ee.position).collect()
    }

    /// Checks that every stored state equals the replay of its predecessor
    /// under the logged gripper event and executed action.
    pub fn check_consistency(&self, grasp_radius: f64) -> Result<()> {
        if self.steps.is_empty() {
            return Err(IlsaError::Format("empty trajectory".into()));
        }
        for (t, pair) in self.steps.windows(2).enumerate() {
            let expected = advance(&pair[0].state, &pair[0].user, &pair[0].robot, grasp_radius);
            if !states_close(&expected, &pair[1].state, REPLAY_TOLERANCE) {
                return Err(IlsaError::Format(format!(
                    "trajectory {}:{} inconsistent between steps {} and {}",
                    self.task_id,
                    self.trial_index,
                    t,
                    t + 1
                )));
            }
        }
        Ok(())
    }
}

/// Pose comparison with angles compared modulo 2π.
pub fn poses_close(a: &Pose, b: &Pose, tol: f64) -> bool {
    math::max_abs(math::sub(a.position, b.position)) <= tol
        && math::max_abs(math::angle_diff(a.orientation, b.orientation)) <= tol
}

pub fn states_close(a: &TaskState, b: &TaskState, tol: f64) -> bool {
    a.gripper_closed == b.gripper_closed
        && a.grasped == b.grasped
        && a.objects.len() == b.objects.len()
        && poses_close(&a.ee, &b.ee, tol)
        && a
            .objects
            .iter()
            .zip(&b.objects)
            .all(|(x, y)| poses_close(x, y, tol))
}
