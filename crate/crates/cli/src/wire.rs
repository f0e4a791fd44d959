//! JSON text frames exchanged over `/session`.
//!
//! Every frame is `{"seq": n, "kind": "...", "payload": {...}}`. The server
//! numbers its frames 1, 2, 3... per session; `seq` on client frames is
//! optional and ignored.

use ilsa_core::arbitration::{GateOutcome, Metrics};
use ilsa_core::nn::Partition;
use ilsa_core::{Aabb, Pose, TaskSpec, TaskState, UserAction, Vec3};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    #[serde(default)]
    pub seq: u64,
    #[serde(flatten)]
    pub msg: WireMessage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload")]
pub enum WireMessage {
    Hello(Hello),
    StateUpdate(StateUpdate),
    UserInput(UserInput),
    GateEvent(GateEvent),
    TrialComplete(TrialComplete),
    FinetuneRequest(FinetuneRequest),
    FinetuneProgress(FinetuneProgress),
    MetricsSummary(MetricsSummary),
    Error(ErrorReport),
}

impl WireMessage {
    pub fn kind(&self) -> &'static str {
        match self {
            WireMessage::Hello(_) => "Hello",
            WireMessage::StateUpdate(_) => "StateUpdate",
            WireMessage::UserInput(_) => "UserInput",
            WireMessage::GateEvent(_) => "GateEvent",
            WireMessage::TrialComplete(_) => "TrialComplete",
            WireMessage::FinetuneRequest(_) => "FinetuneRequest",
            WireMessage::FinetuneProgress(_) => "FinetuneProgress",
            WireMessage::MetricsSummary(_) => "MetricsSummary",
            WireMessage::Error(_) => "Error",
        }
    }

    pub fn error(message: impl Into<String>) -> Self {
        WireMessage::Error(ErrorReport { message: message.into() })
    }
}

/// Sent by the server on connect. A client Hello (all fields empty) starts
/// the next trial.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Hello {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tick_ms: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskSpec>,
}

/// State at the start of a tick, before the user's command for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateUpdate {
    pub trial_index: u32,
    pub tick: usize,
    /// Index of the first unfinished subtask.
    pub progress: usize,
    /// Position then Euler angles.
    pub ee: [f64; 6],
    pub gripper: bool,
    pub objects: Vec<[f64; 6]>,
    pub grasped: Option<usize>,
    pub obstacles: Vec<Aabb>,
}

fn pack(p: &Pose) -> [f64; 6] {
    let (a, b) = (p.position, p.orientation);
    [a[0], a[1], a[2], b[0], b[1], b[2]]
}

fn unpack(v: &[f64; 6]) -> Pose {
    Pose {
        position: [v[0], v[1], v[2]],
        orientation: [v[3], v[4], v[5]],
    }
}

impl StateUpdate {
    pub fn new(trial_index: u32, tick: usize, progress: usize, state: &TaskState, task: &TaskSpec) -> Self {
        StateUpdate {
            trial_index,
            tick,
            progress,
            ee: pack(&state.ee),
            gripper: state.gripper_closed,
            objects: state.objects.iter().map(pack).collect(),
            grasped: state.grasped,
            obstacles: task.obstacles.clone(),
        }
    }

    /// The exact task state carried by this update.
    pub fn state(&self) -> TaskState {
        TaskState {
            ee: unpack(&self.ee),
            gripper_closed: self.gripper,
            objects: self.objects.iter().map(unpack).collect(),
            grasped: self.grasped,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserInput {
    pub translation: Vec3,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotation: Option<Vec3>,
    #[serde(default)]
    pub gripper_toggle: bool,
}

impl From<&UserAction> for UserInput {
    fn from(a: &UserAction) -> Self {
        UserInput {
            translation: a.translation,
            rotation: a.rotation_bypass,
            gripper_toggle: a.gripper_toggle,
        }
    }
}

impl From<&UserInput> for UserAction {
    fn from(u: &UserInput) -> Self {
        UserAction {
            translation: u.translation,
            rotation_bypass: u.rotation,
            gripper_toggle: u.gripper_toggle,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateEvent {
    pub trial_index: u32,
    pub tick: usize,
    pub outcome: GateOutcome,
    pub cosine: Option<f64>,
    pub executed: [f64; 6],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialComplete {
    pub trial_index: u32,
    pub metrics: Metrics,
    pub aborted: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FinetuneRequest {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneProgress {
    /// 1-based.
    pub epoch: usize,
    pub epochs: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub session_id: String,
    /// Per completed trial, in order.
    pub trials: Vec<Metrics>,
    pub changed_partitions: Vec<Partition>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub message: String,
}
