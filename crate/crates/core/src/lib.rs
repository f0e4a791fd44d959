//! Shared-autonomy teleoperation with an incrementally fine-tuned action model.
//!
//! The crate covers the whole offline and runtime pipeline: kinematic data
//! generation ([`trajgen`]), a small transformer policy ([`policy`]) built on
//! a tape autodiff ([`nn`]), cosine-gated arbitration between user and robot
//! ([`arbitration`]), corrected-trajectory fine-tuning ([`incremental`]) and a
//! simulated-user experiment harness ([`simuser`]).

pub mod arbitration;
pub mod error;
pub mod math;
pub mod incremental;
pub mod io;
pub mod nn;
pub mod policy;
pub mod simuser;
pub mod task;
pub mod trajgen;
pub mod types;

pub use error::{IlsaError, Result};
pub use math::Vec3;
pub use task::{Aabb, Anchor, SubtaskKind, SubtaskSpec, TargetRule, TaskSpec, Tolerance};
pub use types::{
    Pose, Provenance, RobotAction, Step, StepSource, TaskState, Trajectory, UserAction,
};
