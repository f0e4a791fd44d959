//! Line-oriented trajectory files and small JSON helpers.
//!
//! A trajectory is one header line followed by one line per step. Several
//! trajectories may share a file; each header starts a new one.
//!
//! ```text
//! {"task":"cereal_pour","trial":0,"provenance":"interaction","seed":7}
//! {"t":0,"state":{"ee":[..6],"gripper":false,"objects":[[..6],..],"grasped":null},"user":[..3],"robot":[..6],"source":"policy","cos":0.93}
//! ```
//!
//! Rotation-bypass commands and gripper toggles ride along as optional
//! `"rot"` and `"toggle"` fields, and an aborted trial's header carries
//! `"aborted":true`. Floats are written in shortest round-trip form.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{IlsaError, Result};
use crate::math::Vec3;
use crate::types::{Pose, Provenance, RobotAction, Step, StepSource, TaskState, Trajectory, UserAction};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    task: String,
    trial: u32,
    provenance: Provenance,
    seed: u64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    aborted: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateRecord {
    ee: [f64; 6],
    gripper: bool,
    objects: Vec<[f64; 6]>,
    grasped: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum SourceTag {
    Policy,
    User,
    Synthetic,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepRecord {
    t: usize,
    state: StateRecord,
    user: Vec3,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rot: Option<Vec3>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    toggle: bool,
    robot: [f64; 6],
    source: SourceTag,
    cos: Option<f64>,
}

fn pose6(p: &Pose) -> [f64; 6] {
    let mut out = [0.0; 6];
    out[..3].copy_from_slice(&p.position);
    out[3..].copy_from_slice(&p.orientation);
    out
}

fn pose_from(a: [f64; 6]) -> Pose {
    Pose::new([a[0], a[1], a[2]], [a[3], a[4], a[5]])
}

impl StepRecord {
    fn from_step(t: usize, s: &Step) -> Self {
        StepRecord {
            t,
            state: StateRecord {
                ee: pose6(&s.state.ee),
                gripper: s.state.gripper_closed,
                objects: s.state.objects.iter().map(pose6).collect(),
                grasped: s.state.grasped,
            },
            user: s.user.translation,
            rot: s.user.rotation_bypass,
            toggle: s.user.gripper_toggle,
            robot: s.robot.delta,
            source: match s.source {
                StepSource::Policy => SourceTag::Policy,
                StepSource::UserOverride => SourceTag::User,
                StepSource::Synthetic => SourceTag::Synthetic,
            },
            cos: s.gate_cosine,
        }
    }

    fn into_step(self) -> Step {
        Step {
            state: TaskState {
                ee: pose_from(self.state.ee),
                gripper_closed: self.state.gripper,
                objects: self.state.objects.into_iter().map(pose_from).collect(),
                grasped: self.state.grasped,
            },
            user: UserAction {
                translation: self.user,
                rotation_bypass: self.rot,
                gripper_toggle: self.toggle,
            },
            robot: RobotAction::new(self.robot),
            source: match self.source {
                SourceTag::Policy => StepSource::Policy,
                SourceTag::User => StepSource::UserOverride,
                SourceTag::Synthetic => StepSource::Synthetic,
            },
            gate_cosine: self.cos,
        }
    }
}

pub fn write_trajectory<W: Write>(w: &mut W, traj: &Trajectory) -> Result<()> {
    let header = Header {
        task: traj.task_id.clone(),
        trial: traj.trial_index,
        provenance: traj.provenance,
        seed: traj.seed,
        aborted: traj.aborted,
    };
    serde_json::to_writer(&mut *w, &header)?;
    w.write_all(b"\n")?;
    for (t, s) in traj.steps.iter().enumerate() {
        serde_json::to_writer(&mut *w, &StepRecord::from_step(t, s))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn trajectories_to_string(trajs: &[Trajectory]) -> Result<String> {
    let mut buf = Vec::new();
    for t in trajs {
        write_trajectory(&mut buf, t)?;
    }
    Ok(String::from_utf8(buf).expect("serde_json writes UTF-8"))
}

/// Parses every trajectory in a JSONL stream. Blank lines are skipped.
pub fn read_trajectories<R: BufRead>(r: R) -> Result<Vec<Trajectory>> {
    let mut out: Vec<Trajectory> = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |e: serde_json::Error| IlsaError::Format(format!("line {}: {e}", i + 1));
        let value: serde_json::Value = serde_json::from_str(line).map_err(bad)?;
        if value.get("task").is_some() {
            let h: Header = serde_json::from_value(value).map_err(bad)?;
            out.push(Trajectory {
                task_id: h.task,
                trial_index: h.trial,
                seed: h.seed,
                provenance: h.provenance,
                steps: Vec::new(),
                aborted: h.aborted,
            });
            continue;
        }
        let rec: StepRecord = serde_json::from_value(value).map_err(bad)?;
        let traj = out
            .last_mut()
            .ok_or_else(|| IlsaError::Format(format!("line {}: step record before any header", i + 1)))?;
        if rec.t != traj.steps.len() {
            return Err(IlsaError::Format(format!(
                "line {}: step index {} out of sequence (expected {})",
                i + 1,
                rec.t,
                traj.steps.len()
            )));
        }
        traj.steps.push(rec.into_step());
    }
    Ok(out)
}

pub fn save_trajectories(path: &Path, trajs: &[Trajectory]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for t in trajs {
        write_trajectory(&mut w, t)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_trajectories(path: &Path) -> Result<Vec<Trajectory>> {
    read_trajectories(BufReader::new(File::open(path)?))
}

pub fn save_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| IlsaError::Format(format!("{}: {e}", path.display())))
}
