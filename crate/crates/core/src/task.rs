//! Task specifications: workspace, obstacles, object sampling regions and the
//! ordered subtasks whose targets drive data generation and the simulated user.

use serde::{Deserialize, Serialize};

use crate::error::{IlsaError, Result};
use crate::math::{self, Vec3};
use crate::types::{Pose, TaskState};

/// Axis-aligned box in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Aabb { min, max }
    }

    pub fn point(p: Vec3) -> Self {
        Aabb { min: p, max: p }
    }

    pub fn is_well_formed(&self) -> bool {
        (0..3).all(|i| self.min[i].is_finite() && self.max[i].is_finite() && self.min[i] <= self.max[i])
    }

    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn contains_box(&self, other: &Aabb) -> bool {
        self.contains(other.min) && self.contains(other.max)
    }

    pub fn inflate(&self, r: f64) -> Aabb {
        Aabb {
            min: [self.min[0] - r, self.min[1] - r, self.min[2] - r],
            max: [self.max[0] + r, self.max[1] + r, self.max[2] + r],
        }
    }

    pub fn center(&self) -> Vec3 {
        math::scale(math::add(self.min, self.max), 0.5)
    }

    /// Euclidean distance from `p` to the box (0 inside).
    pub fn distance(&self, p: Vec3) -> f64 {
        let mut d2 = 0.0;
        for i in 0..3 {
            let e = (self.min[i] - p[i]).max(0.0).max(p[i] - self.max[i]);
            d2 += e * e;
        }
        d2.sqrt()
    }

    pub fn clamp(&self, p: Vec3) -> Vec3 {
        [
            p[0].clamp(self.min[0], self.max[0]),
            p[1].clamp(self.min[1], self.max[1]),
            p[2].clamp(self.min[2], self.max[2]),
        ]
    }

    /// First parameter `t ∈ [0, 1]` at which the segment `a → b` touches the
    /// closed box, or `None` when it misses.
    pub fn segment_entry(&self, a: Vec3, b: Vec3) -> Option<f64> {
        let d = math::sub(b, a);
        let mut t_min = 0.0_f64;
        let mut t_max = 1.0_f64;
        for i in 0..3 {
            if d[i].abs() < 1e-15 {
                if a[i] < self.min[i] || a[i] > self.max[i] {
                    return None;
                }
            } else {
                let inv = 1.0 / d[i];
                let mut t1 = (self.min[i] - a[i]) * inv;
                let mut t2 = (self.max[i] - a[i]) * inv;
                if t1 > t2 {
                    std::mem::swap(&mut t1, &mut t2);
                }
                t_min = t_min.max(t1);
                t_max = t_max.min(t2);
                if t_min > t_max {
                    return None;
                }
            }
        }
        Some(t_min)
    }

    pub fn intersects_segment(&self, a: Vec3, b: Vec3) -> bool {
        self.segment_entry(a, b).is_some()
    }

    /// Corner `i` (bit k of `i` selects max on axis k).
    pub fn corner(&self, i: usize) -> Vec3 {
        [
            if i & 1 == 0 { self.min[0] } else { self.max[0] },
            if i & 2 == 0 { self.min[1] } else { self.max[1] },
            if i & 4 == 0 { self.min[2] } else { self.max[2] },
        ]
    }

    /// The twelve edges as corner-index pairs.
    pub fn edges(&self) -> [(Vec3, Vec3); 12] {
        let mut out = [([0.0; 3], [0.0; 3]); 12];
        let mut n = 0;
        for i in 0..8usize {
            for axis in 0..3 {
                let j = i | (1 << axis);
                if j != i {
                    out[n] = (self.corner(i), self.corner(j));
                    n += 1;
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubtaskKind {
    Reach,
    Grasp,
    Transport,
    Release,
    Orient,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    /// Current position of object `k`.
    Object(usize),
    /// A fixed position in the workspace.
    Fixed(Vec3),
}

/// Target end-effector pose as a function of the state: an anchor plus an
/// offset, and an absolute orientation (`None` keeps the current one).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetRule {
    pub anchor: Anchor,
    #[serde(default)]
    pub offset: Vec3,
    #[serde(default)]
    pub orientation: Option<Vec3>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerance {
    /// meters
    pub position: f64,
    /// radians, only checked when the rule fixes an orientation
    pub angle: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtaskSpec {
    pub kind: SubtaskKind,
    pub target: TargetRule,
    pub tolerance: Tolerance,
}

impl SubtaskSpec {
    /// Whether `state` satisfies this subtask (pose within tolerance, plus the
    /// gripper condition for grasp/release).
    pub fn is_satisfied(&self, state: &TaskState) -> Result<bool> {
        let target = subtask_target(self, state)?;
        let pos_ok = math::norm(math::sub(target.position, state.ee.position)) <= self.tolerance.position;
        let ori_ok = self.target.orientation.is_none()
            || math::max_abs(math::angle_diff(state.ee.orientation, target.orientation))
                <= self.tolerance.angle;
        let gripper_ok = match self.kind {
            SubtaskKind::Grasp => state.gripper_closed && state.grasped.is_some(),
            SubtaskKind::Release => !state.gripper_closed,
            _ => true,
        };
        Ok(pos_ok && ori_ok && gripper_ok)
    }

    /// Whether the pose part is satisfied but the gripper still needs toggling.
    pub fn needs_toggle(&self, state: &TaskState) -> Result<bool> {
        let wants = match self.kind {
            SubtaskKind::Grasp => !state.gripper_closed,
            SubtaskKind::Release => state.gripper_closed,
            _ => return Ok(false),
        };
        if !wants {
            return Ok(false);
        }
        let target = subtask_target(self, state)?;
        Ok(math::norm(math::sub(target.position, state.ee.position)) <= self.tolerance.position)
    }
}

/// Target end-effector pose of a subtask in the given state.
pub fn subtask_target(spec: &SubtaskSpec, state: &TaskState) -> Result<Pose> {
    let rule = &spec.target;
    let base = match rule.anchor {
        Anchor::Fixed(p) => p,
        Anchor::Object(k) => {
            state
                .objects
                .get(k)
                .ok_or_else(|| {
                    IlsaError::config(format!(
                        "target rule references object {k} but the state has {} objects",
                        state.objects.len()
                    ))
                })?
                .position
        }
    };
    Ok(Pose::new(
        math::add(base, rule.offset),
        rule.orientation.unwrap_or(state.ee.orientation),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub object_count: usize,
    pub subtasks: Vec<SubtaskSpec>,
    pub workspace: Aabb,
    #[serde(default)]
    pub obstacles: Vec<Aabb>,
    pub sampling_regions: Vec<Aabb>,
    pub home: Pose,
    #[serde(default = "default_grasp_radius")]
    pub grasp_radius: f64,
}

fn default_grasp_radius() -> f64 {
    0.05
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(IlsaError::config(format!("task {}: {m}", self.name)));
        if self.name.is_empty()
            || !self
                .name
                .chars()
                .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
        {
            return err("identifier must be lowercase snake_case".into());
        }
        if self.subtasks.is_empty() {
            return err("subtask list is empty".into());
        }
        if self.sampling_regions.len() != self.object_count {
            return err(format!(
                "{} sampling regions for {} objects",
                self.sampling_regions.len(),
                self.object_count
            ));
        }
        if !self.workspace.is_well_formed() {
            return err("workspace bounds malformed".into());
        }
        for (i, r) in self.sampling_regions.iter().enumerate() {
            if !r.is_well_formed() || !self.workspace.contains_box(r) {
                return err(format!("sampling region {i} is not inside the workspace"));
            }
        }
        if self.obstacles.iter().any(|o| !o.is_well_formed()) {
            return err("obstacle box malformed".into());
        }
        if !self.home.is_valid() || !self.workspace.contains(self.home.position) {
            return err("home pose outside the workspace".into());
        }
        for (i, s) in self.subtasks.iter().enumerate() {
            if !(s.tolerance.position > 0.0 && s.tolerance.angle > 0.0) {
                return err(format!("subtask {i} tolerance must be positive"));
            }
            if let Anchor::Object(k) = s.target.anchor {
                if k >= self.object_count {
                    return err(format!("subtask {i} references missing object {k}"));
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<TaskSpec> {
        let spec: TaskSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Index of the first unsatisfied subtask at or after `from`.
    pub fn next_incomplete(&self, from: usize, state: &TaskState) -> Result<usize> {
        let mut i = from;
        while i < self.subtasks.len() && self.subtasks[i].is_satisfied(state)? {
            i += 1;
        }
        Ok(i)
    }

    /// Same task without obstacles (the pretraining world).
    pub fn without_obstacles(&self) -> TaskSpec {
        TaskSpec {
            obstacles: Vec::new(),
            ..self.clone()
        }
    }

    /// Looks up one of the built-in tasks by identifier.
    pub fn builtin(name: &str) -> Result<TaskSpec> {
        match name {
            "cereal_pour" => Ok(cereal_pour()),
            "pill_bottle" => Ok(pill_bottle()),
            other => Err(IlsaError::config(format!("unknown task '{other}'"))),
        }
    }

    pub fn builtin_names() -> &'static [&'static str] {
        &["cereal_pour", "pill_bottle"]
    }
}

fn sub(kind: SubtaskKind, anchor: Anchor, offset: Vec3, orientation: Option<Vec3>, tol: f64) -> SubtaskSpec {
    SubtaskSpec {
        kind,
        target: TargetRule {
            anchor,
            offset,
            orientation,
        },
        tolerance: Tolerance {
            position: tol,
            angle: 0.05,
        },
    }
}

/// Pick a cup from under a shelf and pour it into a bowl standing on the shelf.
/// Object 0 is the cup, object 1 the bowl. The shelf plate is the obstacle.
pub fn cereal_pour() -> TaskSpec {
    use Anchor::Object;
    use SubtaskKind::*;
    TaskSpec {
        name: "cereal_pour".into(),
        object_count: 2,
        subtasks: vec![
            sub(Reach, Object(0), [0.0, 0.0, 0.05], None, 0.01),
            sub(Grasp, Object(0), [0.0, 0.0, 0.015], None, 0.01),
            sub(Transport, Object(1), [-0.08, 0.0, 0.08], None, 0.015),
            sub(Orient, Object(1), [-0.08, 0.0, 0.08], Some([0.6, 0.0, 0.0]), 0.015),
        ],
        workspace: Aabb::new([0.2, -0.5, 0.0], [0.8, 0.4, 0.6]),
        obstacles: vec![Aabb::new([0.15, -0.45, 0.15], [0.85, 0.0, 0.18])],
        sampling_regions: vec![
            Aabb::new([0.35, -0.15, 0.05], [0.65, -0.05, 0.05]),
            Aabb::new([0.35, -0.35, 0.22], [0.65, -0.22, 0.22]),
        ],
        home: Pose::at([0.5, 0.2, 0.10]),
        grasp_radius: 0.05,
    }
}

/// Take a pill bottle standing behind a cabinet wall and place it in the open
/// drawer in front. Object 0 is the bottle, object 1 the drawer opening.
pub fn pill_bottle() -> TaskSpec {
    use Anchor::Object;
    use SubtaskKind::*;
    TaskSpec {
        name: "pill_bottle".into(),
        object_count: 2,
        subtasks: vec![
            sub(Reach, Object(0), [0.0, 0.0, 0.06], None, 0.01),
            sub(Grasp, Object(0), [0.0, 0.0, 0.015], None, 0.01),
            sub(Transport, Object(1), [0.0, 0.0, 0.06], None, 0.015),
            sub(Release, Object(1), [0.0, 0.0, 0.06], None, 0.015),
        ],
        workspace: Aabb::new([0.2, -0.4, 0.0], [0.8, 0.3, 0.6]),
        obstacles: vec![Aabb::new([0.15, -0.15, 0.0], [0.85, -0.10, 0.25])],
        sampling_regions: vec![
            Aabb::new([0.35, -0.32, 0.05], [0.65, -0.22, 0.05]),
            Aabb::new([0.40, 0.0, 0.10], [0.60, 0.08, 0.10]),
        ],
        home: Pose::at([0.5, -0.28, 0.30]),
        grasp_radius: 0.05,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_objects(a: Vec3, b: Vec3) -> TaskState {
        TaskState::new(Pose::at([0.0; 3]), vec![Pose::at(a), Pose::at(b)])
    }

    #[test]
    fn object_offset_target() {
        let spec = sub(SubtaskKind::Reach, Anchor::Object(0), [0.0, 0.0, 0.10], None, 0.01);
        let t = subtask_target(&spec, &two_objects([0.3, 0.2, 0.0], [0.0; 3])).unwrap();
        assert_eq!(t.position, [0.3, 0.2, 0.10]);
    }

    #[test]
    fn fixed_rule_ignores_state() {
        let p = [0.4, -0.1, 0.3];
        let spec = sub(SubtaskKind::Reach, Anchor::Fixed(p), [0.0; 3], Some([0.1, 0.0, 0.0]), 0.01);
        for s in [two_objects([0.0; 3], [1.0; 3]), two_objects([0.5; 3], [0.2; 3])] {
            let t = subtask_target(&spec, &s).unwrap();
            assert_eq!(t.position, p);
            assert_eq!(t.orientation, [0.1, 0.0, 0.0]);
        }
    }

    #[test]
    fn transport_offset_target() {
        let spec = sub(SubtaskKind::Transport, Anchor::Object(1), [-0.08, 0.0, 0.05], None, 0.01);
        let t = subtask_target(&spec, &two_objects([0.0; 3], [0.5, 0.1, 0.2])).unwrap();
        let expected = [0.5 + -0.08, 0.1 + 0.0, 0.2 + 0.05];
        assert!((t.position[0] - 0.42).abs() < 1e-12);
        assert!((t.position[2] - 0.25).abs() < 1e-12);
        assert_eq!(t.position, expected);
    }

    #[test]
    fn missing_object_is_config_error() {
        let spec = sub(SubtaskKind::Reach, Anchor::Object(5), [0.0; 3], None, 0.01);
        let err = subtask_target(&spec, &two_objects([0.0; 3], [0.0; 3])).unwrap_err();
        assert!(matches!(err, IlsaError::Config(_)));
    }

    #[test]
    fn builtins_validate_and_round_trip_json() {
        for name in TaskSpec::builtin_names() {
            let t = TaskSpec::builtin(name).unwrap();
            t.validate().unwrap();
            let back = TaskSpec::from_json(&t.to_json().unwrap()).unwrap();
            assert_eq!(back, t);
        }
    }

    #[test]
    fn region_outside_workspace_rejected() {
        let mut t = cereal_pour();
        t.sampling_regions[0] = Aabb::new([0.0, 0.0, 0.0], [2.0, 0.1, 0.1]);
        assert!(t.validate().is_err());
        let mut t = cereal_pour();
        t.subtasks.clear();
        assert!(t.validate().is_err());
    }

    #[test]
    fn segment_box_entry() {
        let b = Aabb::new([0.0, 0.0, 0.0], [1.0, 1.0, 1.0]);
        let t = b.segment_entry([-1.0, 0.5, 0.5], [1.0, 0.5, 0.5]).unwrap();
        assert!((t - 0.5).abs() < 1e-12);
        assert!(b.segment_entry([-1.0, 2.0, 0.5], [1.0, 2.0, 0.5]).is_none());
        assert_eq!(b.segment_entry([0.5; 3], [2.0; 3]), Some(0.0));
        assert!((b.distance([2.0, 0.5, 0.5]) - 1.0).abs() < 1e-12);
        assert_eq!(b.edges().len(), 12);
    }

    #[test]
    fn straight_transport_hits_the_shelf() {
        let t = cereal_pour();
        let shelf = t.obstacles[0];
        for (cy, by) in [(-0.05, -0.22), (-0.15, -0.35), (-0.1, -0.3)] {
            let grasp = [0.5, cy, 0.065];
            let target = [0.42, by, 0.30];
            assert!(shelf.intersects_segment(grasp, target));
        }
        // reaching under the shelf stays clear even with clearance
        assert!(!shelf.inflate(0.03).intersects_segment(t.home.position, [0.5, -0.1, 0.10]));
    }
}
