//! Deterministic simulated user and the multi-trial adaptation experiments.
//!
//! The oracle steers toward the current subtask target, routing around
//! obstacles through a visibility graph over points on the edges of each
//! obstacle box grown by the clearance. [`oracle_action`] has no memory: its
//! command is a function of the state and subtask progress, so it keeps
//! issuing the same command while the robot is paused. [`OracleUser`] adds
//! one piece of state, a takeover of rotation when the robot's own rotation
//! stalls.

use petgraph::algo::astar;
use petgraph::graph::{NodeIndex, UnGraph};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arbitration::{run_trial, ActionModel, Env, GateConfig, InputSource, Metrics, TrialConfig};
use crate::error::{IlsaError, Result};
use crate::incremental::{finetune, FinetuneConfig, FinetuneReport, Variant};
use crate::math::{self, Vec3};
use crate::policy::Policy;
use crate::task::{subtask_target, Aabb, TaskSpec};
use crate::trajgen::{sample_layout, MAX_LAYOUT_ATTEMPTS};
use crate::types::{TaskState, Trajectory, UserAction};

/// Waypoints sit this much further out than the clearance so that legs
/// running along a grown face never graze the clearance zone itself.
const WAYPOINT_MARGIN: f64 = 1.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    /// Standoff kept from every obstacle, meters.
    pub clearance: f64,
    /// The oracle always keeps issuing its command through pauses.
    pub persistence: bool,
    /// Commanded speed fraction in (0, 1].
    pub magnitude: f64,
    /// Distance one full-magnitude command moves the robot when it
    /// overrides, meters. Commands toward an intermediate waypoint closer
    /// than this are shortened so an override cannot overshoot it.
    pub step: f64,
    /// Largest per-axis rotation of one rotation-bypass command, radians.
    pub rot_step: f64,
    /// Length of the window, in ticks, over which the user judges the
    /// robot's rotational progress.
    pub rotation_patience: usize,
    /// Slowest acceptable mean reduction of the orientation error over that
    /// window, radians per tick; anything slower and the user takes over.
    pub rotation_rate: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            clearance: 0.03,
            persistence: true,
            magnitude: 1.0,
            step: 0.01,
            rot_step: 0.05,
            rotation_patience: 5,
            rotation_rate: 0.02,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clearance > 0.0) {
            return Err(IlsaError::config("oracle clearance must be > 0"));
        }
        if !(self.magnitude > 0.0 && self.magnitude <= 1.0) {
            return Err(IlsaError::config("oracle magnitude must lie in (0, 1]"));
        }
        if !(self.step > 0.0 && self.rot_step > 0.0 && self.rotation_rate >= 0.0) || self.rotation_patience == 0 {
            return Err(IlsaError::config("oracle step, rot_step and rotation_patience must be > 0"));
        }
        Ok(())
    }
}

fn closest_on_segment(a: Vec3, b: Vec3, p: Vec3) -> Vec3 {
    let d = math::sub(b, a);
    let l2 = math::dot(d, d);
    if l2 == 0.0 {
        return a;
    }
    let t = (math::dot(math::sub(p, a), d) / l2).clamp(0.0, 1.0);
    math::add(a, math::scale(d, t))
}

/// Unit direction leading out of `zone` from a point inside it: away from the
/// nearest point of `core`, or through the nearest face when inside `core`.
fn escape_direction(core: &Aabb, p: Vec3) -> Vec3 {
    let q = core.clamp(p);
    let d = math::sub(p, q);
    let n = math::norm(d);
    if n > 0.0 {
        return math::scale(d, 1.0 / n);
    }
    let mut best = (f64::INFINITY, [0.0; 3]);
    for axis in 0..3 {
        let lo = p[axis] - core.min[axis];
        let hi = core.max[axis] - p[axis];
        if lo < best.0 {
            let mut v = [0.0; 3];
            v[axis] = -1.0;
            best = (lo, v);
        }
        if hi < best.0 {
            let mut v = [0.0; 3];
            v[axis] = 1.0;
            best = (hi, v);
        }
    }
    best.1
}

fn leg_clear(zones: &[Aabb], a: Vec3, b: Vec3) -> bool {
    zones.iter().all(|z| !z.intersects_segment(a, b))
}

/// Shortest obstacle-avoiding polyline from `start` to `goal` (inclusive of
/// both), or `None` when the goal is unreachable.
pub fn route(task: &TaskSpec, clearance: f64, start: Vec3, goal: Vec3) -> Option<Vec<Vec3>> {
    let zones: Vec<Aabb> = task.obstacles.iter().map(|b| b.inflate(clearance)).collect();
    if leg_clear(&zones, start, goal) {
        return Some(vec![start, goal]);
    }
    let mut points = vec![start, goal];
    for b in &task.obstacles {
        let grown = b.inflate(clearance * WAYPOINT_MARGIN);
        for (a, c) in grown.edges() {
            for p in [
                a,
                c,
                math::scale(math::add(a, c), 0.5),
                closest_on_segment(a, c, start),
                closest_on_segment(a, c, goal),
            ] {
                let usable = task.workspace.contains(p) && zones.iter().all(|z| !z.contains(p));
                if usable && !points.iter().any(|q| math::norm(math::sub(*q, p)) < 1e-12) {
                    points.push(p);
                }
            }
        }
    }
    let mut graph: UnGraph<Vec3, f64> = UnGraph::with_capacity(points.len(), points.len() * 4);
    let ids: Vec<NodeIndex> = points.iter().map(|p| graph.add_node(*p)).collect();
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            if leg_clear(&zones, points[i], points[j]) {
                graph.add_edge(ids[i], ids[j], math::norm(math::sub(points[i], points[j])));
            }
        }
    }
    let (_, path) = astar(&graph, ids[0], |n| n == ids[1], |e| *e.weight(), |_| 0.0)?;
    Some(path.into_iter().map(|n| graph[n]).collect())
}

/// The simulated user's command for `state` while working on subtask
/// `progress`.
pub fn oracle_action(state: &TaskState, task: &TaskSpec, cfg: &OracleConfig, progress: usize) -> Result<UserAction> {
    let Some(spec) = task.subtasks.get(progress) else {
        return Ok(UserAction::idle());
    };
    if spec.needs_toggle(state)? {
        return Ok(UserAction::toggle());
    }
    let target = subtask_target(spec, state)?;
    let ee = state.ee.position;
    if math::norm(math::sub(target.position, ee)) <= spec.tolerance.position {
        return Ok(UserAction::idle());
    }
    let command = |dir: Vec3, speed: f64| {
        let n = math::norm(dir);
        let t = math::scale(dir, cfg.magnitude * speed / n);
        UserAction::translate(t).clamped()
    };
    // Pushed into an obstacle's clearance zone: back straight out first.
    if let Some(b) = task
        .obstacles
        .iter()
        .filter(|b| b.inflate(cfg.clearance).contains(ee))
        .min_by(|a, b| a.distance(ee).total_cmp(&b.distance(ee)))
    {
        return Ok(command(escape_direction(b, ee), 1.0));
    }
    let path = route(task, cfg.clearance, ee, target.position).ok_or_else(|| {
        IlsaError::config(format!(
            "task {}: no obstacle-free route from {:?} to subtask {progress} target {:?}",
            task.name, ee, target.position
        ))
    })?;
    let next = path[1];
    let dir = math::sub(next, ee);
    let dist = math::norm(dir);
    let speed = if path.len() > 2 { (dist / cfg.step).min(1.0) } else { 1.0 };
    if dist == 0.0 {
        return Ok(UserAction::idle());
    }
    Ok(command(dir, speed))
}

/// Orientation error still to correct in the current subtask, or `None`
/// when the subtask has no orientation goal or already meets it.
fn pending_rotation(state: &TaskState, task: &TaskSpec, progress: usize) -> Result<Option<Vec3>> {
    let Some(spec) = task.subtasks.get(progress) else {
        return Ok(None);
    };
    if spec.target.orientation.is_none() {
        return Ok(None);
    }
    let target = subtask_target(spec, state)?;
    let err = math::angle_diff(state.ee.orientation, target.orientation);
    Ok((math::max_abs(err) > spec.tolerance.angle).then_some(err))
}

/// The simulated user as an input source. Translation commands come from
/// [`oracle_action`]; on top of that the user watches orientation subtasks
/// and, when the robot stops making rotational progress, takes the rotation
/// over through the bypass until the subtask is done.
#[derive(Debug, Clone)]
pub struct OracleUser {
    pub cfg: OracleConfig,
    watch: Option<RotationWatch>,
}

#[derive(Debug, Clone, Copy)]
struct RotationWatch {
    progress: usize,
    window_start: f64,
    ticks: usize,
    engaged: bool,
}

impl OracleUser {
    pub fn new(cfg: OracleConfig) -> Self {
        OracleUser { cfg, watch: None }
    }
}

impl InputSource for OracleUser {
    fn next_input(&mut self, state: &TaskState, task: &TaskSpec, progress: usize) -> Result<UserAction> {
        let base = oracle_action(state, task, &self.cfg, progress)?;
        let Some(err) = pending_rotation(state, task, progress)? else {
            self.watch = None;
            return Ok(base);
        };
        let size = math::max_abs(err);
        let w = match &mut self.watch {
            Some(w) if w.progress == progress => w,
            slot => slot.insert(RotationWatch {
                progress,
                window_start: size,
                ticks: 0,
                engaged: false,
            }),
        };
        w.ticks += 1;
        if !w.engaged && w.ticks >= self.cfg.rotation_patience {
            let rate = (w.window_start - size) / w.ticks as f64;
            w.engaged = rate < self.cfg.rotation_rate;
            w.window_start = size;
            w.ticks = 0;
        }
        // Rotation is only taken over while the position is held.
        if !w.engaged || base.gripper_toggle || math::norm(base.translation) > 0.0 {
            return Ok(base);
        }
        let r = self.cfg.rot_step;
        Ok(UserAction {
            rotation_bypass: Some(err.map(|e| e.clamp(-r, r))),
            ..UserAction::idle()
        })
    }
}

/// Settings shared by every trial of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub trials: usize,
    pub gate: GateConfig,
    pub trial: TrialConfig,
    pub oracle: OracleConfig,
    pub finetune: FinetuneConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            trials: 4,
            gate: GateConfig::default(),
            trial: TrialConfig::default(),
            oracle: OracleConfig::default(),
            finetune: FinetuneConfig::default(),
        }
    }
}

/// Layouts for one experiment: trial `k` uses stream `k` of `seed`.
/// Layouts whose subtask targets leave the workspace are redrawn.
pub fn experiment_layouts(task: &TaskSpec, trials: usize, seed: u64) -> Result<Vec<TaskState>> {
    (0..trials)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(math::mix_seed(seed, 0x1a70 + k as u64));
            for _ in 0..MAX_LAYOUT_ATTEMPTS {
                let s = sample_layout(task, &mut rng);
                if layout_reachable(task, &s)? {
                    return Ok(s);
                }
            }
            Err(IlsaError::config(format!("task {}: no valid layout", task.name)))
        })
        .collect()
}

fn layout_reachable(task: &TaskSpec, initial: &TaskState) -> Result<bool> {
    Ok(crate::trajgen::reference_length(task, initial, &Default::default()).is_ok())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub variant: Variant,
    pub seed: u64,
    pub metrics: Vec<Metrics>,
    pub layouts: Vec<TaskState>,
    pub reports: Vec<FinetuneReport>,
    #[serde(skip)]
    pub trajectories: Vec<Trajectory>,
}

/// The four-trial protocol: each trial runs on a fresh layout with the
/// oracle, then (except for the static baseline) the policy is fine-tuned on
/// every interaction so far before the next trial. No update follows the
/// last trial since nothing would observe it.
pub fn run_experiment(
    task: &TaskSpec,
    pretrained: &Policy,
    pretrain_data: &[Trajectory],
    variant: Variant,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(ExperimentResult, Policy)> {
    cfg.oracle.validate()?;
    let layouts = experiment_layouts(task, cfg.trials, seed)?;
    let mut policy = pretrained.clone();
    let mut result = ExperimentResult {
        variant,
        seed,
        metrics: Vec::new(),
        layouts: layouts.clone(),
        reports: Vec::new(),
        trajectories: Vec::new(),
    };
    let mut oracle = OracleUser::new(cfg.oracle);
    for (k, layout) in layouts.into_iter().enumerate() {
        let env = Env::new(task.clone(), layout)?;
        let (traj, metrics) = run_trial(env, &policy, &cfg.gate, &cfg.trial, &mut oracle, k as u32, seed)?;
        result.metrics.push(metrics);
        result.trajectories.push(traj);
        if variant != Variant::Static && k + 1 < cfg.trials {
            let ft = FinetuneConfig {
                variant,
                seed: math::mix_seed(seed, 0xf7 + k as u64),
                ..cfg.finetune.clone()
            };
            let report = finetune(&mut policy, &ft, &result.trajectories, pretrain_data, task.grasp_radius, |_, _| {})?;
            result.reports.push(report);
        }
    }
    Ok((result, policy))
}

/// Mean and (population) standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub trial: usize,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub task: String,
    pub seed: u64,
    pub rows: Vec<AblationRow>,
    pub raw: Vec<ExperimentResult>,
    /// Whether ILSA's last-trial mean is no worse than every other variant's.
    pub ilsa_best_or_tied: Option<bool>,
}

impl AblationTable {
    pub fn cell(&self, variant: Variant, trial: usize) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant && r.trial == trial)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,trial,mean,std,n\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{},{}\n", r.variant, r.trial, r.mean, r.std, r.n));
        }
        s
    }
}

/// Per-trial completion-step statistics of `results` (all one variant).
pub fn summarize(variant: Variant, results: &[ExperimentResult], trials: usize) -> Vec<AblationRow> {
    (0..trials)
        .map(|k| {
            let v: Vec<f64> = results.iter().map(|r| r.metrics[k].completion_steps as f64).collect();
            let (mean, std) = mean_std(&v);
            AblationRow {
                variant,
                trial: k + 1,
                mean,
                std,
                n: v.len(),
            }
        })
        .collect()
}

/// Experiment seeds of an ablation run.
pub fn experiment_seeds(seed: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| math::mix_seed(seed, 0xab1a + i)).collect()
}

/// Runs every variant over the same `n_experiments` layout sequences.
pub fn run_ablation(
    task: &TaskSpec,
    pretrained: &Policy,
    pretrain_data: &[Trajectory],
    variants: &[Variant],
    n_experiments: usize,
    seed: u64,
    cfg: &ExperimentConfig,
    mut progress: impl FnMut(Variant, usize, &ExperimentResult),
) -> Result<AblationTable> {
    let seeds = experiment_seeds(seed, n_experiments);
    let mut rows = Vec::new();
    let mut raw = Vec::new();
    for &v in variants {
        let mut results = Vec::new();
        for (i, &s) in seeds.iter().enumerate() {
            let (r, _) = run_experiment(task, pretrained, pretrain_data, v, cfg, s)?;
            progress(v, i, &r);
            results.push(r);
        }
        rows.extend(summarize(v, &results, cfg.trials));
        raw.extend(results);
    }
    let last = cfg.trials;
    let ilsa_best_or_tied = rows
        .iter()
        .find(|r| r.variant == Variant::Ilsa && r.trial == last)
        .map(|ilsa| {
            rows.iter()
                .filter(|r| r.trial == last && r.variant != Variant::Ilsa)
                .all(|r| ilsa.mean <= r.mean)
        });
    Ok(AblationTable {
        task: task.name.clone(),
        seed,
        rows,
        raw,
        ilsa_best_or_tied,
    })
}

/// Oracle-driven autonomy check: the policy must finish without any
/// override. Returns `(metrics, reference_length)`.
pub fn autonomy_probe<M: ActionModel + ?Sized>(
    task: &TaskSpec,
    model: &M,
    layout: TaskState,
    cfg: &ExperimentConfig,
) -> Result<(Metrics, usize)> {
    let reference = crate::trajgen::reference_length(task, &layout, &Default::default())?;
    let env = Env::new(task.clone(), layout)?;
    let mut oracle = OracleUser::new(cfg.oracle);
    let (_, m) = run_trial(env, model, &cfg.gate, &cfg.trial, &mut oracle, 0, 0)?;
    Ok((m, reference))
}
