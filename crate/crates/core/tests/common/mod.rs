#![allow(dead_code)]

//! Independent reference computations and random fixtures shared by the
//! integration tests.

use ilsa_core::policy::{to_action_units, LossMask, Policy, PolicyConfig, Sample};
use ilsa_core::types::{advance, Pose, Provenance, RobotAction, Step, StepSource, TaskState, Trajectory, UserAction};
use ilsa_core::Vec3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const GRASP_RADIUS: f64 = 0.03;

/// A narrow model that keeps gradient checks and fine-tunes fast.
pub fn small_cfg(seed: u64) -> PolicyConfig {
    PolicyConfig {
        hidden: 12,
        d_model: 8,
        layers: 1,
        heads: 2,
        ffn: 12,
        init_seed: seed,
        ..PolicyConfig::default()
    }
}

pub fn rand3(rng: &mut impl Rng, lo: f64, hi: f64) -> Vec3 {
    [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)]
}

pub fn random_state(rng: &mut impl Rng, objects: usize) -> TaskState {
    let ee = Pose::new(rand3(rng, -0.5, 0.5), rand3(rng, -1.0, 1.0));
    let objs = (0..objects).map(|_| Pose::new(rand3(rng, -0.5, 0.5), rand3(rng, -1.0, 1.0))).collect();
    let mut s = TaskState::new(ee, objs);
    if rng.random_bool(0.3) {
        s.gripper_closed = true;
        s.grasped = Some(rng.random_range(0..objects));
    }
    s
}

pub fn random_action(rng: &mut impl Rng, cfg: &PolicyConfig) -> RobotAction {
    let t = rand3(rng, -cfg.trans_scale, cfg.trans_scale);
    let r = rand3(rng, -cfg.rot_scale, cfg.rot_scale);
    RobotAction::from_parts(t, r)
}

// Loss terms written out longhand.

pub fn ref_demo(p: &[f64; 6], t: &[f64; 6]) -> f64 {
    let mut s = 0.0;
    for i in 0..6 {
        s += (p[i] - t[i]).powi(2);
    }
    s
}

pub fn ref_direc(f: &[f64; 6], u: &Vec3) -> f64 {
    let mut s = 0.0;
    for i in 0..3 {
        if f[i] * u[i] < 0.0 {
            s += f[i].abs();
        }
    }
    s
}

pub fn ref_order(f: &[f64; 6], u: &Vec3) -> f64 {
    let mut s = 0.0;
    for (i, j) in [(0, 1), (0, 2), (1, 2)] {
        let df = f[i].abs() - f[j].abs();
        let du = u[i].abs() - u[j].abs();
        if df * du < 0.0 {
            s += df.abs();
        }
    }
    s
}

fn units(a: &[f64; 6], cfg: &PolicyConfig) -> [f64; 6] {
    let mut out = [0.0; 6];
    for i in 0..6 {
        let s = if i < 3 { cfg.trans_scale } else { cfg.rot_scale };
        out[i] = a[i] / s;
    }
    out
}

/// Weighted sum of the four terms, evaluated on actions expressed in units of
/// the per-group step bound.
pub fn ref_total(am: &[f64; 6], af: &[f64; 6], ar: &[f64; 6], u: &Vec3, cfg: &PolicyConfig, mask: &LossMask) -> f64 {
    let (am, af, ar) = (units(am, cfg), units(af, cfg), units(ar, cfg));
    let mut s = 0.0;
    if mask.demo_m {
        s += cfg.alpha * ref_demo(&am, &ar);
    }
    if mask.demo_f {
        s += cfg.beta * ref_demo(&af, &ar);
    }
    if mask.direc {
        s += cfg.gamma * ref_direc(&af, u);
    }
    if mask.order {
        s += cfg.delta * ref_order(&af, u);
    }
    s
}

/// A random interaction log: alternating runs of policy and override steps,
/// with occasional gripper toggles and rotation-only overrides.
pub fn random_log(rng: &mut impl Rng, len: usize, override_prob: f64) -> Trajectory {
    let mut state = TaskState::new(
        Pose::new(rand3(rng, -0.3, 0.3), rand3(rng, -0.5, 0.5)),
        vec![Pose::at(rand3(rng, -0.3, 0.3)), Pose::at(rand3(rng, -0.3, 0.3))],
    );
    let mut steps = Vec::with_capacity(len);
    let mut source = StepSource::Policy;
    let mut rot_run = false;
    for _ in 0..len {
        if rng.random_bool(0.25) {
            source = if rng.random_bool(override_prob) {
                rot_run = rng.random_bool(0.2);
                StepSource::UserOverride
            } else {
                StepSource::Policy
            };
        }
        let mut user = UserAction::translate(rand3(rng, -1.0, 1.0));
        user.gripper_toggle = rng.random_bool(0.04);
        let robot = if source == StepSource::UserOverride && rot_run {
            let r = rand3(rng, -0.05, 0.05);
            user = UserAction {
                rotation_bypass: Some(r),
                ..UserAction::idle()
            };
            RobotAction::from_parts([0.0; 3], r)
        } else {
            let t = rand3(rng, -0.006, 0.006);
            RobotAction::from_parts(t, rand3(rng, -0.02, 0.02))
        };
        let next = advance(&state, &user, &robot, GRASP_RADIUS);
        steps.push(Step {
            state,
            user,
            robot,
            source,
            gate_cosine: if source == StepSource::UserOverride { Some(-0.5) } else { Some(0.9) },
        });
        state = next;
    }
    Trajectory {
        task_id: "synthetic".into(),
        trial_index: 0,
        seed: 0,
        provenance: Provenance::Interaction,
        steps,
        aborted: false,
    }
}

/// Distance from `p` to the line through `a` and `b`, and the projection
/// parameter along it.
pub fn line_offset(a: Vec3, b: Vec3, p: Vec3) -> (f64, f64) {
    let d = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let v = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let dd = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
    if dd == 0.0 {
        return ((v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt(), 0.0);
    }
    let s = (v[0] * d[0] + v[1] * d[1] + v[2] * d[2]) / dd;
    let r = [v[0] - s * d[0], v[1] - s * d[1], v[2] - s * d[2]];
    ((r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt(), s)
}

/// Number of corrected steps replacing one episode: the straight segment
/// split so no step exceeds either bound, with at least one step when a
/// gripper event has to be carried.
pub fn corrected_len(start: &Pose, end: &Pose, step: f64, rot: f64, has_toggle: bool) -> usize {
    let d: f64 = (0..3).map(|i| (end.position[i] - start.position[i]).powi(2)).sum::<f64>().sqrt();
    let mut r: f64 = 0.0;
    for i in 0..3 {
        let mut a = (end.orientation[i] - start.orientation[i]) % std::f64::consts::TAU;
        if a > std::f64::consts::PI {
            a -= std::f64::consts::TAU;
        } else if a < -std::f64::consts::PI {
            a += std::f64::consts::TAU;
        }
        r = r.max(a.abs());
    }
    let n = ((d / step - 1e-10).ceil().max(0.0) as usize).max((r / rot - 1e-10).ceil().max(0.0) as usize);
    n.max(has_toggle as usize)
}

/// Samples whose outputs sit well clear of every indicator switch, so that
/// parameter nudges of size `h` cannot flip a gate.
pub fn smooth_samples(policy: &Policy, rng: &mut ChaCha8Rng, n: usize) -> Vec<Sample> {
    let masks = [LossMask::ALL, LossMask::DEMO_M_ONLY, LossMask::ALL.with_weight(0.7)];
    let mut out = Vec::new();
    while out.len() < n {
        let state = random_state(rng, policy.cfg.object_count);
        let user = rand3(rng, -1.0, 1.0);
        let o = policy.forward(&state, &UserAction::translate(user)).unwrap();
        let f = to_action_units(&o.final_action, &policy.cfg).translation();
        let margin = 1e-4;
        let clear = (0..3).all(|i| f[i].abs() > margin && user[i].abs() > margin)
            && [(0, 1), (0, 2), (1, 2)].iter().all(|&(p, q)| {
                (f[p].abs() - f[q].abs()).abs() > margin && (user[p].abs() - user[q].abs()).abs() > margin
            });
        if clear {
            out.push(Sample {
                state,
                user,
                target: random_action(rng, &policy.cfg),
                mask: masks[out.len() % masks.len()],
            });
        }
    }
    out
}

/// Checks one corrected log against its source: each replaced span lies on
/// the straight line from p_t0 to p_t2 and ends on both points, untouched
/// spans keep their positions, and the result replays.
pub fn check_correction(
    src: &Trajectory,
    out: &Trajectory,
    gen: &ilsa_core::trajgen::GenConfig,
) -> Result<(), String> {
    use ilsa_core::incremental::find_overwrite_episodes;
    let tol = 1e-9;
    let close = |a: Vec3, b: Vec3| (0..3).all(|i| (a[i] - b[i]).abs() <= tol);
    out.check_consistency(GRASP_RADIUS).map_err(|e| e.to_string())?;
    let eps = find_overwrite_episodes(src);
    if eps.is_empty() {
        return if out.positions() == src.positions() {
            Ok(())
        } else {
            Err("override-free log changed".into())
        };
    }
    let mut shift: isize = 0;
    let mut cursor = 0;
    let mut replayed = false;
    for ep in &eps {
        let o = (ep.t0 as isize + shift) as usize;
        for t in cursor..ep.t0 {
            let p = out.steps[(t as isize + shift) as usize].state.ee.position;
            if !close(p, src.steps[t].state.ee.position) {
                return Err(format!("untouched step {t} moved"));
            }
        }
        let toggles = src.steps[ep.t0..ep.t2].iter().any(|s| s.user.gripper_toggle);
        let n = corrected_len(&src.steps[ep.t0].state.ee, &src.steps[ep.t2].state.ee, gen.step_norm, gen.rot_step, toggles);
        // Before any gripper event has been moved the endpoints are copied
        // states and must match bit for bit; afterwards they are replayed.
        let (start, end) = (out.steps[o].state.ee.position, out.steps[o + n].state.ee.position);
        let ends_ok = if replayed {
            close(start, ep.p_t0) && close(end, ep.p_t2)
        } else {
            start == ep.p_t0 && end == ep.p_t2
        };
        if !ends_ok {
            return Err(format!("segment at {o} does not run from p_t0 to p_t2"));
        }
        replayed |= toggles;
        for k in 0..=n {
            let p = out.steps[o + k].state.ee.position;
            let (d, s) = line_offset(ep.p_t0, ep.p_t2, p);
            if d > tol || s < -tol || s > 1.0 + tol {
                return Err(format!("step {} off the correction line by {d:e}", o + k));
            }
        }
        shift += n as isize - (ep.t2 - ep.t0) as isize;
        cursor = ep.t2;
    }
    for t in cursor..src.steps.len() {
        let p = out.steps[(t as isize + shift) as usize].state.ee.position;
        if !close(p, src.steps[t].state.ee.position) {
            return Err(format!("untouched step {t} moved"));
        }
    }
    if out.steps.len() as isize != src.steps.len() as isize + shift {
        return Err("corrected length mismatch".into());
    }
    Ok(())
}

/// A policy at a generic parameter point: fresh weights plus a uniform nudge
/// on every coordinate, so zero-initialized biases do not leave ReLU inputs
/// sitting exactly on the kink.
pub fn generic_policy(cfg: PolicyConfig, rng: &mut ChaCha8Rng, spread: f64) -> Policy {
    let mut policy = Policy::new(cfg).unwrap();
    for id in 0..policy.params.len() {
        for v in policy.params.value_mut(id).data_mut() {
            *v += rng.random_range(-spread..spread);
        }
    }
    policy
}
