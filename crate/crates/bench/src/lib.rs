//! Fixtures shared by the criterion benches.

use ilsa_core::arbitration::{run_trial, Env, GateConfig, TrialConfig};
use ilsa_core::policy::{samples_from, LossMask, Policy, PolicyConfig, Sample};
use ilsa_core::simuser::{experiment_layouts, OracleUser};
use ilsa_core::task::cereal_pour;
use ilsa_core::trajgen::{generate_task_trajectories, GenConfig};
use ilsa_core::{TaskSpec, Trajectory};

pub fn task() -> TaskSpec {
    cereal_pour()
}

/// Default-width policy at its initial weights.
pub fn policy() -> Policy {
    Policy::new(PolicyConfig::default()).expect("default config is valid")
}

pub fn demonstrations(n: usize) -> Vec<Trajectory> {
    let cfg = GenConfig {
        trajectories_per_task: n,
        ..GenConfig::default()
    };
    generate_task_trajectories(&task().without_obstacles(), &cfg).expect("generation succeeds")
}

pub fn batch(n: usize) -> Vec<Sample> {
    samples_from(&demonstrations(1), LossMask::ALL).into_iter().cycle().take(n).collect()
}

/// One oracle-driven trial of the untrained policy on the obstacle task.
pub fn trial_log(policy: &Policy, seed: u64) -> Trajectory {
    let task = task();
    let layout = experiment_layouts(&task, 1, seed).expect("layout").remove(0);
    let env = Env::new(task, layout).expect("env");
    let mut user = OracleUser::new(Default::default());
    run_trial(env, policy, &GateConfig::default(), &TrialConfig::default(), &mut user, 0, seed)
        .expect("trial runs")
        .0
}
