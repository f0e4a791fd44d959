use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ilsa_core::arbitration::{run_trial, Env};
use ilsa_core::incremental::{finetune, FinetuneConfig, Variant};
use ilsa_core::io::{load_trajectories, save_json, save_trajectories};
use ilsa_core::policy::{pretrain, Policy};
use ilsa_core::simuser::{
    experiment_layouts, run_ablation, run_experiment, summarize, ExperimentResult, OracleUser,
};
use ilsa_core::trajgen::{generate_task_trajectories, GenConfig};
use ilsa_core::{IlsaError, TaskSpec, Trajectory};

use crate::config::{data_root, resolve_task, AppConfig};
use crate::server::{serve, ServerState};
use crate::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "ilsa", version, about = "Shared-autonomy workbench with incremental fine-tuning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate kinematic demonstrations as JSONL.
    GenData(GenDataArgs),
    /// Generate (or load) demonstrations and train a policy checkpoint.
    Pretrain(PretrainArgs),
    /// One trial driven by the simulated user.
    Trial(TrialArgs),
    /// One incremental update of a checkpoint.
    Finetune(FinetuneArgs),
    /// The multi-trial protocol for one variant over several seeds.
    Experiment(ExperimentArgs),
    /// Every variant over shared layouts; per-trial completion-step table.
    Ablate(AblateArgs),
    /// Live session service.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Built-in task name or task JSON file.
    #[arg(long)]
    pub task: String,
    /// JSON file overriding numeric defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint to write; the loss history goes next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Cached demonstrations: loaded if the file exists, written otherwise.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrialArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Switch::On)]
    pub obstacles: Switch,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// ilsa, a, b1, b2, b3, b4, c1 or c2.
    #[arg(long)]
    pub variant: String,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Interaction logs to learn from.
    #[arg(long, num_args = 1.., required = true)]
    pub new: Vec<PathBuf>,
    /// Kinematic demonstrations used by the variants that replay them.
    #[arg(long)]
    pub pretrain: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Task for the grasp radius; defaults to the task named in the logs.
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ModelSource {
    /// Pretrained checkpoint; trained from scratch when absent.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Kinematic demonstrations; generated when absent.
    #[arg(long)]
    pub pretrain: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Switch::On)]
    pub obstacles: Switch,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub model: ModelSource,
    #[arg(long, default_value = "ilsa")]
    pub variant: String,
    /// `a..b` (inclusive), a comma list, or one seed.
    #[arg(long, default_value = "0")]
    pub seeds: String,
    /// Full results as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub model: ModelSource,
    /// Comma list; all fine-tuned variants when absent.
    #[arg(long)]
    pub variants: Option<String>,
    #[arg(long, default_value_t = 5)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for ablation.json and ablation.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Kinematic demonstrations; generated when absent.
    #[arg(long)]
    pub pretrain: Option<PathBuf>,
    /// Overrides the configured tick period.
    #[arg(long)]
    pub tick_ms: Option<u64>,
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => pretrain_cmd(a),
        Command::Trial(a) => trial(a),
        Command::Finetune(a) => finetune_cmd(a),
        Command::Experiment(a) => experiment(a),
        Command::Ablate(a) => ablate(a),
        Command::Serve(a) => serve_cmd(a),
    }
}

fn setup(c: &Common) -> CliResult<(TaskSpec, AppConfig)> {
    let cfg = AppConfig::load(c.config.as_deref())?;
    Ok((resolve_task(&c.task)?, cfg))
}

fn with_obstacles(task: TaskSpec, s: Switch) -> TaskSpec {
    match s {
        Switch::On => task,
        Switch::Off => task.without_obstacles(),
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> CliResult<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value).map_err(IlsaError::from)?;
    writeln!(out)?;
    Ok(())
}

/// `foo.ckpt` → `foo.ckpt.<suffix>`.
fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

pub fn parse_seeds(spec: &str) -> CliResult<Vec<u64>> {
    let bad = || CliError::Usage(format!("bad seed list '{spec}'"));
    let num = |s: &str| s.trim().parse::<u64>().map_err(|_| bad());
    let seeds = if let Some((a, b)) = spec.split_once("..") {
        let (a, b) = (num(a)?, num(b)?);
        if a > b {
            return Err(bad());
        }
        (a..=b).collect()
    } else {
        spec.split(',').map(num).collect::<CliResult<Vec<_>>>()?
    };
    Ok(seeds)
}

fn parse_variant(s: &str) -> CliResult<Variant> {
    s.parse().map_err(|e: IlsaError| CliError::Usage(e.to_string()))
}

fn gen_data(a: GenDataArgs) -> CliResult<()> {
    let (task, cfg) = setup(&a.common)?;
    let gen = GenConfig {
        trajectories_per_task: a.n.unwrap_or(cfg.gen.trajectories_per_task),
        rng_seed: a.seed.unwrap_or(cfg.gen.rng_seed),
        ..cfg.gen
    };
    let data = generate_task_trajectories(&task, &gen)?;
    save_trajectories(&a.out, &data)?;
    let steps: usize = data.iter().map(|t| t.steps.len()).sum();
    eprintln!("wrote {} trajectories ({steps} steps) to {}", data.len(), a.out.display());
    Ok(())
}

fn demonstrations(task: &TaskSpec, gen: &GenConfig, cache: Option<&Path>) -> CliResult<Vec<Trajectory>> {
    match cache {
        Some(p) if p.exists() => Ok(load_trajectories(p)?),
        _ => {
            let data = generate_task_trajectories(task, gen)?;
            if let Some(p) = cache {
                save_trajectories(p, &data)?;
            }
            Ok(data)
        }
    }
}

fn train_policy(task: &TaskSpec, cfg: &AppConfig, data: &[Trajectory]) -> CliResult<(Policy, Vec<f64>)> {
    let policy_cfg = ilsa_core::policy::PolicyConfig {
        object_count: task.object_count,
        ..cfg.policy.clone()
    };
    let epochs = cfg.train.epochs;
    let (policy, hist) = pretrain(policy_cfg, data, &cfg.train, |e, loss| {
        if e % 10 == 0 || e == epochs {
            eprintln!("epoch {e}/{epochs} loss {loss:.5}");
        }
    })?;
    Ok((policy, hist))
}

fn pretrain_cmd(a: PretrainArgs) -> CliResult<()> {
    let (task, cfg) = setup(&a.common)?;
    let data = demonstrations(&task, &cfg.gen, a.data.as_deref())?;
    let (policy, hist) = train_policy(&task, &cfg, &data)?;
    policy.save(&a.out)?;
    save_json(&sidecar(&a.out, "history.json"), &hist)?;
    eprintln!("wrote {}", a.out.display());
    Ok(())
}

fn load_policy(path: &Path, task: &TaskSpec) -> CliResult<Policy> {
    let policy = Policy::load(path)?;
    if policy.cfg.object_count != task.object_count {
        return Err(IlsaError::config(format!(
            "checkpoint expects {} objects, task {} has {}",
            policy.cfg.object_count, task.name, task.object_count
        ))
        .into());
    }
    Ok(policy)
}

fn trial(a: TrialArgs) -> CliResult<()> {
    let (task, cfg) = setup(&a.common)?;
    let task = with_obstacles(task, a.obstacles);
    let policy = load_policy(&a.ckpt, &task)?;
    let layout = experiment_layouts(&task, 1, a.seed)?.remove(0);
    let env = Env::new(task, layout)?;
    let exp = &cfg.experiment;
    let mut user = OracleUser::new(exp.oracle);
    let (traj, metrics) = run_trial(env, &policy, &exp.gate, &exp.trial, &mut user, 0, a.seed)?;
    if let Some(out) = &a.out {
        save_trajectories(out, std::slice::from_ref(&traj))?;
    }
    print_json(&metrics)
}

fn finetune_cmd(a: FinetuneArgs) -> CliResult<()> {
    let variant = parse_variant(&a.variant)?;
    if variant == Variant::Static {
        return Err(CliError::Usage("the static variant never updates".into()));
    }
    let cfg = AppConfig::load(a.config.as_deref())?;
    let mut new = Vec::new();
    for p in &a.new {
        new.extend(load_trajectories(p)?);
    }
    let pre = load_trajectories(&a.pretrain)?;
    let task_id = match &a.task {
        Some(t) => t.clone(),
        None => new
            .first()
            .map(|t| t.task_id.clone())
            .ok_or_else(|| IlsaError::precondition("no interaction logs in the --new files"))?,
    };
    let task = resolve_task(&task_id)?;
    let mut policy = load_policy(&a.ckpt, &task)?;
    let ft = FinetuneConfig {
        variant,
        seed: a.seed.unwrap_or(cfg.experiment.finetune.seed),
        ..cfg.experiment.finetune.clone()
    };
    let report = finetune(&mut policy, &ft, &new, &pre, task.grasp_radius, |e, loss| {
        eprintln!("epoch {e}/{} loss {loss:.5}", ft.epochs);
    })?;
    policy.save(&a.out)?;
    save_json(&sidecar(&a.out, "report.json"), &report)?;
    print_json(&report)
}

/// Pretrained policy and its demonstrations, loaded or produced on the spot.
fn model_source(task: &TaskSpec, cfg: &AppConfig, m: &ModelSource) -> CliResult<(Policy, Vec<Trajectory>)> {
    let data = match &m.pretrain {
        Some(p) => load_trajectories(p)?,
        None => generate_task_trajectories(task, &cfg.gen)?,
    };
    let policy = match &m.ckpt {
        Some(p) => load_policy(p, task)?,
        None => {
            eprintln!("no --ckpt given; pretraining on {} demonstrations", data.len());
            train_policy(task, cfg, &data)?.0
        }
    };
    Ok((policy, data))
}

fn metrics_table(results: &[ExperimentResult]) -> String {
    let mut s = String::from("seed,trial,completion_steps,override_count,pause_count,collision_count,success\n");
    for r in results {
        for (k, m) in r.metrics.iter().enumerate() {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.seed,
                k + 1,
                m.completion_steps,
                m.override_count,
                m.pause_count,
                m.collision_count,
                m.success
            ));
        }
    }
    s
}

fn experiment(a: ExperimentArgs) -> CliResult<()> {
    let (task, cfg) = setup(&a.common)?;
    let task = with_obstacles(task, a.model.obstacles);
    let variant = parse_variant(&a.variant)?;
    let seeds = parse_seeds(&a.seeds)?;
    let (policy, data) = model_source(&task, &cfg, &a.model)?;
    let mut results = Vec::new();
    for seed in seeds {
        let (r, _) = run_experiment(&task, &policy, &data, variant, &cfg.experiment, seed)?;
        eprintln!("seed {seed}: completion steps {:?}", r.metrics.iter().map(|m| m.completion_steps).collect::<Vec<_>>());
        results.push(r);
    }
    print!("{}", metrics_table(&results));
    for row in summarize(variant, &results, cfg.experiment.trials) {
        println!("# trial {} mean {:.1} std {:.1} n {}", row.trial, row.mean, row.std, row.n);
    }
    if let Some(out) = &a.out {
        save_json(out, &results)?;
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> CliResult<()> {
    let (task, cfg) = setup(&a.common)?;
    let task = with_obstacles(task, a.model.obstacles);
    let variants = match &a.variants {
        Some(list) => list.split(',').map(|v| parse_variant(v.trim())).collect::<CliResult<Vec<_>>>()?,
        None => Variant::FINETUNED.to_vec(),
    };
    if a.n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    let (policy, data) = model_source(&task, &cfg, &a.model)?;
    let table = run_ablation(&task, &policy, &data, &variants, a.n, a.seed, &cfg.experiment, |v, i, r| {
        let steps: Vec<usize> = r.metrics.iter().map(|m| m.completion_steps).collect();
        eprintln!("{v} run {}: {steps:?}", i + 1);
    })?;
    print!("{}", table.to_csv());
    if let Some(best) = table.ilsa_best_or_tied {
        println!("# ilsa best or tied on the last trial: {}", if best { "yes" } else { "no" });
    }
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir)?;
        save_json(&dir.join("ablation.json"), &table)?;
        std::fs::write(dir.join("ablation.csv"), table.to_csv())?;
    }
    Ok(())
}

fn serve_cmd(a: ServeArgs) -> CliResult<()> {
    let (task, mut cfg) = setup(&a.common)?;
    if let Some(t) = a.tick_ms {
        cfg.serve.tick_ms = t;
    }
    cfg.validate()?;
    let policy = load_policy(&a.ckpt, &task)?;
    let data = match &a.pretrain {
        Some(p) => load_trajectories(p)?,
        None => generate_task_trajectories(&task, &cfg.gen)?,
    };
    let root = data_root();
    std::fs::create_dir_all(&root)?;
    let state = Arc::new(ServerState::new(task, policy, data, cfg, root.clone()));
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind((a.host.as_str(), a.port)).await?;
        eprintln!("listening on {} (data under {})", listener.local_addr()?, root.display());
        serve(listener, state).await
    })?;
    Ok(())
}
