//! Live session service: one interactive session at a time over a
//! websocket at `/session`, plus two read-only JSON endpoints.
//!
//! The control loop runs on a blocking thread. The socket reader feeds it
//! through a latest-value input slot and a command queue; everything it
//! emits goes through one outbound queue whose writer assigns sequence
//! numbers.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::serve::ListenerExt;
use axum::{Json, Router};
use futures::{SinkExt, StreamExt};
use ilsa_core::arbitration::{Env, LatestInput, Metrics, TrialRunner};
use ilsa_core::incremental::{finetune, FinetuneConfig, Variant};
use ilsa_core::io::{load_json, save_json, save_trajectories};
use ilsa_core::policy::Policy;
use ilsa_core::simuser::experiment_layouts;
use ilsa_core::{math, Result, TaskSpec, Trajectory};
use serde::{Deserialize, Serialize};
use tokio::sync::mpsc::{self, error::TryRecvError, UnboundedReceiver, UnboundedSender};

use crate::config::AppConfig;
use crate::wire::*;

pub struct ServerState {
    pub task: TaskSpec,
    pub policy: Policy,
    pub pretrain: Vec<Trajectory>,
    pub cfg: AppConfig,
    pub root: PathBuf,
    busy: AtomicBool,
    counter: AtomicU64,
    records: Mutex<HashMap<String, SessionRecord>>,
}

impl ServerState {
    pub fn new(task: TaskSpec, policy: Policy, pretrain: Vec<Trajectory>, cfg: AppConfig, root: PathBuf) -> Self {
        ServerState {
            task,
            policy,
            pretrain,
            cfg,
            root,
            busy: AtomicBool::new(false),
            counter: AtomicU64::new(0),
            records: Mutex::new(HashMap::new()),
        }
    }

    fn session_dir(&self, id: &str) -> PathBuf {
        session_path(&self.root, id)
    }

    fn store(&self, record: &SessionRecord) -> Result<()> {
        save_json(&self.session_dir(&record.session_id).join("session.json"), record)?;
        self.records
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(record.session_id.clone(), record.clone());
        Ok(())
    }

    fn lookup(&self, id: &str) -> Option<SessionRecord> {
        if let Some(r) = self.records.lock().unwrap_or_else(|e| e.into_inner()).get(id) {
            return Some(r.clone());
        }
        // Sessions from earlier runs of the service are read back from disk.
        if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-') {
            return None;
        }
        load_json(&self.session_dir(id).join("session.json")).ok()
    }
}

/// What a session has produced so far. Paths are relative to the session
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session_id: String,
    pub task_id: String,
    pub variant: Variant,
    pub seed: u64,
    /// Trials started so far.
    pub trial_index: usize,
    pub trials: Vec<TrialRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_index: usize,
    /// Parameters the trial ran with.
    pub checkpoint: String,
    pub trajectory: String,
    pub metrics: Metrics,
    pub aborted: bool,
}

pub fn router(state: Arc<ServerState>) -> Router {
    Router::new()
        .route("/session", get(session))
        .route("/tasks", get(tasks))
        .route("/sessions/{id}/metrics", get(metrics))
        .with_state(state)
}

/// Serves until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<ServerState>) -> std::io::Result<()> {
    // Small frames every tick: Nagle batching would hold them back.
    let listener = listener.tap_io(|tcp| {
        let _ = tcp.set_nodelay(true);
    });
    axum::serve(listener, router(state)).await
}

#[derive(Serialize)]
struct TaskEntry {
    name: String,
    served: bool,
    spec: TaskSpec,
}

async fn tasks(State(s): State<Arc<ServerState>>) -> Json<Vec<TaskEntry>> {
    let mut out: Vec<TaskEntry> = TaskSpec::builtin_names()
        .iter()
        .filter_map(|n| TaskSpec::builtin(n).ok())
        .map(|spec| TaskEntry {
            name: spec.name.clone(),
            served: spec == s.task,
            spec,
        })
        .collect();
    if !out.iter().any(|t| t.served) {
        out.push(TaskEntry {
            name: s.task.name.clone(),
            served: true,
            spec: s.task.clone(),
        });
    }
    Json(out)
}

#[derive(Serialize)]
struct SessionMetrics {
    session_id: String,
    task_id: String,
    trials: Vec<TrialMetrics>,
}

#[derive(Serialize)]
struct TrialMetrics {
    trial_index: usize,
    aborted: bool,
    #[serde(flatten)]
    metrics: Metrics,
}

async fn metrics(State(s): State<Arc<ServerState>>, UrlPath(id): UrlPath<String>) -> Response {
    match s.lookup(&id) {
        Some(r) => Json(SessionMetrics {
            session_id: r.session_id,
            task_id: r.task_id,
            trials: r
                .trials
                .into_iter()
                .map(|t| TrialMetrics {
                    trial_index: t.trial_index,
                    aborted: t.aborted,
                    metrics: t.metrics,
                })
                .collect(),
        })
        .into_response(),
        None => (StatusCode::NOT_FOUND, Json(ErrorReport { message: format!("no session '{id}'") })).into_response(),
    }
}

#[derive(Debug, Deserialize)]
struct SessionQuery {
    #[serde(default)]
    seed: u64,
}

async fn session(ws: WebSocketUpgrade, Query(q): Query<SessionQuery>, State(s): State<Arc<ServerState>>) -> Response {
    ws.on_upgrade(move |socket| run_socket(socket, s, q.seed))
}

struct BusyGuard(Arc<ServerState>);

impl BusyGuard {
    fn acquire(s: &Arc<ServerState>) -> Option<BusyGuard> {
        s.busy
            .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
            .ok()
            .map(|_| BusyGuard(s.clone()))
    }
}

impl Drop for BusyGuard {
    fn drop(&mut self) {
        self.0.busy.store(false, Ordering::Release);
    }
}

fn frame(seq: u64, msg: WireMessage) -> Message {
    let text = serde_json::to_string(&Envelope { seq, msg }).expect("wire messages serialize");
    Message::Text(text.into())
}

enum Command {
    StartTrial,
    Finetune,
}

async fn run_socket(socket: WebSocket, state: Arc<ServerState>, seed: u64) {
    let (mut sink, mut stream) = socket.split();
    let Some(guard) = BusyGuard::acquire(&state) else {
        let _ = sink.send(frame(1, WireMessage::error("session busy"))).await;
        let _ = sink.close().await;
        return;
    };

    let (out_tx, mut out_rx) = mpsc::unbounded_channel::<WireMessage>();
    let (cmd_tx, cmd_rx) = mpsc::unbounded_channel::<Command>();
    let input = LatestInput::new();

    let writer = tokio::spawn(async move {
        let mut seq = 0;
        while let Some(msg) = out_rx.recv().await {
            seq += 1;
            if sink.send(frame(seq, msg)).await.is_err() {
                break;
            }
        }
        let _ = sink.close().await;
    });

    let control = {
        let (state, out, input) = (state.clone(), out_tx.clone(), input.clone());
        tokio::task::spawn_blocking(move || {
            let mut session = Session::open(state, seed, out.clone(), input);
            if let Err(e) = session.run(cmd_rx) {
                let _ = out.send(WireMessage::error(e.to_string()));
            }
        })
    };

    while let Some(Ok(msg)) = stream.next().await {
        let text = match msg {
            Message::Text(t) => t,
            Message::Close(_) => break,
            Message::Binary(_) => {
                let _ = out_tx.send(WireMessage::error("binary frames are not supported"));
                continue;
            }
            _ => continue,
        };
        match serde_json::from_str::<Envelope>(text.as_str()) {
            Ok(Envelope { msg: WireMessage::UserInput(u), .. }) => input.publish((&u).into()),
            Ok(Envelope { msg: WireMessage::Hello(_), .. }) => {
                let _ = cmd_tx.send(Command::StartTrial);
            }
            Ok(Envelope { msg: WireMessage::FinetuneRequest(_), .. }) => {
                let _ = cmd_tx.send(Command::Finetune);
            }
            Ok(Envelope { msg, .. }) => {
                let _ = out_tx.send(WireMessage::error(format!("unexpected {} from client", msg.kind())));
            }
            Err(e) => {
                let _ = out_tx.send(WireMessage::error(format!("malformed message: {e}")));
            }
        }
    }
    drop(cmd_tx);
    drop(out_tx);
    let _ = control.await;
    let _ = writer.await;
    drop(guard);
}

struct Session {
    state: Arc<ServerState>,
    record: SessionRecord,
    policy: Policy,
    out: UnboundedSender<WireMessage>,
    input: LatestInput,
    trajectories: Vec<Trajectory>,
    /// Number of completed trials already folded into the parameters.
    learned: usize,
}

impl Session {
    fn open(state: Arc<ServerState>, seed: u64, out: UnboundedSender<WireMessage>, input: LatestInput) -> Session {
        let n = state.counter.fetch_add(1, Ordering::Relaxed);
        let millis = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0);
        let record = SessionRecord {
            session_id: format!("s{millis}-{n}"),
            task_id: state.task.name.clone(),
            variant: Variant::Ilsa,
            seed,
            trial_index: 0,
            trials: Vec::new(),
        };
        Session {
            policy: state.policy.clone(),
            state,
            record,
            out,
            input,
            trajectories: Vec::new(),
            learned: 0,
        }
    }

    fn send(&self, msg: WireMessage) {
        // A closed outbound queue means the client is gone; the reader side
        // notices and ends the session.
        let _ = self.out.send(msg);
    }

    fn dir(&self) -> PathBuf {
        self.state.session_dir(&self.record.session_id)
    }

    fn run(&mut self, mut cmds: UnboundedReceiver<Command>) -> Result<()> {
        std::fs::create_dir_all(self.dir())?;
        self.state.store(&self.record)?;
        self.send(WireMessage::Hello(Hello {
            session_id: Some(self.record.session_id.clone()),
            variant: Some(self.record.variant.to_string()),
            seed: Some(self.record.seed),
            tick_ms: Some(self.state.cfg.serve.tick_ms),
            task: Some(self.state.task.clone()),
        }));
        while let Some(cmd) = cmds.blocking_recv() {
            let outcome = match cmd {
                Command::StartTrial => self.trial(&mut cmds),
                Command::Finetune => self.update(),
            };
            match outcome {
                Ok(true) => {}
                Ok(false) => break,
                Err(e) => self.send(WireMessage::error(e.to_string())),
            }
        }
        Ok(())
    }

    /// Runs one trial at the service tick. Returns false if the client left.
    fn trial(&mut self, cmds: &mut UnboundedReceiver<Command>) -> Result<bool> {
        let k = self.record.trial_index;
        let layouts = experiment_layouts(&self.state.task, k + 1, self.record.seed)?;
        let env = Env::new(self.state.task.clone(), layouts[k].clone())?;
        let ckpt = format!("policy_trial{k}.ckpt");
        self.policy.save(&self.dir().join(&ckpt))?;
        let cfg = &self.state.cfg.experiment;
        let mut runner = TrialRunner::new(env, &self.policy, cfg.gate, cfg.trial)?;
        self.input.reset();
        self.record.trial_index = k + 1;
        let period = Duration::from_millis(self.state.cfg.serve.tick_ms);
        let mut aborted = false;
        while !runner.finished() {
            let _ = self.out.send(WireMessage::StateUpdate(StateUpdate::new(
                k as u32,
                runner.ticks(),
                runner.env.progress(),
                runner.env.state(),
                runner.env.task(),
            )));
            std::thread::sleep(period);
            if client_gone(cmds, &self.out) {
                aborted = true;
                break;
            }
            let report = runner.tick(self.input.take())?;
            let _ = self.out.send(WireMessage::GateEvent(GateEvent {
                trial_index: k as u32,
                tick: report.tick,
                outcome: report.decision.outcome,
                cosine: report.decision.cosine,
                executed: report.executed.delta,
            }));
        }
        let (traj, metrics) = runner.finish(&self.state.task.name, k as u32, self.record.seed, aborted);
        let file = format!("trial{k}.jsonl");
        save_trajectories(&self.dir().join(&file), std::slice::from_ref(&traj))?;
        self.record.trials.push(TrialRecord {
            trial_index: k,
            checkpoint: ckpt,
            trajectory: file,
            metrics,
            aborted,
        });
        self.state.store(&self.record)?;
        if aborted {
            return Ok(false);
        }
        self.trajectories.push(traj);
        self.send(WireMessage::TrialComplete(TrialComplete {
            trial_index: k as u32,
            metrics,
            aborted,
        }));
        Ok(true)
    }

    /// ILSA update on every completed trial so far, streaming per-epoch
    /// losses.
    fn update(&mut self) -> Result<bool> {
        let done = self.trajectories.len();
        if done == 0 {
            self.send(WireMessage::error("no completed trial to learn from"));
            return Ok(true);
        }
        if self.learned == done {
            self.send(WireMessage::error("the last trial has already been learned from"));
            return Ok(true);
        }
        let cfg = FinetuneConfig {
            variant: Variant::Ilsa,
            seed: math::mix_seed(self.record.seed, 0xf7 + (done - 1) as u64),
            ..self.state.cfg.experiment.finetune.clone()
        };
        let epochs = cfg.epochs;
        let out = self.out.clone();
        let report = finetune(
            &mut self.policy,
            &cfg,
            &self.trajectories,
            &self.state.pretrain,
            self.state.task.grasp_radius,
            |epoch, loss| {
                let _ = out.send(WireMessage::FinetuneProgress(FinetuneProgress {
                    epoch,
                    epochs,
                    loss,
                }));
            },
        )?;
        self.learned = done;
        self.send(WireMessage::MetricsSummary(MetricsSummary {
            session_id: self.record.session_id.clone(),
            trials: self.record.trials.iter().map(|t| t.metrics).collect(),
            changed_partitions: report.changed_partitions,
            wall_time_s: report.wall_time_s,
        }));
        Ok(true)
    }
}

/// Refuses commands that arrive mid-trial; true once the client has left.
fn client_gone(cmds: &mut UnboundedReceiver<Command>, out: &UnboundedSender<WireMessage>) -> bool {
    loop {
        match cmds.try_recv() {
            Ok(_) => {
                let _ = out.send(WireMessage::error("a trial is in progress"));
            }
            Err(TryRecvError::Empty) => return false,
            Err(TryRecvError::Disconnected) => return true,
        }
    }
}

/// Directory holding a session's files under `root`.
pub fn session_path(root: &Path, id: &str) -> PathBuf {
    root.join("sessions").join(id)
}
