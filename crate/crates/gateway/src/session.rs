//! The teleoperation state machine. Owns the world; the server only moves
//! text frames in and out of it.

use std::path::PathBuf;

use base64::Engine as _;

use imlw_core::data::{validate_episode, Dataset, DataError};
use imlw_core::sim::{render, CameraKind, TaskLibrary, CONTROL_DT};
use imlw_core::{ActionRecord, ArmCommand, CameraConfig, Episode, Observation, StepRecord, TaskSpec, WorldState};

use crate::protocol::{parse_client, ClientMessage, ServerMessage, TaskInfo, WIRE_SCHEMA};

/// A realtime control stays in force this many ticks without a refresh.
pub const CONTROL_HOLD_TICKS: u32 = 5;
/// State is broadcast every this many ticks (10 Hz at a 20 Hz tick).
pub const STATE_EVERY_TICKS: u64 = 2;

#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub library: TaskLibrary,
    pub cameras: Vec<CameraConfig>,
    /// Dataset directory receiving saved episodes.
    pub out_dir: PathBuf,
    pub previews: bool,
    /// Fixed `created_at` stamp; wall clock when absent.
    pub created_at: Option<u64>,
    /// Advance exactly one tick per control message instead of on a timer.
    pub lockstep: bool,
}

impl SessionConfig {
    pub fn new(library: TaskLibrary, out_dir: PathBuf) -> Self {
        Self { library, cameras: CameraConfig::default_pair(16), out_dir, previews: false, created_at: None, lockstep: false }
    }
}

#[derive(Debug)]
enum Recording {
    Idle,
    Active(Vec<StepRecord>),
    Stopped(Vec<StepRecord>),
}

#[derive(Debug)]
struct Bound {
    task: TaskSpec,
    case_id: String,
    world: WorldState,
}

#[derive(Debug)]
pub struct Session {
    cfg: SessionConfig,
    session_id: String,
    collector: Option<String>,
    bound: Option<Bound>,
    clutch: bool,
    command: ArmCommand,
    command_age: u32,
    recording: Recording,
    seq: u64,
    ticks: u64,
}

impl Session {
    pub fn new(cfg: SessionConfig, session_id: &str) -> Self {
        Self {
            cfg,
            session_id: session_id.into(),
            collector: None,
            bound: None,
            clutch: false,
            command: ArmCommand::hold(0.0),
            command_age: 0,
            recording: Recording::Idle,
            seq: 0,
            ticks: 0,
        }
    }

    pub fn world(&self) -> Option<&WorldState> {
        self.bound.as_ref().map(|b| &b.world)
    }

    pub fn is_recording(&self) -> bool {
        matches!(self.recording, Recording::Active(_))
    }

    pub fn lockstep(&self) -> bool {
        self.cfg.lockstep
    }

    fn next_seq(&mut self) -> u64 {
        self.seq += 1;
        self.seq
    }

    fn error(&mut self, reply_to: Option<u64>, message: impl Into<String>) -> ServerMessage {
        ServerMessage::Error { seq: self.next_seq(), reply_to, message: message.into() }
    }

    fn ack(&mut self, reply_to: u64, request: &str) -> ServerMessage {
        ServerMessage::Ack { seq: self.next_seq(), reply_to, request: request.into(), episode_id: None, steps: None, tasks: None }
    }

    fn state(&mut self) -> Option<ServerMessage> {
        let seq = self.seq + 1;
        let b = self.bound.as_ref()?;
        let preview = self.cfg.previews.then(|| {
            let cam = self.cfg.cameras.iter().find(|c| c.kind == CameraKind::Global).expect("camera pair has a global view");
            let bytes: Vec<u8> = render(&b.world, cam).data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
            base64::engine::general_purpose::STANDARD.encode(bytes)
        });
        let msg = ServerMessage::state(seq, &b.world, self.is_recording(), self.clutch, preview);
        self.seq = seq;
        Some(msg)
    }

    /// Handles one inbound text frame.
    pub fn handle(&mut self, text: &str) -> Vec<ServerMessage> {
        match parse_client(text) {
            Ok(m) => self.handle_message(m),
            Err(r) => vec![self.error(r.reply_to, r.message)],
        }
    }

    pub fn handle_message(&mut self, msg: ClientMessage) -> Vec<ServerMessage> {
        let seq = msg.seq();
        match msg {
            ClientMessage::Hello { schema, collector, task, case, seed, .. } => self.hello(seq, schema, collector, task, case, seed.unwrap_or(0)),
            ClientMessage::ListTasks { .. } => {
                let tasks = self
                    .cfg
                    .library
                    .tasks
                    .iter()
                    .map(|t| TaskInfo { name: t.name.clone(), cases: t.cases.iter().map(|c| c.case_id.clone()).collect() })
                    .collect();
                vec![ServerMessage::Ack { seq: self.next_seq(), reply_to: seq, request: "list_tasks".into(), episode_id: None, steps: None, tasks: Some(tasks) }]
            }
            ClientMessage::Control { vx, vy, vyaw, pwm_target, clutch, .. } => {
                let cmd = ArmCommand { vx, vy, vyaw, pwm_target };
                if !cmd.is_finite() {
                    return vec![self.error(Some(seq), "control fields must be finite")];
                }
                if self.bound.is_none() {
                    return vec![self.error(Some(seq), "no task bound; send hello with task and case")];
                }
                self.clutch = clutch;
                self.command = if clutch { cmd.clamped() } else { ArmCommand::hold(self.command.pwm_target) };
                self.command_age = 0;
                let mut out = if self.cfg.lockstep { self.tick() } else { Vec::new() };
                out.push(self.ack(seq, "control"));
                out
            }
            ClientMessage::RecordStart { .. } => {
                if self.bound.is_none() {
                    return vec![self.error(Some(seq), "record_start requires a bound task and case")];
                }
                match self.recording {
                    Recording::Active(_) => vec![self.error(Some(seq), "already recording")],
                    Recording::Stopped(_) => vec![self.error(Some(seq), "unsaved recording; save or discard it first")],
                    Recording::Idle => {
                        self.recording = Recording::Active(Vec::new());
                        vec![self.ack(seq, "record_start")]
                    }
                }
            }
            ClientMessage::RecordStop { .. } => match std::mem::replace(&mut self.recording, Recording::Idle) {
                Recording::Active(buf) => {
                    let n = buf.len();
                    self.recording = Recording::Stopped(buf);
                    let mut a = self.ack(seq, "record_stop");
                    if let ServerMessage::Ack { steps, .. } = &mut a {
                        *steps = Some(n);
                    }
                    vec![a]
                }
                other => {
                    self.recording = other;
                    vec![self.error(Some(seq), "not recording")]
                }
            },
            ClientMessage::Discard { .. } => {
                self.recording = Recording::Idle;
                vec![self.ack(seq, "discard")]
            }
            ClientMessage::Save { outcome, .. } => self.save(seq, outcome),
        }
    }

    fn hello(&mut self, seq: u64, schema: Option<String>, collector: Option<String>, task: Option<String>, case: Option<String>, seed: u64) -> Vec<ServerMessage> {
        if let Some(s) = schema.filter(|s| s != WIRE_SCHEMA) {
            return vec![self.error(Some(seq), format!("schema {s:?} unsupported, server speaks {WIRE_SCHEMA}"))];
        }
        if let Some(c) = collector {
            if c.trim().is_empty() {
                return vec![self.error(Some(seq), "collector name must not be empty")];
            }
            self.collector = Some(c);
        }
        if let Some(name) = task {
            if !matches!(self.recording, Recording::Idle) {
                return vec![self.error(Some(seq), "cannot rebind while a recording is pending")];
            }
            let Some(t) = self.cfg.library.task(&name).cloned() else {
                return vec![self.error(Some(seq), format!("unknown task {name}"))];
            };
            let Some(case_id) = case else {
                return vec![self.error(Some(seq), "task given without case")];
            };
            let Some(c) = t.case(&case_id) else {
                return vec![self.error(Some(seq), format!("task {name} has no case {case_id}"))];
            };
            let world = match WorldState::init(&t, c, seed) {
                Ok(w) => w,
                Err(e) => return vec![self.error(Some(seq), e.to_string())],
            };
            self.command = ArmCommand::hold(world.gripper.pwm);
            self.clutch = false;
            self.bound = Some(Bound { task: t, case_id, world });
        }
        let (task, case) = match &self.bound {
            Some(b) => (Some(b.task.name.clone()), Some(b.case_id.clone())),
            None => (None, None),
        };
        let mut out = vec![ServerMessage::Hello { seq: self.next_seq(), schema: WIRE_SCHEMA.into(), session_id: self.session_id.clone(), task, case }];
        out.extend(self.state());
        out
    }

    /// Advances the world one control tick; returns a state message on
    /// broadcast ticks.
    pub fn tick(&mut self) -> Vec<ServerMessage> {
        let Some(b) = self.bound.as_mut() else {
            return Vec::new();
        };
        if self.command_age >= CONTROL_HOLD_TICKS {
            self.command = ArmCommand::hold(self.command.pwm_target);
        }
        let cmd = self.command;
        let next = match b.world.step(&cmd, CONTROL_DT) {
            Ok(w) => w,
            Err(e) => return vec![self.error(None, e.to_string())],
        };
        if let Recording::Active(buf) = &mut self.recording {
            buf.push(StepRecord {
                t: b.world.time,
                observation: Observation::capture(&b.world, &self.cfg.cameras),
                action: ActionRecord { target: next.arm, pwm_target: cmd.pwm_target },
            });
        }
        b.world = next;
        self.command_age += 1;
        self.ticks += 1;
        if self.ticks.is_multiple_of(STATE_EVERY_TICKS) {
            self.state().into_iter().collect()
        } else {
            Vec::new()
        }
    }

    fn save(&mut self, seq: u64, outcome: bool) -> Vec<ServerMessage> {
        let steps = match &self.recording {
            Recording::Stopped(buf) if buf.is_empty() => return vec![self.error(Some(seq), "recording buffer is empty")],
            Recording::Stopped(buf) => buf.clone(),
            Recording::Active(_) => return vec![self.error(Some(seq), "stop the recording before saving")],
            Recording::Idle => return vec![self.error(Some(seq), "nothing recorded")],
        };
        let Some(collector) = self.collector.clone() else {
            return vec![self.error(Some(seq), "collector name required; send hello with collector")];
        };
        let b = self.bound.as_ref().expect("recordings require a bound task");
        match self.write(b, &collector, steps, outcome) {
            Ok((id, n)) => {
                self.recording = Recording::Idle;
                vec![ServerMessage::Ack { seq: self.next_seq(), reply_to: seq, request: "save".into(), episode_id: Some(id), steps: Some(n), tasks: None }]
            }
            Err(e) => vec![self.error(Some(seq), format!("save failed: {e}"))],
        }
    }

    fn write(&self, b: &Bound, collector: &str, steps: Vec<StepRecord>, outcome: bool) -> Result<(String, usize), DataError> {
        let dir = &self.cfg.out_dir;
        let mut ds = if dir.join("manifest.json").exists() { Dataset::load(dir)? } else { Dataset::empty("teleop") };
        let stem = format!("{}-{}-{}", b.task.name, b.case_id, collector);
        let n = (0..).find(|i| !ds.manifest.episodes.iter().any(|e| e.episode_id == format!("{stem}-h{i:03}"))).expect("unbounded range");
        let created_at = self.cfg.created_at.unwrap_or_else(|| {
            std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
        });
        let ep = Episode {
            episode_id: format!("{stem}-h{n:03}"),
            task_name: b.task.name.clone(),
            case_id: b.case_id.clone(),
            collector: collector.into(),
            created_at,
            control_dt: CONTROL_DT,
            camera_configs: self.cfg.cameras.clone(),
            steps,
            outcome,
        };
        let violations = validate_episode(&ep);
        if !violations.is_empty() {
            return Err(DataError::Invariant { id: ep.episode_id, violations });
        }
        let (id, len) = (ep.episode_id.clone(), ep.steps.len());
        ds.push(ep)?;
        ds.save(dir)?;
        Ok((id, len))
    }
}
