//! Timestamp-gated execution under an injectable latency model.
//!
//! Emission and execution run on one deterministic event timeline: every
//! `h_a` ticks the policy emits a horizon, each action travels with its own
//! delay, and an action that arrives later than `desired_t + slack` is
//! discarded. Executed actions are tracked from `max(desired_t, arrived_t)`
//! until the next executed action takes over.

use std::io::{BufRead, Write};

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{ActionRecord, Observation};
use crate::diffusion::{DiffusionError, Policy, Termination};
use crate::sim::{self, ArmCommand, CameraConfig, Pose2, TaskSpec, WorldState, CONTROL_DT};

/// Consecutive fully discarded horizons that count as a stall.
pub const STALL_HORIZONS: usize = 3;
pub const DEFAULT_SLACK: f64 = CONTROL_DT;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimedAction {
    pub action: ActionRecord,
    /// World time at which the action should apply.
    pub desired_t: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyModel {
    pub fixed_delay: f64,
    pub jitter_std: f64,
    pub seed: u64,
}

impl LatencyModel {
    pub fn zero() -> Self {
        Self { fixed_delay: 0.0, jitter_std: 0.0, seed: 0 }
    }

    pub fn validate(&self) -> Result<(), DeployError> {
        if !(self.fixed_delay >= 0.0 && self.fixed_delay.is_finite()) || !(self.jitter_std >= 0.0 && self.jitter_std.is_finite()) {
            return Err(DeployError::Config(format!("latency {} / {} must be finite and non-negative", self.fixed_delay, self.jitter_std)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Executed,
    Discarded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub horizon: usize,
    pub index: usize,
    pub emitted_t: f64,
    pub desired_t: f64,
    pub arrived_t: f64,
    pub verdict: Verdict,
    pub reason: String,
    pub action: ActionRecord,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExecutionLog {
    pub slack: f64,
    pub entries: Vec<LogEntry>,
}

/// The discard rule.
pub fn verdict(arrived_t: f64, desired_t: f64, slack: f64) -> Verdict {
    if arrived_t > desired_t + slack {
        Verdict::Discarded
    } else {
        Verdict::Executed
    }
}

impl ExecutionLog {
    pub fn executed(&self) -> usize {
        self.entries.iter().filter(|e| e.verdict == Verdict::Executed).count()
    }

    pub fn discarded(&self) -> usize {
        self.entries.len() - self.executed()
    }

    /// Verdicts recomputed from the logged timestamps alone.
    pub fn replay(&self) -> Vec<Verdict> {
        self.entries.iter().map(|e| verdict(e.arrived_t, e.desired_t, self.slack)).collect()
    }

    pub fn write_jsonl(&self, w: &mut impl Write) -> std::io::Result<()> {
        for e in &self.entries {
            serde_json::to_writer(&mut *w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(r: impl BufRead, slack: f64) -> Result<Self, DeployError> {
        let mut entries = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(&line).map_err(|e| DeployError::Config(format!("bad log line: {e}")))?);
        }
        Ok(Self { slack, entries })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DeployError {
    #[error("invalid deployment config: {0}")]
    Config(String),
    #[error("stalled: every action of {horizons} consecutive horizons was discarded (t = {time:.2} s)")]
    Stall { horizons: usize, time: f64, log: Box<ExecutionLog> },
    #[error(transparent)]
    Policy(#[from] DiffusionError),
    #[error(transparent)]
    Sim(#[from] sim::SimError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeployOutcome {
    pub world: WorldState,
    pub poses: Vec<Pose2>,
    pub log: ExecutionLog,
    pub success: bool,
    pub termination: Termination,
}

struct Scheduled {
    apply_tick: u64,
    action: ActionRecord,
}

/// Runs `policy` on `world` with every emitted action subject to `latency`.
pub fn execute_stream(
    policy: &mut dyn Policy,
    mut world: WorldState,
    task: &TaskSpec,
    cameras: &[CameraConfig],
    latency: &LatencyModel,
    slack: f64,
) -> Result<DeployOutcome, DeployError> {
    latency.validate()?;
    if !(slack >= 0.0) {
        return Err(DeployError::Config(format!("slack {slack} must be non-negative")));
    }
    let mut rng = crate::rng::stream(latency.seed, &[crate::rng::label_key("latency")]);
    let h_a = policy.execute_steps().min(policy.horizon());
    let mut log = ExecutionLog { slack, entries: Vec::new() };
    let mut poses = Vec::new();
    let mut active: Option<ActionRecord> = None;
    let mut pending: Vec<Scheduled> = Vec::new();
    let mut starved = 0;
    let done = |world: &WorldState| world.time >= task.max_rollout_time - 1e-9;
    let mut horizon = 0;
    loop {
        if done(&world) {
            return Ok(DeployOutcome { world, poses, log, success: false, termination: Termination::Timeout });
        }
        let obs = Observation::capture(&world, cameras);
        let actions = match policy.plan(&obs, &world, task) {
            Ok(a) => a,
            Err(DiffusionError::Diverged { .. }) => {
                return Ok(DeployOutcome { world, poses, log, success: false, termination: Termination::Diverged })
            }
            Err(e) => return Err(e.into()),
        };
        let t0 = world.time;
        let tick0 = world.tick_index;
        let mut executed_here = 0;
        for (k, a) in actions.iter().take(h_a).enumerate() {
            let desired_t = t0 + k as f64 * CONTROL_DT;
            let jitter = if latency.jitter_std > 0.0 { (latency.jitter_std * rng.sample::<f64, _>(StandardNormal)).max(0.0) } else { 0.0 };
            let arrived_t = t0 + latency.fixed_delay + jitter;
            let v = verdict(arrived_t, desired_t, slack);
            let reason = match v {
                Verdict::Executed => "arrived within deadline".to_string(),
                Verdict::Discarded => format!("late by {:.4} s beyond slack", arrived_t - desired_t - slack),
            };
            if v == Verdict::Executed {
                executed_here += 1;
                let start = desired_t.max(arrived_t);
                let apply_tick = tick0 + (((start - t0) / CONTROL_DT) - 1e-9).ceil().max(0.0) as u64;
                pending.push(Scheduled { apply_tick, action: *a });
            }
            log.entries.push(LogEntry { horizon, index: k, emitted_t: t0, desired_t, arrived_t, verdict: v, reason, action: *a });
        }
        starved = if executed_here == 0 { starved + 1 } else { 0 };
        if starved >= STALL_HORIZONS {
            return Err(DeployError::Stall { horizons: starved, time: world.time, log: Box::new(log) });
        }
        for _ in 0..h_a {
            // Latest-scheduled action due by this tick takes over.
            let tick = world.tick_index;
            let mut i = 0;
            while i < pending.len() {
                if pending[i].apply_tick <= tick {
                    active = Some(pending.remove(i).action);
                } else {
                    i += 1;
                }
            }
            let cmd = match &active {
                Some(a) => ArmCommand::track(&world.arm, &a.target, a.pwm_target),
                None => ArmCommand::hold(world.gripper.pwm),
            };
            world = world.step(&cmd, CONTROL_DT)?;
            poses.push(world.arm);
            if sim::success(task, &world)? {
                return Ok(DeployOutcome { world, poses, log, success: true, termination: Termination::Success });
            }
            if done(&world) {
                break;
            }
        }
        horizon += 1;
    }
}
