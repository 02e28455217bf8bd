//! Wire schema "imlw-wire-1": JSON text frames tagged by `type`, every
//! message carrying an integer `seq`.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use imlw_core::WorldState;

pub const WIRE_SCHEMA: &str = "imlw-wire-1";

pub const MESSAGE_TYPES: [&str; 10] =
    ["hello", "state", "control", "record_start", "record_stop", "save", "discard", "list_tasks", "error", "ack"];

/// Messages a client may send.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    Hello {
        seq: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        schema: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        collector: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        task: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        case: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    Control { seq: u64, vx: f64, vy: f64, vyaw: f64, pwm_target: f64, clutch: bool },
    RecordStart { seq: u64 },
    RecordStop { seq: u64 },
    Save { seq: u64, outcome: bool },
    Discard { seq: u64 },
    ListTasks { seq: u64 },
}

impl ClientMessage {
    pub fn seq(&self) -> u64 {
        match self {
            Self::Hello { seq, .. }
            | Self::Control { seq, .. }
            | Self::RecordStart { seq }
            | Self::RecordStop { seq }
            | Self::Save { seq, .. }
            | Self::Discard { seq }
            | Self::ListTasks { seq } => *seq,
        }
    }

    pub fn to_text(&self) -> String {
        serde_json::to_string(self).expect("wire messages serialize")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WireArm {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireObject {
    pub id: u32,
    pub x: f64,
    pub y: f64,
    pub size: f64,
    pub color: u8,
    pub shape: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireReceptacle {
    pub id: u32,
    pub x: f64,
    pub y: f64,
    pub radius: f64,
    pub stack: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInfo {
    pub name: String,
    pub cases: Vec<String>,
}

/// Messages the server sends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Hello {
        seq: u64,
        schema: String,
        session_id: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        task: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        case: Option<String>,
    },
    State {
        seq: u64,
        time: f64,
        arm: WireArm,
        pwm: f64,
        recording: bool,
        clutch: bool,
        objects: Vec<WireObject>,
        receptacles: Vec<WireReceptacle>,
        /// Base64 RGB8 global view, when previews are enabled.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        preview: Option<String>,
    },
    Ack {
        seq: u64,
        reply_to: u64,
        request: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        episode_id: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        steps: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tasks: Option<Vec<TaskInfo>>,
    },
    Error {
        seq: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reply_to: Option<u64>,
        message: String,
    },
}

impl ServerMessage {
    pub fn seq(&self) -> u64 {
        match self {
            Self::Hello { seq, .. } | Self::State { seq, .. } | Self::Ack { seq, .. } | Self::Error { seq, .. } => *seq,
        }
    }

    pub fn to_text(&self) -> String {
        serde_json::to_string(self).expect("wire messages serialize")
    }

    pub fn state(seq: u64, world: &WorldState, recording: bool, clutch: bool, preview: Option<String>) -> Self {
        Self::State {
            seq,
            time: world.time,
            arm: WireArm { x: world.arm.x, y: world.arm.y, yaw: world.arm.yaw },
            pwm: world.gripper.pwm,
            recording,
            clutch,
            objects: world
                .objects
                .iter()
                .map(|o| WireObject { id: o.id, x: o.position[0], y: o.position[1], size: o.size, color: o.color_index, shape: o.shape_index })
                .collect(),
            receptacles: world
                .receptacles
                .iter()
                .map(|r| WireReceptacle { id: r.id, x: r.position[0], y: r.position[1], radius: r.radius, stack: r.stack.clone() })
                .collect(),
            preview,
        }
    }
}

/// Why an inbound frame was rejected, with the client seq when readable.
#[derive(Debug, Clone, PartialEq)]
pub struct Rejection {
    pub reply_to: Option<u64>,
    pub message: String,
}

/// Parses one inbound text frame.
pub fn parse_client(text: &str) -> Result<ClientMessage, Rejection> {
    let value: Value = serde_json::from_str(text).map_err(|e| Rejection { reply_to: None, message: format!("invalid JSON: {e}") })?;
    let seq = value.get("seq").and_then(Value::as_u64);
    let reject = |message: String| Rejection { reply_to: seq, message };
    let Some(kind) = value.get("type").and_then(Value::as_str).map(str::to_owned) else {
        return Err(reject("missing message type".into()));
    };
    if !MESSAGE_TYPES.contains(&kind.as_str()) {
        return Err(reject(format!("unknown message type {kind:?}")));
    }
    if matches!(kind.as_str(), "state" | "ack" | "error") {
        return Err(reject(format!("{kind} messages are server-only")));
    }
    if seq.is_none() {
        return Err(reject("seq must be a non-negative integer".into()));
    }
    serde_json::from_value(value).map_err(|e| reject(format!("malformed {kind}: {e}")))
}
