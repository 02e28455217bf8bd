//! Demonstration episodes, their on-disk container, dataset manifests and
//! normalization statistics.

mod dataset;
mod format;

pub use dataset::{compute_stats, Dataset, DatasetManifest, Filtered, ManifestEntry, NormalizationStats, STD_FLOOR};
pub use format::{read_episode, read_episode_from, write_episode, write_episode_to};

use serde::{Deserialize, Serialize};

use crate::sim::{render, CameraConfig, CameraKind, Pose2, Raster, WorldState, CONTROL_DT};

pub const SCHEMA_VERSION: &str = "iml-v1";
pub const MAX_OBJECT_SLOTS: usize = 4;
pub const MAX_RECEPTACLE_SLOTS: usize = 3;
const OBJECT_SLOT: usize = 7;
const RECEPTACLE_SLOT: usize = 5;
/// Length of the flat scene feature vector, identical for every task so
/// multi-task datasets share one observation layout.
pub const FEATURE_DIM: usize = MAX_OBJECT_SLOTS * OBJECT_SLOT + MAX_RECEPTACLE_SLOTS * RECEPTACLE_SLOT;
/// Proprioception (x, y, yaw, pwm) followed by the feature vector.
pub const OBS_DIM: usize = 4 + FEATURE_DIM;
/// x, y, yaw, pwm.
pub const ACTION_DIM: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error("truncated payload: {0}")]
    Truncated(String),
    #[error("episode {id} violates invariants: {violations:?}")]
    Invariant { id: String, violations: Vec<Violation> },
    #[error("episode id collision: {0}")]
    Collision(String),
    #[error("camera configuration mismatch between datasets")]
    CameraMismatch,
    #[error("dataset is empty")]
    Empty,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proprio {
    pub pose: Pose2,
    pub pwm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub proprio: Proprio,
    pub global_view: Raster,
    pub wrist_view: Raster,
    pub feature_vec: Option<Vec<f64>>,
}

impl Observation {
    /// Observes the world through a (global, wrist) camera pair.
    pub fn capture(world: &WorldState, cameras: &[CameraConfig]) -> Self {
        let cam = |kind| cameras.iter().find(|c| c.kind == kind).expect("camera pair has both kinds");
        Self {
            proprio: Proprio { pose: world.arm, pwm: world.gripper.pwm },
            global_view: render(world, cam(CameraKind::Global)),
            wrist_view: render(world, cam(CameraKind::Wrist)),
            feature_vec: Some(scene_features(world)),
        }
    }

    /// Low-dimensional vector: proprio followed by the feature vector (zeros
    /// when absent).
    pub fn low_dim(&self) -> Vec<f64> {
        let p = &self.proprio;
        let mut v = Vec::with_capacity(OBS_DIM);
        v.extend([p.pose.x, p.pose.y, p.pose.yaw, p.pwm]);
        match &self.feature_vec {
            Some(f) => v.extend_from_slice(f),
            None => v.resize(OBS_DIM, 0.0),
        }
        v
    }
}

/// Slot-encoded scene: per object (present, x, y, size, color, shape, held),
/// then per receptacle (present, x, y, radius, color). Empty slots are zero.
pub fn scene_features(world: &WorldState) -> Vec<f64> {
    let mut f = vec![0.0; FEATURE_DIM];
    for (slot, o) in world.objects.iter().take(MAX_OBJECT_SLOTS).enumerate() {
        let b = slot * OBJECT_SLOT;
        f[b..b + OBJECT_SLOT].copy_from_slice(&[
            1.0,
            o.position[0],
            o.position[1],
            o.size,
            o.color_index as f64 / 7.0,
            o.shape_index as f64 / 2.0,
            if world.is_attached(o.id) { 1.0 } else { 0.0 },
        ]);
    }
    let base = MAX_OBJECT_SLOTS * OBJECT_SLOT;
    for (slot, r) in world.receptacles.iter().take(MAX_RECEPTACLE_SLOTS).enumerate() {
        let b = base + slot * RECEPTACLE_SLOT;
        f[b..b + RECEPTACLE_SLOT].copy_from_slice(&[1.0, r.position[0], r.position[1], r.radius, r.color_index as f64 / 7.0]);
    }
    f
}

/// Absolute target pose plus gripper command.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionRecord {
    pub target: Pose2,
    pub pwm_target: f64,
}

impl ActionRecord {
    pub fn to_vec(&self) -> [f64; ACTION_DIM] {
        [self.target.x, self.target.y, self.target.yaw, self.pwm_target]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self { target: Pose2::new(v[0], v[1], v[2]), pwm_target: v[3] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: f64,
    pub observation: Observation,
    pub action: ActionRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub episode_id: String,
    pub task_name: String,
    pub case_id: String,
    pub collector: String,
    /// Unix time in milliseconds.
    pub created_at: u64,
    pub control_dt: f64,
    pub camera_configs: Vec<CameraConfig>,
    pub steps: Vec<StepRecord>,
    /// Success at recording time. Never used as a training signal.
    pub outcome: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    EmptySteps,
    ControlDtMismatch(f64),
    CameraLayout,
    NegativeTime { step: usize },
    NonMonotoneTimestamps { step: usize },
    OutOfWorkspaceAction { step: usize },
    PwmOutOfRange { step: usize },
    RasterShapeMismatch { step: usize, view: &'static str },
    FeatureLengthMismatch { step: usize },
    NonFinite { step: usize },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::EmptySteps => write!(f, "episode has no steps"),
            Self::ControlDtMismatch(dt) => write!(f, "control_dt {dt} differs from the simulator tick"),
            Self::CameraLayout => write!(f, "camera configs must be one valid global and one valid wrist camera"),
            Self::NegativeTime { step } => write!(f, "negative timestamp at step {step}"),
            Self::NonMonotoneTimestamps { step } => write!(f, "non-monotone timestamps at step {step}"),
            Self::OutOfWorkspaceAction { step } => write!(f, "out-of-workspace action at step {step}"),
            Self::PwmOutOfRange { step } => write!(f, "pwm outside [0, 1] at step {step}"),
            Self::RasterShapeMismatch { step, view } => write!(f, "raster shape mismatch in {view} at step {step}"),
            Self::FeatureLengthMismatch { step } => write!(f, "feature vector length mismatch at step {step}"),
            Self::NonFinite { step } => write!(f, "non-finite value at step {step}"),
        }
    }
}

fn camera_layout_ok(cams: &[CameraConfig]) -> bool {
    cams.len() == 2
        && cams.iter().all(|c| c.validate().is_ok())
        && cams.iter().any(|c| c.kind == CameraKind::Global)
        && cams.iter().any(|c| c.kind == CameraKind::Wrist)
}

/// Reports every violated episode invariant; an empty list means valid.
pub fn validate_episode(ep: &Episode) -> Vec<Violation> {
    let mut out = Vec::new();
    if ep.steps.is_empty() {
        out.push(Violation::EmptySteps);
    }
    if ep.control_dt != CONTROL_DT {
        out.push(Violation::ControlDtMismatch(ep.control_dt));
    }
    let cams_ok = camera_layout_ok(&ep.camera_configs);
    if !cams_ok {
        out.push(Violation::CameraLayout);
    }
    let res = |kind| ep.camera_configs.iter().find(|c| c.kind == kind).map(|c| c.resolution);
    let (global_res, wrist_res) = (res(CameraKind::Global), res(CameraKind::Wrist));
    for (i, s) in ep.steps.iter().enumerate() {
        if !s.t.is_finite() || s.t < 0.0 {
            out.push(Violation::NegativeTime { step: i });
        }
        if i > 0 && s.t <= ep.steps[i - 1].t {
            out.push(Violation::NonMonotoneTimestamps { step: i });
        }
        let a = &s.action;
        if !a.target.in_workspace() {
            out.push(Violation::OutOfWorkspaceAction { step: i });
        }
        if !(0.0..=1.0).contains(&a.pwm_target) {
            out.push(Violation::PwmOutOfRange { step: i });
        }
        let obs = &s.observation;
        for (view, raster, expect) in [("global_view", &obs.global_view, global_res), ("wrist_view", &obs.wrist_view, wrist_res)] {
            let n = raster.resolution;
            if Some(n) != expect || raster.data.len() != n * n * 3 {
                out.push(Violation::RasterShapeMismatch { step: i, view });
            }
        }
        if obs.feature_vec.as_ref().is_some_and(|f| f.len() != FEATURE_DIM) {
            out.push(Violation::FeatureLengthMismatch { step: i });
        }
        let finite = a.target.yaw.is_finite()
            && obs.low_dim().iter().all(|v| v.is_finite())
            && obs.global_view.data.iter().chain(&obs.wrist_view.data).all(|v| v.is_finite());
        if !finite {
            out.push(Violation::NonFinite { step: i });
        }
    }
    out
}
