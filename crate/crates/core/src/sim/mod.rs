//! Fixed-tick planar arm world.
//!
//! The world is a value type: [`WorldState::step`] returns a new snapshot and
//! never mutates its receiver, so snapshots can be shared freely.

mod render;
mod tasks;

pub use render::{render, Raster, BACKGROUND, PALETTE};
pub use tasks::{assignments, builtin_tasks, success, CaseSetup, ObjectPlacement, ReceptaclePlacement, SuccessRule, TaskLibrary, TaskSpec, TASK_SCHEMA_VERSION};

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::rng;

pub const CONTROL_DT: f64 = 0.05;
pub const V_MAX: f64 = 0.5;
pub const YAW_RATE_MAX: f64 = 2.0;
pub const PWM_SLEW: f64 = 4.0;
pub const CLOSE_THRESHOLD: f64 = 0.6;
pub const OPEN_THRESHOLD: f64 = 0.4;
pub const GRASP_RADIUS: f64 = 0.03;
pub const MIN_OBJECT_SIZE: f64 = 0.01;
pub const MAX_OBJECT_SIZE: f64 = 0.15;
pub const HOME: Pose2 = Pose2 { x: 0.5, y: 0.1, yaw: 0.0 };
const PLACEMENT_DRAWS: usize = 32;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SimError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("placement failed after {draws} jittered draws for case {case_id}")]
    Placement { case_id: String, draws: usize },
    #[error("rejected non-finite command {0:?}")]
    NonFiniteCommand(ArmCommand),
}

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self { x, y, yaw }
    }

    pub fn xy(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    pub fn in_workspace(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && (0.0..=1.0).contains(&self.x) && (0.0..=1.0).contains(&self.y)
    }

    pub fn dist_xy(&self, p: [f64; 2]) -> f64 {
        (self.x - p[0]).hypot(self.y - p[1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GripperState {
    pub pwm: f64,
    pub attached_object: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: u32,
    pub position: [f64; 2],
    pub size: f64,
    pub color_index: u8,
    /// 0 = square, 1 = disc, 2 = triangle.
    pub shape_index: u8,
    pub graspable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Receptacle {
    pub id: u32,
    pub position: [f64; 2],
    pub radius: f64,
    /// Palette index used both for rendering and for color-matched placement.
    pub color_index: u8,
    pub stack: Vec<u32>,
}

impl Receptacle {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        (p[0] - self.position[0]).hypot(p[1] - self.position[1]) <= self.radius
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CameraKind {
    Global,
    Wrist,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraConfig {
    pub kind: CameraKind,
    /// View center for global cameras; ignored for wrist cameras.
    pub center: [f64; 2],
    pub zoom: f64,
    pub resolution: usize,
}

impl CameraConfig {
    pub fn global(resolution: usize) -> Self {
        Self { kind: CameraKind::Global, center: [0.5, 0.5], zoom: 1.0, resolution }
    }

    pub fn wrist(resolution: usize) -> Self {
        Self { kind: CameraKind::Wrist, center: [0.5, 0.5], zoom: 2.5, resolution }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if ![16, 24, 32].contains(&self.resolution) {
            return Err(SimError::Config(format!("camera resolution {} not in {{16, 24, 32}}", self.resolution)));
        }
        if !(self.zoom > 0.0 && self.zoom.is_finite()) {
            return Err(SimError::Config(format!("camera zoom {} must be positive", self.zoom)));
        }
        Ok(())
    }

    /// The default global + wrist pair at the given resolution.
    pub fn default_pair(resolution: usize) -> Vec<CameraConfig> {
        vec![Self::global(resolution), Self::wrist(resolution)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmCommand {
    pub vx: f64,
    pub vy: f64,
    pub vyaw: f64,
    pub pwm_target: f64,
}

impl ArmCommand {
    pub fn hold(pwm: f64) -> Self {
        Self { vx: 0.0, vy: 0.0, vyaw: 0.0, pwm_target: pwm }
    }

    pub fn is_finite(&self) -> bool {
        self.vx.is_finite() && self.vy.is_finite() && self.vyaw.is_finite() && self.pwm_target.is_finite()
    }

    /// Clamps every channel to the command limits.
    pub fn clamped(&self) -> Self {
        Self {
            vx: self.vx.clamp(-V_MAX, V_MAX),
            vy: self.vy.clamp(-V_MAX, V_MAX),
            vyaw: self.vyaw.clamp(-YAW_RATE_MAX, YAW_RATE_MAX),
            pwm_target: self.pwm_target.clamp(0.0, 1.0),
        }
    }

    /// Command that drives the arm toward an absolute target within one tick,
    /// subject to the velocity limits.
    pub fn track(arm: &Pose2, target: &Pose2, pwm_target: f64) -> Self {
        Self {
            vx: (target.x - arm.x) / CONTROL_DT,
            vy: (target.y - arm.y) / CONTROL_DT,
            vyaw: wrap_angle(target.yaw - arm.yaw) / CONTROL_DT,
            pwm_target,
        }
        .clamped()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub arm: Pose2,
    pub gripper: GripperState,
    pub objects: Vec<SceneObject>,
    pub receptacles: Vec<Receptacle>,
    pub time: f64,
    pub tick_index: u64,
}

impl WorldState {
    /// Builds the initial world for `case` of `task`, applying seeded jitter.
    pub fn init(task: &TaskSpec, case: &CaseSetup, seed: u64) -> Result<Self, SimError> {
        let case_index = task
            .cases
            .iter()
            .position(|c| c.case_id == case.case_id && c == case)
            .ok_or_else(|| SimError::Config(format!("case {} does not belong to task {}", case.case_id, task.name)))?;
        let mut rng = rng::stream(seed, &[rng::label_key(&task.name), case_index as u64]);
        let receptacles = case
            .receptacles
            .iter()
            .enumerate()
            .map(|(i, r)| Receptacle {
                id: i as u32,
                position: r.position,
                radius: r.radius,
                color_index: r.color_index,
                stack: Vec::new(),
            })
            .collect();

        for _ in 0..PLACEMENT_DRAWS {
            let objects: Vec<SceneObject> = case
                .objects
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let mut position = p.position;
                    if case.rng_jitter > 0.0 {
                        let r = case.rng_jitter * rng.random::<f64>().sqrt();
                        let theta = 2.0 * PI * rng.random::<f64>();
                        position[0] += r * theta.cos();
                        position[1] += r * theta.sin();
                    }
                    SceneObject {
                        id: i as u32,
                        position,
                        size: p.size,
                        color_index: p.color_index,
                        shape_index: p.shape_index,
                        graspable: true,
                    }
                })
                .collect();
            if placement_valid(&objects) {
                return Ok(Self {
                    arm: HOME,
                    gripper: GripperState { pwm: 0.0, attached_object: None },
                    objects,
                    receptacles,
                    time: 0.0,
                    tick_index: 0,
                });
            }
            if case.rng_jitter == 0.0 {
                break;
            }
        }
        Err(SimError::Placement { case_id: case.case_id.clone(), draws: PLACEMENT_DRAWS })
    }

    /// Advances one control tick.
    pub fn step(&self, cmd: &ArmCommand, dt: f64) -> Result<Self, SimError> {
        if !cmd.is_finite() {
            return Err(SimError::NonFiniteCommand(*cmd));
        }
        if dt != CONTROL_DT {
            return Err(SimError::Config(format!("step dt {dt} differs from control tick {CONTROL_DT}")));
        }
        let cmd = cmd.clamped();
        let mut next = self.clone();
        next.arm.x = (self.arm.x + cmd.vx * dt).clamp(0.0, 1.0);
        next.arm.y = (self.arm.y + cmd.vy * dt).clamp(0.0, 1.0);
        next.arm.yaw = wrap_angle(self.arm.yaw + cmd.vyaw * dt);

        let max_delta = PWM_SLEW * dt;
        let prev_pwm = self.gripper.pwm;
        let pwm = prev_pwm + (cmd.pwm_target - prev_pwm).clamp(-max_delta, max_delta);
        next.gripper.pwm = pwm;

        let arm_xy = next.arm.xy();
        if let Some(id) = next.gripper.attached_object {
            if pwm < OPEN_THRESHOLD {
                next.gripper.attached_object = None;
                next.object_mut(id).position = arm_xy;
                if let Some(r) = next
                    .receptacles
                    .iter_mut()
                    .filter(|r| r.contains(arm_xy))
                    .min_by(|a, b| dist(a.position, arm_xy).total_cmp(&dist(b.position, arm_xy)))
                {
                    if !r.stack.contains(&id) {
                        r.stack.push(id);
                    }
                }
            } else {
                next.object_mut(id).position = arm_xy;
            }
        } else if prev_pwm < CLOSE_THRESHOLD && pwm >= CLOSE_THRESHOLD {
            let nearest = next
                .objects
                .iter()
                .filter(|o| o.graspable && dist(o.position, arm_xy) <= GRASP_RADIUS)
                .min_by(|a, b| dist(a.position, arm_xy).total_cmp(&dist(b.position, arm_xy)))
                .map(|o| o.id);
            if let Some(id) = nearest {
                next.gripper.attached_object = Some(id);
                next.object_mut(id).position = arm_xy;
                for r in &mut next.receptacles {
                    r.stack.retain(|&s| s != id);
                }
            }
        }

        next.tick_index = self.tick_index + 1;
        next.time = next.tick_index as f64 * CONTROL_DT;
        Ok(next)
    }

    pub fn object(&self, id: u32) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    fn object_mut(&mut self, id: u32) -> &mut SceneObject {
        self.objects.iter_mut().find(|o| o.id == id).expect("attached object exists")
    }

    pub fn is_attached(&self, id: u32) -> bool {
        self.gripper.attached_object == Some(id)
    }
}

pub(crate) fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn placement_valid(objects: &[SceneObject]) -> bool {
    let inside = objects.iter().all(|o| {
        let h = o.size / 2.0;
        o.position.iter().all(|&c| c - h >= 0.0 && c + h <= 1.0)
    });
    inside
        && objects.iter().enumerate().all(|(i, a)| {
            objects[i + 1..].iter().all(|b| dist(a.position, b.position) >= (a.size + b.size) / 2.0)
        })
}
