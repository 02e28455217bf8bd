//! Scripted demonstrators with a collector proficiency model.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{ActionRecord, DataError, Dataset, Episode, Observation, StepRecord};
use crate::rng::{self, Rng};
use crate::sim::{self, ArmCommand, CameraConfig, CaseSetup, Pose2, SimError, TaskSpec, WorldState, CONTROL_DT};

/// Proportional gain of the waypoint tracker, in 1/s.
pub const KP: f64 = 2.0;
pub const WAYPOINT_TOLERANCE: f64 = 0.01;
const PWM_TOLERANCE: f64 = 0.05;
const MAX_ATTEMPTS_PER_SLOT: usize = 6;
const MIN_CASE_SUCCESS_RATE: f64 = 0.2;

#[derive(Debug, thiserror::Error)]
pub enum ExpertError {
    #[error("planning failed: {0}")]
    Planning(String),
    #[error("invalid profile {name}: {reason}")]
    Profile { name: String, reason: String },
    #[error("expert succeeded on {successes}/{attempts} rollouts of case {case_id}; aborting collection")]
    LowSuccess { case_id: String, successes: usize, attempts: usize },
    #[error("episodes_per_case must be >= 1")]
    NoEpisodes,
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProficiencyProfile {
    pub name: String,
    /// Per-tick positional noise, meters.
    pub tremor_std: f64,
    pub pause_prob: f64,
    pub overshoot_gain: f64,
    pub speed_factor: f64,
}

impl ProficiencyProfile {
    pub fn perfect(name: &str) -> Self {
        Self { name: name.into(), tremor_std: 0.0, pause_prob: 0.0, overshoot_gain: 1.0, speed_factor: 1.0 }
    }

    /// `expertA` (noiseless) and `expertB` (tremor, pauses, overshoot).
    pub fn builtin() -> Vec<Self> {
        vec![
            Self::perfect("expertA"),
            Self { name: "expertB".into(), tremor_std: 0.01, pause_prob: 0.05, overshoot_gain: 1.2, speed_factor: 1.0 },
        ]
    }

    pub fn validate(&self) -> Result<(), ExpertError> {
        let bad = |reason: &str| Err(ExpertError::Profile { name: self.name.clone(), reason: reason.into() });
        if !(self.tremor_std >= 0.0 && self.tremor_std.is_finite()) {
            return bad("tremor_std must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.pause_prob) {
            return bad("pause_prob must lie in [0, 1]");
        }
        if !(self.overshoot_gain >= 1.0 && self.overshoot_gain.is_finite()) {
            return bad("overshoot_gain must be >= 1");
        }
        if !(self.speed_factor > 0.0 && self.speed_factor <= 1.0) {
            return bad("speed_factor must lie in (0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub pose: Pose2,
    pub pwm: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertPlan {
    pub waypoints: Vec<Waypoint>,
}

/// Waypoints that solve `task` from `world`: for every required
/// (object, receptacle) pair, approach, close, carry, open.
pub fn plan(task: &TaskSpec, world: &WorldState) -> Result<ExpertPlan, ExpertError> {
    let pairs = sim::assignments(task, world).map_err(|e| ExpertError::Planning(e.to_string()))?;
    let mut waypoints = Vec::with_capacity(pairs.len() * 4);
    for (obj, rec) in pairs {
        let o = world.object(obj).ok_or_else(|| ExpertError::Planning(format!("object {obj} missing")))?;
        let r = world
            .receptacles
            .iter()
            .find(|r| r.id == rec)
            .ok_or_else(|| ExpertError::Planning(format!("receptacle {rec} missing")))?;
        let at = |p: [f64; 2], pwm| Waypoint { pose: Pose2::new(p[0], p[1], 0.0), pwm, tolerance: WAYPOINT_TOLERANCE };
        waypoints.extend([at(o.position, 0.0), at(o.position, 1.0), at(r.position, 1.0), at(r.position, 0.0)]);
    }
    if waypoints.len() < 2 {
        return Err(ExpertError::Planning(format!("task {} produced an empty plan", task.name)));
    }
    Ok(ExpertPlan { waypoints })
}

/// Waypoint-following demonstrator state.
#[derive(Debug, Clone)]
pub struct Expert {
    pub plan: ExpertPlan,
    pub index: usize,
}

impl Expert {
    pub fn new(plan: ExpertPlan) -> Self {
        Self { plan, index: 0 }
    }

    pub fn current(&self) -> &Waypoint {
        &self.plan.waypoints[self.index.min(self.plan.waypoints.len() - 1)]
    }

    pub fn finished(&self) -> bool {
        self.index >= self.plan.waypoints.len()
    }

    /// Noiseless proportional command toward the current waypoint.
    pub fn nominal(&self, world: &WorldState, profile: &ProficiencyProfile) -> ArmCommand {
        let wp = self.current();
        let gain = profile.speed_factor * profile.overshoot_gain;
        ArmCommand {
            vx: (KP * (wp.pose.x - world.arm.x)).clamp(-sim::V_MAX, sim::V_MAX) * gain,
            vy: (KP * (wp.pose.y - world.arm.y)).clamp(-sim::V_MAX, sim::V_MAX) * gain,
            vyaw: (KP * sim::wrap_angle(wp.pose.yaw - world.arm.yaw)).clamp(-sim::YAW_RATE_MAX, sim::YAW_RATE_MAX) * gain,
            pwm_target: wp.pwm,
        }
    }

    /// Next command; advances the waypoint once it is reached.
    pub fn act(&mut self, world: &WorldState, profile: &ProficiencyProfile, rng: &mut Rng) -> ArmCommand {
        let mut cmd = self.nominal(world, profile);
        if profile.tremor_std > 0.0 {
            let scale = profile.tremor_std / CONTROL_DT;
            cmd.vx += scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
            cmd.vy += scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
        }
        if profile.pause_prob > 0.0 && rng.random::<f64>() < profile.pause_prob {
            cmd = ArmCommand::hold(world.gripper.pwm);
        }
        let wp = *self.current();
        if !self.finished()
            && world.arm.dist_xy(wp.pose.xy()) <= wp.tolerance
            && (world.gripper.pwm - wp.pwm).abs() <= PWM_TOLERANCE
        {
            self.index += 1;
        }
        cmd.clamped()
    }
}

/// Runs the expert from `world` until success or the task's time budget,
/// recording every step. Returns the steps and whether the task succeeded.
pub fn demonstrate(
    task: &TaskSpec,
    mut world: WorldState,
    profile: &ProficiencyProfile,
    cameras: &[CameraConfig],
    rng: &mut Rng,
) -> Result<(Vec<StepRecord>, bool), ExpertError> {
    let mut expert = Expert::new(plan(task, &world)?);
    let mut steps = Vec::new();
    while world.time < task.max_rollout_time {
        let observation = Observation::capture(&world, cameras);
        let cmd = expert.act(&world, profile, rng);
        let next = world.step(&cmd, CONTROL_DT)?;
        steps.push(StepRecord { t: world.time, observation, action: ActionRecord { target: next.arm, pwm_target: cmd.pwm_target } });
        world = next;
        if sim::success(task, &world)? {
            return Ok((steps, true));
        }
    }
    Ok((steps, false))
}

#[derive(Debug, Clone)]
pub struct CollectConfig {
    pub episodes_per_case: usize,
    pub cameras: Vec<CameraConfig>,
    pub seed: u64,
    /// Wall-clock stamp written into every episode (Unix milliseconds).
    pub created_at: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CollectReport {
    pub attempts: usize,
    pub resamples: usize,
    pub shortfall: usize,
}

/// Collects success-filtered demonstrations for `cases` of `task`.
pub fn collect(
    task: &TaskSpec,
    cases: &[CaseSetup],
    profile: &ProficiencyProfile,
    cfg: &CollectConfig,
) -> Result<(Dataset, CollectReport), ExpertError> {
    if cfg.episodes_per_case == 0 {
        return Err(ExpertError::NoEpisodes);
    }
    profile.validate()?;
    let mut ds = Dataset::empty(&format!("{}-{}-s{}", task.name, profile.name, cfg.seed));
    let mut report = CollectReport::default();
    for case in cases {
        let case_index = task
            .cases
            .iter()
            .position(|c| c == case)
            .ok_or_else(|| SimError::Config(format!("case {} does not belong to task {}", case.case_id, task.name)))?;
        let (mut attempts, mut successes) = (0, 0);
        for slot in 0..cfg.episodes_per_case {
            let mut stored = false;
            for attempt in 0..MAX_ATTEMPTS_PER_SLOT {
                let key = [rng::label_key(&task.name), case_index as u64, slot as u64, attempt as u64];
                let world = WorldState::init(task, case, rng::derive_seed(cfg.seed, &key))?;
                let mut stream = rng::stream(cfg.seed ^ 0x5eed_e4be_27, &key);
                let (steps, ok) = demonstrate(task, world, profile, &cfg.cameras, &mut stream)?;
                attempts += 1;
                report.attempts += 1;
                if attempt > 0 {
                    report.resamples += 1;
                }
                if ok {
                    successes += 1;
                    ds.push(Episode {
                        episode_id: format!("{}-{}-{}-{slot:03}", task.name, case.case_id, profile.name),
                        task_name: task.name.clone(),
                        case_id: case.case_id.clone(),
                        collector: profile.name.clone(),
                        created_at: cfg.created_at,
                        control_dt: CONTROL_DT,
                        camera_configs: cfg.cameras.clone(),
                        steps,
                        outcome: true,
                    })?;
                    stored = true;
                    break;
                }
            }
            if !stored {
                report.shortfall += 1;
            }
        }
        if (successes as f64) < MIN_CASE_SUCCESS_RATE * attempts as f64 {
            return Err(ExpertError::LowSuccess { case_id: case.case_id.clone(), successes, attempts });
        }
    }
    Ok((ds, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::validate_episode;
    use crate::sim::builtin_tasks;
    use rand::SeedableRng;

    fn task(name: &str) -> TaskSpec {
        builtin_tasks().into_iter().find(|t| t.name == name).unwrap()
    }

    fn cams() -> Vec<CameraConfig> {
        CameraConfig::default_pair(16)
    }

    #[test]
    fn pick_place_plan_has_four_waypoints_and_succeeds() {
        let t = task("PickPlace");
        let w = WorldState::init(&t, &t.cases[0], 1).unwrap();
        let p = plan(&t, &w).unwrap();
        assert_eq!(p.waypoints.len(), 4);
        assert_eq!(p.waypoints.iter().map(|w| w.pwm).collect::<Vec<_>>(), vec![0.0, 1.0, 1.0, 0.0]);
        assert_eq!(p, plan(&t, &w).unwrap());
        let (_, ok) = demonstrate(&t, w, &ProficiencyProfile::perfect("p"), &cams(), &mut rng::stream(0, &[])).unwrap();
        assert!(ok);
    }

    #[test]
    fn block_pick_handles_red_before_green() {
        let t = task("BlockPick");
        for case in &t.cases {
            let w = WorldState::init(&t, case, 2).unwrap();
            let p = plan(&t, &w).unwrap();
            let red = w.objects.iter().find(|o| o.color_index == 0).unwrap();
            let green = w.objects.iter().find(|o| o.color_index == 1).unwrap();
            assert_eq!(p.waypoints[0].pose.xy(), red.position);
            assert_eq!(p.waypoints[4].pose.xy(), green.position);
        }
    }

    #[test]
    fn perfect_profile_at_waypoint_holds_position() {
        let t = task("PickPlace");
        let mut w = WorldState::init(&t, &t.cases[0], 1).unwrap();
        let mut e = Expert::new(plan(&t, &w).unwrap());
        let wp = *e.current();
        w.arm = wp.pose;
        let cmd = e.act(&w, &ProficiencyProfile::perfect("p"), &mut rng::stream(0, &[]));
        assert_eq!((cmd.vx, cmd.vy, cmd.vyaw), (0.0, 0.0, 0.0));
        assert_eq!(cmd.pwm_target, wp.pwm);
    }

    #[test]
    fn speed_factor_halves_command() {
        let t = task("PickPlace");
        let w = WorldState::init(&t, &t.cases[0], 1).unwrap();
        let e = Expert::new(plan(&t, &w).unwrap());
        let full = e.nominal(&w, &ProficiencyProfile::perfect("p"));
        let mut slow = ProficiencyProfile::perfect("p");
        slow.speed_factor = 0.5;
        let half = e.nominal(&w, &slow);
        assert_eq!(half.vx, full.vx * 0.5);
        assert_eq!(half.vy, full.vy * 0.5);
    }

    #[test]
    fn tremor_is_unbiased() {
        let t = task("PickPlace");
        let mut w = WorldState::init(&t, &t.cases[0], 1).unwrap();
        let e = Expert::new(plan(&t, &w).unwrap());
        // Close enough to the waypoint that nothing clamps.
        w.arm = Pose2::new(e.current().pose.x - 0.05, e.current().pose.y + 0.03, 0.0);
        let mut profile = ProficiencyProfile::perfect("p");
        let nominal = e.nominal(&w, &profile);
        profile.tremor_std = 0.01;
        let mut rng = Rng::seed_from_u64(11);
        let n = 10_000;
        let (mut sx, mut sy) = (0.0, 0.0);
        let mut distinct = std::collections::HashSet::new();
        for _ in 0..n {
            let mut probe = e.clone();
            let c = probe.act(&w, &profile, &mut rng);
            sx += c.vx;
            sy += c.vy;
            distinct.insert(c.vx.to_bits());
        }
        let sigma = 0.01 / CONTROL_DT / (n as f64).sqrt();
        assert!((sx / n as f64 - nominal.vx).abs() < 3.0 * sigma);
        assert!((sy / n as f64 - nominal.vy).abs() < 3.0 * sigma);
        assert!(distinct.len() > n / 2);
    }

    #[test]
    fn perfect_expert_solves_every_builtin_case() {
        let profile = ProficiencyProfile::perfect("p");
        for t in builtin_tasks() {
            for case in &t.cases {
                let w = WorldState::init(&t, case, 5).unwrap();
                let (steps, ok) = demonstrate(&t, w, &profile, &cams(), &mut rng::stream(1, &[])).unwrap();
                assert!(ok, "{} {} failed after {} steps", t.name, case.case_id, steps.len());
            }
        }
    }

    #[test]
    fn collect_is_deterministic_and_needs_no_resamples() {
        let t = task("PickPlace");
        let cfg = CollectConfig { episodes_per_case: 2, cameras: cams(), seed: 9, created_at: 0 };
        let profile = ProficiencyProfile::perfect("expertA");
        let (a, ra) = collect(&t, &t.cases[..3], &profile, &cfg).unwrap();
        let (b, _) = collect(&t, &t.cases[..3], &profile, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 6);
        assert_eq!(ra.resamples, 0);
        for ep in &a.episodes {
            assert!(validate_episode(ep).is_empty());
            assert!(ep.outcome);
            assert_eq!(ep.collector, "expertA");
        }
    }

    #[test]
    fn zero_episodes_per_case_is_rejected() {
        let t = task("PickPlace");
        let cfg = CollectConfig { episodes_per_case: 0, cameras: cams(), seed: 9, created_at: 0 };
        assert!(matches!(collect(&t, &t.cases, &ProficiencyProfile::perfect("a"), &cfg), Err(ExpertError::NoEpisodes)));
    }

    #[test]
    fn hopeless_profile_aborts() {
        let t = task("PickPlace");
        let cfg = CollectConfig { episodes_per_case: 1, cameras: cams(), seed: 9, created_at: 0 };
        let profile = ProficiencyProfile { name: "frozen".into(), tremor_std: 0.0, pause_prob: 1.0, overshoot_gain: 1.0, speed_factor: 1.0 };
        assert!(matches!(collect(&t, &t.cases[..1], &profile, &cfg), Err(ExpertError::LowSuccess { .. })));
    }
}
