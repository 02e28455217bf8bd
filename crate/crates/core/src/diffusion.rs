//! DDPM machinery: noise schedule, forward noising, the epsilon objective,
//! reverse sampling and receding-horizon execution.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng as _, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{ActionRecord, Episode, NormalizationStats, Observation, OBS_DIM};
use crate::deploy::TimedAction;
use crate::expert::{self, Expert, ProficiencyProfile};
use crate::netcore::{self, encode, encoder_input, predict_noise, EncoderInput, Forward, NetConfig, NetError, NumericArray, ParameterSet, Var};
use crate::rng::Rng;
use crate::sim::{self, ArmCommand, CameraConfig, Pose2, SimError, TaskSpec, WorldState, CONTROL_DT};

pub const BUNDLE_FORMAT: &str = "imlw-bundle-v1";

#[derive(Debug, thiserror::Error)]
pub enum DiffusionError {
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("diffusion step {step} outside [1, {t_max}]")]
    Step { step: usize, t_max: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("sampling diverged at diffusion step {step}")]
    Diverged { step: usize },
    #[error("invalid policy bundle: {0}")]
    Bundle(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("expert stub failed: {0}")]
    Expert(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Linear DDPM variance schedule with derived products.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    pub beta_start: f64,
    pub beta_end: f64,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: ScheduleKind,
}

/// Only the linear kind exists; kept as a tagged string on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ScheduleKind {
    #[serde(rename = "linear")]
    Linear,
}

impl DiffusionSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self, DiffusionError> {
        if steps == 0 {
            return Err(DiffusionError::Schedule("T must be at least 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(DiffusionError::Schedule(format!("need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| if steps == 1 { beta_start } else { beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64 })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self { beta_start, beta_end, betas, alphas, alpha_bars })
    }

    /// T = 50, betas 1e-4 to 0.2 (ᾱ_T ≈ 0.005).
    pub fn default_linear() -> Self {
        Self::linear(50, 1e-4, 0.2).expect("default schedule is valid")
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn spec(&self) -> ScheduleSpec {
        ScheduleSpec { steps: self.steps(), beta_start: self.beta_start, beta_end: self.beta_end, kind: ScheduleKind::Linear }
    }

    /// ᾱ_t for 1-based `t`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64, DiffusionError> {
        self.check(t)?;
        Ok(self.alpha_bars[t - 1])
    }

    fn check(&self, t: usize) -> Result<(), DiffusionError> {
        if t == 0 || t > self.steps() {
            return Err(DiffusionError::Step { step: t, t_max: self.steps() });
        }
        Ok(())
    }
}

/// x_t = sqrt(ᾱ_t) x0 + sqrt(1 - ᾱ_t) eps, elementwise.
pub fn q_sample(x0: &[f64], t: usize, eps: &[f64], schedule: &DiffusionSchedule) -> Result<Vec<f64>, DiffusionError> {
    let ab = schedule.alpha_bar(t)?;
    if x0.len() != eps.len() {
        return Err(NetError::Shape(format!("q_sample: x0 has {} values, eps {}", x0.len(), eps.len())).into());
    }
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect())
}

/// Diffusion steps and standard-normal noise for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub steps: Vec<usize>,
    /// [B*H, action_dim], rows grouped by batch item.
    pub eps: NumericArray,
}

pub fn draw_noise(batch: usize, horizon: usize, action_dim: usize, schedule: &DiffusionSchedule, rng: &mut Rng) -> NoiseDraw {
    let steps = (0..batch).map(|_| rng.random_range(1..=schedule.steps())).collect();
    let eps = (0..batch * horizon * action_dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    NoiseDraw { steps, eps: NumericArray { shape: vec![batch * horizon, action_dim], data: eps } }
}

fn noised(x0: &NumericArray, draw: &NoiseDraw, schedule: &DiffusionSchedule) -> Result<NumericArray, DiffusionError> {
    if x0.shape != draw.eps.shape || draw.steps.is_empty() || !x0.len().is_multiple_of(draw.steps.len()) {
        return Err(NetError::Shape(format!("action windows {:?} vs noise {:?}", x0.shape, draw.eps.shape)).into());
    }
    let per = x0.len() / draw.steps.len();
    let mut data = Vec::with_capacity(x0.len());
    for (i, &t) in draw.steps.iter().enumerate() {
        let r = i * per..(i + 1) * per;
        data.extend(q_sample(&x0.data[r.clone()], t, &draw.eps.data[r], schedule)?);
    }
    Ok(NumericArray { shape: x0.shape.clone(), data })
}

/// Records the epsilon-MSE objective for a batch. The returned forward pass
/// yields parameter gradients via [`Forward::gradients`].
pub fn training_loss<'p>(
    net: &NetConfig,
    params: &'p ParameterSet,
    schedule: &DiffusionSchedule,
    inputs: &[&EncoderInput],
    x0: &NumericArray,
    draw: &NoiseDraw,
) -> Result<(Forward<'p>, Var), DiffusionError> {
    if inputs.is_empty() {
        return Err(DiffusionError::EmptyBatch);
    }
    if draw.steps.len() != inputs.len() {
        return Err(NetError::Shape(format!("{} noise draws for {} observations", draw.steps.len(), inputs.len())).into());
    }
    let xt = noised(x0, draw, schedule)?;
    let mut f = Forward::new(params);
    let emb = encode(&mut f, &net.encoder, inputs)?;
    let xt = f.graph.input(xt);
    let pred = predict_noise(&mut f, &net.noise_net, xt, &draw.steps, schedule.steps(), emb)?;
    let eps = f.graph.input(draw.eps.clone());
    let diff = f.graph.sub(pred, eps)?;
    let loss = f.graph.mean_square(diff);
    Ok((f, loss))
}

/// Epsilon predictor driving the reverse chain.
pub trait EpsModel {
    /// `x_t` is [B*H, action_dim]; one step per batch item.
    fn predict(&mut self, x_t: &NumericArray, steps: &[usize]) -> Result<NumericArray, DiffusionError>;
}

/// Same objective as [`training_loss`] evaluated through an [`EpsModel`].
pub fn eps_loss(model: &mut dyn EpsModel, x0: &NumericArray, draw: &NoiseDraw, schedule: &DiffusionSchedule) -> Result<f64, DiffusionError> {
    if draw.steps.is_empty() {
        return Err(DiffusionError::EmptyBatch);
    }
    let xt = noised(x0, draw, schedule)?;
    let pred = model.predict(&xt, &draw.steps)?;
    Ok(pred.data.iter().zip(&draw.eps.data).map(|(p, e)| (p - e) * (p - e)).sum::<f64>() / pred.len() as f64)
}

/// Network predictor with the observation embedding computed once.
pub struct NetEps<'a> {
    net: &'a NetConfig,
    params: &'a ParameterSet,
    t_max: usize,
    embedding: NumericArray,
}

impl<'a> NetEps<'a> {
    pub fn new(net: &'a NetConfig, params: &'a ParameterSet, t_max: usize, inputs: &[&EncoderInput]) -> Result<Self, DiffusionError> {
        let mut f = Forward::new(params);
        let e = encode(&mut f, &net.encoder, inputs)?;
        let embedding = f.value(e).clone();
        Ok(Self { net, params, t_max, embedding })
    }
}

impl EpsModel for NetEps<'_> {
    fn predict(&mut self, x_t: &NumericArray, steps: &[usize]) -> Result<NumericArray, DiffusionError> {
        let mut f = Forward::new(self.params);
        let e = f.graph.input(self.embedding.clone());
        let x = f.graph.input(x_t.clone());
        let y = predict_noise(&mut f, &self.net.noise_net, x, steps, self.t_max, e)?;
        Ok(f.value(y).clone())
    }
}

/// Reverse chain from pure noise; returns normalized x0 of shape
/// [batch*horizon, action_dim].
pub fn denoise(
    model: &mut dyn EpsModel,
    schedule: &DiffusionSchedule,
    batch: usize,
    horizon: usize,
    action_dim: usize,
    rng: &mut Rng,
) -> Result<NumericArray, DiffusionError> {
    if batch == 0 {
        return Err(DiffusionError::EmptyBatch);
    }
    let n = batch * horizon * action_dim;
    let mut x = NumericArray {
        shape: vec![batch * horizon, action_dim],
        data: (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
    };
    for t in (1..=schedule.steps()).rev() {
        let eps = model.predict(&x, &vec![t; batch])?;
        if eps.shape != x.shape {
            return Err(NetError::Shape(format!("predictor returned {:?} for {:?}", eps.shape, x.shape)).into());
        }
        let (beta, alpha, ab) = (schedule.betas[t - 1], schedule.alphas[t - 1], schedule.alpha_bars[t - 1]);
        let coef = beta / (1.0 - ab).sqrt();
        let inv = 1.0 / alpha.sqrt();
        let sigma = if t > 1 { ((1.0 - schedule.alpha_bars[t - 2]) / (1.0 - ab) * beta).sqrt() } else { 0.0 };
        for (xv, e) in x.data.iter_mut().zip(&eps.data) {
            *xv = inv * (*xv - coef * e);
            if t > 1 {
                *xv += sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
        if !x.is_finite() {
            return Err(DiffusionError::Diverged { step: t });
        }
    }
    Ok(x)
}

/// Normalized action window of `horizon` steps starting at `start`, padded
/// by repeating the last action.
pub fn action_window(ep: &Episode, start: usize, horizon: usize, stats: &NormalizationStats) -> Vec<f64> {
    let last = ep.steps.len() - 1;
    (0..horizon).flat_map(|k| stats.normalize_action(&ep.steps[(start + k).min(last)].action.to_vec())).collect()
}

fn to_action(v: &[f64]) -> ActionRecord {
    let mut a = ActionRecord::from_slice(v);
    a.target.x = a.target.x.clamp(0.0, 1.0);
    a.target.y = a.target.y.clamp(0.0, 1.0);
    a.pwm_target = a.pwm_target.clamp(0.0, 1.0);
    a
}

/// Everything needed to run a trained policy.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyBundle {
    pub net: NetConfig,
    pub params: ParameterSet,
    pub schedule: DiffusionSchedule,
    pub stats: NormalizationStats,
    pub execute_steps: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleHeader {
    format: String,
    net: NetConfig,
    schedule: ScheduleSpec,
    horizon: usize,
    execute_steps: usize,
    stats: NormalizationStats,
}

impl PolicyBundle {
    pub fn new(net: NetConfig, params: ParameterSet, schedule: DiffusionSchedule, stats: NormalizationStats, execute_steps: usize) -> Result<Self, DiffusionError> {
        let b = Self { net, params, schedule, stats, execute_steps };
        b.validate()?;
        Ok(b)
    }

    pub fn horizon(&self) -> usize {
        self.net.noise_net.horizon
    }

    pub fn cameras(&self) -> Vec<CameraConfig> {
        CameraConfig::default_pair(self.net.encoder.resolution)
    }

    pub fn validate(&self) -> Result<(), DiffusionError> {
        self.net.validate()?;
        if self.execute_steps == 0 || self.execute_steps > self.horizon() {
            return Err(DiffusionError::Bundle(format!("execute_steps {} not in [1, H = {}]", self.execute_steps, self.horizon())));
        }
        let a = self.net.noise_net.action_dim;
        if self.stats.action_mean.len() != a || self.stats.action_std.len() != a {
            return Err(DiffusionError::Bundle(format!("action stats hold {} dims, net expects {a}", self.stats.action_mean.len())));
        }
        if self.stats.obs_mean.len() != OBS_DIM || self.stats.obs_std.len() != OBS_DIM {
            return Err(DiffusionError::Bundle(format!("observation stats hold {} dims, layout has {OBS_DIM}", self.stats.obs_mean.len())));
        }
        let expected = netcore::init_params(&self.net, 0)?;
        if !expected.same_layout(&self.params) {
            return Err(DiffusionError::Bundle("parameter names or shapes do not match the network config".into()));
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), DiffusionError> {
        let header = BundleHeader {
            format: BUNDLE_FORMAT.into(),
            net: self.net,
            schedule: self.schedule.spec(),
            horizon: self.horizon(),
            execute_steps: self.execute_steps,
            stats: self.stats.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| DiffusionError::Bundle(e.to_string()))?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        self.params.write_to(&self.net.hash(), w)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DiffusionError> {
        let mut r = bytes;
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(|_| DiffusionError::Bundle("truncated header".into()))?;
        let hlen = u64::from_le_bytes(len) as usize;
        if hlen > r.len() {
            return Err(DiffusionError::Bundle("truncated header".into()));
        }
        let header: BundleHeader = serde_json::from_slice(&r[..hlen]).map_err(|e| DiffusionError::Bundle(e.to_string()))?;
        r = &r[hlen..];
        if header.format != BUNDLE_FORMAT {
            return Err(DiffusionError::Bundle(format!("format {:?}, expected {BUNDLE_FORMAT:?}", header.format)));
        }
        if header.horizon != header.net.noise_net.horizon {
            return Err(DiffusionError::Bundle("horizon disagrees with the noise-net config".into()));
        }
        let (params, hash) = ParameterSet::from_bytes(r)?;
        if hash != header.net.hash() {
            return Err(DiffusionError::Bundle("parameter config hash does not match the header".into()));
        }
        let s = header.schedule;
        let schedule = DiffusionSchedule::linear(s.steps, s.beta_start, s.beta_end)?;
        Self::new(header.net, params, schedule, header.stats, header.execute_steps)
    }

    pub fn save(&self, path: &Path) -> Result<(), DiffusionError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DiffusionError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// H denormalized, clamped actions for each observation.
    pub fn sample_batch(&self, obs: &[&Observation], rng: &mut Rng) -> Result<Vec<Vec<ActionRecord>>, DiffusionError> {
        let inputs = obs
            .iter()
            .map(|o| encoder_input(&self.net.encoder, o, &self.stats))
            .collect::<Result<Vec<_>, _>>()?;
        let refs: Vec<&EncoderInput> = inputs.iter().collect();
        let mut model = NetEps::new(&self.net, &self.params, self.schedule.steps(), &refs)?;
        let (h, a) = (self.horizon(), self.net.noise_net.action_dim);
        let x = denoise(&mut model, &self.schedule, obs.len(), h, a, rng)?;
        Ok(x.data
            .chunks(h * a)
            .map(|w| w.chunks(a).map(|v| to_action(&self.stats.denormalize_action(v))).collect())
            .collect())
    }

    pub fn sample_actions(&self, obs: &Observation, rng: &mut Rng) -> Result<Vec<ActionRecord>, DiffusionError> {
        Ok(self.sample_batch(&[obs], rng)?.remove(0))
    }
}

/// Anything that proposes an action horizon from the current observation.
pub trait Policy {
    fn horizon(&self) -> usize;
    fn execute_steps(&self) -> usize;
    /// Called once per trial before the first plan.
    fn reset(&mut self, _world: &WorldState, _task: &TaskSpec, _seed: u64) -> Result<(), DiffusionError> {
        Ok(())
    }
    fn plan(&mut self, obs: &Observation, world: &WorldState, task: &TaskSpec) -> Result<Vec<ActionRecord>, DiffusionError>;
}

/// Learned policy sampling from a bundle.
pub struct DiffusionPolicy<'a> {
    pub bundle: &'a PolicyBundle,
    rng: Rng,
}

impl<'a> DiffusionPolicy<'a> {
    pub fn new(bundle: &'a PolicyBundle) -> Self {
        Self { bundle, rng: Rng::seed_from_u64(0) }
    }
}

impl Policy for DiffusionPolicy<'_> {
    fn horizon(&self) -> usize {
        self.bundle.horizon()
    }
    fn execute_steps(&self) -> usize {
        self.bundle.execute_steps
    }
    fn reset(&mut self, _world: &WorldState, _task: &TaskSpec, seed: u64) -> Result<(), DiffusionError> {
        self.rng = crate::rng::stream(seed, &[crate::rng::label_key("policy")]);
        Ok(())
    }
    fn plan(&mut self, obs: &Observation, _world: &WorldState, _task: &TaskSpec) -> Result<Vec<ActionRecord>, DiffusionError> {
        self.bundle.sample_actions(obs, &mut self.rng)
    }
}

/// Stub that emits what the noiseless expert would record over the next H
/// ticks.
pub struct ExpertPolicy {
    horizon: usize,
    execute_steps: usize,
    expert: Option<Expert>,
    profile: ProficiencyProfile,
}

impl ExpertPolicy {
    pub fn new(horizon: usize, execute_steps: usize) -> Self {
        Self { horizon, execute_steps, expert: None, profile: ProficiencyProfile::perfect("expert-stub") }
    }
}

impl Policy for ExpertPolicy {
    fn horizon(&self) -> usize {
        self.horizon
    }
    fn execute_steps(&self) -> usize {
        self.execute_steps
    }
    fn reset(&mut self, world: &WorldState, task: &TaskSpec, _seed: u64) -> Result<(), DiffusionError> {
        let plan = expert::plan(task, world).map_err(|e| DiffusionError::Expert(e.to_string()))?;
        self.expert = Some(Expert::new(plan));
        Ok(())
    }
    fn plan(&mut self, _obs: &Observation, world: &WorldState, _task: &TaskSpec) -> Result<Vec<ActionRecord>, DiffusionError> {
        let mut ex = self.expert.clone().ok_or_else(|| DiffusionError::Expert("plan before reset".into()))?;
        let mut w = world.clone();
        let mut rng = Rng::seed_from_u64(0);
        let mut out = Vec::with_capacity(self.horizon);
        for k in 0..self.horizon {
            let cmd = ex.act(&w, &self.profile, &mut rng);
            w = w.step(&cmd, CONTROL_DT)?;
            out.push(ActionRecord { target: w.arm, pwm_target: cmd.pwm_target });
            if k + 1 == self.execute_steps {
                self.expert = Some(ex.clone());
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Termination {
    Success,
    Timeout,
    Diverged,
}

impl std::fmt::Display for Termination {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Success => "success",
            Self::Timeout => "timeout",
            Self::Diverged => "diverged",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub world: WorldState,
    /// Arm pose after every tick.
    pub poses: Vec<Pose2>,
    pub emitted: Vec<TimedAction>,
    pub success: bool,
    pub termination: Termination,
}

/// Observe, plan H actions, track the first h_a, repeat. Stops on success,
/// on the task's time budget or when sampling diverges.
pub fn receding_horizon_rollout(
    policy: &mut dyn Policy,
    mut world: WorldState,
    task: &TaskSpec,
    cameras: &[CameraConfig],
) -> Result<Rollout, DiffusionError> {
    let mut poses = Vec::new();
    let mut emitted = Vec::new();
    let h_a = policy.execute_steps().min(policy.horizon());
    loop {
        if world.time >= task.max_rollout_time - 1e-9 {
            return Ok(Rollout { world, poses, emitted, success: false, termination: Termination::Timeout });
        }
        let obs = Observation::capture(&world, cameras);
        let actions = match policy.plan(&obs, &world, task) {
            Ok(a) => a,
            Err(DiffusionError::Diverged { .. }) => {
                return Ok(Rollout { world, poses, emitted, success: false, termination: Termination::Diverged })
            }
            Err(e) => return Err(e),
        };
        let t0 = world.time;
        for (k, a) in actions.iter().take(h_a).enumerate() {
            emitted.push(TimedAction { action: *a, desired_t: t0 + k as f64 * CONTROL_DT });
            world = world.step(&ArmCommand::track(&world.arm, &a.target, a.pwm_target), CONTROL_DT)?;
            poses.push(world.arm);
            if sim::success(task, &world)? {
                return Ok(Rollout { world, poses, emitted, success: true, termination: Termination::Success });
            }
            if world.time >= task.max_rollout_time - 1e-9 {
                break;
            }
        }
    }
}
