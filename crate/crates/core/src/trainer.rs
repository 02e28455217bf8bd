//! Epoch-based optimization, checkpoint cadence, warm starts and the
//! on-disk checkpoint registry.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{compute_stats, DataError, Dataset, NormalizationStats};
use crate::diffusion::{action_window, draw_noise, training_loss, DiffusionError, DiffusionSchedule, PolicyBundle};
use crate::netcore::{encoder_input, init_params, EncoderInput, NetConfig, NetError, NumericArray, ParameterSet};
use crate::rng::{label_key, stream};

pub use crate::evalr::epochs_to_threshold;

pub const RUN_SCHEMA: &str = "imlw-run-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub checkpoint_every: usize,
    pub seed: u64,
    /// Bundle file to initialize from.
    pub warm_start: Option<PathBuf>,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub execute_steps: usize,
    /// Decay of the parameter moving average stored in checkpoints; 0 keeps
    /// the raw optimizer iterate.
    pub ema_decay: f64,
    /// Registry run id; derived from the configuration when absent.
    pub run_id: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            learning_rate: 1e-3,
            checkpoint_every: 50,
            seed: 0,
            warm_start: None,
            diffusion_steps: 50,
            beta_start: 1e-4,
            beta_end: 0.2,
            execute_steps: 4,
            ema_decay: 0.999,
            run_id: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(TrainError::Config("checkpoint_every must be at least 1".into()));
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config("batch_size and learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(TrainError::Config("ema_decay must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Epochs at which a checkpoint is written.
    pub fn checkpoint_epochs(&self) -> Vec<usize> {
        let mut e: Vec<usize> = (1..=self.epochs / self.checkpoint_every).map(|k| k * self.checkpoint_every).collect();
        if e.last() != Some(&self.epochs) {
            e.push(self.epochs);
        }
        e
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("checkpoint config hash {found} does not match {expected}")]
    ConfigMismatch { expected: String, found: String },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize, registry: Box<CheckpointRegistry> },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("registry error: {0}")]
    Registry(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointRecord {
    pub checkpoint_id: String,
    pub epoch: usize,
    pub bundle: PolicyBundle,
    /// Mean loss of every epoch up to and including this one.
    pub loss_trace: Vec<f64>,
    pub config_hash: String,
    pub parent: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointRegistry {
    pub run_id: String,
    pub dataset_id: String,
    /// Episode count of the training dataset.
    pub episodes: usize,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub loss_trace: Vec<f64>,
    pub parent: Option<String>,
    pub records: Vec<CheckpointRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunFile {
    schema: String,
    run_id: String,
    dataset_id: String,
    episodes: usize,
    net: NetConfig,
    train: TrainConfig,
    loss_trace: Vec<f64>,
    parent: Option<String>,
    checkpoints: Vec<RunCheckpoint>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunCheckpoint {
    checkpoint_id: String,
    epoch: usize,
    file: String,
    config_hash: String,
    parent: Option<String>,
}

impl CheckpointRegistry {
    pub fn get(&self, epoch: usize) -> Option<&CheckpointRecord> {
        self.records.iter().find(|r| r.epoch == epoch)
    }

    pub fn epochs(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.epoch).collect()
    }

    /// Writes `<root>/<run_id>/ckpt_<epoch>.bundle` and `run.json`.
    pub fn save(&self, root: &Path) -> Result<PathBuf, TrainError> {
        let dir = root.join(&self.run_id);
        std::fs::create_dir_all(&dir)?;
        let mut checkpoints = Vec::new();
        for r in &self.records {
            let file = format!("ckpt_{}.bundle", r.epoch);
            r.bundle.save(&dir.join(&file))?;
            checkpoints.push(RunCheckpoint {
                checkpoint_id: r.checkpoint_id.clone(),
                epoch: r.epoch,
                file,
                config_hash: r.config_hash.clone(),
                parent: r.parent.clone(),
            });
        }
        let run = RunFile {
            schema: RUN_SCHEMA.into(),
            run_id: self.run_id.clone(),
            dataset_id: self.dataset_id.clone(),
            episodes: self.episodes,
            net: self.net,
            train: self.train.clone(),
            loss_trace: self.loss_trace.clone(),
            parent: self.parent.clone(),
            checkpoints,
        };
        let json = serde_json::to_string_pretty(&run).map_err(|e| TrainError::Registry(e.to_string()))?;
        std::fs::write(dir.join("run.json"), json)?;
        Ok(dir)
    }

    /// Loads a run directory written by [`save`](Self::save).
    pub fn load(dir: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(dir.join("run.json"))?;
        let run: RunFile = serde_json::from_str(&text).map_err(|e| TrainError::Registry(e.to_string()))?;
        if run.schema != RUN_SCHEMA {
            return Err(TrainError::Registry(format!("schema {:?}, expected {RUN_SCHEMA:?}", run.schema)));
        }
        let mut records = Vec::new();
        for c in run.checkpoints {
            let bundle = PolicyBundle::load(&dir.join(&c.file))?;
            let found = bundle.net.hash();
            if found != c.config_hash {
                return Err(TrainError::ConfigMismatch { expected: c.config_hash, found });
            }
            let n = c.epoch.min(run.loss_trace.len());
            records.push(CheckpointRecord {
                checkpoint_id: c.checkpoint_id,
                epoch: c.epoch,
                bundle,
                loss_trace: run.loss_trace[..n].to_vec(),
                config_hash: c.config_hash,
                parent: c.parent,
            });
        }
        if records.windows(2).any(|w| w[1].epoch <= w[0].epoch) {
            return Err(TrainError::Registry("checkpoint epochs are not strictly increasing".into()));
        }
        Ok(Self {
            run_id: run.run_id,
            dataset_id: run.dataset_id,
            episodes: run.episodes,
            net: run.net,
            train: run.train,
            loss_trace: run.loss_trace,
            parent: run.parent,
            records,
        })
    }
}

/// Checkpoint ids from `id` back to the root of its fine-tune chain.
pub fn lineage(id: &str, registries: &[&CheckpointRegistry]) -> Vec<String> {
    let parents: HashMap<&str, Option<&str>> = registries
        .iter()
        .flat_map(|r| r.records.iter().map(|c| (c.checkpoint_id.as_str(), c.parent.as_deref())))
        .collect();
    let mut out = vec![id.to_string()];
    let mut cur = id;
    while let Some(Some(p)) = parents.get(cur) {
        if out.iter().any(|x| x == p) {
            break;
        }
        out.push(p.to_string());
        cur = p;
    }
    out
}

/// Adaptive moment estimation with decay rates 0.9 / 0.999 and epsilon 1e-8.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    m: ParameterSet,
    v: ParameterSet,
    t: i32,
}

impl Adam {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(params: &ParameterSet, lr: f64) -> Self {
        Self { lr, m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }

    pub fn step(&mut self, params: &mut ParameterSet, grads: &ParameterSet) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for (((_, p), (_, g)), ((_, m), (_, v))) in
            params.iter_mut().zip(grads.iter()).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((p, g), m), v) in p.data.iter_mut().zip(&g.data).zip(m.data.iter_mut()).zip(v.data.iter_mut()) {
                *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
                *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
                *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Exponential moving average of parameters, with the usual warmup
/// `min(decay, (1 + n) / (10 + n))` after n updates.
#[derive(Debug, Clone)]
pub struct Ema {
    pub decay: f64,
    pub params: ParameterSet,
    updates: u64,
}

impl Ema {
    pub fn new(params: &ParameterSet, decay: f64) -> Self {
        Self { decay, params: params.clone(), updates: 0 }
    }

    pub fn update(&mut self, params: &ParameterSet) {
        let n = self.updates as f64;
        let d = self.decay.min((1.0 + n) / (10.0 + n));
        self.updates += 1;
        for ((_, e), (_, p)) in self.params.iter_mut().zip(params.iter()) {
            for (e, p) in e.data.iter_mut().zip(&p.data) {
                *e = d * *e + (1.0 - d) * p;
            }
        }
    }
}

/// What to do after a checkpoint has been recorded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

fn check_layout(ds: &Dataset, net: &NetConfig) -> Result<(), TrainError> {
    if ds.is_empty() {
        return Err(DataError::Empty.into());
    }
    for c in &ds.manifest.camera_configs {
        if c.resolution != net.encoder.resolution {
            return Err(TrainError::ConfigMismatch {
                expected: format!("camera resolution {}", net.encoder.resolution),
                found: format!("camera resolution {}", c.resolution),
            });
        }
    }
    Ok(())
}

fn default_run_id(ds: &Dataset, net: &NetConfig, cfg: &TrainConfig, parent: Option<&str>) -> String {
    let tag = if parent.is_some() { "ft" } else { "run" };
    format!("{}-{}-{}-{tag}-s{}", ds.manifest.dataset_id, net.encoder.variant, net.noise_net.variant, cfg.seed)
}

struct Session<'a> {
    ds: &'a Dataset,
    net: NetConfig,
    stats: NormalizationStats,
    schedule: DiffusionSchedule,
    index: Vec<(usize, usize)>,
}

impl Session<'_> {
    fn batch(&self, items: &[(usize, usize)]) -> Result<(Vec<EncoderInput>, NumericArray), TrainError> {
        let h = self.net.noise_net.horizon;
        let a = self.net.noise_net.action_dim;
        let mut inputs = Vec::with_capacity(items.len());
        let mut x0 = Vec::with_capacity(items.len() * h * a);
        for &(e, s) in items {
            let ep = &self.ds.episodes[e];
            inputs.push(encoder_input(&self.net.encoder, &ep.steps[s].observation, &self.stats)?);
            x0.extend(action_window(ep, s, h, &self.stats));
        }
        Ok((inputs, NumericArray::new(vec![items.len() * h, a], x0)?))
    }
}

/// Shared loop behind [`train`] and [`finetune`].
fn run(
    ds: &Dataset,
    net: NetConfig,
    mut params: ParameterSet,
    parent: Option<String>,
    cfg: &TrainConfig,
    on_checkpoint: &mut dyn FnMut(&CheckpointRecord) -> Control,
) -> Result<CheckpointRegistry, TrainError> {
    cfg.validate()?;
    check_layout(ds, &net)?;
    let stats = compute_stats(ds)?;
    let schedule = DiffusionSchedule::linear(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)?;
    let index: Vec<(usize, usize)> =
        ds.episodes.iter().enumerate().flat_map(|(e, ep)| (0..ep.steps.len()).map(move |s| (e, s))).collect();
    let session = Session { ds, net, stats, schedule, index };
    let run_id = cfg.run_id.clone().unwrap_or_else(|| default_run_id(ds, &net, cfg, parent.as_deref()));
    let mut registry = CheckpointRegistry {
        run_id: run_id.clone(),
        dataset_id: ds.manifest.dataset_id.clone(),
        episodes: ds.len(),
        net,
        train: cfg.clone(),
        loss_trace: Vec::new(),
        parent: parent.clone(),
        records: Vec::new(),
    };
    let ckpts = cfg.checkpoint_epochs();
    let mut adam = Adam::new(&params, cfg.learning_rate);
    let mut ema = Ema::new(&params, cfg.ema_decay);
    let mut noise_rng = stream(cfg.seed, &[label_key("train-noise")]);
    for epoch in 1..=cfg.epochs {
        let mut order = session.index.clone();
        order.shuffle(&mut stream(cfg.seed, &[label_key("shuffle"), epoch as u64]));
        let (mut total, mut count) = (0.0, 0usize);
        for (b, items) in order.chunks(cfg.batch_size).enumerate() {
            let (inputs, x0) = session.batch(items)?;
            let refs: Vec<&EncoderInput> = inputs.iter().collect();
            let draw = draw_noise(items.len(), net.noise_net.horizon, net.noise_net.action_dim, &session.schedule, &mut noise_rng);
            let grads = {
                let (f, loss) = training_loss(&net, &params, &session.schedule, &refs, &x0, &draw)?;
                let l = f.value(loss).data[0];
                if !l.is_finite() {
                    return Err(TrainError::NonFinite { epoch, batch: b, registry: Box::new(registry) });
                }
                total += l * items.len() as f64;
                count += items.len();
                f.gradients(loss)?.grads
            };
            adam.step(&mut params, &grads);
            if !params.is_finite() {
                return Err(TrainError::NonFinite { epoch, batch: b, registry: Box::new(registry) });
            }
            ema.update(&params);
        }
        let mean = total / count as f64;
        registry.loss_trace.push(mean);
        log::debug!("{run_id} epoch {epoch}: loss {mean:.5}");
        if ckpts.contains(&epoch) {
            let bundle = PolicyBundle::new(net, ema.params.clone(), session.schedule.clone(), session.stats.clone(), cfg.execute_steps)?;
            let record = CheckpointRecord {
                checkpoint_id: format!("{run_id}/ckpt_{epoch}"),
                epoch,
                bundle,
                loss_trace: registry.loss_trace.clone(),
                config_hash: net.hash(),
                parent: parent.clone(),
            };
            let ctl = on_checkpoint(&record);
            registry.records.push(record);
            if ctl == Control::Stop {
                break;
            }
        }
    }
    Ok(registry)
}

/// Trains from scratch, or from `cfg.warm_start` when set.
pub fn train(ds: &Dataset, net: NetConfig, cfg: &TrainConfig) -> Result<CheckpointRegistry, TrainError> {
    train_with(ds, net, cfg, &mut |_| Control::Continue)
}

/// [`train`] with a hook called after every checkpoint.
pub fn train_with(
    ds: &Dataset,
    net: NetConfig,
    cfg: &TrainConfig,
    on_checkpoint: &mut dyn FnMut(&CheckpointRecord) -> Control,
) -> Result<CheckpointRegistry, TrainError> {
    net.validate()?;
    if let Some(path) = &cfg.warm_start {
        let bundle = PolicyBundle::load(path)?;
        if bundle.net.hash() != net.hash() {
            return Err(TrainError::ConfigMismatch { expected: net.hash(), found: bundle.net.hash() });
        }
        let parent = path.to_string_lossy().into_owned();
        return run(ds, net, bundle.params, Some(parent), cfg, on_checkpoint);
    }
    let params = init_params(&net, cfg.seed)?;
    run(ds, net, params, None, cfg, on_checkpoint)
}

/// Continues training from `base` on `ds`; records `base` as parent.
pub fn finetune(ds: &Dataset, base: &CheckpointRecord, cfg: &TrainConfig) -> Result<CheckpointRegistry, TrainError> {
    finetune_with(ds, base, cfg, &mut |_| Control::Continue)
}

pub fn finetune_with(
    ds: &Dataset,
    base: &CheckpointRecord,
    cfg: &TrainConfig,
    on_checkpoint: &mut dyn FnMut(&CheckpointRecord) -> Control,
) -> Result<CheckpointRegistry, TrainError> {
    cfg.validate()?;
    let net = base.bundle.net;
    if base.config_hash != net.hash() {
        return Err(TrainError::ConfigMismatch { expected: net.hash(), found: base.config_hash.clone() });
    }
    check_layout(ds, &net)?;
    run(ds, net, base.bundle.params.clone(), Some(base.checkpoint_id.clone()), cfg, on_checkpoint)
}
