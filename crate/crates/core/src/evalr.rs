//! Rollout trials, the unanimous-vote protocol, checkpoint sweeps, the
//! dataset-scaling runner and Table-I style reports.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::diffusion::{receding_horizon_rollout, DiffusionError, DiffusionPolicy, Policy, Termination};
use crate::expert::{collect, CollectConfig, ExpertError, ProficiencyProfile};
use crate::netcore::{EncoderVariant, NetConfig, NoiseNetVariant};
use crate::rng::{derive_seed, label_key, stream};
use crate::sim::{CameraConfig, Pose2, SimError, TaskLibrary, TaskSpec, WorldState};
use crate::trainer::{self, CheckpointRecord, CheckpointRegistry, Control, TrainConfig, TrainError};

pub const REPORT_SCHEMA: &str = "imlw-report-v1";

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("invalid evaluation config: {0}")]
    Config(String),
    #[error(transparent)]
    Policy(#[from] DiffusionError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Expert(#[from] ExpertError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluatorSpec {
    pub evaluator_id: String,
    /// Probability of inverting the geometric verdict.
    pub flip_noise: f64,
    pub seed: u64,
}

impl EvaluatorSpec {
    pub fn deterministic(id: &str) -> Self {
        Self { evaluator_id: id.into(), flip_noise: 0.0, seed: 0 }
    }

    /// `n` noiseless evaluators named `eval-0` .. `eval-{n-1}`.
    pub fn panel(n: usize) -> Vec<Self> {
        (0..n).map(|i| Self::deterministic(&format!("eval-{i}"))).collect()
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if !(0.0..0.5).contains(&self.flip_noise) {
            return Err(EvalError::Config(format!("flip_noise {} of {} not in [0, 0.5)", self.flip_noise, self.evaluator_id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub evaluators: Vec<EvaluatorSpec>,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { evaluators: EvaluatorSpec::panel(4), repeats: 5, seed: 0 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.evaluators.is_empty() || self.repeats == 0 {
            return Err(EvalError::Config("need at least one evaluator and one repeat".into()));
        }
        self.evaluators.iter().try_for_each(|e| e.validate())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySummary {
    pub ticks: usize,
    pub duration: f64,
    pub final_arm: Pose2,
    pub path_length: f64,
    pub actions_emitted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub task: String,
    pub case_id: String,
    pub repeat_index: usize,
    pub seed: u64,
    pub summary: TrajectorySummary,
    pub termination: Termination,
    pub oracle_success: bool,
    pub votes: Vec<bool>,
}

/// Seed of one trial; independent of the policy under test so sweeps are
/// paired.
pub fn trial_seed(base: u64, task: &str, case_index: usize, repeat: usize) -> u64 {
    derive_seed(base, &[label_key("trial"), label_key(task), case_index as u64, repeat as u64])
}

/// One seeded trial with votes unset.
pub fn rollout(policy: &mut dyn Policy, task: &TaskSpec, case_index: usize, repeat: usize, seed: u64, cameras: &[CameraConfig]) -> Result<TrialResult, EvalError> {
    let case = task.cases.get(case_index).ok_or_else(|| EvalError::Config(format!("case index {case_index} out of range")))?;
    let world = WorldState::init(task, case, seed)?;
    let start = world.arm;
    policy.reset(&world, task, seed)?;
    let r = receding_horizon_rollout(policy, world, task, cameras)?;
    let mut prev = start;
    let mut path_length = 0.0;
    for p in &r.poses {
        path_length += ((p.x - prev.x).powi(2) + (p.y - prev.y).powi(2)).sqrt();
        prev = *p;
    }
    Ok(TrialResult {
        task: task.name.clone(),
        case_id: case.case_id.clone(),
        repeat_index: repeat,
        seed,
        summary: TrajectorySummary {
            ticks: r.poses.len(),
            duration: r.world.time,
            final_arm: r.world.arm,
            path_length,
            actions_emitted: r.emitted.len(),
        },
        termination: r.termination,
        oracle_success: r.success,
        votes: Vec::new(),
    })
}

/// Each evaluator votes the oracle verdict, flipped with its own keyed
/// Bernoulli draw.
pub fn judge(trial: &TrialResult, evaluators: &[EvaluatorSpec]) -> Vec<bool> {
    evaluators
        .iter()
        .map(|e| {
            if e.flip_noise <= 0.0 {
                return trial.oracle_success;
            }
            let mut rng = stream(
                e.seed,
                &[label_key("vote"), label_key(&e.evaluator_id), label_key(&trial.task), label_key(&trial.case_id), trial.repeat_index as u64],
            );
            trial.oracle_success ^ (rng.random::<f64>() < e.flip_noise)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseBreakdown {
    pub case_id: String,
    pub trials: usize,
    pub unanimous: usize,
    pub vpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VprReport {
    pub schema: String,
    pub task: String,
    pub evaluator_ids: Vec<String>,
    pub trials: Vec<TrialResult>,
    pub vpr: f64,
    pub per_case: Vec<CaseBreakdown>,
}

/// Fraction of rows whose votes are all positive.
pub fn vpr_of(votes: &[Vec<bool>]) -> f64 {
    if votes.is_empty() {
        return 0.0;
    }
    votes.iter().filter(|v| !v.is_empty() && v.iter().all(|&x| x)).count() as f64 / votes.len() as f64
}

impl VprReport {
    pub fn from_trials(task: &str, evaluator_ids: Vec<String>, trials: Vec<TrialResult>) -> Self {
        let votes: Vec<Vec<bool>> = trials.iter().map(|t| t.votes.clone()).collect();
        let vpr = vpr_of(&votes);
        let mut cases: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
        let mut order = Vec::new();
        for t in &trials {
            let e = cases.entry(&t.case_id).or_insert_with(|| {
                order.push(t.case_id.clone());
                (0, 0)
            });
            e.0 += 1;
            e.1 += (!t.votes.is_empty() && t.votes.iter().all(|&v| v)) as usize;
        }
        let per_case = order
            .iter()
            .map(|c| {
                let (n, u) = cases[c.as_str()];
                CaseBreakdown { case_id: c.clone(), trials: n, unanimous: u, vpr: u as f64 / n as f64 }
            })
            .collect();
        Self { schema: REPORT_SCHEMA.into(), task: task.into(), evaluator_ids, trials, vpr, per_case }
    }

    /// Positive rate of evaluator `i` alone.
    pub fn evaluator_rate(&self, i: usize) -> f64 {
        if self.trials.is_empty() {
            return 0.0;
        }
        self.trials.iter().filter(|t| t.votes[i]).count() as f64 / self.trials.len() as f64
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("task {}  trials {}  evaluators {}  VPR {:.1}%\n", self.task, self.trials.len(), self.evaluator_ids.len(), 100.0 * self.vpr);
        s.push_str(&format!("{:<24} {:>6} {:>9} {:>7}\n", "case", "trials", "unanimous", "vpr"));
        for c in &self.per_case {
            s.push_str(&format!("{:<24} {:>6} {:>9} {:>6.1}%\n", c.case_id, c.trials, c.unanimous, 100.0 * c.vpr));
        }
        s
    }
}

/// The unanimity rule implies vpr <= every evaluator's own positive rate.
pub fn vpr_unanimity_bound_check(report: &VprReport) -> bool {
    (0..report.evaluator_ids.len()).all(|i| report.vpr <= report.evaluator_rate(i) + 1e-12)
}

/// cases x repeats trials of `policy`, judged by the configured panel.
pub fn vpr(policy: &mut dyn Policy, task: &TaskSpec, cameras: &[CameraConfig], cfg: &EvalConfig) -> Result<VprReport, EvalError> {
    cfg.validate()?;
    if task.cases.is_empty() {
        return Err(EvalError::Config(format!("task {} has no cases", task.name)));
    }
    let mut trials = Vec::with_capacity(task.cases.len() * cfg.repeats);
    for ci in 0..task.cases.len() {
        for r in 0..cfg.repeats {
            let seed = trial_seed(cfg.seed, &task.name, ci, r);
            let mut t = rollout(policy, task, ci, r, seed, cameras)?;
            t.votes = judge(&t, &cfg.evaluators);
            trials.push(t);
        }
    }
    let ids = cfg.evaluators.iter().map(|e| e.evaluator_id.clone()).collect();
    Ok(VprReport::from_trials(&task.name, ids, trials))
}

/// VPR of a checkpoint's learned policy.
pub fn evaluate_checkpoint(record: &CheckpointRecord, task: &TaskSpec, cfg: &EvalConfig) -> Result<VprReport, EvalError> {
    let mut p = DiffusionPolicy::new(&record.bundle);
    vpr(&mut p, task, &record.bundle.cameras(), cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub checkpoint_id: String,
    pub epoch: usize,
    pub vpr: f64,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub schema: String,
    pub task: String,
    pub rows: Vec<SweepRow>,
    /// Index into `rows` of the selected checkpoint.
    pub best: usize,
}

impl SweepTable {
    /// Highest VPR; ties go to the earliest epoch.
    pub fn from_rows(task: &str, rows: Vec<SweepRow>) -> Result<Self, EvalError> {
        if rows.is_empty() {
            return Err(EvalError::Config("sweep over an empty registry".into()));
        }
        let mut best = 0;
        for (i, r) in rows.iter().enumerate() {
            let b = &rows[best];
            if r.vpr > b.vpr || (r.vpr == b.vpr && r.epoch < b.epoch) {
                best = i;
            }
        }
        Ok(Self { schema: REPORT_SCHEMA.into(), task: task.into(), rows, best })
    }

    pub fn best_row(&self) -> &SweepRow {
        &self.rows[self.best]
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("sweep on {}\n{:<40} {:>6} {:>8} {:>10}\n", self.task, "checkpoint", "epoch", "vpr", "loss");
        for (i, r) in self.rows.iter().enumerate() {
            let mark = if i == self.best { " *" } else { "" };
            let loss = r.final_loss.map_or("-".to_string(), |l| format!("{l:.5}"));
            s.push_str(&format!("{:<40} {:>6} {:>7.1}% {:>10}{mark}\n", r.checkpoint_id, r.epoch, 100.0 * r.vpr, loss));
        }
        s
    }
}

/// Sweeps arbitrary policies sharing one trial seed block.
pub fn sweep_policies(
    entries: &[(String, usize)],
    make: &mut dyn FnMut(usize) -> Box<dyn Policy>,
    task: &TaskSpec,
    cameras: &[CameraConfig],
    cfg: &EvalConfig,
) -> Result<SweepTable, EvalError> {
    let mut rows = Vec::with_capacity(entries.len());
    for (i, (id, epoch)) in entries.iter().enumerate() {
        let mut p = make(i);
        let report = vpr(p.as_mut(), task, cameras, cfg)?;
        rows.push(SweepRow { checkpoint_id: id.clone(), epoch: *epoch, vpr: report.vpr, final_loss: None });
    }
    SweepTable::from_rows(&task.name, rows)
}

/// Evaluates every checkpoint of a run; returns the selected one and the table.
pub fn sweep<'r>(registry: &'r CheckpointRegistry, task: &TaskSpec, cfg: &EvalConfig) -> Result<(&'r CheckpointRecord, SweepTable), EvalError> {
    let mut rows = Vec::with_capacity(registry.records.len());
    for rec in &registry.records {
        let report = evaluate_checkpoint(rec, task, cfg)?;
        log::info!("{}: vpr {:.3}", rec.checkpoint_id, report.vpr);
        rows.push(SweepRow { checkpoint_id: rec.checkpoint_id.clone(), epoch: rec.epoch, vpr: report.vpr, final_loss: rec.loss_trace.last().copied() });
    }
    let table = SweepTable::from_rows(&task.name, rows)?;
    Ok((&registry.records[table.best], table))
}

/// First checkpoint epoch reaching `threshold`, evaluating as training
/// proceeds; `None` when the budget runs out. Warm-starts from `base`.
pub fn epochs_to_threshold(
    ds: &Dataset,
    net: NetConfig,
    train_cfg: &TrainConfig,
    base: Option<&CheckpointRecord>,
    task: &TaskSpec,
    threshold: f64,
    eval_cfg: &EvalConfig,
) -> Result<Option<usize>, EvalError> {
    let mut hit = None;
    let mut failure = None;
    let mut hook = |rec: &CheckpointRecord| match evaluate_checkpoint(rec, task, eval_cfg) {
        Ok(r) if r.vpr >= threshold => {
            hit = Some(rec.epoch);
            Control::Stop
        }
        Ok(_) => Control::Continue,
        Err(e) => {
            failure = Some(e);
            Control::Stop
        }
    };
    match base {
        Some(b) => trainer::finetune_with(ds, b, train_cfg, &mut hook)?,
        None => trainer::train_with(ds, net, train_cfg, &mut hook)?,
    };
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(hit)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub demo_count: usize,
    /// Best-of-sweep VPR per seed.
    pub vprs: Vec<f64>,
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// For each demo count and seed: collect, train, sweep, keep the best VPR.
#[allow(clippy::too_many_arguments)]
pub fn scaling_experiment(
    task: &TaskSpec,
    demo_counts: &[usize],
    profile: &ProficiencyProfile,
    net: NetConfig,
    train_cfg: &TrainConfig,
    eval_cfg: &EvalConfig,
    seeds: &[u64],
) -> Result<Vec<ScalingPoint>, EvalError> {
    if demo_counts.windows(2).any(|w| w[1] <= w[0]) {
        return Err(EvalError::Config("demo counts must be strictly ascending".into()));
    }
    let cameras = CameraConfig::default_pair(net.encoder.resolution);
    let mut out = Vec::new();
    for &count in demo_counts {
        if count == 0 || count % task.cases.len() != 0 {
            return Err(EvalError::Config(format!("demo count {count} is not a positive multiple of {} cases", task.cases.len())));
        }
        let mut vprs = Vec::new();
        for &seed in seeds {
            let ccfg = CollectConfig { episodes_per_case: count / task.cases.len(), cameras: cameras.clone(), seed, created_at: 0 };
            let (ds, _) = collect(task, &task.cases, profile, &ccfg)?;
            let tcfg = TrainConfig { seed, run_id: Some(format!("{}-n{count}-s{seed}", task.name)), ..train_cfg.clone() };
            let reg = trainer::train(&ds, net, &tcfg)?;
            let (_, table) = sweep(&reg, task, eval_cfg)?;
            log::info!("{} demos {count} seed {seed}: best vpr {:.3}", task.name, table.best_row().vpr);
            vprs.push(table.best_row().vpr);
        }
        let mean = vprs.iter().sum::<f64>() / vprs.len() as f64;
        let min = vprs.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = vprs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        out.push(ScalingPoint { demo_count: count, median: median(&vprs), vprs, mean, min, max });
    }
    Ok(out)
}

/// The four encoder / noise-net pairings compared in the ablation.
pub const ABLATION_COLUMNS: [(EncoderVariant, NoiseNetVariant); 4] = [
    (EncoderVariant::Small, NoiseNetVariant::TemporalConv),
    (EncoderVariant::Small, NoiseNetVariant::Attention),
    (EncoderVariant::Large, NoiseNetVariant::Attention),
    (EncoderVariant::Pyramid, NoiseNetVariant::Attention),
];

pub fn column_name(enc: EncoderVariant, noise: NoiseNetVariant) -> String {
    format!("{enc}+{noise}")
}

/// Outcome of one architecture run on one task, as written by `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema: String,
    pub task: String,
    pub encoder: EncoderVariant,
    pub noise_net: NoiseNetVariant,
    pub demos: usize,
    pub checkpoint_id: String,
    pub vpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub task: String,
    pub object_num: usize,
    pub color: bool,
    pub size: bool,
    pub shape: bool,
    pub logic_steps: u32,
    pub demos: usize,
    /// One entry per column; `None` when no run was supplied.
    pub vpr: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableReport {
    pub schema: String,
    pub columns: Vec<String>,
    pub rows: Vec<TableRow>,
}

impl TableReport {
    /// Rows follow the library's task order; columns the canonical ablation
    /// order followed by any other pairing seen in `runs`.
    pub fn build(runs: &[RunSummary], library: &TaskLibrary) -> Result<Self, EvalError> {
        let mut columns: Vec<String> = ABLATION_COLUMNS.iter().map(|&(e, n)| column_name(e, n)).collect();
        for r in runs {
            let c = column_name(r.encoder, r.noise_net);
            if !columns.contains(&c) {
                columns.push(c);
            }
        }
        let mut rows = Vec::new();
        for task in &library.tasks {
            let mine: Vec<&RunSummary> = runs.iter().filter(|r| r.task == task.name).collect();
            if mine.is_empty() {
                continue;
            }
            let vpr = columns
                .iter()
                .map(|c| mine.iter().filter(|r| &column_name(r.encoder, r.noise_net) == c).map(|r| r.vpr).reduce(f64::max))
                .collect();
            rows.push(TableRow {
                task: task.name.clone(),
                object_num: task.object_count,
                color: task.uses_color,
                size: task.uses_size,
                shape: task.uses_shape,
                logic_steps: task.logic_steps,
                demos: mine.iter().map(|r| r.demos).max().unwrap_or(0),
                vpr,
            });
        }
        if let Some(r) = runs.iter().find(|r| library.task(&r.task).is_none()) {
            return Err(EvalError::Config(format!("run for unknown task {}", r.task)));
        }
        Ok(Self { schema: REPORT_SCHEMA.into(), columns, rows })
    }

    pub fn to_text(&self) -> String {
        let tick = |b: bool| if b { "x" } else { "" };
        let mut header = format!("{:<12} {:>4} {:>5} {:>4} {:>5} {:>5} {:>5}", "Task", "Obj", "Color", "Size", "Shape", "Logic", "Demos");
        for c in &self.columns {
            header.push_str(&format!(" {:>26}", c));
        }
        let mut s = header.clone();
        s.push('\n');
        s.push_str(&"-".repeat(header.len()));
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{:<12} {:>4} {:>5} {:>4} {:>5} {:>5} {:>5}",
                r.task,
                r.object_num,
                tick(r.color),
                tick(r.size),
                tick(r.shape),
                r.logic_steps,
                r.demos
            ));
            for v in &r.vpr {
                match v {
                    Some(v) => s.push_str(&format!(" {:>25.1}%", 100.0 * v)),
                    None => s.push_str(&format!(" {:>26}", "-")),
                }
            }
            s.push('\n');
        }
        s
    }
}
