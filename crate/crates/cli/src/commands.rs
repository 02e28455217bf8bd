use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context as _};
use serde::Serialize;

use imlw_core::data::compute_stats;
use imlw_core::deploy::{execute_stream, DeployError};
use imlw_core::diffusion::{DiffusionPolicy, Policy as _};
use imlw_core::evalr::{self, EvaluatorSpec, RunSummary, TableReport, REPORT_SCHEMA};
use imlw_core::expert::{collect, CollectConfig};
use imlw_core::netcore::NetConfig;
use imlw_core::sim::TaskLibrary;
use imlw_core::trainer::{finetune, train};
use imlw_core::{CameraConfig, CheckpointRegistry, Dataset, PolicyBundle, TaskSpec, WorldState};
use imlw_gateway::SessionConfig;

use crate::config::RunConfigFile;
use crate::{Cli, Command, EvalFlags, TrainFlags, UsageError};

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

/// Resolves flags over the config file over defaults. The top-level seed
/// drives training, evaluation and latency streams alike.
fn resolve(cli: &Cli, command: &str) -> anyhow::Result<RunConfigFile> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfigFile::load(p)?,
        None => RunConfigFile::default(),
    };
    cfg.command = command.into();
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.train.seed = cfg.seed;
    cfg.eval.seed = cfg.seed;
    cfg.latency.seed = cfg.seed;
    Ok(cfg)
}

fn apply_train(cfg: &mut RunConfigFile, f: &TrainFlags) {
    let t = &mut cfg.train;
    if let Some(v) = f.epochs {
        t.epochs = v;
    }
    if let Some(v) = f.ckpt_every {
        t.checkpoint_every = v;
    }
    if let Some(v) = f.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = f.lr {
        t.learning_rate = v;
    }
    if let Some(v) = f.diffusion_steps {
        t.diffusion_steps = v;
    }
    if let Some(v) = f.execute_steps {
        t.execute_steps = v;
    }
    if f.run_id.is_some() {
        t.run_id = f.run_id.clone();
    }
}

fn apply_eval(cfg: &mut RunConfigFile, f: &EvalFlags) -> anyhow::Result<()> {
    if f.task.is_some() {
        cfg.task = f.task.clone();
    }
    if f.tasks.is_some() {
        cfg.task_library = f.tasks.clone();
    }
    if f.evaluators.is_some() || f.flip_noise.is_some() {
        let n = f.evaluators.unwrap_or(cfg.eval.evaluators.len());
        if n == 0 {
            return Err(usage("--evaluators must be at least 1"));
        }
        let noise = f.flip_noise.unwrap_or(0.0);
        cfg.eval.evaluators = EvaluatorSpec::panel(n)
            .into_iter()
            .enumerate()
            .map(|(i, mut e)| {
                e.flip_noise = noise;
                e.seed = i as u64;
                e
            })
            .collect();
    }
    if let Some(r) = f.repeats {
        cfg.eval.repeats = r;
    }
    cfg.eval.validate().map_err(|e| usage(e.to_string()))?;
    Ok(())
}

fn task<'l>(cfg: &RunConfigFile, lib: &'l TaskLibrary) -> anyhow::Result<&'l TaskSpec> {
    let name = cfg.task.as_deref().ok_or_else(|| usage("--task is required"))?;
    lib.task(name).ok_or_else(|| usage(format!("unknown task {name}")))
}

fn out_dir(cfg: &RunConfigFile) -> anyhow::Result<PathBuf> {
    cfg.out.clone().ok_or_else(|| usage("--out is required"))
}

/// The registry of the run directory holding `bundle`, with the index of
/// the matching record.
fn owning_run(bundle: &Path) -> anyhow::Result<(CheckpointRegistry, usize)> {
    let dir = bundle.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let reg = CheckpointRegistry::load(dir).with_context(|| format!("loading run {}", dir.display()))?;
    let file = bundle.file_name().and_then(|f| f.to_str()).unwrap_or_default();
    let idx = reg
        .records
        .iter()
        .position(|r| format!("ckpt_{}.bundle", r.epoch) == file)
        .ok_or_else(|| anyhow::anyhow!("{} is not listed in {}/run.json", bundle.display(), dir.display()))?;
    Ok((reg, idx))
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Collect(a) => {
            let mut cfg = resolve(&cli, "collect")?;
            if a.task.is_some() {
                cfg.task = a.task.clone();
            }
            if a.tasks.is_some() {
                cfg.task_library = a.tasks.clone();
            }
            if let Some(p) = &a.profile {
                cfg.profile = p.clone();
            }
            if let Some(r) = a.resolution {
                cfg.resolution = r;
            }
            if a.created_at.is_some() {
                cfg.created_at = a.created_at;
            }
            if a.out.is_some() {
                cfg.out = a.out.clone();
            }
            let lib = cfg.library()?;
            let task = task(&cfg, &lib)?;
            let profile = cfg.profile(&lib)?;
            let cases = if a.cases.is_empty() {
                task.cases.clone()
            } else {
                a.cases
                    .iter()
                    .map(|id| task.case(id).cloned().ok_or_else(|| usage(format!("task {} has no case {id}", task.name))))
                    .collect::<anyhow::Result<Vec<_>>>()?
            };
            let out = out_dir(&cfg)?;
            let cc = CollectConfig {
                episodes_per_case: a.per_case.unwrap_or(10),
                cameras: CameraConfig::default_pair(cfg.resolution),
                seed: cfg.seed,
                created_at: cfg.created_at.unwrap_or_else(now_ms),
            };
            let (ds, report) = collect(task, &cases, &profile, &cc)?;
            ds.save(&out)?;
            cfg.write(&out)?;
            log::info!(
                "{} episodes ({} steps) to {}; {} attempts, {} resamples, {} short",
                ds.len(),
                ds.total_steps(),
                out.display(),
                report.attempts,
                report.resamples,
                report.shortfall
            );
        }
        Command::Serve(a) => {
            let mut cfg = resolve(&cli, "serve")?;
            if a.tasks.is_some() {
                cfg.task_library = a.tasks.clone();
            }
            if a.out.is_some() {
                cfg.out = a.out.clone();
            }
            let out = out_dir(&cfg)?;
            let mut sc = SessionConfig::new(cfg.library()?, out.clone());
            sc.cameras = CameraConfig::default_pair(cfg.resolution);
            sc.lockstep = a.lockstep;
            sc.previews = a.previews;
            sc.created_at = cfg.created_at;
            cfg.write(&out)?;
            let addr = format!("{}:{}", a.host, a.port);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let server = imlw_gateway::serve(&addr, sc).await?;
                log::info!("gateway listening on ws://{}", server.addr);
                tokio::signal::ctrl_c().await?;
                server.shutdown().await;
                anyhow::Ok(())
            })?;
        }
        Command::Train(a) => {
            let mut cfg = resolve(&cli, "train")?;
            apply_train(&mut cfg, &a.train);
            if let Some(e) = a.encoder {
                cfg.encoder = e;
            }
            if let Some(n) = a.noisenet {
                cfg.noise_net = n;
            }
            if a.out.is_some() {
                cfg.out = a.out.clone();
            }
            let out = out_dir(&cfg)?;
            let ds = Dataset::load(&a.data).with_context(|| format!("loading {}", a.data.display()))?;
            let mut net = NetConfig::new(cfg.encoder, cfg.noise_net);
            if let Some(c) = ds.manifest.camera_configs.first() {
                net.encoder.resolution = c.resolution;
            }
            cfg.resolution = net.encoder.resolution;
            let reg = train(&ds, net, &cfg.train)?;
            let dir = reg.save(&out)?;
            cfg.write(&dir)?;
            log::info!("run {} with checkpoints at epochs {:?} in {}", reg.run_id, reg.epochs(), dir.display());
        }
        Command::Finetune(a) => {
            let mut cfg = resolve(&cli, "finetune")?;
            apply_train(&mut cfg, &a.train);
            if a.out.is_some() {
                cfg.out = a.out.clone();
            }
            let ds = Dataset::load(&a.data).with_context(|| format!("loading {}", a.data.display()))?;
            let (base_reg, idx) = owning_run(&a.from)?;
            let base = &base_reg.records[idx];
            let out = match cfg.out.clone() {
                Some(o) => o,
                None => a.from.parent().and_then(Path::parent).unwrap_or(Path::new(".")).to_path_buf(),
            };
            cfg.out = Some(out.clone());
            cfg.encoder = base.bundle.net.encoder.variant;
            cfg.noise_net = base.bundle.net.noise_net.variant;
            cfg.resolution = base.bundle.net.encoder.resolution;
            let reg = finetune(&ds, base, &cfg.train)?;
            let dir = reg.save(&out)?;
            cfg.write(&dir)?;
            log::info!("run {} from {} with checkpoints at epochs {:?}", reg.run_id, base.checkpoint_id, reg.epochs());
        }
        Command::Sweep(a) => {
            let mut cfg = resolve(&cli, "sweep")?;
            apply_eval(&mut cfg, &a.eval)?;
            if a.out.is_some() {
                cfg.out = a.out.clone();
            }
            let out = cfg.out.clone().unwrap_or_else(|| a.run.clone());
            let lib = cfg.library()?;
            let task = task(&cfg, &lib)?;
            let reg = CheckpointRegistry::load(&a.run).with_context(|| format!("loading run {}", a.run.display()))?;
            let (best, table) = evalr::sweep(&reg, task, &cfg.eval)?;
            std::fs::create_dir_all(&out)?;
            write_json(&out.join("sweep.json"), &table)?;
            std::fs::write(out.join("sweep.txt"), table.to_text())?;
            let pick = serde_json::json!({
                "checkpoint_id": best.checkpoint_id,
                "epoch": best.epoch,
                "file": a.run.join(format!("ckpt_{}.bundle", best.epoch)),
                "vpr": table.best_row().vpr,
            });
            write_json(&out.join("best.json"), &pick)?;
            write_json(&out.join("summary.json"), &summary(task, &reg, &best.checkpoint_id, table.best_row().vpr))?;
            cfg.write(&out)?;
            print!("{}", table.to_text());
        }
        Command::Eval(a) => {
            let mut cfg = resolve(&cli, "eval")?;
            apply_eval(&mut cfg, &a.eval)?;
            if a.out.is_some() {
                cfg.out = a.out.clone();
            }
            let lib = cfg.library()?;
            let task = task(&cfg, &lib)?;
            let (reg, idx) = owning_run(&a.ckpt)?;
            let rec = &reg.records[idx];
            let report = evalr::evaluate_checkpoint(rec, task, &cfg.eval)?;
            let out = match cfg.out.clone() {
                Some(o) => o,
                None => a.ckpt.parent().unwrap_or(Path::new(".")).join(format!("eval_{}_{}", task.name, rec.epoch)),
            };
            std::fs::create_dir_all(&out)?;
            write_json(&out.join("report.json"), &report)?;
            std::fs::write(out.join("report.txt"), report.to_text())?;
            write_json(&out.join("summary.json"), &summary(task, &reg, &rec.checkpoint_id, report.vpr))?;
            cfg.write(&out)?;
            print!("{}", report.to_text());
        }
        Command::DeploySim(a) => {
            let mut cfg = resolve(&cli, "deploy-sim")?;
            if a.task.is_some() {
                cfg.task = a.task.clone();
            }
            if a.tasks.is_some() {
                cfg.task_library = a.tasks.clone();
            }
            if let Some(v) = a.latency_fixed {
                cfg.latency.fixed_delay = v;
            }
            if let Some(v) = a.latency_jitter {
                cfg.latency.jitter_std = v;
            }
            if let Some(v) = a.slack {
                cfg.slack = v;
            }
            if a.out.is_some() {
                cfg.out = a.out.clone();
            }
            cfg.latency.validate().map_err(|e| usage(e.to_string()))?;
            let out = out_dir(&cfg)?;
            let lib = cfg.library()?;
            let task = task(&cfg, &lib)?;
            let case = match &a.case {
                Some(id) => task.case(id).ok_or_else(|| usage(format!("task {} has no case {id}", task.name)))?,
                None => task.cases.first().ok_or_else(|| usage(format!("task {} has no cases", task.name)))?,
            };
            let bundle = PolicyBundle::load(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display()))?;
            let world = WorldState::init(task, case, cfg.seed)?;
            let mut policy = DiffusionPolicy::new(&bundle);
            policy.reset(&world, task, cfg.seed)?;
            std::fs::create_dir_all(&out)?;
            cfg.write(&out)?;
            let write_log = |log: &imlw_core::deploy::ExecutionLog| -> anyhow::Result<()> {
                let mut f = std::io::BufWriter::new(std::fs::File::create(out.join("log.jsonl"))?);
                log.write_jsonl(&mut f)?;
                Ok(())
            };
            match execute_stream(&mut policy, world, task, &bundle.cameras(), &cfg.latency, cfg.slack) {
                Ok(o) => {
                    write_log(&o.log)?;
                    let outcome = serde_json::json!({
                        "schema": REPORT_SCHEMA,
                        "task": task.name,
                        "case_id": case.case_id,
                        "success": o.success,
                        "termination": o.termination,
                        "time": o.world.time,
                        "executed": o.log.executed(),
                        "discarded": o.log.discarded(),
                        "stalled": false,
                    });
                    write_json(&out.join("outcome.json"), &outcome)?;
                    println!("{} {}: {} ({} executed, {} discarded)", task.name, case.case_id, o.termination, o.log.executed(), o.log.discarded());
                }
                Err(DeployError::Stall { horizons, time, log }) => {
                    write_log(&log)?;
                    let outcome = serde_json::json!({
                        "schema": REPORT_SCHEMA,
                        "task": task.name,
                        "case_id": case.case_id,
                        "success": false,
                        "termination": "stalled",
                        "time": time,
                        "executed": log.executed(),
                        "discarded": log.discarded(),
                        "stalled": true,
                    });
                    write_json(&out.join("outcome.json"), &outcome)?;
                    return Err(DeployError::Stall { horizons, time, log }.into());
                }
                Err(e) => return Err(e.into()),
            }
        }
        Command::Merge(a) => {
            resolve(&cli, "merge")?;
            let da = Dataset::load(&a.a).with_context(|| format!("loading {}", a.a.display()))?;
            let db = Dataset::load(&a.b).with_context(|| format!("loading {}", a.b.display()))?;
            let merged = Dataset::merge(&da, &db)?;
            merged.save(&a.out)?;
            log::info!("{} + {} = {} episodes in {}", da.len(), db.len(), merged.len(), a.out.display());
        }
        Command::Stats(a) => {
            resolve(&cli, "stats")?;
            let mut ds = Dataset::load(&a.data).with_context(|| format!("loading {}", a.data.display()))?;
            if let Some(c) = &a.collector {
                let f = ds.filter_by_collector(c);
                if let Some(w) = f.warning {
                    bail!(w);
                }
                ds = f.dataset;
            }
            let mut tasks: BTreeMap<String, usize> = BTreeMap::new();
            let mut collectors: BTreeMap<String, usize> = BTreeMap::new();
            for ep in &ds.episodes {
                *tasks.entry(ep.task_name.clone()).or_default() += 1;
                *collectors.entry(ep.collector.clone()).or_default() += 1;
            }
            let stats = compute_stats(&ds)?;
            let v = serde_json::json!({
                "dataset_id": ds.manifest.dataset_id,
                "episodes": ds.len(),
                "steps": ds.total_steps(),
                "tasks": tasks,
                "collectors": collectors,
                "stats": stats,
            });
            println!("{}", serde_json::to_string_pretty(&v)?);
        }
        Command::Report(a) => {
            let mut cfg = resolve(&cli, "report")?;
            if a.tasks.is_some() {
                cfg.task_library = a.tasks.clone();
            }
            if a.out.is_some() {
                cfg.out = a.out.clone();
            }
            let lib = cfg.library()?;
            let mut runs = Vec::new();
            for p in &a.runs {
                let file = if p.is_dir() { p.join("summary.json") } else { p.clone() };
                let text = std::fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
                let s: RunSummary = serde_json::from_str(&text).with_context(|| format!("parsing {}", file.display()))?;
                runs.push(s);
            }
            let table = TableReport::build(&runs, &lib)?;
            if let Some(out) = &cfg.out {
                std::fs::create_dir_all(out)?;
                write_json(&out.join("table.json"), &table)?;
                std::fs::write(out.join("table.txt"), table.to_text())?;
                cfg.write(out)?;
            }
            print!("{}", table.to_text());
        }
    }
    Ok(())
}

fn summary(task: &TaskSpec, reg: &CheckpointRegistry, checkpoint_id: &str, vpr: f64) -> RunSummary {
    RunSummary {
        schema: REPORT_SCHEMA.into(),
        task: task.name.clone(),
        encoder: reg.net.encoder.variant,
        noise_net: reg.net.noise_net.variant,
        demos: reg.episodes,
        checkpoint_id: checkpoint_id.into(),
        vpr,
    }
}

