//! Episode container: a JSON-Lines metadata file plus a binary raster blob.
//!
//! `<id>.jsonl` holds one header line followed by one line per step. The
//! rasters live in `<id>.blob`:
//!
//! ```text
//! magic "IMLB" | u32 version | u32 raster count
//! per raster: u32 rows | u32 cols | u32 channels | rows*cols*channels f32
//! ```
//!
//! All integers and floats are little-endian. Each step owns two rasters,
//! global view first.

use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{validate_episode, ActionRecord, DataError, Episode, Observation, Proprio, StepRecord, SCHEMA_VERSION};
use crate::sim::{CameraConfig, Raster};

const BLOB_MAGIC: &[u8; 4] = b"IMLB";
const BLOB_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    schema_version: String,
    episode_id: String,
    task_name: String,
    case_id: String,
    collector: String,
    created_at: u64,
    control_dt: f64,
    camera_configs: Vec<CameraConfig>,
    outcome: bool,
    step_count: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepLine {
    t: f64,
    proprio: Proprio,
    feature_vec: Option<Vec<f64>>,
    action: ActionRecord,
}

/// Serializes a valid episode into the two container streams.
pub fn write_episode_to(ep: &Episode, jsonl: &mut impl Write, blob: &mut impl Write) -> Result<(), DataError> {
    let violations = validate_episode(ep);
    if !violations.is_empty() {
        return Err(DataError::Invariant { id: ep.episode_id.clone(), violations });
    }
    let header = HeaderLine {
        schema_version: SCHEMA_VERSION.into(),
        episode_id: ep.episode_id.clone(),
        task_name: ep.task_name.clone(),
        case_id: ep.case_id.clone(),
        collector: ep.collector.clone(),
        created_at: ep.created_at,
        control_dt: ep.control_dt,
        camera_configs: ep.camera_configs.clone(),
        outcome: ep.outcome,
        step_count: ep.steps.len(),
    };
    let mut text = serde_json::to_string(&header).map_err(|e| DataError::Schema(e.to_string()))?;
    text.push('\n');
    for s in &ep.steps {
        let line = StepLine {
            t: s.t,
            proprio: s.observation.proprio,
            feature_vec: s.observation.feature_vec.clone(),
            action: s.action,
        };
        text.push_str(&serde_json::to_string(&line).map_err(|e| DataError::Schema(e.to_string()))?);
        text.push('\n');
    }
    jsonl.write_all(text.as_bytes())?;

    let mut bytes = Vec::with_capacity(12 + ep.steps.len() * 2 * (12 + 4 * ep.steps[0].observation.global_view.len()));
    bytes.extend_from_slice(BLOB_MAGIC);
    bytes.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    bytes.extend_from_slice(&((ep.steps.len() * 2) as u32).to_le_bytes());
    for s in &ep.steps {
        for r in [&s.observation.global_view, &s.observation.wrist_view] {
            for dim in [r.resolution, r.resolution, 3] {
                bytes.extend_from_slice(&(dim as u32).to_le_bytes());
            }
            for v in &r.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    blob.write_all(&bytes)?;
    Ok(())
}

struct BlobReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> BlobReader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], DataError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            DataError::Truncated(format!("{what}: need {n} bytes at offset {}, have {}", self.pos, self.bytes.len() - self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

fn parse_blob(bytes: &[u8], expected: usize) -> Result<Vec<Raster>, DataError> {
    let mut r = BlobReader { bytes, pos: 0 };
    if r.take(4, "magic")? != BLOB_MAGIC {
        return Err(DataError::Schema("raster blob magic mismatch".into()));
    }
    let version = r.u32("version")?;
    if version != BLOB_VERSION {
        return Err(DataError::Schema(format!("raster blob version {version}")));
    }
    let count = r.u32("raster count")? as usize;
    if count != expected {
        return Err(DataError::Truncated(format!("blob declares {count} rasters, metadata needs {expected}")));
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let (rows, cols, ch) = (r.u32("rows")? as usize, r.u32("cols")? as usize, r.u32("channels")? as usize);
        if rows != cols || ch != 3 {
            return Err(DataError::Schema(format!("raster {i} has shape {rows}x{cols}x{ch}")));
        }
        let n = rows.checked_mul(cols).and_then(|v| v.checked_mul(ch)).unwrap_or(usize::MAX);
        let payload = r.take(n.saturating_mul(4), &format!("raster {i}"))?;
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        out.push(Raster { resolution: rows, data });
    }
    if r.pos != bytes.len() {
        return Err(DataError::Schema(format!("{} trailing bytes after rasters", bytes.len() - r.pos)));
    }
    Ok(out)
}

/// Parses an episode from its two container streams. Nothing partial is
/// returned on failure.
pub fn read_episode_from(jsonl: &[u8], blob: &[u8]) -> Result<Episode, DataError> {
    let text = std::str::from_utf8(jsonl).map_err(|e| DataError::Schema(e.to_string()))?;
    let mut lines = text.lines();
    let header: HeaderLine = serde_json::from_str(lines.next().ok_or_else(|| DataError::Truncated("missing header line".into()))?)
        .map_err(|e| DataError::Schema(format!("header: {e}")))?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(DataError::Schema(format!("episode schema {:?}, expected {SCHEMA_VERSION:?}", header.schema_version)));
    }
    let step_lines: Vec<&str> = lines.filter(|l| !l.is_empty()).collect();
    if step_lines.len() != header.step_count {
        return Err(DataError::Truncated(format!("header declares {} steps, found {}", header.step_count, step_lines.len())));
    }
    let mut rasters = parse_blob(blob, header.step_count * 2)?.into_iter();
    let mut steps = Vec::with_capacity(header.step_count);
    for (i, line) in step_lines.iter().enumerate() {
        let s: StepLine = serde_json::from_str(line).map_err(|e| DataError::Schema(format!("step {i}: {e}")))?;
        let global_view = rasters.next().expect("count checked");
        let wrist_view = rasters.next().expect("count checked");
        steps.push(StepRecord {
            t: s.t,
            observation: Observation { proprio: s.proprio, global_view, wrist_view, feature_vec: s.feature_vec },
            action: s.action,
        });
    }
    let ep = Episode {
        episode_id: header.episode_id,
        task_name: header.task_name,
        case_id: header.case_id,
        collector: header.collector,
        created_at: header.created_at,
        control_dt: header.control_dt,
        camera_configs: header.camera_configs,
        steps,
        outcome: header.outcome,
    };
    let violations = validate_episode(&ep);
    if !violations.is_empty() {
        return Err(DataError::Invariant { id: ep.episode_id, violations });
    }
    Ok(ep)
}

pub(crate) fn episode_paths(dir: &Path, id: &str) -> (PathBuf, PathBuf) {
    let base = dir.join("episodes");
    (base.join(format!("{id}.jsonl")), base.join(format!("{id}.blob")))
}

/// Writes `episodes/<id>.jsonl` and `episodes/<id>.blob` under `dir` and
/// returns the metadata path.
pub fn write_episode(ep: &Episode, dir: &Path) -> Result<PathBuf, DataError> {
    let (meta, blob) = episode_paths(dir, &ep.episode_id);
    std::fs::create_dir_all(meta.parent().unwrap())?;
    let mut jsonl = Vec::new();
    let mut bin = Vec::new();
    write_episode_to(ep, &mut jsonl, &mut bin)?;
    std::fs::write(&meta, jsonl)?;
    std::fs::write(&blob, bin)?;
    Ok(meta)
}

pub fn read_episode(dir: &Path, id: &str) -> Result<Episode, DataError> {
    let (meta, blob) = episode_paths(dir, id);
    read_episode_from(&std::fs::read(meta)?, &std::fs::read(blob)?)
}
