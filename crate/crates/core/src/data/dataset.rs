use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::Arc;

use super::format::{episode_paths, read_episode, write_episode};
use super::{DataError, Episode, ACTION_DIM, OBS_DIM, SCHEMA_VERSION};
use crate::sim::CameraConfig;

/// Lower clamp applied to every per-dimension standard deviation.
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub episode_id: String,
    pub path: String,
    pub blob: String,
    pub collector: String,
    pub task_name: String,
    pub case_id: String,
    pub length: usize,
}

/// On-disk index of a dataset (`manifest.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: String,
    pub dataset_id: String,
    pub task_names: Vec<String>,
    pub camera_configs: Vec<CameraConfig>,
    pub episodes: Vec<ManifestEntry>,
}

/// A manifest together with its loaded episodes, in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub episodes: Vec<Arc<Episode>>,
}

/// Result of a collector filter; `warning` is set when nothing matched.
#[derive(Debug, Clone)]
pub struct Filtered {
    pub dataset: Dataset,
    pub warning: Option<String>,
}

fn entry_for(ep: &Episode) -> ManifestEntry {
    ManifestEntry {
        episode_id: ep.episode_id.clone(),
        path: format!("episodes/{}.jsonl", ep.episode_id),
        blob: format!("episodes/{}.blob", ep.episode_id),
        collector: ep.collector.clone(),
        task_name: ep.task_name.clone(),
        case_id: ep.case_id.clone(),
        length: ep.steps.len(),
    }
}

impl Dataset {
    pub fn empty(dataset_id: &str) -> Self {
        Self {
            manifest: DatasetManifest {
                schema_version: SCHEMA_VERSION.into(),
                dataset_id: dataset_id.into(),
                task_names: vec![],
                camera_configs: vec![],
                episodes: vec![],
            },
            episodes: vec![],
        }
    }

    /// Builds a dataset from validated episodes; ids must be unique and all
    /// episodes must share one camera layout.
    pub fn from_episodes(dataset_id: &str, episodes: Vec<Episode>) -> Result<Self, DataError> {
        let mut ds = Self::empty(dataset_id);
        for ep in episodes {
            ds.push(ep)?;
        }
        Ok(ds)
    }

    pub fn push(&mut self, ep: Episode) -> Result<(), DataError> {
        let violations = super::validate_episode(&ep);
        if !violations.is_empty() {
            return Err(DataError::Invariant { id: ep.episode_id, violations });
        }
        if self.manifest.episodes.iter().any(|e| e.episode_id == ep.episode_id) {
            return Err(DataError::Collision(ep.episode_id));
        }
        if self.manifest.camera_configs.is_empty() {
            self.manifest.camera_configs = ep.camera_configs.clone();
        } else if self.manifest.camera_configs != ep.camera_configs {
            return Err(DataError::CameraMismatch);
        }
        if !self.manifest.task_names.contains(&ep.task_name) {
            self.manifest.task_names.push(ep.task_name.clone());
        }
        self.manifest.episodes.push(entry_for(&ep));
        self.episodes.push(Arc::new(ep));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn total_steps(&self) -> usize {
        self.episodes.iter().map(|e| e.steps.len()).sum()
    }

    /// Union of two datasets. Fails on id collisions, schema or camera
    /// mismatch; neither input is modified.
    pub fn merge(a: &Dataset, b: &Dataset) -> Result<Dataset, DataError> {
        if a.manifest.schema_version != b.manifest.schema_version {
            return Err(DataError::Schema(format!(
                "cannot merge {} with {}",
                a.manifest.schema_version, b.manifest.schema_version
            )));
        }
        if !a.is_empty() && !b.is_empty() && a.manifest.camera_configs != b.manifest.camera_configs {
            return Err(DataError::CameraMismatch);
        }
        if let Some(dup) = b.manifest.episodes.iter().find(|e| a.manifest.episodes.iter().any(|x| x.episode_id == e.episode_id)) {
            return Err(DataError::Collision(dup.episode_id.clone()));
        }
        let id = match (a.is_empty(), b.is_empty()) {
            (_, true) => a.manifest.dataset_id.clone(),
            (true, false) => b.manifest.dataset_id.clone(),
            _ => format!("{}+{}", a.manifest.dataset_id, b.manifest.dataset_id),
        };
        let mut out = a.clone();
        out.manifest.dataset_id = id;
        if out.manifest.camera_configs.is_empty() {
            out.manifest.camera_configs = b.manifest.camera_configs.clone();
        }
        for t in &b.manifest.task_names {
            if !out.manifest.task_names.contains(t) {
                out.manifest.task_names.push(t.clone());
            }
        }
        out.manifest.episodes.extend(b.manifest.episodes.iter().cloned());
        out.episodes.extend(b.episodes.iter().cloned());
        Ok(out)
    }

    /// Episodes recorded by `collector` only.
    pub fn filter_by_collector(&self, collector: &str) -> Filtered {
        let mut out = Self::empty(&format!("{}@{collector}", self.manifest.dataset_id));
        out.manifest.schema_version = self.manifest.schema_version.clone();
        for (entry, ep) in self.manifest.episodes.iter().zip(&self.episodes) {
            if ep.collector == collector {
                if out.manifest.camera_configs.is_empty() {
                    out.manifest.camera_configs = ep.camera_configs.clone();
                }
                if !out.manifest.task_names.contains(&ep.task_name) {
                    out.manifest.task_names.push(ep.task_name.clone());
                }
                out.manifest.episodes.push(entry.clone());
                out.episodes.push(ep.clone());
            }
        }
        // Keep the id stable under repeated filtering.
        if self.manifest.dataset_id.ends_with(&format!("@{collector}")) {
            out.manifest.dataset_id = self.manifest.dataset_id.clone();
        }
        let warning = out.is_empty().then(|| {
            let w = format!("no episodes collected by {collector:?} in {}", self.manifest.dataset_id);
            log::warn!("{w}");
            w
        });
        Filtered { dataset: out, warning }
    }

    /// Writes `manifest.json` and every episode under `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), DataError> {
        std::fs::create_dir_all(dir)?;
        for ep in &self.episodes {
            write_episode(ep, dir)?;
        }
        let text = serde_json::to_string_pretty(&self.manifest).map_err(|e| DataError::Schema(e.to_string()))?;
        std::fs::write(dir.join("manifest.json"), text)?;
        Ok(())
    }

    /// Loads and validates every indexed episode.
    pub fn load(dir: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(dir.join("manifest.json"))?;
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| DataError::Schema(format!("manifest: {e}")))?;
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(DataError::Schema(format!("manifest schema {:?}", manifest.schema_version)));
        }
        let mut episodes = Vec::with_capacity(manifest.episodes.len());
        for (i, entry) in manifest.episodes.iter().enumerate() {
            if manifest.episodes[..i].iter().any(|e| e.episode_id == entry.episode_id) {
                return Err(DataError::Collision(entry.episode_id.clone()));
            }
            let (meta, _) = episode_paths(dir, &entry.episode_id);
            if !meta.ends_with(&entry.path) {
                return Err(DataError::Schema(format!("unexpected episode path {}", entry.path)));
            }
            let ep = read_episode(dir, &entry.episode_id)?;
            if ep.steps.len() != entry.length || ep.collector != entry.collector {
                return Err(DataError::Schema(format!("manifest entry {} disagrees with episode", entry.episode_id)));
            }
            episodes.push(Arc::new(ep));
        }
        Ok(Self { manifest, episodes })
    }
}

/// Per-dimension mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub obs_mean: Vec<f64>,
    pub obs_std: Vec<f64>,
    pub action_mean: Vec<f64>,
    pub action_std: Vec<f64>,
}

impl NormalizationStats {
    pub fn identity(obs_dim: usize, action_dim: usize) -> Self {
        Self {
            obs_mean: vec![0.0; obs_dim],
            obs_std: vec![1.0; obs_dim],
            action_mean: vec![0.0; action_dim],
            action_std: vec![1.0; action_dim],
        }
    }

    pub fn normalize_obs(&self, v: &[f64]) -> Vec<f64> {
        v.iter().zip(&self.obs_mean).zip(&self.obs_std).map(|((x, m), s)| (x - m) / s).collect()
    }

    pub fn normalize_action(&self, v: &[f64]) -> Vec<f64> {
        v.iter().zip(&self.action_mean).zip(&self.action_std).map(|((x, m), s)| (x - m) / s).collect()
    }

    pub fn denormalize_action(&self, v: &[f64]) -> Vec<f64> {
        v.iter().zip(&self.action_mean).zip(&self.action_std).map(|((x, m), s)| x * s + m).collect()
    }
}

fn mean_std(rows: &[&[f64]], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let mut mean = vec![0.0; dim];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r.iter()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for r in rows {
        for ((acc, v), m) in var.iter_mut().zip(r.iter()).zip(&mean) {
            *acc += (v - m) * (v - m);
        }
    }
    let std = var.into_iter().map(|v| (v / n).sqrt().max(STD_FLOOR)).collect();
    (mean, std)
}

/// Exact two-pass statistics over every step of every episode.
pub fn compute_stats(ds: &Dataset) -> Result<NormalizationStats, DataError> {
    if ds.total_steps() == 0 {
        return Err(DataError::Empty);
    }
    let obs: Vec<Vec<f64>> = ds.episodes.iter().flat_map(|e| e.steps.iter().map(|s| s.observation.low_dim())).collect();
    let act: Vec<[f64; ACTION_DIM]> = ds.episodes.iter().flat_map(|e| e.steps.iter().map(|s| s.action.to_vec())).collect();
    let obs_rows: Vec<&[f64]> = obs.iter().map(|v| v.as_slice()).collect();
    let act_rows: Vec<&[f64]> = act.iter().map(|v| v.as_slice()).collect();
    let (obs_mean, obs_std) = mean_std(&obs_rows, OBS_DIM);
    let (action_mean, action_std) = mean_std(&act_rows, ACTION_DIM);
    Ok(NormalizationStats { obs_mean, obs_std, action_mean, action_std })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::testutil::random_episode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dataset(prefix: &str, n: usize, collector: &str, task: &str, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps = (0..n)
            .map(|i| {
                let mut e = random_episode(&mut rng, &format!("{prefix}{i}"), 1, 16);
                e.collector = collector.into();
                e.task_name = task.into();
                e
            })
            .collect();
        Dataset::from_episodes(prefix, eps).unwrap()
    }

    #[test]
    fn merge_counts_follow_table_sizes() {
        let a = dataset("bb", 100, "expertA", "Basketball", 1);
        let b = dataset("bp", 330, "expertA", "BlockPick", 2);
        let m = Dataset::merge(&a, &b).unwrap();
        assert_eq!(m.len(), 430);
        assert_eq!(m.manifest.task_names, vec!["Basketball".to_string(), "BlockPick".to_string()]);
    }

    #[test]
    fn merge_with_empty_is_identity() {
        let a = dataset("x", 5, "expertA", "PickPlace", 3);
        assert_eq!(Dataset::merge(&a, &Dataset::empty("e")).unwrap(), a);
    }

    #[test]
    fn merge_rejects_collisions_and_camera_mismatch() {
        let a = dataset("x", 3, "expertA", "PickPlace", 4);
        let b = dataset("x", 2, "expertA", "PickPlace", 5);
        assert!(matches!(Dataset::merge(&a, &b), Err(DataError::Collision(id)) if id == "x0"));

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = Dataset::from_episodes("c", vec![random_episode(&mut rng, "c0", 1, 24)]).unwrap();
        assert!(matches!(Dataset::merge(&a, &c), Err(DataError::CameraMismatch)));
    }

    #[test]
    fn collector_filter_counts_and_idempotence() {
        let a = dataset("a", 60, "A", "PickPlace", 7);
        let b = dataset("b", 60, "B", "PickPlace", 8);
        let m = Dataset::merge(&a, &b).unwrap();
        let fa = m.filter_by_collector("A");
        assert_eq!(fa.dataset.len(), 60);
        assert!(fa.warning.is_none());
        assert_eq!(fa.dataset.filter_by_collector("A").dataset, fa.dataset);
        let none = m.filter_by_collector("Z");
        assert!(none.dataset.is_empty());
        assert!(none.warning.is_some());
    }

    #[test]
    fn constant_dimension_std_is_clamped() {
        let mut ds = dataset("k", 4, "A", "PickPlace", 9);
        for ep in &mut ds.episodes {
            let ep = Arc::make_mut(ep);
            for s in &mut ep.steps {
                s.action.target.x = 0.5;
            }
        }
        let st = compute_stats(&ds).unwrap();
        assert_eq!(st.action_mean[0], 0.5);
        assert_eq!(st.action_std[0], STD_FLOOR);
    }

    #[test]
    fn two_point_stats() {
        let mut ds = dataset("k", 2, "A", "PickPlace", 10);
        for (ep, x) in ds.episodes.iter_mut().zip([0.2, 0.6]) {
            Arc::make_mut(ep).steps[0].action.target.x = x;
        }
        let st = compute_stats(&ds).unwrap();
        assert!((st.action_mean[0] - 0.4).abs() < 1e-15);
        assert!((st.action_std[0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn empty_dataset_has_no_stats() {
        assert!(matches!(compute_stats(&Dataset::empty("e")), Err(DataError::Empty)));
    }

    #[test]
    fn save_load_round_trip() {
        let ds = dataset("s", 3, "A", "PickPlace", 11);
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        assert_eq!(Dataset::load(dir.path()).unwrap(), ds);
    }
}
