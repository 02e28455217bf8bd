//! Desk-scale imitation learning workbench.
//!
//! The crate covers the whole demonstration-to-deployment loop on a simulated
//! planar arm: scripted and teleoperated demonstration capture ([`sim`],
//! [`expert`], [`data`]), a small reverse-mode numeric core ([`netcore`]),
//! DDPM action generation ([`diffusion`]), epoch-based training with
//! checkpoint registries ([`trainer`]), unanimous-vote evaluation and
//! checkpoint sweeps ([`evalr`]) and timestamp-gated execution ([`deploy`]).

pub mod data;
pub mod deploy;
pub mod diffusion;
pub mod evalr;
pub mod expert;
pub mod netcore;
pub mod rng;
pub mod sim;
pub mod trainer;

pub use data::{ActionRecord, Dataset, DatasetManifest, Episode, NormalizationStats, Observation, StepRecord};
pub use diffusion::{DiffusionSchedule, Policy, PolicyBundle};
pub use evalr::{EvaluatorSpec, TrialResult, VprReport};
pub use sim::{ArmCommand, CameraConfig, CaseSetup, Pose2, TaskSpec, WorldState};
pub use trainer::{CheckpointRecord, CheckpointRegistry, TrainConfig};
