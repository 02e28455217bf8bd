//! Fixtures shared by the criterion benches.

use imlw_core::data::{NormalizationStats, ACTION_DIM, OBS_DIM};
use imlw_core::diffusion::{DiffusionSchedule, PolicyBundle};
use imlw_core::netcore::{init_params, EncoderVariant, NetConfig, NoiseNetVariant};
use imlw_core::sim::TaskLibrary;
use imlw_core::{CameraConfig, Observation, TaskSpec, WorldState};

pub fn pick_place() -> (TaskSpec, WorldState) {
    let task = TaskLibrary::builtin().task("PickPlace").expect("builtin task").clone();
    let world = WorldState::init(&task, &task.cases[0], 7).expect("valid case");
    (task, world)
}

/// Freshly initialized bundle with identity normalization.
pub fn bundle(encoder: EncoderVariant, noise_net: NoiseNetVariant) -> PolicyBundle {
    let net = NetConfig::new(encoder, noise_net);
    let params = init_params(&net, 0).expect("valid net");
    PolicyBundle::new(net, params, DiffusionSchedule::default_linear(), NormalizationStats::identity(OBS_DIM, ACTION_DIM), 4).expect("valid bundle")
}

pub fn observation(world: &WorldState) -> Observation {
    Observation::capture(world, &CameraConfig::default_pair(16))
}
