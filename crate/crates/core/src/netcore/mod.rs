//! Numeric core: arrays, a reverse-mode tape, perception encoders and
//! noise-prediction networks.

pub mod array;
mod nets;
mod params;
pub mod tape;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use array::NumericArray;
pub use nets::{encode, encoder_input, predict_noise, step_embedding, EncoderInput, Forward, STEP_EMBED_DIM};
pub use params::{gradients, init_params, GradientSet, ParameterSet, PARAMS_FORMAT};
pub use tape::{Adjoints, Graph, Var};

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("diffusion step {step} outside [1, {t_max}]")]
    Step { step: usize, t_max: usize },
    #[error("parameter format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EncoderVariant {
    #[serde(rename = "enc-small")]
    Small,
    #[serde(rename = "enc-large")]
    Large,
    #[serde(rename = "enc-pyramid")]
    Pyramid,
}

impl EncoderVariant {
    pub const ALL: [EncoderVariant; 3] = [Self::Small, Self::Large, Self::Pyramid];

    pub fn name(self) -> &'static str {
        match self {
            Self::Small => "enc-small",
            Self::Large => "enc-large",
            Self::Pyramid => "enc-pyramid",
        }
    }
}

impl std::str::FromStr for EncoderVariant {
    type Err = NetError;
    fn from_str(s: &str) -> Result<Self, NetError> {
        Self::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| NetError::Config(format!("unknown encoder variant {s:?}")))
    }
}

impl std::fmt::Display for EncoderVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NoiseNetVariant {
    #[serde(rename = "temporal-conv")]
    TemporalConv,
    #[serde(rename = "attention")]
    Attention,
}

impl NoiseNetVariant {
    pub const ALL: [NoiseNetVariant; 2] = [Self::TemporalConv, Self::Attention];

    pub fn name(self) -> &'static str {
        match self {
            Self::TemporalConv => "temporal-conv",
            Self::Attention => "attention",
        }
    }
}

impl std::str::FromStr for NoiseNetVariant {
    type Err = NetError;
    fn from_str(s: &str) -> Result<Self, NetError> {
        Self::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| NetError::Config(format!("unknown noise-net variant {s:?}")))
    }
}

impl std::fmt::Display for NoiseNetVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub variant: EncoderVariant,
    pub embedding_dim: usize,
    /// Expected raster resolution of both cameras.
    pub resolution: usize,
    /// Hidden width; enc-large doubles it.
    pub width: usize,
}

impl EncoderConfig {
    pub fn new(variant: EncoderVariant) -> Self {
        Self { variant, embedding_dim: 64, resolution: 16, width: 128 }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if ![16, 24, 32].contains(&self.resolution) {
            return Err(NetError::Config(format!("encoder resolution {} not in {{16, 24, 32}}", self.resolution)));
        }
        if self.embedding_dim == 0 || self.width == 0 {
            return Err(NetError::Config("encoder widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseNetConfig {
    pub variant: NoiseNetVariant,
    pub hidden_dim: usize,
    pub depth: usize,
    pub horizon: usize,
    pub action_dim: usize,
}

impl NoiseNetConfig {
    pub fn new(variant: NoiseNetVariant) -> Self {
        Self { variant, hidden_dim: 128, depth: 3, horizon: 8, action_dim: crate::data::ACTION_DIM }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.horizon == 0 {
            return Err(NetError::Config("action horizon must be at least 1".into()));
        }
        if self.hidden_dim == 0 || self.action_dim == 0 {
            return Err(NetError::Config("noise-net widths must be positive".into()));
        }
        Ok(())
    }
}

/// Encoder plus noise network; the unit parameters are initialized for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub encoder: EncoderConfig,
    pub noise_net: NoiseNetConfig,
}

impl NetConfig {
    pub fn new(encoder: EncoderVariant, noise_net: NoiseNetVariant) -> Self {
        Self { encoder: EncoderConfig::new(encoder), noise_net: NoiseNetConfig::new(noise_net) }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        self.encoder.validate()?;
        self.noise_net.validate()
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}
