use std::collections::HashMap;

use super::params::{gradients, GradientSet, ParameterSet};
use super::tape::{Graph, Var};
use super::{EncoderConfig, EncoderVariant, NetConfig, NetError, NoiseNetConfig, NoiseNetVariant, NumericArray};
use crate::data::{NormalizationStats, Observation, OBS_DIM};
use crate::sim::Raster;

pub const STEP_EMBED_DIM: usize = 32;
const POOLED_SIDE: usize = 4;
const PYRAMID_LEVELS: usize = 3;

pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
    pub zero: bool,
}

fn dense(out: &mut Vec<ParamSpec>, name: &str, fan_in: usize, width: usize, zero: bool) {
    out.push(ParamSpec { name: format!("{name}.w"), shape: vec![fan_in, width], fan_in, zero });
    out.push(ParamSpec { name: format!("{name}.b"), shape: vec![width], fan_in, zero });
}

fn image_dims(cfg: &EncoderConfig) -> Vec<usize> {
    match cfg.variant {
        EncoderVariant::Small | EncoderVariant::Large => vec![2 * 3 * POOLED_SIDE * POOLED_SIDE],
        EncoderVariant::Pyramid => (0..PYRAMID_LEVELS).map(|s| 2 * 3 * (cfg.resolution >> s).pow(2)).collect(),
    }
}

pub(crate) fn param_layout(config: &NetConfig) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    let e = &config.encoder;
    let img: usize = image_dims(e).iter().sum();
    match e.variant {
        EncoderVariant::Small => {
            dense(&mut out, "enc.l0", OBS_DIM + img, e.width, false);
            dense(&mut out, "enc.l1", e.width, e.embedding_dim, false);
        }
        EncoderVariant::Large => {
            let w = 2 * e.width;
            dense(&mut out, "enc.l0", OBS_DIM + img, w, false);
            dense(&mut out, "enc.l1", w, w, false);
            dense(&mut out, "enc.l2", w, w, false);
            dense(&mut out, "enc.l3", w, e.embedding_dim, false);
        }
        EncoderVariant::Pyramid => {
            dense(&mut out, "enc.low", OBS_DIM, e.width, false);
            for (s, d) in image_dims(e).into_iter().enumerate() {
                dense(&mut out, &format!("enc.s{s}"), d, e.width, false);
            }
            dense(&mut out, "enc.fuse", (PYRAMID_LEVELS + 1) * e.width, e.embedding_dim, false);
        }
    }
    let n = &config.noise_net;
    let h = n.hidden_dim;
    dense(&mut out, "noise.cond0", e.embedding_dim + STEP_EMBED_DIM, h, false);
    dense(&mut out, "noise.cond1", h, h, false);
    dense(&mut out, "noise.in", n.action_dim, h, false);
    match n.variant {
        NoiseNetVariant::TemporalConv => {
            for d in 0..n.depth {
                dense(&mut out, &format!("noise.conv{d}"), 3 * h, h, false);
                dense(&mut out, &format!("noise.film{d}"), h, h, false);
            }
        }
        NoiseNetVariant::Attention => {
            out.push(ParamSpec { name: "noise.pos".into(), shape: vec![n.horizon, h], fan_in: h, zero: false });
            for d in 0..n.depth {
                dense(&mut out, &format!("noise.film{d}"), h, h, false);
                for part in ["q", "k", "v", "o", "ff1", "ff2"] {
                    dense(&mut out, &format!("noise.blk{d}.{part}"), h, h, false);
                }
            }
        }
    }
    dense(&mut out, "noise.out", h, n.action_dim, true);
    out
}

/// Recording forward pass over one parameter set.
pub struct Forward<'p> {
    pub graph: Graph<'p>,
    params: &'p ParameterSet,
    bound: HashMap<String, Var>,
}

impl<'p> Forward<'p> {
    pub fn new(params: &'p ParameterSet) -> Self {
        Self { graph: Graph::new(), params, bound: HashMap::new() }
    }

    pub fn param(&mut self, name: &str) -> Result<Var, NetError> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let a = self.params.get(name).ok_or_else(|| NetError::Config(format!("missing parameter {name}")))?;
        let v = self.graph.param(name, a);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    fn dense(&mut self, x: Var, prefix: &str) -> Result<Var, NetError> {
        let w = self.param(&format!("{prefix}.w"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        self.graph.linear(x, w, b)
    }

    pub fn value(&self, v: Var) -> &NumericArray {
        self.graph.value(v)
    }

    /// Reverse pass; gradients for every parameter in the set.
    pub fn gradients(&self, loss: Var) -> Result<GradientSet, NetError> {
        let adj = self.graph.backward(loss)?;
        Ok(gradients(&self.graph, &adj, self.params))
    }
}

/// Per-observation encoder input: normalized low-dimensional vector and the
/// variant's pooled raster features.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderInput {
    pub low_dim: Vec<f64>,
    pub image: Vec<f64>,
}

fn pool(r: &Raster, factor: usize, out: &mut Vec<f64>) {
    let n = r.resolution / factor;
    let inv = 1.0 / (factor * factor) as f64;
    for row in 0..n {
        for col in 0..n {
            let mut acc = [0.0f64; 3];
            for dr in 0..factor {
                for dc in 0..factor {
                    let p = r.pixel(row * factor + dr, col * factor + dc);
                    acc.iter_mut().zip(p).for_each(|(a, v)| *a += v as f64);
                }
            }
            out.extend(acc.iter().map(|a| a * inv));
        }
    }
}

pub fn encoder_input(cfg: &EncoderConfig, obs: &Observation, stats: &NormalizationStats) -> Result<EncoderInput, NetError> {
    for (name, r) in [("global_view", &obs.global_view), ("wrist_view", &obs.wrist_view)] {
        if r.resolution != cfg.resolution || r.data.len() != r.resolution * r.resolution * 3 {
            return Err(NetError::Shape(format!(
                "{name}: raster resolution {} with {} values, encoder expects {}",
                r.resolution,
                r.data.len(),
                cfg.resolution
            )));
        }
    }
    let low = obs.low_dim();
    if stats.obs_mean.len() != low.len() {
        return Err(NetError::Shape(format!("low_dim: {} values, normalization stats hold {}", low.len(), stats.obs_mean.len())));
    }
    let mut image = Vec::with_capacity(image_dims(cfg).iter().sum());
    match cfg.variant {
        EncoderVariant::Small | EncoderVariant::Large => {
            for r in [&obs.global_view, &obs.wrist_view] {
                pool(r, cfg.resolution / POOLED_SIDE, &mut image);
            }
        }
        EncoderVariant::Pyramid => {
            for s in 0..PYRAMID_LEVELS {
                for r in [&obs.global_view, &obs.wrist_view] {
                    pool(r, 1 << s, &mut image);
                }
            }
        }
    }
    Ok(EncoderInput { low_dim: stats.normalize_obs(&low), image })
}

fn stack(rows: &[&[f64]], what: &str, width: usize) -> Result<NumericArray, NetError> {
    let mut data = Vec::with_capacity(rows.len() * width);
    for (i, r) in rows.iter().enumerate() {
        if r.len() != width {
            return Err(NetError::Shape(format!("{what} of batch item {i}: {} values, expected {width}", r.len())));
        }
        data.extend_from_slice(r);
    }
    NumericArray::new(vec![rows.len(), width], data)
}

/// Observation embedding, shape [B, embedding_dim].
pub fn encode(f: &mut Forward<'_>, cfg: &EncoderConfig, batch: &[&EncoderInput]) -> Result<Var, NetError> {
    if batch.is_empty() {
        return Err(NetError::Shape("encode: empty batch".into()));
    }
    let dims = image_dims(cfg);
    let lows: Vec<&[f64]> = batch.iter().map(|b| b.low_dim.as_slice()).collect();
    let low = f.graph.input(stack(&lows, "low_dim", OBS_DIM)?);
    let total: usize = dims.iter().sum();
    for (i, b) in batch.iter().enumerate() {
        if b.image.len() != total {
            return Err(NetError::Shape(format!("image of batch item {i}: {} values, expected {total}", b.image.len())));
        }
    }
    match cfg.variant {
        EncoderVariant::Small | EncoderVariant::Large => {
            let imgs: Vec<&[f64]> = batch.iter().map(|b| b.image.as_slice()).collect();
            let img = f.graph.input(stack(&imgs, "image", total)?);
            let mut h = f.graph.concat(&[low, img])?;
            let layers = if cfg.variant == EncoderVariant::Small { 2 } else { 4 };
            for l in 0..layers {
                h = f.dense(h, &format!("enc.l{l}"))?;
                if l + 1 < layers {
                    h = f.graph.silu(h);
                }
            }
            Ok(h)
        }
        EncoderVariant::Pyramid => {
            let mut parts = vec![f.dense(low, "enc.low")?];
            let mut off = 0;
            for (s, d) in dims.iter().enumerate() {
                let rows: Vec<&[f64]> = batch.iter().map(|b| &b.image[off..off + d]).collect();
                let x = f.graph.input(stack(&rows, "pyramid level", *d)?);
                parts.push(f.dense(x, &format!("enc.s{s}"))?);
                off += d;
            }
            let c = f.graph.concat(&parts)?;
            let c = f.graph.silu(c);
            f.dense(c, "enc.fuse")
        }
    }
}

/// Interleaved sin/cos embedding of a diffusion step, base 10^4.
pub fn step_embedding(t: usize, dim: usize) -> Vec<f64> {
    let mut e = vec![0.0; dim];
    for i in 0..dim / 2 {
        let w = 10_000f64.powf(-((2 * i) as f64) / dim as f64);
        e[2 * i] = (t as f64 * w).sin();
        e[2 * i + 1] = (t as f64 * w).cos();
    }
    e
}

/// Predicted noise for `noisy` laid out as [B*H, action_dim] (rows grouped by
/// batch item), shape equal to the input.
pub fn predict_noise(
    f: &mut Forward<'_>,
    cfg: &NoiseNetConfig,
    noisy: Var,
    steps: &[usize],
    t_max: usize,
    embedding: Var,
) -> Result<Var, NetError> {
    let b = steps.len();
    let h = cfg.horizon;
    if f.graph.shape(noisy) != [b * h, cfg.action_dim] {
        return Err(NetError::Shape(format!(
            "noisy actions {:?}, expected [{}, {}]",
            f.graph.shape(noisy),
            b * h,
            cfg.action_dim
        )));
    }
    if f.graph.shape(embedding).first() != Some(&b) {
        return Err(NetError::Shape(format!("embedding {:?} for batch of {b}", f.graph.shape(embedding))));
    }
    if let Some(&step) = steps.iter().find(|&&s| s == 0 || s > t_max) {
        return Err(NetError::Step { step, t_max });
    }
    let temb: Vec<f64> = steps.iter().flat_map(|&t| step_embedding(t, STEP_EMBED_DIM)).collect();
    let temb = f.graph.input(NumericArray::new(vec![b, STEP_EMBED_DIM], temb)?);
    let c = f.graph.concat(&[embedding, temb])?;
    let c = f.dense(c, "noise.cond0")?;
    let c = f.graph.silu(c);
    let cond = f.dense(c, "noise.cond1")?;

    let mut x = f.dense(noisy, "noise.in")?;
    match cfg.variant {
        NoiseNetVariant::TemporalConv => {
            for d in 0..cfg.depth {
                let u = f.graph.unfold3(x, h)?;
                let conv = f.dense(u, &format!("noise.conv{d}"))?;
                let film = f.dense(cond, &format!("noise.film{d}"))?;
                let film = f.graph.repeat_rows(film, h)?;
                let pre = f.graph.add(conv, film)?;
                let act = f.graph.silu(pre);
                x = f.graph.add(x, act)?;
            }
        }
        NoiseNetVariant::Attention => {
            let pos = f.param("noise.pos")?;
            let pos = f.graph.tile_rows(pos, b)?;
            x = f.graph.add(x, pos)?;
            for d in 0..cfg.depth {
                let film = f.dense(cond, &format!("noise.film{d}"))?;
                let film = f.graph.repeat_rows(film, h)?;
                x = f.graph.add(x, film)?;
                let q = f.dense(x, &format!("noise.blk{d}.q"))?;
                let k = f.dense(x, &format!("noise.blk{d}.k"))?;
                let v = f.dense(x, &format!("noise.blk{d}.v"))?;
                let a = f.graph.attention(q, k, v, h)?;
                let o = f.dense(a, &format!("noise.blk{d}.o"))?;
                x = f.graph.add(x, o)?;
                let ff = f.dense(x, &format!("noise.blk{d}.ff1"))?;
                let ff = f.graph.silu(ff);
                let ff = f.dense(ff, &format!("noise.blk{d}.ff2"))?;
                x = f.graph.add(x, ff)?;
            }
        }
    }
    let x = f.graph.silu(x);
    f.dense(x, "noise.out")
}
