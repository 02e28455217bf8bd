use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::nets::param_layout;
use super::tape::{Graph, Var};
use super::{Adjoints, NetConfig, NetError, NumericArray};

pub const PARAMS_FORMAT: &str = "imlw-params-v1";

/// Named arrays iterated in lexicographic name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    arrays: BTreeMap<String, NumericArray>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    config_hash: String,
    entries: Vec<HeaderEntry>,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, a: NumericArray) -> Result<(), NetError> {
        if self.arrays.contains_key(name) {
            return Err(NetError::Config(format!("duplicate parameter {name}")));
        }
        self.arrays.insert(name.to_string(), a);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&NumericArray> {
        self.arrays.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut NumericArray> {
        self.arrays.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NumericArray)> {
        self.arrays.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut NumericArray)> {
        self.arrays.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.arrays.keys()
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    /// Total scalar count.
    pub fn size(&self) -> usize {
        self.arrays.values().map(|a| a.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.arrays.values().all(|a| a.is_finite())
    }

    /// Same names and shapes as `other`.
    pub fn same_layout(&self, other: &ParameterSet) -> bool {
        self.arrays.len() == other.arrays.len()
            && self.arrays.iter().zip(&other.arrays).all(|((n1, a1), (n2, a2))| n1 == n2 && a1.shape == a2.shape)
    }

    pub fn zeros_like(&self) -> ParameterSet {
        ParameterSet { arrays: self.arrays.iter().map(|(n, a)| (n.clone(), NumericArray::zeros(&a.shape))).collect() }
    }

    pub fn write_to(&self, config_hash: &str, w: &mut impl Write) -> Result<(), NetError> {
        let mut offset = 0;
        let entries = self
            .arrays
            .iter()
            .map(|(name, a)| {
                let e = HeaderEntry { name: name.clone(), shape: a.shape.clone(), offset };
                offset += a.len();
                e
            })
            .collect();
        let header = Header { format: PARAMS_FORMAT.into(), config_hash: config_hash.into(), entries };
        let json = serde_json::to_vec(&header).map_err(|e| NetError::Format(e.to_string()))?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        w.write_all(&(offset as u64).to_le_bytes())?;
        for a in self.arrays.values() {
            for v in &a.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self, config_hash: &str) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.size() * 8);
        self.write_to(config_hash, &mut out).expect("writing to a Vec cannot fail");
        out
    }

    /// Reads a parameter block, returning it with its recorded config hash.
    pub fn read_from(r: &mut impl Read) -> Result<(ParameterSet, String), NetError> {
        let mut len = [0u8; 8];
        let read_exact = |r: &mut dyn Read, buf: &mut [u8]| {
            r.read_exact(buf).map_err(|e| NetError::Format(format!("truncated parameter block: {e}")))
        };
        read_exact(r, &mut len)?;
        let hlen = u64::from_le_bytes(len) as usize;
        if hlen > 1 << 26 {
            return Err(NetError::Format(format!("implausible header length {hlen}")));
        }
        let mut json = vec![0u8; hlen];
        read_exact(r, &mut json)?;
        let header: Header = serde_json::from_slice(&json).map_err(|e| NetError::Format(e.to_string()))?;
        if header.format != PARAMS_FORMAT {
            return Err(NetError::Format(format!("format {:?}, expected {PARAMS_FORMAT:?}", header.format)));
        }
        read_exact(r, &mut len)?;
        let count = u64::from_le_bytes(len) as usize;
        let mut expected = 0;
        for e in &header.entries {
            if e.offset != expected {
                return Err(NetError::Format(format!("offset table broken at {}", e.name)));
            }
            expected += e.shape.iter().product::<usize>();
        }
        if expected != count {
            return Err(NetError::Format(format!("payload holds {count} values, header describes {expected}")));
        }
        let mut payload = vec![0u8; count * 8];
        read_exact(r, &mut payload)?;
        let values: Vec<f64> = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let mut set = ParameterSet::new();
        for e in header.entries {
            let n: usize = e.shape.iter().product();
            set.insert(&e.name, NumericArray::new(e.shape, values[e.offset..e.offset + n].to_vec())?)?;
        }
        Ok((set, header.config_hash))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(ParameterSet, String), NetError> {
        let mut cur = bytes;
        let out = Self::read_from(&mut cur)?;
        if !cur.is_empty() {
            return Err(NetError::Format(format!("{} trailing bytes", cur.len())));
        }
        Ok(out)
    }
}

/// Uniform initialization with bound 1/sqrt(fan_in); output heads start at zero.
pub fn init_params(config: &NetConfig, seed: u64) -> Result<ParameterSet, NetError> {
    config.validate()?;
    let mut rng = crate::rng::stream(seed, &[crate::rng::label_key("init_params")]);
    let mut set = ParameterSet::new();
    for spec in param_layout(config) {
        let n: usize = spec.shape.iter().product();
        let data = if spec.zero {
            vec![0.0; n]
        } else {
            let bound = 1.0 / (spec.fan_in as f64).sqrt();
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        set.insert(&spec.name, NumericArray::new(spec.shape, data)?)?;
    }
    Ok(set)
}

/// Gradients keyed like the parameter set, plus the names whose gradient is
/// zero because the parameter never reached the loss.
#[derive(Debug, Clone)]
pub struct GradientSet {
    pub grads: ParameterSet,
    pub unreached: Vec<String>,
}

pub fn gradients(graph: &Graph<'_>, adjoints: &Adjoints, params: &ParameterSet) -> GradientSet {
    let bound: BTreeMap<&str, Var> = graph.params().iter().map(|(n, v)| (n.as_str(), *v)).collect();
    let mut grads = ParameterSet::new();
    let mut unreached = Vec::new();
    for (name, a) in params.iter() {
        let g = bound.get(name.as_str()).and_then(|v| adjoints.get(*v));
        match g {
            Some(g) => grads.arrays.insert(name.clone(), g.clone()),
            None => {
                unreached.push(name.clone());
                grads.arrays.insert(name.clone(), NumericArray::zeros(&a.shape))
            }
        };
    }
    GradientSet { grads, unreached }
}
