//! Versioned checkpoint container.
//!
//! Layout: `"SGCK"`, u32 version, u32 header length, JSON header, then the
//! float32 little-endian payload: every parameter in header order followed
//! by every stored momentum buffer in header order. Header keys are emitted
//! in a fixed order so equal states produce equal bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::optim::{OptimizerState, SgdConfig};
use super::params::{Component, ParameterSet};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SGCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub component: Component,
    pub rows: usize,
    pub cols: usize,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerEntry {
    pub config: SgdConfig,
    pub epoch: usize,
    pub lr: f64,
    /// Names of parameters with a momentum buffer, in payload order.
    pub momentum: Vec<String>,
}

/// Serializable position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Checkpoint("malformed rng state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse::<u128>().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    params: Vec<ParamEntry>,
    optimizer: Option<OptimizerEntry>,
    rng: Option<RngState>,
    meta: serde_json::Value,
}

/// Everything a checkpoint holds, at precision `T`.
#[derive(Clone, Debug)]
pub struct Checkpoint<T: Real> {
    pub params: ParameterSet<T>,
    pub optimizer: Option<OptimizerState<T>>,
    pub rng: Option<RngState>,
    pub meta: serde_json::Value,
}

impl<T: Real> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params: Vec<ParamEntry> = self
            .params
            .iter()
            .map(|(_, p)| ParamEntry {
                name: p.name.clone(),
                component: p.component,
                rows: p.value.rows(),
                cols: p.value.cols(),
                trainable: p.trainable,
            })
            .collect();
        let mut momentum_payload: Vec<&Tensor<T>> = Vec::new();
        let optimizer = self.optimizer.as_ref().map(|o| {
            let mut names = Vec::new();
            for (id, p) in self.params.iter() {
                if let Some(Some(buf)) = o.momentum.get(id.index()) {
                    names.push(p.name.clone());
                    momentum_payload.push(buf);
                }
            }
            OptimizerEntry {
                config: o.config.clone(),
                epoch: o.epoch,
                lr: o.lr,
                momentum: names,
            }
        });
        let header = Header {
            params,
            optimizer,
            rng: self.rng.clone(),
            meta: self.meta.clone(),
        };
        let hjson = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(12 + hjson.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(hjson.len() as u32).to_le_bytes());
        out.extend_from_slice(&hjson);
        for (_, p) in self.params.iter() {
            push_f32(&mut out, &p.value);
        }
        for buf in momentum_payload {
            push_f32(&mut out, buf);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(err("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let hend = 12usize.checked_add(hlen).ok_or_else(|| err("header length"))?;
        if bytes.len() < hend {
            return Err(err("truncated header"));
        }
        let header: Header = serde_json::from_slice(&bytes[12..hend])?;
        let mut cursor = hend;
        let mut take = |rows: usize, cols: usize| -> Result<Tensor<T>> {
            let n = rows * cols;
            let end = cursor + 4 * n;
            if bytes.len() < end {
                return Err(err("truncated payload"));
            }
            let data = bytes[cursor..end]
                .chunks_exact(4)
                .map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect();
            cursor = end;
            Tensor::from_vec(rows, cols, data)
        };
        let mut params = ParameterSet::new();
        for e in &header.params {
            let t = take(e.rows, e.cols)?;
            params.add(e.name.clone(), e.component, t, e.trainable)?;
        }
        let optimizer = match header.optimizer {
            None => None,
            Some(o) => {
                let mut st = OptimizerState::new(o.config, params.len())?;
                st.epoch = o.epoch;
                st.lr = o.lr;
                for name in &o.momentum {
                    let id = params
                        .id(name)
                        .ok_or_else(|| Error::Checkpoint(format!("momentum for unknown {name}")))?;
                    let (r, c) = params.get(id).value.shape();
                    st.momentum[id.index()] = Some(take(r, c)?);
                }
                Some(st)
            }
        };
        if cursor != bytes.len() {
            return Err(err("trailing bytes"));
        }
        Ok(Self {
            params,
            optimizer,
            rng: header.rng,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn push_f32<T: Real>(out: &mut Vec<u8>, t: &Tensor<T>) {
    for &v in t.data() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
}
