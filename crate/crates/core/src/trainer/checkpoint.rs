//! Binary checkpoints: a JSON header followed by little-endian f32 tensors.
//!
//! Layout: `UVSQCKPT`, u32 version, u64 header length, header JSON, then the
//! tensors listed in the header, back to back.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AdamState, TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::muvnet::{Model, ModelConfig};
use crate::nn::ParamStore;

const MAGIC: &[u8; 8] = b"UVSQCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    key: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    step: u64,
    rng: ChaCha8Rng,
    labels: Vec<String>,
    tensors: Vec<TensorEntry>,
}

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub labels: Vec<String>,
    pub params: ParamStore<f32>,
    pub ema: ParamStore<f32>,
    pub adam: AdamState,
}

const SECTIONS: [&str; 4] = ["params", "ema", "adam_m", "adam_v"];

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let stores: [Vec<&[f32]>; 4] = [
            self.params.params.iter().map(|p| p.data.as_slice()).collect(),
            self.ema.params.iter().map(|p| p.data.as_slice()).collect(),
            self.adam.m.iter().map(Vec::as_slice).collect(),
            self.adam.v.iter().map(Vec::as_slice).collect(),
        ];
        let mut tensors = Vec::new();
        for section in SECTIONS {
            for p in &self.params.params {
                tensors.push(TensorEntry {
                    key: format!("{section}/{}/{}", p.group.name(), p.name),
                    shape: p.shape.clone(),
                });
            }
        }
        let header = Header {
            model: self.model.clone(),
            train: self.train.clone(),
            step: self.step,
            rng: self.rng.clone(),
            labels: self.labels.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::data(e.to_string()))?;
        let mut buf = Vec::with_capacity(json.len() + 4 * 4 * self.params.numel() + 32);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for store in &stores {
            for t in store {
                for v in *t {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        fs::File::create(&tmp)?.write_all(&buf)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?
            .read_to_end(&mut bytes)?;
        let bad = |m: &str| Error::data(format!("{}: {m}", path.display()));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
        let (_, mut template) = Model::new(header.model.clone(), 0)?;
        let n = template.len();
        if header.tensors.len() != SECTIONS.len() * n {
            return Err(bad("tensor count does not match the model configuration"));
        }
        let mut data = &bytes[20 + hlen..];
        let mut sections: Vec<Vec<Vec<f32>>> = Vec::with_capacity(SECTIONS.len());
        for (s, section) in SECTIONS.iter().enumerate() {
            let mut tensors = Vec::with_capacity(n);
            for (i, p) in template.params.iter().enumerate() {
                let entry = &header.tensors[s * n + i];
                let key = format!("{section}/{}/{}", p.group.name(), p.name);
                if entry.key != key || entry.shape != p.shape {
                    return Err(bad(&format!("tensor {} ({:?}) where {key} ({:?}) expected", entry.key, entry.shape, p.shape)));
                }
                let len = p.data.len() * 4;
                if data.len() < len {
                    return Err(bad("truncated tensor data"));
                }
                tensors.push(data[..len].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect());
                data = &data[len..];
            }
            sections.push(tensors);
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }
        let v = sections.pop().expect("4 sections");
        let m = sections.pop().expect("4 sections");
        let ema_data = sections.pop().expect("4 sections");
        let param_data = sections.pop().expect("4 sections");
        let mut ema = template.clone();
        for (p, d) in ema.params.iter_mut().zip(ema_data) {
            p.data = d;
        }
        for (p, d) in template.params.iter_mut().zip(param_data) {
            p.data = d;
        }
        Ok(Checkpoint {
            model: header.model,
            train: header.train,
            step: header.step,
            rng: header.rng,
            labels: header.labels,
            params: template,
            ema,
            adam: AdamState { m, v },
        })
    }

    /// Fails with a field-by-field diff unless the stored model configuration
    /// equals `expected`.
    pub fn check_model(&self, expected: &ModelConfig) -> Result<()> {
        let diff = config_diff(expected, &self.model);
        if diff.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigMismatch(diff.join("\n")))
        }
    }
}

/// `field: expected X, checkpoint has Y` lines for every differing field.
pub fn config_diff(expected: &ModelConfig, found: &ModelConfig) -> Vec<String> {
    let to_map = |c: &ModelConfig| match serde_json::to_value(c) {
        Ok(serde_json::Value::Object(m)) => m,
        _ => unreachable!("model config serializes to an object"),
    };
    let (a, b) = (to_map(expected), to_map(found));
    a.iter()
        .filter(|(k, v)| b.get(*k) != Some(v))
        .map(|(k, v)| format!("  {k}: expected {v}, checkpoint has {}", b.get(k).map_or("nothing".into(), |x| x.to_string())))
        .collect()
}

/// Parameter names and shapes of `got` must equal those of `expected`.
pub fn check_layout(expected: &ParamStore<f32>, got: &ParamStore<f32>) -> Result<()> {
    if expected.len() != got.len() {
        return Err(Error::ConfigMismatch(format!(
            "  parameter count: expected {}, got {}",
            expected.len(),
            got.len()
        )));
    }
    for (e, g) in expected.params.iter().zip(&got.params) {
        if e.name != g.name || e.shape != g.shape || e.group != g.group {
            return Err(Error::ConfigMismatch(format!(
                "  {} {:?}: got {} {:?}",
                e.name, e.shape, g.name, g.shape
            )));
        }
    }
    Ok(())
}

impl Trainer {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.cfg.clone(),
            train: self.cfg.clone(),
            step: self.step,
            rng: self.rng.clone(),
            labels: self.labels.clone(),
            params: self.params.clone(),
            ema: self.ema.clone(),
            adam: self.adam.clone(),
        }
    }

    /// Restores the full training state. `train` replaces the stored
    /// configuration, so a run can be extended with a larger step budget.
    pub fn resume(ckpt: Checkpoint, train: Option<TrainConfig>) -> Result<Self> {
        let cfg = train.unwrap_or_else(|| ckpt.train.clone());
        let mut t = Trainer::new(ckpt.model.clone(), cfg.clone(), Some(ckpt.params), ckpt.labels)?;
        t.ema = ckpt.ema;
        t.adam = ckpt.adam;
        t.rng = ckpt.rng;
        t.step = ckpt.step;
        Ok(t)
    }
}
