//! Single-file parameter checkpoints: magic `PTCK`, u32 version, u32 header
//! length, a JSON header, then every tensor as little-endian `f32` in header
//! order.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Head, LinearHead, ModelConfig, PathPt, PromptBank, SpatialParams};
use crate::error::{Error, Result};
use crate::optim::Parameters;

const MAGIC: &[u8; 4] = b"PTCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub dim: usize,
    pub num_classes: usize,
    pub token_dim: usize,
    pub config: ModelConfig,
    pub context_lengths: Vec<usize>,
    pub class_token_lengths: Vec<usize>,
    pub tensors: Vec<TensorEntry>,
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl PathPt {
    fn frozen_tensors(&self) -> Vec<(String, Vec<f64>)> {
        match &self.head {
            Head::Prompt(b) => b
                .class_tokens
                .iter()
                .enumerate()
                .map(|(j, t)| (format!("frozen.class_tokens.{j}"), t.iter().copied().collect()))
                .collect(),
            Head::Linear(_) => Vec::new(),
        }
    }

    fn header(&self, dim: usize) -> CheckpointHeader {
        let (context_lengths, class_token_lengths, token_dim) = match &self.head {
            Head::Prompt(b) => {
                (b.context_lengths(), b.class_tokens.iter().map(|t| t.nrows()).collect(), b.class_tokens[0].ncols())
            }
            Head::Linear(_) => (Vec::new(), Vec::new(), 0),
        };
        let mut tensors: Vec<TensorEntry> =
            self.snapshot().into_iter().map(|(name, v)| TensorEntry { name, len: v.len() }).collect();
        tensors.extend(self.frozen_tensors().into_iter().map(|(name, v)| TensorEntry { name, len: v.len() }));
        CheckpointHeader {
            dim,
            num_classes: self.num_classes(),
            token_dim,
            config: self.config.clone(),
            context_lengths,
            class_token_lengths,
            tensors,
        }
    }

    fn feature_dim(&self) -> usize {
        match (&self.spatial, &self.head) {
            (Some(s), _) => s.dim(),
            (None, Head::Linear(l)) => l.weight.ncols(),
            (None, Head::Prompt(_)) => 0,
        }
    }

    /// Writes the checkpoint. `dim` is recorded for models whose tensors do
    /// not determine it (prompt head without spatial module).
    pub fn save(&self, path: impl AsRef<Path>, dim: usize) -> Result<()> {
        let own = self.feature_dim();
        if own != 0 && own != dim {
            return Err(ckpt_err(format!("model width {own} does not match declared width {dim}")));
        }
        let header = serde_json::to_vec(&self.header(dim))?;
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
        buf.extend_from_slice(&header);
        let mut push = |v: &[f64]| v.iter().for_each(|x| buf.extend_from_slice(&(*x as f32).to_le_bytes()));
        self.visit(&mut |_, v| push(v));
        for (_, v) in self.frozen_tensors() {
            push(&v);
        }
        fs::write(path, buf)?;
        Ok(())
    }

    /// Reads a checkpoint and checks it against the expected feature width
    /// and class count.
    pub fn load(path: impl AsRef<Path>, dim: usize, num_classes: usize) -> Result<Self> {
        let bytes = fs::read(path)?;
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(ckpt_err("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(ckpt_err(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = bytes.get(12..12 + hlen).ok_or_else(|| ckpt_err("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body)?;
        if header.dim != dim {
            return Err(ckpt_err(format!("checkpoint width {} != expected {dim}", header.dim)));
        }
        if header.num_classes != num_classes {
            return Err(ckpt_err(format!("checkpoint has {} classes, expected {num_classes}", header.num_classes)));
        }

        let mut model = skeleton(&header)?;
        let expected = model.header(dim).tensors;
        if expected != header.tensors {
            return Err(ckpt_err("tensor list does not match the declared shapes"));
        }
        let total: usize = header.tensors.iter().map(|t| t.len).sum();
        let data = &bytes[12 + hlen..];
        if data.len() != total * 4 {
            return Err(ckpt_err(format!("expected {} data bytes, found {}", total * 4, data.len())));
        }
        let mut values = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64);
        model.visit_mut(&mut |_, p| p.iter_mut().for_each(|x| *x = values.next().expect("length checked")));
        if let Head::Prompt(b) = &mut model.head {
            for t in &mut b.class_tokens {
                t.iter_mut().for_each(|x| *x = values.next().expect("length checked"));
            }
        }
        Ok(model)
    }
}

fn skeleton(h: &CheckpointHeader) -> Result<PathPt> {
    h.config.validate()?;
    let spatial = if h.config.use_spatial {
        Some(SpatialParams::new(h.dim, h.config.heads, &mut ChaCha8Rng::seed_from_u64(0))?)
    } else {
        None
    };
    let head = if h.config.use_learnable_prompts {
        if h.context_lengths.len() != h.num_classes || h.class_token_lengths.len() != h.num_classes {
            return Err(ckpt_err("prompt lengths do not cover every class"));
        }
        Head::Prompt(PromptBank {
            contexts: h.context_lengths.iter().map(|&k| Array2::zeros((k, h.token_dim))).collect(),
            class_tokens: h.class_token_lengths.iter().map(|&k| Array2::zeros((k, h.token_dim))).collect(),
        })
    } else {
        Head::Linear(LinearHead { weight: Array2::zeros((h.num_classes, h.dim)), bias: Array1::zeros(h.num_classes) })
    };
    Ok(PathPt { config: h.config.clone(), spatial, head })
}
