//! Joint spatio-temporal causal denoiser over (residue, frame) tokens.

pub mod features;
mod model;
pub mod rope;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use model::{adaln, edge_transition, forward, AttentionMask, ForwardOutput, KvCache, Segment, Slot};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub model_dim: usize,
    pub heads: usize,
    pub st_layers: usize,
    pub blocks: usize,
    pub pair_dim: usize,
    pub rope_2d: bool,
    pub rope_base: f64,
    /// Pair features feed attention logits; off ablates the bias path.
    pub pair_bias: bool,
    /// Nearest-neighbour distances encoded per residue.
    pub knn: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            model_dim: 64,
            heads: 4,
            st_layers: 2,
            blocks: 2,
            pair_dim: 16,
            rope_2d: true,
            rope_base: 1e4,
            pair_bias: true,
            knn: 4,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.model_dim, self.heads, self.st_layers, self.blocks, self.pair_dim];
        if dims.iter().any(|&v| v == 0) || self.model_dim < 2 || self.pair_dim < 2 {
            return Err(Error::InvalidArgument(format!("degenerate denoiser config {self:?}")));
        }
        if self.model_dim % (2 * self.heads) != 0 {
            return Err(Error::InvalidArgument(format!(
                "model_dim {} not divisible by 2*heads {}",
                self.model_dim,
                2 * self.heads
            )));
        }
        if !(self.rope_base > 1.0) {
            return Err(Error::InvalidArgument("rope_base must exceed 1".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    /// Attention layers in evaluation order (one per cached K/V pair).
    pub fn attention_layers(&self) -> usize {
        self.blocks * self.st_layers
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamRole {
    SingleEmbed,
    PairEmbed,
    Conditioning,
    Modulation,
    Query,
    Key,
    Value,
    Output,
    PairBias,
    FeedForward,
    Edge,
    Head,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub role: ParamRole,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_bias(&self) -> bool {
        self.rows == 1
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub entries: Vec<ParamEntry>,
    pub total: usize,
}

impl ParamLayout {
    fn push(&mut self, name: String, role: ParamRole, rows: usize, cols: usize) {
        self.entries.push(ParamEntry { name, role, rows, cols, offset: self.total });
        self.total += rows * cols;
    }

    pub fn for_config(cfg: &DenoiserConfig) -> Self {
        use ParamRole::*;
        let d = cfg.model_dim;
        let pd = cfg.pair_dim;
        let mut l = Self::default();
        l.push("embed.single.w".into(), SingleEmbed, features::single_width(cfg.knn), d);
        l.push("embed.single.b".into(), SingleEmbed, 1, d);
        l.push("embed.pair.w".into(), PairEmbed, features::PAIR_WIDTH, pd);
        l.push("embed.pair.b".into(), PairEmbed, 1, pd);
        l.push("cond.w".into(), Conditioning, features::COND_WIDTH, d);
        l.push("cond.b".into(), Conditioning, 1, d);
        for b in 0..cfg.blocks {
            for k in 0..cfg.st_layers {
                let p = format!("block{b}.layer{k}");
                l.push(format!("{p}.mod.w"), Modulation, d, 6 * d);
                l.push(format!("{p}.mod.b"), Modulation, 1, 6 * d);
                l.push(format!("{p}.q"), Query, d, d);
                l.push(format!("{p}.k"), Key, d, d);
                l.push(format!("{p}.v"), Value, d, d);
                l.push(format!("{p}.o"), Output, d, d);
                l.push(format!("{p}.pair_bias"), PairBias, pd, cfg.heads);
                l.push(format!("{p}.ffn.w1"), FeedForward, d, 2 * d);
                l.push(format!("{p}.ffn.b1"), FeedForward, 1, 2 * d);
                l.push(format!("{p}.ffn.w2"), FeedForward, 2 * d, d);
                l.push(format!("{p}.ffn.b2"), FeedForward, 1, d);
            }
            let p = format!("block{b}");
            l.push(format!("{p}.edge.w1"), Edge, 2 * d + pd, 2 * pd);
            l.push(format!("{p}.edge.b1"), Edge, 1, 2 * pd);
            l.push(format!("{p}.edge.w2"), Edge, 2 * pd, pd);
            l.push(format!("{p}.edge.b2"), Edge, 1, pd);
            l.push(format!("{p}.head.w"), Head, d, 6);
            l.push(format!("{p}.head.b"), Head, 1, 6);
        }
        l
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

/// All learnable tensors, stored contiguously in the order of `layout`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub config: DenoiserConfig,
    pub layout: ParamLayout,
    pub values: Vec<f64>,
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    byte_order: String,
    config: DenoiserConfig,
    layout: ParamLayout,
}

impl DenoiserParams {
    pub fn zeros(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::for_config(&config);
        let values = vec![0.0; layout.total];
        Ok(Self { config, layout, values })
    }

    /// Fan-in scaled Gaussian weights and zero biases; modulation and head
    /// weights start small so each block begins close to the identity.
    pub fn init<R: Rng + ?Sized>(config: DenoiserConfig, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        for e in p.layout.entries.clone() {
            if e.is_bias() {
                continue;
            }
            let mut std = 1.0 / (e.rows as f64).sqrt();
            if matches!(e.role, ParamRole::Modulation | ParamRole::Head) {
                std *= 0.1;
            }
            for v in &mut p.values[e.offset..e.offset + e.len()] {
                let z: f64 = StandardNormal.sample(rng);
                *v = std * z;
            }
        }
        Ok(p)
    }

    /// Every tensor, biases included, drawn with the given fan-in scaled width.
    pub fn random<R: Rng + ?Sized>(config: DenoiserConfig, scale: f64, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        for e in p.layout.entries.clone() {
            let std = scale / (e.rows.max(2) as f64).sqrt();
            for v in &mut p.values[e.offset..e.offset + e.len()] {
                let z: f64 = StandardNormal.sample(rng);
                *v = std * z;
            }
        }
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout.get(name).map(|e| &self.values[e.offset..e.offset + e.len()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let e = self.layout.get(name)?.clone();
        Some(&mut self.values[e.offset..e.offset + e.len()])
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::NonFinite(format!("parameter {i}"))),
            None => Ok(()),
        }
    }

    /// `u64` header length, JSON header, then little-endian `f64` values.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            byte_order: "little".into(),
            config: self.config.clone(),
            layout: self.layout.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        if len > 1 << 28 {
            return Err(Error::Checkpoint(format!("header length {len} is implausible")));
        }
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let header: CheckpointHeader = serde_json::from_slice(&json)?;
        if header.version != CHECKPOINT_VERSION || header.byte_order != "little" {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} / byte order {}",
                header.version, header.byte_order
            )));
        }
        header.config.validate()?;
        if header.layout != ParamLayout::for_config(&header.config) {
            return Err(Error::Checkpoint("layout does not match config".into()));
        }
        let mut values = vec![0.0; header.layout.total];
        let mut b = [0u8; 8];
        for v in values.iter_mut() {
            r.read_exact(&mut b).map_err(|e| Error::Checkpoint(format!("truncated values: {e}")))?;
            *v = f64::from_le_bytes(b);
        }
        let p = Self { config: header.config, layout: header.layout, values };
        p.check_finite()?;
        Ok(p)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn config_requires_even_head_split() {
        let cfg = DenoiserConfig { model_dim: 12, heads: 4, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = DenoiserConfig { model_dim: 16, heads: 4, ..Default::default() };
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn layout_is_contiguous() {
        let l = ParamLayout::for_config(&DenoiserConfig::default());
        let mut off = 0;
        for e in &l.entries {
            assert_eq!(e.offset, off);
            off += e.len();
        }
        assert_eq!(off, l.total);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = DenoiserConfig { model_dim: 8, heads: 2, pair_dim: 4, ..Default::default() };
        let p = DenoiserParams::random(cfg, 1.0, &mut rng).unwrap();
        let mut buf = Vec::new();
        p.write(&mut buf).unwrap();
        assert_eq!(DenoiserParams::read(&buf[..]).unwrap(), p);
        assert!(DenoiserParams::read(&buf[..buf.len() - 1]).is_err());
    }
}
