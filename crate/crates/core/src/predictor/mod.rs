//! Boundary predictor: a windowed multi-head attention encoder on each side
//! of a position, a fused comparison feature, and a two-layer MLP giving
//! the probability that the position ends a chunk.
//!
//! All weights live in one flat `f64` vector so the optimizer, gradient
//! check and checkpoint code can treat them uniformly.

mod gradcheck;
mod loss;
mod model;
mod train;

use std::io::{Read, Write};
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use loss::{focal_bce, focal_bce_grad, FocalForm, FocalParams};
pub use model::{encode_window, fuse, is_evaluable, predict, predict_sequence, sequence_loss_and_grad, Example};
pub use train::{evaluate, topk_overlap, train, AdamConfig, BinaryMetrics, EpochMetrics, TrainConfig, TrainReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorConfig {
    /// Key width `d`.
    pub dim: usize,
    pub heads: usize,
    /// Tokens per side window.
    pub window: usize,
    pub hidden: usize,
    /// Adds a learned per-slot bias to window inputs.
    #[serde(default)]
    pub positional: bool,
}

impl PredictorConfig {
    pub const DEFAULT_HEADS: usize = 8;
    pub const DEFAULT_WINDOW: usize = 4;
    pub const DEFAULT_HIDDEN: usize = 256;

    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            heads: Self::DEFAULT_HEADS,
            window: Self::DEFAULT_WINDOW,
            hidden: Self::DEFAULT_HIDDEN,
            positional: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.window == 0 || self.hidden == 0 {
            return Err(Error::InvalidArgument("predictor dimensions must be positive".into()));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::InvalidArgument(format!(
                "key width {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn fused_dim(&self) -> usize {
        4 * self.dim + 1
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self)
    }
}

/// Offsets of each weight block inside the flat parameter vector, in
/// declaration order: `wq, wk, wv, wo, pos, w1, b1, w2, b2`. `pos` is empty
/// unless positional biases are enabled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub wq: Range<usize>,
    pub wk: Range<usize>,
    pub wv: Range<usize>,
    pub wo: Range<usize>,
    pub pos: Range<usize>,
    pub w1: Range<usize>,
    pub b1: Range<usize>,
    pub w2: Range<usize>,
    pub b2: Range<usize>,
}

impl Layout {
    fn new(c: &PredictorConfig) -> Self {
        let d = c.dim;
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        Self {
            wq: take(d * d),
            wk: take(d * d),
            wv: take(d * d),
            wo: take(d * d),
            pos: take(if c.positional { c.window * d } else { 0 }),
            w1: take(c.hidden * c.fused_dim()),
            b1: take(c.hidden),
            w2: take(c.hidden),
            b2: take(1),
        }
    }

    pub fn total(&self) -> usize {
        self.b2.end
    }

    pub fn blocks(&self) -> [(&'static str, Range<usize>); 9] {
        [
            ("wq", self.wq.clone()),
            ("wk", self.wk.clone()),
            ("wv", self.wv.clone()),
            ("wo", self.wo.clone()),
            ("pos", self.pos.clone()),
            ("w1", self.w1.clone()),
            ("b1", self.b1.clone()),
            ("w2", self.w2.clone()),
            ("b2", self.b2.clone()),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorParams {
    config: PredictorConfig,
    layout: Layout,
    data: Vec<f64>,
}

impl PredictorParams {
    pub fn zeros(config: PredictorConfig) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        let data = vec![0.0; layout.total()];
        Ok(Self { config, layout, data })
    }

    /// Weight matrices uniform in `±√(6 / (fan_in + fan_out))`; biases and
    /// positional slots start at zero.
    pub fn init<R: Rng>(config: PredictorConfig, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let d = config.dim;
        let l = p.layout.clone();
        let mut fill = |r: Range<usize>, fan_in: usize, fan_out: usize| {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for x in &mut p.data[r] {
                *x = rng.random_range(-a..a);
            }
        };
        fill(l.wq, d, d);
        fill(l.wk, d, d);
        fill(l.wv, d, d);
        fill(l.wo, d, d);
        fill(l.w1, config.fused_dim(), config.hidden);
        fill(l.w2, config.hidden, 1);
        Ok(p)
    }

    pub fn from_flat(config: PredictorConfig, data: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if data.len() != layout.total() {
            return Err(Error::Shape(format!(
                "{} weights for a predictor needing {}",
                data.len(),
                layout.total()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("non-finite predictor weight".into()));
        }
        Ok(Self { config, layout, data })
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn block(&self, r: &Range<usize>) -> &[f64] {
        &self.data[r.clone()]
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        let header = serde_json::to_vec(&self.config)?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for &x in &self.data {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a DHSAPRD1 checkpoint (bad magic)".into()));
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut header)?;
        let config: PredictorConfig = serde_json::from_slice(&header)?;
        config.validate()?;
        let n = config.layout().total();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after weights", rest.len())));
        }
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Self::from_flat(config, data)
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DHSAPRD1";
