//! Two-axis (height, width) rotary position embedding.
//!
//! Text and special tokens carry equal height and width ids, so on pure text
//! the rotation reduces to ordinary 1D RoPE. Patches take
//! `(cursor + row, cursor + col)` and the cursor then skips past the larger
//! grid side, which keeps visual position ids small.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sequence::{MultimodalSequence, SpanKind, Token};
use crate::tensor::{Graph, Rotation, Scalar, Tensor};
use crate::tokenizer::Special;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionMode {
    /// Two-axis ids for patches, uniform ids elsewhere.
    Mrope,
    /// Plain sequential ids for every token (1D RoPE).
    Linear,
}

/// How rotary frequency pairs are assigned to the two axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisSplit {
    /// Lower half of the frequency indices follows height, upper half width.
    Contiguous,
    /// Even frequency indices follow height, odd ones width.
    Interleaved,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotaryConfig {
    pub head_dim: usize,
    pub theta: f64,
    pub axis_split: AxisSplit,
}

impl RotaryConfig {
    pub fn new(head_dim: usize) -> Self {
        Self {
            head_dim,
            theta: 10_000.0,
            axis_split: AxisSplit::Contiguous,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || self.head_dim % 4 != 0 {
            return Err(Error::config(format!(
                "rotary head_dim {} must be a positive multiple of 4",
                self.head_dim
            )));
        }
        if !(self.theta > 1.0 && self.theta.is_finite()) {
            return Err(Error::config(format!("rotary base {} must exceed 1", self.theta)));
        }
        Ok(())
    }

    /// Rotation rate of frequency pair `k`: `theta^(-2k / head_dim)`.
    pub fn rate(&self, k: usize) -> f64 {
        self.theta.powf(-2.0 * k as f64 / self.head_dim as f64)
    }

    /// Whether pair `k` is driven by the height id.
    pub fn uses_height(&self, k: usize) -> bool {
        match self.axis_split {
            AxisSplit::Contiguous => k < self.head_dim / 4,
            AxisSplit::Interleaved => k % 2 == 0,
        }
    }
}

/// Per-token `(height, width)` position ids.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PositionTable {
    pub ids: Vec<(u32, u32)>,
}

impl PositionTable {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Sequential 1D ids `(i, i)`.
    pub fn linear(n: usize) -> Self {
        Self {
            ids: (0..n as u32).map(|i| (i, i)).collect(),
        }
    }

    /// `(cos, sin)` tables for every token and frequency pair.
    pub fn rotation<T: Scalar>(&self, cfg: &RotaryConfig) -> Rotation<T> {
        let half = cfg.head_dim / 2;
        let rates: Vec<f64> = (0..half).map(|k| cfg.rate(k)).collect();
        let mut cos = Vec::with_capacity(self.len() * half);
        let mut sin = Vec::with_capacity(self.len() * half);
        for &(h, w) in &self.ids {
            for (k, &rate) in rates.iter().enumerate() {
                let pos = if cfg.uses_height(k) { h } else { w };
                let (sn, cs) = (pos as f64 * rate).sin_cos();
                cos.push(T::of(cs));
                sin.push(T::of(sn));
            }
        }
        Rotation {
            tokens: self.len(),
            head_dim: cfg.head_dim,
            cos,
            sin,
        }
    }
}

/// Assign position ids with a cursor that restarts at every sample.
pub fn assign_position_ids(seq: &MultimodalSequence, mode: PositionMode) -> PositionTable {
    let mut ids = Vec::with_capacity(seq.len());
    let mut cursor = 0u32;
    let mut sample = None;
    let mut enter = |i: usize, cursor: &mut u32| {
        if sample != Some(seq.sample_id[i]) {
            sample = Some(seq.sample_id[i]);
            *cursor = 0;
        }
    };
    for span in &seq.spans {
        match (span.kind, mode) {
            (SpanKind::Image, PositionMode::Mrope) => {
                let (rows, cols) = span.grid.unwrap_or((0, 0));
                let mut base = cursor;
                let mut last_row = 0;
                for i in span.start..span.end() {
                    enter(i, &mut cursor);
                    match seq.tokens[i] {
                        Token::Patch { row, col, .. } => {
                            last_row = row;
                            ids.push((base + row, base + col));
                        }
                        Token::Special(Special::VisionSep) => {
                            ids.push((base + last_row, base + last_row));
                        }
                        Token::Special(Special::VisionEnd) => {
                            cursor = base + rows.max(cols) as u32;
                            ids.push((cursor, cursor));
                            cursor += 1;
                        }
                        _ => {
                            ids.push((cursor, cursor));
                            cursor += 1;
                            base = cursor;
                        }
                    }
                }
            }
            _ => {
                for i in span.start..span.end() {
                    enter(i, &mut cursor);
                    ids.push((cursor, cursor));
                    cursor += 1;
                }
            }
        }
    }
    PositionTable { ids }
}

/// Rotate `[n, head_dim]` query or key rows by their position ids.
pub fn apply_rotary<T: Scalar>(
    x: &Tensor<T>,
    table: &PositionTable,
    cfg: &RotaryConfig,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    let (n, d) = x.dims2()?;
    if n != table.len() {
        return Err(Error::shape(format!(
            "{n} rows but {} position ids",
            table.len()
        )));
    }
    if d % cfg.head_dim != 0 {
        return Err(Error::shape(format!(
            "width {d} is not a multiple of head_dim {}",
            cfg.head_dim
        )));
    }
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let out = g.rotary(v, Arc::new(table.rotation(cfg)))?;
    Ok(g.value(out).clone())
}
