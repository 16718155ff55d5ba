use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

const INIT_STD: f64 = 0.02;
const PER_LAYER: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Embedding tables and linear weights: random init, weight decay.
    Weight,
    /// RMSNorm gains: ones, no decay.
    Norm,
    /// Biases: zeros, no decay.
    Bias,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

/// Canonical parameter list for a config. Checkpoints and the optimizer
/// rely on this order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.d_model;
    let h = cfg.mlp_hidden();
    let spec = |name: String, shape: Vec<usize>, kind| ParamSpec { name, shape, kind };
    let mut out = vec![
        spec("tok_emb".into(), vec![cfg.vocab, d], ParamKind::Weight),
        spec("patch_proj.weight".into(), vec![cfg.patch_dim(), d], ParamKind::Weight),
        spec("patch_proj.bias".into(), vec![d], ParamKind::Bias),
    ];
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        out.extend([
            spec(p("attn_norm"), vec![d], ParamKind::Norm),
            spec(p("wq"), vec![d, d], ParamKind::Weight),
            spec(p("wk"), vec![d, d], ParamKind::Weight),
            spec(p("wv"), vec![d, d], ParamKind::Weight),
            spec(p("wo"), vec![d, d], ParamKind::Weight),
            spec(p("mlp_norm"), vec![d], ParamKind::Norm),
            spec(p("w_gate"), vec![d, h], ParamKind::Weight),
            spec(p("w_up"), vec![d, h], ParamKind::Weight),
            spec(p("w_down"), vec![h, d], ParamKind::Weight),
        ]);
    }
    out.push(spec("final_norm".into(), vec![d], ParamKind::Norm));
    out.push(spec("lm_head".into(), vec![d, cfg.vocab], ParamKind::Weight));
    out
}

/// Index of a layer's tensors within [`Params::tensors`].
#[derive(Debug, Clone, Copy)]
pub struct LayerSlots {
    pub attn_norm: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub mlp_norm: usize,
    pub w_gate: usize,
    pub w_up: usize,
    pub w_down: usize,
}

pub const TOK_EMB: usize = 0;
pub const PATCH_W: usize = 1;
pub const PATCH_B: usize = 2;

pub fn layer_slots(layer: usize) -> LayerSlots {
    let b = 3 + PER_LAYER * layer;
    LayerSlots {
        attn_norm: b,
        wq: b + 1,
        wk: b + 2,
        wv: b + 3,
        wo: b + 4,
        mlp_norm: b + 5,
        w_gate: b + 6,
        w_up: b + 7,
        w_down: b + 8,
    }
}

pub fn final_norm_slot(cfg: &ModelConfig) -> usize {
    3 + PER_LAYER * cfg.n_layers
}

pub fn lm_head_slot(cfg: &ModelConfig) -> usize {
    4 + PER_LAYER * cfg.n_layers
}

/// All trainable tensors in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Params<T> {
    /// Weights ~ N(0, 0.02), norm gains 1, biases 0.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let tensors = param_specs(cfg)
            .into_iter()
            .map(|s| {
                let n: usize = s.shape.iter().product();
                match s.kind {
                    ParamKind::Weight => {
                        let data = (0..n).map(|_| T::of(normal.sample(&mut rng))).collect();
                        Tensor::new(s.shape, data).expect("spec shape")
                    }
                    ParamKind::Norm => Tensor::full(&s.shape, T::one()),
                    ParamKind::Bias => Tensor::zeros(&s.shape),
                }
            })
            .collect();
        Ok(Self { tensors })
    }

    /// Wrap tensors, checking them against the config's parameter list.
    pub fn from_tensors(cfg: &ModelConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        let specs = param_specs(cfg);
        if specs.len() != tensors.len() {
            return Err(Error::shape(format!(
                "expected {} parameter tensors, got {}",
                specs.len(),
                tensors.len()
            )));
        }
        for (s, t) in specs.iter().zip(&tensors) {
            if s.shape != t.shape() {
                return Err(Error::shape(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    s.name,
                    t.shape(),
                    s.shape
                )));
            }
        }
        Ok(Self { tensors })
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params {
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Order-sensitive FNV-1a hash over the raw bit patterns.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut buf = Vec::new();
        for t in &self.tensors {
            for &v in t.data() {
                buf.clear();
                v.write_le(&mut buf);
                for &b in &buf {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}
