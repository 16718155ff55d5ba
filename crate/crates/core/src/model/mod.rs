//! Single-transformer multimodal language model.
//!
//! Text tokens go through an embedding table and image patches through one
//! linear projection; both land in the same residual stream and share every
//! pre-norm block (RMSNorm, multi-head attention with two-axis rotary
//! positions, SwiGLU MLP).

pub mod checkpoint;
mod config;
mod generate;
pub mod params;

use std::sync::Arc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::sequence::{AttentionLayout, MultimodalSequence, PackedBatch, Token};
use crate::tensor::gradcheck::{relative_error, GradCheckReport};
use crate::tensor::{Graph, Scalar, Tensor, Var};

pub use config::{ModelConfig, Preset};
pub use generate::{generate, Decoding, GenerateOutput, StepTrace};
pub use params::{param_specs, ParamKind, ParamSpec, Params};

use params::{final_norm_slot, layer_slots, lm_head_slot, PATCH_B, PATCH_W, TOK_EMB};

/// Config plus weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: Params<T>,
}

/// Handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `[n, vocab]` next-token logits.
    pub logits: Var,
    /// Final-norm hidden states, `[n, d_model]`.
    pub hidden: Var,
    /// One attention node per layer; see [`Graph::attention_probs`].
    pub attention: Vec<Var>,
    /// Parameter leaves in canonical order.
    pub params: Vec<Var>,
}

impl<T: Scalar> Model<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = Params::init(&config, seed)?;
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: Params<T>) -> Result<Self> {
        config.validate()?;
        let params = Params::from_tensors(&config, params.tensors)?;
        Ok(Self { config, params })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Record the forward pass on `g`. Parameters become trainable leaves
    /// when `trainable` is set, constants otherwise.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        seq: &MultimodalSequence,
        layout: &AttentionLayout,
        trainable: bool,
    ) -> Result<Forward> {
        let cfg = &self.config;
        let n = seq.len();
        if n == 0 {
            return Err(Error::shape("empty sequence"));
        }
        if n > cfg.max_pack {
            return Err(Error::shape(format!(
                "sequence length {n} exceeds max_pack {}",
                cfg.max_pack
            )));
        }
        if layout.bias.queries() != n || layout.positions.len() != n {
            return Err(Error::shape("layout does not match the sequence length"));
        }
        let params: Vec<Var> = self
            .params
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();

        let x = self.embed(g, &params, seq)?;
        let rot = Arc::new(layout.positions.rotation::<T>(&cfg.rope));
        let mut x = x;
        let mut attention = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let s = layer_slots(l);
            let h = g.rms_norm(x, params[s.attn_norm], cfg.norm_eps)?;
            let q = g.matmul(h, params[s.wq])?;
            let k = g.matmul(h, params[s.wk])?;
            let v = g.matmul(h, params[s.wv])?;
            let q = g.rotary(q, rot.clone())?;
            let k = g.rotary(k, rot.clone())?;
            let a = g.attention(q, k, v, layout.bias.clone(), cfg.n_heads)?;
            attention.push(a);
            let o = g.matmul(a, params[s.wo])?;
            x = g.add(x, o)?;
            let h = g.rms_norm(x, params[s.mlp_norm], cfg.norm_eps)?;
            let gate = g.matmul(h, params[s.w_gate])?;
            let up = g.matmul(h, params[s.w_up])?;
            let m = g.swiglu(gate, up)?;
            let m = g.matmul(m, params[s.w_down])?;
            x = g.add(x, m)?;
        }
        let hidden = g.rms_norm(x, params[final_norm_slot(cfg)], cfg.norm_eps)?;
        let logits = g.matmul(hidden, params[lm_head_slot(cfg)])?;
        Ok(Forward {
            logits,
            hidden,
            attention,
            params,
        })
    }

    /// Embedding rows in sequence order: token lookups for text and special
    /// tokens, the patch projection for image patches.
    fn embed(&self, g: &mut Graph<T>, params: &[Var], seq: &MultimodalSequence) -> Result<Var> {
        let ppc = self.config.patch_dim();
        let mut ids = Vec::new();
        let mut patches: Vec<T> = Vec::new();
        let mut slot = Vec::with_capacity(seq.len());
        for tok in &seq.tokens {
            match *tok {
                Token::Patch { image, row, col } => {
                    let grid = seq
                        .images
                        .get(image as usize)
                        .ok_or_else(|| Error::shape(format!("patch refers to missing image {image}")))?;
                    if grid.patch_dim() != ppc {
                        return Err(Error::shape(format!(
                            "patch vectors have {} values, model expects {ppc}",
                            grid.patch_dim()
                        )));
                    }
                    slot.push((true, patches.len() / ppc));
                    patches.extend(grid.patch(row as usize, col as usize).iter().map(|&v| T::of(v as f64)));
                }
                _ => {
                    let id = tok.id().expect("non-patch tokens have ids") as usize;
                    if id >= self.config.vocab {
                        return Err(Error::shape(format!("token id {id} outside vocabulary")));
                    }
                    slot.push((false, ids.len()));
                    ids.push(id);
                }
            }
        }
        let n_text = ids.len();
        let n_patch = patches.len() / ppc;
        if n_patch == 0 {
            return g.gather_rows(params[TOK_EMB], ids);
        }
        let pm = g.constant(Tensor::new(vec![n_patch, ppc], patches)?);
        let proj = g.matmul(pm, params[PATCH_W])?;
        let proj = g.add_row_bias(proj, params[PATCH_B])?;
        if n_text == 0 {
            return Ok(proj);
        }
        let tok = g.gather_rows(params[TOK_EMB], ids)?;
        let both = g.concat_rows(&[tok, proj])?;
        let order = slot
            .into_iter()
            .map(|(is_patch, k)| if is_patch { n_text + k } else { k })
            .collect();
        g.gather_rows(both, order)
    }

    /// Inference logits `[n, vocab]` for one sequence.
    pub fn logits(&self, seq: &MultimodalSequence, layout: &AttentionLayout) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, seq, layout, false)?;
        Ok(g.value(f.logits).clone())
    }

    /// Mean next-token cross-entropy under `mask`.
    pub fn masked_loss(
        &self,
        seq: &MultimodalSequence,
        layout: &AttentionLayout,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<f64> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, seq, layout, false)?;
        let loss = g.masked_cross_entropy(f.logits, targets, mask)?;
        Ok(g.value(loss).data()[0].as_f64())
    }

    /// Loss of a packed batch.
    pub fn loss(&self, batch: &PackedBatch) -> Result<f64> {
        let (targets, mask) = batch.targets();
        self.masked_loss(&batch.seq, &batch.layout, &targets, &mask)
    }

    /// Loss and per-parameter gradients of a packed batch.
    pub fn loss_and_grads(&self, batch: &PackedBatch) -> Result<(f64, Vec<Vec<T>>)> {
        let (targets, mask) = batch.targets();
        let mut g = Graph::new();
        let f = self.forward(&mut g, &batch.seq, &batch.layout, true)?;
        let loss = g.masked_cross_entropy(f.logits, &targets, &mask)?;
        let value = g.value(loss).data()[0].as_f64();
        if !value.is_finite() {
            return Ok((value, Vec::new()));
        }
        g.backward(loss)?;
        let grads = f
            .params
            .iter()
            .map(|&p| g.grad(p).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); g.value(p).len()]))
            .collect();
        Ok((value, grads))
    }
}

impl Model<f64> {
    /// Central-difference check of [`Model::loss_and_grads`] on `batch`,
    /// perturbing up to `per_tensor` entries of every parameter tensor.
    pub fn grad_check(&self, batch: &PackedBatch, per_tensor: usize, seed: u64, eps: f64) -> Result<GradCheckReport> {
        let (_, analytic) = self.loss_and_grads(batch)?;
        if analytic.is_empty() {
            return Err(Error::GradCheck("loss is not finite".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut work = self.clone();
        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            worst: None,
            checked: 0,
        };
        for (t, grad) in analytic.iter().enumerate() {
            let n = grad.len();
            let mut picks = sample(&mut rng, n, per_tensor.min(n)).into_vec();
            picks.sort_unstable();
            for e in picks {
                let orig = work.params.tensors[t].data()[e];
                work.params.tensors[t].data_mut()[e] = orig + eps;
                let plus = work.loss(batch)?;
                work.params.tensors[t].data_mut()[e] = orig - eps;
                let minus = work.loss(batch)?;
                work.params.tensors[t].data_mut()[e] = orig;
                let err = relative_error(grad[e], (plus - minus) / (2.0 * eps));
                report.checked += 1;
                if err > report.max_rel_error || report.worst.is_none() {
                    report.max_rel_error = report.max_rel_error.max(err);
                    report.worst = Some((t, e));
                }
            }
        }
        Ok(report)
    }
}
