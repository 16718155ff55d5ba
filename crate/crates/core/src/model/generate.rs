use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Model;
use crate::error::{Error, Result};
use crate::sequence::{AttentionLayout, MultimodalSequence};
use crate::tensor::{Graph, Scalar};
use crate::tokenizer::{Special, BYTE_VOCAB};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decoding {
    Greedy,
    Temperature { tau: f64, seed: u64 },
}

/// Attention of the query row that produced one token.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    /// `[layer][head][key]` post-softmax weights over all visible positions.
    pub attention: Vec<Vec<Vec<f64>>>,
    /// Which of those key positions are image tokens.
    pub image_keys: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GenerateOutput {
    /// Generated ids, including a final EOS if one was produced.
    pub tokens: Vec<u32>,
    /// Present when tracing was requested, one entry per generated token.
    pub trace: Vec<StepTrace>,
}

impl GenerateOutput {
    /// Generated bytes as text, specials dropped.
    pub fn text(&self) -> String {
        String::from_utf8_lossy(&crate::tokenizer::decode(&self.tokens)).into_owned()
    }
}

/// Autoregressive continuation of `prompt`. New tokens are restricted to
/// bytes and EOS; decoding stops after EOS or `max_new` tokens.
pub fn generate<T: Scalar>(
    model: &Model<T>,
    prompt: &MultimodalSequence,
    max_new: usize,
    decoding: Decoding,
    trace: bool,
) -> Result<GenerateOutput> {
    let limit = model.config.max_pack;
    if prompt.len() + max_new > limit {
        return Err(Error::Generation(format!(
            "prompt of {} tokens plus {max_new} new tokens exceeds max length {limit}",
            prompt.len()
        )));
    }
    if prompt.is_empty() {
        return Err(Error::Generation("empty prompt".into()));
    }
    if let Decoding::Temperature { tau, .. } = decoding {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Generation(format!("temperature {tau} must be positive")));
        }
    }
    let mut rng = match decoding {
        Decoding::Temperature { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Decoding::Greedy => None,
    };
    let mut candidates: Vec<u32> = (0..BYTE_VOCAB as u32).collect();
    candidates.push(Special::Eos.id());

    let mut seq = prompt.clone();
    let mut out = GenerateOutput::default();
    for _ in 0..max_new {
        let layout = AttentionLayout::build(&seq, &model.config.layout);
        let mut g = Graph::new();
        let f = model.forward(&mut g, &seq, &layout, false)?;
        let last = seq.len() - 1;
        let row = g.value(f.logits).row(last);
        let logits: Vec<f64> = candidates.iter().map(|&c| row[c as usize].as_f64()).collect();
        let pick = match (&mut rng, decoding) {
            (Some(rng), Decoding::Temperature { tau, .. }) => sample(&logits, tau, rng),
            _ => argmax(&logits),
        };
        let next = candidates[pick];
        if trace {
            let attention = f
                .attention
                .iter()
                .map(|&a| {
                    let probs = g.attention_probs(a).expect("attention node");
                    (0..model.config.n_heads)
                        .map(|h| probs.head_row(h, last))
                        .collect()
                })
                .collect();
            out.trace.push(StepTrace {
                attention,
                image_keys: seq.is_image_token(),
            });
        }
        out.tokens.push(next);
        if next == Special::Eos.id() {
            break;
        }
        seq.push_text(next, false);
    }
    Ok(out)
}

/// First index of the maximum; ties go to the lower id.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn sample(logits: &[f64], tau: f64, rng: &mut ChaCha8Rng) -> usize {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|&l| ((l - max) / tau).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &x) in w.iter().enumerate() {
        if u < x {
            return i;
        }
        u -= x;
    }
    w.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::sequence::assemble_prompt;

    #[test]
    fn zero_new_tokens_is_empty() {
        let m = Model::<f32>::init(ModelConfig::tiny(), 0).unwrap();
        let p = assemble_prompt(&[], false);
        let out = generate(&m, &p, 0, Decoding::Greedy, false).unwrap();
        assert!(out.tokens.is_empty());
    }

    #[test]
    fn greedy_is_repeatable_and_overflow_errors() {
        let mut cfg = ModelConfig::tiny();
        cfg.max_pack = 6;
        let m = Model::<f32>::init(cfg, 0).unwrap();
        let p = assemble_prompt(&[], false);
        let a = generate(&m, &p, 5, Decoding::Greedy, true).unwrap();
        let b = generate(&m, &p, 5, Decoding::Greedy, true).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.trace.len(), a.tokens.len());
        assert!(matches!(
            generate(&m, &p, 6, Decoding::Greedy, false),
            Err(Error::Generation(_))
        ));
    }

    #[test]
    fn tempered_sampling_is_seeded() {
        let m = Model::<f32>::init(ModelConfig::tiny(), 0).unwrap();
        let p = assemble_prompt(&[], false);
        let d = Decoding::Temperature { tau: 1.0, seed: 5 };
        let a = generate(&m, &p, 8, d, false).unwrap();
        let b = generate(&m, &p, 8, d, false).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert!(a.tokens.iter().all(|&t| t < 256 || t == Special::Eos.id()));
    }
}
