//! Instruments for studying a trained model: how much attention generated
//! tokens pay to image positions, how linearly decodable the frozen patch
//! features are, and how well caption loss ranks candidate captions.

use std::fmt::Write as _;
use std::ops::Range;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{generate, Decoding, Model, StepTrace};
use crate::patch::PatchGrid;
use crate::sequence::{assemble_prompt, assemble_sequence, next_token_targets, AttentionLayout, MultimodalSequence};
use crate::tensor::{AttentionBias, Graph, Scalar, Tensor};
use crate::tokenizer::tokenize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LayerStat {
    pub layer: usize,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Per-layer share of attention that generated tokens place on image keys.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttentionFlowReport {
    pub layers: Vec<LayerStat>,
    pub samples: usize,
    pub skipped: usize,
    pub model_tag: String,
}

impl AttentionFlowReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,mean,std,n\n");
        for l in &self.layers {
            let _ = writeln!(s, "{},{},{},{}", l.layer, l.mean, l.std, l.n);
        }
        s
    }
}

/// `(image, non-image)` attention mass of one query row.
pub fn image_fraction(row: &[f64], image_keys: &[bool]) -> (f64, f64) {
    let mut image = 0.0;
    let mut other = 0.0;
    for (&p, &is_img) in row.iter().zip(image_keys) {
        if is_img {
            image += p;
        } else {
            other += p;
        }
    }
    (image, other)
}

/// Collects fractions per layer; summation happens over sorted values so the
/// result does not depend on the order samples arrive in.
#[derive(Debug, Clone, Default)]
pub struct FlowAccumulator {
    per_layer: Vec<Vec<f64>>,
    samples: usize,
    skipped: usize,
}

impl FlowAccumulator {
    pub fn new(layers: usize) -> Self {
        Self {
            per_layer: vec![Vec::new(); layers],
            ..Default::default()
        }
    }

    pub fn skip(&mut self) {
        self.skipped += 1;
    }

    /// Add one sample's generation trace. With `head_average` each head row
    /// is averaged before taking the fraction; otherwise every head counts
    /// as its own observation.
    pub fn add_trace(&mut self, trace: &[StepTrace], layers: &Range<usize>, head_average: bool) {
        for step in trace {
            for (slot, l) in layers.clone().enumerate() {
                let heads = &step.attention[l];
                if head_average {
                    let mut row = vec![0.0; step.image_keys.len()];
                    for h in heads {
                        row.iter_mut().zip(h).for_each(|(r, &p)| *r += p);
                    }
                    let inv = 1.0 / heads.len() as f64;
                    row.iter_mut().for_each(|r| *r *= inv);
                    self.per_layer[slot].push(image_fraction(&row, &step.image_keys).0);
                } else {
                    for h in heads {
                        self.per_layer[slot].push(image_fraction(h, &step.image_keys).0);
                    }
                }
            }
        }
        self.samples += 1;
    }

    pub fn finish(self, layers: Range<usize>, model_tag: &str) -> Result<AttentionFlowReport> {
        if self.samples == 0 {
            return Err(Error::config("no evaluation sample contained an image"));
        }
        let stats = layers
            .zip(self.per_layer)
            .map(|(layer, mut v)| {
                v.sort_by(f64::total_cmp);
                let n = v.len();
                let mean = if n == 0 { 0.0 } else { v.iter().sum::<f64>() / n as f64 };
                let mut dev: Vec<f64> = v.iter().map(|x| (x - mean) * (x - mean)).collect();
                dev.sort_by(f64::total_cmp);
                let std = if n == 0 { 0.0 } else { (dev.iter().sum::<f64>() / n as f64).sqrt() };
                LayerStat { layer, mean, std, n }
            })
            .collect();
        Ok(AttentionFlowReport {
            layers: stats,
            samples: self.samples,
            skipped: self.skipped,
            model_tag: model_tag.to_string(),
        })
    }
}

/// Generate from each prompt and measure, per layer, the fraction of each
/// produced token's attention that lands on image positions.
pub fn image_attention_allocation<T: Scalar>(
    model: &Model<T>,
    prompts: &[MultimodalSequence],
    layers: Option<Range<usize>>,
    max_new: usize,
    head_average: bool,
    model_tag: &str,
) -> Result<AttentionFlowReport> {
    let layers = layers.unwrap_or(0..model.config.n_layers);
    if layers.start >= layers.end || layers.end > model.config.n_layers {
        return Err(Error::config(format!(
            "layer range {layers:?} outside 0..{}",
            model.config.n_layers
        )));
    }
    let mut acc = FlowAccumulator::new(layers.len());
    for p in prompts {
        if p.images.is_empty() {
            acc.skip();
            continue;
        }
        let out = generate(model, p, max_new, Decoding::Greedy, true)?;
        acc.add_trace(&out.trace, &layers, head_average);
    }
    if acc.skipped > 0 {
        log::warn!("skipped {} samples without an image span", acc.skipped);
    }
    acc.finish(layers, model_tag)
}

/// Final-norm hidden states at the patch positions of `[BOS, image]`,
/// `[patches, d_model]`.
pub fn patch_features<T: Scalar>(model: &Model<T>, grid: &PatchGrid) -> Result<Tensor<f32>> {
    let seq = assemble_prompt(std::slice::from_ref(grid), model.config.layout.vision_sep);
    let layout = AttentionLayout::build(&seq, &model.config.layout);
    let mut g = Graph::new();
    let f = model.forward(&mut g, &seq, &layout, false)?;
    let hidden = g.value(f.hidden);
    let d = model.config.d_model;
    let mut data = Vec::with_capacity(grid.len() * d);
    for (i, tok) in seq.tokens.iter().enumerate() {
        if tok.is_patch() {
            data.extend(hidden.row(i).iter().map(|v| v.as_f64() as f32));
        }
    }
    Tensor::new(vec![data.len() / d, d], data)
}

/// Copy of `model` with the entries of every tensor shuffled.
pub fn permute_weights<T: Scalar>(model: &Model<T>, seed: u64) -> Model<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = model.clone();
    for t in &mut out.params.tensors {
        t.data_mut().shuffle(&mut rng);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 1e-2,
            batch: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProbeResult {
    pub top1: f64,
    pub top5: f64,
    pub epochs: usize,
    pub classes: usize,
}

struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
}

impl Adam {
    fn new(sizes: &[usize]) -> Self {
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [Tensor<f32>], grads: &[Vec<f32>], lr: f64) {
        self.t += 1;
        let (b1, b2) = (0.9f64, 0.999f64);
        let c1 = (lr / (1.0 - b1.powi(self.t))) as f32;
        let c2 = (1.0 / (1.0 - b2.powi(self.t))) as f32;
        for (k, p) in params.iter_mut().enumerate() {
            for (((w, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(&grads[k])
                .zip(&mut self.m[k])
                .zip(&mut self.v[k])
            {
                *m = 0.9 * *m + 0.1 * g;
                *v = 0.999 * *v + 0.001 * g * g;
                *w -= c1 * *m / ((*v * c2).sqrt() + 1e-8);
            }
        }
    }
}

/// Attention-pooled linear probe: `[query, W, b]`.
struct Probe {
    params: Vec<Tensor<f32>>,
}

impl Probe {
    /// Logits for a batch of feature maps.
    fn logits(&self, g: &mut Graph<f32>, feats: &[&Tensor<f32>], train: bool) -> Result<(crate::tensor::Var, Vec<crate::tensor::Var>)> {
        let vars: Vec<_> = self
            .params
            .iter()
            .map(|p| if train { g.param(p.clone()) } else { g.constant(p.clone()) })
            .collect();
        let d = self.params[0].len();
        let mut rows = Vec::with_capacity(feats.len());
        let mut data = Vec::new();
        let mut start = 0u32;
        for f in feats {
            let n = f.shape()[0] as u32;
            rows.push((start..start + n).collect::<Vec<u32>>());
            data.extend_from_slice(f.data());
            start += n;
        }
        let keys = g.constant(Tensor::new(vec![start as usize, d], data)?);
        let bias = Arc::new(AttentionBias::from_rows(feats.len(), start as usize, rows)?);
        let q = g.gather_rows(vars[0], vec![0; feats.len()])?;
        let pooled = g.attention(q, keys, keys, bias, 1)?;
        let logits = g.matmul(pooled, vars[1])?;
        let logits = g.add_row_bias(logits, vars[2])?;
        Ok((logits, vars))
    }
}

/// Train a probe on frozen features of `train` and score it on `test`.
/// Only the probe's query, weights and bias are updated.
pub fn linear_probe<T: Scalar>(
    model: &Model<T>,
    train: &[(PatchGrid, usize)],
    test: &[(PatchGrid, usize)],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    if classes < 2 {
        return Err(Error::config(format!("a probe needs at least 2 classes, got {classes}")));
    }
    if let Some((_, l)) = train.iter().chain(test).find(|(_, l)| *l >= classes) {
        return Err(Error::config(format!("label {l} outside 0..{classes}")));
    }
    if train.is_empty() || test.is_empty() || cfg.batch == 0 {
        return Err(Error::config("probe needs non-empty train and test sets"));
    }
    let feats = |set: &[(PatchGrid, usize)]| -> Result<Vec<Tensor<f32>>> {
        set.iter().map(|(g, _)| patch_features(model, g)).collect()
    };
    let train_f = feats(train)?;
    let test_f = feats(test)?;
    let d = model.config.d_model;
    let mut probe = Probe {
        params: vec![
            Tensor::zeros(&[1, d]),
            Tensor::zeros(&[d, classes]),
            Tensor::zeros(&[classes]),
        ],
    };
    let mut adam = Adam::new(&[d, d * classes, classes]);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch) {
            let mut g = Graph::new();
            let batch: Vec<&Tensor<f32>> = chunk.iter().map(|&i| &train_f[i]).collect();
            let targets: Vec<usize> = chunk.iter().map(|&i| train[i].1).collect();
            let (logits, vars) = probe.logits(&mut g, &batch, true)?;
            let loss = g.masked_cross_entropy(logits, &targets, &vec![true; chunk.len()])?;
            g.backward(loss)?;
            let grads: Vec<Vec<f32>> = vars
                .iter()
                .map(|&v| g.grad(v).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(v).len()]))
                .collect();
            adam.step(&mut probe.params, &grads, cfg.lr);
        }
    }
    let mut top1 = 0usize;
    let mut top5 = 0usize;
    for chunk in (0..test.len()).collect::<Vec<_>>().chunks(cfg.batch.max(1)) {
        let mut g = Graph::new();
        let batch: Vec<&Tensor<f32>> = chunk.iter().map(|&i| &test_f[i]).collect();
        let (logits, _) = probe.logits(&mut g, &batch, false)?;
        let l = g.value(logits);
        for (r, &i) in chunk.iter().enumerate() {
            let row = l.row(r);
            let truth = row[test[i].1];
            // rank = number of classes scoring strictly higher
            let rank = row.iter().filter(|&&v| v > truth).count();
            top1 += (rank == 0) as usize;
            top5 += (rank < 5) as usize;
        }
    }
    let n = test.len() as f64;
    Ok(ProbeResult {
        top1: top1 as f64 / n,
        top5: top5 as f64 / n,
        epochs: cfg.epochs,
        classes,
    })
}

/// Candidate captions besides the true one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DistractorPolicy {
    /// One word-order shuffle of the true caption.
    ShuffledWords,
    /// Captions of `count` other images.
    CrossImage { count: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RetrievalResult {
    pub accuracy: f64,
    pub trials: usize,
    /// Mean candidate-set size after deduplication.
    pub mean_candidates: f64,
    pub duplicates_removed: usize,
}

/// Negative mean cross-entropy of `caption` (and EOS) after the image.
pub fn caption_similarity<T: Scalar>(model: &Model<T>, grid: &PatchGrid, caption: &str) -> Result<f64> {
    let seq = assemble_sequence(
        std::slice::from_ref(grid),
        &tokenize(caption.as_bytes()),
        model.config.layout.vision_sep,
    )?;
    let layout = AttentionLayout::build(&seq, &model.config.layout);
    let (targets, mask) = next_token_targets(&seq);
    Ok(-model.masked_loss(&seq, &layout, &targets, &mask)?)
}

/// Index of the best-scoring candidate; ties go to the earlier one.
pub fn best_caption<T: Scalar>(model: &Model<T>, grid: &PatchGrid, candidates: &[String]) -> Result<usize> {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, c) in candidates.iter().enumerate() {
        let s = caption_similarity(model, grid, c)?;
        if s > best.1 {
            best = (i, s);
        }
    }
    Ok(best.0)
}

/// Word-order shuffle that differs from `caption` when any reordering does.
pub fn shuffle_words(caption: &str, rng: &mut ChaCha8Rng) -> String {
    let words: Vec<&str> = caption.split_whitespace().collect();
    let original = words.join(" ");
    let mut w = words.clone();
    for _ in 0..16 {
        w.shuffle(rng);
        let s = w.join(" ");
        if s != original {
            return s;
        }
    }
    original
}

/// Build the candidate list for trial `i`, true caption first.
pub fn candidates(
    pairs: &[(PatchGrid, String)],
    i: usize,
    policy: DistractorPolicy,
    rng: &mut ChaCha8Rng,
) -> Vec<String> {
    let truth = pairs[i].1.clone();
    let mut out = vec![truth.clone()];
    match policy {
        DistractorPolicy::ShuffledWords => out.push(shuffle_words(&truth, rng)),
        DistractorPolicy::CrossImage { count } => {
            let mut others: Vec<usize> = (0..pairs.len()).filter(|&j| j != i).collect();
            others.shuffle(rng);
            out.extend(others.into_iter().take(count).map(|j| pairs[j].1.clone()));
        }
    }
    out
}

fn dedup(list: Vec<String>) -> (Vec<String>, usize) {
    let mut out: Vec<String> = Vec::with_capacity(list.len());
    let mut removed = 0;
    for c in list {
        if out.contains(&c) {
            removed += 1;
        } else {
            out.push(c);
        }
    }
    (out, removed)
}

/// Score each image's candidate set with `model_for(trial)`; a trial counts
/// as correct when the true caption strictly beats every distractor.
pub fn retrieval_with<M, F>(
    pairs: &[(PatchGrid, String)],
    policy: DistractorPolicy,
    seed: u64,
    mut model_for: F,
) -> Result<RetrievalResult>
where
    F: FnMut(usize) -> Result<M>,
    M: std::ops::Deref,
    M::Target: ScoreCaptions,
{
    if pairs.is_empty() {
        return Err(Error::config("retrieval needs at least one image-caption pair"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut correct = 0usize;
    let mut total_candidates = 0usize;
    let mut removed = 0usize;
    for i in 0..pairs.len() {
        let (cands, r) = dedup(candidates(pairs, i, policy, &mut rng));
        removed += r;
        total_candidates += cands.len();
        if cands.len() == 1 {
            correct += 1;
            continue;
        }
        let model = model_for(i)?;
        let scores: Vec<f64> = cands
            .iter()
            .map(|c| model.score(&pairs[i].0, c))
            .collect::<Result<_>>()?;
        if scores[1..].iter().all(|&s| scores[0] > s) {
            correct += 1;
        }
    }
    if removed > 0 {
        log::warn!("removed {removed} duplicate candidate captions");
    }
    let n = pairs.len();
    Ok(RetrievalResult {
        accuracy: correct as f64 / n as f64,
        trials: n,
        mean_candidates: total_candidates as f64 / n as f64,
        duplicates_removed: removed,
    })
}

/// Anything that can score a caption for an image.
pub trait ScoreCaptions {
    fn score(&self, grid: &PatchGrid, caption: &str) -> Result<f64>;
}

impl<T: Scalar> ScoreCaptions for Model<T> {
    fn score(&self, grid: &PatchGrid, caption: &str) -> Result<f64> {
        caption_similarity(self, grid, caption)
    }
}

/// Caption-loss retrieval with one fixed model.
pub fn caption_loss_retrieval<T: Scalar>(
    model: &Model<T>,
    pairs: &[(PatchGrid, String)],
    policy: DistractorPolicy,
    seed: u64,
) -> Result<RetrievalResult> {
    retrieval_with(pairs, policy, seed, |_| Ok(model))
}
