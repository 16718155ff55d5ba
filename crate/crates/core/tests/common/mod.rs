#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sail_core::model::ModelConfig;
use sail_core::mrope::RotaryConfig;
use sail_core::patch::{patchify, PatchGrid, ResizePolicy};
use sail_core::sequence::MultimodalSequence;
use sail_core::synth::{generate_samples, generate_text, SyntheticSpec};
use sail_core::tensor::Tensor;
use sail_core::tokenizer::{tokenize, Special};
use sail_core::train::{Pair, StageData};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn random_grid(rng: &mut ChaCha8Rng, rows: usize, cols: usize, patch: usize, channels: usize) -> PatchGrid {
    let n = rows * cols * patch * patch * channels;
    let data = (0..n).map(|_| rng.random_range(0u8..=255) as f32 / 255.0).collect();
    PatchGrid::from_vectors(rows, cols, patch, channels, data).unwrap()
}

/// One sample: `<s>`, then a random interleaving of byte runs and images,
/// supervising the bytes and a closing `</s>`.
pub fn random_sample(
    rng: &mut ChaCha8Rng,
    patch: usize,
    channels: usize,
    vision_sep: bool,
    max_side: usize,
) -> MultimodalSequence {
    let mut seq = MultimodalSequence::default();
    seq.push_special(Special::Bos, false);
    for _ in 0..rng.random_range(1..=3) {
        if rng.random_bool(0.5) {
            let (r, c) = (rng.random_range(1..=max_side), rng.random_range(1..=max_side));
            seq.push_image(random_grid(rng, r, c, patch, channels), vision_sep);
        } else {
            for _ in 0..rng.random_range(1..=5) {
                seq.push_text(rng.random_range(32..127), true);
            }
        }
    }
    seq.push_special(Special::Eos, true);
    seq
}

/// Image-caption sample with a random grid and caption.
pub fn captioned(rng: &mut ChaCha8Rng, patch: usize, channels: usize) -> MultimodalSequence {
    let mut seq = MultimodalSequence::default();
    seq.push_special(Special::Bos, false);
    let (r, c) = (rng.random_range(1..=3), rng.random_range(1..=3));
    seq.push_image(random_grid(rng, r, c, patch, channels), false);
    for _ in 0..rng.random_range(3..=10) {
        seq.push_text(rng.random_range(97..123), true);
    }
    seq.push_special(Special::Eos, true);
    seq
}

/// One layer, two heads of width 8.
pub fn micro_config() -> ModelConfig {
    let mut c = ModelConfig::tiny();
    c.d_model = 16;
    c.n_heads = 2;
    c.d_head = 8;
    c.n_layers = 1;
    c.max_pack = 128;
    c.rope = RotaryConfig::new(8);
    c
}

pub fn stage_data(spec: &SyntheticSpec, seed: u64, text_lines: usize) -> StageData {
    let samples = generate_samples(spec, seed).unwrap();
    StageData {
        pairs: samples
            .iter()
            .map(|s| Pair {
                image: s.image.clone(),
                caption: tokenize(s.caption.as_bytes()),
            })
            .collect(),
        text: generate_text(spec, text_lines, seed)
            .iter()
            .map(|l| tokenize(l.as_bytes()))
            .collect(),
    }
}

pub fn labelled_grids(count: usize, seed: u64, patch: usize) -> Vec<(PatchGrid, usize)> {
    let spec = SyntheticSpec {
        count,
        ..Default::default()
    };
    generate_samples(&spec, seed)
        .unwrap()
        .into_iter()
        .map(|s| (patchify(&s.image, patch, ResizePolicy::Fixed(32)).unwrap(), s.label.unwrap()))
        .collect()
}

pub fn captioned_grids(spec: &SyntheticSpec, seed: u64, patch: usize) -> Vec<(PatchGrid, String)> {
    generate_samples(spec, seed)
        .unwrap()
        .into_iter()
        .map(|s| (patchify(&s.image, patch, ResizePolicy::Fixed(32)).unwrap(), s.caption))
        .collect()
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
