//! Acceptance criteria 1 to 12. Each test prints one PASS/FAIL line.
//!
//! The tests take a shared lock so wall-clock budgets are measured without
//! competing for the CPU.

mod common;

use std::path::Path;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;

use common::*;
use sail_core::analysis::{
    caption_loss_retrieval, image_attention_allocation, image_fraction, linear_probe, permute_weights,
    DistractorPolicy, ProbeConfig,
};
use sail_core::model::checkpoint::{Checkpoint, OptimizerState};
use sail_core::model::params::{layer_slots, PATCH_W};
use sail_core::model::{generate, Decoding, Model, ModelConfig};
use sail_core::mrope::{apply_rotary, assign_position_ids, PositionMode, RotaryConfig};
use sail_core::patch::ResizePolicy;
use sail_core::sequence::{
    assemble_prompt, assemble_sequence, build_attention_mask, AttentionMode,
    LayoutConfig, MultimodalSequence, PackedBatch, Token,
};
use sail_core::synth::{generate_samples, write_dataset, SyntheticSpec};
use sail_core::tensor::gradcheck::{grad_check_entries, Entries};
use sail_core::tensor::{AttentionBias, Graph, Tensor, Var};
use sail_core::tokenizer::{tokenize, Special};
use sail_core::train::{
    evaluate, run_steps, shuffled_packs, train_stage, AdamW, AdamWConfig, Repeat, Stage, StageData, StagePlan,
    TrainLog, TrainOptions,
};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(n: u32, name: &str, pass: bool, detail: &str) {
    println!("criterion {n:>2} {name}: {} [{detail}]", if pass { "PASS" } else { "FAIL" });
}

// ---------------------------------------------------------------- 1

fn image_block(seq: &MultimodalSequence, i: usize, boundary_in_block: bool) -> Option<u32> {
    match seq.tokens[i] {
        Token::Patch { image, .. } => Some(image),
        Token::Special(Special::VisionStart) if boundary_in_block => seq.tokens[i + 1..]
            .iter()
            .find_map(|t| match t {
                Token::Patch { image, .. } => Some(*image),
                _ => None,
            }),
        Token::Special(Special::VisionEnd | Special::VisionSep) if boundary_in_block => seq.tokens[..i]
            .iter()
            .rev()
            .find_map(|t| match t {
                Token::Patch { image, .. } => Some(*image),
                _ => None,
            }),
        _ => None,
    }
}

fn oracle_allowed(seq: &MultimodalSequence, mode: AttentionMode, boundary_in_block: bool, i: usize, j: usize) -> bool {
    if seq.sample_id[i] != seq.sample_id[j] {
        return false;
    }
    if j <= i {
        return true;
    }
    if mode == AttentionMode::CausalOnly {
        return false;
    }
    let (a, b) = (image_block(seq, i, boundary_in_block), image_block(seq, j, boundary_in_block));
    a.is_some() && a == b
}

#[test]
fn c01_mask_matches_rule_oracle() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = rng(1);
    let mut layouts = 0;
    let mut pairs = 0usize;
    let mut mismatches = 0usize;
    while layouts < 1000 {
        let mode = if rng.random_bool(0.75) { AttentionMode::Mixed } else { AttentionMode::CausalOnly };
        let vision_sep = rng.random_bool(0.3);
        let boundary = rng.random_bool(0.3);
        let k = rng.random_range(1..=3);
        let seqs: Vec<MultimodalSequence> = (0..k).map(|_| random_sample(&mut rng, 1, 1, vision_sep, 3)).collect();
        let total: usize = seqs.iter().map(MultimodalSequence::len).sum();
        if total > 64 {
            continue;
        }
        let pack_len = rng.random_range(total..=64);
        let members: Vec<usize> = (0..k).collect();
        let layout = LayoutConfig {
            attention: mode,
            boundary_in_block: boundary,
            ..Default::default()
        };
        let batch = PackedBatch::build(&seqs, &members, pack_len, &layout).unwrap();
        let seq = &batch.seq;
        let bias = build_attention_mask(seq, mode, boundary);
        for i in 0..seq.len() {
            for j in 0..seq.len() {
                pairs += 1;
                if bias.is_allowed(i, j) != oracle_allowed(seq, mode, boundary, i, j) {
                    mismatches += 1;
                }
                if batch.layout.bias.is_allowed(i, j) != bias.is_allowed(i, j) {
                    mismatches += 1;
                }
            }
        }
        layouts += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = mismatches == 0 && secs < 10.0;
    verdict(1, "mask oracle equivalence", pass, &format!("{layouts} layouts, {pairs} pairs, {mismatches} mismatches, {secs:.2}s"));
    assert!(pass);
}

// ---------------------------------------------------------------- 2

fn sample_loss(model: &Model<f64>, batch: &PackedBatch, sample: usize) -> f64 {
    let (targets, mask) = batch.targets();
    let keep = batch.sample_mask(sample);
    let mask: Vec<bool> = mask.iter().zip(&keep).map(|(&m, &k)| m && k).collect();
    model.masked_loss(&batch.seq, &batch.layout, &targets, &mask).unwrap()
}

fn perturb(seq: &MultimodalSequence, rng: &mut rand_chacha::ChaCha8Rng) -> MultimodalSequence {
    let mut out = seq.clone();
    for t in out.tokens.iter_mut() {
        if let Token::Text(id) = t {
            *id = rng.random_range(97..123);
        }
    }
    out.images = out
        .images
        .iter()
        .map(|g| random_grid(rng, g.rows, g.cols, g.patch_size, g.channels))
        .collect();
    out
}

#[test]
fn c02_packed_samples_are_isolated() {
    let _g = serial();
    let start = Instant::now();
    let cfg = ModelConfig::tiny();
    let m32 = Model::<f32>::init(cfg.clone(), 3).unwrap();
    let m64: Model<f64> = m32.cast();
    let layout = cfg.layout;
    let mut rng = rng(2);
    let mut worst = 0.0f64;
    let mut leaks = 0;
    for _ in 0..50 {
        let a = captioned(&mut rng, cfg.patch_size, cfg.channels);
        let b = captioned(&mut rng, cfg.patch_size, cfg.channels);
        let pack_len = a.len() + b.len() + rng.random_range(0..8);
        let seqs = vec![a.clone(), b.clone()];
        let packed = PackedBatch::build(&seqs, &[0, 1], pack_len, &layout).unwrap();
        let logits = m32.logits(&packed.seq, &packed.layout).unwrap();
        for (s, solo) in seqs.iter().enumerate() {
            let single = PackedBatch::single(solo, &layout);
            let ref_logits = m32.logits(&single.seq, &single.layout).unwrap();
            let p = packed.samples[s];
            for r in 0..p.len {
                for (x, y) in logits.row(p.start + r).iter().zip(ref_logits.row(r)) {
                    let rel = (x - y).abs() as f64 / (y.abs() as f64).max(1e-3);
                    worst = worst.max(rel);
                }
            }
        }
        let before = sample_loss(&m64, &packed, 1);
        let changed = vec![perturb(&a, &mut rng), b.clone()];
        let repacked = PackedBatch::build(&changed, &[0, 1], pack_len, &layout).unwrap();
        assert_ne!(sample_loss(&m64, &repacked, 0), sample_loss(&m64, &packed, 0));
        if sample_loss(&m64, &repacked, 1).to_bits() != before.to_bits() {
            leaks += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst <= 1e-4 && leaks == 0 && secs < 60.0;
    verdict(2, "packed isolation", pass, &format!("max rel logit diff {worst:.2e}, {leaks} leaks, {secs:.2}s"));
    assert!(pass);
}

// ---------------------------------------------------------------- 3

fn rope_1d_f64(x: &[f64], n: usize, d: usize, theta: f64) -> Vec<f64> {
    let mut out = x.to_vec();
    for i in 0..n {
        for k in 0..d / 2 {
            let angle = i as f64 * theta.powf(-2.0 * k as f64 / d as f64);
            let (s, c) = angle.sin_cos();
            let (a, b) = (x[i * d + 2 * k], x[i * d + 2 * k + 1]);
            out[i * d + 2 * k] = a * c - b * s;
            out[i * d + 2 * k + 1] = a * s + b * c;
        }
    }
    out
}

fn rope_1d_f32(x: &[f32], n: usize, d: usize, theta: f64) -> Vec<f32> {
    let mut out = x.to_vec();
    for i in 0..n {
        for k in 0..d / 2 {
            let angle = i as f64 * theta.powf(-2.0 * k as f64 / d as f64);
            let (s, c) = angle.sin_cos();
            let (s, c) = (s as f32, c as f32);
            let (a, b) = (x[i * d + 2 * k], x[i * d + 2 * k + 1]);
            out[i * d + 2 * k] = a * c - b * s;
            out[i * d + 2 * k + 1] = a * s + b * c;
        }
    }
    out
}

#[test]
fn c03_mrope_degenerates_to_1d_on_text() {
    let _g = serial();
    let mut rng = rng(3);
    let mut ok = true;
    for trial in 0..20 {
        let n = rng.random_range(1..80);
        let ids: Vec<u32> = (0..n).map(|_| rng.random_range(0..256)).collect();
        let seq = assemble_sequence(&[], &ids, false).unwrap();
        let table = assign_position_ids(&seq, PositionMode::Mrope);
        ok &= table.ids.iter().enumerate().all(|(i, &(h, w))| h == i as u32 && w == i as u32);
        let d = [4, 8, 16, 32][trial % 4];
        let mut cfg = RotaryConfig::new(d);
        if trial % 2 == 1 {
            cfg.axis_split = sail_core::mrope::AxisSplit::Interleaved;
        }
        let x = random_tensor(&mut rng, &[seq.len(), d]);
        let got = apply_rotary(&x, &table, &cfg).unwrap();
        let want = rope_1d_f64(x.data(), seq.len(), d, cfg.theta);
        ok &= got.data().iter().zip(&want).all(|(a, b)| a.to_bits() == b.to_bits());
        let x32: Tensor<f32> = x.cast();
        let got = apply_rotary(&x32, &table, &cfg).unwrap();
        let want = rope_1d_f32(x32.data(), seq.len(), d, cfg.theta);
        ok &= got.data().iter().zip(&want).all(|(a, b)| a.to_bits() == b.to_bits());
    }

    let mut seq = MultimodalSequence::default();
    seq.push_text(b'a' as u32, false);
    seq.push_image(random_grid(&mut rng, 2, 2, 1, 1), false);
    seq.push_text(b'b' as u32, false);
    let table = assign_position_ids(&seq, PositionMode::Mrope);
    let worked = [(0, 0), (1, 1), (2, 2), (2, 3), (3, 2), (3, 3), (4, 4), (5, 5)];
    ok &= table.ids == worked;

    let mut seq = MultimodalSequence::default();
    seq.push_text(b'a' as u32, false);
    seq.push_image(random_grid(&mut rng, 1, 3, 1, 1), false);
    seq.push_text(b'b' as u32, false);
    let table = assign_position_ids(&seq, PositionMode::Mrope);
    ok &= table.ids == [(0, 0), (1, 1), (2, 2), (2, 3), (2, 4), (5, 5), (6, 6)];

    verdict(3, "M-RoPE degeneracy", ok, "20 text sequences bit-identical, worked id tables exact");
    assert!(ok);
}

// ---------------------------------------------------------------- 4

type OpFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> sail_core::Result<Var>>;

/// Random linear read-out so every output entry matters.
fn readout(g: &mut Graph<f64>, out: Var, w: &Tensor<f64>) -> sail_core::Result<Var> {
    let c = g.constant(w.clone());
    let p = g.matmul(out, c)?;
    Ok(g.sum(p))
}

fn op_cases(rng: &mut rand_chacha::ChaCha8Rng) -> Vec<(&'static str, Vec<Tensor<f64>>, OpFn)> {
    let r = |rng: &mut rand_chacha::ChaCha8Rng, s: &[usize]| random_tensor(rng, s);
    let w5 = r(rng, &[5, 1]);
    let w4 = r(rng, &[4, 1]);
    let w8 = r(rng, &[8, 1]);
    let mut cases: Vec<(&'static str, Vec<Tensor<f64>>, OpFn)> = Vec::new();
    {
        let w = w5.clone();
        cases.push(("matmul", vec![r(rng, &[3, 4]), r(rng, &[4, 5])], Box::new(move |g, v| {
            let o = g.matmul(v[0], v[1])?;
            readout(g, o, &w)
        })));
    }
    {
        let w = w4.clone();
        cases.push(("add", vec![r(rng, &[3, 4]), r(rng, &[3, 4])], Box::new(move |g, v| {
            let o = g.add(v[0], v[1])?;
            readout(g, o, &w)
        })));
    }
    {
        let w = w4.clone();
        cases.push(("add_row_bias", vec![r(rng, &[3, 4]), r(rng, &[4])], Box::new(move |g, v| {
            let o = g.add_row_bias(v[0], v[1])?;
            readout(g, o, &w)
        })));
    }
    {
        let w = w4.clone();
        cases.push(("scale", vec![r(rng, &[3, 4])], Box::new(move |g, v| {
            let o = g.scale(v[0], -1.7);
            readout(g, o, &w)
        })));
    }
    cases.push(("sum", vec![r(rng, &[3, 4])], Box::new(|g, v| Ok(g.sum(v[0])))));
    {
        let w = w4.clone();
        let rows: Vec<usize> = (0..6).map(|_| rng.random_range(0..3)).collect();
        cases.push(("gather_rows", vec![r(rng, &[3, 4])], Box::new(move |g, v| {
            let o = g.gather_rows(v[0], rows.clone())?;
            readout(g, o, &w)
        })));
    }
    {
        let w = w4.clone();
        cases.push(("concat_rows", vec![r(rng, &[2, 4]), r(rng, &[3, 4])], Box::new(move |g, v| {
            let o = g.concat_rows(&[v[1], v[0]])?;
            readout(g, o, &w)
        })));
    }
    {
        let w = w4.clone();
        cases.push(("rms_norm", vec![r(rng, &[3, 4]), r(rng, &[4])], Box::new(move |g, v| {
            let o = g.rms_norm(v[0], v[1], 1e-5)?;
            readout(g, o, &w)
        })));
    }
    {
        let w = w4.clone();
        cases.push(("swiglu", vec![r(rng, &[3, 4]), r(rng, &[3, 4])], Box::new(move |g, v| {
            let o = g.swiglu(v[0], v[1])?;
            readout(g, o, &w)
        })));
    }
    {
        let w = w8.clone();
        let mut seq = MultimodalSequence::default();
        seq.push_special(Special::Bos, false);
        seq.push_image(random_grid(rng, 2, 2, 1, 1), false);
        let table = assign_position_ids(&seq, PositionMode::Mrope);
        let rot = std::sync::Arc::new(table.rotation::<f64>(&RotaryConfig::new(4)));
        let n = seq.len();
        cases.push(("rotary", vec![r(rng, &[n, 8])], Box::new(move |g, v| {
            let o = g.rotary(v[0], rot.clone())?;
            readout(g, o, &w)
        })));
    }
    {
        let w = w8.clone();
        let n = 5;
        let rows: Vec<Vec<u32>> = (0..n)
            .map(|i| (0..n as u32).filter(|&j| j as usize == i || rng.random_bool(0.5)).collect())
            .collect();
        let bias = std::sync::Arc::new(AttentionBias::from_rows(n, n, rows).unwrap());
        cases.push(("attention", vec![r(rng, &[n, 8]), r(rng, &[n, 8]), r(rng, &[n, 8])], Box::new(move |g, v| {
            let o = g.attention(v[0], v[1], v[2], bias.clone(), 2)?;
            readout(g, o, &w)
        })));
    }
    {
        let targets: Vec<usize> = (0..5).map(|_| rng.random_range(0..7)).collect();
        let mut mask: Vec<bool> = (0..5).map(|_| rng.random_bool(0.6)).collect();
        mask[0] = true;
        cases.push(("masked_cross_entropy", vec![r(rng, &[5, 7])], Box::new(move |g, v| {
            g.masked_cross_entropy(v[0], &targets, &mask)
        })));
    }
    cases
}

#[test]
fn c04_gradients_match_finite_differences() {
    let _g = serial();
    let start = Instant::now();
    let mut worst = (0.0f64, "none");
    let mut model_worst = 0.0f64;
    for seed in 0..20u64 {
        let mut rng = rng(400 + seed);
        for (name, inputs, f) in op_cases(&mut rng) {
            let rep = grad_check_entries(f, &inputs, 1e-6, Entries::All).unwrap();
            if rep.max_rel_error > worst.0 {
                worst = (rep.max_rel_error, name);
            }
        }
        let cfg = ModelConfig::tiny();
        let model = Model::<f64>::init(cfg.clone(), seed).unwrap();
        let seq = captioned(&mut rng, cfg.patch_size, cfg.channels);
        let batch = PackedBatch::single(&seq, &cfg.layout);
        let rep = model.grad_check(&batch, 3, seed, 1e-4).unwrap();
        model_worst = model_worst.max(rep.max_rel_error);
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst.0 < 1e-4 && model_worst < 1e-4 && secs < 300.0;
    verdict(
        4,
        "gradient correctness",
        pass,
        &format!("ops max {:.2e} ({}), tiny model max {model_worst:.2e}, 20 seeds, {secs:.1}s", worst.0, worst.1),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 5

#[test]
fn c05_loss_only_supervises_text() {
    let _g = serial();
    let cfg = ModelConfig::tiny();
    let model = Model::<f32>::init(cfg.clone(), 5).unwrap();
    let mut rng = rng(5);
    let mut leaked_rows = 0;
    let mut min_patch_norm = f64::INFINITY;
    let mut images_seen = 0;
    for trial in 0..20 {
        let seqs: Vec<MultimodalSequence> = (0..rng.random_range(1..=3))
            .map(|_| random_sample(&mut rng, cfg.patch_size, cfg.channels, trial % 2 == 0, 3))
            .collect();
        let total: usize = seqs.iter().map(MultimodalSequence::len).sum();
        let members: Vec<usize> = (0..seqs.len()).collect();
        let batch = PackedBatch::build(&seqs, &members, total + 5, &cfg.layout).unwrap();
        let (targets, mask) = batch.targets();
        let mut g = Graph::new();
        let f = model.forward(&mut g, &batch.seq, &batch.layout, true).unwrap();
        let loss = g.masked_cross_entropy(f.logits, &targets, &mask).unwrap();
        g.backward(loss).unwrap();
        let dlogits = g.grad(f.logits).unwrap();
        let v = cfg.vocab;
        for (i, &m) in mask.iter().enumerate() {
            if !m && dlogits[i * v..(i + 1) * v].iter().any(|&x| x != 0.0) {
                leaked_rows += 1;
            }
        }
        if !batch.seq.images.is_empty() {
            images_seen += 1;
            let gw = g.grad(f.params[PATCH_W]).map(<[f32]>::to_vec).unwrap_or_default();
            let norm = gw.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
            min_patch_norm = min_patch_norm.min(norm);
        }
    }
    let pass = leaked_rows == 0 && images_seen > 0 && min_patch_norm > 0.0;
    verdict(
        5,
        "loss masking contract",
        pass,
        &format!("{leaked_rows} unsupervised rows with gradient, min patch-proj grad norm {min_patch_norm:.3e} over {images_seen} batches"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 6

#[test]
fn c06_training_sanity() {
    let _g = serial();
    let cfg = ModelConfig::tiny();
    let mut model = Model::<f32>::init(cfg.clone(), 6).unwrap();
    let spec = SyntheticSpec {
        count: 4,
        ..Default::default()
    };
    let data = stage_data(&spec, 6, 0);
    let seqs = data.multimodal_sequences(ResizePolicy::Fixed(32), cfg.patch_size, &cfg.layout).unwrap();
    let total = seqs.iter().map(MultimodalSequence::len).sum();
    let batch = PackedBatch::build(&seqs, &[0, 1, 2, 3], total, &cfg.layout).unwrap();
    let mut opt = AdamW::new(AdamWConfig::default(), &cfg);
    let plan = StagePlan::new(Stage::S1, ResizePolicy::Fixed(32), 200, 1e-3, 1e-4).with_warmup(10);
    let log = run_steps(&mut model, &mut opt, &plan, &mut Repeat::new(vec![batch]), &TrainOptions::default()).unwrap();
    let fin = log.final_loss().unwrap();
    let first_below = log.entries.iter().find(|e| e.loss < 0.1).map(|e| e.step);

    let paper = StagePlan::new(Stage::S1, ResizePolicy::Fixed(32), 1000, 5e-5, 5e-6).with_warmup(50);
    let endpoints = paper.lr(50) == 5e-5 && paper.lr(1000) == 5e-6;
    let mut micro = Model::<f32>::init(micro_config(), 0).unwrap();
    let mut micro_opt = AdamW::new(AdamWConfig::default(), &micro.config);
    let seq = assemble_sequence(&[], &tokenize(b"abc"), false).unwrap();
    let short = StagePlan::new(Stage::S1, ResizePolicy::Fixed(32), 4, 5e-5, 5e-6).with_warmup(2);
    let micro_log = run_steps(
        &mut micro,
        &mut micro_opt,
        &short,
        &mut Repeat::new(vec![PackedBatch::single(&seq, &LayoutConfig::default())]),
        &TrainOptions::default(),
    )
    .unwrap();
    let logged = micro_log.entries[1].lr == 5e-5 && micro_log.entries[3].lr == 5e-6;

    let pass = fin < 0.1 && endpoints && logged;
    verdict(
        6,
        "training sanity",
        pass,
        &format!("overfit final loss {fin:.4} (first < 0.1 at step {first_below:?}), lr endpoints exact: {endpoints}, logged: {logged}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 7

fn train_run(cfg: ModelConfig, plan: &StagePlan, data: &StageData, seed: u64) -> (Model<f32>, TrainLog) {
    let mut model = Model::<f32>::init(cfg.clone(), seed).unwrap();
    let mut opt = AdamW::new(AdamWConfig::default(), &cfg);
    let opts = TrainOptions {
        seed,
        ..Default::default()
    };
    let log = train_stage(&mut model, &mut opt, plan, data, &opts).unwrap();
    (model, log)
}

fn held_out_loss(model: &Model<f32>, data: &StageData, resize: ResizePolicy, pack_len: usize) -> f64 {
    let layout = model.config.layout;
    let seqs = data.multimodal_sequences(resize, model.config.patch_size, &layout).unwrap();
    let packs = shuffled_packs(&seqs, 0, pack_len, &layout).unwrap();
    evaluate(model, &packs).unwrap()
}

#[test]
fn c07_small_beats_tiny() {
    let _g = serial();
    let start = Instant::now();
    let spec = SyntheticSpec {
        count: 1024,
        ..Default::default()
    };
    let data = stage_data(&spec, 0, 512);
    let held = stage_data(&SyntheticSpec { count: 64, ..spec.clone() }, 99, 0);
    let mut plan = StagePlan::new(Stage::S1, ResizePolicy::Fixed(32), 200, 1e-3, 1e-4).with_warmup(10);
    plan.pack_len = 256;
    let mut finals = [Vec::new(), Vec::new()];
    let mut evals = [Vec::new(), Vec::new()];
    for (k, cfg) in [ModelConfig::tiny(), ModelConfig::small()].into_iter().enumerate() {
        for seed in 0..3 {
            let (model, log) = train_run(cfg.clone(), &plan, &data, seed);
            finals[k].push(log.final_loss().unwrap());
            evals[k].push(held_out_loss(&model, &held, plan.resize, plan.pack_len));
        }
    }
    let (tiny, small) = (median(finals[0].clone()), median(finals[1].clone()));
    let mins = start.elapsed().as_secs_f64() / 60.0;
    let pass = small <= tiny && mins < 30.0;
    verdict(
        7,
        "scaling trend",
        pass,
        &format!(
            "median final loss tiny {tiny:.4} small {small:.4}; held-out tiny {:.4} small {:.4}; {mins:.1} min",
            median(evals[0].clone()),
            median(evals[1].clone())
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 8

#[test]
fn c08_ablation_harness() {
    let _g = serial();
    let spec = SyntheticSpec {
        count: 512,
        relation: true,
        ..Default::default()
    };
    let data = stage_data(&spec, 8, 256);
    let held = stage_data(&SyntheticSpec { count: 64, ..spec.clone() }, 98, 0);
    let variants = ["mixed", "causal_only+vision_sep_1d", "no_text_mix"];
    let mut val = vec![Vec::new(); 3];
    let mut logs: Vec<TrainLog> = Vec::new();
    for (v, name) in variants.iter().enumerate() {
        for seed in 0..3 {
            let mut plan = StagePlan::new(Stage::S1, ResizePolicy::Fixed(32), 150, 1e-3, 1e-4).with_warmup(8);
            plan.pack_len = 256;
            match *name {
                "causal_only+vision_sep_1d" => {
                    plan.ablation.causal_only = true;
                    plan.ablation.vision_sep_1d = true;
                }
                "no_text_mix" => plan.ablation.no_text_mix = true,
                _ => {}
            }
            let mut cfg = ModelConfig::tiny();
            plan.ablation.apply(&mut cfg.layout);
            let (model, log) = train_run(cfg, &plan, &data, seed);
            val[v].push(held_out_loss(&model, &held, plan.resize, plan.pack_len));
            logs.push(log);
        }
    }
    let comparable = logs.iter().all(|l| {
        l.entries.len() == 150
            && l.entries.iter().all(|e| e.loss.is_finite())
            && l.entries.iter().zip(&logs[0].entries).all(|(a, b)| a.step == b.step && a.lr == b.lr)
            && l.to_csv().starts_with(TrainLog::CSV_HEADER)
    });
    let med: Vec<f64> = val.iter().map(|v| median(v.clone())).collect();
    verdict(
        8,
        "ablation harness",
        comparable,
        &format!(
            "median validation loss: mixed {:.4}, causal_only+vision_sep_1d {:.4}, no_text_mix {:.4}; mixed {} causal",
            med[0],
            med[1],
            med[2],
            if med[0] < med[1] { "beats" } else { "does not beat" }
        ),
    );
    assert!(comparable);
}

// ---------------------------------------------------------------- 9, 10

struct Trained {
    model: Model<f32>,
    train_time: Duration,
}

fn trained_s1() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let spec = SyntheticSpec {
            count: 2048,
            ..Default::default()
        };
        let data = stage_data(&spec, 0, 0);
        let plan = StagePlan::new(Stage::S1, ResizePolicy::Fixed(32), 1500, 1e-3, 1e-4).with_warmup(75);
        let (model, _) = train_run(ModelConfig::tiny(), &plan, &data, 0);
        Trained {
            model,
            train_time: start.elapsed(),
        }
    })
}

#[test]
fn c09_probe_separates_trained_from_random() {
    let _g = serial();
    let t = trained_s1();
    let start = Instant::now();
    let train = labelled_grids(400, 7, 4);
    let test = labelled_grids(200, 8, 4);
    let cfg = ProbeConfig::default();
    let trained = linear_probe(&t.model, &train, &test, 4, &cfg).unwrap().top1;
    let permuted = linear_probe(&permute_weights(&t.model, 3), &train, &test, 4, &cfg).unwrap().top1;
    let init = linear_probe(&Model::<f32>::init(ModelConfig::tiny(), 5).unwrap(), &train, &test, 4, &cfg)
        .unwrap()
        .top1;
    let secs = (t.train_time + start.elapsed()).as_secs_f64();
    let pass = trained >= 0.90 && permuted <= 0.40 && init <= 0.40 && secs < 600.0;
    verdict(
        9,
        "probe analog",
        pass,
        &format!("top-1 trained {trained:.3}, permuted {permuted:.3}, untrained {init:.3}; {secs:.0}s including training"),
    );
    assert!(pass);
}

#[test]
fn c10_caption_retrieval() {
    let _g = serial();
    let t = trained_s1();
    let pairs = captioned_grids(
        &SyntheticSpec {
            count: 200,
            ..Default::default()
        },
        9,
        4,
    );
    let trained = caption_loss_retrieval(&t.model, &pairs, DistractorPolicy::ShuffledWords, 1).unwrap();
    let untrained_model = Model::<f32>::init(ModelConfig::tiny(), 5).unwrap();
    let untrained = caption_loss_retrieval(&untrained_model, &pairs, DistractorPolicy::ShuffledWords, 1).unwrap();
    let cross = caption_loss_retrieval(&t.model, &pairs, DistractorPolicy::CrossImage { count: 3 }, 1).unwrap();
    let n = untrained.trials as f64;
    let band = 2.576 * (0.25 / n).sqrt();
    let chance = (untrained.accuracy - 0.5).abs() <= band;
    let pass = trained.accuracy >= 0.90 && chance;
    verdict(
        10,
        "retrieval analog",
        pass,
        &format!(
            "trained {:.3}, untrained {:.3} (chance band 0.5 +/- {band:.3}, n={}), cross-image trained {:.3}",
            trained.accuracy, untrained.accuracy, untrained.trials, cross.accuracy
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 11

fn uniform_attention_model() -> Model<f32> {
    let cfg = ModelConfig::tiny();
    let mut m = Model::<f32>::init(cfg.clone(), 11).unwrap();
    for l in 0..cfg.n_layers {
        let s = layer_slots(l);
        for slot in [s.wq, s.wk] {
            m.params.tensors[slot].data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }
    m
}

#[test]
fn c11_attention_flow_instrument() {
    let _g = serial();
    let mut rng = rng(11);
    let mut exact = true;
    for t_vis in [1usize, 2, 4, 8, 16, 32, 64, 128, 256] {
        for k in 0..=t_vis {
            let row = vec![1.0 / t_vis as f64; t_vis];
            let mut keys: Vec<bool> = (0..t_vis).map(|i| i < k).collect();
            keys.shuffle(&mut rng);
            exact &= image_fraction(&row, &keys).0 == k as f64 / t_vis as f64;
        }
    }
    let mut general = 0.0f64;
    for t_vis in 3..200usize {
        let k = rng.random_range(0..=t_vis);
        let row = vec![1.0 / t_vis as f64; t_vis];
        let keys: Vec<bool> = (0..t_vis).map(|i| i < k).collect();
        general = general.max((image_fraction(&row, &keys).0 - k as f64 / t_vis as f64).abs());
    }

    let uniform = uniform_attention_model();
    let cfg = uniform.config.clone();
    let prompt = assemble_prompt(&[random_grid(&mut rng, 3, 2, cfg.patch_size, cfg.channels)], false);
    let out = generate(&uniform, &prompt, 6, Decoding::Greedy, true).unwrap();
    let mut fixture = 0.0f64;
    for step in &out.trace {
        let t_vis = step.image_keys.len();
        let k = step.image_keys.iter().filter(|&&b| b).count();
        for layer in &step.attention {
            for head in layer {
                fixture = fixture.max((image_fraction(head, &step.image_keys).0 - k as f64 / t_vis as f64).abs());
            }
        }
    }

    let model = Model::<f32>::init(cfg.clone(), 12).unwrap();
    let mut bounded = true;
    let mut complement = 0.0f64;
    for s in 0..6 {
        let grid = random_grid(&mut rng, 1 + s % 3, 2, cfg.patch_size, cfg.channels);
        let prompt = assemble_prompt(&[grid], false);
        let out = generate(&model, &prompt, 5, Decoding::Temperature { tau: 1.0, seed: s as u64 }, true).unwrap();
        for step in &out.trace {
            for layer in &step.attention {
                for head in layer {
                    let (img, other) = image_fraction(head, &step.image_keys);
                    bounded &= (0.0..=1.0).contains(&img) && (0.0..=1.0).contains(&other);
                    complement = complement.max((img + other - 1.0).abs());
                }
            }
        }
    }
    let prompts: Vec<MultimodalSequence> = (0..4)
        .map(|_| assemble_prompt(&[random_grid(&mut rng, 2, 2, cfg.patch_size, cfg.channels)], false))
        .collect();
    for per_head in [false, true] {
        let rep = image_attention_allocation(&model, &prompts, None, 4, !per_head, "init").unwrap();
        bounded &= rep.layers.iter().all(|l| (0.0..=1.0).contains(&l.mean) && l.n > 0);
    }

    let pass = exact && general <= 1e-14 && fixture <= 1e-6 && bounded && complement <= 1e-6;
    verdict(
        11,
        "attention-flow instrument",
        pass,
        &format!(
            "power-of-two rows exact: {exact}, other rows max err {general:.1e}, uniform model max err {fixture:.1e}, in [0,1]: {bounded}, complement err {complement:.1e}"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 12

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn checkpoint_round_trip<T: sail_core::tensor::Scalar>(model: &Model<T>, dir: &Path) -> bool {
    let mut rng = rng(12);
    let moments = |rng: &mut rand_chacha::ChaCha8Rng| {
        model
            .params
            .tensors
            .iter()
            .map(|t| random_tensor(rng, t.shape()).cast::<T>())
            .collect::<Vec<_>>()
    };
    let ck = Checkpoint {
        config: model.config.clone(),
        params: model.params.clone(),
        optimizer: Some(OptimizerState {
            step: 17,
            m: moments(&mut rng),
            v: moments(&mut rng),
        }),
        seed: 12,
        step: 17,
    };
    let path = dir.join("m.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::<T>::load(&path, Some(&model.config)).unwrap();
    let bits = |c: &Checkpoint<T>| -> Vec<u64> {
        let opt = c.optimizer.as_ref().unwrap();
        c.params
            .tensors
            .iter()
            .chain(&opt.m)
            .chain(&opt.v)
            .flat_map(|t| t.to_f64_vec())
            .map(f64::to_bits)
            .collect()
    };
    bits(&ck) == bits(&back)
        && back.config == ck.config
        && back.step == 17
        && std::fs::read(&path).unwrap() == back.to_bytes().unwrap()
}

#[test]
fn c12_round_trip_formats() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let m32 = Model::<f32>::init(ModelConfig::tiny(), 12).unwrap();
    let ck32 = checkpoint_round_trip(&m32, dir.path());
    let ck64 = checkpoint_round_trip(&m32.cast::<f64>(), dir.path());

    let specs = [
        SyntheticSpec {
            count: 24,
            text_lines: 10,
            ..Default::default()
        },
        SyntheticSpec {
            count: 12,
            relation: true,
            ..Default::default()
        },
        SyntheticSpec {
            count: 12,
            size_range: Some((16, 40)),
            ..Default::default()
        },
    ];
    let mut corpus = true;
    for (i, spec) in specs.iter().enumerate() {
        let a = dir.path().join(format!("a{i}"));
        let b = dir.path().join(format!("b{i}"));
        write_dataset(spec, 77, &a).unwrap();
        write_dataset(spec, 77, &b).unwrap();
        let (ta, tb) = (tree_bytes(&a), tree_bytes(&b));
        corpus &= !ta.is_empty() && ta == tb;
        corpus &= generate_samples(spec, 77).unwrap() == generate_samples(spec, 77).unwrap();
    }
    let pass = ck32 && ck64 && corpus;
    verdict(
        12,
        "round-trip formats",
        pass,
        &format!("checkpoint f32 {ck32}, f64 {ck64}; corpus regeneration identical {corpus}"),
    );
    assert!(pass);
}


