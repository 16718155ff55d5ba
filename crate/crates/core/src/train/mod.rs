//! Stage-wise training: data streams, schedule, optimizer and the step loop.

mod data;
mod interleave;
mod optimizer;
mod schedule;

use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::model::checkpoint::Checkpoint;
use crate::model::Model;
use crate::sequence::{MultimodalSequence, PackedBatch};
use crate::tensor::Scalar;
use crate::tokenizer::Special;

pub use crate::model::checkpoint::OptimizerState;
pub use data::{shuffled_packs, Pair, StageData};
pub use interleave::{Next, RoundRobin, StreamKind};
pub use optimizer::{global_norm, AdamW, AdamWConfig};
pub use schedule::{Ablation, Schedule, Stage, StagePlan};

#[derive(Debug, Clone, PartialEq)]
pub struct LogEntry {
    pub step: usize,
    pub stage: Stage,
    pub lr: f64,
    pub loss: f64,
    pub tokens_seen: u64,
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "step,stage,lr,loss,tokens_seen,wall_time";

    pub fn final_loss(&self) -> Option<f64> {
        self.entries.last().map(|e| e.loss)
    }

    pub fn losses(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.loss).collect()
    }

    pub fn extend(&mut self, other: TrainLog) {
        self.entries.extend(other.entries);
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{},{},{:e},{},{},{:.3}",
                e.step,
                e.stage.name(),
                e.lr,
                e.loss,
                e.tokens_seen,
                e.wall_time
            );
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct CheckpointPolicy {
    pub dir: PathBuf,
    /// Save every this many steps; 0 saves only at the end.
    pub every: usize,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub seed: u64,
    /// Added to the in-stage step number in the log and checkpoint names.
    pub step_offset: usize,
    pub checkpoint: Option<CheckpointPolicy>,
    /// Raised externally to stop after the current step.
    pub stop: Option<Arc<AtomicBool>>,
}

/// Supplies packed batches to the step loop.
pub trait BatchSource {
    fn next_batch(&mut self) -> Result<PackedBatch>;
}

/// Cycles through a fixed list of batches.
pub struct Repeat {
    batches: Vec<PackedBatch>,
    next: usize,
}

impl Repeat {
    pub fn new(batches: Vec<PackedBatch>) -> Self {
        Self { batches, next: 0 }
    }
}

impl BatchSource for Repeat {
    fn next_batch(&mut self) -> Result<PackedBatch> {
        if self.batches.is_empty() {
            return Err(Error::config("no training batches"));
        }
        let b = self.batches[self.next % self.batches.len()].clone();
        self.next += 1;
        Ok(b)
    }
}

/// Round-robin multimodal/text stream, reshuffled every epoch.
pub struct EpochStream {
    mm: Vec<MultimodalSequence>,
    text: Vec<MultimodalSequence>,
    text_mix: bool,
    pack_len: usize,
    layout: crate::sequence::LayoutConfig,
    seed: u64,
    epoch: u64,
    current: RoundRobin<PackedBatch>,
}

impl EpochStream {
    pub fn new<T: Scalar>(model: &Model<T>, plan: &StagePlan, data: &StageData, seed: u64) -> Result<Self> {
        let layout = model.config.layout;
        let mm = data.multimodal_sequences(plan.resize, model.config.patch_size, &layout)?;
        let text = data.text_sequences(plan.pack_len)?;
        let text_mix = !plan.ablation.no_text_mix && !text.is_empty();
        if !plan.ablation.no_text_mix && text.is_empty() && !mm.is_empty() {
            log::warn!("no pure-text corpus given; training on the multimodal stream only");
        }
        if mm.is_empty() {
            return Err(Error::config("stage has no image-caption pairs"));
        }
        let mut s = Self {
            mm,
            text,
            text_mix,
            pack_len: plan.pack_len,
            layout,
            seed,
            epoch: 0,
            current: RoundRobin::new(Vec::new(), Vec::new(), false),
        };
        s.current = s.build_epoch()?;
        Ok(s)
    }

    fn build_epoch(&self) -> Result<RoundRobin<PackedBatch>> {
        let base = self.seed ^ self.epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mm = shuffled_packs(&self.mm, base, self.pack_len, &self.layout)?;
        let text = if self.text_mix {
            shuffled_packs(&self.text, base ^ 0x5bd1_e995, self.pack_len, &self.layout)?
        } else {
            Vec::new()
        };
        Ok(RoundRobin::new(mm, text, self.text_mix))
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }
}

impl BatchSource for EpochStream {
    fn next_batch(&mut self) -> Result<PackedBatch> {
        for _ in 0..2 {
            match self.current.next_batch() {
                Next::Batch(_, b) => return Ok(b),
                Next::EpochBoundary => {
                    self.epoch += 1;
                    self.current = self.build_epoch()?;
                }
            }
        }
        Err(Error::config("training streams are empty"))
    }
}

fn real_tokens(b: &PackedBatch) -> u64 {
    let pad = Special::Pad.id();
    b.seq.ids().iter().filter(|id| **id != Some(pad)).count() as u64
}

/// Run one stage on `data`.
pub fn train_stage<T: Scalar>(
    model: &mut Model<T>,
    opt: &mut AdamW<T>,
    plan: &StagePlan,
    data: &StageData,
    opts: &TrainOptions,
) -> Result<TrainLog> {
    plan.validate(model.config.patch_size)?;
    plan.ablation.check_layout(&model.config.layout)?;
    if plan.steps == 0 {
        return Ok(TrainLog::default());
    }
    let mut source = EpochStream::new(model, plan, data, opts.seed)?;
    run_steps(model, opt, plan, &mut source, opts)
}

/// The step loop: forward, masked loss, backward, clip, update, log.
pub fn run_steps<T: Scalar>(
    model: &mut Model<T>,
    opt: &mut AdamW<T>,
    plan: &StagePlan,
    source: &mut dyn BatchSource,
    opts: &TrainOptions,
) -> Result<TrainLog> {
    plan.validate(model.config.patch_size)?;
    let start = Instant::now();
    let mut log = TrainLog::default();
    let mut tokens_seen = 0u64;
    let mut last_good = String::from("none");
    for step in 1..=plan.steps {
        let global = opts.step_offset + step;
        let lr = plan.lr(step);
        let mut total = 0.0;
        let mut grads: Option<Vec<Vec<T>>> = None;
        for _ in 0..plan.batch {
            let batch = source.next_batch()?;
            tokens_seen += real_tokens(&batch);
            let (loss, g) = model.loss_and_grads(&batch)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    step: global,
                    loss,
                    last_good,
                });
            }
            total += loss;
            match &mut grads {
                None => grads = Some(g),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(g) {
                        a.iter_mut().zip(g).for_each(|(a, g)| *a = *a + g);
                    }
                }
            }
        }
        let mut grads = grads.expect("batch is positive");
        if plan.batch > 1 {
            let s = T::of(1.0 / plan.batch as f64);
            grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|v| *v = *v * s);
        }
        let loss = total / plan.batch as f64;
        opt.step(&mut model.params, &mut grads, lr)?;
        log.entries.push(LogEntry {
            step: global,
            stage: plan.stage,
            lr,
            loss,
            tokens_seen,
            wall_time: start.elapsed().as_secs_f64(),
        });
        log::debug!("step {global} lr {lr:.3e} loss {loss:.4}");
        let stopping = opts.stop.as_ref().is_some_and(|s| s.load(Ordering::SeqCst));
        if let Some(policy) = &opts.checkpoint {
            let due = policy.every > 0 && step % policy.every == 0;
            if due || step == plan.steps || stopping {
                last_good = save_checkpoint(model, opt, opts, global, policy)?;
            }
        }
        if stopping {
            log::warn!("stop requested; halting after step {global}");
            break;
        }
    }
    Ok(log)
}

fn save_checkpoint<T: Scalar>(
    model: &Model<T>,
    opt: &AdamW<T>,
    opts: &TrainOptions,
    step: usize,
    policy: &CheckpointPolicy,
) -> Result<String> {
    std::fs::create_dir_all(&policy.dir)?;
    let path = policy.dir.join(format!("ckpt_{step:06}.bin"));
    Checkpoint {
        config: model.config.clone(),
        params: model.params.clone(),
        optimizer: Some(opt.state.clone()),
        seed: opts.seed,
        step: step as u64,
    }
    .save(&path)?;
    Ok(path.display().to_string())
}

/// Supervised-token-weighted mean loss over `batches`.
pub fn evaluate<T: Scalar>(model: &Model<T>, batches: &[PackedBatch]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for b in batches {
        let (_, mask) = b.targets();
        let n = mask.iter().filter(|&&m| m).count();
        if n == 0 {
            continue;
        }
        total += model.loss(b)? * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(Error::NoSupervisedTokens);
    }
    Ok(total / count as f64)
}
