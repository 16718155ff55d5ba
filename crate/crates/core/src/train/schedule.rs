use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patch::ResizePolicy;
use crate::sequence::{AttentionMode, LayoutConfig};
use crate::mrope::PositionMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    S1,
    S2,
    #[serde(rename = "SFT")]
    Sft,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::S1 => "S1",
            Stage::S2 => "S2",
            Stage::Sft => "SFT",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Cosine decay from the first step; `warmup` is ignored.
    Cosine,
    WarmupCosine,
}

/// Ablation switches. The two layout switches must agree with the model's
/// [`LayoutConfig`]; see [`Ablation::apply`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    /// Drop the pure-text stream.
    pub no_text_mix: bool,
    /// Causal attention over image patches too.
    pub causal_only: bool,
    /// Row separators and plain 1D positions for images.
    pub vision_sep_1d: bool,
}

impl Ablation {
    pub fn apply(&self, layout: &mut LayoutConfig) {
        if self.causal_only {
            layout.attention = AttentionMode::CausalOnly;
        }
        if self.vision_sep_1d {
            layout.vision_sep = true;
            layout.positions = PositionMode::Linear;
        }
    }

    pub fn check_layout(&self, layout: &LayoutConfig) -> Result<()> {
        let mut expected = *layout;
        self.apply(&mut expected);
        if expected != *layout {
            return Err(Error::config(
                "ablation flags disagree with the model's attention/position layout",
            ));
        }
        Ok(())
    }
}

fn default_batch() -> usize {
    1
}

fn default_pack_len() -> usize {
    512
}

/// One training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePlan {
    pub stage: Stage,
    pub resize: ResizePolicy,
    pub steps: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    #[serde(default)]
    pub warmup: usize,
    pub schedule: Schedule,
    /// Packed sequences per optimizer step.
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_pack_len")]
    pub pack_len: usize,
    /// Image-caption manifest (JSONL).
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    /// Pure-text corpus, one document per line.
    #[serde(default)]
    pub text: Option<PathBuf>,
    #[serde(default)]
    pub ablation: Ablation,
}

impl StagePlan {
    pub fn new(stage: Stage, resize: ResizePolicy, steps: usize, peak_lr: f64, min_lr: f64) -> Self {
        Self {
            stage,
            resize,
            steps,
            peak_lr,
            min_lr,
            warmup: 0,
            schedule: Schedule::Cosine,
            batch: 1,
            pack_len: default_pack_len(),
            manifest: None,
            text: None,
            ablation: Ablation::default(),
        }
    }

    pub fn with_warmup(mut self, warmup: usize) -> Self {
        self.warmup = warmup;
        self.schedule = Schedule::WarmupCosine;
        self
    }

    pub fn validate(&self, patch_size: usize) -> Result<()> {
        if !(self.min_lr >= 0.0 && self.min_lr <= self.peak_lr && self.peak_lr.is_finite()) {
            return Err(Error::config(format!(
                "{}: need 0 <= min_lr ({}) <= peak_lr ({})",
                self.stage.name(),
                self.min_lr,
                self.peak_lr
            )));
        }
        if self.warmup > self.steps {
            return Err(Error::config(format!(
                "{}: warmup {} exceeds steps {}",
                self.stage.name(),
                self.warmup,
                self.steps
            )));
        }
        if self.batch == 0 || self.pack_len == 0 {
            return Err(Error::config("batch and pack_len must be positive"));
        }
        match (self.stage, self.resize) {
            (Stage::S1, ResizePolicy::Fixed(_)) => {}
            (Stage::S2 | Stage::Sft, ResizePolicy::NativeMultiple) => {}
            (s, r) => {
                return Err(Error::config(format!(
                    "{} does not use resize policy {r:?}",
                    s.name()
                )))
            }
        }
        self.resize.validate(patch_size)
    }

    fn effective_warmup(&self) -> usize {
        match self.schedule {
            Schedule::Cosine => 0,
            Schedule::WarmupCosine => self.warmup,
        }
    }

    /// Learning rate at `step` in `0..=steps`: linear ramp from 0 to peak
    /// over the warmup, then half a cosine from peak down to min.
    pub fn lr(&self, step: usize) -> f64 {
        let warmup = self.effective_warmup();
        if step < warmup {
            return self.peak_lr * step as f64 / warmup as f64;
        }
        if step == warmup || self.steps <= warmup {
            return self.peak_lr;
        }
        if step >= self.steps {
            return self.min_lr;
        }
        let p = (step - warmup) as f64 / (self.steps - warmup) as f64;
        self.min_lr + (self.peak_lr - self.min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
    }
}
