//! TOML run configuration and the multi-stage training driver.
//!
//! ```toml
//! seed = 7
//! preset = "tiny"            # or a full [model] table
//! checkpoint_every = 100     # 0: only at the end of each stage
//!
//! [ablation]
//! no_text_mix = false
//! causal_only = false
//! vision_sep_1d = false
//!
//! [[stages]]
//! stage = "S1"
//! resize = { fixed = 32 }
//! steps = 200
//! peak_lr = 1e-3
//! min_lr = 1e-4
//! warmup = 10
//! schedule = "warmup_cosine"
//! pack_len = 512
//! manifest = "data/manifest.jsonl"
//! text = "data/text.txt"
//! ```
//!
//! Relative paths resolve against the config file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::checkpoint::Checkpoint;
use crate::model::{Model, ModelConfig, Preset};
use crate::train::{
    evaluate, shuffled_packs, train_stage, Ablation, AdamW, AdamWConfig, CheckpointPolicy, StageData,
    StagePlan, TrainLog, TrainOptions,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub preset: Option<Preset>,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Held-out manifest scored after the last stage.
    #[serde(default)]
    pub validation: Option<PathBuf>,
    pub stages: Vec<StagePlan>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    /// Read, resolve relative paths and validate.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::parse(&std::fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(x) = p {
                if x.is_relative() {
                    *x = base.join(&*x);
                }
            }
        };
        fix(&mut self.out);
        fix(&mut self.validation);
        for s in &mut self.stages {
            fix(&mut s.manifest);
            fix(&mut s.text);
        }
    }

    /// Architecture with the ablation layout applied.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut m = match (&self.model, self.preset) {
            (Some(_), Some(_)) => return Err(Error::config("give either `preset` or `[model]`, not both")),
            (Some(m), None) => m.clone(),
            (None, Some(p)) => ModelConfig::preset(p),
            (None, None) => ModelConfig::preset(Preset::Tiny),
        };
        self.ablation.apply(&mut m.layout);
        Ok(m)
    }

    /// Stage plans carrying the run-level ablation flags.
    pub fn plans(&self) -> Vec<StagePlan> {
        self.stages
            .iter()
            .cloned()
            .map(|mut p| {
                p.ablation = self.ablation;
                p
            })
            .collect()
    }

    /// Check every invariant before any compute starts.
    pub fn validate(&self) -> Result<()> {
        let model = self.model_config()?;
        model.validate()?;
        if self.stages.is_empty() {
            return Err(Error::config("no stages configured"));
        }
        for (i, p) in self.plans().iter().enumerate() {
            p.validate(model.patch_size)
                .map_err(|e| Error::config(format!("stage {i}: {e}")))?;
            if p.pack_len > model.max_pack {
                return Err(Error::config(format!(
                    "stage {i}: pack_len {} exceeds max_pack {}",
                    p.pack_len, model.max_pack
                )));
            }
            match &p.manifest {
                None => return Err(Error::config(format!("stage {i}: no manifest"))),
                Some(m) if !m.exists() => {
                    return Err(Error::config(format!("stage {i}: manifest {} not found", m.display())))
                }
                _ => {}
            }
            if let Some(t) = &p.text {
                if !t.exists() {
                    return Err(Error::config(format!("stage {i}: text corpus {} not found", t.display())));
                }
            }
        }
        if let Some(v) = &self.validation {
            if !v.exists() {
                return Err(Error::config(format!("validation manifest {} not found", v.display())));
            }
        }
        Ok(())
    }
}

/// Outcome of [`run_training`].
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub model: Model<f32>,
    pub log: TrainLog,
    pub validation_loss: Option<f64>,
}

/// Train every stage in order. With `out`, writes `train_log.csv`,
/// periodic checkpoints under `checkpoints/` and the final `model.ckpt`.
pub fn run_training(cfg: &RunConfig, out: Option<&Path>, stop: Option<std::sync::Arc<std::sync::atomic::AtomicBool>>) -> Result<RunSummary> {
    cfg.validate()?;
    let mcfg = cfg.model_config()?;
    let mut model = Model::<f32>::init(mcfg.clone(), cfg.seed)?;
    let mut opt = AdamW::new(cfg.optimizer, &mcfg);
    let mut log = TrainLog::default();
    let mut offset = 0;
    for (i, plan) in cfg.plans().iter().enumerate() {
        let data = StageData::load(plan.manifest.as_deref(), plan.text.as_deref())?;
        let opts = TrainOptions {
            seed: cfg.seed.wrapping_add(i as u64),
            step_offset: offset,
            checkpoint: out.map(|o| CheckpointPolicy {
                dir: o.join("checkpoints"),
                every: cfg.checkpoint_every,
            }),
            stop: stop.clone(),
        };
        log::info!("stage {} ({} steps)", plan.stage.name(), plan.steps);
        let stage_log = train_stage(&mut model, &mut opt, plan, &data, &opts)?;
        offset += stage_log.entries.len();
        log.extend(stage_log);
        if stop.as_ref().is_some_and(|s| s.load(std::sync::atomic::Ordering::SeqCst)) {
            break;
        }
    }
    let validation_loss = match &cfg.validation {
        Some(path) => {
            let plan = cfg.plans().pop().expect("validated non-empty");
            let data = StageData::load(Some(path), None)?;
            let seqs = data.multimodal_sequences(plan.resize, mcfg.patch_size, &mcfg.layout)?;
            let packs = shuffled_packs(&seqs, 0, plan.pack_len, &mcfg.layout)?;
            Some(evaluate(&model, &packs)?)
        }
        None => None,
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("train_log.csv"), log.to_csv())?;
        Checkpoint {
            config: model.config.clone(),
            params: model.params.clone(),
            optimizer: Some(opt.state.clone()),
            seed: cfg.seed,
            step: offset as u64,
        }
        .save(&dir.join("model.ckpt"))?;
    }
    Ok(RunSummary {
        model,
        log,
        validation_loss,
    })
}
