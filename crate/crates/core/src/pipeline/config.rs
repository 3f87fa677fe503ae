use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::encoders::DEFAULT_PROJECTION_DIM;
use crate::error::{Error, Result};
use crate::losses::{CptSettings, DEFAULT_EMA_ALPHA, DEFAULT_TAU};
use crate::prompts::DEFAULT_PROMPT_LEN;
use crate::tensor::HvpBackend;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub prompt_len: usize,
    pub proj_dim: usize,
    /// Peak stage-1 learning rate, the start of the cosine anneal.
    pub lr_stage1: f64,
    pub batch: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub warmup_lr: f64,
    pub lr_stage2: f64,
    pub steps_stage2: usize,
    pub alpha: f64,
    pub tau_cls: f64,
    pub tau_cpt: f64,
    /// Weight of the contrastive loss in stage 1; zero disables it (and with
    /// it gradient matching).
    pub cpt_weight: f64,
    /// Weight of the gradient-matching loss in stage 1; zero disables it.
    pub gm_weight: f64,
    pub normalize_projection: bool,
    pub hvp_backend: HvpBackend,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            prompt_len: DEFAULT_PROMPT_LEN,
            proj_dim: DEFAULT_PROJECTION_DIM,
            lr_stage1: 0.002,
            batch: 4,
            epochs: 10,
            warmup_epochs: 1,
            warmup_lr: 1e-5,
            lr_stage2: 0.1,
            steps_stage2: 10,
            alpha: DEFAULT_EMA_ALPHA,
            tau_cls: DEFAULT_TAU,
            tau_cpt: DEFAULT_TAU,
            cpt_weight: 1.0,
            gm_weight: 1.0,
            normalize_projection: true,
            hvp_backend: HvpBackend::DoubleBackward,
        }
    }
}

impl TrainConfig {
    /// Defaults for cross-dataset transfer (fewer source epochs).
    pub fn cross_dataset() -> Self {
        Self {
            epochs: 5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("lr_stage1", self.lr_stage1),
            ("warmup_lr", self.warmup_lr),
            ("lr_stage2", self.lr_stage2),
            ("tau_cls", self.tau_cls),
            ("tau_cpt", self.tau_cpt),
        ];
        if let Some((name, v)) = rates.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("{name} must be positive, got {v}")));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.batch == 0 || self.prompt_len == 0 || self.proj_dim == 0 {
            return Err(Error::Config("batch, prompt_len and proj_dim must be positive".into()));
        }
        if self.cpt_weight < 0.0 || self.gm_weight < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    pub fn uses_cpt(&self) -> bool {
        self.cpt_weight > 0.0
    }

    pub fn uses_gm(&self) -> bool {
        self.uses_cpt() && self.gm_weight > 0.0
    }

    pub fn cpt_settings(&self) -> CptSettings {
        CptSettings {
            tau: self.tau_cpt,
            normalize_projection: self.normalize_projection,
        }
    }
}

/// Constant warm-up rate for the first epochs, then cosine decay from the
/// peak rate to zero over the remaining steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(cfg: &TrainConfig, steps_per_epoch: usize) -> Self {
        let total_steps = steps_per_epoch * cfg.epochs;
        Self {
            peak: cfg.lr_stage1,
            warmup_lr: cfg.warmup_lr,
            warmup_steps: (steps_per_epoch * cfg.warmup_epochs).min(total_steps),
            total_steps,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.warmup_lr;
        }
        let span = (self.total_steps - self.warmup_steps).max(1) as f64;
        let t = (step - self.warmup_steps) as f64 / span;
        0.5 * self.peak * (1.0 + (PI * t).cos())
    }
}
