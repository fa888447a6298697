//! TOML pipeline configuration.
//!
//! One file drives every stage. Sections mirror the pipeline: autoencoder,
//! token model, unconditional diffusion, artifact synthesis, restorer, and
//! evaluation. Unknown keys are rejected, and toy-scale keys cannot be
//! combined with their full-scale counterparts (`temperature` vs
//! `full_scale_temperature`, `top_k` vs `full_scale_top_k`, `emb_dim` vs
//! `full_scale_emb_dim`).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artifacts::{ArtifactClass, ClassAssignment, SynthLevels};
use crate::error::{Error, Result};
use crate::restorer::{DiffTrainConfig, NetConfig, ScheduleConfig};
use crate::token_model::{TokenModelConfig, TokenTrainConfig};
use crate::vqae::{VqConfig, VqTrainConfig, DOWN_FACTOR};

/// Which synthesis parameter levels a dataset build uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoencoderSection {
    /// Clean images in the training corpus.
    pub corpus_size: usize,
    pub image_size: usize,
    pub latent_dim: usize,
    pub codebook_size: usize,
    pub widths: [usize; 3],
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub commitment_weight: f64,
    pub refresh_interval: usize,
}

impl Default for AutoencoderSection {
    fn default() -> Self {
        AutoencoderSection {
            corpus_size: 2000,
            image_size: 32,
            latent_dim: 4,
            codebook_size: 64,
            widths: [16, 32, 48],
            steps: 2200,
            batch_size: 8,
            learning_rate: 1e-3,
            commitment_weight: 0.25,
            refresh_interval: 250,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenModelSection {
    pub dim: usize,
    pub layers: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for TokenModelSection {
    fn default() -> Self {
        TokenModelSection {
            dim: 48,
            layers: 2,
            steps: 1500,
            batch_size: 16,
            learning_rate: 3e-4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UncondDiffusionSection {
    pub widths: [usize; 3],
    pub emb_dim: usize,
    pub t_count: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for UncondDiffusionSection {
    fn default() -> Self {
        UncondDiffusionSection {
            widths: [32, 48, 64],
            emb_dim: 64,
            t_count: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
            steps: 3000,
            batch_size: 8,
            learning_rate: 2e-4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArtifactsSection {
    /// Pairs in the training dataset.
    pub train_count: usize,
    /// Pairs in the held-out test dataset.
    pub test_count: usize,
    /// "uniform" or one artifact class name.
    pub assignment: String,
    pub rect_h: usize,
    pub rect_w: usize,
    /// Toy-scale sampling temperature; exclusive with the full-scale key.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub full_scale_temperature: Option<f64>,
    /// Toy-scale top-k; exclusive with the full-scale key.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top_k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub full_scale_top_k: Option<usize>,
    pub keep_fraction: f64,
    pub t0: usize,
    pub n_steps: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub beta: f64,
    pub test_alpha: f64,
    pub test_gamma: f64,
    pub test_beta: f64,
}

impl Default for ArtifactsSection {
    fn default() -> Self {
        ArtifactsSection {
            train_count: 400,
            test_count: 64,
            assignment: "uniform".into(),
            rect_h: 4,
            rect_w: 4,
            temperature: None,
            full_scale_temperature: None,
            top_k: None,
            full_scale_top_k: None,
            keep_fraction: 0.9,
            t0: 840,
            n_steps: 48,
            alpha: 0.3,
            gamma: 1.015,
            beta: 0.01,
            test_alpha: 0.25,
            test_gamma: 1.009,
            test_beta: 0.005,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RestorerSection {
    pub widths: [usize; 3],
    /// Toy-scale embedding width; exclusive with the full-scale key.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub emb_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub full_scale_emb_dim: Option<usize>,
    pub t_count: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub mask_prob: f64,
}

impl Default for RestorerSection {
    fn default() -> Self {
        RestorerSection {
            widths: [32, 48, 64],
            emb_dim: None,
            full_scale_emb_dim: None,
            t_count: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
            steps: 6000,
            batch_size: 8,
            learning_rate: 2e-4,
            mask_prob: 0.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Sampler steps per restoration.
    pub steps: usize,
    /// Guidance scale used by the guided mode.
    pub guidance_scale: f64,
    /// Held-out images evaluated (capped at the manifest size).
    pub count: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            steps: 30,
            guidance_scale: 3.0,
            count: 32,
        }
    }
}

/// The whole pipeline configuration.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Every stage derives its RNG stream from this one seed.
    pub master_seed: u64,
    pub autoencoder: AutoencoderSection,
    pub token_model: TokenModelSection,
    pub uncond_diffusion: UncondDiffusionSection,
    pub artifacts: ArtifactsSection,
    pub restorer: RestorerSection,
    pub eval: EvalSection,
}

/// Toy-scale sampling temperature applied when neither temperature key is
/// set.
pub const DEFAULT_TEMPERATURE: f64 = 3.0;
/// Toy-scale top-k applied when neither top-k key is set.
pub const DEFAULT_TOP_K: usize = 16;
/// Toy-scale embedding width applied when neither emb_dim key is set.
pub const DEFAULT_EMB_DIM: usize = 64;

fn exclusive<T: Copy>(
    toy: Option<T>,
    full: Option<T>,
    toy_key: &str,
    full_key: &str,
    fallback: T,
) -> Result<T> {
    match (toy, full) {
        (Some(_), Some(_)) => Err(Error::Config(format!(
            "{toy_key} and {full_key} are mutually exclusive; set at most one"
        ))),
        (Some(v), None) | (None, Some(v)) => Ok(v),
        (None, None) => Ok(fallback),
    }
}

impl PipelineConfig {
    /// Parses and validates a TOML config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: PipelineConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Schema checks that do not need the trained models.
    pub fn validate(&self) -> Result<()> {
        self.resolved_temperature()?;
        self.resolved_top_k()?;
        self.resolved_emb_dim()?;
        self.assignment()?;
        if self.autoencoder.corpus_size == 0 {
            return Err(Error::Config("autoencoder.corpus_size must be positive".into()));
        }
        if self.autoencoder.image_size % DOWN_FACTOR != 0 {
            return Err(Error::Config(format!(
                "autoencoder.image_size must be divisible by {DOWN_FACTOR}"
            )));
        }
        let grid = self.autoencoder.image_size / DOWN_FACTOR;
        if grid % 4 != 0 {
            return Err(Error::Config(format!(
                "autoencoder.image_size {} gives a {grid}x{grid} latent grid; the diffusion \
                 network needs a grid divisible by 4",
                self.autoencoder.image_size
            )));
        }
        if self.artifacts.train_count == 0 || self.artifacts.test_count == 0 {
            return Err(Error::Config("artifacts counts must be positive".into()));
        }
        if self.eval.count == 0 || self.eval.steps == 0 {
            return Err(Error::Config("eval.count and eval.steps must be positive".into()));
        }
        Ok(())
    }

    pub fn resolved_temperature(&self) -> Result<f64> {
        exclusive(
            self.artifacts.temperature,
            self.artifacts.full_scale_temperature,
            "artifacts.temperature",
            "artifacts.full_scale_temperature",
            DEFAULT_TEMPERATURE,
        )
    }

    pub fn resolved_top_k(&self) -> Result<usize> {
        exclusive(
            self.artifacts.top_k,
            self.artifacts.full_scale_top_k,
            "artifacts.top_k",
            "artifacts.full_scale_top_k",
            DEFAULT_TOP_K,
        )
    }

    pub fn resolved_emb_dim(&self) -> Result<usize> {
        exclusive(
            self.restorer.emb_dim,
            self.restorer.full_scale_emb_dim,
            "restorer.emb_dim",
            "restorer.full_scale_emb_dim",
            DEFAULT_EMB_DIM,
        )
    }

    pub fn assignment(&self) -> Result<ClassAssignment> {
        if self.artifacts.assignment == "uniform" {
            return Ok(ClassAssignment::Uniform);
        }
        let class = ArtifactClass::from_name(&self.artifacts.assignment).map_err(|_| {
            Error::Config(format!(
                "artifacts.assignment must be \"uniform\" or an artifact class name, got {:?}",
                self.artifacts.assignment
            ))
        })?;
        if class.is_mask() {
            return Err(Error::Config("artifacts.assignment cannot be MASK".into()));
        }
        Ok(ClassAssignment::Fixed(class))
    }

    pub fn vq_config(&self) -> VqConfig {
        let a = &self.autoencoder;
        VqConfig {
            image_channels: 3,
            image_size: a.image_size,
            latent_dim: a.latent_dim,
            codebook_size: a.codebook_size,
            widths: a.widths,
        }
    }

    pub fn vq_train_config(&self, seed: u64) -> VqTrainConfig {
        let a = &self.autoencoder;
        VqTrainConfig {
            steps: a.steps,
            batch_size: a.batch_size,
            learning_rate: a.learning_rate,
            commitment_weight: a.commitment_weight,
            refresh_interval: a.refresh_interval,
            seed,
        }
    }

    pub fn token_config(&self) -> TokenModelConfig {
        let grid = self.autoencoder.image_size / DOWN_FACTOR;
        TokenModelConfig {
            vocab_size: self.autoencoder.codebook_size,
            seq_len: grid * grid,
            dim: self.token_model.dim,
            layers: self.token_model.layers,
        }
    }

    pub fn token_train_config(&self, seed: u64) -> TokenTrainConfig {
        let t = &self.token_model;
        TokenTrainConfig {
            steps: t.steps,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            seed,
        }
    }

    pub fn uncond_net(&self) -> NetConfig {
        let u = &self.uncond_diffusion;
        NetConfig {
            latent_dim: self.autoencoder.latent_dim,
            widths: u.widths,
            emb_dim: u.emb_dim,
            conditional: false,
        }
    }

    pub fn uncond_schedule(&self) -> ScheduleConfig {
        let u = &self.uncond_diffusion;
        ScheduleConfig {
            t_count: u.t_count,
            beta_start: u.beta_start,
            beta_end: u.beta_end,
        }
    }

    pub fn uncond_train_config(&self, seed: u64) -> DiffTrainConfig {
        let u = &self.uncond_diffusion;
        DiffTrainConfig {
            steps: u.steps,
            batch_size: u.batch_size,
            learning_rate: u.learning_rate,
            mask_prob: 0.0,
            seed,
        }
    }

    pub fn restorer_net(&self) -> Result<NetConfig> {
        let r = &self.restorer;
        Ok(NetConfig {
            latent_dim: self.autoencoder.latent_dim,
            widths: r.widths,
            emb_dim: self.resolved_emb_dim()?,
            conditional: true,
        })
    }

    pub fn restorer_schedule(&self) -> ScheduleConfig {
        let r = &self.restorer;
        ScheduleConfig {
            t_count: r.t_count,
            beta_start: r.beta_start,
            beta_end: r.beta_end,
        }
    }

    pub fn restorer_train_config(&self, seed: u64) -> DiffTrainConfig {
        let r = &self.restorer;
        DiffTrainConfig {
            steps: r.steps,
            batch_size: r.batch_size,
            learning_rate: r.learning_rate,
            mask_prob: r.mask_prob,
            seed,
        }
    }

    pub fn synth_levels(&self, split: Split) -> Result<SynthLevels> {
        let a = &self.artifacts;
        let (alpha, gamma, beta) = match split {
            Split::Train => (a.alpha, a.gamma, a.beta),
            Split::Test => (a.test_alpha, a.test_gamma, a.test_beta),
        };
        Ok(SynthLevels {
            rect_h: a.rect_h,
            rect_w: a.rect_w,
            temperature: self.resolved_temperature()?,
            top_k: self.resolved_top_k()?,
            keep_fraction: a.keep_fraction,
            t0: a.t0,
            n_steps: a.n_steps,
            alpha,
            gamma,
            beta,
        })
    }

    pub fn dataset_count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.artifacts.train_count,
            Split::Test => self.artifacts.test_count,
        }
    }
}
