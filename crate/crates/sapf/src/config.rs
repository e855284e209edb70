//! Flat key/value run configuration (TOML without tables).

use std::path::Path;

use sapf_core::losses::LossWeights;
use sapf_core::model::ModelConfig;
use sapf_core::nn::AttentionConfig;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, HarnessError, Result};
use crate::synth::{Span, SynthSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,

    pub num_sessions: usize,
    pub num_dev_sessions: usize,
    pub speakers_min: usize,
    pub speakers_max: usize,
    pub tokens_min: usize,
    pub tokens_max: usize,
    pub frames_per_token_min: usize,
    pub frames_per_token_max: usize,
    pub overlap_target: f64,
    pub overlap_tolerance: f64,
    pub feature_dim: usize,
    pub pool_size: usize,
    pub branching: usize,
    pub noise_std: f64,

    pub model_dim: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub speaker_encoder_layers: usize,
    pub vocab_size: usize,
    pub d_spk: usize,
    pub inter_ctc_layer: usize,
    pub sampling_factor_lambda: f64,
    pub use_cc_separator: bool,
    pub tail_fire_fraction: f64,

    pub lambda1: f64,
    pub lambda2: f64,

    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub grad_clip: f64,
    pub patience: usize,
    pub fill_speakers: bool,
    pub interfering: usize,
    /// Speaker-agnostic epochs run before the full objective.
    pub stage1_epochs: usize,
    /// Sampling factor used during the speaker-agnostic stage.
    pub stage1_sampling_lambda: f64,
    pub train_ar: bool,
}

impl Default for Config {
    fn default() -> Self {
        let s = SynthSpec::default();
        let m = ModelConfig::default();
        let w = LossWeights::default();
        Self {
            seed: 0,
            num_sessions: s.num_sessions,
            num_dev_sessions: 16,
            speakers_min: s.speakers_per_session.min,
            speakers_max: s.speakers_per_session.max,
            tokens_min: s.tokens_per_utterance.min,
            tokens_max: s.tokens_per_utterance.max,
            frames_per_token_min: s.frames_per_token.min,
            frames_per_token_max: s.frames_per_token.max,
            overlap_target: s.overlap_ratio_target,
            overlap_tolerance: s.overlap_tolerance,
            feature_dim: s.feature_dim,
            pool_size: s.pool_size,
            branching: s.branching,
            noise_std: s.noise_std,
            model_dim: m.attn.model_dim,
            num_heads: m.attn.num_heads,
            ff_dim: m.attn.ff_dim,
            encoder_layers: m.encoder_layers,
            decoder_layers: m.decoder_layers,
            speaker_encoder_layers: m.speaker_encoder_layers,
            vocab_size: m.vocab_size,
            d_spk: m.d_spk,
            inter_ctc_layer: m.inter_ctc_layer,
            sampling_factor_lambda: m.sampling_factor_lambda,
            use_cc_separator: m.use_cc_separator,
            tail_fire_fraction: m.tail_fire_fraction,
            lambda1: w.lambda1,
            lambda2: w.lambda2,
            epochs: 100,
            batch_size: 1,
            learning_rate: 2e-3,
            warmup_steps: 200,
            grad_clip: 5.0,
            patience: 5,
            fill_speakers: true,
            interfering: 2,
            stage1_epochs: 80,
            stage1_sampling_lambda: 0.0,
            train_ar: false,
        }
    }
}

/// Optimisation and augmentation settings of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub grad_clip: f64,
    pub patience: usize,
    pub seed: u64,
    pub fill_speakers: bool,
    pub interfering: usize,
    pub stage1_epochs: usize,
    pub stage1_sampling_lambda: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(HarnessError::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.stage1_sampling_lambda >= 0.0) {
            return Err(HarnessError::Config("stage1_sampling_lambda must be ≥ 0".into()));
        }
        if !(self.learning_rate >= 0.0) || !(self.grad_clip > 0.0) {
            return Err(HarnessError::Config("learning_rate must be ≥ 0 and grad_clip > 0".into()));
        }
        Ok(())
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config always serialises")
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            num_sessions: self.num_sessions,
            speakers_per_session: Span::new(self.speakers_min, self.speakers_max),
            vocab_size: self.vocab_size,
            tokens_per_utterance: Span::new(self.tokens_min, self.tokens_max),
            frames_per_token: Span::new(self.frames_per_token_min, self.frames_per_token_max),
            overlap_ratio_target: self.overlap_target,
            overlap_tolerance: self.overlap_tolerance,
            feature_dim: self.feature_dim,
            d_spk: self.d_spk,
            pool_size: self.pool_size,
            branching: self.branching,
            noise_std: self.noise_std,
            seed: self.seed,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            input_dim: self.feature_dim,
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            speaker_encoder_layers: self.speaker_encoder_layers,
            attn: AttentionConfig { model_dim: self.model_dim, num_heads: self.num_heads, ff_dim: self.ff_dim },
            vocab_size: self.vocab_size,
            d_spk: self.d_spk,
            inter_ctc_layer: self.inter_ctc_layer,
            sampling_factor_lambda: self.sampling_factor_lambda,
            use_cc_separator: self.use_cc_separator,
            tail_fire_fraction: self.tail_fire_fraction,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            model: self.model_config(),
            loss: LossWeights { lambda1: self.lambda1, lambda2: self.lambda2 },
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            warmup_steps: self.warmup_steps,
            grad_clip: self.grad_clip,
            patience: self.patience,
            seed: self.seed,
            fill_speakers: self.fill_speakers,
            interfering: self.interfering,
            stage1_epochs: self.stage1_epochs,
            stage1_sampling_lambda: self.stage1_sampling_lambda,
        }
    }
}
