//! The full model: ASR and speaker encoders, CIF predictor, speaker decoder,
//! speaker-fused token decoder and the glancing sampler, with a two-pass
//! training forward and single-pass parallel inference. An autoregressive
//! baseline with the same dimensions lives in [`ar`].

pub mod ar;
pub mod checkpoint;
pub mod decoder;
pub mod sampler;

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::cif::{self, FiringPlan, Predictor, TailPolicy, DEFAULT_THRESHOLD};
use crate::error::{Error, Result};
use crate::losses::{self, CtcLoss, LossBreakdown, LossParts, LossWeights};
use crate::nn::{positional_encoding, AttentionConfig, EncoderLayer, LayerNorm, Linear};
use crate::params::{ParamId, ParamStore};
use crate::speaker::{self, CosineScores, SpeakerAttention, SpeakerDecoder, SpeakerInventory};
use crate::tensor::{Scalar, Tensor};
use crate::tsot::Hypothesis;

pub use ar::{ArBaseline, ArOutput};
pub use decoder::{DecodeOptions, TokenDecoder};
pub use sampler::{glm_sample, SampleInfo};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Feature dimension `F` of the input frames.
    pub input_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub speaker_encoder_layers: usize,
    pub attn: AttentionConfig,
    /// Includes the channel-change token, which is always `vocab_size − 1`.
    pub vocab_size: usize,
    pub d_spk: usize,
    /// Number of encoder layers below the intermediate CTC tap.
    pub inter_ctc_layer: usize,
    pub sampling_factor_lambda: f64,
    pub use_cc_separator: bool,
    /// Inference emits a last token when the CIF residue reaches this
    /// fraction of the threshold.
    pub tail_fire_fraction: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 48,
            encoder_layers: 2,
            decoder_layers: 2,
            speaker_encoder_layers: 2,
            attn: AttentionConfig::default(),
            vocab_size: 40,
            d_spk: 16,
            inter_ctc_layer: 1,
            sampling_factor_lambda: 1.1,
            use_cc_separator: false,
            tail_fire_fraction: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.attn.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.input_dim == 0 || self.d_spk == 0 {
            return bad("input_dim and d_spk must be positive".into());
        }
        if self.vocab_size < 2 {
            return bad(format!("vocab_size {} leaves no room for the separator", self.vocab_size));
        }
        if self.inter_ctc_layer < 1 || self.inter_ctc_layer >= self.encoder_layers {
            return bad(format!(
                "inter_ctc_layer must lie in [1, encoder_layers) (got {} with {} layers)",
                self.inter_ctc_layer, self.encoder_layers
            ));
        }
        if self.decoder_layers == 0 || self.speaker_encoder_layers == 0 {
            return bad("decoder and speaker encoder need at least one layer".into());
        }
        if !(self.sampling_factor_lambda >= 0.0) {
            return bad(format!("sampling factor must be non-negative, got {}", self.sampling_factor_lambda));
        }
        if !(0.0..=1.0).contains(&self.tail_fire_fraction) {
            return bad(format!("tail_fire_fraction must lie in [0, 1], got {}", self.tail_fire_fraction));
        }
        Ok(())
    }

    pub fn cc_id(&self) -> usize {
        self.vocab_size - 1
    }

    pub fn blank_id(&self) -> usize {
        self.vocab_size
    }

    /// Same architecture size (used to refuse mismatched benchmark pairs).
    pub fn same_dims(&self, o: &ModelConfig) -> bool {
        self.input_dim == o.input_dim
            && self.attn == o.attn
            && self.encoder_layers == o.encoder_layers
            && self.decoder_layers == o.decoder_layers
            && self.vocab_size == o.vocab_size
            && self.d_spk == o.d_spk
    }
}

/// Input projection + positional encoding + encoder blocks.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub input: Linear,
    pub layers: Vec<EncoderLayer>,
    pub ln_out: LayerNorm,
}

impl Encoder {
    pub fn new<T: Scalar, R: rand::Rng>(
        ps: &mut ParamStore<T>,
        name: &str,
        input_dim: usize,
        cfg: AttentionConfig,
        layers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            input: Linear::new(ps, &format!("{name}.input"), input_dim, cfg.model_dim, true, rng)?,
            layers: (0..layers)
                .map(|l| EncoderLayer::new(ps, &format!("{name}.layer{l}"), cfg, rng))
                .collect::<Result<_>>()?,
            ln_out: LayerNorm::new(ps, &format!("{name}.ln_out"), cfg.model_dim)?,
        })
    }

    /// Final output plus the raw outputs of every layer.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<(Var, Vec<Var>)> {
        let (t, _) = g.shape(x);
        if t == 0 {
            return Err(Error::Contract("encoder input has no frames".into()));
        }
        let h = self.input.forward(g, x)?;
        let d = g.shape(h).1;
        let pe = g.constant(positional_encoding(t, d));
        let mut h = g.add(h, pe)?;
        let mut taps = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            h = layer.forward(g, h, None)?;
            taps.push(h);
        }
        Ok((self.ln_out.forward(g, h)?, taps))
    }
}

/// Parameter handles of the model.
#[derive(Clone, Debug)]
pub struct Network {
    pub asr_encoder: Encoder,
    pub inter_ln: LayerNorm,
    pub speaker_encoder: Encoder,
    pub predictor: Predictor,
    pub ctc_head: Linear,
    pub inter_ctc_head: Linear,
    pub token_embed: ParamId,
    pub speaker_decoder: SpeakerDecoder,
    pub decoder: TokenDecoder,
}

/// One training example as the model sees it.
#[derive(Clone, Copy, Debug)]
pub struct TrainInputs<'a, T> {
    pub x: &'a Tensor<T>,
    /// Serialized target tokens.
    pub tokens: &'a [usize],
    /// Inventory index of each target token's speaker.
    pub speakers: &'a [usize],
    /// Inventory including any interfering speakers.
    pub inventory: &'a SpeakerInventory<T>,
    /// Pad the speaker scores to this many columns.
    pub fill_to: Option<usize>,
    pub seed: u64,
}

/// Every intermediate of a two-pass training forward.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    pub h_asr: Var,
    pub h_spk: Var,
    pub h_inter: Var,
    /// Unscaled CIF weights, `T×1`.
    pub alpha: Var,
    pub e_a: Var,
    pub plan: FiringPlan<T>,
    /// Recorded without gradient.
    pub first_pass_logits: Var,
    pub first_pass_tokens: Vec<usize>,
    pub e_s: Var,
    pub sample: SampleInfo,
    pub second_pass_logits: Var,
    pub cosine_scores: CosineScores,
    pub speaker_attention: SpeakerAttention,
    pub weighted_profiles: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossFlags {
    pub ctc_infeasible: bool,
    pub inter_ctc_infeasible: bool,
}

pub struct SaParaformer<T> {
    cfg: ModelConfig,
    params: ParamStore<T>,
    net: Network,
    disable_self_attention: bool,
    decoder_calls: AtomicUsize,
}

impl<T: Scalar> SaParaformer<T> {
    /// Fresh model with parameters drawn from a generator seeded by `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let d = cfg.attn.model_dim;
        let v = cfg.vocab_size;
        let rng = &mut rng;
        let asr_encoder = Encoder::new(&mut ps, "asr_encoder", cfg.input_dim, cfg.attn, cfg.encoder_layers, rng)?;
        let inter_ln = LayerNorm::new(&mut ps, "asr_encoder.inter_ln", d)?;
        let speaker_encoder =
            Encoder::new(&mut ps, "speaker_encoder", cfg.input_dim, cfg.attn, cfg.speaker_encoder_layers, rng)?;
        let predictor = Predictor::new(&mut ps, "predictor", d, rng)?;
        let ctc_head = Linear::new(&mut ps, "ctc_head", d, v + 1, true, rng)?;
        let inter_ctc_head = Linear::new(&mut ps, "inter_ctc_head", d, v + 1, true, rng)?;
        let token_embed = ps.register_uniform("token_embed", v, d, rng)?;
        let speaker_decoder = SpeakerDecoder::new(&mut ps, "speaker_decoder", cfg.attn, cfg.d_spk, rng)?;
        let decoder = TokenDecoder::new(&mut ps, "asr_decoder", cfg.attn, cfg.decoder_layers, v, false, rng)?;
        let net = Network {
            asr_encoder,
            inter_ln,
            speaker_encoder,
            predictor,
            ctc_head,
            inter_ctc_head,
            token_embed,
            speaker_decoder,
            decoder,
        };
        Ok(Self { cfg, params: ps, net, disable_self_attention: false, decoder_calls: AtomicUsize::new(0) })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    /// Diagnostic mode: decoder layers skip self-attention, so positions are
    /// decoded independently.
    pub fn set_disable_self_attention(&mut self, off: bool) {
        self.disable_self_attention = off;
    }

    /// Changes λ of the glancing sampler for subsequent training forwards.
    pub fn set_sampling_factor(&mut self, lambda: f64) -> Result<()> {
        if !(lambda >= 0.0) {
            return Err(Error::Config(format!("sampling factor must be non-negative, got {lambda}")));
        }
        self.cfg.sampling_factor_lambda = lambda;
        Ok(())
    }

    /// Number of token-decoder passes since the last reset.
    pub fn decoder_calls(&self) -> usize {
        self.decoder_calls.load(Ordering::Relaxed)
    }

    pub fn reset_decoder_calls(&self) {
        self.decoder_calls.store(0, Ordering::Relaxed);
    }

    /// `(h_asr, h_inter)`, both `T×d`.
    pub fn asr_encode(&self, g: &mut Graph<'_, T>, x: Var) -> Result<(Var, Var)> {
        let (h, taps) = self.net.asr_encoder.forward(g, x)?;
        let h_inter = self.net.inter_ln.forward(g, taps[self.cfg.inter_ctc_layer - 1])?;
        Ok((h, h_inter))
    }

    pub fn speaker_encode(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        Ok(self.net.speaker_encoder.forward(g, x)?.0)
    }

    /// `T×1` CIF weights.
    pub fn predict_weights(&self, g: &mut Graph<'_, T>, h_asr: Var) -> Result<Var> {
        self.net.predictor.predict_weights(g, h_asr)
    }

    /// Token logits `N×V`. `d_bar` (`N×d_spk`) is projected through `W_spkᵀ`
    /// and fed to the first layer's feed-forward input.
    pub fn asr_decode(&self, g: &mut Graph<'_, T>, e: Var, h_asr: Var, d_bar: Option<Var>) -> Result<Var> {
        self.decoder_calls.fetch_add(1, Ordering::Relaxed);
        let fusion = match d_bar {
            Some(d) => {
                if g.shape(d).0 != g.shape(e).0 {
                    return Err(Error::Shape(format!(
                        "{} weighted profiles for {} token embeddings",
                        g.shape(d).0,
                        g.shape(e).0
                    )));
                }
                let w = g.param(self.net.speaker_decoder.w_spk);
                Some(g.matmul_bt(d, w)?)
            }
            None => None,
        };
        let opts = DecodeOptions { self_mask: None, disable_self_attention: self.disable_self_attention };
        self.net.decoder.forward(g, e, h_asr, fusion, opts)
    }

    /// Speaker queries, scores (optionally filled), attention and `d̄`.
    fn attribute(
        &self,
        g: &mut Graph<'_, T>,
        e_a: Var,
        h_asr: Var,
        h_spk: Var,
        inv: &SpeakerInventory<T>,
        fill_to: Option<usize>,
        restrict: Option<usize>,
        seed: u64,
    ) -> Result<(CosineScores, SpeakerAttention, Var)> {
        let q = self.net.speaker_decoder.queries(g, e_a, h_asr, h_spk)?;
        let mut scores = speaker::cosine_scores(g, q, inv)?;
        if let Some(k) = fill_to {
            scores = speaker::fill_speakers(g, scores, k, seed)?;
        }
        let att = speaker::attention_weights(g, scores, restrict)?;
        let d_bar = speaker::weighted_profile(g, att, inv)?;
        Ok((scores, att, d_bar))
    }

    /// Encode, teacher-forced CIF, speaker decoder, a gradient-free first
    /// decoder pass, glancing sampler, and the second decoder pass.
    pub fn two_pass_train_forward(&self, g: &mut Graph<'_, T>, inp: &TrainInputs<'_, T>) -> Result<ForwardTrace<T>> {
        let n = inp.tokens.len();
        if n == 0 {
            return Err(Error::Contract("training example has no target tokens".into()));
        }
        if inp.speakers.len() != n {
            return Err(Error::Shape(format!("{} speaker labels for {n} tokens", inp.speakers.len())));
        }
        if inp.x.cols() != self.cfg.input_dim {
            return Err(Error::Shape(format!(
                "input has {} features, model expects {}",
                inp.x.cols(),
                self.cfg.input_dim
            )));
        }
        if let Some(&bad) = inp.tokens.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(Error::Config(format!("token {bad} outside vocabulary of {}", self.cfg.vocab_size)));
        }
        let x = g.constant(inp.x.clone());
        let (h_asr, h_inter) = self.asr_encode(g, x)?;
        let h_spk = self.speaker_encode(g, x)?;
        let alpha = self.predict_weights(g, h_asr)?;
        let beta = T::lit(DEFAULT_THRESHOLD);
        let scaled = cif::scale_weights_var(g, alpha, n, beta)?;
        let (e_a, plan) = cif::cif(g, h_asr, scaled, beta, TailPolicy::Drop)?;
        if plan.num_tokens() != n {
            return Err(Error::Numeric(format!("scaled CIF fired {} times for {n} targets", plan.num_tokens())));
        }
        let fill_seed = inp.seed;
        let (scores, att, d_bar) = self.attribute(g, e_a, h_asr, h_spk, inp.inventory, inp.fill_to, None, fill_seed)?;
        let first = g.no_grad(|g| self.asr_decode(g, e_a, h_asr, Some(d_bar)))?;
        let first_tokens = argmax_rows(g.value(first)).0;
        let table = g.param(self.net.token_embed);
        let sample_seed = inp.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1);
        let (e_s, sample) = glm_sample(
            g,
            e_a,
            inp.tokens,
            &first_tokens,
            table,
            self.cfg.sampling_factor_lambda,
            sample_seed,
        )?;
        let second = self.asr_decode(g, e_s, h_asr, Some(d_bar))?;
        Ok(ForwardTrace {
            h_asr,
            h_spk,
            h_inter,
            alpha,
            e_a,
            plan,
            first_pass_logits: first,
            first_pass_tokens: first_tokens,
            e_s,
            sample,
            second_pass_logits: second,
            cosine_scores: scores,
            speaker_attention: att,
            weighted_profiles: d_bar,
        })
    }

    /// Composite training loss of one example. `speaker_weight` multiplies
    /// the speaker term (0 for a speaker-agnostic stage).
    pub fn training_loss(
        &self,
        g: &mut Graph<'_, T>,
        inp: &TrainInputs<'_, T>,
        weights: LossWeights,
        speaker_weight: f64,
    ) -> Result<(LossBreakdown, ForwardTrace<T>, LossFlags)> {
        let tr = self.two_pass_train_forward(g, inp)?;
        let n = inp.tokens.len();
        let mae = cif::mae_loss(g, tr.alpha, n)?;
        let ctc_logits = self.net.ctc_head.forward(g, tr.h_asr)?;
        let ctc = losses::ctc_loss(g, ctc_logits, inp.tokens)?;
        let inter = losses::inter_ctc_loss(g, tr.h_inter, &self.net.inter_ctc_head, inp.tokens)?;
        let flags = LossFlags {
            ctc_infeasible: matches!(ctc, CtcLoss::Infeasible),
            inter_ctc_infeasible: matches!(inter, CtcLoss::Infeasible),
        };
        let ctc = ctc.or_penalty(g);
        let inter_ctc = inter.or_penalty(g);
        let ce = losses::ce_loss(g, tr.second_pass_logits, inp.tokens)?;
        let spk = losses::speaker_loss(g, tr.cosine_scores, inp.speakers)?;
        let speaker = g.scale(spk, T::lit(speaker_weight));
        let b = losses::composite_loss(g, LossParts { mae, ctc, inter_ctc, ce, speaker }, weights)?;
        Ok((b, tr, flags))
    }

    /// Single-pass parallel decoding: CIF on unscaled weights fixes the
    /// output length, then one decoder pass labels every position.
    pub fn nar_infer(&self, x: &Tensor<T>, inv: &SpeakerInventory<T>) -> Result<Hypothesis> {
        if x.cols() != self.cfg.input_dim {
            return Err(Error::Shape(format!(
                "input has {} features, model expects {}",
                x.cols(),
                self.cfg.input_dim
            )));
        }
        if inv.dim() != self.cfg.d_spk {
            return Err(Error::Shape(format!(
                "inventory profiles have dim {}, model expects {}",
                inv.dim(),
                self.cfg.d_spk
            )));
        }
        let mut g = Graph::with_params(&self.params);
        g.no_grad(|g| {
            let x = g.constant(x.clone());
            let (h_asr, _) = self.asr_encode(g, x)?;
            let alpha = self.predict_weights(g, h_asr)?;
            let tail = TailPolicy::FireAbove(self.cfg.tail_fire_fraction);
            let (e_a, plan) = cif::cif(g, h_asr, alpha, T::lit(DEFAULT_THRESHOLD), tail)?;
            if plan.num_tokens() == 0 {
                return Ok(Hypothesis::default());
            }
            let h_spk = self.speaker_encode(g, x)?;
            let restrict = Some(inv.true_count());
            let (_, att, d_bar) = self.attribute(g, e_a, h_asr, h_spk, inv, None, restrict, 0)?;
            let logits = self.asr_decode(g, e_a, h_asr, Some(d_bar))?;
            let (tokens, _) = argmax_rows(g.value(logits));
            let scores = max_posteriors(g.value(logits));
            let speakers = speaker::assign_speakers(g.value(att.beta), inv);
            Ok(Hypothesis { tokens, speakers, scores })
        })
    }

    /// Decoder logits with the output length forced to `tokens.len()` and no
    /// glancing: the quantity scored by validation cross-entropy.
    pub fn teacher_forced_logits(&self, x: &Tensor<T>, n: usize, inv: &SpeakerInventory<T>) -> Result<Tensor<T>> {
        if n == 0 {
            return Err(Error::Contract("teacher forcing needs at least one target token".into()));
        }
        let mut g = Graph::with_params(&self.params);
        g.no_grad(|g| {
            let x = g.constant(x.clone());
            let (h_asr, _) = self.asr_encode(g, x)?;
            let alpha = self.predict_weights(g, h_asr)?;
            let beta = T::lit(DEFAULT_THRESHOLD);
            let scaled = cif::scale_weights_var(g, alpha, n, beta)?;
            let (e_a, _) = cif::cif(g, h_asr, scaled, beta, TailPolicy::Drop)?;
            let h_spk = self.speaker_encode(g, x)?;
            let (_, _, d_bar) = self.attribute(g, e_a, h_asr, h_spk, inv, None, Some(inv.true_count()), 0)?;
            let logits = self.asr_decode(g, e_a, h_asr, Some(d_bar))?;
            Ok(g.value(logits).clone())
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, checkpoint::Kind::Nar, &self.cfg, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (kind, cfg, params) = checkpoint::load::<T>(path)?;
        if kind != checkpoint::Kind::Nar {
            return Err(Error::Checkpoint(format!("{} holds a {kind:?} model", path.display())));
        }
        let mut m = Self::new(cfg, 0)?;
        m.params.load_from(&params)?;
        Ok(m)
    }
}

/// Row-wise argmax (lowest index on ties) and the winning values.
pub fn argmax_rows<T: Scalar>(t: &Tensor<T>) -> (Vec<usize>, Vec<T>) {
    let idx = speaker::assign_indices(t);
    let vals = idx.iter().enumerate().map(|(r, &c)| t.get(r, c)).collect();
    (idx, vals)
}

/// Max softmax probability per row.
pub fn max_posteriors<T: Scalar>(logits: &Tensor<T>) -> Vec<f64> {
    let p = crate::autodiff::softmax_rows(logits);
    (0..p.rows()).map(|r| p.row(r).iter().fold(T::zero(), |a, &b| a.max(b)).as_f64()).collect()
}
