//! Greedy autoregressive baseline with the same encoder and decoder sizes as
//! the parallel model. Each emitted token costs one decoder pass over the
//! whole prefix (no key/value cache).

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{self, Kind};
use super::decoder::{DecodeOptions, TokenDecoder};
use super::{max_posteriors, Encoder, ModelConfig};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::losses;
use crate::nn::{causal_mask, positional_encoding};
use crate::params::{ParamId, ParamStore};
use crate::speaker::{self, SpeakerInventory};
use crate::tensor::{Scalar, Tensor};
use crate::tsot::Hypothesis;

#[derive(Clone, Debug)]
pub struct ArNetwork {
    pub encoder: Encoder,
    /// `(V+1)×d`; row `V` is the start/end symbol.
    pub token_embed: ParamId,
    /// Outputs `V+1` token logits followed by a `d_spk` speaker query.
    pub decoder: TokenDecoder,
}

pub struct ArBaseline<T> {
    cfg: ModelConfig,
    params: ParamStore<T>,
    net: ArNetwork,
    decoder_calls: AtomicUsize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArOutput {
    pub hypothesis: Hypothesis,
    /// Decoder passes executed, including the one that produced the end
    /// symbol.
    pub steps: usize,
}

impl<T: Scalar> ArBaseline<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let mut ps = ParamStore::new();
        let v = cfg.vocab_size;
        let encoder = Encoder::new(&mut ps, "ar.encoder", cfg.input_dim, cfg.attn, cfg.encoder_layers, rng)?;
        let token_embed = ps.register_uniform("ar.token_embed", v + 1, cfg.attn.model_dim, rng)?;
        let decoder = TokenDecoder::new(&mut ps, "ar.decoder", cfg.attn, cfg.decoder_layers, v + 1 + cfg.d_spk, true, rng)?;
        Ok(Self { cfg, params: ps, net: ArNetwork { encoder, token_embed, decoder }, decoder_calls: AtomicUsize::new(0) })
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

    pub fn eos(&self) -> usize {
        self.cfg.vocab_size
    }

    pub fn decoder_calls(&self) -> usize {
        self.decoder_calls.load(Ordering::Relaxed)
    }

    pub fn reset_decoder_calls(&self) {
        self.decoder_calls.store(0, Ordering::Relaxed);
    }

    /// Decoder over `prefix` (starting with the end symbol): `L×(V+1+d_spk)`.
    fn decode(&self, g: &mut Graph<'_, T>, h: Var, prefix: &[usize]) -> Result<Var> {
        self.decoder_calls.fetch_add(1, Ordering::Relaxed);
        let table = g.param(self.net.token_embed);
        let e = g.gather_rows(table, prefix)?;
        let pe = g.constant(positional_encoding(prefix.len(), self.cfg.attn.model_dim));
        let e = g.add(e, pe)?;
        let mask = causal_mask(prefix.len());
        let opts = DecodeOptions { self_mask: Some(&mask), disable_self_attention: false };
        self.net.decoder.forward(g, e, h, None, opts)
    }

    /// Teacher-forced loss: mean token CE (including the end symbol) plus the
    /// summed speaker loss.
    pub fn training_loss(
        &self,
        g: &mut Graph<'_, T>,
        x: &Tensor<T>,
        tokens: &[usize],
        speakers: &[usize],
        inv: &SpeakerInventory<T>,
    ) -> Result<Var> {
        if tokens.len() != speakers.len() {
            return Err(Error::Shape(format!("{} speaker labels for {} tokens", speakers.len(), tokens.len())));
        }
        let v = self.cfg.vocab_size;
        let xv = g.constant(x.clone());
        let (h, _) = self.net.encoder.forward(g, xv)?;
        let mut prefix = vec![self.eos()];
        prefix.extend_from_slice(tokens);
        let out = self.decode(g, h, &prefix)?;
        let logits = g.slice_cols(out, 0, v + 1)?;
        let mut targets = tokens.to_vec();
        targets.push(self.eos());
        let ce = losses::ce_loss(g, logits, &targets)?;
        if tokens.is_empty() {
            return Ok(ce);
        }
        let q = g.slice_cols(out, v + 1, self.cfg.d_spk)?;
        let rows: Vec<usize> = (0..tokens.len()).collect();
        let q = g.gather_rows(q, &rows)?;
        let scores = speaker::cosine_scores(g, q, inv)?;
        let spk = losses::speaker_loss(g, scores, speakers)?;
        g.add(ce, spk)
    }

    /// Greedy decoding until the end symbol or `max_len` tokens. With
    /// `suppress_eos` the end symbol is never chosen (fixed-length timing).
    pub fn infer(&self, x: &Tensor<T>, inv: &SpeakerInventory<T>, max_len: usize, suppress_eos: bool) -> Result<ArOutput> {
        if max_len == 0 {
            return Err(Error::Contract("max_len must be at least 1".into()));
        }
        if x.cols() != self.cfg.input_dim {
            return Err(Error::Shape(format!("input has {} features, model expects {}", x.cols(), self.cfg.input_dim)));
        }
        let v = self.cfg.vocab_size;
        let profiles = inv.genuine().matrix();
        let mut g = Graph::with_params(&self.params);
        g.no_grad(|g| {
            let xv = g.constant(x.clone());
            let (h, _) = self.net.encoder.forward(g, xv)?;
            let mut prefix = vec![self.eos()];
            let mut hyp = Hypothesis::default();
            let mut steps = 0;
            while hyp.tokens.len() < max_len {
                steps += 1;
                let out = self.decode(g, h, &prefix)?;
                let last = g.value(out).row(prefix.len() - 1).to_vec();
                let limit = if suppress_eos { v } else { v + 1 };
                let mut best = 0;
                for k in 1..limit {
                    if last[k] > last[best] {
                        best = k;
                    }
                }
                if best == self.eos() {
                    break;
                }
                let logits = Tensor::matrix(1, limit, last[..limit].to_vec());
                hyp.scores.push(max_posteriors(&logits)[0]);
                let q = Tensor::matrix(1, self.cfg.d_spk, last[v + 1..].to_vec());
                let b = speaker::cosine_matrix(&q, &profiles);
                let k = speaker::assign_indices(&b)[0];
                hyp.speakers.push(inv.profiles()[k].id.clone());
                hyp.tokens.push(best);
                prefix.push(best);
            }
            Ok(ArOutput { hypothesis: hyp, steps })
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, Kind::Ar, &self.cfg, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (kind, cfg, params) = checkpoint::load::<T>(path)?;
        if kind != Kind::Ar {
            return Err(Error::Checkpoint(format!("{} holds a {kind:?} model", path.display())));
        }
        let mut m = Self::new(cfg, 0)?;
        m.params.load_from(&params)?;
        Ok(m)
    }
}
