//! Transformer building blocks on top of the autodiff graph.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self { model_dim: 32, num_heads: 4, ff_dim: 64 }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.model_dim == 0 || self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} must be a positive multiple of num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.ff_dim == 0 {
            return Err(Error::Config("ff_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        ps: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = ps.register_uniform(format!("{name}.weight"), fan_in, fan_out, rng)?;
        let bias = if bias { Some(ps.register_zeros(format!("{name}.bias"), 1, fan_out)?) } else { None };
        Ok(Self { weight, bias })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: ps.register_full(format!("{name}.gain"), 1, dim, T::one())?,
            bias: ps.register_zeros(format!("{name}.bias"), 1, dim)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        g.layer_norm(x, gain, bias)
    }
}

/// Scaled dot-product attention with separate query/key/value sources.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub cfg: AttentionConfig,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar, R: Rng>(ps: &mut ParamStore<T>, name: &str, cfg: AttentionConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        Ok(Self {
            cfg,
            wq: Linear::new(ps, &format!("{name}.wq"), d, d, true, rng)?,
            wk: Linear::new(ps, &format!("{name}.wk"), d, d, true, rng)?,
            wv: Linear::new(ps, &format!("{name}.wv"), d, d, true, rng)?,
            wo: Linear::new(ps, &format!("{name}.wo"), d, d, true, rng)?,
        })
    }

    /// `mask`, when given, is added to the `Nq×Nk` score matrix of every head
    /// (use a large negative value to hide a key).
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<&Tensor<T>>,
    ) -> Result<Var> {
        let (nk, _) = g.shape(k);
        if g.shape(v).0 != nk {
            return Err(Error::Shape(format!(
                "attention keys ({nk} rows) and values ({} rows) differ in length",
                g.shape(v).0
            )));
        }
        let qp = self.wq.forward(g, q)?;
        let kp = self.wk.forward(g, k)?;
        let vp = self.wv.forward(g, v)?;
        let dh = self.cfg.head_dim();
        let scale = T::one() / T::from_usize_lossy(dh).sqrt();
        let mask = mask.map(|m| g.constant(m.clone()));
        let mut heads = Vec::with_capacity(self.cfg.num_heads);
        for h in 0..self.cfg.num_heads {
            let (qh, kh, vh) = if self.cfg.num_heads == 1 {
                (qp, kp, vp)
            } else {
                (g.slice_cols(qp, h * dh, dh)?, g.slice_cols(kp, h * dh, dh)?, g.slice_cols(vp, h * dh, dh)?)
            };
            let s = g.matmul_bt(qh, kh)?;
            let mut s = g.scale(s, scale);
            if let Some(m) = mask {
                s = g.add(s, m)?;
            }
            let a = g.softmax(s)?;
            heads.push(g.matmul(a, vh)?);
        }
        let o = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        self.wo.forward(g, o)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub w1: Linear,
    pub w2: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar, R: Rng>(ps: &mut ParamStore<T>, name: &str, cfg: AttentionConfig, rng: &mut R) -> Result<Self> {
        Ok(Self {
            w1: Linear::new(ps, &format!("{name}.w1"), cfg.model_dim, cfg.ff_dim, true, rng)?,
            w2: Linear::new(ps, &format!("{name}.w2"), cfg.ff_dim, cfg.model_dim, true, rng)?,
        })
    }

    /// linear → GELU → linear
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.w1.forward(g, x)?;
        let h = g.gelu(h);
        self.w2.forward(g, h)
    }
}

/// Pre-norm self-attention encoder block.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub ln_att: LayerNorm,
    pub mha: MultiHeadAttention,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderLayer {
    pub fn new<T: Scalar, R: Rng>(ps: &mut ParamStore<T>, name: &str, cfg: AttentionConfig, rng: &mut R) -> Result<Self> {
        Ok(Self {
            ln_att: LayerNorm::new(ps, &format!("{name}.ln_att"), cfg.model_dim)?,
            mha: MultiHeadAttention::new(ps, &format!("{name}.mha"), cfg, rng)?,
            ln_ff: LayerNorm::new(ps, &format!("{name}.ln_ff"), cfg.model_dim)?,
            ff: FeedForward::new(ps, &format!("{name}.ff"), cfg, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, mask: Option<&Tensor<T>>) -> Result<Var> {
        let n = self.ln_att.forward(g, x)?;
        let a = self.mha.forward(g, n, n, n, mask)?;
        let x = g.add(x, a)?;
        let n = self.ln_ff.forward(g, x)?;
        let f = self.ff.forward(g, n)?;
        g.add(x, f)
    }
}

/// Sinusoidal position table, `len × dim`.
pub fn positional_encoding<T: Scalar>(len: usize, dim: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(len, dim);
    for pos in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10_000f64.powf(2.0 * pair / dim as f64);
            let v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            t.set(pos, i, T::lit(v));
        }
    }
    t
}

/// Additive mask hiding future positions (`j > i`).
pub fn causal_mask<T: Scalar>(len: usize) -> Tensor<T> {
    let mut m = Tensor::zeros(len, len);
    for i in 0..len {
        for j in i + 1..len {
            m.set(i, j, T::lit(-1e9));
        }
    }
    m
}
