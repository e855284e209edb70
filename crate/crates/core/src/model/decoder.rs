//! Token decoder shared by the NAR model (parallel, no mask) and the AR
//! baseline (causal self-attention).

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{AttentionConfig, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    /// Absent on the first NAR layer, which only cross-attends.
    pub self_att: Option<(LayerNorm, MultiHeadAttention)>,
    pub ln_cross: LayerNorm,
    pub cross: MultiHeadAttention,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
}

impl DecoderLayer {
    fn new<T: Scalar, R: Rng>(
        ps: &mut ParamStore<T>,
        name: &str,
        cfg: AttentionConfig,
        with_self: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.model_dim;
        let self_att = if with_self {
            Some((
                LayerNorm::new(ps, &format!("{name}.ln_self"), d)?,
                MultiHeadAttention::new(ps, &format!("{name}.self_mha"), cfg, rng)?,
            ))
        } else {
            None
        };
        Ok(Self {
            self_att,
            ln_cross: LayerNorm::new(ps, &format!("{name}.ln_cross"), d)?,
            cross: MultiHeadAttention::new(ps, &format!("{name}.cross_mha"), cfg, rng)?,
            ln_ff: LayerNorm::new(ps, &format!("{name}.ln_ff"), d)?,
            ff: FeedForward::new(ps, &format!("{name}.ff"), cfg, rng)?,
        })
    }
}

/// Knobs for a decoder pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct DecodeOptions<'m, T> {
    /// Added to self-attention scores (causal mask for the AR baseline).
    pub self_mask: Option<&'m Tensor<T>>,
    /// Skip every self-attention sublayer (diagnostic).
    pub disable_self_attention: bool,
}

#[derive(Clone, Debug)]
pub struct TokenDecoder {
    pub layers: Vec<DecoderLayer>,
    pub ln_out: LayerNorm,
    pub out: Linear,
}

impl TokenDecoder {
    /// `first_self`: whether layer 0 has self-attention too.
    pub fn new<T: Scalar, R: Rng>(
        ps: &mut ParamStore<T>,
        name: &str,
        cfg: AttentionConfig,
        num_layers: usize,
        out_dim: usize,
        first_self: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if num_layers == 0 {
            return Err(Error::Config("decoder needs at least one layer".into()));
        }
        let layers = (0..num_layers)
            .map(|l| DecoderLayer::new(ps, &format!("{name}.layer{l}"), cfg, l > 0 || first_self, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            ln_out: LayerNorm::new(ps, &format!("{name}.ln_out"), cfg.model_dim)?,
            out: Linear::new(ps, &format!("{name}.out"), cfg.model_dim, out_dim, true, rng)?,
        })
    }

    /// `e` is `N×d`, `h` is `T×d`; `fusion` (`N×d`) is added to the input of
    /// the first layer's feed-forward block only.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        e: Var,
        h: Var,
        fusion: Option<Var>,
        opts: DecodeOptions<'_, T>,
    ) -> Result<Var> {
        if let Some(f) = fusion {
            if g.shape(f) != g.shape(e) {
                return Err(Error::Shape(format!(
                    "speaker fusion {:?} does not match decoder input {:?}",
                    g.shape(f),
                    g.shape(e)
                )));
            }
        }
        let mut x = e;
        for (l, layer) in self.layers.iter().enumerate() {
            if let (Some((ln, mha)), false) = (&layer.self_att, opts.disable_self_attention) {
                let n = ln.forward(g, x)?;
                let a = mha.forward(g, n, n, n, opts.self_mask)?;
                x = g.add(x, a)?;
            }
            let n = layer.ln_cross.forward(g, x)?;
            let a = layer.cross.forward(g, n, h, h, None)?;
            x = g.add(x, a)?;
            let ff_in = match fusion {
                Some(f) if l == 0 => g.add(x, f)?,
                _ => x,
            };
            let n = layer.ln_ff.forward(g, ff_in)?;
            let f = layer.ff.forward(g, n)?;
            x = g.add(x, f)?;
        }
        let n = self.ln_out.forward(g, x)?;
        self.out.forward(g, n)
    }
}
