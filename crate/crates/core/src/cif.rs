//! Continuous integrate-and-fire: per-frame weights, token boundaries and
//! token-level acoustic embeddings.
//!
//! Frame weights α are accumulated left to right. When the running sum of the
//! open token reaches the threshold β, the current frame is split: the token
//! receives exactly `β − acc` and the excess opens the next token. A frame with
//! weight larger than β may fire several tokens. Frame indices are 0-based.

use rand::Rng;

use crate::autodiff::{CustomBackward, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Default firing threshold β.
pub const DEFAULT_THRESHOLD: f64 = 1.0;

/// Accumulations within this distance (relative to β) of the threshold fire.
/// Absorbs the rounding drift of `scale_weights`, whose output sums to an
/// exact multiple of β only up to a few ulps.
pub const FIRE_TOLERANCE: f64 = 1e-9;

/// Per-frame weights α, each in `[0, 1]` when produced by the predictor.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightSequence<T> {
    pub alpha: Vec<T>,
}

impl<T: Scalar> WeightSequence<T> {
    pub fn new(alpha: Vec<T>) -> Self {
        Self { alpha }
    }

    /// Reads a `T×1` weight column out of a graph.
    pub fn from_var(g: &Graph<'_, T>, alpha: Var) -> Self {
        Self { alpha: g.value(alpha).data().to_vec() }
    }

    pub fn total(&self) -> T {
        self.alpha.iter().copied().sum()
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    fn as_column(&self) -> Tensor<T> {
        Tensor::matrix(self.alpha.len(), 1, self.alpha.clone())
    }
}

/// What happens to an unfinished token at the end of the sequence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TailPolicy {
    /// The residue is discarded.
    Drop,
    /// The residue is emitted as a final token when it is at least this
    /// fraction of β.
    FireAbove(f64),
}

/// One piece of a frame's weight assigned to one token.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Share<T> {
    pub token: usize,
    pub frame: usize,
    pub weight: T,
    /// The token reached the threshold inside this share.
    pub fired: bool,
    /// First share taken from this frame.
    pub first_in_frame: bool,
}

/// Outcome of integrate-and-fire over one sequence.
#[derive(Clone, Debug)]
pub struct FiringPlan<T> {
    pub threshold_beta: T,
    /// Frame at which each emitted token fired (the tail token, if emitted,
    /// is reported at the last frame).
    pub firings: Vec<usize>,
    /// Weight of the unfinished token left after the last frame.
    pub residue: T,
    /// Emitted token embeddings `E_a`, `firings.len() × d`.
    pub embeddings: Tensor<T>,
    /// Every weight share, including those of the unfinished tail token.
    pub shares: Vec<Share<T>>,
}

impl<T: Scalar> FiringPlan<T> {
    pub fn num_tokens(&self) -> usize {
        self.firings.len()
    }

    /// Sum of the frame weights assigned to each emitted token.
    pub fn token_weight_sums(&self) -> Vec<T> {
        let mut sums = vec![T::zero(); self.firings.len()];
        for s in &self.shares {
            if s.token < sums.len() {
                sums[s.token] += s.weight;
            }
        }
        sums
    }
}

/// Pure accumulation: shares, firing frames and residue.
pub fn accumulate<T: Scalar>(alpha: &[T], beta: T) -> (Vec<Share<T>>, Vec<usize>, T) {
    let tol = beta * T::lit(FIRE_TOLERANCE);
    let mut shares = Vec::with_capacity(alpha.len() + alpha.len() / 2);
    let mut firings = Vec::new();
    let mut acc = T::zero();
    for (t, &a) in alpha.iter().enumerate() {
        let mut remaining = a;
        let mut first = true;
        while acc + remaining >= beta - tol {
            let take = (beta - acc).min(remaining).max(T::zero());
            shares.push(Share { token: firings.len(), frame: t, weight: take, fired: true, first_in_frame: first });
            firings.push(t);
            remaining = (remaining - take).max(T::zero());
            acc = T::zero();
            first = false;
        }
        if remaining > T::zero() {
            shares.push(Share { token: firings.len(), frame: t, weight: remaining, fired: false, first_in_frame: first });
            acc += remaining;
        }
    }
    (shares, firings, acc)
}

fn plan_from_shares<T: Scalar>(
    h: &Tensor<T>,
    shares: Vec<Share<T>>,
    mut firings: Vec<usize>,
    residue: T,
    beta: T,
    tail: TailPolicy,
) -> FiringPlan<T> {
    if let TailPolicy::FireAbove(frac) = tail {
        if residue > T::zero() && residue >= beta * T::lit(frac) && !h.is_empty() {
            firings.push(h.rows() - 1);
        }
    }
    let d = h.cols();
    let mut emb = Tensor::zeros(firings.len(), d);
    for s in &shares {
        if s.token < firings.len() {
            let hrow = h.row(s.frame);
            for (o, &v) in emb.row_mut(s.token).iter_mut().zip(hrow) {
                *o += s.weight * v;
            }
        }
    }
    FiringPlan { threshold_beta: beta, firings, residue, embeddings: emb, shares }
}

fn check_inputs<T: Scalar>(frames: usize, weights: usize, beta: T) -> Result<()> {
    if !(beta > T::zero()) {
        return Err(Error::Contract(format!("CIF threshold must be positive, got {beta}")));
    }
    if frames != weights {
        return Err(Error::Shape(format!("{frames} frames but {weights} weights")));
    }
    Ok(())
}

/// Value-level integrate-and-fire with the residue dropped.
pub fn integrate_and_fire<T: Scalar>(h: &Tensor<T>, w: &WeightSequence<T>, beta: T) -> Result<FiringPlan<T>> {
    check_inputs(h.rows(), w.len(), beta)?;
    let (shares, firings, residue) = accumulate(&w.alpha, beta);
    Ok(plan_from_shares(h, shares, firings, residue, beta, TailPolicy::Drop))
}

/// Returns `α · (target_len·β / Σα)`.
pub fn scale_weights<T: Scalar>(w: &WeightSequence<T>, target_len: usize, beta: T) -> Result<WeightSequence<T>> {
    let total = w.total();
    if !(total > T::zero()) {
        return Err(Error::DegenerateWeights(total.as_f64()));
    }
    if target_len == 0 {
        return Err(Error::Contract("scale_weights target length must be at least 1".into()));
    }
    let c = T::from_usize_lossy(target_len) * beta / total;
    Ok(WeightSequence::new(w.alpha.iter().map(|&a| a * c).collect()))
}

/// Frame-weight predictor: one linear layer followed by a sigmoid.
#[derive(Clone, Debug)]
pub struct Predictor {
    pub proj: Linear,
}

impl Predictor {
    pub fn new<T: Scalar, R: Rng>(ps: &mut ParamStore<T>, name: &str, model_dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Self { proj: Linear::new(ps, &format!("{name}.proj"), model_dim, 1, true, rng)? })
    }

    /// `T×d → T×1` weights in `[0, 1]`.
    pub fn predict_weights<T: Scalar>(&self, g: &mut Graph<'_, T>, h_asr: Var) -> Result<Var> {
        let z = self.proj.forward(g, h_asr)?;
        Ok(g.sigmoid(z))
    }
}

struct CifBackward<T> {
    shares: Vec<Share<T>>,
    emitted: usize,
    frames: usize,
}

impl<T: Scalar> CustomBackward<T> for CifBackward<T> {
    // inputs: [alpha (T×1), h (T×d)]
    fn backward(&self, out_grad: &Tensor<T>, inputs: &[&Tensor<T>], _output: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let h = inputs[1];
        let d = h.cols();
        let mut dh = Tensor::zeros(self.frames, d);
        // share weight w = U − L with U = A_t unless the token fired in the
        // share, L = A_{t−1} for the first share of a frame; A is the
        // cumulative weight, so dA_t/dα_s = [s ≤ t].
        let mut upper = vec![T::zero(); self.frames];
        let mut lower = vec![T::zero(); self.frames];
        for s in self.shares.iter().filter(|s| s.token < self.emitted) {
            let gn = out_grad.row(s.token);
            let ht = h.row(s.frame);
            let c: T = gn.iter().zip(ht).map(|(&a, &b)| a * b).sum();
            for (o, &v) in dh.row_mut(s.frame).iter_mut().zip(gn) {
                *o += s.weight * v;
            }
            if !s.fired {
                upper[s.frame] += c;
            }
            if s.first_in_frame {
                lower[s.frame] += c;
            }
        }
        let mut dalpha = vec![T::zero(); self.frames];
        let mut suffix_u = T::zero();
        let mut suffix_l = T::zero();
        for s in (0..self.frames).rev() {
            suffix_u += upper[s];
            dalpha[s] = suffix_u - suffix_l;
            suffix_l += lower[s];
        }
        vec![Some(Tensor::matrix(self.frames, 1, dalpha)), Some(dh)]
    }
}

/// Differentiable integrate-and-fire: `alpha` is `T×1`, `h` is `T×d`.
/// Returns the `N×d` embedding node together with the firing plan.
pub fn cif<T: Scalar>(
    g: &mut Graph<'_, T>,
    h: Var,
    alpha: Var,
    beta: T,
    tail: TailPolicy,
) -> Result<(Var, FiringPlan<T>)> {
    let (th, _) = g.shape(h);
    let (ta, ca) = g.shape(alpha);
    if ca != 1 {
        return Err(Error::Shape(format!("CIF weights must be a column, got {ta}×{ca}")));
    }
    check_inputs(th, ta, beta)?;
    let (shares, firings, residue) = accumulate(g.value(alpha).data(), beta);
    let plan = plan_from_shares(g.value(h), shares, firings, residue, beta, tail);
    let rule = CifBackward { shares: plan.shares.clone(), emitted: plan.num_tokens(), frames: th };
    let out = g.custom(&[alpha, h], plan.embeddings.clone(), Box::new(rule));
    Ok((out, plan))
}

struct ScaleBackward<T> {
    factor: T,
    total: T,
}

impl<T: Scalar> CustomBackward<T> for ScaleBackward<T> {
    fn backward(&self, out_grad: &Tensor<T>, inputs: &[&Tensor<T>], _output: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        // out_i = c·α_i/S with S = Σα, c = Nβ:
        // dα_j = (c/S)·g_j − (c/S²)·Σ_i g_i α_i
        let alpha = inputs[0];
        let dot: T = out_grad.data().iter().zip(alpha.data()).map(|(&a, &b)| a * b).sum();
        let cs = self.factor / self.total;
        let corr = cs / self.total * dot;
        vec![Some(out_grad.map(|gv| cs * gv - corr))]
    }
}

/// Graph version of [`scale_weights`]; gradients flow through Σα too.
pub fn scale_weights_var<T: Scalar>(g: &mut Graph<'_, T>, alpha: Var, target_len: usize, beta: T) -> Result<Var> {
    let w = WeightSequence::from_var(g, alpha);
    let scaled = scale_weights(&w, target_len, beta)?;
    let rule = ScaleBackward { factor: T::from_usize_lossy(target_len) * beta, total: w.total() };
    Ok(g.custom(&[alpha], scaled.as_column(), Box::new(rule)))
}

/// Quantity loss `|N − Σα|` on the unscaled weights.
pub fn mae_loss<T: Scalar>(g: &mut Graph<'_, T>, alpha: Var, target_len: usize) -> Result<Var> {
    let total = g.sum(alpha);
    let n = g.constant(Tensor::scalar(T::from_usize_lossy(target_len)));
    let diff = g.sub(n, total)?;
    Ok(g.abs(diff))
}
