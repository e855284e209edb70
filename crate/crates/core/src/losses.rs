//! Training objective: cross-entropy, CTC (plus its intermediate-layer
//! variant), speaker loss and the weighted composite.

use serde::{Deserialize, Serialize};

use crate::autodiff::{log_softmax_rows, softmax_rows, CustomBackward, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::speaker::CosineScores;
use crate::tensor::{Scalar, Tensor};

/// Loss charged for a CTC instance with no valid alignment during training.
pub const CTC_INFEASIBLE_PENALTY: f64 = 1e4;

/// Mean negative log-likelihood of `targets` under row-softmaxed `logits`.
/// An empty sequence costs zero.
pub fn ce_loss<T: Scalar>(g: &mut Graph<'_, T>, logits: Var, targets: &[usize]) -> Result<Var> {
    let (n, _) = g.shape(logits);
    if n != targets.len() {
        return Err(Error::Shape(format!("{n} logit rows for {} targets", targets.len())));
    }
    if n == 0 {
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }
    let lp = g.log_softmax(logits)?;
    let picked = g.pick(lp, targets)?;
    let m = g.mean(picked);
    Ok(g.scale(m, -T::one()))
}

/// CTC on frame logits `T×(V+1)`; the blank is the last class.
#[derive(Clone, Copy, Debug)]
pub enum CtcLoss {
    Finite(Var),
    /// The target cannot be aligned to the available frames.
    Infeasible,
}

impl CtcLoss {
    pub fn var(self) -> Option<Var> {
        match self {
            Self::Finite(v) => Some(v),
            Self::Infeasible => None,
        }
    }

    /// The loss node, or a constant penalty when infeasible.
    pub fn or_penalty<T: Scalar>(self, g: &mut Graph<'_, T>) -> Var {
        match self {
            Self::Finite(v) => v,
            Self::Infeasible => g.constant(Tensor::scalar(T::lit(CTC_INFEASIBLE_PENALTY))),
        }
    }
}

/// Minimum number of frames needed to emit `target` (a blank must separate
/// repeated labels).
pub fn ctc_min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn log_add<T: Scalar>(a: T, b: T) -> T {
    if a == T::neg_infinity() {
        return b;
    }
    if b == T::neg_infinity() {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

struct CtcBackward<T> {
    grad: Tensor<T>,
}

impl<T: Scalar> CustomBackward<T> for CtcBackward<T> {
    fn backward(&self, out_grad: &Tensor<T>, _inputs: &[&Tensor<T>], _output: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let s = out_grad.item();
        vec![Some(self.grad.map(|v| v * s))]
    }
}

/// Forward-backward in log space. Returns `(−log p(target), ∂/∂logits)`,
/// or `None` when no alignment exists.
pub fn ctc_forward_backward<T: Scalar>(logits: &Tensor<T>, target: &[usize]) -> Result<Option<(T, Tensor<T>)>> {
    let frames = logits.rows();
    let classes = logits.cols();
    if classes < 1 {
        return Err(Error::Shape("CTC needs at least the blank class".into()));
    }
    let blank = classes - 1;
    if let Some(&bad) = target.iter().find(|&&y| y >= blank) {
        return Err(Error::Contract(format!("CTC target label {bad} collides with blank {blank}")));
    }
    if frames < ctc_min_frames(target) || frames == 0 {
        return Ok(None);
    }
    let lp = log_softmax_rows(logits);
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &y in target {
        ext.push(y);
        ext.push(blank);
    }
    let s_len = ext.len();
    let ninf = T::neg_infinity();
    let skip_ok = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];

    let mut alpha = vec![vec![ninf; s_len]; frames];
    alpha[0][0] = lp.get(0, ext[0]);
    if s_len > 1 {
        alpha[0][1] = lp.get(0, ext[1]);
    }
    for t in 1..frames {
        for s in 0..s_len {
            let mut a = alpha[t - 1][s];
            if s >= 1 {
                a = log_add(a, alpha[t - 1][s - 1]);
            }
            if skip_ok(s) {
                a = log_add(a, alpha[t - 1][s - 2]);
            }
            if a != ninf {
                alpha[t][s] = a + lp.get(t, ext[s]);
            }
        }
    }
    let mut log_p = alpha[frames - 1][s_len - 1];
    if s_len > 1 {
        log_p = log_add(log_p, alpha[frames - 1][s_len - 2]);
    }
    if log_p == ninf {
        return Ok(None);
    }

    // beta[t][s]: log-prob of finishing from state s at frame t, emission at t excluded
    let mut beta = vec![vec![ninf; s_len]; frames];
    beta[frames - 1][s_len - 1] = T::zero();
    if s_len > 1 {
        beta[frames - 1][s_len - 2] = T::zero();
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let mut b = ninf;
            for s2 in [s, s + 1, s + 2] {
                if s2 >= s_len || (s2 == s + 2 && !skip_ok(s2)) {
                    continue;
                }
                let next = beta[t + 1][s2];
                if next != ninf {
                    b = log_add(b, next + lp.get(t + 1, ext[s2]));
                }
            }
            beta[t][s] = b;
        }
    }

    let mut grad = softmax_rows(logits);
    for t in 0..frames {
        for s in 0..s_len {
            let ab = alpha[t][s] + beta[t][s];
            if ab != ninf {
                let occ = (ab - log_p).exp();
                let c = ext[s];
                grad.set(t, c, grad.get(t, c) - occ);
            }
        }
    }
    Ok(Some((-log_p, grad)))
}

pub fn ctc_loss<T: Scalar>(g: &mut Graph<'_, T>, frame_logits: Var, target: &[usize]) -> Result<CtcLoss> {
    match ctc_forward_backward(g.value(frame_logits), target)? {
        None => Ok(CtcLoss::Infeasible),
        Some((loss, grad)) => {
            let v = g.custom(&[frame_logits], Tensor::scalar(loss), Box::new(CtcBackward { grad }));
            Ok(CtcLoss::Finite(v))
        }
    }
}

/// CTC on an intermediate encoder layer through its own projection head.
pub fn inter_ctc_loss<T: Scalar>(g: &mut Graph<'_, T>, h_inter: Var, head: &Linear, target: &[usize]) -> Result<CtcLoss> {
    let logits = head.forward(g, h_inter)?;
    ctc_loss(g, logits, target)
}

/// `Σ_n −log softmax(b_n)[i_n]` over raw cosine scores (a sum, not a mean).
pub fn speaker_loss<T: Scalar>(g: &mut Graph<'_, T>, scores: CosineScores, true_indices: &[usize]) -> Result<Var> {
    let (n, _) = g.shape(scores.b);
    if n != true_indices.len() {
        return Err(Error::Shape(format!("{n} score rows for {} speaker targets", true_indices.len())));
    }
    if let Some(&bad) = true_indices.iter().find(|&&i| i >= scores.genuine) {
        return Err(Error::Contract(format!(
            "speaker target {bad} points outside the {} inventory columns",
            scores.genuine
        )));
    }
    if n == 0 {
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }
    let lp = g.log_softmax(scores.b)?;
    let picked = g.pick(lp, true_indices)?;
    let s = g.sum(picked);
    Ok(g.scale(s, -T::one()))
}

/// Interpolation weights λ₁ (CTC) and λ₂ (intermediate CTC).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 0.3, lambda2: 0.3 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda1 >= 0.0 && self.lambda2 >= 0.0 && self.lambda1 + self.lambda2 <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "loss weights need λ1, λ2 ≥ 0 and λ1 + λ2 ≤ 1 (got {}, {})",
                self.lambda1, self.lambda2
            )))
        }
    }

    pub fn ce_weight(&self) -> f64 {
        1.0 - self.lambda1 - self.lambda2
    }
}

/// Scalar loss nodes feeding [`composite_loss`].
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub mae: Var,
    pub ctc: Var,
    pub inter_ctc: Var,
    pub ce: Var,
    pub speaker: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub mae: Var,
    pub ctc: Var,
    pub inter_ctc: Var,
    pub ce: Var,
    pub speaker: Var,
    pub total: Var,
}

/// Plain numbers read back from a [`LossBreakdown`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub mae: f64,
    pub ctc: f64,
    pub inter_ctc: f64,
    pub ce: f64,
    pub speaker: f64,
    pub total: f64,
}

impl LossValues {
    pub fn add(&mut self, o: &LossValues) {
        self.mae += o.mae;
        self.ctc += o.ctc;
        self.inter_ctc += o.inter_ctc;
        self.ce += o.ce;
        self.speaker += o.speaker;
        self.total += o.total;
    }

    pub fn scaled(&self, s: f64) -> LossValues {
        LossValues {
            mae: self.mae * s,
            ctc: self.ctc * s,
            inter_ctc: self.inter_ctc * s,
            ce: self.ce * s,
            speaker: self.speaker * s,
            total: self.total * s,
        }
    }
}

impl LossBreakdown {
    pub fn values<T: Scalar>(&self, g: &Graph<'_, T>) -> LossValues {
        let v = |x: Var| g.value(x).item().as_f64();
        LossValues {
            mae: v(self.mae),
            ctc: v(self.ctc),
            inter_ctc: v(self.inter_ctc),
            ce: v(self.ce),
            speaker: v(self.speaker),
            total: v(self.total),
        }
    }
}

/// `mae + λ₁·ctc + λ₂·inter_ctc + (1−λ₁−λ₂)·ce + speaker`
pub fn composite_loss<T: Scalar>(g: &mut Graph<'_, T>, parts: LossParts, w: LossWeights) -> Result<LossBreakdown> {
    w.validate()?;
    let ctc = g.scale(parts.ctc, T::lit(w.lambda1));
    let inter = g.scale(parts.inter_ctc, T::lit(w.lambda2));
    let ce = g.scale(parts.ce, T::lit(w.ce_weight()));
    let mut total = g.add(parts.mae, ctc)?;
    total = g.add(total, inter)?;
    total = g.add(total, ce)?;
    total = g.add(total, parts.speaker)?;
    Ok(LossBreakdown {
        mae: parts.mae,
        ctc: parts.ctc,
        inter_ctc: parts.inter_ctc,
        ce: parts.ce,
        speaker: parts.speaker,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(g: &mut Graph<'_, f64>, v: f64) -> Var {
        g.constant(Tensor::scalar(v))
    }

    #[test]
    fn uniform_logits_cost_ln_v() {
        let mut g = Graph::<f64>::new();
        let l = g.input(Tensor::zeros(3, 4));
        let loss = ce_loss(&mut g, l, &[0, 2, 3]).unwrap();
        assert!((g.value(loss).item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_large_margin_and_empty() {
        let mut g = Graph::<f64>::new();
        let l = g.input(Tensor::matrix(1, 3, vec![0.0, 60.0, 0.0]));
        let loss = ce_loss(&mut g, l, &[1]).unwrap();
        assert!(g.value(loss).item() < 1e-20);
        let e = g.input(Tensor::zeros(0, 3));
        let loss = ce_loss(&mut g, e, &[]).unwrap();
        assert_eq!(g.value(loss).item(), 0.0);
    }

    #[test]
    fn ctc_single_frame_single_label() {
        let logits = Tensor::<f64>::matrix(1, 3, vec![0.2, -0.4, 0.9]);
        let (loss, _) = ctc_forward_backward(&logits, &[1]).unwrap().unwrap();
        let lp = log_softmax_rows(&logits);
        assert!((loss + lp.get(0, 1)).abs() < 1e-12);
    }

    #[test]
    fn ctc_empty_target_is_all_blank() {
        let logits = Tensor::<f64>::matrix(3, 3, vec![0.2, -0.4, 0.9, 1.0, 0.0, -1.0, 0.3, 0.3, 0.1]);
        let (loss, _) = ctc_forward_backward(&logits, &[]).unwrap().unwrap();
        let lp = log_softmax_rows(&logits);
        let expected: f64 = -(0..3).map(|t| lp.get(t, 2)).sum::<f64>();
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn ctc_infeasible_is_reported() {
        let mut g = Graph::<f64>::new();
        let l = g.input(Tensor::zeros(2, 3));
        assert!(matches!(ctc_loss(&mut g, l, &[0, 0]).unwrap(), CtcLoss::Infeasible));
        assert!(matches!(ctc_loss(&mut g, l, &[0, 1]).unwrap(), CtcLoss::Finite(_)));
        let p = CtcLoss::Infeasible.or_penalty(&mut g);
        assert_eq!(g.value(p).item(), CTC_INFEASIBLE_PENALTY);
    }

    #[test]
    fn ctc_rejects_blank_in_target() {
        let logits = Tensor::<f64>::zeros(4, 3);
        assert!(ctc_forward_backward(&logits, &[2]).is_err());
    }

    #[test]
    fn composite_examples() {
        let w = LossWeights::default();
        let mut g = Graph::<f64>::new();
        let ones: Vec<Var> = (0..5).map(|_| scalar(&mut g, 1.0)).collect();
        let parts = LossParts { mae: ones[0], ctc: ones[1], inter_ctc: ones[2], ce: ones[3], speaker: ones[4] };
        let b = composite_loss(&mut g, parts, w).unwrap();
        assert!((g.value(b.total).item() - 3.0).abs() < 1e-12);

        let zero = scalar(&mut g, 0.0);
        let parts = LossParts { mae: zero, ctc: zero, inter_ctc: zero, ce: zero, speaker: zero };
        let b = composite_loss(&mut g, parts, w).unwrap();
        assert_eq!(g.value(b.total).item(), 0.0);

        // λ₂ = 0 reduces to mae + λ₁·ctc + (1−λ₁)·ce + spk
        let vals = [0.7, 1.9, 5.0, 2.3, 0.4];
        let v: Vec<Var> = vals.iter().map(|&x| scalar(&mut g, x)).collect();
        let parts = LossParts { mae: v[0], ctc: v[1], inter_ctc: v[2], ce: v[3], speaker: v[4] };
        let b = composite_loss(&mut g, parts, LossWeights { lambda1: 0.3, lambda2: 0.0 }).unwrap();
        let expected: f64 = 0.7 + 0.3 * 1.9 + 0.7 * 2.3 + 0.4;
        assert!((g.value(b.total).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn weight_violations_are_config_errors() {
        assert!(matches!(LossWeights { lambda1: 0.6, lambda2: 0.5 }.validate(), Err(Error::Config(_))));
        assert!(LossWeights { lambda1: -0.1, lambda2: 0.5 }.validate().is_err());
    }
}
