//! Speaker decoder and speaker-inventory attention.
//!
//! Each token embedding is turned into a speaker query, scored against the
//! inventory profiles by cosine similarity, and the softmax of those scores
//! weights the profiles into a per-token speaker vector.

use std::collections::HashSet;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{CustomBackward, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{AttentionConfig, FeedForward, LayerNorm, MultiHeadAttention};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Floor on the cosine denominator `|q||d|`.
pub const COSINE_EPS: f64 = 1e-8;
/// Filled scores are drawn from `uniform[-FILL_RANGE, FILL_RANGE]`.
pub const FILL_RANGE: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerProfile<T> {
    pub id: String,
    pub vector: Vec<T>,
}

impl<T: Scalar> SpeakerProfile<T> {
    /// Unit-normalizes `vector`.
    pub fn new(id: impl Into<String>, vector: Vec<T>) -> Result<Self> {
        let norm = vector.iter().map(|&v| v * v).sum::<T>().sqrt();
        if !(norm > T::zero()) || !norm.is_finite() {
            return Err(Error::Contract("speaker profile must have a finite, non-zero norm".into()));
        }
        Ok(Self { id: id.into(), vector: vector.into_iter().map(|v| v / norm).collect() })
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// Candidate speakers of one utterance. The first `true_count` profiles are
/// the genuine speakers; any after them are interfering speakers.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerInventory<T> {
    profiles: Vec<SpeakerProfile<T>>,
    true_count: usize,
}

impl<T: Scalar> SpeakerInventory<T> {
    pub fn new(profiles: Vec<SpeakerProfile<T>>) -> Result<Self> {
        let k = profiles.len();
        Self::with_true_count(profiles, k)
    }

    pub fn with_true_count(profiles: Vec<SpeakerProfile<T>>, true_count: usize) -> Result<Self> {
        if profiles.is_empty() {
            return Err(Error::Contract("speaker inventory needs at least one profile".into()));
        }
        if true_count > profiles.len() {
            return Err(Error::Contract(format!("true_count {true_count} exceeds {} profiles", profiles.len())));
        }
        let dim = profiles[0].dim();
        let mut seen = HashSet::new();
        for p in &profiles {
            if !seen.insert(p.id.as_str()) {
                return Err(Error::Contract(format!("duplicate speaker id {:?}", p.id)));
            }
            if p.dim() != dim {
                return Err(Error::Shape(format!("profile {:?} has dim {} instead of {dim}", p.id, p.dim())));
            }
        }
        Ok(Self { profiles, true_count })
    }

    pub fn profiles(&self) -> &[SpeakerProfile<T>] {
        &self.profiles
    }

    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }

    pub fn true_count(&self) -> usize {
        self.true_count
    }

    pub fn dim(&self) -> usize {
        self.profiles[0].dim()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.profiles.iter().map(|p| p.id.as_str()).collect()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.profiles.iter().position(|p| p.id == id)
    }

    /// `K×d_spk` profile matrix.
    pub fn matrix(&self) -> Tensor<T> {
        let rows: Vec<Vec<T>> = self.profiles.iter().map(|p| p.vector.clone()).collect();
        Tensor::from_rows(&rows)
    }

    /// Keeps only the genuine prefix.
    pub fn genuine(&self) -> Self {
        Self { profiles: self.profiles[..self.true_count].to_vec(), true_count: self.true_count }
    }
}

/// Cosine scores `b` (`N×K'`). Columns `[genuine, K')` were filled with
/// random values and carry no gradient.
#[derive(Clone, Copy, Debug)]
pub struct CosineScores {
    pub b: Var,
    /// Number of columns backed by real inventory profiles.
    pub genuine: usize,
    pub total: usize,
}

impl CosineScores {
    /// `N×K'` mask, true on filled entries.
    pub fn fill_mask(&self, rows: usize) -> Vec<Vec<bool>> {
        (0..rows).map(|_| (0..self.total).map(|k| k >= self.genuine).collect()).collect()
    }
}

/// Softmax of cosine scores, `N×K'`.
#[derive(Clone, Copy, Debug)]
pub struct SpeakerAttention {
    pub beta: Var,
}

struct CosineBackward<T> {
    profiles: Tensor<T>,
}

impl<T: Scalar> CustomBackward<T> for CosineBackward<T> {
    fn backward(&self, out_grad: &Tensor<T>, inputs: &[&Tensor<T>], output: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        // b = q·d / max(|q||d|, ε)
        // ∂b/∂q = d/den − (q·d)|d| q / (|q| den²) while the floor is inactive
        let q = inputs[0];
        let d = &self.profiles;
        let eps = T::lit(COSINE_EPS);
        let mut dq = Tensor::zeros(q.rows(), q.cols());
        for n in 0..q.rows() {
            let qr = q.row(n);
            let qn = qr.iter().map(|&v| v * v).sum::<T>().sqrt();
            for k in 0..d.rows() {
                let gv = out_grad.get(n, k);
                if gv == T::zero() {
                    continue;
                }
                let dr = d.row(k);
                let dn = dr.iter().map(|&v| v * v).sum::<T>().sqrt();
                let den = (qn * dn).max(eps);
                let dot = output.get(n, k) * den;
                let row = dq.row_mut(n);
                for j in 0..qr.len() {
                    let mut v = dr[j] / den;
                    if qn * dn >= eps {
                        v -= dot * dn * qr[j] / (qn * den * den);
                    }
                    row[j] += gv * v;
                }
            }
        }
        vec![Some(dq)]
    }
}

/// Value-level cosine matrix `N×K`.
pub fn cosine_matrix<T: Scalar>(q: &Tensor<T>, profiles: &Tensor<T>) -> Tensor<T> {
    let eps = T::lit(COSINE_EPS);
    let mut out = Tensor::zeros(q.rows(), profiles.rows());
    for n in 0..q.rows() {
        let qr = q.row(n);
        let qn = qr.iter().map(|&v| v * v).sum::<T>().sqrt();
        for k in 0..profiles.rows() {
            let dr = profiles.row(k);
            let dn = dr.iter().map(|&v| v * v).sum::<T>().sqrt();
            let dot: T = qr.iter().zip(dr).map(|(&a, &b)| a * b).sum();
            out.set(n, k, dot / (qn * dn).max(eps));
        }
    }
    out
}

/// Cosine similarity between every query row and every inventory profile.
pub fn cosine_scores<T: Scalar>(g: &mut Graph<'_, T>, q: Var, inv: &SpeakerInventory<T>) -> Result<CosineScores> {
    let profiles = inv.matrix();
    if g.shape(q).1 != profiles.cols() {
        return Err(Error::Shape(format!(
            "speaker queries have dim {} but profiles have dim {}",
            g.shape(q).1,
            profiles.cols()
        )));
    }
    let value = cosine_matrix(g.value(q), &profiles);
    let b = g.custom(&[q], value, Box::new(CosineBackward { profiles }));
    Ok(CosineScores { b, genuine: inv.len(), total: inv.len() })
}

/// Pads every row to `k_max` columns with i.i.d. `uniform[-0.5, 0.5]` scores
/// drawn from a generator seeded with `seed`.
pub fn fill_speakers<T: Scalar>(g: &mut Graph<'_, T>, scores: CosineScores, k_max: usize, seed: u64) -> Result<CosineScores> {
    if k_max < scores.total {
        return Err(Error::Contract(format!("k_max {k_max} is below the inventory size {}", scores.total)));
    }
    if k_max == scores.total {
        return Ok(scores);
    }
    let rows = g.shape(scores.b).0;
    let extra = k_max - scores.total;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fill = Tensor::matrix(
        rows,
        extra,
        (0..rows * extra).map(|_| T::lit(rng.random_range(-FILL_RANGE..=FILL_RANGE))).collect(),
    );
    let b = g.pad_cols(scores.b, &fill)?;
    Ok(CosineScores { b, genuine: scores.genuine, total: k_max })
}

/// Row softmax over the scores. With `restrict = Some(k)` only the first `k`
/// columns take part (used at inference to drop interfering and filled slots).
pub fn attention_weights<T: Scalar>(g: &mut Graph<'_, T>, scores: CosineScores, restrict: Option<usize>) -> Result<SpeakerAttention> {
    let b = match restrict {
        Some(k) if k < scores.total => g.slice_cols(scores.b, 0, k)?,
        _ => scores.b,
    };
    Ok(SpeakerAttention { beta: g.softmax(b)? })
}

/// `d̄_n = Σ_k β_{n,k} d_k`. Filled columns correspond to zero profiles.
pub fn weighted_profile<T: Scalar>(g: &mut Graph<'_, T>, att: SpeakerAttention, inv: &SpeakerInventory<T>) -> Result<Var> {
    let cols = g.shape(att.beta).1;
    let mut d = Tensor::zeros(cols, inv.dim());
    for (k, p) in inv.profiles().iter().enumerate().take(cols) {
        d.row_mut(k).copy_from_slice(&p.vector);
    }
    let d = g.constant(d);
    g.matmul(att.beta, d)
}

/// Appends `m` distinct profiles from `pool` that are not already in `inv`.
pub fn add_interfering<T: Scalar>(
    inv: &SpeakerInventory<T>,
    pool: &[SpeakerProfile<T>],
    m: usize,
    seed: u64,
) -> Result<SpeakerInventory<T>> {
    if m == 0 {
        return Ok(inv.clone());
    }
    let taken: HashSet<&str> = inv.profiles.iter().map(|p| p.id.as_str()).collect();
    let mut seen = HashSet::new();
    let candidates: Vec<&SpeakerProfile<T>> = pool
        .iter()
        .filter(|p| !taken.contains(p.id.as_str()) && seen.insert(p.id.as_str()))
        .collect();
    if candidates.len() < m {
        return Err(Error::PoolExhausted { needed: m, available: candidates.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut profiles = inv.profiles.clone();
    profiles.extend(sample(&mut rng, candidates.len(), m).into_iter().map(|i| candidates[i].clone()));
    SpeakerInventory::with_true_count(profiles, inv.true_count)
}

/// Per-row argmax; ties go to the lowest index.
pub fn assign_indices<T: Scalar>(beta: &Tensor<T>) -> Vec<usize> {
    (0..beta.rows())
        .map(|r| {
            let row = beta.row(r);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Speaker id of each token.
pub fn assign_speakers<T: Scalar>(beta: &Tensor<T>, inv: &SpeakerInventory<T>) -> Vec<String> {
    assign_indices(beta).into_iter().map(|k| inv.profiles[k].id.clone()).collect()
}

/// Two-layer speaker decoder plus the query projection `W_spk`.
#[derive(Clone, Debug)]
pub struct SpeakerDecoder {
    pub ln1_q: LayerNorm,
    pub mha1: MultiHeadAttention,
    pub ln1_ff: LayerNorm,
    pub ff1: FeedForward,
    pub ln2_q: LayerNorm,
    pub mha2: MultiHeadAttention,
    pub ln2_ff: LayerNorm,
    pub ff2: FeedForward,
    /// `d×d_spk`.
    pub w_spk: ParamId,
}

impl SpeakerDecoder {
    pub fn new<T: Scalar, R: Rng>(
        ps: &mut ParamStore<T>,
        name: &str,
        cfg: AttentionConfig,
        d_spk: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.model_dim;
        Ok(Self {
            ln1_q: LayerNorm::new(ps, &format!("{name}.layer1.ln_q"), d)?,
            mha1: MultiHeadAttention::new(ps, &format!("{name}.layer1.mha"), cfg, rng)?,
            ln1_ff: LayerNorm::new(ps, &format!("{name}.layer1.ln_ff"), d)?,
            ff1: FeedForward::new(ps, &format!("{name}.layer1.ff"), cfg, rng)?,
            ln2_q: LayerNorm::new(ps, &format!("{name}.layer2.ln_q"), d)?,
            mha2: MultiHeadAttention::new(ps, &format!("{name}.layer2.mha"), cfg, rng)?,
            ln2_ff: LayerNorm::new(ps, &format!("{name}.layer2.ln_ff"), d)?,
            ff2: FeedForward::new(ps, &format!("{name}.layer2.ff"), cfg, rng)?,
            w_spk: ps.register_uniform(format!("{name}.w_spk"), d, d_spk, rng)?,
        })
    }

    /// First layer: query `E_a`, key `H^asr`, value `H^spk`, then feed-forward,
    /// each with a residual connection.
    pub fn layer1<T: Scalar>(&self, g: &mut Graph<'_, T>, e_a: Var, h_asr: Var, h_spk: Var) -> Result<Var> {
        if g.shape(h_asr).0 != g.shape(h_spk).0 {
            return Err(Error::Contract(format!(
                "H^asr has {} frames but H^spk has {}",
                g.shape(h_asr).0,
                g.shape(h_spk).0
            )));
        }
        let q = self.ln1_q.forward(g, e_a)?;
        let a = self.mha1.forward(g, q, h_asr, h_spk, None)?;
        let x = g.add(e_a, a)?;
        let n = self.ln1_ff.forward(g, x)?;
        let f = self.ff1.forward(g, n)?;
        g.add(x, f)
    }

    /// Second layer: `H^spk` is both key and value.
    pub fn layer2<T: Scalar>(&self, g: &mut Graph<'_, T>, e_as: Var, h_spk: Var) -> Result<Var> {
        let q = self.ln2_q.forward(g, e_as)?;
        let a = self.mha2.forward(g, q, h_spk, h_spk, None)?;
        let x = g.add(e_as, a)?;
        let n = self.ln2_ff.forward(g, x)?;
        let f = self.ff2.forward(g, n)?;
        g.add(x, f)
    }

    /// Speaker queries `q_n = W_spk · E_spk`, `N×d_spk`.
    pub fn project_query<T: Scalar>(&self, g: &mut Graph<'_, T>, e_spk: Var) -> Result<Var> {
        let w = g.param(self.w_spk);
        g.matmul(e_spk, w)
    }

    /// Both layers and the projection.
    pub fn queries<T: Scalar>(&self, g: &mut Graph<'_, T>, e_a: Var, h_asr: Var, h_spk: Var) -> Result<Var> {
        let e_as = self.layer1(g, e_a, h_asr, h_spk)?;
        let e_spk = self.layer2(g, e_as, h_spk)?;
        self.project_query(g, e_spk)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use rand::Rng;

    fn orthonormal(k: usize, dim: usize) -> SpeakerInventory<f64> {
        let profiles = (0..k)
            .map(|i| {
                let mut v = vec![0.0; dim];
                v[i] = 1.0;
                SpeakerProfile::new(format!("s{i}"), v).unwrap()
            })
            .collect();
        SpeakerInventory::new(profiles).unwrap()
    }

    fn random_inv(rng: &mut ChaCha8Rng, k: usize, dim: usize, prefix: &str) -> Vec<SpeakerProfile<f64>> {
        (0..k)
            .map(|i| {
                let v = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                SpeakerProfile::new(format!("{prefix}{i}"), v).unwrap()
            })
            .collect()
    }

    #[test]
    fn profiles_are_normalized_and_validated() {
        let p = SpeakerProfile::<f64>::new("a", vec![3.0, 4.0]).unwrap();
        assert!((p.vector[0] - 0.6).abs() < 1e-15 && (p.vector[1] - 0.8).abs() < 1e-15);
        assert!(SpeakerProfile::<f64>::new("z", vec![0.0, 0.0]).is_err());
        let a = SpeakerProfile::new("a", vec![1.0, 0.0]).unwrap();
        assert!(SpeakerInventory::new(vec![a.clone(), a.clone()]).is_err());
        assert!(SpeakerInventory::<f64>::new(vec![]).is_err());
        assert!(SpeakerInventory::with_true_count(vec![a], 2).is_err());
    }

    #[test]
    fn cosine_of_planted_queries() {
        let inv = orthonormal(3, 4);
        let mut g = Graph::<f64>::new();
        let q = g.input(Tensor::from_rows(&[vec![2.0, 0.0, 0.0, 0.0], vec![-1.0, 0.0, 0.0, 0.0]]));
        let s = cosine_scores(&mut g, q, &inv).unwrap();
        let b = g.value(s.b);
        assert!((b.get(0, 0) - 1.0).abs() < 1e-8 && b.get(0, 1) == 0.0 && b.get(0, 2) == 0.0);
        assert!((b.get(1, 0) + 1.0).abs() < 1e-8);
    }

    #[test]
    fn cosine_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inv = SpeakerInventory::new(random_inv(&mut rng, 3, 5, "s")).unwrap();
        let qv: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut g = Graph::<f64>::new();
        let q = g.input(Tensor::matrix(2, 5, qv.clone()));
        let s = cosine_scores(&mut g, q, &inv).unwrap();
        for n in 0..2 {
            for (k, p) in inv.profiles().iter().enumerate() {
                let qr = &qv[n * 5..n * 5 + 5];
                let dot: f64 = qr.iter().zip(&p.vector).map(|(a, b)| a * b).sum();
                let nq = qr.iter().map(|a| a * a).sum::<f64>().sqrt();
                let nd = p.vector.iter().map(|a| a * a).sum::<f64>().sqrt();
                assert!((g.value(s.b).get(n, k) - dot / (nq * nd)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_query_is_guarded() {
        let inv = orthonormal(2, 2);
        let mut g = Graph::<f64>::new();
        let q = g.input(Tensor::zeros(1, 2));
        let s = cosine_scores(&mut g, q, &inv).unwrap();
        assert_eq!(g.value(s.b).data(), &[0.0, 0.0]);
    }

    #[test]
    fn softmax_of_three_scores() {
        // exp(0.9), exp(0.1), exp(-0.2) to 20 significant digits
        let e = [2.4596031111569496638_f64, 1.1051709180756476248, 0.81873075307798185867];
        let z: f64 = e.iter().sum();
        let mut g = Graph::<f64>::new();
        let b = g.input(Tensor::matrix(1, 3, vec![0.9, 0.1, -0.2]));
        let att = attention_weights(&mut g, CosineScores { b, genuine: 3, total: 3 }, None).unwrap();
        for k in 0..3 {
            assert!((g.value(att.beta).get(0, k) - e[k] / z).abs() < 1e-15);
        }
    }

    #[test]
    fn uniform_and_single_speaker_attention() {
        let mut g = Graph::<f64>::new();
        let b = g.input(Tensor::full(2, 4, 0.3));
        let att = attention_weights(&mut g, CosineScores { b, genuine: 4, total: 4 }, None).unwrap();
        assert!(g.value(att.beta).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let b = g.input(Tensor::matrix(2, 1, vec![-0.7, 0.9]));
        let att = attention_weights(&mut g, CosineScores { b, genuine: 1, total: 1 }, None).unwrap();
        assert_eq!(g.value(att.beta).data(), &[1.0, 1.0]);
    }

    #[test]
    fn restricted_attention_drops_tail_columns() {
        let mut g = Graph::<f64>::new();
        let b = g.input(Tensor::matrix(1, 4, vec![0.1, 0.2, 0.9, 0.9]));
        let att = attention_weights(&mut g, CosineScores { b, genuine: 4, total: 4 }, Some(2)).unwrap();
        assert_eq!(g.shape(att.beta), (1, 2));
        assert_eq!(assign_indices(g.value(att.beta)), vec![1]);
    }

    #[test]
    fn weighted_profile_cases() {
        let inv = SpeakerInventory::new(vec![
            SpeakerProfile::new("a", vec![1.0, 0.0]).unwrap(),
            SpeakerProfile::new("b", vec![-1.0, 0.0]).unwrap(),
        ])
        .unwrap();
        let mut g = Graph::<f64>::new();
        let beta = g.input(Tensor::from_rows(&[vec![0.0, 1.0], vec![0.5, 0.5]]));
        let d = weighted_profile(&mut g, SpeakerAttention { beta }, &inv).unwrap();
        assert_eq!(g.value(d).data(), &[-1.0, 0.0, 0.0, 0.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let inv = SpeakerInventory::new(random_inv(&mut rng, 3, 4, "r")).unwrap();
        let raw: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
        let z: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|v| v / z).collect();
        let beta = g.input(Tensor::matrix(1, 3, w.clone()));
        let d = weighted_profile(&mut g, SpeakerAttention { beta }, &inv).unwrap();
        for j in 0..4 {
            let oracle: f64 = (0..3).map(|k| w[k] * inv.profiles()[k].vector[j]).sum();
            assert!((g.value(d).get(0, j) - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn fill_range_mask_and_determinism() {
        let inv = orthonormal(2, 3);
        let run = |seed| {
            let mut g = Graph::<f64>::new();
            let q = g.input(Tensor::matrix(3, 3, vec![0.3, -0.2, 0.5, 1.0, 0.0, 0.0, -0.4, 0.4, 0.1]));
            let s = cosine_scores(&mut g, q, &inv).unwrap();
            let before = g.value(s.b).clone();
            let f = fill_speakers(&mut g, s, 4, seed).unwrap();
            (before, g.value(f.b).clone(), f)
        };
        let (before, after, f) = run(11);
        assert_eq!(after.shape(), &[3, 4]);
        let mask = f.fill_mask(3);
        for n in 0..3 {
            for k in 0..4 {
                assert_eq!(mask[n][k], k >= 2);
                let v = after.get(n, k);
                if k < 2 {
                    assert_eq!(v, before.get(n, k));
                } else {
                    assert!((-0.5..=0.5).contains(&v));
                }
            }
        }
        assert_eq!(run(11).1, after);
        assert_ne!(run(12).1, after);

        let mut g = Graph::<f64>::new();
        let b = g.input(Tensor::zeros(1, 3));
        let s = CosineScores { b, genuine: 3, total: 3 };
        assert_eq!(fill_speakers(&mut g, s, 3, 0).unwrap().b, b);
        assert!(matches!(fill_speakers(&mut g, s, 2, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn filled_columns_have_no_gradient_path() {
        let inv = orthonormal(2, 2);
        let mut g = Graph::<f64>::new();
        let q = g.input(Tensor::matrix(1, 2, vec![0.6, 0.2]));
        let s = cosine_scores(&mut g, q, &inv).unwrap();
        let f = fill_speakers(&mut g, s, 5, 1).unwrap();
        let att = attention_weights(&mut g, f, None).unwrap();
        let d = weighted_profile(&mut g, att, &inv).unwrap();
        assert_eq!(g.shape(d), (1, 2));
        let l = g.sum(d);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(q).is_some());
    }

    #[test]
    fn interfering_cardinality_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pool = random_inv(&mut rng, 8, 4, "p");
        let inv = SpeakerInventory::new(pool[..3].to_vec()).unwrap();
        assert_eq!(add_interfering(&inv, &pool, 0, 1).unwrap(), inv);
        let aug = add_interfering(&inv, &pool, 2, 1).unwrap();
        assert_eq!(aug.len(), 5);
        assert_eq!(aug.true_count(), 3);
        assert_eq!(&aug.profiles()[..3], inv.profiles());
        assert!(matches!(
            add_interfering(&inv, &pool, 6, 1),
            Err(Error::PoolExhausted { needed: 6, available: 5 })
        ));
    }

    #[test]
    fn tie_break_and_planted_assignment() {
        let inv = orthonormal(3, 3);
        let beta = Tensor::from_rows(&[vec![0.0, 1.0, 0.0], vec![1.0 / 3.0; 3], vec![0.0, 0.0, 1.0]]);
        assert_eq!(assign_speakers(&beta, &inv), vec!["s1", "s0", "s2"]);
    }

    fn decoder_fixture(seed: u64) -> (ParamStore<f64>, SpeakerDecoder) {
        let cfg = AttentionConfig { model_dim: 8, num_heads: 2, ff_dim: 12 };
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dec = SpeakerDecoder::new(&mut ps, "spk_dec", cfg, 4, &mut rng).unwrap();
        (ps, dec)
    }

    #[test]
    fn decoder_shapes_for_various_token_counts() {
        let (ps, dec) = decoder_fixture(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for n in [0usize, 1, 5] {
            let mut g = Graph::with_params(&ps);
            let mut rnd = |r: usize, c: usize| Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect());
            let e_a = g.input(rnd(n, 8));
            let h_asr = g.input(rnd(6, 8));
            let h_spk = g.input(rnd(6, 8));
            let q = dec.queries(&mut g, e_a, h_asr, h_spk).unwrap();
            assert_eq!(g.shape(q), (n, 4));
        }
        let mut g = Graph::with_params(&ps);
        let e_a = g.input(Tensor::zeros(2, 8));
        let h_asr = g.input(Tensor::zeros(6, 8));
        let h_spk = g.input(Tensor::zeros(5, 8));
        assert!(matches!(dec.layer1(&mut g, e_a, h_asr, h_spk), Err(Error::Contract(_))));
    }

    #[test]
    fn single_frame_collapses_attention() {
        let (ps, dec) = decoder_fixture(5);
        let h_asr = Tensor::matrix(1, 8, (0..8).map(|i| i as f64 * 0.1 - 0.3).collect());
        let h_spk = Tensor::matrix(1, 8, (0..8).map(|i| 0.5 - i as f64 * 0.07).collect());
        // with one key, the attention output is the same for every query, so
        // two identical queries must give identical rows regardless of batch
        let mut outs = Vec::new();
        for e in [vec![0.2; 8], vec![-0.9; 8]] {
            let mut g = Graph::with_params(&ps);
            let e_a = g.input(Tensor::matrix(1, 8, e.clone()));
            let ha = g.input(h_asr.clone());
            let hs = g.input(h_spk.clone());
            let ln = dec.ln1_q.forward(&mut g, e_a).unwrap();
            let att = dec.mha1.forward(&mut g, ln, ha, hs, None).unwrap();
            outs.push(g.value(att).clone());
        }
        assert!(outs[0].max_abs_diff(&outs[1]) < 1e-12);
    }

    #[test]
    fn project_query_identity_and_zero() {
        let cfg = AttentionConfig { model_dim: 4, num_heads: 2, ff_dim: 4 };
        let mut ps = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dec = SpeakerDecoder::new(&mut ps, "d", cfg, 4, &mut rng).unwrap();
        *ps.get_mut(dec.w_spk) = Tensor::identity(4);
        let e = Tensor::matrix(2, 4, vec![0.1, 0.2, 0.3, 0.4, -1.0, 0.0, 1.0, 2.0]);
        let mut g = Graph::with_params(&ps);
        let x = g.input(e.clone());
        let q = dec.project_query(&mut g, x).unwrap();
        assert_eq!(g.value(q), &e);
        *ps.get_mut(dec.w_spk) = Tensor::zeros(4, 4);
        let mut g = Graph::with_params(&ps);
        let x = g.input(e);
        let q = dec.project_query(&mut g, x).unwrap();
        assert!(g.value(q).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn speaker_path_gradients() {
        let (mut ps, dec) = decoder_fixture(7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut rnd = |r: usize, c: usize| Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect());
        let e_a = ps.register("e_a", rnd(3, 8)).unwrap();
        let h_asr = ps.register("h_asr", rnd(4, 8)).unwrap();
        let h_spk = ps.register("h_spk", rnd(4, 8)).unwrap();
        let mut prng = ChaCha8Rng::seed_from_u64(9);
        let inv = SpeakerInventory::new(random_inv(&mut prng, 3, 4, "s")).unwrap();
        let report = grad_check(
            &ps,
            |g| {
                let (a, ha, hs) = (g.param(e_a), g.param(h_asr), g.param(h_spk));
                let q = dec.queries(g, a, ha, hs)?;
                let s = cosine_scores(g, q, &inv)?;
                let s = fill_speakers(g, s, 5, 3)?;
                let att = attention_weights(g, s, None)?;
                let d = weighted_profile(g, att, &inv)?;
                let sq = g.mul(d, d)?;
                let lp = g.log_softmax(s.b)?;
                let picked = g.pick(lp, &[0, 2, 1])?;
                let a = g.sum(sq);
                let b = g.sum(picked);
                g.sub(a, b)
            },
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.worst());
    }
}
