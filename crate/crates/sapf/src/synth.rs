//! Synthetic overlapped multi-speaker sessions.
//!
//! A [`World`] fixes everything shared across sessions: a token embedding
//! per vocabulary entry, a pool of unit speaker profiles, the projection that
//! carries profiles into feature space, and a sparse bigram model over
//! tokens. Each session places one utterance per speaker on a frame grid and
//! renders frames as the sum of the active token and speaker vectors plus
//! Gaussian noise.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use sapf_core::tsot::TimedToken;
use sapf_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

/// Inclusive integer range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub min: usize,
    pub max: usize,
}

impl Span {
    pub const fn new(min: usize, max: usize) -> Self {
        Self { min, max }
    }

    fn draw(&self, rng: &mut impl Rng) -> usize {
        rng.random_range(self.min..=self.max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_sessions: usize,
    pub speakers_per_session: Span,
    /// Includes the reserved channel-change id, which is never emitted.
    pub vocab_size: usize,
    pub tokens_per_utterance: Span,
    pub frames_per_token: Span,
    pub overlap_ratio_target: f64,
    /// Accepted deviation of a session's overlap ratio from the target.
    pub overlap_tolerance: f64,
    pub feature_dim: usize,
    pub d_spk: usize,
    pub pool_size: usize,
    /// Successors per token in the bigram model.
    pub branching: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_sessions: 16,
            speakers_per_session: Span::new(2, 3),
            vocab_size: 40,
            tokens_per_utterance: Span::new(4, 6),
            frames_per_token: Span::new(3, 5),
            overlap_ratio_target: 0.42,
            overlap_tolerance: 0.05,
            feature_dim: 48,
            d_spk: 16,
            pool_size: 12,
            branching: 3,
            noise_std: 0.1,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Spec(m));
        for (name, s) in [
            ("speakers_per_session", self.speakers_per_session),
            ("tokens_per_utterance", self.tokens_per_utterance),
            ("frames_per_token", self.frames_per_token),
        ] {
            if s.min == 0 || s.min > s.max {
                return bad(format!("{name} must be a nonempty range of positive values, got {}..={}", s.min, s.max));
            }
        }
        if self.vocab_size < 3 {
            return bad(format!("vocab_size {} leaves fewer than two emittable tokens", self.vocab_size));
        }
        if self.branching == 0 || self.branching > self.vocab_size - 2 {
            return bad(format!("branching {} must lie in 1..={}", self.branching, self.vocab_size - 2));
        }
        if !(0.0..=1.0).contains(&self.overlap_ratio_target) || !(self.overlap_tolerance > 0.0) {
            return bad("overlap target must lie in [0, 1] with a positive tolerance".into());
        }
        if self.speakers_per_session.max == 1 && self.overlap_ratio_target > self.overlap_tolerance {
            return bad("a single speaker cannot overlap".into());
        }
        if self.pool_size < self.speakers_per_session.max {
            return bad(format!(
                "pool of {} speakers cannot fill sessions of {}",
                self.pool_size, self.speakers_per_session.max
            ));
        }
        if self.feature_dim == 0 || self.d_spk == 0 || !(self.noise_std >= 0.0) {
            return bad("feature_dim and d_spk must be positive and noise_std nonnegative".into());
        }
        Ok(())
    }

    /// Highest emittable token id plus one; the last id is the separator.
    pub fn content_vocab(&self) -> usize {
        self.vocab_size - 1
    }
}

/// A named speaker vector as stored on disk (not re-normalised on read).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileRecord {
    pub id: String,
    pub vector: Vec<f64>,
}

impl ProfileRecord {
    pub fn to_profile(&self) -> sapf_core::Result<sapf_core::speaker::SpeakerProfile<f64>> {
        sapf_core::speaker::SpeakerProfile::new(self.id.clone(), self.vector.clone())
    }
}

/// Shared generative state.
#[derive(Clone, Debug)]
pub struct World {
    pub token_embed: Tensor,
    /// `d_spk × F`.
    pub projection: Tensor,
    pub pool: Vec<ProfileRecord>,
    pub successors: Vec<Vec<usize>>,
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect())
}

impl World {
    pub fn new(spec: &SynthSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5EED_0F_0000);
        let v = spec.content_vocab();
        let token_embed = normal_matrix(&mut rng, v, spec.feature_dim, 1.0);
        let projection = normal_matrix(&mut rng, spec.d_spk, spec.feature_dim, 1.0);
        let pool = (0..spec.pool_size)
            .map(|k| {
                let raw: Vec<f64> = (0..spec.d_spk).map(|_| rng.sample(StandardNormal)).collect();
                let n = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
                ProfileRecord { id: format!("spk{k:02}"), vector: raw.into_iter().map(|x| x / n).collect() }
            })
            .collect();
        let successors = (0..v)
            .map(|t| {
                let others: Vec<usize> = (0..v).filter(|&u| u != t).collect();
                let mut s: Vec<usize> =
                    sample(&mut rng, others.len(), spec.branching).into_iter().map(|i| others[i]).collect();
                s.sort_unstable();
                s
            })
            .collect();
        Ok(Self { token_embed, projection, pool, successors })
    }

    /// Feature-space image of a profile.
    pub fn speaker_vector(&self, p: &ProfileRecord) -> Vec<f64> {
        let f = self.projection.cols();
        (0..f).map(|j| p.vector.iter().enumerate().map(|(i, &x)| x * self.projection.get(i, j)).sum()).collect()
    }

    fn utterance(&self, len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = vec![rng.random_range(0..self.successors.len())];
        while out.len() < len {
            let next = &self.successors[*out.last().unwrap()];
            out.push(next[rng.random_range(0..next.len())]);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Session {
    pub id: String,
    /// `T × F`.
    pub features: Tensor,
    pub tokens: Vec<TimedToken>,
    /// Genuine speakers in order of first appearance.
    pub inventory: Vec<ProfileRecord>,
}

impl Session {
    pub fn frames(&self) -> usize {
        self.features.rows()
    }

    pub fn overlap_ratio(&self) -> f64 {
        overlap_ratio(&self.tokens, self.frames())
    }
}

/// Fraction of speech frames (any speaker active) where two or more
/// speakers are active. Token spans are inclusive.
pub fn overlap_ratio(tokens: &[TimedToken], frames: usize) -> f64 {
    let mut active: Vec<Vec<&str>> = vec![Vec::new(); frames];
    for t in tokens {
        for a in active.iter_mut().take(t.end_frame + 1).skip(t.start_frame) {
            if !a.contains(&t.speaker.as_str()) {
                a.push(&t.speaker);
            }
        }
    }
    let speech = active.iter().filter(|a| !a.is_empty()).count();
    if speech == 0 {
        return 0.0;
    }
    active.iter().filter(|a| a.len() > 1).count() as f64 / speech as f64
}

const MAX_PLACEMENT_TRIES: usize = 2000;
const EDGE_SILENCE: usize = 2;

/// One session; `seed` makes it reproducible independently of others.
pub fn generate_session(world: &World, spec: &SynthSpec, id: &str, seed: u64) -> Result<Session> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = spec.speakers_per_session.draw(&mut rng);
    let chosen: Vec<ProfileRecord> =
        sample(&mut rng, world.pool.len(), k).into_iter().map(|i| world.pool[i].clone()).collect();
    // per speaker: tokens with durations, laid out back to back
    let utts: Vec<Vec<(usize, usize)>> = chosen
        .iter()
        .map(|_| {
            let n = spec.tokens_per_utterance.draw(&mut rng);
            world.utterance(n, &mut rng).into_iter().map(|t| (t, spec.frames_per_token.draw(&mut rng))).collect()
        })
        .collect();
    let lens: Vec<usize> = utts.iter().map(|u| u.iter().map(|x| x.1).sum()).collect();
    let lead = rng.random_range(0..=EDGE_SILENCE);
    let mut placed = None;
    for _ in 0..MAX_PLACEMENT_TRIES {
        // each speaker starts somewhere within the previous one's utterance
        let mut starts = vec![lead];
        for i in 1..k {
            let prev = starts[i - 1];
            starts.push(rng.random_range(prev + 1..=prev + lens[i - 1]));
        }
        let toks = layout(&utts, &starts, &chosen);
        let end = toks.iter().map(|t| t.end_frame).max().unwrap_or(0) + 1;
        if (overlap_ratio(&toks, end) - spec.overlap_ratio_target).abs() <= spec.overlap_tolerance {
            placed = Some((toks, end));
            break;
        }
    }
    let (tokens, speech_end) = placed.ok_or_else(|| {
        HarnessError::Spec(format!(
            "no placement of {k} utterances reached overlap {} ± {} after {MAX_PLACEMENT_TRIES} tries",
            spec.overlap_ratio_target, spec.overlap_tolerance
        ))
    })?;
    let frames = speech_end + rng.random_range(0..=EDGE_SILENCE);
    let f = spec.feature_dim;
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| HarnessError::Spec(e.to_string()))?;
    let mut x = Tensor::matrix(frames, f, (0..frames * f).map(|_| noise.sample(&mut rng)).collect());
    let spk_vecs: Vec<Vec<f64>> = chosen.iter().map(|p| world.speaker_vector(p)).collect();
    for t in &tokens {
        let s = chosen.iter().position(|p| p.id == t.speaker).expect("speaker drawn above");
        for r in t.start_frame..=t.end_frame {
            let row = x.row_mut(r);
            for j in 0..f {
                row[j] += world.token_embed.get(t.token, j) + spk_vecs[s][j];
            }
        }
    }
    Ok(Session { id: id.to_string(), features: x, tokens, inventory: chosen })
}

fn layout(utts: &[Vec<(usize, usize)>], starts: &[usize], who: &[ProfileRecord]) -> Vec<TimedToken> {
    let mut out = Vec::new();
    for ((u, &s), p) in utts.iter().zip(starts).zip(who) {
        let mut t = s;
        for &(tok, dur) in u {
            out.push(TimedToken::new(tok, p.id.clone(), t, t + dur - 1));
            t += dur;
        }
    }
    out
}

/// `spec.num_sessions` sessions named `{prefix}0000`, `{prefix}0001`, ...
pub fn generate_sessions(world: &World, spec: &SynthSpec, prefix: &str, seed: u64) -> Result<Vec<Session>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..spec.num_sessions)
        .map(|i| generate_session(world, spec, &format!("{prefix}{i:04}"), rng.random()))
        .collect()
}
