//! Wall-clock comparison of parallel and token-by-token decoding.

use sapf_core::metrics::{rtf_measure, RtfReport};
use sapf_core::model::{ArBaseline, SaParaformer};
use sapf_core::speaker::SpeakerInventory;
use sapf_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::synth::{generate_session, Span, SynthSpec, World};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchOptions {
    /// Timed decodes per length (after one untimed warm-up).
    pub reps: usize,
    pub frames_per_token: usize,
    pub frame_shift_ms: f64,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self { reps: 5, frames_per_token: 4, frame_shift_ms: 10.0, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub length: usize,
    pub nar: RtfReport,
    pub ar: RtfReport,
    /// AR time over NAR time.
    pub ratio: f64,
    pub nar_mean_tokens: f64,
    pub ar_mean_steps: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn table(&self) -> String {
        let mut s = String::from("length  nar_rtf     ar_rtf      ar/nar  nar_tokens  ar_steps\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{:6}  {:<10.4e}  {:<10.4e}  {:6.2}  {:10.1}  {:8.1}\n",
                r.length, r.nar.rtf, r.ar.rtf, r.ratio, r.nar_mean_tokens, r.ar_mean_steps
            ));
        }
        s
    }

    pub fn ratios(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.ratio).collect()
    }
}

struct Item {
    x: Tensor,
    inv: SpeakerInventory<f64>,
    length: usize,
}

/// Single-speaker utterances of exactly `length` tokens drawn from the
/// synthetic generator.
fn inputs(cfg: &sapf_core::model::ModelConfig, length: usize, opts: &BenchOptions) -> Result<Vec<Item>> {
    let spec = SynthSpec {
        num_sessions: opts.reps,
        speakers_per_session: Span::new(1, 1),
        vocab_size: cfg.vocab_size,
        tokens_per_utterance: Span::new(length, length),
        frames_per_token: Span::new(opts.frames_per_token, opts.frames_per_token),
        overlap_ratio_target: 0.0,
        feature_dim: cfg.input_dim,
        d_spk: cfg.d_spk,
        seed: opts.seed,
        ..SynthSpec::default()
    };
    let world = World::new(&spec)?;
    (0..opts.reps)
        .map(|i| {
            let s = generate_session(&world, &spec, "bench", opts.seed ^ ((length as u64) << 16) ^ i as u64)?;
            let profiles = s.inventory.iter().map(|p| p.to_profile()).collect::<sapf_core::Result<Vec<_>>>()?;
            Ok(Item { x: s.features, inv: SpeakerInventory::new(profiles)?, length })
        })
        .collect()
}

/// Makes an untrained predictor emit one token per `frames_per_token`
/// frames so output lengths track the benchmark lengths.
pub fn calibrate_predictor(model: &mut SaParaformer<f64>, frames_per_token: usize) {
    let proj = model.network().predictor.proj.clone();
    let ps = model.params_mut();
    ps.get_mut(proj.weight).data_mut().iter_mut().for_each(|w| *w = 0.0);
    if let Some(b) = proj.bias {
        // sigmoid(b) = 1/frames_per_token, nudged up so rounding never drops the last token
        let p = (1.0 + 1e-6) / frames_per_token as f64;
        ps.get_mut(b).data_mut()[0] = (p / (1.0 - p)).ln();
    }
}

/// Times NAR and greedy AR decoding on the same inputs for each length.
/// AR decoding is held to the target length (end-of-sequence suppressed).
pub fn bench_rtf(
    nar: &SaParaformer<f64>,
    ar: &ArBaseline<f64>,
    lengths: &[usize],
    opts: &BenchOptions,
) -> Result<BenchReport> {
    if !nar.config().same_dims(ar.config()) {
        return Err(HarnessError::Config("NAR and AR models differ in size; refusing to compare".into()));
    }
    if opts.reps == 0 || lengths.contains(&0) {
        return Err(HarnessError::Config("bench needs at least one repetition and positive lengths".into()));
    }
    let mut rows = Vec::new();
    for &length in lengths {
        let items = inputs(nar.config(), length, opts)?;
        let frames = |it: &Item| it.x.rows();
        let label = |it: &Item| it.length;
        let mut nar_tokens = 0;
        let nar_r = rtf_measure(&items, frames, label, opts.frame_shift_ms, |it| {
            nar.nar_infer(&it.x, &it.inv).map(|h| nar_tokens += h.tokens.len())
        })?;
        let mut ar_steps = 0;
        let ar_r = rtf_measure(&items, frames, label, opts.frame_shift_ms, |it| {
            ar.infer(&it.x, &it.inv, it.length, true).map(|o| ar_steps += o.steps)
        })?;
        // the warm-up call is counted in the tallies above
        let calls = (items.len() + 1) as f64;
        rows.push(BenchRow {
            length,
            ratio: ar_r.total_inference_seconds / nar_r.total_inference_seconds,
            nar: nar_r,
            ar: ar_r,
            nar_mean_tokens: nar_tokens as f64 / calls,
            ar_mean_steps: ar_steps as f64 / calls,
        });
    }
    Ok(BenchReport { rows })
}
