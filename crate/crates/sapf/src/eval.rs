//! Decoding a dataset and scoring it per speaker.

use sapf_core::metrics::{edit_align, sd_cer, EditCounts, SdCerReport};
use sapf_core::model::SaParaformer;
use sapf_core::speaker::SpeakerInventory;
use sapf_core::tsot::{deserialize, per_speaker, serialize, Hypothesis};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub with_separator: bool,
    pub sessions: usize,
    pub sd_cer: SdCerReport,
    /// Insertions, deletions and substitutions summed over speakers.
    pub edits: EditCounts,
    /// Speaker-agnostic scoring of the merged token stream.
    pub cer: EditCounts,
    /// Separator ids emitted by a model scored in separator-free mode; they
    /// are dropped before scoring.
    pub stray_separators: usize,
}

/// Decodes every session and scores it. `with_separator` must match the
/// mode the model was trained in.
pub fn evaluate(model: &SaParaformer<f64>, data: &Dataset, with_separator: bool) -> Result<EvalReport> {
    let cfg = model.config();
    if cfg.vocab_size != data.vocab_size || cfg.input_dim != data.feature_dim || cfg.d_spk != data.d_spk {
        return Err(HarnessError::Config(format!(
            "model (vocab {}, features {}, d_spk {}) does not match data (vocab {}, features {}, d_spk {})",
            cfg.vocab_size, cfg.input_dim, cfg.d_spk, data.vocab_size, data.feature_dim, data.d_spk
        )));
    }
    if cfg.use_cc_separator != with_separator {
        return Err(HarnessError::Config(format!(
            "model was trained {} separators but evaluation asks for the other mode",
            if cfg.use_cc_separator { "with" } else { "without" }
        )));
    }
    let cc = cfg.cc_id();
    let mut reports = Vec::with_capacity(data.len());
    let mut cer = EditCounts::default();
    let mut stray = 0;
    for s in &data.sessions {
        let profiles = s.inventory.iter().map(|p| p.to_profile()).collect::<sapf_core::Result<Vec<_>>>()?;
        let inv = SpeakerInventory::new(profiles)?;
        let mut hyp = model.nar_infer(&s.features, &inv)?;
        if !with_separator {
            stray += drop_separators(&mut hyp, cc);
        }
        let hyp_map = deserialize(&hyp, with_separator, cc)?;
        let ref_map = per_speaker(&s.tokens);
        reports.push(sd_cer(&ref_map, &hyp_map));
        let reference = serialize(&s.tokens, false, cc)?.tokens;
        let merged: Vec<usize> = hyp.tokens.iter().copied().filter(|&t| t != cc).collect();
        cer.add(&edit_align(&reference, &merged));
    }
    let sd = SdCerReport::merge(&reports);
    Ok(EvalReport { with_separator, sessions: data.len(), edits: sd.totals(), sd_cer: sd, cer, stray_separators: stray })
}

fn drop_separators(hyp: &mut Hypothesis, cc: usize) -> usize {
    let before = hyp.tokens.len();
    let keep: Vec<bool> = hyp.tokens.iter().map(|&t| t != cc).collect();
    let mut k = keep.iter();
    hyp.tokens.retain(|_| *k.next().unwrap());
    let mut k = keep.iter();
    hyp.speakers.retain(|_| *k.next().unwrap());
    if !hyp.scores.is_empty() {
        let mut k = keep.iter();
        hyp.scores.retain(|_| *k.next().unwrap());
    }
    before - hyp.tokens.len()
}
