//! Edit-distance scoring, speaker-dependent CER and real-time factor.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub ins: usize,
    pub del: usize,
    pub sub: usize,
    pub correct: usize,
    pub ref_len: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.ins + self.del + self.sub
    }

    /// Error rate in percent; an empty reference scores 0 unless there are
    /// insertions, in which case it is reported as 100 per insertion.
    pub fn cer(&self) -> f64 {
        if self.ref_len == 0 {
            return 100.0 * self.ins as f64;
        }
        100.0 * self.errors() as f64 / self.ref_len as f64
    }

    pub fn add(&mut self, o: &EditCounts) {
        self.ins += o.ins;
        self.del += o.del;
        self.sub += o.sub;
        self.correct += o.correct;
        self.ref_len += o.ref_len;
    }
}

/// Levenshtein alignment of `hyp` against `refr`. The backtrace prefers
/// substitution (or match), then deletion, then insertion.
pub fn edit_align<T: PartialEq>(refr: &[T], hyp: &[T]) -> EditCounts {
    let (n, m) = (refr.len(), hyp.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = d[(i - 1) * w + j - 1] + usize::from(refr[i - 1] != hyp[j - 1]);
            let del = d[(i - 1) * w + j] + 1;
            let ins = d[i * w + j - 1] + 1;
            d[i * w + j] = diag.min(del).min(ins);
        }
    }
    let mut c = EditCounts { ref_len: n, ..Default::default() };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let same = refr[i - 1] == hyp[j - 1];
            if d[(i - 1) * w + j - 1] + usize::from(!same) == here {
                if same {
                    c.correct += 1;
                } else {
                    c.sub += 1;
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[(i - 1) * w + j] + 1 == here {
            c.del += 1;
            i -= 1;
        } else {
            c.ins += 1;
            j -= 1;
        }
    }
    c
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SdCerReport {
    pub per_speaker: BTreeMap<String, EditCounts>,
    pub total_errors: usize,
    pub total_ref_len: usize,
    pub sd_cer: f64,
}

impl SdCerReport {
    pub fn totals(&self) -> EditCounts {
        let mut t = EditCounts::default();
        for c in self.per_speaker.values() {
            t.add(c);
        }
        t
    }

    /// Pools several reports (e.g. one per session).
    pub fn merge(reports: &[SdCerReport]) -> SdCerReport {
        let mut per_speaker: BTreeMap<String, EditCounts> = BTreeMap::new();
        for r in reports {
            for (k, c) in &r.per_speaker {
                per_speaker.entry(k.clone()).or_default().add(c);
            }
        }
        Self::from_counts(per_speaker)
    }

    fn from_counts(per_speaker: BTreeMap<String, EditCounts>) -> Self {
        let total_errors = per_speaker.values().map(EditCounts::errors).sum();
        let total_ref_len = per_speaker.values().map(|c| c.ref_len).sum();
        let sd_cer = if total_ref_len == 0 {
            if total_errors == 0 { 0.0 } else { 100.0 }
        } else {
            100.0 * total_errors as f64 / total_ref_len as f64
        };
        Self { per_speaker, total_errors, total_ref_len, sd_cer }
    }
}

/// Scores each speaker's hypothesis against that speaker's reference.
pub fn sd_cer<T: PartialEq>(refs: &BTreeMap<String, Vec<T>>, hyps: &BTreeMap<String, Vec<T>>) -> SdCerReport {
    let speakers: BTreeSet<&String> = refs.keys().chain(hyps.keys()).collect();
    let empty = Vec::new();
    let per_speaker = speakers
        .into_iter()
        .map(|s| {
            let r = refs.get(s).unwrap_or(&empty);
            let h = hyps.get(s).unwrap_or(&empty);
            (s.clone(), edit_align(r, h))
        })
        .collect();
    SdCerReport::from_counts(per_speaker)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RtfReport {
    pub total_inference_seconds: f64,
    pub total_audio_seconds: f64,
    pub rtf: f64,
    /// `(length, seconds)` per timed item.
    pub per_length_breakdown: Vec<(usize, f64)>,
}

impl RtfReport {
    pub fn from_parts(parts: Vec<(usize, f64)>, total_audio_seconds: f64) -> Result<Self> {
        if !(total_audio_seconds > 0.0) {
            return Err(Error::Contract("RTF needs a positive total audio duration".into()));
        }
        let total_inference_seconds = parts.iter().map(|p| p.1).sum();
        Ok(Self {
            total_inference_seconds,
            total_audio_seconds,
            rtf: total_inference_seconds / total_audio_seconds,
            per_length_breakdown: parts,
        })
    }
}

pub fn audio_seconds(frames: usize, frame_shift_ms: f64) -> f64 {
    frames as f64 * frame_shift_ms / 1000.0
}

/// Times `decode` over `items` after one untimed warm-up call on the first
/// item. `frames(item)` gives the input length and `length(item)` the label
/// used in the breakdown.
pub fn rtf_measure<I, F, E>(
    items: &[I],
    frames: impl Fn(&I) -> usize,
    length: impl Fn(&I) -> usize,
    frame_shift_ms: f64,
    mut decode: F,
) -> Result<RtfReport>
where
    F: FnMut(&I) -> std::result::Result<(), E>,
    E: std::fmt::Display,
{
    let audio: f64 = items.iter().map(|it| audio_seconds(frames(it), frame_shift_ms)).sum();
    if !(audio > 0.0) {
        return Err(Error::Contract("RTF needs a positive total audio duration".into()));
    }
    let wrap = |e: E| Error::Contract(format!("decode failed during timing: {e}"));
    decode(&items[0]).map_err(wrap)?;
    let mut parts = Vec::with_capacity(items.len());
    for it in items {
        let t0 = Instant::now();
        decode(it).map_err(wrap)?;
        parts.push((length(it), t0.elapsed().as_secs_f64()));
    }
    RtfReport::from_parts(parts, audio)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(x: &str) -> Vec<char> {
        x.chars().collect()
    }

    #[test]
    fn edit_examples() {
        assert_eq!(edit_align(&s("abc"), &s("abc")), EditCounts { correct: 3, ref_len: 3, ..Default::default() });
        let c = edit_align(&s("abc"), &s("axc"));
        assert_eq!((c.sub, c.del, c.ins), (1, 0, 0));
        assert!((c.cer() - 100.0 / 3.0).abs() < 1e-12);
        let c = edit_align(&s("abc"), &s("ab"));
        assert_eq!((c.sub, c.del, c.ins), (0, 1, 0));
        let c = edit_align(&s(""), &s("ab"));
        assert_eq!((c.ins, c.ref_len), (2, 0));
    }

    #[test]
    fn tie_prefers_substitution() {
        // "ab" vs "ba": sub+sub or del+ins both cost 2
        let c = edit_align(&s("ab"), &s("ba"));
        assert_eq!((c.sub, c.del, c.ins), (2, 0, 0));
    }

    fn map(pairs: &[(&str, &str)]) -> BTreeMap<String, Vec<char>> {
        pairs.iter().map(|(k, v)| (k.to_string(), s(v))).collect()
    }

    #[test]
    fn sd_cer_swapped_speakers() {
        let refs = map(&[("A", "abc"), ("B", "def")]);
        let hyps = map(&[("A", "def"), ("B", "abc")]);
        let r = sd_cer(&refs, &hyps);
        assert_eq!(r.total_ref_len, 6);
        assert!((r.sd_cer - 100.0).abs() < 1e-12);
        assert_eq!(sd_cer(&refs, &refs).sd_cer, 0.0);
    }

    #[test]
    fn sd_cer_missing_and_extra_speakers() {
        let refs = map(&[("A", "abc")]);
        let hyps = map(&[("A", "abc"), ("Z", "xy")]);
        let r = sd_cer(&refs, &hyps);
        assert_eq!(r.per_speaker["Z"].ins, 2);
        let r = sd_cer(&map(&[("A", "abc"), ("B", "de")]), &map(&[("A", "abc")]));
        assert_eq!(r.per_speaker["B"].del, 2);
        assert!((r.sd_cer - 40.0).abs() < 1e-12);
    }

    #[test]
    fn single_speaker_is_plain_cer() {
        let r = sd_cer(&map(&[("A", "abcd")]), &map(&[("A", "abd")]));
        assert_eq!(r.sd_cer, edit_align(&s("abcd"), &s("abd")).cer());
    }

    #[test]
    fn rtf_arithmetic() {
        let r = RtfReport::from_parts(vec![(8, 2.0), (16, 3.0)], 50.0).unwrap();
        assert!((r.rtf - 0.1).abs() < 1e-12);
        assert!((audio_seconds(1000, 8.0) - 8.0).abs() < 1e-12);
        assert!(RtfReport::from_parts(vec![], 0.0).is_err());
        let items = [10usize, 20];
        let mut calls = 0;
        let r = rtf_measure(&items, |&t| t, |&t| t, 8.0, |_| {
            calls += 1;
            Ok::<(), String>(())
        })
        .unwrap();
        assert_eq!(calls, 3);
        assert_eq!(r.per_length_breakdown.len(), 2);
        assert!((r.total_audio_seconds - 0.24).abs() < 1e-12);
    }
}
