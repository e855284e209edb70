//! Token-level serialized output: merge several speakers' timed tokens into
//! one stream ordered by end time, optionally marking speaker changes with a
//! channel-change token.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimedToken {
    pub token: usize,
    pub speaker: String,
    pub start_frame: usize,
    pub end_frame: usize,
}

impl TimedToken {
    pub fn new(token: usize, speaker: impl Into<String>, start_frame: usize, end_frame: usize) -> Self {
        Self { token, speaker: speaker.into(), start_frame, end_frame }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SerializedTarget {
    pub tokens: Vec<usize>,
    /// Parallel to `tokens`; a separator carries the label of the speaker it
    /// announces.
    pub speaker_labels: Vec<String>,
    pub has_separator: bool,
    /// Id of the channel-change token.
    pub cc: usize,
}

impl SerializedTarget {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn separator_count(&self) -> usize {
        self.tokens.iter().filter(|&&t| t == self.cc).count()
    }
}

/// A decoded stream with one predicted speaker per token.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub speakers: Vec<String>,
    /// Max posterior per token; may be empty for hand-built streams.
    #[serde(default)]
    pub scores: Vec<f64>,
}

/// Sorts by `(end_frame, start_frame, speaker)` (stable) and, when
/// `with_separator`, inserts `cc` at every change of speaker.
pub fn serialize(tokens: &[TimedToken], with_separator: bool, cc: usize) -> Result<SerializedTarget> {
    for t in tokens {
        if t.start_frame > t.end_frame {
            return Err(Error::Contract(format!(
                "token {} of {:?} starts at {} after it ends at {}",
                t.token, t.speaker, t.start_frame, t.end_frame
            )));
        }
        if t.token == cc {
            return Err(Error::Contract(format!("timed token uses the reserved separator id {cc}")));
        }
    }
    let mut order: Vec<&TimedToken> = tokens.iter().collect();
    order.sort_by(|a, b| {
        (a.end_frame, a.start_frame, &a.speaker).cmp(&(b.end_frame, b.start_frame, &b.speaker))
    });
    let mut out = SerializedTarget { tokens: Vec::new(), speaker_labels: Vec::new(), has_separator: with_separator, cc };
    for (i, t) in order.iter().enumerate() {
        if with_separator && i > 0 && order[i - 1].speaker != t.speaker {
            out.tokens.push(cc);
            out.speaker_labels.push(t.speaker.clone());
        }
        out.tokens.push(t.token);
        out.speaker_labels.push(t.speaker.clone());
    }
    Ok(out)
}

pub fn strip_separators(t: &SerializedTarget) -> SerializedTarget {
    let (tokens, speaker_labels) = t
        .tokens
        .iter()
        .zip(&t.speaker_labels)
        .filter(|(&tok, _)| tok != t.cc)
        .map(|(&tok, s)| (tok, s.clone()))
        .unzip();
    SerializedTarget { tokens, speaker_labels, has_separator: false, cc: t.cc }
}

/// Splits a hypothesis into per-speaker token sequences.
///
/// With separators the stream is cut at each `cc` and every segment goes to
/// the most frequent predicted speaker in it (earliest-appearing speaker wins
/// ties). Without separators each token goes to its own predicted speaker.
pub fn deserialize(hyp: &Hypothesis, with_separator: bool, cc: usize) -> Result<BTreeMap<String, Vec<usize>>> {
    if hyp.tokens.len() != hyp.speakers.len() {
        return Err(Error::MalformedStream(format!(
            "{} tokens but {} speaker labels",
            hyp.tokens.len(),
            hyp.speakers.len()
        )));
    }
    let mut out: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    if !with_separator {
        if let Some(pos) = hyp.tokens.iter().position(|&t| t == cc) {
            return Err(Error::MalformedStream(format!("separator at position {pos} in a separator-free stream")));
        }
        for (&t, s) in hyp.tokens.iter().zip(&hyp.speakers) {
            out.entry(s.clone()).or_default().push(t);
        }
        return Ok(out);
    }
    let mut start = 0;
    for end in 0..=hyp.tokens.len() {
        if end < hyp.tokens.len() && hyp.tokens[end] != cc {
            continue;
        }
        let seg = start..end;
        start = end + 1;
        if seg.is_empty() {
            continue;
        }
        let mut votes: Vec<(&str, usize)> = Vec::new();
        for s in &hyp.speakers[seg.clone()] {
            match votes.iter_mut().find(|(id, _)| *id == s.as_str()) {
                Some(v) => v.1 += 1,
                None => votes.push((s.as_str(), 1)),
            }
        }
        let mut winner = votes[0];
        for &v in &votes[1..] {
            if v.1 > winner.1 {
                winner = v;
            }
        }
        out.entry(winner.0.to_string()).or_default().extend_from_slice(&hyp.tokens[seg]);
    }
    Ok(out)
}

/// Per-speaker token sequences of a timed stream in end-time order.
pub fn per_speaker(tokens: &[TimedToken]) -> BTreeMap<String, Vec<usize>> {
    let mut order: Vec<&TimedToken> = tokens.iter().collect();
    order.sort_by(|a, b| (a.end_frame, a.start_frame).cmp(&(b.end_frame, b.start_frame)));
    let mut out: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for t in order {
        out.entry(t.speaker.clone()).or_default().push(t.token);
    }
    out
}

impl From<&SerializedTarget> for Hypothesis {
    fn from(t: &SerializedTarget) -> Self {
        Hypothesis { tokens: t.tokens.clone(), speakers: t.speaker_labels.clone(), scores: Vec::new() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const CC: usize = 99;

    fn abab() -> Vec<TimedToken> {
        vec![TimedToken::new(10, "A", 0, 1), TimedToken::new(11, "A", 2, 3), TimedToken::new(20, "B", 1, 2)]
    }

    #[test]
    fn merge_by_end_time_with_separators() {
        let t = serialize(&abab(), true, CC).unwrap();
        assert_eq!(t.tokens, vec![10, CC, 20, CC, 11]);
        assert_eq!(t.speaker_labels, vec!["A", "B", "B", "A", "A"]);
        assert_eq!(t.separator_count(), 2);
    }

    #[test]
    fn merge_without_separators() {
        let t = serialize(&abab(), false, CC).unwrap();
        assert_eq!(t.tokens, vec![10, 20, 11]);
        assert_eq!(t.speaker_labels, vec!["A", "B", "A"]);
        assert_eq!(strip_separators(&serialize(&abab(), true, CC).unwrap()), t);
    }

    #[test]
    fn single_speaker_has_no_separator() {
        let toks = vec![TimedToken::new(3, "A", 4, 6), TimedToken::new(1, "A", 0, 2)];
        let t = serialize(&toks, true, CC).unwrap();
        assert_eq!(t.tokens, vec![1, 3]);
        let map = deserialize(&Hypothesis::from(&t), true, CC).unwrap();
        assert_eq!(map.len(), 1);
    }

    #[test]
    fn empty_stream_is_valid() {
        let t = serialize(&[], true, CC).unwrap();
        assert!(t.is_empty());
        assert!(deserialize(&Hypothesis::default(), true, CC).unwrap().is_empty());
    }

    #[test]
    fn bad_inputs() {
        assert!(serialize(&[TimedToken::new(1, "A", 3, 2)], false, CC).is_err());
        assert!(serialize(&[TimedToken::new(CC, "A", 0, 2)], false, CC).is_err());
        let hyp = Hypothesis { tokens: vec![1, CC, 2], speakers: vec!["A".into(); 3], scores: vec![] };
        assert!(matches!(deserialize(&hyp, false, CC), Err(Error::MalformedStream(_))));
        let hyp = Hypothesis { tokens: vec![1], speakers: vec![], scores: vec![] };
        assert!(deserialize(&hyp, true, CC).is_err());
    }

    #[test]
    fn segment_majority_vote() {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        let hyp = Hypothesis { tokens: vec![1, 2, 3, CC, 4, 5], speakers: s(&["B", "A", "A", "B", "B", "A"]), scores: vec![] };
        let map = deserialize(&hyp, true, CC).unwrap();
        assert_eq!(map["A"], vec![1, 2, 3]);
        // tie inside the second segment goes to the earlier speaker
        assert_eq!(map["B"], vec![4, 5]);
    }

    #[test]
    fn strip_reduces_length_by_separator_count() {
        let t = serialize(&abab(), true, CC).unwrap();
        let s = strip_separators(&t);
        assert_eq!(t.len() - s.len(), t.separator_count());
        assert_eq!(strip_separators(&s), s);
    }
}
