use std::collections::BTreeMap;

use proptest::prelude::*;
use sapf_core::cif::{accumulate, integrate_and_fire, WeightSequence};
use sapf_core::losses::{composite_loss, speaker_loss, LossParts, LossWeights};
use sapf_core::metrics::{edit_align, sd_cer, RtfReport};
use sapf_core::speaker::{
    add_interfering, assign_speakers, attention_weights, cosine_scores, fill_speakers, CosineScores,
    SpeakerInventory, SpeakerProfile,
};
use sapf_core::tsot::{deserialize, serialize, strip_separators, Hypothesis, TimedToken};
use sapf_core::{Graph, Tensor};

const CC: usize = 39;

/// Random 1–3 speaker stream; tokens of one speaker never overlap in time.
fn stream() -> impl Strategy<Value = Vec<TimedToken>> {
    prop::collection::vec(prop::collection::vec((0usize..CC, 0usize..4, 0usize..3), 0..6), 1..=3).prop_map(|spk| {
        let mut out = Vec::new();
        for (s, toks) in spk.into_iter().enumerate() {
            let mut t = s * 2;
            for (tok, gap, dur) in toks {
                t += gap;
                out.push(TimedToken::new(tok, format!("S{s}"), t, t + dur));
                t += dur + 1;
            }
        }
        out
    })
}

fn changes(labels: &[String]) -> usize {
    labels.windows(2).filter(|w| w[0] != w[1]).count()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn tsot_round_trip_both_modes(toks in stream()) {
        let truth = sapf_core::tsot::per_speaker(&toks);
        for sep in [false, true] {
            let s = serialize(&toks, sep, CC).unwrap();
            let back = deserialize(&Hypothesis::from(&s), sep, CC).unwrap();
            prop_assert_eq!(&back, &truth);
        }
    }

    #[test]
    fn separators_strip_to_plain_stream(toks in stream()) {
        let with = serialize(&toks, true, CC).unwrap();
        let without = serialize(&toks, false, CC).unwrap();
        prop_assert_eq!(strip_separators(&with), without.clone());
        prop_assert_eq!(with.separator_count(), changes(&without.speaker_labels));
        if !with.is_empty() {
            prop_assert!(with.tokens[0] != CC && *with.tokens.last().unwrap() != CC);
        }
        prop_assert!(with.tokens.windows(2).all(|w| !(w[0] == CC && w[1] == CC)));
    }

    #[test]
    fn merge_keeps_each_speaker_in_order(toks in stream()) {
        let s = serialize(&toks, false, CC).unwrap();
        for spk in ["S0", "S1", "S2"] {
            let merged: Vec<usize> = s.tokens.iter().zip(&s.speaker_labels).filter(|(_, l)| *l == spk).map(|(&t, _)| t).collect();
            let orig: Vec<usize> = toks.iter().filter(|t| t.speaker == spk).map(|t| t.token).collect();
            prop_assert_eq!(merged, orig);
        }
    }

    #[test]
    fn cif_conserves_weight(alpha in prop::collection::vec(0.0f64..=1.0, 1..50)) {
        let (shares, _, residue) = accumulate(&alpha, 1.0);
        let used: f64 = shares.iter().map(|s| s.weight).sum();
        let total: f64 = alpha.iter().sum();
        // shares include the tail token, so they alone account for Σα
        prop_assert!((used - total).abs() < 1e-9);
        let plan = integrate_and_fire(&Tensor::zeros(alpha.len(), 1), &WeightSequence::new(alpha.clone()), 1.0).unwrap();
        let fired: f64 = plan.token_weight_sums().iter().sum();
        prop_assert!((fired + residue - total).abs() < 1e-9);
        prop_assert!(shares.iter().all(|s| s.weight >= 0.0));
        for s in plan.token_weight_sums() {
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn cosine_is_scale_invariant(
        q in prop::collection::vec(-1.0f64..1.0, 12),
        c in 0.01f64..100.0,
    ) {
        let inv = inventory(3, 4, 0);
        let qt = Tensor::matrix(3, 4, q.clone());
        let mut g = Graph::new();
        let a = g.constant(qt.clone());
        let b = g.constant(qt.map(|v| v * c));
        let sa = cosine_scores(&mut g, a, &inv).unwrap();
        let sb = cosine_scores(&mut g, b, &inv).unwrap();
        prop_assert!(g.value(sa.b).max_abs_diff(g.value(sb.b)) < 1e-9);
        prop_assert!(g.value(sa.b).data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let wa = attention_weights(&mut g, sa, None).unwrap();
        let wb = attention_weights(&mut g, sb, None).unwrap();
        prop_assert_eq!(assign_speakers(g.value(wa.beta), &inv), assign_speakers(g.value(wb.beta), &inv));
    }

    #[test]
    fn attention_rows_are_distributions(
        scores in prop::collection::vec(-1.0f64..1.0, 2..24),
        seed in any::<u64>(),
        extra in 0usize..4,
    ) {
        let k = scores.len() / 2;
        let k = k.max(1);
        let b = Tensor::matrix(2, k, scores[..2 * k].to_vec());
        let mut g = Graph::new();
        let bv = g.constant(b.clone());
        let s = fill_speakers(&mut g, CosineScores { b: bv, genuine: k, total: k }, k + extra, seed).unwrap();
        let out = g.value(s.b).clone();
        for r in 0..2 {
            prop_assert_eq!(&out.row(r)[..k], b.row(r));
            prop_assert!(out.row(r)[k..].iter().all(|v| (-0.5..=0.5).contains(v)));
        }
        let w = attention_weights(&mut g, s, None).unwrap();
        for r in 0..2 {
            let row = g.value(w.beta).row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&v| v > 0.0 && (row.len() == 1 || v < 1.0)));
        }
    }

    #[test]
    fn orthogonal_profiles_are_recovered(perm in Just((0..6usize).collect::<Vec<_>>()).prop_shuffle(), scale in 0.1f64..10.0) {
        let inv = SpeakerInventory::new(
            (0..6).map(|k| SpeakerProfile::new(format!("s{k}"), (0..6).map(|j| f64::from(u8::from(j == k))).collect()).unwrap()).collect(),
        ).unwrap();
        let mut q = Tensor::zeros(6, 6);
        for (n, &k) in perm.iter().enumerate() {
            q.set(n, k, scale);
        }
        let mut g = Graph::new();
        let qv = g.constant(q);
        let s = cosine_scores(&mut g, qv, &inv).unwrap();
        let w = attention_weights(&mut g, s, None).unwrap();
        let got = assign_speakers(g.value(w.beta), &inv);
        let want: Vec<String> = perm.iter().map(|k| format!("s{k}")).collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn interfering_keeps_genuine_prefix(k in 1usize..4, m in 0usize..3, seed in any::<u64>()) {
        let pool = inventory(8, 5, 100);
        let inv = SpeakerInventory::new(pool.profiles()[..k].to_vec()).unwrap();
        let out = add_interfering(&inv, pool.profiles(), m, seed).unwrap();
        prop_assert_eq!(out.len(), k + m);
        prop_assert_eq!(out.true_count(), k);
        prop_assert_eq!(&out.profiles()[..k], inv.profiles());
        let mut ids = out.ids();
        ids.sort();
        ids.dedup();
        prop_assert_eq!(ids.len(), k + m);
    }

    #[test]
    fn composite_is_linear_in_each_part(
        parts in prop::array::uniform5(0.0f64..5.0),
        which in 0usize..5,
        delta in -1.0f64..1.0,
        l1 in 0.0f64..0.5,
        l2 in 0.0f64..0.5,
    ) {
        let w = LossWeights { lambda1: l1, lambda2: l2 };
        let coeff = [1.0, l1, l2, 1.0 - l1 - l2, 1.0];
        let total = |p: [f64; 5]| {
            let mut g = Graph::new();
            let v: Vec<_> = p.iter().map(|&x| g.constant(Tensor::scalar(x))).collect();
            let b = composite_loss(&mut g, LossParts { mae: v[0], ctc: v[1], inter_ctc: v[2], ce: v[3], speaker: v[4] }, w).unwrap();
            b.values(&g).total
        };
        let base = total(parts);
        let expect: f64 = parts.iter().zip(coeff).map(|(a, c)| a * c).sum();
        prop_assert!((base - expect).abs() < 1e-10);
        let mut bumped = parts;
        bumped[which] += delta;
        prop_assert!((total(bumped) - base - coeff[which] * delta).abs() < 1e-10);
    }

    #[test]
    fn speaker_loss_falls_as_true_score_rises(
        scores in prop::collection::vec(-1.0f64..1.0, 4),
        target in 0usize..4,
        bump in 0.01f64..1.0,
    ) {
        let eval = |s: &[f64]| {
            let mut g = Graph::new();
            let b = g.constant(Tensor::matrix(1, 4, s.to_vec()));
            let l = speaker_loss(&mut g, CosineScores { b, genuine: 4, total: 4 }, &[target]).unwrap();
            g.value(l).item()
        };
        let mut up = scores.clone();
        up[target] += bump;
        prop_assert!(eval(&up) < eval(&scores));
    }

    #[test]
    fn sd_cer_ignores_speaker_names(
        refs in prop::collection::vec(prop::collection::vec(0u8..4, 0..8), 1..4),
        hyps in prop::collection::vec(prop::collection::vec(0u8..4, 0..8), 1..4),
    ) {
        let label = |v: &Vec<Vec<u8>>, names: &[&str]| -> BTreeMap<String, Vec<u8>> {
            v.iter().enumerate().map(|(i, s)| (names[i].to_string(), s.clone())).collect()
        };
        let a = sd_cer(&label(&refs, &["A", "B", "C"]), &label(&hyps, &["A", "B", "C"]));
        let b = sd_cer(&label(&refs, &["zed", "y", "x"]), &label(&hyps, &["zed", "y", "x"]));
        prop_assert_eq!(a.total_errors, b.total_errors);
        prop_assert_eq!(a.sd_cer, b.sd_cer);
        let one = sd_cer(&label(&refs[..1].to_vec(), &["A"]), &label(&hyps[..1].to_vec(), &["A"]));
        let c = edit_align(&refs[0], &hyps[0]);
        prop_assert_eq!(one.total_errors, c.errors());
        prop_assert_eq!(c.del + c.sub + c.correct, c.ref_len);
    }

    #[test]
    fn rtf_ignores_item_order(parts in prop::collection::vec((1usize..64, 0.0f64..2.0), 1..10), audio in 1.0f64..100.0) {
        let a = RtfReport::from_parts(parts.clone(), audio).unwrap();
        let mut rev = parts;
        rev.reverse();
        let b = RtfReport::from_parts(rev, audio).unwrap();
        prop_assert!((a.rtf - b.rtf).abs() < 1e-12);
    }
}

fn inventory(k: usize, d: usize, salt: u64) -> SpeakerInventory<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(salt);
    SpeakerInventory::new(
        (0..k)
            .map(|i| SpeakerProfile::new(format!("p{}", i as u64 + salt), (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
            .collect(),
    )
    .unwrap()
}

#[test]
fn filled_cells_average_to_zero() {
    let (rows, extra, seeds) = (2usize, 3usize, 10_000u64);
    let mut sums = vec![0.0; rows * extra];
    for seed in 0..seeds {
        let mut g = Graph::new();
        let b = g.constant(Tensor::zeros(rows, 1));
        let s = fill_speakers(&mut g, CosineScores { b, genuine: 1, total: 1 }, 1 + extra, seed).unwrap();
        let v = g.value(s.b);
        for r in 0..rows {
            for c in 0..extra {
                sums[r * extra + c] += v.get(r, c + 1);
            }
        }
    }
    for s in &sums {
        assert!((s / seeds as f64).abs() <= 0.05);
    }
    let pooled: f64 = sums.iter().sum::<f64>() / (seeds as usize * rows * extra) as f64;
    assert!(pooled.abs() <= 0.05);
}
