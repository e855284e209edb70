use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sapf_core::cif::{integrate_and_fire, scale_weights, WeightSequence};
use sapf_core::losses::ctc_forward_backward;
use sapf_core::metrics::{edit_align, sd_cer};
use sapf_core::oracles::{cif_sequential, ctc_enumerate, levenshtein_recursive};
use sapf_core::Tensor;

#[test]
fn ctc_matches_path_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut feasible = 0;
    for _ in 0..500 {
        let frames = rng.random_range(1..=6);
        let v = rng.random_range(1..=4);
        let len = rng.random_range(0..=3);
        let target: Vec<usize> = (0..len).map(|_| rng.random_range(0..v)).collect();
        let logits = Tensor::matrix(frames, v + 1, (0..frames * (v + 1)).map(|_| rng.random_range(-3.0..3.0)).collect());
        let dp = ctc_forward_backward(&logits, &target).unwrap().map(|(l, _)| l);
        let brute = ctc_enumerate(&logits, &target);
        match (dp, brute) {
            (Some(a), Some(b)) => {
                feasible += 1;
                assert!((a - b).abs() < 1e-8, "{a} vs {b} for {target:?} over {frames} frames");
            }
            (None, None) => {}
            other => panic!("feasibility disagrees: {other:?} for {target:?} over {frames} frames"),
        }
    }
    assert!(feasible > 300);
}

#[test]
fn ctc_fixed_small_instance() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits = Tensor::matrix(3, 4, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect());
    let (dp, _) = ctc_forward_backward(&logits, &[0, 2]).unwrap().unwrap();
    assert!((dp - ctc_enumerate(&logits, &[0, 2]).unwrap()).abs() < 1e-8);
}

#[test]
fn cif_matches_sequential_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for case in 0..1000 {
        let t = rng.random_range(1..=40);
        let alpha: Vec<f64> = (0..t)
            .map(|_| match rng.random_range(0..10) {
                0 => 0.0,
                1 => 1.0,
                _ => rng.random_range(0.0..1.0),
            })
            .collect();
        let h = Tensor::zeros(t, 2);
        let plan = integrate_and_fire(&h, &WeightSequence::new(alpha.clone()), 1.0).unwrap();
        let o = cif_sequential(&alpha, 1.0);
        assert_eq!(plan.firings, o.firings, "case {case}");
        assert!((plan.residue - o.residue).abs() < 1e-12, "case {case}");
        for s in plan.token_weight_sums() {
            assert!((s - 1.0).abs() < 1e-9, "case {case}");
        }
        for s in o.token_sums {
            assert!((s - 1.0).abs() < 1e-9, "case {case}");
        }
    }
}

#[test]
fn scaled_weights_always_fire_target_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(91);
    for _ in 0..1000 {
        let t = rng.random_range(1..=60);
        let alpha: Vec<f64> = (0..t).map(|_| rng.random_range(0.01..1.0)).collect();
        let n = rng.random_range(1..=t.max(2));
        let w = scale_weights(&WeightSequence::new(alpha), n, 1.0).unwrap();
        let plan = integrate_and_fire(&Tensor::zeros(t, 1), &w, 1.0).unwrap();
        assert_eq!(plan.num_tokens(), n);
    }
}

fn all_sequences(max_len: usize, alphabet: u8) -> Vec<Vec<u8>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for c in 0..alphabet {
                let mut t: Vec<u8> = s.clone();
                t.push(c);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

#[test]
fn edit_alignment_is_exact_levenshtein() {
    let seqs = all_sequences(5, 3);
    assert_eq!(seqs.len(), 364);
    for a in &seqs {
        for b in &seqs {
            let c = edit_align(a, b);
            assert_eq!(c.errors(), levenshtein_recursive(a, b), "{a:?} vs {b:?}");
            assert_eq!(c.del + c.sub + c.correct, a.len());
            assert_eq!(c.ins + c.sub + c.correct, b.len());
        }
    }
}

#[test]
fn sd_cer_full_swap_of_two_speakers() {
    let refs: BTreeMap<String, Vec<u8>> = [("A".into(), b"abc".to_vec()), ("B".into(), b"xyz".to_vec())].into();
    let hyps: BTreeMap<String, Vec<u8>> = [("A".into(), b"xyz".to_vec()), ("B".into(), b"abc".to_vec())].into();
    let r = sd_cer(&refs, &hyps);
    // each speaker: three substitutions against a length-3 reference
    let expected = levenshtein_recursive(b"abc", b"xyz") * 2;
    assert_eq!(r.total_errors, expected);
    assert!((r.sd_cer - 100.0).abs() < 1e-12);
}
