//! Slow, obviously-correct reference implementations used only by tests.

use std::collections::HashMap;

use crate::tensor::Tensor;

/// `−log p(target)` by summing over every frame labelling that collapses to
/// `target` (blank = last class). `None` when no labelling does.
pub fn ctc_enumerate(logits: &Tensor<f64>, target: &[usize]) -> Option<f64> {
    let (frames, classes) = (logits.rows(), logits.cols());
    let blank = classes - 1;
    let logp: Vec<Vec<f64>> = (0..frames)
        .map(|t| {
            let row = logits.row(t);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
            row.iter().map(|v| v - z).collect()
        })
        .collect();
    let mut path = vec![0usize; frames];
    let mut total = 0.0;
    let mut any = false;
    loop {
        let mut collapsed = Vec::new();
        let mut prev = None;
        for &c in &path {
            if c != blank && Some(c) != prev {
                collapsed.push(c);
            }
            prev = Some(c);
        }
        if collapsed == target {
            any = true;
            total += path.iter().enumerate().map(|(t, &c)| logp[t][c]).sum::<f64>().exp();
        }
        // odometer increment
        let mut i = 0;
        loop {
            if i == frames {
                return any.then(|| -total.ln());
            }
            path[i] += 1;
            if path[i] < classes {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

/// Result of the sequential integrate-and-fire oracle.
#[derive(Clone, Debug, PartialEq)]
pub struct CifOracle {
    pub firings: Vec<usize>,
    pub residue: f64,
    /// Weight collected by each fired token.
    pub token_sums: Vec<f64>,
}

/// Frame-by-frame accumulation: a token fires as soon as its collected
/// weight reaches `beta` (within `1e-9·beta`), and the overflow opens the
/// next token.
pub fn cif_sequential(alpha: &[f64], beta: f64) -> CifOracle {
    let mut out = CifOracle { firings: Vec::new(), residue: 0.0, token_sums: Vec::new() };
    let mut held = 0.0;
    for (t, &a) in alpha.iter().enumerate() {
        let mut left = a;
        loop {
            let need = beta - held;
            if left + 1e-9 * beta < need {
                held += left;
                break;
            }
            let used = need.min(left);
            out.token_sums.push(held + used);
            out.firings.push(t);
            left -= used;
            held = 0.0;
            if left <= 0.0 {
                break;
            }
        }
    }
    out.residue = held;
    out
}

/// Plain recursive edit distance with memoisation.
pub fn levenshtein_recursive<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    fn go<T: PartialEq>(a: &[T], b: &[T], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if i == a.len() {
            return b.len() - j;
        }
        if j == b.len() {
            return a.len() - i;
        }
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let v = if a[i] == b[j] {
            go(a, b, i + 1, j + 1, memo)
        } else {
            1 + go(a, b, i + 1, j + 1, memo).min(go(a, b, i + 1, j, memo)).min(go(a, b, i, j + 1, memo))
        };
        memo.insert((i, j), v);
        v
    }
    go(a, b, 0, 0, &mut HashMap::new())
}

pub fn cosine(q: &[f64], d: &[f64]) -> f64 {
    let dot: f64 = q.iter().zip(d).map(|(a, b)| a * b).sum();
    let nq = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nd = d.iter().map(|v| v * v).sum::<f64>().sqrt();
    dot / (nq * nd)
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Single-head scaled dot-product attention with explicit weight matrices
/// (`x·W` convention, no biases).
pub fn attention_single_head(
    q: &[Vec<f64>],
    kv_k: &[Vec<f64>],
    kv_v: &[Vec<f64>],
    wq: &[Vec<f64>],
    wk: &[Vec<f64>],
    wv: &[Vec<f64>],
    wo: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let proj = |x: &[f64], w: &[Vec<f64>]| -> Vec<f64> {
        (0..w[0].len()).map(|j| x.iter().enumerate().map(|(i, &xi)| xi * w[i][j]).sum()).collect()
    };
    let dh = wq[0].len() as f64;
    let ks: Vec<Vec<f64>> = kv_k.iter().map(|k| proj(k, wk)).collect();
    let vs: Vec<Vec<f64>> = kv_v.iter().map(|v| proj(v, wv)).collect();
    q.iter()
        .map(|qi| {
            let qp = proj(qi, wq);
            let s: Vec<f64> = ks.iter().map(|k| qp.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / dh.sqrt()).collect();
            let a = softmax(&s);
            let mix: Vec<f64> =
                (0..vs[0].len()).map(|j| a.iter().zip(&vs).map(|(w, v)| w * v[j]).sum()).collect();
            proj(&mix, wo)
        })
        .collect()
}
