//! Glancing sampler: swap some acoustic embeddings for ground-truth token
//! embeddings, more of them the worse the first pass was.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::metrics::edit_align;
use crate::tensor::Scalar;

/// `min(N, ⌈λ·d⌉)`.
pub fn replacement_count(n: usize, lambda: f64, distance: usize) -> usize {
    let raw = (lambda * distance as f64).ceil();
    if raw <= 0.0 {
        0
    } else {
        (raw as usize).min(n)
    }
}

/// Positions (sorted) to replace, uniform without replacement.
pub fn replacement_positions(n: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, n, count.min(n)).into_vec();
    idx.sort_unstable();
    idx
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleInfo {
    pub distance: usize,
    pub replaced: Vec<usize>,
}

/// Returns `E_s` (`N×d`): rows of `e_a` at the chosen positions are replaced
/// by the embeddings of `y_true`.
pub fn glm_sample<T: Scalar>(
    g: &mut Graph<'_, T>,
    e_a: Var,
    y_true: &[usize],
    y_first: &[usize],
    token_embed: Var,
    lambda: f64,
    seed: u64,
) -> Result<(Var, SampleInfo)> {
    let n = g.shape(e_a).0;
    if y_true.len() != n {
        return Err(Error::Shape(format!("{n} acoustic embeddings for {} target tokens", y_true.len())));
    }
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("sampling factor must be non-negative, got {lambda}")));
    }
    let distance = edit_align(y_true, y_first).errors();
    let count = replacement_count(n, lambda, distance);
    if count == 0 {
        return Ok((e_a, SampleInfo { distance, replaced: Vec::new() }));
    }
    let replaced = replacement_positions(n, count, seed);
    let mut take = vec![false; n];
    for &i in &replaced {
        take[i] = true;
    }
    let e_t = g.gather_rows(token_embed, y_true)?;
    let e_s = g.mix_rows(e_a, e_t, &take)?;
    Ok((e_s, SampleInfo { distance, replaced }))
}
