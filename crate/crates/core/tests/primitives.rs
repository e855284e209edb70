use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sapf_core::autodiff::Var;
use sapf_core::cif::{cif, mae_loss, scale_weights_var, TailPolicy};
use sapf_core::gradcheck::grad_check;
use sapf_core::losses::{ctc_loss, speaker_loss};
use sapf_core::nn::{AttentionConfig, FeedForward, LayerNorm, MultiHeadAttention};
use sapf_core::oracles::{attention_single_head, softmax};
use sapf_core::speaker::{cosine_scores, CosineScores, SpeakerInventory, SpeakerProfile};
use sapf_core::{Graph, ParamStore, Result, Tensor};

const TOL: f64 = 1e-5;

fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(lo..hi)).collect())
}

/// Grad-checks `f` on inputs drawn from [-1, 1]; the output is contracted
/// with fixed random weights so every output element matters.
fn check(name: &str, shapes: &[(usize, usize)], f: impl for<'a> Fn(&mut Graph<'a>, &[Var]) -> Result<Var>) {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 31 + 7);
    let mut ps = ParamStore::new();
    let ids: Vec<_> = shapes
        .iter()
        .enumerate()
        .map(|(i, &(r, c))| ps.register(format!("x{i}"), rand_tensor(&mut rng, r, c, -1.0, 1.0)).unwrap())
        .collect();
    let probe = {
        let mut g = Graph::with_params(&ps);
        let xs: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
        let y = f(&mut g, &xs).unwrap();
        g.shape(y)
    };
    let w = rand_tensor(&mut rng, probe.0, probe.1, -1.0, 1.0);
    let report = grad_check(
        &ps,
        |g| {
            let xs: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
            let y = f(g, &xs)?;
            let c = g.constant(w.clone());
            let p = g.mul(y, c)?;
            Ok(g.sum(p))
        },
        1e-5,
        TOL,
    )
    .unwrap();
    assert!(report.passed(), "{name}: {:?}", report.worst());
}

#[test]
fn elementwise_and_linear_ops() {
    check("matmul", &[(3, 4), (4, 2)], |g, x| g.matmul(x[0], x[1]));
    check("matmul_bt", &[(3, 4), (2, 4)], |g, x| g.matmul_bt(x[0], x[1]));
    check("add", &[(2, 3), (2, 3)], |g, x| g.add(x[0], x[1]));
    check("sub", &[(2, 3), (2, 3)], |g, x| g.sub(x[0], x[1]));
    check("mul", &[(2, 3), (2, 3)], |g, x| g.mul(x[0], x[1]));
    check("add_row", &[(3, 4), (1, 4)], |g, x| g.add_row(x[0], x[1]));
    check("scale", &[(2, 2)], |g, x| Ok(g.scale(x[0], -1.7)));
    check("transpose", &[(2, 5)], |g, x| Ok(g.transpose(x[0])));
    check("gelu", &[(3, 3)], |g, x| Ok(g.gelu(x[0])));
    check("sigmoid", &[(3, 3)], |g, x| Ok(g.sigmoid(x[0])));
    check("abs", &[(3, 3)], |g, x| Ok(g.abs(x[0])));
    check("sum", &[(3, 2)], |g, x| Ok(g.sum(x[0])));
    check("mean", &[(3, 2)], |g, x| Ok(g.mean(x[0])));
}

#[test]
fn normalising_ops() {
    check("softmax", &[(3, 5)], |g, x| g.softmax(x[0]));
    check("log_softmax", &[(3, 5)], |g, x| g.log_softmax(x[0]));
    check("layer_norm", &[(3, 6), (1, 6), (1, 6)], |g, x| g.layer_norm(x[0], x[1], x[2]));
}

#[test]
fn indexing_ops() {
    check("slice_cols", &[(3, 6)], |g, x| g.slice_cols(x[0], 2, 3));
    check("concat_cols", &[(3, 2), (3, 4)], |g, x| g.concat_cols(&[x[0], x[1]]));
    check("gather_rows", &[(4, 3)], |g, x| g.gather_rows(x[0], &[2, 0, 2, 3]));
    check("mix_rows", &[(3, 2), (3, 2)], |g, x| g.mix_rows(x[0], x[1], &[true, false, true]));
    check("pick", &[(3, 4)], |g, x| g.pick(x[0], &[3, 0, 1]));
    check("pad_cols", &[(2, 3)], |g, x| g.pad_cols(x[0], &Tensor::matrix(2, 2, vec![0.1, -0.2, 0.3, 0.4])));
}

#[test]
fn model_specific_ops() {
    check("cif", &[(6, 3), (6, 1)], |g, x| {
        let a = g.sigmoid(x[1]);
        Ok(cif(g, x[0], a, 1.0, TailPolicy::Drop)?.0)
    });
    check("scale_weights", &[(5, 1)], |g, x| {
        let a = g.sigmoid(x[0]);
        scale_weights_var(g, a, 4, 1.0)
    });
    check("mae", &[(5, 1)], |g, x| {
        let a = g.sigmoid(x[0]);
        mae_loss(g, a, 4)
    });
    check("ctc", &[(5, 4)], |g, x| Ok(ctc_loss(g, x[0], &[0, 2, 2])?.var().unwrap()));
    let inv = SpeakerInventory::new(vec![
        SpeakerProfile::new("a", vec![0.3, -0.5, 0.8]).unwrap(),
        SpeakerProfile::new("b", vec![-0.1, 0.9, 0.2]).unwrap(),
    ])
    .unwrap();
    check("cosine", &[(4, 3)], |g, x| Ok(cosine_scores(g, x[0], &inv)?.b));
    check("speaker_loss", &[(2, 3)], |g, x| speaker_loss(g, CosineScores { b: x[0], genuine: 3, total: 3 }, &[2, 0]));
}

#[test]
fn transformer_blocks() {
    let cfg = AttentionConfig { model_dim: 4, num_heads: 2, ff_dim: 6 };
    let mut ps = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mha = MultiHeadAttention::new(&mut ps, "mha", cfg, &mut rng).unwrap();
    let ff = FeedForward::new(&mut ps, "ff", cfg, &mut rng).unwrap();
    let ln = LayerNorm::new(&mut ps, "ln", 4).unwrap();
    let q = ps.register("q", rand_tensor(&mut rng, 3, 4, -1.0, 1.0)).unwrap();
    let k = ps.register("k", rand_tensor(&mut rng, 5, 4, -1.0, 1.0)).unwrap();
    let v = ps.register("v", rand_tensor(&mut rng, 5, 4, -1.0, 1.0)).unwrap();
    let w = rand_tensor(&mut rng, 3, 4, -1.0, 1.0);
    // two layers: attention with distinct key/value sources, then LN + FF
    let report = grad_check(
        &ps,
        |g| {
            let (qv, kv, vv) = (g.param(q), g.param(k), g.param(v));
            let a = mha.forward(g, qv, kv, vv, None)?;
            let x = g.add(qv, a)?;
            let n = ln.forward(g, x)?;
            let f = ff.forward(g, n)?;
            let y = g.add(x, f)?;
            let c = g.constant(w.clone());
            let p = g.mul(y, c)?;
            Ok(g.sum(p))
        },
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.worst());
}

#[test]
fn attention_matches_scalar_oracle_and_collapses_on_one_key() {
    let cfg = AttentionConfig { model_dim: 2, num_heads: 1, ff_dim: 2 };
    let mut ps = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mha = MultiHeadAttention::new(&mut ps, "m", cfg, &mut rng).unwrap();
    let ws = [
        vec![vec![1.0, 0.5], vec![-0.3, 0.8]],
        vec![vec![0.2, -1.0], vec![0.7, 0.1]],
        vec![vec![0.9, 0.0], vec![0.4, -0.6]],
        vec![vec![1.0, 0.3], vec![-0.2, 0.5]],
    ];
    for (lin, w) in [&mha.wq, &mha.wk, &mha.wv, &mha.wo].iter().zip(&ws) {
        *ps.get_mut(lin.weight) = Tensor::from_rows(w);
    }
    let q = vec![vec![0.5, -1.0], vec![1.5, 0.25]];
    let kv = vec![vec![0.1, 0.2], vec![-0.7, 1.1]];
    let oracle = attention_single_head(&q, &kv, &kv, &ws[0], &ws[1], &ws[2], &ws[3]);
    let mut g = Graph::with_params(&ps);
    let qv = g.constant(Tensor::from_rows(&q));
    let kvv = g.constant(Tensor::from_rows(&kv));
    let out = mha.forward(&mut g, qv, kvv, kvv, None).unwrap();
    for (r, row) in oracle.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            assert!((g.value(out).get(r, c) - v).abs() < 1e-12);
        }
    }
    // joint permutation of keys and values leaves the output unchanged
    let perm: Vec<Vec<f64>> = kv.iter().rev().cloned().collect();
    let pv = g.constant(Tensor::from_rows(&perm));
    let out2 = mha.forward(&mut g, qv, pv, pv, None).unwrap();
    assert!(g.value(out).max_abs_diff(g.value(out2)) < 1e-12);
    // a single key: every query gets the projected value
    let one = g.constant(Tensor::from_rows(&[vec![0.3, -0.4]]));
    let out3 = mha.forward(&mut g, qv, one, one, None).unwrap();
    let vproj = attention_single_head(&[vec![0.0, 0.0]], &[vec![0.3, -0.4]], &[vec![0.3, -0.4]], &ws[0], &ws[1], &ws[2], &ws[3]);
    for r in 0..2 {
        for c in 0..2 {
            assert!((g.value(out3).get(r, c) - vproj[0][c]).abs() < 1e-12);
        }
    }
}

#[test]
fn layer_norm_and_softmax_values() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 4.0, 4.0]));
    let gain = g.constant(Tensor::full(1, 3, 1.0));
    let bias = g.constant(Tensor::zeros(1, 3));
    let y = g.layer_norm(x, gain, bias).unwrap();
    let s = (2.0 / 3.0 + 1e-5f64).sqrt();
    let expect = [-1.0 / s, 0.0, 1.0 / s];
    for c in 0..3 {
        assert!((g.value(y).get(0, c) - expect[c]).abs() < 1e-12);
        assert_eq!(g.value(y).get(1, c), 0.0);
    }
    let z = g.constant(Tensor::matrix(3, 4, vec![0.0, 0.0, 0.0, 0.0, 100.0, 0.0, 0.0, 0.0, 0.9, 0.1, -0.2, 3.0]));
    let p = g.softmax(z).unwrap();
    assert!(g.value(p).row(0).iter().all(|&v| (v - 0.25).abs() < 1e-15));
    assert!((g.value(p).get(1, 0) - 1.0).abs() < 1e-10);
    let o = softmax(&[0.9, 0.1, -0.2, 3.0]);
    for c in 0..4 {
        assert!((g.value(p).get(2, c) - o[c]).abs() < 1e-15);
    }
    for r in 0..3 {
        let row = g.value(p).row(r);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(row.iter().all(|&v| v > 0.0));
    }
}

#[test]
fn identity_matmul() {
    let m = Tensor::matrix(2, 2, vec![0.3, -1.0, 2.5, 4.0]);
    assert_eq!(Tensor::identity(2).matmul(&m).unwrap(), m);
}
