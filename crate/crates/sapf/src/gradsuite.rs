//! Finite-difference checks of every differentiable operation and of the
//! full training loss on a tiny model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sapf_core::autodiff::Var;
use sapf_core::cif::{cif, mae_loss, scale_weights_var, TailPolicy};
use sapf_core::gradcheck::{grad_check, GradCheckReport};
use sapf_core::losses::{ce_loss, ctc_loss, speaker_loss, LossWeights};
use sapf_core::model::{ArBaseline, ModelConfig, SaParaformer, TrainInputs};
use sapf_core::nn::{AttentionConfig, FeedForward, LayerNorm, MultiHeadAttention};
use sapf_core::speaker::{cosine_scores, CosineScores, SpeakerInventory, SpeakerProfile};
use sapf_core::{Graph, ParamStore, Tensor};
use serde::Serialize;

use crate::error::Result;

pub const STEP: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-5;
pub const MODEL_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct SuiteEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl SuiteEntry {
    fn from_report(name: &str, r: &GradCheckReport) -> Self {
        Self { name: name.into(), max_rel_err: r.max_rel_err(), tolerance: r.tolerance, passed: r.passed() }
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
}

type OpFn = dyn for<'a> Fn(&mut Graph<'a>, &[Var]) -> sapf_core::Result<Var>;

/// Checks `f` with inputs drawn from [-1, 1]; the output is contracted with
/// fixed random weights so every element carries gradient.
fn check_op(name: &str, shapes: &[(usize, usize)], f: &OpFn, seed: u64) -> Result<SuiteEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamStore::new();
    let ids = shapes
        .iter()
        .enumerate()
        .map(|(i, &(r, c))| ps.register(format!("{name}.x{i}"), uniform(&mut rng, r, c)))
        .collect::<sapf_core::Result<Vec<_>>>()?;
    let shape = {
        let mut g = Graph::with_params(&ps);
        let xs: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
        let y = f(&mut g, &xs)?;
        g.shape(y)
    };
    let w = uniform(&mut rng, shape.0, shape.1);
    let r = grad_check(
        &ps,
        |g| {
            let xs: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
            let y = f(g, &xs)?;
            let c = g.constant(w.clone());
            let p = g.mul(y, c)?;
            Ok(g.sum(p))
        },
        STEP,
        OP_TOLERANCE,
    )?;
    Ok(SuiteEntry::from_report(name, &r))
}

fn profiles(k: usize, d: usize, seed: u64) -> SpeakerInventory<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = (0..k)
        .map(|i| SpeakerProfile::new(format!("s{i}"), (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()))
        .collect::<sapf_core::Result<Vec<_>>>()
        .expect("random profiles are non-zero");
    SpeakerInventory::new(p).expect("non-empty inventory")
}

/// Two-layer, width-8 configuration used for the whole-model checks.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        input_dim: 6,
        encoder_layers: 2,
        decoder_layers: 2,
        speaker_encoder_layers: 2,
        attn: AttentionConfig { model_dim: 8, num_heads: 2, ff_dim: 16 },
        vocab_size: 6,
        d_spk: 4,
        inter_ctc_layer: 1,
        sampling_factor_lambda: 1.1,
        use_cc_separator: false,
        tail_fire_fraction: 0.5,
    }
}

/// Every check, in a fixed order.
pub fn run(seed: u64) -> Result<Vec<SuiteEntry>> {
    let inv = profiles(3, 4, seed ^ 11);
    let ops: Vec<(&str, Vec<(usize, usize)>, Box<OpFn>)> = vec![
        ("matmul", vec![(3, 4), (4, 2)], Box::new(|g, x| g.matmul(x[0], x[1]))),
        ("matmul_bt", vec![(3, 4), (2, 4)], Box::new(|g, x| g.matmul_bt(x[0], x[1]))),
        ("add", vec![(2, 3), (2, 3)], Box::new(|g, x| g.add(x[0], x[1]))),
        ("sub", vec![(2, 3), (2, 3)], Box::new(|g, x| g.sub(x[0], x[1]))),
        ("mul", vec![(2, 3), (2, 3)], Box::new(|g, x| g.mul(x[0], x[1]))),
        ("add_row", vec![(3, 4), (1, 4)], Box::new(|g, x| g.add_row(x[0], x[1]))),
        ("scale", vec![(2, 2)], Box::new(|g, x| Ok(g.scale(x[0], -1.7)))),
        ("transpose", vec![(2, 5)], Box::new(|g, x| Ok(g.transpose(x[0])))),
        ("gelu", vec![(3, 3)], Box::new(|g, x| Ok(g.gelu(x[0])))),
        ("sigmoid", vec![(3, 3)], Box::new(|g, x| Ok(g.sigmoid(x[0])))),
        ("abs", vec![(3, 3)], Box::new(|g, x| Ok(g.abs(x[0])))),
        ("sum", vec![(3, 2)], Box::new(|g, x| Ok(g.sum(x[0])))),
        ("mean", vec![(3, 2)], Box::new(|g, x| Ok(g.mean(x[0])))),
        ("softmax", vec![(3, 5)], Box::new(|g, x| g.softmax(x[0]))),
        ("log_softmax", vec![(3, 5)], Box::new(|g, x| g.log_softmax(x[0]))),
        ("layer_norm", vec![(3, 6), (1, 6), (1, 6)], Box::new(|g, x| g.layer_norm(x[0], x[1], x[2]))),
        ("slice_cols", vec![(3, 6)], Box::new(|g, x| g.slice_cols(x[0], 2, 3))),
        ("concat_cols", vec![(3, 2), (3, 4)], Box::new(|g, x| g.concat_cols(&[x[0], x[1]]))),
        ("gather_rows", vec![(4, 3)], Box::new(|g, x| g.gather_rows(x[0], &[2, 0, 2, 3]))),
        ("mix_rows", vec![(3, 2), (3, 2)], Box::new(|g, x| g.mix_rows(x[0], x[1], &[true, false, true]))),
        ("pick", vec![(3, 4)], Box::new(|g, x| g.pick(x[0], &[3, 0, 1]))),
        (
            "pad_cols",
            vec![(2, 3)],
            Box::new(|g, x| g.pad_cols(x[0], &Tensor::matrix(2, 2, vec![0.1, -0.2, 0.3, 0.4]))),
        ),
        (
            "cif",
            vec![(6, 3), (6, 1)],
            Box::new(|g, x| {
                let a = g.sigmoid(x[1]);
                Ok(cif(g, x[0], a, 1.0, TailPolicy::Drop)?.0)
            }),
        ),
        (
            "scale_weights",
            vec![(5, 1)],
            Box::new(|g, x| {
                let a = g.sigmoid(x[0]);
                scale_weights_var(g, a, 4, 1.0)
            }),
        ),
        (
            "mae",
            vec![(5, 1)],
            Box::new(|g, x| {
                let a = g.sigmoid(x[0]);
                mae_loss(g, a, 4)
            }),
        ),
        ("ctc", vec![(5, 4)], Box::new(|g, x| Ok(ctc_loss(g, x[0], &[0, 2, 2])?.or_penalty(g)))),
        ("ce", vec![(4, 5)], Box::new(|g, x| ce_loss(g, x[0], &[4, 0, 2, 2]))),
        ("cosine", vec![(4, 4)], Box::new(move |g, x| Ok(cosine_scores(g, x[0], &inv)?.b))),
        (
            "speaker_loss",
            vec![(2, 3)],
            Box::new(|g, x| speaker_loss(g, CosineScores { b: x[0], genuine: 3, total: 3 }, &[2, 0])),
        ),
    ];
    let mut out = Vec::new();
    for (i, (name, shapes, f)) in ops.iter().enumerate() {
        out.push(check_op(name, shapes, f.as_ref(), seed.wrapping_add(i as u64))?);
    }
    out.push(blocks(seed)?);
    out.extend(models(seed)?);
    Ok(out)
}

/// Attention with distinct query/key/value sources followed by LN and FF.
fn blocks(seed: u64) -> Result<SuiteEntry> {
    let cfg = AttentionConfig { model_dim: 4, num_heads: 2, ff_dim: 6 };
    let mut ps = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB10C);
    let mha = MultiHeadAttention::new(&mut ps, "mha", cfg, &mut rng)?;
    let ff = FeedForward::new(&mut ps, "ff", cfg, &mut rng)?;
    let ln = LayerNorm::new(&mut ps, "ln", 4)?;
    let q = ps.register("q", uniform(&mut rng, 3, 4))?;
    let k = ps.register("k", uniform(&mut rng, 5, 4))?;
    let v = ps.register("v", uniform(&mut rng, 5, 4))?;
    let w = uniform(&mut rng, 3, 4);
    let r = grad_check(
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
        STEP,
        MODEL_TOLERANCE,
    )?;
    Ok(SuiteEntry::from_report("attention+ff block", &r))
}

fn models(seed: u64) -> Result<Vec<SuiteEntry>> {
    let cfg = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x70DE1);
    let x = uniform(&mut rng, 9, cfg.input_dim);
    let inv = profiles(3, cfg.d_spk, seed ^ 5);
    let tokens = [1, 3, 0, 2];
    let speakers = [0, 1, 1, 2];
    let nar = SaParaformer::<f64>::new(cfg.clone(), seed)?;
    let inp = TrainInputs { x: &x, tokens: &tokens, speakers: &speakers, inventory: &inv, fill_to: Some(5), seed };
    let r = grad_check(
        nar.params(),
        |g| Ok(nar.training_loss(g, &inp, LossWeights::default(), 1.0)?.0.total),
        STEP,
        MODEL_TOLERANCE,
    )?;
    let ar = ArBaseline::<f64>::new(cfg, seed)?;
    let r2 = grad_check(ar.params(), |g| ar.training_loss(g, &x, &tokens, &speakers, &inv), STEP, MODEL_TOLERANCE)?;
    Ok(vec![SuiteEntry::from_report("composite training loss", &r), SuiteEntry::from_report("autoregressive loss", &r2)])
}
