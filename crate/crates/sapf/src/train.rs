//! Training driver shared by the non-autoregressive model and the
//! autoregressive baseline.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sapf_core::autodiff::Var;
use sapf_core::losses::{LossValues, LossWeights};
use sapf_core::model::{ArBaseline, LossFlags, SaParaformer, TrainInputs};
use sapf_core::params::ParamId;
use sapf_core::speaker::{add_interfering, SpeakerInventory, SpeakerProfile};
use sapf_core::tsot::{serialize, SerializedTarget};
use sapf_core::{Graph, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::dataset::{hex, Dataset};
use crate::error::{io_err, HarnessError, Result};
use crate::eval::EvalReport;
use crate::optim::{clip_global_norm, Adam};
use crate::synth::Session;

/// One session in model-ready form.
#[derive(Clone, Debug)]
pub struct Example {
    pub x: Tensor,
    pub target: SerializedTarget,
    /// Index of each target position's speaker in `inventory`.
    pub speakers: Vec<usize>,
    pub inventory: SpeakerInventory<f64>,
}

impl Example {
    pub fn new(s: &Session, with_separator: bool, cc: usize) -> Result<Self> {
        let profiles = s.inventory.iter().map(|p| p.to_profile()).collect::<sapf_core::Result<Vec<_>>>()?;
        let inventory = SpeakerInventory::new(profiles)?;
        let target = serialize(&s.tokens, with_separator, cc)?;
        let speakers = target
            .speaker_labels
            .iter()
            .map(|l| {
                inventory.index_of(l).ok_or_else(|| {
                    HarnessError::Dataset { path: PathBuf::from(&s.id), msg: format!("speaker {l:?} missing from inventory") }
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { x: s.features.clone(), target, speakers, inventory })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.target.tokens
    }
}

pub fn examples(data: &Dataset, with_separator: bool, cc: usize) -> Result<Vec<Example>> {
    data.sessions.iter().map(|s| Example::new(s, with_separator, cc)).collect()
}

/// Per-step augmentation and seeding.
#[derive(Clone, Debug)]
pub struct StepContext<'a> {
    pub pool: &'a [SpeakerProfile<f64>],
    pub interfering: usize,
    pub fill_to: Option<usize>,
    pub weights: LossWeights,
    pub speaker_weight: f64,
    pub seed: u64,
}

/// Something the shared loop can optimise.
pub trait Trainable {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn save(&self, path: &Path) -> sapf_core::Result<()>;
    /// Called before the first epoch of each stage.
    fn begin_stage(&mut self, _stage: u8, _cfg: &TrainConfig) -> Result<()> {
        Ok(())
    }
    /// Loss of one example plus, when available, its decomposition.
    fn example_loss(
        &self,
        g: &mut Graph<'_>,
        ex: &Example,
        ctx: &StepContext<'_>,
    ) -> Result<(Var, Option<LossValues>, LossFlags)>;
}

impl Trainable for SaParaformer<f64> {
    fn params(&self) -> &ParamStore {
        SaParaformer::params(self)
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        SaParaformer::params_mut(self)
    }

    fn save(&self, path: &Path) -> sapf_core::Result<()> {
        SaParaformer::save(self, path)
    }

    fn begin_stage(&mut self, stage: u8, cfg: &TrainConfig) -> Result<()> {
        let lambda = if stage == 1 { cfg.stage1_sampling_lambda } else { cfg.model.sampling_factor_lambda };
        Ok(self.set_sampling_factor(lambda)?)
    }

    fn example_loss(
        &self,
        g: &mut Graph<'_>,
        ex: &Example,
        ctx: &StepContext<'_>,
    ) -> Result<(Var, Option<LossValues>, LossFlags)> {
        let inventory = add_interfering(&ex.inventory, ctx.pool, ctx.interfering, ctx.seed)?;
        let inp = TrainInputs {
            x: &ex.x,
            tokens: ex.tokens(),
            speakers: &ex.speakers,
            inventory: &inventory,
            fill_to: ctx.fill_to.filter(|&k| k > inventory.len()),
            seed: ctx.seed,
        };
        let (b, _, flags) = self.training_loss(g, &inp, ctx.weights, ctx.speaker_weight)?;
        Ok((b.total, Some(b.values(g)), flags))
    }
}

impl Trainable for ArBaseline<f64> {
    fn params(&self) -> &ParamStore {
        ArBaseline::params(self)
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        ArBaseline::params_mut(self)
    }

    fn save(&self, path: &Path) -> sapf_core::Result<()> {
        ArBaseline::save(self, path)
    }

    fn example_loss(
        &self,
        g: &mut Graph<'_>,
        ex: &Example,
        _: &StepContext<'_>,
    ) -> Result<(Var, Option<LossValues>, LossFlags)> {
        let l = self.training_loss(g, &ex.x, ex.tokens(), &ex.speakers, &ex.inventory)?;
        Ok((l, None, LossFlags::default()))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// 1 for the speaker-agnostic warm start, 2 for the full objective.
    pub stage: u8,
    pub steps: usize,
    pub learning_rate: f64,
    /// Mean total loss per example.
    pub loss: f64,
    /// Mean decomposition, when the model provides one.
    pub parts: Option<LossValues>,
    pub ctc_infeasible: usize,
    pub inter_ctc_infeasible: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: Option<TrainConfig>,
    pub dataset_hash: String,
    pub epochs: Vec<EpochLog>,
    pub stopped_early: bool,
    pub diverged_at_step: Option<usize>,
    pub checkpoint: Option<PathBuf>,
    pub checkpoint_hash: Option<String>,
    pub final_report: Option<EvalReport>,
}

impl RunManifest {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(io_err(path))
    }
}

/// Where a run leaves its files; `None` keeps everything in memory.
#[derive(Clone, Debug, Default)]
pub struct RunOutput {
    pub dir: Option<PathBuf>,
    pub checkpoint_name: String,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

impl RunOutput {
    pub fn to_dir(dir: impl Into<PathBuf>, checkpoint_name: &str) -> Self {
        Self { dir: Some(dir.into()), checkpoint_name: checkpoint_name.into(), verbose: false }
    }

    fn checkpoint(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(&self.checkpoint_name))
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex(&Sha256::digest(bytes)))
}

/// Runs `cfg.stage1_epochs` speaker-agnostic epochs, then up to
/// `cfg.epochs` epochs of the full objective with early stopping on the
/// mean total loss.
pub fn train<M: Trainable>(model: &mut M, cfg: &TrainConfig, data: &Dataset, out: &RunOutput) -> Result<RunManifest> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(HarnessError::Config("training data has no sessions".into()));
    }
    let cc = cfg.model.cc_id();
    let exs = examples(data, cfg.model.use_cc_separator, cc)?;
    let pool = data.pool.iter().map(|p| p.to_profile()).collect::<sapf_core::Result<Vec<_>>>()?;
    // every utterance is padded to the largest inventory any session can reach
    let fill_to = cfg.fill_speakers.then(|| data.max_speakers() + cfg.interfering);
    let mut manifest = RunManifest { config: Some(cfg.clone()), dataset_hash: data.content_hash(), ..Default::default() };
    let mut log = match &out.dir {
        Some(d) => {
            fs::create_dir_all(d).map_err(io_err(d))?;
            let p = d.join("train_log.jsonl");
            Some((File::create(&p).map_err(io_err(&p))?, p))
        }
        None => None,
    };
    let mut opt = Adam::new(model.params(), cfg.learning_rate, cfg.warmup_steps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..exs.len()).collect();
    let mut best = f64::INFINITY;
    let mut since_best = 0;
    let stages = std::iter::repeat_n(1u8, cfg.stage1_epochs).chain(std::iter::repeat_n(2u8, cfg.epochs));
    for (epoch, stage) in stages.enumerate() {
        if epoch == 0 || (stage == 2 && epoch == cfg.stage1_epochs) {
            model.begin_stage(stage, cfg)?;
            best = f64::INFINITY;
            since_best = 0;
        }
        let t0 = Instant::now();
        order.shuffle(&mut rng);
        let mut e = EpochLog { epoch, stage, ..Default::default() };
        let mut parts_sum: Option<LossValues> = None;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Vec<(ParamId, Tensor)> = Vec::new();
            for &i in batch {
                let ctx = StepContext {
                    pool: &pool,
                    interfering: cfg.interfering,
                    fill_to,
                    weights: cfg.loss,
                    speaker_weight: if stage == 1 { 0.0 } else { 1.0 },
                    seed: step_seed(cfg.seed, opt.steps(), i),
                };
                let mut g = Graph::with_params(model.params());
                let (loss, parts, flags) = match model.example_loss(&mut g, &exs[i], &ctx) {
                    Ok(v) => v,
                    Err(HarnessError::Core(sapf_core::Error::Numeric(_))) => {
                        manifest.diverged_at_step = Some(opt.steps());
                        finish(&manifest, out)?;
                        return Err(HarnessError::Diverged { step: opt.steps(), loss: f64::NAN });
                    }
                    Err(e) => return Err(e),
                };
                let value = g.value(loss).item();
                if !value.is_finite() {
                    manifest.diverged_at_step = Some(opt.steps());
                    finish(&manifest, out)?;
                    return Err(HarnessError::Diverged { step: opt.steps(), loss: value });
                }
                e.loss += value;
                e.ctc_infeasible += usize::from(flags.ctc_infeasible);
                e.inter_ctc_infeasible += usize::from(flags.inter_ctc_infeasible);
                if let Some(p) = parts {
                    parts_sum.get_or_insert_with(LossValues::default).add(&p);
                }
                let grads = g.backward(loss)?.into_params();
                merge_grads(&mut acc, grads);
            }
            let scale = 1.0 / batch.len() as f64;
            for (_, t) in acc.iter_mut() {
                t.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
            clip_global_norm(&mut acc, cfg.grad_clip);
            e.learning_rate = opt.update(model.params_mut(), &acc);
            e.steps += 1;
        }
        let n = exs.len() as f64;
        e.loss /= n;
        e.parts = parts_sum.map(|p| p.scaled(1.0 / n));
        e.seconds = t0.elapsed().as_secs_f64();
        if let Some((f, p)) = log.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&e)?).map_err(io_err(p.as_path()))?;
        }
        if out.verbose {
            eprintln!("epoch {:3} stage {} loss {:.4} lr {:.2e} ({:.1}s)", e.epoch, e.stage, e.loss, e.learning_rate, e.seconds);
        }
        if let Some(path) = out.checkpoint() {
            model.save(&path)?;
        }
        let loss = e.loss;
        manifest.epochs.push(e);
        if stage == 2 {
            if loss < best {
                best = loss;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    manifest.stopped_early = true;
                    break;
                }
            }
        }
    }
    if let Some(path) = out.checkpoint() {
        manifest.checkpoint_hash = Some(sha256_file(&path)?);
        manifest.checkpoint = Some(path);
    }
    finish(&manifest, out)?;
    Ok(manifest)
}

fn finish(manifest: &RunManifest, out: &RunOutput) -> Result<()> {
    match &out.dir {
        Some(d) => manifest.write(&d.join("run.json")),
        None => Ok(()),
    }
}

fn step_seed(seed: u64, step: usize, example: usize) -> u64 {
    seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ ((step as u64) << 20) ^ example as u64
}

fn merge_grads(acc: &mut Vec<(ParamId, Tensor)>, grads: Vec<(ParamId, Tensor)>) {
    for (id, g) in grads {
        match acc.iter_mut().find(|(i, _)| *i == id) {
            Some((_, t)) => t.add_assign(&g),
            None => acc.push((id, g)),
        }
    }
}

/// Mean teacher-forced cross-entropy over `data` (no glancing, genuine
/// speakers only).
pub fn validation_ce(model: &SaParaformer<f64>, data: &Dataset) -> Result<f64> {
    let cfg = model.config();
    let exs = examples(data, cfg.use_cc_separator, cfg.cc_id())?;
    let mut total = 0.0;
    for ex in &exs {
        let logits = model.teacher_forced_logits(&ex.x, ex.tokens().len(), &ex.inventory)?;
        let lp = sapf_core::autodiff::log_softmax_rows(&logits);
        let nll: f64 = ex.tokens().iter().enumerate().map(|(r, &t)| -lp.get(r, t)).sum();
        total += nll / ex.tokens().len() as f64;
    }
    Ok(total / exs.len() as f64)
}
