use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sapf::bench::{bench_rtf, calibrate_predictor, BenchOptions};
use sapf::config::Config;
use sapf::dataset::Dataset;
use sapf::error::io_err;
use sapf::eval::evaluate;
use sapf::train::{train, validation_ce, RunOutput};
use sapf::{gradsuite, HarnessError, Result};
use sapf_core::model::{ArBaseline, SaParaformer};

/// Speaker-attributed non-autoregressive ASR on synthetic overlapped speech.
#[derive(Debug, Parser)]
#[command(name = "sapf", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, clap::Args)]
struct Common {
    /// Flat TOML config; unspecified keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<Config> {
        let mut c = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        if let Some(s) = self.seed {
            c.seed = s;
        }
        Ok(c)
    }
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Generate `<out>/train` and `<out>/dev` synthetic datasets.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes a checkpoint per epoch, a JSON-lines log and run.json.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
        /// Start from this checkpoint instead of random weights.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Decode a dataset and report SD-CER with insertion/deletion/substitution counts.
    Eval {
        /// Model checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Write the report as JSON here as well as printing it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time NAR against AR decoding over a range of output lengths.
    Bench {
        #[command(flatten)]
        common: Common,
        /// NAR checkpoint; an untrained, length-calibrated model is used when absent.
        #[arg(long, requires = "ar")]
        nar: Option<PathBuf>,
        /// AR checkpoint; an untrained model is used when absent.
        #[arg(long, requires = "nar")]
        ar: Option<PathBuf>,
        /// Comma-separated output lengths.
        #[arg(long, value_delimiter = ',', default_value = "8,16,32,64")]
        lengths: Vec<usize>,
        /// Timed decodes per length.
        #[arg(long, default_value_t = 5)]
        reps: usize,
        /// Write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every operation and the full loss; exits 1 on any failure.
    GradCheck {
        #[command(flatten)]
        common: Common,
        /// Write the results as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(v)?).map_err(io_err(path))
}

fn run(cmd: Cmd) -> Result<bool> {
    match cmd {
        Cmd::GenData { common, out } => {
            let cfg = common.load()?;
            let (train, dev) = Dataset::generate(&cfg)?;
            for (name, ds) in [("train", train), ("dev", dev)] {
                ds.write(&out.join(name))?;
                println!("{name}: {} sessions, {} frames", ds.len(), ds.total_frames());
            }
            let p = out.join("config.toml");
            std::fs::write(&p, cfg.to_toml()).map_err(io_err(&p))?;
            Ok(true)
        }
        Cmd::Train { common, data, out, init } => {
            let cfg = common.load()?;
            let tc = cfg.train_config();
            let ds = Dataset::read(&data)?;
            let mut model = match init {
                Some(p) => SaParaformer::load(&p)?,
                None => SaParaformer::new(tc.model.clone(), cfg.seed)?,
            };
            let run_out = RunOutput { verbose: true, ..RunOutput::to_dir(&out, "model.ckpt") };
            let mut manifest = train(&mut model, &tc, &ds, &run_out)?;
            let report = evaluate(&model, &ds, tc.model.use_cc_separator)?;
            println!("training-set SD-CER {:.2}%  (ins {} del {} sub {})", report.sd_cer.sd_cer, report.edits.ins, report.edits.del, report.edits.sub);
            manifest.final_report = Some(report);
            manifest.write(&out.join("run.json"))?;
            if cfg.train_ar {
                let mut ar = ArBaseline::new(tc.model.clone(), cfg.seed)?;
                let ar_out = RunOutput { verbose: true, ..RunOutput::to_dir(out.join("ar"), "ar.ckpt") };
                train(&mut ar, &tc, &ds, &ar_out)?;
            }
            Ok(true)
        }
        Cmd::Eval { checkpoint, data, out } => {
            let model = SaParaformer::load(&checkpoint)?;
            let ds = Dataset::read(&data)?;
            let report = evaluate(&model, &ds, model.config().use_cc_separator)?;
            let ce = validation_ce(&model, &ds)?;
            println!(
                "sessions {}  SD-CER {:.2}%  ins {} del {} sub {}  CER {:.2}%  CE {:.4}",
                report.sessions,
                report.sd_cer.sd_cer,
                report.edits.ins,
                report.edits.del,
                report.edits.sub,
                report.cer.cer(),
                ce
            );
            if let Some(p) = out {
                write_json(&p, &report)?;
            }
            Ok(true)
        }
        Cmd::Bench { common, nar, ar, lengths, reps, out } => {
            let cfg = common.load()?;
            let opts = BenchOptions { reps, seed: cfg.seed, ..BenchOptions::default() };
            let (nar, ar) = match (nar, ar) {
                (Some(n), Some(a)) => (SaParaformer::load(&n)?, ArBaseline::load(&a)?),
                _ => {
                    let mut n = SaParaformer::new(cfg.model_config(), cfg.seed)?;
                    calibrate_predictor(&mut n, opts.frames_per_token);
                    (n, ArBaseline::new(cfg.model_config(), cfg.seed)?)
                }
            };
            let report = bench_rtf(&nar, &ar, &lengths, &opts)?;
            print!("{}", report.table());
            if let Some(p) = out {
                write_json(&p, &report)?;
            }
            Ok(true)
        }
        Cmd::GradCheck { common, out } => {
            let cfg = common.load()?;
            let entries = gradsuite::run(cfg.seed)?;
            for e in &entries {
                println!("{:<26} max rel err {:.2e}  (tol {:.0e})  {}", e.name, e.max_rel_err, e.tolerance, if e.passed { "ok" } else { "FAIL" });
            }
            if let Some(p) = out {
                write_json(&p, &entries)?;
            }
            Ok(entries.iter().all(|e| e.passed))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            if let HarnessError::Diverged { .. } = e {
                eprintln!("the run record notes the failing step");
            }
            ExitCode::from(1)
        }
    }
}
