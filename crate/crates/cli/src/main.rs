//! `cobert`: corpus synthesis, k-means quantization, the four training
//! modes, and evaluation reports, glued by manifests and run directories.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration/usage error.

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};
use cobert_cli::pipeline::{
    cmd_eval_ablation, cmd_eval_probe, cmd_eval_quality, cmd_gen_corpus, cmd_quantize, cmd_train,
    LayerSel, QuantizeArgs, TrainMode, UsageError,
};

#[derive(Parser)]
#[command(name = "cobert", version, about = "code-distillation speech pretraining pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize an aligned frames/phones corpus with a manifest.
    GenCorpus {
        /// Key=value config file (defaults apply when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory (refused if non-empty without --force).
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's seed key.
        #[arg(long)]
        seed: Option<u64>,
        /// Overwrite a non-empty --out.
        #[arg(long)]
        force: bool,
    },
    /// Fit a k-means codebook and write per-utterance code files.
    Quantize {
        /// Corpus manifest to quantize.
        #[arg(long)]
        manifest: PathBuf,
        /// Codebook size.
        #[arg(long, alias = "K")]
        k: usize,
        /// Feature source: `mfcc` (manifest frames) or `model:<layer>`
        /// (1-based encoder layer of --checkpoint).
        #[arg(long, default_value = "mfcc")]
        layer: String,
        /// Checkpoint directory for model-layer extraction.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output directory (codebook, codes, updated manifest).
        #[arg(long)]
        out: PathBuf,
        /// Seed for centroid initialization.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Iteration cap for Lloyd's algorithm.
        #[arg(long, default_value_t = 100)]
        max_iter: usize,
        /// Relative inertia-improvement stopping threshold.
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
        /// Overwrite a non-empty --out.
        #[arg(long)]
        force: bool,
    },
    /// Train one model: teacher1 | teacher2 | hubert-like | cobert.
    Train {
        /// Training mode.
        #[arg(long)]
        mode: String,
        /// Key=value config file (defaults apply when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run directory (config.snapshot, checkpoints/, metrics.log).
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's seed key.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue the run in --out from its latest checkpoint.
        #[arg(long)]
        resume: bool,
        /// Overwrite a non-empty --out.
        #[arg(long)]
        force: bool,
    },
    /// Evaluate artifacts: quality | probe | ablation.
    Eval {
        /// Report kind.
        #[arg(long)]
        what: String,
        /// Corpus manifest (quality needs codes filled in).
        #[arg(long)]
        manifest: PathBuf,
        /// Speech-model checkpoint (probe only).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Key=value config file (ablation only).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Model label for the report rows.
        #[arg(long, default_value = "codes")]
        model: String,
        /// Feature label for the report rows.
        #[arg(long, default_value = "manifest")]
        feature: String,
        /// Report path (quality/probe) or run directory (ablation).
        #[arg(long)]
        out: PathBuf,
        /// Probe/ablation seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overwrite an existing --out.
        #[arg(long)]
        force: bool,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenCorpus { config, out, seed, force } => {
            cmd_gen_corpus(config.as_deref(), &out, seed, force)
        }
        Cmd::Quantize { manifest, k, layer, checkpoint, out, seed, max_iter, tol, force } => {
            let layer = LayerSel::parse(&layer)?;
            cmd_quantize(&QuantizeArgs {
                manifest: &manifest,
                k,
                layer,
                checkpoint: checkpoint.as_deref(),
                out: &out,
                seed,
                max_iter,
                tol,
                force,
            })
        }
        Cmd::Train { mode, config, out, seed, resume, force } => {
            let mode = TrainMode::parse(&mode)?;
            cmd_train(mode, config.as_deref(), &out, seed, resume, force)
        }
        Cmd::Eval { what, manifest, checkpoint, config, model, feature, out, seed, force } => {
            match what.as_str() {
                "quality" => cmd_eval_quality(&manifest, &model, &feature, &out, force),
                "probe" => {
                    let cp = checkpoint.as_deref().ok_or_else(|| {
                        anyhow::Error::new(UsageError(
                            "eval --what probe requires --checkpoint <dir>".into(),
                        ))
                    })?;
                    cmd_eval_probe(&manifest, cp, &model, &out, seed.unwrap_or(0), force)
                }
                "ablation" => cmd_eval_ablation(&manifest, config.as_deref(), &out, seed, force),
                other => Err(anyhow::Error::new(UsageError(format!(
                    "--what {other}: expected quality | probe | ablation"
                )))),
            }
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        let code = if e.downcast_ref::<UsageError>().is_some() { 2 } else { 1 };
        std::process::exit(code);
    }
}
