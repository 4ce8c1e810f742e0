//! Command-line front end.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use forge_core::embedding::{PseudoLabelMap, UtteranceId};
use forge_core::eval::{ari, nmi, score_trials, NmiNormalizer, ScoredTrials};
use forge_core::io::{self, ScoredRow};
use forge_core::lossgate::{fit_gate, GmmFitConfig};
use forge_core::pipeline::{
    embed_features, frame_embeddings, prepare, run_full, run_step2_pseudo_label, run_step3_finetune, RunConfig,
    VerificationMetrics,
};
use forge_core::trainer::{checkpoint_digest, load_checkpoint, save_checkpoint, Checkpoint, ParamBlocks};
use forge_core::{Error, Result};

#[derive(Parser)]
#[command(name = "forge", version, about = "Pseudo-label training and scoring for speaker embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `section.key=value` assignments applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let text = match &self.config {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        let mut pairs = Vec::with_capacity(self.overrides.len());
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::BadConfig(format!("--set expects KEY=VALUE, got {o:?}")))?;
            pairs.push((k.trim(), v.trim()));
        }
        RunConfig::parse_with(&text, &pairs)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the whole pipeline, resuming from `out-dir` if it holds a partial run.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Write the synthetic training and evaluation data of a config.
    Simulate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Cluster an embedding file into pseudo labels.
    Cluster {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long, default_value_t = 0)]
        iteration: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Gated fine-tuning of the pre-trained encoder on a label file.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write embeddings of every utterance.
        #[arg(long)]
        embeddings_out: Option<PathBuf>,
        /// Write the final epoch's per-utterance losses.
        #[arg(long)]
        losses_out: Option<PathBuf>,
    },
    /// Fit the loss gate to per-utterance losses and print the threshold.
    Gate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        losses: PathBuf,
    },
    /// Score a trial list with a checkpoint.
    Score {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// EER and minDCF of a scored trial file, or ARI and NMI of two label files.
    Metrics {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, conflicts_with_all = ["labels", "reference"])]
        scores: Option<PathBuf>,
        #[arg(long, requires = "reference")]
        labels: Option<PathBuf>,
        #[arg(long, requires = "labels")]
        reference: Option<PathBuf>,
    },
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn truth_map(ids: &[UtteranceId], speakers: &[usize]) -> Result<PseudoLabelMap> {
    PseudoLabelMap::compacted(ids, speakers, 0)
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run { config, out_dir } => {
            let cfg = config.load()?;
            let out = run_full(&cfg, &out_dir)?;
            print_json(&serde_json::json!({
                "final_verification": out.summary.final_verification,
                "initial_labels": out.summary.initial_labels,
                "final_labels": out.summary.final_labels,
                "summary": out_dir.join("summary.json"),
            }))
        }
        Command::Simulate { config, out_dir } => {
            let cfg = config.load()?;
            let p = prepare(&cfg)?;
            create_dir(&out_dir)?;
            io::save_features(&p.train.features, &out_dir.join("train.feats"))?;
            io::save_features(&p.eval.dataset.features, &out_dir.join("eval.feats"))?;
            io::save_trials(&p.eval.trials, &out_dir.join("trials.tsv"))?;
            let truth = truth_map(&p.train.truth.ids, &p.train.truth.speakers)?;
            io::save_labels(&truth, &out_dir.join("train_truth.tsv"))?;
            let eval_truth = truth_map(&p.eval.dataset.truth.ids, &p.eval.dataset.truth.speakers)?;
            io::save_labels(&eval_truth, &out_dir.join("eval_truth.tsv"))?;
            print_json(&serde_json::json!({
                "train_utterances": p.train.features.len(),
                "eval_utterances": p.eval.dataset.features.len(),
                "trials": p.eval.trials.len(),
            }))
        }
        Command::Cluster {
            config,
            embeddings,
            iteration,
            out,
        } => {
            let cfg = config.load()?;
            let emb = io::load_embeddings(&embeddings)?;
            let labels = run_step2_pseudo_label(&emb, &cfg, iteration)?;
            io::save_labels(&labels, &out)?;
            print_json(&serde_json::json!({ "utterances": labels.len(), "classes": labels.num_classes() }))
        }
        Command::Train {
            config,
            features,
            labels,
            out,
            embeddings_out,
            losses_out,
        } => {
            let cfg = config.load()?;
            let p = prepare(&cfg)?;
            let feats = io::load_sequences(&features)?;
            let map = io::load_labels(&labels, 0)?;
            let mut result = run_step3_finetune(&feats, &map, &cfg, &p.pretrained, &p.aug, 0)?;
            result.state.net.quantize();
            result.state.class_weights.quantize();
            let ckpt = Checkpoint {
                net: result.state.net.clone(),
                class_weights: Some(result.state.class_weights.clone()),
            };
            save_checkpoint(&ckpt, &out)?;
            if let Some(path) = embeddings_out {
                io::save_embeddings(&embed_features(&result.state.net, &feats)?, &path)?;
            }
            if let Some(path) = losses_out {
                let text: String = feats
                    .ids()
                    .iter()
                    .zip(&result.last.losses)
                    .map(|(id, l)| format!("{id}\t{l:.9e}\n"))
                    .collect();
                io::atomic_write(&path, text.as_bytes())?;
            }
            print_json(&serde_json::json!({
                "checkpoint_digest": checkpoint_digest(&ckpt),
                "epochs": result.epochs,
            }))
        }
        Command::Gate { config, losses } => {
            let cfg = config.load()?;
            let rows = io::load_scalar_tsv(&losses)?;
            let values: Vec<f64> = rows.iter().map(|(_, v)| *v).collect();
            let fit = fit_gate(
                &values,
                &GmmFitConfig {
                    max_iters: cfg.gate.gmm_max_iters,
                    tol: cfg.gate.gmm_tol,
                    seed: cfg.seed,
                },
                cfg.gate.min_separation,
            );
            let unreliable: Vec<&str> = match fit.tau1() {
                Some(t) => rows.iter().filter(|(_, v)| *v > t).map(|(id, _)| id.as_str()).collect(),
                None => Vec::new(),
            };
            print_json(&serde_json::json!({ "fit": fit, "unreliable": unreliable }))
        }
        Command::Score {
            config,
            checkpoint,
            features,
            trials,
            out,
        } => {
            let cfg = config.load()?;
            let net = load_checkpoint(&checkpoint)?.net;
            let feats = io::load_sequences(&features)?;
            let trials = io::load_trials(&trials)?;
            let frames = frame_embeddings(&net, &feats, &cfg.eval)?;
            let scored = score_trials(&trials, &frames)?;
            let rows: Vec<ScoredRow> = trials
                .rows()
                .iter()
                .zip(&scored.scores)
                .map(|(t, &score)| ScoredRow {
                    enroll: t.enroll.clone(),
                    test: t.test.clone(),
                    is_target: t.is_target,
                    score,
                })
                .collect();
            io::atomic_write(&out, io::format_scored(&rows).as_bytes())?;
            print_json(&serde_json::to_value(VerificationMetrics::from_scores(&scored, &cfg.eval.dcf)?)?)
        }
        Command::Metrics {
            config,
            scores,
            labels,
            reference,
        } => {
            let cfg = config.load()?;
            if let Some(path) = scores {
                let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                let rows = io::parse_scored(&text)?;
                let scored = ScoredTrials::new(
                    rows.iter().map(|r| r.is_target).collect(),
                    rows.iter().map(|r| r.score).collect(),
                )?;
                return print_json(&serde_json::to_value(VerificationMetrics::from_scores(&scored, &cfg.eval.dcf)?)?);
            }
            let (Some(a), Some(b)) = (labels, reference) else {
                return Err(Error::BadConfig("metrics needs --scores or --labels with --reference".into()));
            };
            let a = io::load_labels(&a, 0)?;
            let b = io::load_labels(&b, 0)?;
            let ids: Vec<UtteranceId> = b.iter().map(|(id, _)| id.clone()).collect();
            let pa = a.labels_for(&ids)?;
            let pb = b.labels_for(&ids)?;
            let normalizer: NmiNormalizer = cfg.eval.nmi_normalizer;
            let n = nmi(&pa, &pb, normalizer)?;
            print_json(&serde_json::json!({
                "ari": ari(&pa, &pb)?,
                "nmi": n.value,
                "nmi_degenerate": n.degenerate,
            }))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
