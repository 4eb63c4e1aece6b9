//! Batch command-line interface.

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::evalio::{
    evaluate, feature_dims, load_checkpoint, read_examples, read_predictions, save_checkpoint, write_examples,
    write_predictions,
};
use crate::gradcheck::run_all;
use crate::losses::{GroundingKind, LossConfig, RefinementKind};
use crate::trainer::{
    ablate, ablation_csv, example_loss, example_targets, gen_synthetic, predict, train, write_text, AblationGrid,
    AblationRow, SynthConfig, TrainConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

#[derive(Debug, Parser)]
#[command(name = "grounding-loss", version, about = "Grounding losses, toy training and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic JSONL dataset.
    Gen(GenArgs),
    /// Train a grounding head and write per-epoch metrics and a checkpoint.
    Train(TrainArgs),
    /// Train every cell of the loss/hyperparameter grid and write a CSV.
    Ablate(AblateArgs),
    /// Score a prediction file against a dataset.
    Eval(EvalArgs),
    /// Write predictions of a checkpoint for every query of a dataset.
    Predict(PredictArgs),
    /// Evaluate the loss of a checkpoint on a dataset.
    Loss(LossArgs),
    /// Run the finite-difference gradient suites.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Proposals per image.
    #[arg(long, default_value_t = 16)]
    pub k: usize,
    #[arg(long, default_value_t = 8)]
    pub classes: usize,
    #[arg(long, default_value_t = 2000)]
    pub examples: usize,
}

#[derive(Debug, Args, Clone)]
pub struct LossFlags {
    #[arg(long, default_value = "klsem")]
    pub grounding: GroundingKind,
    #[arg(long, default_value = "ciousem")]
    pub refinement: RefinementKind,
    #[arg(long, default_value_t = 0.3)]
    pub eta: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
}

impl LossFlags {
    fn config(&self) -> LossConfig {
        LossConfig {
            grounding: self.grounding,
            refinement: self.refinement,
            eta: self.eta,
            lambda: self.lambda,
            ..LossConfig::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub loss: LossFlags,
    #[arg(long, default_value_t = 9)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub metrics_out: PathBuf,
    #[arg(long)]
    pub ckpt_out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 9)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, value_delimiter = ',', default_values_t = [0.3, 0.4, 0.5])]
    pub eta: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.8, 1.0, 1.4])]
    pub lambda: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub preds: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct LossArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub loss: LossFlags,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExampleLossRecord {
    pub image_id: String,
    pub grounding: f64,
    pub refinement: f64,
    pub total: f64,
    pub fallback_queries: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct LossReport {
    pub config: LossConfig,
    pub examples: Vec<ExampleLossRecord>,
    pub mean_grounding: f64,
    pub mean_refinement: f64,
    pub mean_total: f64,
    pub n_queries: usize,
    pub fallback_queries: usize,
}

/// Per-example and mean losses of `ckpt` on `data`. Examples without queries are skipped.
pub fn loss_report(data: &[crate::evalio::GroundingExample], params: &crate::model::HeadParameters, config: LossConfig) -> Result<LossReport> {
    config.validate()?;
    if let Some(fd) = feature_dims(data)? {
        if fd.text_dim != params.dims.text_dim || fd.visual_dim != params.dims.visual_dim {
            return Err(Error::Schema(format!(
                "dataset features (text {}, visual {}) do not match checkpoint (text {}, visual {})",
                fd.text_dim, fd.visual_dim, params.dims.text_dim, params.dims.visual_dim
            )));
        }
    }
    let mut examples = Vec::new();
    let (mut n_queries, mut fallback) = (0, 0);
    for ex in data.iter().filter(|e| !e.queries.is_empty()) {
        let targets = example_targets(ex, &config)?;
        let (_, out) = example_loss(ex, &targets, params, &config)?;
        let fb = targets.bundles.iter().filter(|b| b.fallback_used).count();
        n_queries += ex.queries.len();
        fallback += fb;
        examples.push(ExampleLossRecord {
            image_id: ex.image_id.clone(),
            grounding: out.grounding_value,
            refinement: out.refinement_value,
            total: out.total,
            fallback_queries: fb,
        });
    }
    let n = examples.len().max(1) as f64;
    let mean = |f: fn(&ExampleLossRecord) -> f64| examples.iter().map(f).sum::<f64>() / n;
    Ok(LossReport {
        config,
        mean_grounding: mean(|e| e.grounding),
        mean_refinement: mean(|e| e.refinement),
        mean_total: mean(|e| e.total),
        examples,
        n_queries,
        fallback_queries: fallback,
    })
}

/// Exit status for a library error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Numerical { .. } => EXIT_NUMERICAL,
        Error::Usage(_) => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}

fn print_json<W: Write, T: Serialize>(out: &mut W, value: &T) -> Result<()> {
    serde_json::to_writer_pretty(&mut *out, value)?;
    writeln!(out)?;
    Ok(())
}

/// Directional comparison of CIoU-Sem against Smooth-L1 over matching cells.
pub fn refinement_observation(rows: &[AblationRow]) -> Option<(f64, f64)> {
    let mean = |kind| {
        let v: Vec<f64> = rows.iter().filter(|r| r.refinement == kind).map(|r| r.val_acc).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    Some((mean(RefinementKind::SmoothL1)?, mean(RefinementKind::CiouSem)?))
}

/// Executes a parsed command, writing reports to `out` and diagnostics to `err`.
pub fn execute<W: Write, E: Write>(cli: Cli, out: &mut W, err: &mut E) -> Result<i32> {
    match cli.command {
        Command::Gen(a) => {
            let cfg = SynthConfig {
                n_examples: a.examples,
                k: a.k,
                n_classes: a.classes,
                seed: a.seed,
                ..SynthConfig::default()
            };
            let data = gen_synthetic(&cfg)?;
            write_examples(&data, &a.out)?;
            writeln!(err, "wrote {} examples to {}", data.len(), a.out.display())?;
        }
        Command::Train(a) => {
            let data = read_examples(&a.data)?;
            let cfg = TrainConfig {
                loss: a.loss.config(),
                epochs: a.epochs,
                lr0: a.lr,
                seed: a.seed,
                ..TrainConfig::default()
            };
            let report = train(&data, &cfg)?;
            write_text(&a.metrics_out, &report.metrics_csv())?;
            save_checkpoint(&report.params, &a.ckpt_out)?;
            writeln!(
                err,
                "val accuracy {:.4}, test accuracy {:.4} ({} train / {} val / {} test)",
                report.val_accuracy, report.test_accuracy, report.n_train, report.n_val, report.n_test
            )?;
        }
        Command::Ablate(a) => {
            let data = read_examples(&a.data)?;
            let base = TrainConfig {
                epochs: a.epochs,
                lr0: a.lr,
                seed: a.seed,
                ..TrainConfig::default()
            };
            let grid = AblationGrid {
                eta: a.eta,
                lambda: a.lambda,
                ..AblationGrid::default()
            };
            let rows = ablate(&data, &base, &grid)?;
            write_text(&a.out, &ablation_csv(&rows))?;
            if let Some((l1, ciou)) = refinement_observation(&rows) {
                writeln!(err, "mean val accuracy: smoothl1 {l1:.4}, ciousem {ciou:.4}")?;
            }
        }
        Command::Eval(a) => {
            let data = read_examples(&a.data)?;
            let preds = read_predictions(&a.preds)?;
            print_json(out, &evaluate(&data, &preds)?)?;
        }
        Command::Predict(a) => {
            let data = read_examples(&a.data)?;
            let params = load_checkpoint(&a.ckpt)?;
            write_predictions(&predict(&data, &params)?, &a.out)?;
        }
        Command::Loss(a) => {
            let data = read_examples(&a.data)?;
            let params = load_checkpoint(&a.ckpt)?;
            print_json(out, &loss_report(&data, &params, a.loss.config())?)?;
        }
        Command::Gradcheck(a) => {
            let report = run_all(a.seed, a.trials)?;
            for s in &report.suites {
                writeln!(
                    err,
                    "{} {:<36} trials {:>4}  max rel err {:.3e}",
                    if s.passed { "PASS" } else { "FAIL" },
                    s.name,
                    s.trials,
                    s.max_rel_error
                )?;
            }
            print_json(out, &report)?;
            return Ok(report.exit_code());
        }
    }
    Ok(EXIT_OK)
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T, W, E>(args: I, out: &mut W, err: &mut E) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
    W: Write,
    E: Write,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> (i32, String, String) {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = run(std::iter::once("grounding-loss").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn missing_subcommand_is_usage() {
        assert_eq!(run_args(&[]).0, EXIT_USAGE);
        assert_eq!(run_args(&["train"]).0, EXIT_USAGE);
        assert_eq!(run_args(&["train", "--data", "x", "--grounding", "mse"]).0, EXIT_USAGE);
    }

    #[test]
    fn help_exits_zero() {
        assert_eq!(run_args(&["--help"]).0, EXIT_OK);
    }

    #[test]
    fn gradcheck_zero_trials() {
        let (code, out, _) = run_args(&["gradcheck", "--trials", "0"]);
        assert_eq!(code, 0);
        assert!(out.contains("\"suites\": []"));
    }

    #[test]
    fn error_codes() {
        let num = Error::Numerical {
            example: 0,
            term: "grounding",
            detail: String::new(),
        };
        assert_eq!(exit_code(&num), EXIT_NUMERICAL);
        assert_eq!(exit_code(&Error::Schema("x".into())), EXIT_FAILURE);
        assert_eq!(exit_code(&Error::Usage("x".into())), EXIT_USAGE);
    }
}
