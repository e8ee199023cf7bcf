//! `datwep` command line: train, eval, gradcheck, synth, tokenize.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use datwep::curriculum::{SchedulerConfig, SigmoidVariant, UpdateCadence};
use datwep::data::{generate_synthetic, write_floodnet_dir, SynthConfig};
use datwep::loss::AlphaConvention;
use datwep::metrics::QuestionType;
use datwep::tape::NormMode;
use datwep::text::{tokenize, Vocabulary, EOS, EOW, PAD, SOS, SOW};
use datwep::trainer::{
    evaluate_dir, train_with_progress, DataSource, EvalMetrics, OptimSettings, RunConfig,
};
use datwep::verify::{run_scope, CheckScope};

#[derive(Parser)]
#[command(
    name = "datwep",
    version,
    about = "Multitask segmentation+VQA trainer with dynamic task and class-weight curriculum"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on synthetic or directory data and write run artifacts
    Train(TrainArgs),
    /// Evaluate a checkpoint against a dataset directory
    Eval(EvalArgs),
    /// Run the finite-difference verification suites
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic dataset directory
    Synth(SynthArgs),
    /// Tokenize a question and print the token stream
    Tokenize(TokenizeArgs),
}

/// Values accepted by `--data`: the literal `synthetic` or a directory.
fn parse_data_source(value: &str, n_images: usize, seg_classes: usize) -> DataSource {
    if value == "synthetic" {
        DataSource::Synthetic { n_images }
    } else {
        DataSource::Directory { path: PathBuf::from(value), n_seg_classes: seg_classes }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// TOML config file; command-line flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// `synthetic` or a dataset directory path
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Images per batch
    #[arg(long)]
    batch_size: Option<usize>,
    /// Synthetic dataset size (with --data synthetic)
    #[arg(long)]
    n_images: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    base_channels: Option<usize>,
    /// Segmentation class count of a directory dataset
    #[arg(long)]
    seg_classes: Option<usize>,
    /// vqa-weighted | seg-weighted
    #[arg(long)]
    alpha_convention: Option<String>,
    /// standard | negated-arg
    #[arg(long)]
    sigmoid_variant: Option<String>,
    #[arg(long)]
    eps_datap: Option<f64>,
    #[arg(long)]
    eps_dawep: Option<f64>,
    #[arg(long)]
    lambda_reg: Option<f64>,
    /// per-batch | per-epoch-mean
    #[arg(long)]
    cadence: Option<String>,
    /// fixed-unit | batch-stats
    #[arg(long)]
    norm_mode: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_factor: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Optional global model-gradient norm clip (off by default)
    #[arg(long)]
    clip_grad_norm: Option<f64>,
    /// Output directory for checkpoint, CSVs, and plots
    #[arg(long)]
    out: Option<PathBuf>,
}

/// The TOML config file mirrors the train flags, all optional.
#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    data: Option<String>,
    epochs: Option<usize>,
    seed: Option<u64>,
    batch_size: Option<usize>,
    n_images: Option<usize>,
    image_size: Option<usize>,
    base_channels: Option<usize>,
    seg_classes: Option<usize>,
    alpha_convention: Option<String>,
    sigmoid_variant: Option<String>,
    eps_datap: Option<f64>,
    eps_dawep: Option<f64>,
    lambda_reg: Option<f64>,
    cadence: Option<String>,
    norm_mode: Option<String>,
    lr: Option<f64>,
    lr_factor: Option<f64>,
    weight_decay: Option<f64>,
    clip_grad_norm: Option<f64>,
    out: Option<PathBuf>,
}

fn parse_enum<T>(what: &str, value: &str, table: &[(&str, T)]) -> Result<T, String>
where
    T: Copy,
{
    table
        .iter()
        .find(|(name, _)| *name == value)
        .map(|(_, v)| *v)
        .ok_or_else(|| {
            let options: Vec<&str> = table.iter().map(|(n, _)| *n).collect();
            format!("invalid {what} {value:?}; expected one of {options:?}")
        })
}

fn resolve_run_config(args: &TrainArgs) -> Result<RunConfig, String> {
    let file: FileConfig = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
            toml::from_str(&text).map_err(|e| format!("bad config {}: {e}", path.display()))?
        }
        None => FileConfig::default(),
    };

    // defaults <- file <- flags
    macro_rules! pick {
        ($field:ident, $default:expr) => {
            args.$field.clone().or(file.$field.clone()).unwrap_or($default)
        };
    }

    let n_images = pick!(n_images, 256);
    let seg_classes = pick!(seg_classes, 9);
    let data_str = pick!(data, "synthetic".to_string());

    let mut scheduler = SchedulerConfig {
        eps_datap: pick!(eps_datap, 0.002),
        eps_dawep: pick!(eps_dawep, 0.001),
        lambda_reg: pick!(lambda_reg, 0.75),
        ..SchedulerConfig::default()
    };
    if let Some(v) = args.alpha_convention.clone().or(file.alpha_convention.clone()) {
        scheduler.alpha_convention = parse_enum(
            "alpha convention",
            &v,
            &[
                ("vqa-weighted", AlphaConvention::VqaWeighted),
                ("seg-weighted", AlphaConvention::SegWeighted),
            ],
        )?;
    }
    if let Some(v) = args.sigmoid_variant.clone().or(file.sigmoid_variant.clone()) {
        scheduler.sigmoid_variant = parse_enum(
            "sigmoid variant",
            &v,
            &[
                ("standard", SigmoidVariant::Standard),
                ("negated-arg", SigmoidVariant::NegatedArg),
                ("paper-literal", SigmoidVariant::NegatedArg),
            ],
        )?;
    }
    if let Some(v) = args.cadence.clone().or(file.cadence.clone()) {
        scheduler.cadence = parse_enum(
            "cadence",
            &v,
            &[
                ("per-batch", UpdateCadence::PerBatch),
                ("per-epoch-mean", UpdateCadence::PerEpochMean),
            ],
        )?;
    }
    let norm_mode = match args.norm_mode.clone().or(file.norm_mode.clone()) {
        Some(v) => parse_enum(
            "norm mode",
            &v,
            &[("fixed-unit", NormMode::FixedUnit), ("batch-stats", NormMode::BatchStats)],
        )?,
        None => NormMode::FixedUnit,
    };

    Ok(RunConfig {
        data: parse_data_source(&data_str, n_images, seg_classes),
        out_dir: pick!(out, PathBuf::from("runs/default")),
        epochs: pick!(epochs, 25),
        batch_size: pick!(batch_size, 2),
        seed: pick!(seed, 0),
        image_size: pick!(image_size, 32),
        base_channels: pick!(base_channels, 8),
        norm_mode,
        scheduler,
        optim: OptimSettings {
            base_lr: pick!(lr, 1e-3),
            weight_decay: pick!(weight_decay, 0.01),
            lr_factor: pick!(lr_factor, 0.95),
            lr_step_epochs: 3,
            grad_clip_norm: args.clip_grad_norm.or(file.clip_grad_norm),
        },
    })
}

fn cmd_train(args: &TrainArgs) -> Result<(), String> {
    let config = resolve_run_config(args)?;
    println!("training into {}", config.out_dir.display());
    let outcome = train_with_progress(&config, |row| {
        println!(
            "epoch {:>3}  lr {:.6}  train total {:.4}  val mIoU {:.4}  val acc {:.4}  alpha {:.4}",
            row.epoch,
            row.lr,
            row.train_l_total,
            row.val.miou.mean,
            row.val.accuracy.overall.accuracy(),
            row.alpha
        );
    })
    .map_err(|e| e.to_string())?;
    println!(
        "done: {} parameters, checkpoint at {}",
        outcome.param_count,
        outcome.checkpoint_path.display()
    );
    Ok(())
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory to evaluate against
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// Optional file for the metrics as JSON
    #[arg(long)]
    out: Option<PathBuf>,
}

fn print_eval(metrics: &EvalMetrics, class_names: &[String]) {
    println!("losses: seg {:.6}  vqa {:.6}  total {:.6}", metrics.l_seg, metrics.l_vqa, metrics.l_total);
    println!("mIoU: {:.4}", metrics.miou.mean);
    for (name, iou) in class_names.iter().zip(&metrics.miou.per_class) {
        println!("  {name:<24} {iou:.4}");
    }
    println!("VQA accuracy: {:.4}", metrics.accuracy.overall.accuracy());
    for ty in QuestionType::ALL {
        let tally = metrics.accuracy.for_type(ty);
        if tally.total > 0 {
            println!("  {:<24} {:.4}  ({} questions)", ty.name(), tally.accuracy(), tally.total);
        } else {
            println!("  {:<24} n/a (0 questions)", ty.name());
        }
    }
}

fn cmd_eval(args: &EvalArgs) -> Result<(), String> {
    let (metrics, checkpoint) =
        evaluate_dir(&args.checkpoint, &args.data, args.batch_size).map_err(|e| e.to_string())?;
    print_eval(&metrics, &checkpoint.class_names);
    if let Some(out) = &args.out {
        let json = serde_json::json!({
            "l_seg": metrics.l_seg,
            "l_vqa": metrics.l_vqa,
            "l_total": metrics.l_total,
            "miou": metrics.miou.mean,
            "iou_per_class": checkpoint
                .class_names
                .iter()
                .zip(&metrics.miou.per_class)
                .map(|(n, v)| (n.clone(), *v))
                .collect::<std::collections::BTreeMap<_, _>>(),
            "accuracy": metrics.accuracy.overall.accuracy(),
            "accuracy_per_type": QuestionType::ALL
                .iter()
                .map(|ty| (ty.name().to_string(), metrics.accuracy.for_type(*ty).accuracy()))
                .collect::<std::collections::BTreeMap<_, _>>(),
        });
        std::fs::write(out, serde_json::to_string_pretty(&json).expect("json"))
            .map_err(|e| format!("cannot write {}: {e}", out.display()))?;
    }
    Ok(())
}

#[derive(Args)]
struct GradcheckArgs {
    /// layers | datap | dawep | end2end | all
    #[arg(default_value = "all")]
    scope: String,
    #[arg(long, default_value_t = 20250808)]
    seed: u64,
    /// Randomized cases per check
    #[arg(long, default_value_t = 100)]
    cases: usize,
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<bool, String> {
    let scope: CheckScope = args.scope.parse()?;
    let outcomes = run_scope(scope, args.seed, args.cases);
    let mut all_ok = true;
    for outcome in &outcomes {
        println!("{}", outcome.line());
        all_ok &= outcome.passed();
    }
    println!("{}", if all_ok { "all checks passed" } else { "CHECKS FAILED" });
    Ok(all_ok)
}

#[derive(Args)]
struct SynthArgs {
    /// Number of images
    #[arg(long, default_value_t = 256)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_synth(args: &SynthArgs) -> Result<(), String> {
    let dataset = generate_synthetic::<f64>(&SynthConfig {
        n_images: args.n,
        image_size: args.image_size,
        seed: args.seed,
    });
    write_floodnet_dir(&dataset, &args.out).map_err(|e| e.to_string())?;
    println!(
        "wrote {} images ({} QA pairs, {} answer classes) to {}",
        dataset.samples.len(),
        dataset.total_qa(),
        dataset.n_answer_classes(),
        args.out.display()
    );
    Ok(())
}

#[derive(Args)]
struct TokenizeArgs {
    question: String,
    #[arg(long, default_value_t = 70)]
    l_max: usize,
}

fn token_name(vocab: &Vocabulary, id: u32) -> String {
    match id {
        PAD => "<pad>".to_string(),
        SOS => "<sos>".to_string(),
        EOS => "<eos>".to_string(),
        SOW => "<sow>".to_string(),
        EOW => "<eow>".to_string(),
        other => vocab.char_of(other).map(|c| c.to_string()).unwrap_or_else(|| format!("?{other}")),
    }
}

fn cmd_tokenize(args: &TokenizeArgs) -> Result<(), String> {
    let vocab = Vocabulary::default_charset();
    let seq = tokenize(&args.question, &vocab, args.l_max).map_err(|e| e.to_string())?;
    let shown = &seq.ids()[..seq.true_length()];
    let names: Vec<String> = shown.iter().map(|&id| token_name(&vocab, id)).collect();
    println!("tokens: {}", names.join(" "));
    println!("ids:    {:?}", shown);
    println!("length: {} of {} (rest padded with <pad>)", seq.true_length(), seq.l_max());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(args) => cmd_train(args).map(|()| true),
        Command::Eval(args) => cmd_eval(args).map(|()| true),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Synth(args) => cmd_synth(args).map(|()| true),
        Command::Tokenize(args) => cmd_tokenize(args).map(|()| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::from(2)
        }
    }
}
