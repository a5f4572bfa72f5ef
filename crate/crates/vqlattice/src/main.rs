//! Thin command-line front end over the pipeline functions.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vqlattice::decoder::MergeStrategy;
use vqlattice::model::Variant;
use vqlattice::pipeline::{
    apply_config_overrides, cmd_decode, cmd_eval, cmd_gen_data, cmd_rescore, cmd_train,
    DecodeArgs, EvalArgs, GenDataArgs, RescoreArgs, TrainArgs,
};
use vqlattice::synthdata::SynthTask;

/// Train small sequence transducers and generate merged lattices.
///
/// Exit codes: 0 success, 1 usage error, 2 runtime failure.
#[derive(Parser)]
#[command(name = "vqlattice", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/dev/test datasets.
    GenData(GenDataCli),
    /// Train a model variant on a dataset file.
    Train(TrainCli),
    /// Decode a dataset split, optionally emitting lattices.
    Decode(DecodeCli),
    /// Sweep beam sizes and report WER, oracle WER, and lattice density.
    Eval(EvalCli),
    /// N-gram rescoring over pruned lattices with dev-tuned weight.
    Rescore(RescoreCli),
}

#[derive(Args)]
struct GenDataCli {
    /// Output directory for <split>.data files.
    #[arg(long, default_value = "data")]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 320)]
    train: usize,
    #[arg(long, default_value_t = 120)]
    dev: usize,
    #[arg(long, default_value_t = 200)]
    test: usize,
    /// Gaussian noise level on the one-hot prototypes.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// JSON config file; values in it override the flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainCli {
    /// Training dataset file.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Loss-curve table output path.
    #[arg(long)]
    loss_curve: Option<PathBuf>,
    /// Model variant: baseline, vlc, or vq.
    #[arg(long, value_parser = parse_variant, default_value = "vq")]
    variant: Variant,
    #[arg(long, default_value_t = 17)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    peak_lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// JSON config file; values in it override the flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct DecodeCli {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "decode_out")]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 8)]
    beam: usize,
    /// none, same-label, vq-state, vq-state-nolen, or limited-context:K.
    #[arg(long, value_parser = parse_strategy, default_value = "none")]
    strategy: MergeStrategy,
    #[arg(long, default_value_t = 1.0)]
    u_max_ratio: f64,
    /// Write one lattice file per utterance.
    #[arg(long)]
    lattices: bool,
    #[arg(long, default_value_t = 17)]
    seed: u64,
    /// JSON config file; values in it override the flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvalCli {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "eval_report.txt")]
    out: PathBuf,
    /// Comma-separated beam sizes.
    #[arg(long, default_value = "1,2,4,8,16", value_delimiter = ',')]
    beams: Vec<usize>,
    #[arg(long, value_parser = parse_strategy, default_value = "none")]
    strategy: MergeStrategy,
    #[arg(long, default_value_t = 1.0)]
    u_max_ratio: f64,
    #[arg(long, default_value_t = 17)]
    seed: u64,
    /// JSON config file; values in it override the flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct RescoreCli {
    #[arg(long)]
    model: PathBuf,
    /// Dataset whose references train the n-gram model.
    #[arg(long)]
    lm_corpus: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long, default_value = "rescore_report.txt")]
    out: PathBuf,
    #[arg(long, default_value_t = 2)]
    lm_order: usize,
    #[arg(long, default_value_t = 0.5)]
    lm_k: f64,
    #[arg(long, default_value_t = 8)]
    beam: usize,
    #[arg(long, value_parser = parse_strategy, default_value = "none")]
    strategy: MergeStrategy,
    #[arg(long, default_value_t = 1.0)]
    u_max_ratio: f64,
    #[arg(long, default_value_t = 100)]
    nbest: usize,
    #[arg(long, default_value_t = 0.1)]
    prune_margin: f64,
    #[arg(long, default_value_t = 17)]
    seed: u64,
    /// JSON config file; values in it override the flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    match s {
        "baseline" => Ok(Variant::Baseline),
        "vlc" => Ok(Variant::Vlc),
        "vq" => Ok(Variant::Vq),
        other => Err(format!("unknown variant {other:?} (baseline, vlc, vq)")),
    }
}

fn parse_strategy(s: &str) -> Result<MergeStrategy, String> {
    s.parse().map_err(|e| format!("{e}"))
}

fn run(cli: Cli) -> vqlattice::Result<()> {
    match cli.command {
        Command::GenData(c) => {
            let mut task = SynthTask { seed: c.seed, ..SynthTask::default() };
            if let Some(sigma) = c.sigma {
                task.noise_sigma = sigma;
            }
            let args = GenDataArgs { out_dir: c.out_dir, train: c.train, dev: c.dev, test: c.test, task };
            let args = apply_config_overrides(args, c.config.as_deref())?;
            let summary = cmd_gen_data(&args)?;
            println!("wrote {} utterances across {} files", summary.utterances, summary.paths.len());
            for p in summary.paths {
                println!("  {}", p.display());
            }
        }
        Command::Train(c) => {
            let args = TrainArgs {
                data: c.data,
                out: c.out,
                loss_curve_out: c.loss_curve,
                variant: c.variant,
                seed: c.seed,
                epochs: c.epochs,
                batch_size: c.batch_size,
                peak_lr: c.peak_lr,
                weight_decay: c.weight_decay,
            };
            let args = apply_config_overrides(args, c.config.as_deref())?;
            let summary = cmd_train(&args)?;
            let last = summary.curve.final_loss().unwrap_or(f64::NAN);
            println!("checkpoint {} (final mean nll {last:.4})", summary.checkpoint.display());
        }
        Command::Decode(c) => {
            let args = DecodeArgs {
                model: c.model,
                data: c.data,
                out_dir: c.out_dir,
                beam: c.beam,
                strategy: c.strategy,
                u_max_ratio: c.u_max_ratio,
                lattices: c.lattices,
                seed: c.seed,
            };
            let args = apply_config_overrides(args, c.config.as_deref())?;
            let summary = cmd_decode(&args)?;
            println!(
                "decoded {} utterances, wer {:.4}, transcripts {}",
                summary.utterances,
                summary.wer,
                summary.transcripts.display()
            );
            if let Some(dir) = summary.lattice_dir {
                println!("lattices in {}", dir.display());
            }
        }
        Command::Eval(c) => {
            let args = EvalArgs {
                model: c.model,
                data: c.data,
                out: c.out,
                beams: c.beams,
                strategy: c.strategy,
                u_max_ratio: c.u_max_ratio,
                seed: c.seed,
            };
            let args = apply_config_overrides(args, c.config.as_deref())?;
            let summary = cmd_eval(&args)?;
            println!("beam\twer\toracle_wer\tdensity");
            for row in &summary.rows {
                println!("{}\t{:.4}\t{:.4}\t{:.2}", row.beam, row.wer, row.oracle_wer, row.density);
            }
            println!("report {}", summary.report.display());
        }
        Command::Rescore(c) => {
            let args = RescoreArgs {
                model: c.model,
                lm_corpus: c.lm_corpus,
                dev: c.dev,
                test: c.test,
                out: c.out,
                lm_order: c.lm_order,
                lm_k: c.lm_k,
                beam: c.beam,
                strategy: c.strategy,
                u_max_ratio: c.u_max_ratio,
                nbest: c.nbest,
                prune_margin: c.prune_margin,
                lambda_grid: (0..=10).map(|i| i as f64 / 10.0).collect(),
                seed: c.seed,
            };
            let args = apply_config_overrides(args, c.config.as_deref())?;
            let summary = cmd_rescore(&args)?;
            println!(
                "lambda {:.1}: test wer {:.4} -> {:.4} (report {})",
                summary.lambda,
                summary.test_wer_baseline,
                summary.test_wer_rescored,
                summary.report.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests exit cleanly; anything else is usage.
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
