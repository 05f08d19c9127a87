use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};

use fakevqa::pipeline::{
    cmd_corpus, cmd_eval, cmd_pretrain, cmd_pretrain_baseline, cmd_report, cmd_tune, ExperimentConfig, PseudoSource,
    SubsetSelection,
};
use fakevqa::Error;

/// Fake image detection and attribution with a soft-prompted toy
/// vision-language model.
///
/// Every flag can also be set through an environment variable named
/// FAKEVQA_<FLAG>, e.g. FAKEVQA_SEED=7 or FAKEVQA_OUT=runs/a.
#[derive(Parser)]
#[command(name = "fakevqa", version)]
struct Cli {
    /// Experiment config (TOML); omitted fields take their defaults.
    #[arg(long, global = true, env = "FAKEVQA_CONFIG")]
    config: Option<PathBuf>,

    /// Root seed; overrides the config file.
    #[arg(long, global = true, env = "FAKEVQA_SEED")]
    seed: Option<u64>,

    /// Output directory shared by all stages.
    #[arg(long, global = true, env = "FAKEVQA_OUT", default_value = "runs/default")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the image corpus and its manifest.
    Corpus,
    /// Train the backbone on the partial task (or the CNN baseline).
    Pretrain {
        #[arg(long, env = "FAKEVQA_BASELINE")]
        baseline: bool,
    },
    /// Tune the S* embedding with the backbone frozen.
    Tune,
    /// Generate answers on the test subsets and score them.
    Eval {
        #[arg(long, value_enum, env = "FAKEVQA_SUBSETS")]
        subsets: Option<SubsetSelection>,
        /// Ask the question with S* appended.
        #[arg(long, env = "FAKEVQA_WITH_PSEUDO", action = ArgAction::Set)]
        with_pseudo: Option<bool>,
        /// Evaluate with the tuned S* or with its random starting point.
        #[arg(long, value_enum, env = "FAKEVQA_PSEUDO_SOURCE")]
        pseudo_source: Option<PseudoSource>,
        /// Score the CNN baseline instead of the language model.
        #[arg(long, env = "FAKEVQA_BASELINE")]
        baseline: bool,
    },
    /// Merge metrics.json files into comparison tables under --out.
    Report {
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
    },
}

fn log(line: &str) {
    eprintln!("{line}");
}

fn run(cli: Cli) -> fakevqa::Result<()> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let out = &cli.out;
    match cli.command {
        Command::Corpus => {
            let m = cmd_corpus(&config, out)?;
            println!("corpus: {} images, config {}", m.records.len(), m.config_hash);
        }
        Command::Pretrain { baseline: false } => {
            let r = cmd_pretrain(&config, out, log)?;
            println!("backbone: {}", r.provenance.checkpoints[0].1);
        }
        Command::Pretrain { baseline: true } => {
            let r = cmd_pretrain_baseline(&config, out, log)?;
            println!("baseline: {}", r.provenance.checkpoints[0].1);
        }
        Command::Tune => {
            let r = cmd_tune(&config, out, log)?;
            print!("{}", r.history.to_csv());
        }
        Command::Eval {
            subsets,
            with_pseudo,
            pseudo_source,
            baseline,
        } => {
            if let Some(s) = subsets {
                config.eval.subsets = s;
            }
            if let Some(w) = with_pseudo {
                config.eval.with_pseudo = w;
            }
            if let Some(p) = pseudo_source {
                config.eval.pseudo_source = p;
            }
            config.eval.baseline |= baseline;
            let (report, dir) = cmd_eval(&config, out, log)?;
            let (acc, f1) = report.detection_average();
            println!(
                "{} on {} subsets: detection acc {:.4}, f1 {:.4} -> {}",
                report.method,
                report.subsets.as_str(),
                acc,
                f1,
                dir.display()
            );
        }
        Command::Report { metrics } => {
            let table = cmd_report(&metrics, out)?;
            print!("{}", table.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{body}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::MissingArtifact(_) | Error::Corrupt { .. } => 3,
        _ => 1,
    }
}
