//! The `blocklm` command line: vocabulary building, MLM pretraining, builder
//! fine-tuning, evaluation, episode replay and corpus preparation.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error,
//! 3 numeric failure during training.

mod commands;
pub mod config;

use std::ffi::OsString;
use std::io::Write;

use clap::{Arg, ArgAction, ArgMatches, Command};

use blocklm::corpus::CorpusError;
use blocklm::eval::EvalError;
use blocklm::model::ModelError;
use blocklm::tokenizer::TokenizerError;
use blocklm::training::TrainError;

pub use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match &e {
            EvalError::Decode {
                source: TrainError::NonFiniteLoss { .. },
                ..
            } => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

macro_rules! data_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.to_string())
            }
        }
    )*};
}

data_error!(ModelError, CorpusError, TokenizerError);

fn path_arg(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name).long(name).value_name("PATH").help(help)
}

fn config_args(cmd: Command) -> Command {
    let cmd = cmd.arg(path_arg("config", "Flat `section.key = value` config file"));
    config::all_keys().into_iter().fold(cmd, |cmd, key| {
        cmd.arg(
            Arg::new(key.clone())
                .long(key)
                .value_name("VALUE")
                .help_heading("Config overrides")
                .hide_short_help(true),
        )
    })
}

fn corpus_args(cmd: Command) -> Command {
    cmd.arg(path_arg("corpus", "Episode corpus (JSON lines)").required(true)).arg(
        Arg::new("lenient")
            .long("lenient")
            .action(ArgAction::SetTrue)
            .help("Skip invalid episodes with a warning"),
    )
}

fn grid_arg(default: &'static str) -> Arg {
    Arg::new("grid")
        .long("grid")
        .value_name("WxHxD")
        .default_value(default)
        .help("Grid extent")
}

pub fn command() -> Command {
    Command::new("blocklm")
        .about("MLM pretraining and fine-tuning of a voxel builder agent")
        .subcommand_required(true)
        .arg(
            Arg::new("threads")
                .long("threads")
                .global(true)
                .value_name("N")
                .value_parser(clap::value_parser!(usize))
                .default_value("1")
                .help("Worker threads for per-example work; results do not depend on it"),
        )
        .subcommand(
            corpus_args(Command::new("build-vocab").about("Build a word vocabulary from corpus utterances"))
                .arg(path_arg("out", "Vocabulary file to write").required(true))
                .arg(
                    Arg::new("min-freq")
                        .long("min-freq")
                        .value_parser(clap::value_parser!(usize))
                        .default_value("1"),
                )
                .arg(
                    Arg::new("max-size")
                        .long("max-size")
                        .value_parser(clap::value_parser!(usize))
                        .default_value("10000")
                        .help("Maximum vocabulary size including special tokens"),
                )
                .arg(split_arg("train", true)),
        )
        .subcommand(config_args(corpus_args(
            Command::new("pretrain")
                .about("Masked-LM pretraining on corpus utterances (or a .txt file, one sentence per line)"),
        ))
        .arg(path_arg("vocab", "Vocabulary file").required(true))
        .arg(path_arg("out-checkpoint", "Checkpoint to write").required(true))
        .arg(path_arg("curves", "Loss curve CSV; the learning rates go to <stem>.lr.csv").required(true))
        .arg(path_arg("state", "Training-state file rewritten after every epoch"))
        .arg(path_arg("resume", "Continue from a training-state file"))
        .arg(split_arg("train", true)))
        .subcommand(
            config_args(corpus_args(
                Command::new("finetune").about("Fine-tune the builder head (random init without --init-checkpoint)"),
            ))
            .arg(path_arg("init-checkpoint", "Pretrained checkpoint whose encoder is copied"))
            .arg(path_arg("vocab", "Vocabulary file; defaults to the one in --init-checkpoint"))
            .arg(path_arg("out-checkpoint", "Checkpoint to write").required(true))
            .arg(path_arg("curves", "Loss curve CSV; the learning rates go to <stem>.lr.csv")),
        )
        .subcommand(
            config_args(corpus_args(Command::new("evaluate").about("Net-action precision/recall/F1 on one split")))
                .arg(path_arg("checkpoint", "Fine-tuned checkpoint").required(true))
                .arg(path_arg("vocab", "Vocabulary file; defaults to the one in the checkpoint"))
                .arg(path_arg("report", "metrics.csv to write").required(true))
                .arg(Arg::new("name").long("name").help("Row label; defaults to the checkpoint file stem"))
                .arg(split_arg("test", false)),
        )
        .subcommand(
            corpus_args(Command::new("replay").about("Print an episode's grids and net changes turn by turn"))
                .arg(Arg::new("episode").long("episode").required(true))
                .arg(grid_arg("11x9x11")),
        )
        .subcommand(
            Command::new("synth")
                .about("Write a seeded synthetic corpus")
                .arg(path_arg("out", "Corpus file to write").required(true))
                .arg(
                    Arg::new("episodes")
                        .long("episodes")
                        .value_parser(clap::value_parser!(usize))
                        .default_value("50"),
                )
                .arg(
                    Arg::new("seed")
                        .long("seed")
                        .value_parser(clap::value_parser!(u64))
                        .default_value("0"),
                )
                .arg(grid_arg("5x3x5"))
                .arg(
                    Arg::new("single-action")
                        .long("single-action")
                        .action(ArgAction::SetTrue)
                        .help("One turn with one placement per episode, all in the train split"),
                ),
        )
        .subcommand(
            Command::new("convert-logs")
                .about("Convert world-state snapshot logs (one JSON log per line) into episodes")
                .arg(path_arg("input", "Snapshot logs").required(true))
                .arg(path_arg("out", "Corpus file to write").required(true))
                .arg(split_arg("train", false))
                .arg(grid_arg("11x9x11"))
                .arg(
                    Arg::new("offset")
                        .long("offset")
                        .value_name("X,Y,Z")
                        .default_value("5,0,5")
                        .help("Added to every source coordinate"),
                ),
        )
}

fn split_arg(default: &'static str, allow_all: bool) -> Arg {
    let values: &[&'static str] = if allow_all {
        &["train", "valid", "test", "all"]
    } else {
        &["train", "valid", "test"]
    };
    Arg::new("split")
        .long("split")
        .default_value(default)
        .value_parser(values.to_vec())
}

/// Runs one invocation and returns its exit code. Diagnostics go to `err`,
/// reports and summaries to `out`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{text}");
                0
            } else {
                let _ = write!(err, "{text}");
                1
            };
        }
    };
    match dispatch(&matches, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message());
            e.exit_code()
        }
    }
}

fn dispatch(m: &ArgMatches, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let threads = *m.get_one::<usize>("threads").expect("has default");
    if threads == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    blocklm::par::configure_threads(threads);
    let (name, sub) = m.subcommand().expect("subcommand required");
    let ctx = commands::Context { threads, out, err };
    match name {
        "build-vocab" => commands::build_vocab(sub, ctx),
        "pretrain" => commands::pretrain(sub, ctx),
        "finetune" => commands::finetune(sub, ctx),
        "evaluate" => commands::evaluate(sub, ctx),
        "replay" => commands::replay(sub, ctx),
        "synth" => commands::synth(sub, ctx),
        "convert-logs" => commands::convert_logs(sub, ctx),
        other => unreachable!("unregistered subcommand {other}"),
    }
}
