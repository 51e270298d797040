//! `authguard`: corpus synthesis, captioning, two-stage training, evaluation and reports.

mod commands;
mod manifest;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "authguard", version, about = "Deepfake detection with semantic artifact reasoning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic face corpus.
    Synth(commands::SynthArgs),
    /// Caption corpus images and build instruction pairs.
    Datagen(commands::DatagenArgs),
    /// Stage one: train the expert encoder.
    TrainEncoder(commands::TrainEncoderArgs),
    /// Stage two: train the projector and language model.
    TrainReasoner(commands::TrainReasonerArgs),
    /// Detection and caption metrics.
    Eval(commands::EvalArgs),
    /// Answer a question about corpus images.
    Generate(commands::GenerateArgs),
    /// Render curves and comparison tables from run directories.
    Report(commands::ReportArgs),
}

/// Flags shared by commands that accept config overrides.
#[derive(Args, Debug, Clone, Default)]
pub struct OverrideArgs {
    /// Override a config field, e.g. `--set train.lr_base=1e-3`. Dotted flags
    /// such as `--train.lr_base=1e-3` are accepted too.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    pub set: Vec<String>,
}

/// Moves `--a.b=v` / `--a.b v` flags out of argv into `--set a.b=v` form.
fn rewrite_dotted(argv: Vec<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(argv.len());
    let mut it = argv.into_iter().peekable();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            out.push(arg);
            continue;
        };
        let (name, value) = match flag.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        if !name.contains('.') {
            out.push(arg);
            continue;
        }
        let value = value.or_else(|| it.next_if(|v| !v.starts_with("--")));
        out.push("--set".into());
        out.push(format!("{name}={}", value.unwrap_or_default()));
    }
    out
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .init();
    let cli = match Cli::try_parse_from(rewrite_dotted(std::env::args().collect())) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Datagen(a) => commands::datagen(a),
        Command::TrainEncoder(a) => commands::train_encoder(a),
        Command::TrainReasoner(a) => commands::train_reasoner(a),
        Command::Eval(a) => commands::eval(a),
        Command::Generate(a) => commands::generate(a),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("Run with --help for usage.");
            ExitCode::from(2)
        }
        Err(commands::CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
