mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// A user-correctable problem: bad flags, configuration or input files.
/// Reported with exit code 1; everything else exits with 2.
#[derive(Debug)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

#[derive(Parser, Debug)]
#[command(name = "fpcr", version, about = "Train, evaluate and inspect coarse-to-fine optical flow networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration file plus `key.path=value` overrides.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.main.steps=200`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Write outputs here instead of a fresh `<timestamp>-<hash>` directory.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset in the paired-files layout.
    Synth(commands::SynthArgs),
    /// Run the three training phases.
    Train(commands::TrainArgs),
    /// Score a checkpoint on the configured evaluation set.
    Eval(commands::EvalArgs),
    /// Finite-difference check of every registered differentiable op.
    Gradcheck(commands::GradcheckArgs),
    /// Render a `.flo` file with the flow color wheel.
    Viz(commands::VizArgs),
    /// Convert between `.flo`, PPM/PGM and PNG files.
    Convert(commands::ConvertArgs),
    /// Train and score component ablations over several seeds.
    Ablate(commands::AblateArgs),
    /// Time the correlation kernel serially and on the thread pool.
    Bench(commands::BenchArgs),
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<Invalid>() {
            return 1;
        }
        if let Some(err) = cause.downcast_ref::<fpcr::Error>() {
            use fpcr::Error as E;
            return match err {
                E::ShapeMismatch { .. } | E::InvalidInput { .. } | E::Config(_) | E::Format { .. } | E::Checkpoint(_) => 1,
                E::Stage { .. } | E::Sample { .. } => continue,
                _ => 2,
            };
        }
    }
    2
}

fn report(e: &anyhow::Error, code: u8) {
    eprintln!("error: {e}");
    for cause in e.chain().skip(1) {
        eprintln!("  caused by: {cause}");
    }
    let record = serde_json::json!({
        "error": {
            "code": code,
            "kind": if code == 1 { "validation" } else { "internal" },
            "message": e.to_string(),
            "causes": e.chain().skip(1).map(|c| c.to_string()).collect::<Vec<_>>(),
        }
    });
    eprintln!("{record}");
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            report(&anyhow::Error::new(Invalid("invalid command line".into())), 1);
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Viz(a) => commands::viz(&a),
        Command::Convert(a) => commands::convert(&a),
        Command::Ablate(a) => commands::ablate(&a),
        Command::Bench(a) => commands::bench(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            report(&e, code);
            ExitCode::from(code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn library_errors_map_to_exit_codes() {
        let cfg = anyhow::Error::new(fpcr::Error::Config("x".into()));
        assert_eq!(exit_code(&cfg), 1);
        let io = anyhow::Error::new(fpcr::Error::NonFiniteLoss {
            step: 3,
            last_checkpoint: None,
        });
        assert_eq!(exit_code(&io), 2);
        let wrapped = anyhow::Error::new(Invalid("bad".into())).context("while loading");
        assert_eq!(exit_code(&wrapped), 1);
        assert_eq!(exit_code(&anyhow::anyhow!("plain")), 2);
    }

    #[test]
    fn command_line_parses() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
