use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use tempoflow_cli::commands;
use tempoflow_cli::{AblationMode, CliError, CliResult, Flags, RunConfig};

#[derive(Parser)]
#[command(name = "tempoflow", version, about = "Temporally controlled flow-matching music generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// key = value run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Guidance weights: style only, local only, both.
    #[arg(long, global = true, num_args = 3, value_names = ["TEXT", "LOCAL", "BOTH"], allow_negative_numbers = true)]
    alpha: Option<Vec<f64>>,
    #[arg(long, global = true)]
    rtol: Option<f64>,
    #[arg(long, global = true)]
    atol: Option<f64>,
    /// Training steps.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Output location of the command's artifact.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Score generated clips against their symbolic conditions.
    #[arg(long, global = true)]
    self_eval: bool,
    /// Overwrite artifacts produced by an identical config.
    #[arg(long, global = true)]
    force: bool,
    /// Extra config overrides, `key=value`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic corpus.
    Synth,
    /// Fit the latent codec on training clips.
    FitCodec,
    /// Train the vector-field model.
    Train,
    /// Sample clips from a trained model.
    Generate,
    /// Score generated clips against the reference corpus.
    Evaluate,
    /// Train and compare paired models differing along one axis.
    Ablate {
        #[arg(value_enum)]
        mode: Mode,
    },
    /// Print every config key with its resolved value.
    Config,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    LossWeighting,
    Conditioning,
}

fn out_key(c: &Command) -> Option<&'static str> {
    match c {
        Command::Synth => Some("corpus.dir"),
        Command::FitCodec => Some("codec.path"),
        Command::Train => Some("train.out"),
        Command::Generate => Some("generate.out"),
        Command::Evaluate => Some("evaluate.out"),
        Command::Ablate { .. } => Some("ablate.out"),
        Command::Config => None,
    }
}

fn resolve(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {o:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = cli.seed {
        cfg.set("seed", &s.to_string())?;
    }
    if let Some(a) = &cli.alpha {
        for (k, v) in ["guidance.text", "guidance.local", "guidance.both"].iter().zip(a) {
            cfg.set(k, &v.to_string())?;
        }
    }
    if let Some(v) = cli.rtol {
        cfg.set("solver.rtol", &v.to_string())?;
    }
    if let Some(v) = cli.atol {
        cfg.set("solver.atol", &v.to_string())?;
    }
    if let Some(v) = cli.steps {
        cfg.set("train.steps", &v.to_string())?;
    }
    if let (Some(p), Some(k)) = (&cli.out, out_key(&cli.command)) {
        cfg.set(k, &p.to_string_lossy())?;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> CliResult<()> {
    let cfg = resolve(cli)?;
    let flags = Flags {
        force: cli.force,
        self_eval: cli.self_eval,
    };
    let summary = match &cli.command {
        Command::Synth => commands::synth(&cfg, flags)?,
        Command::FitCodec => commands::fit_codec(&cfg, flags)?,
        Command::Train => commands::train(&cfg, flags)?,
        Command::Generate => commands::generate(&cfg, flags)?,
        Command::Evaluate => commands::evaluate(&cfg, flags)?,
        Command::Ablate { mode } => {
            let mode = match mode {
                Mode::LossWeighting => AblationMode::LossWeighting,
                Mode::Conditioning => AblationMode::Conditioning,
            };
            commands::ablate(&cfg, mode, flags)?
        }
        Command::Config => {
            let _ = write!(std::io::stdout(), "{}", cfg.render());
            return Ok(());
        }
    };
    let body = serde_json::to_string_pretty(&summary).map_err(tempoflow_core::Error::from)?;
    // A closed stdout (e.g. piped into `head`) is not a failure of the command.
    let _ = writeln!(std::io::stdout(), "{body}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = CliError::Usage(e.to_string().trim().to_string());
            eprintln!("{}", err.to_json());
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::FAILURE
        }
    }
}
