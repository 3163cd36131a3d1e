//! `ins`: train, stylize, render and score implicit fields.
//!
//! Exit status is 0 on success, 2 for usage and configuration errors and 1
//! when a pipeline fails. Errors go to stderr as a single JSON line.

mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{CommandFactory, Parser, ValueEnum};
use ins_core::losses::BackboneKind;
use serde_json::json;

use config::{ConfigError, Overrides, RunConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Command {
    FitSiren,
    TrainNerf,
    StylizeNerf,
    TrainSdf,
    StylizeSdf,
    Render,
    Interpolate,
    Eval,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Backbone {
    Vgg16,
    Surrogate,
}

/// Implicit neural stylization of images, radiance fields and surfaces.
///
/// Flags override the matching fields of the config file.
#[derive(Debug, Parser)]
#[command(name = "ins", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Style image; repeat for several styles, in code order.
    #[arg(long = "style")]
    styles: Vec<PathBuf>,
    /// Steps of the phase the command runs (frames for `interpolate`).
    #[arg(long)]
    steps: Option<u64>,
    /// Feature extractor; VGG-16 weights are read from $INS_WEIGHTS_DIR.
    #[arg(long, value_enum)]
    backbone: Option<Backbone>,
    /// Single worker thread and fixed reduction order.
    #[arg(long)]
    deterministic: bool,
}

pub enum Failure {
    Config(ConfigError),
    Run(ins_core::InsError),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e)
    }
}

impl From<ins_core::InsError> for Failure {
    fn from(e: ins_core::InsError) -> Self {
        match e {
            e @ ins_core::InsError::Config(_) => Failure::Config(config::within("", e)),
            e => Failure::Run(e),
        }
    }
}

fn resolve(cli: Cli) -> Result<(Command, RunConfig), ConfigError> {
    let mut cfg = match &cli.config {
        Some(p) => config::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(
        cli.command,
        Overrides {
            out: cli.out,
            seed: cli.seed,
            styles: cli.styles,
            steps: cli.steps,
            backbone: cli.backbone.map(|b| match b {
                Backbone::Vgg16 => BackboneKind::Vgg16,
                Backbone::Surrogate => BackboneKind::Surrogate,
            }),
            deterministic: cli.deterministic,
        },
    );
    cfg.validate()?;
    Ok((cli.command, cfg))
}

fn report(f: &Failure) -> ExitCode {
    let (line, code) = match f {
        Failure::Config(e) => (
            json!({ "error": "config", "path": e.path, "message": e.message }),
            2,
        ),
        Failure::Run(e) => (json!({ "error": e.kind(), "message": e.to_string() }), 1),
    };
    eprintln!("{line}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            e.exit()
        }
        Err(e) => {
            let _ = e.print();
            eprintln!("\n{}", Cli::command().render_usage());
            return ExitCode::from(2);
        }
    };
    let outcome = resolve(cli).map_err(Failure::from).and_then(|(cmd, cfg)| {
        if cfg.deterministic {
            // Only fails if a pool already exists, which cannot happen this early.
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(1)
                .build_global();
        }
        run::dispatch(cmd, &cfg)
    });
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report(&f),
    }
}
