use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tactfuse::config::validate_config;
use tactfuse::pipeline::{run_pipeline, Outcome, Stage};

/// Visual-tactile depth supervision pipeline.
#[derive(Debug, Parser)]
#[command(name = "tactfuse", version)]
struct Cli {
    /// Scene configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides the configured output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    Simulate,
    /// Condition and fit the implicit surface on the touches.
    GpisFit,
    /// Render touch depth and variance for every view.
    GpisRender,
    /// Align monocular depth to metric scale and the touched object.
    Align,
    /// Fuse aligned vision with touch depth.
    Fuse,
    /// Build the initial splat cloud.
    InitPoints,
    /// Optimize the splat cloud against RGB and fused depth.
    Train,
    /// Score the trained cloud.
    Eval,
    /// Run several stages in dependency order.
    Pipeline {
        /// Comma-separated stages (default: all).
        #[arg(long, value_name = "LIST", value_parser = parse_stages)]
        stages: Option<StageList>,
    },
}

#[derive(Debug, Clone)]
struct StageList(Vec<Stage>);

fn parse_stages(s: &str) -> Result<StageList, String> {
    Stage::parse_list(s).map(StageList).map_err(|e| e.to_string())
}

fn stages(cmd: &Command) -> Vec<Stage> {
    match cmd {
        Command::Simulate => vec![Stage::Simulate],
        Command::GpisFit => vec![Stage::GpisFit],
        Command::GpisRender => vec![Stage::GpisRender],
        Command::Align => vec![Stage::Align],
        Command::Fuse => vec![Stage::Fuse],
        Command::InitPoints => vec![Stage::InitPoints],
        Command::Train => vec![Stage::Train],
        Command::Eval => vec![Stage::Eval],
        Command::Pipeline { stages: None } => Stage::ALL.to_vec(),
        Command::Pipeline { stages: Some(list) } => list.0.clone(),
    }
}

fn run(cli: &Cli) -> tactfuse::Result<()> {
    let Some(path) = &cli.config else {
        return Err(tactfuse::Error::Config {
            path: PathBuf::from("<none>"),
            line: 0,
            message: "--config is required".into(),
        });
    };
    let mut cfg = validate_config(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.set_out(out.clone());
    }
    let stages = stages(&cli.command);
    let result = run_pipeline(&cfg, &stages)?;
    for (stage, outcome) in &result.stages {
        let what = match outcome {
            Outcome::Ran => "ran",
            Outcome::Skipped => "skipped (up to date)",
        };
        println!("{stage}: {what}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
