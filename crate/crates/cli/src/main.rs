use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use occuprobe::pipeline::{self, RunConfig, Stage};

#[derive(Parser)]
#[command(name = "occuprobe", version, about = "Occupational association audits for generative language models")]
struct Cli {
    /// TOML run configuration; defaults apply to every missing key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides OCCUPROBE_OUT and the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// URL, mock, mock:PATH or replay:PATH.
    #[arg(long, global = true)]
    backend: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the generation plan.
    Plan,
    /// Collect completions into the corpus.
    Generate,
    /// Build the frequency matrix and apply the threshold.
    Extract,
    /// Gini, Lorenz, top jobs and over-representation data.
    Analyze,
    /// Per-job logistic regressions.
    Regress,
    /// Compare predictions with labor data.
    Compare,
    /// Render report.md from the manifest.
    Report,
    /// Sampling-parameter ablation.
    Sweep,
    /// Run several stages in order (all pipeline stages by default).
    Run {
        /// Comma-separated stage names.
        #[arg(long, value_delimiter = ',')]
        stage: Vec<String>,
    },
}

fn stages(cmd: &Command) -> occuprobe::Result<Vec<Stage>> {
    Ok(match cmd {
        Command::Plan => vec![Stage::Plan],
        Command::Generate => vec![Stage::Generate],
        Command::Extract => vec![Stage::Extract],
        Command::Analyze => vec![Stage::Analyze],
        Command::Regress => vec![Stage::Regress],
        Command::Compare => vec![Stage::Compare],
        Command::Report => vec![Stage::Report],
        Command::Sweep => vec![Stage::Sweep],
        Command::Run { stage } if stage.is_empty() => Stage::PIPELINE.to_vec(),
        Command::Run { stage } => stage.iter().map(|s| s.parse()).collect::<occuprobe::Result<_>>()?,
    })
}

fn run(cli: Cli) -> occuprobe::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    pipeline::resolve_out(&mut cfg, cli.out.clone());
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(b) = &cli.backend {
        cfg.backend = b.clone();
    }
    let stages = stages(&cli.command)?;
    let out = cfg.out.clone();
    let (_, outcomes) = pipeline::run_pipeline(cfg, &stages)?;
    for o in outcomes {
        let state = if o.ran { "done" } else { "up to date" };
        println!("{:<9} {state}", o.stage.as_str());
    }
    println!("artifacts in {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
