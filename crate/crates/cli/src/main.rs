//! `defmine`: run the definition mining pipeline stage by stage, or serve the
//! annotation API over a run directory.
//!
//! Exit codes: 0 on success, 1 for invalid configuration or arguments, 2 when a
//! stage (or the server) fails.

use std::io::Write;
use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use defmine::corpus::RelationId;
use defmine::patterns::Side;
use defmine::pipeline::{
    run_pipeline, ConfigError, PipelineConfig, PipelineError, RunOptions, Stage, REPORT_FILE,
};
use defmine_service::{run_blocking, ServiceConfig};

#[derive(Debug, Parser)]
#[command(
    name = "defmine",
    version,
    about = "Mine commonsense triples from dictionary definitions"
)]
struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true, default_value = "defmine.toml")]
    config: PathBuf,
    /// Directory holding one subdirectory per stage plus the manifest.
    #[arg(long, global = true, default_value = "run")]
    run_dir: PathBuf,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Comma-separated relation subset, e.g. `AtLocation,IsA`.
    #[arg(long, global = true, value_delimiter = ',')]
    relations: Option<Vec<RelationId>>,
    /// Rerun the requested stage even when its inputs are unchanged.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse definitions, the reference graph and training triples.
    Ingest,
    /// Tag definition text with part-of-speech labels.
    Tag,
    /// Mine POS patterns per relation and keep the top k.
    MinePatterns(MineArgs),
    /// Match patterns against definitions to build candidate triples.
    Extract,
    /// Score candidates with every configured scorer.
    Score(ScoreArgs),
    /// Corrupt training triples into negatives.
    Negatives(NegativesArgs),
    /// Compare candidates against reference triples.
    Novelty(NoveltyArgs),
    /// Keep qualified candidates per scorer and relation.
    Select(SelectArgs),
    /// Draw evaluation samples from the qualified candidates.
    Sample(SampleArgs),
    /// Histograms, Kendall's tau and annotation summaries.
    Analyze,
    /// Write the markdown report and its CSV tables.
    Report,
    /// Run every stage, skipping those already up to date.
    Run(RunArgs),
    /// Serve the annotation API over the run directory.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct MineArgs {
    /// Patterns kept per relation.
    #[arg(long)]
    k: Option<usize>,
    /// Which slot of the reference triples to mine: `head` or `tail`.
    #[arg(long)]
    side: Option<Side>,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    /// Only run the scorers with these ids (repeatable).
    #[arg(long = "scorer")]
    scorers: Vec<String>,
}

#[derive(Debug, Args)]
struct NegativesArgs {
    /// Number of negatives to generate.
    #[arg(long)]
    n: Option<usize>,
}

#[derive(Debug, Args)]
struct NoveltyArgs {
    /// Extra reference triple files (repeatable).
    #[arg(long = "reference")]
    references: Vec<PathBuf>,
    /// Compare only ignoring the relation (`true`) or only within it (`false`).
    #[arg(long)]
    relation_agnostic: Option<bool>,
}

#[derive(Debug, Args)]
struct SelectArgs {
    /// Score threshold for calibrated scorers, inclusive.
    #[arg(long)]
    theta: Option<f64>,
    /// How many top-ranked candidates uncalibrated scorers keep.
    #[arg(long)]
    top_n: Option<usize>,
}

#[derive(Debug, Args)]
struct SampleArgs {
    /// Triples sampled per relation and scorer.
    #[arg(long)]
    n: Option<usize>,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Comma-separated stages to run instead of all of them.
    #[arg(long, value_delimiter = ',')]
    stages: Option<Vec<Stage>>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    /// Port to listen on; 0 picks a free one.
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: IpAddr,
    /// Built annotation UI to serve at `/`.
    #[arg(long)]
    static_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

/// The error chain joined with `: `, skipping causes the outer messages already quote.
fn describe(e: &anyhow::Error) -> String {
    let mut msg = e.to_string();
    for cause in e.chain().skip(1) {
        let c = cause.to_string();
        if !msg.contains(&c) {
            msg.push_str(": ");
            msg.push_str(&c);
        }
    }
    msg
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if let Some(p) = e.downcast_ref::<PipelineError>() {
        return p.exit_code() as u8;
    }
    if e.downcast_ref::<ConfigError>().is_some() {
        return 1;
    }
    2
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    let stage = match &cli.command {
        Command::Serve(args) => return serve(&cli.run_dir, args),
        Command::Run(args) => {
            let config = load_config(&cli, |_| Ok(()))?;
            return run_stages(&config, &cli, args.stages.clone());
        }
        Command::Ingest => Stage::Ingest,
        Command::Tag => Stage::Tag,
        Command::MinePatterns(_) => Stage::MinePatterns,
        Command::Extract => Stage::Extract,
        Command::Score(_) => Stage::Score,
        Command::Negatives(_) => Stage::Negatives,
        Command::Novelty(_) => Stage::Novelty,
        Command::Select(_) => Stage::Select,
        Command::Sample(_) => Stage::Sample,
        Command::Analyze => Stage::Analyze,
        Command::Report => Stage::Report,
    };
    let config = load_config(&cli, |c| apply_stage_flags(c, &cli.command))?;
    run_stages(&config, &cli, Some(vec![stage]))
}

/// Config file, then `DEFMINE_` environment overrides, then command-line flags.
fn load_config(
    cli: &Cli,
    stage_flags: impl FnOnce(&mut PipelineConfig) -> Result<(), ConfigError>,
) -> anyhow::Result<PipelineConfig> {
    let mut config = PipelineConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(r) = &cli.relations {
        config.relations = Some(r.clone());
    }
    stage_flags(&mut config)?;
    Ok(config)
}

fn apply_stage_flags(config: &mut PipelineConfig, command: &Command) -> Result<(), ConfigError> {
    match command {
        Command::MinePatterns(a) => {
            if let Some(k) = a.k {
                config.mining.k = k;
            }
            if let Some(side) = a.side {
                config.mining.side = side;
            }
        }
        Command::Score(a) if !a.scorers.is_empty() => {
            if let Some(missing) = a
                .scorers
                .iter()
                .find(|id| !config.scorers.iter().any(|s| &&s.id == id))
            {
                return Err(ConfigError::Invalid(format!(
                    "no scorer with id `{missing}` is configured"
                )));
            }
            config.scorers.retain(|s| a.scorers.contains(&s.id));
        }
        Command::Negatives(a) => {
            if let Some(n) = a.n {
                config.negatives.n = n;
            }
        }
        Command::Novelty(a) => {
            config
                .novelty
                .references
                .extend(a.references.iter().cloned());
            if a.relation_agnostic.is_some() {
                config.novelty.relation_agnostic = a.relation_agnostic;
            }
        }
        Command::Select(a) => {
            if let Some(t) = a.theta {
                config.selection.theta = t;
            }
            if let Some(n) = a.top_n {
                config.selection.top_n = n;
            }
        }
        Command::Sample(a) => {
            if let Some(n) = a.n {
                config.sampling.n = n;
            }
        }
        _ => {}
    }
    Ok(())
}

fn run_stages(
    config: &PipelineConfig,
    cli: &Cli,
    stages: Option<Vec<Stage>>,
) -> anyhow::Result<()> {
    let wants_report = stages.as_ref().is_none_or(|s| s.contains(&Stage::Report));
    let opts = RunOptions {
        stages,
        force: cli.force,
    };
    let summary = run_pipeline(config, &cli.run_dir, &opts)?;
    let mut out = std::io::stdout().lock();
    for (stage, status) in &summary.stages {
        writeln!(
            out,
            "{:<14} {}",
            stage.name(),
            format!("{status:?}").to_lowercase()
        )?;
    }
    if wants_report {
        let path = cli.run_dir.join(Stage::Report.name()).join(REPORT_FILE);
        writeln!(out, "report: {}", path.display())?;
    }
    Ok(())
}

fn serve(run_dir: &std::path::Path, args: &ServeArgs) -> anyhow::Result<()> {
    let config = ServiceConfig {
        run_dir: run_dir.to_path_buf(),
        static_dir: args.static_dir.clone(),
    };
    let addr = SocketAddr::new(args.host, args.port);
    run_blocking(&config, addr, |bound| {
        println!("listening on http://{bound}");
        let _ = std::io::stdout().flush();
    })
    .with_context(|| format!("annotation service on {addr}"))
}
