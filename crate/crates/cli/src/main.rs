//! `facepref`: runs each pipeline stage from a config file.
//!
//! Artifacts go under `<workspace>/<out>`; each stage writes its own
//! `manifest.json`. Config values can be overridden with environment
//! variables named `FACEPREF_<SECTION>_<KEY>`, e.g. `FACEPREF_DPO_BETA=0.2`.
//! Failures print one JSON line `{"error": kind, "message": text}` on stderr.

mod error;
mod stages;
mod store;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use facepref::config::Config;
use facepref::coeffs::Region;
use facepref::dpo::AnnotatorMode;

use crate::error::{CliError, CliResult};
use crate::stages::{Ctx, DpoArgs, Format, RenderArgs, RolloutArgs, ServeArgs, Which};
use crate::store::Layout;

#[derive(Debug, Parser)]
#[command(name = "facepref", version, about = "Region-aware preference refinement of facial coefficient predictors")]
struct Cli {
    /// TOML config file, relative to the workspace. Defaults apply to anything it omits.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the top-level seed; stage seeds are derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = ".")]
    workspace: PathBuf,
    /// Output directory, relative to the workspace.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Print the resolved configuration as TOML and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic SFT, rollout and eval splits.
    GenData,
    /// Fit the policy to pseudo labels.
    Sft,
    /// Sample policy candidates on the rollout split and build region tasks.
    Rollout {
        /// Policy to sample from (default: the SFT policy).
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        round: u32,
        /// Maximum number of tasks (default: discriminator.label_budget).
        #[arg(long, conflicts_with = "all")]
        limit: Option<usize>,
        /// Use every rollout sample.
        #[arg(long)]
        all: bool,
    },
    /// Have the simulated annotator panel vote on the rollout tasks.
    Annotate,
    /// Train the preference discriminator on filtered votes.
    TrainDisc {
        /// Vote log (default: the simulated panel's votes).
        #[arg(long)]
        votes: Option<PathBuf>,
        /// Annotators per task in the vote log (default: oracle.annotators).
        #[arg(long)]
        annotators: Option<usize>,
    },
    /// Iterative preference optimization starting from the SFT policy.
    Dpo {
        #[arg(long, value_parser = parse_mode)]
        mode: Option<AnnotatorMode>,
        /// Number of rounds. Without --threshold this disables the early stop.
        #[arg(long)]
        rounds: Option<usize>,
        /// Stop once the stopping judge's win rate reaches this value.
        #[arg(long)]
        threshold: Option<f64>,
        /// Starting policy (default: the SFT policy). The reference is always the SFT policy.
        #[arg(long)]
        policy: Option<PathBuf>,
        /// Human vote log, for --mode human.
        #[arg(long)]
        votes: Option<PathBuf>,
        /// Annotators per task in the human vote log (default: server.annotators_per_task).
        #[arg(long)]
        annotators: Option<usize>,
    },
    /// Win rates of a policy on the eval split, plus judge metrics.
    Evaluate {
        #[arg(long)]
        policy: Option<PathBuf>,
        /// What the policy is compared with.
        #[arg(long, value_enum, default_value_t = Against::Pseudo)]
        against: Against,
        /// Report name under evaluate/ (default: derived from the policy path).
        #[arg(long)]
        tag: Option<String>,
        /// Discriminator to score (default: the trained one, if present).
        #[arg(long)]
        discriminator: Option<PathBuf>,
    },
    /// Draw one sample's coefficients.
    Render {
        #[arg(long)]
        sample: String,
        #[arg(long, value_enum, default_value_t = Which::Gt)]
        which: Which,
        #[arg(long, value_parser = parse_region)]
        region: Option<Region>,
        #[arg(long, value_enum, default_value_t = Format::Svg)]
        format: Format,
        /// Policy for --which policy (default: the SFT policy).
        #[arg(long)]
        policy: Option<PathBuf>,
        /// Raster side length for PGM output.
        #[arg(long, default_value_t = 128)]
        size: usize,
    },
    /// Discriminator predictions on a task file, scored against votes when available.
    Judge {
        #[arg(long)]
        tasks: Option<PathBuf>,
        #[arg(long)]
        votes: Option<PathBuf>,
        #[arg(long)]
        annotators: Option<usize>,
    },
    /// Serve tasks to human annotators.
    Serve {
        #[arg(long)]
        tasks: Option<PathBuf>,
        #[arg(long)]
        votes: Option<PathBuf>,
        #[arg(long)]
        bind: Option<String>,
        #[arg(long)]
        port: Option<u16>,
        /// UI bundle served at `/` (default: <workspace>/ui).
        #[arg(long)]
        static_dir: Option<PathBuf>,
    },
    /// Collect stage reports into one summary.
    Report {
        /// Report files (default: every report under the output directory).
        inputs: Vec<PathBuf>,
        /// Accept reports produced under different configurations.
        #[arg(long)]
        force: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum Against {
    Pseudo,
}

fn parse_mode(s: &str) -> Result<AnnotatorMode, String> {
    s.parse().map_err(|e: facepref::Error| e.to_string())
}

fn parse_region(s: &str) -> Result<Region, String> {
    s.parse().map_err(|e: facepref::Error| e.to_string())
}

fn load_config(cli: &Cli) -> CliResult<Config> {
    let path = cli.config.as_ref().map(|p| cli.workspace.join(p));
    let mut cfg = Config::load(path.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn p(o: &Option<PathBuf>) -> Option<&Path> {
    o.as_deref()
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = load_config(&cli)?;
    if cli.print_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(CliError::Usage("a subcommand is required (see --help)".into()));
    };
    let vocab = cfg.load_vocab(&cli.workspace)?;
    cfg.render.validate(&vocab)?;
    let ctx = Ctx {
        cfg,
        vocab,
        layout: Layout::new(&cli.workspace, &cli.out),
    };
    match &command {
        Command::GenData => stages::gen_data(&ctx),
        Command::Sft => stages::sft(&ctx),
        Command::Rollout {
            policy,
            round,
            limit,
            all,
        } => stages::rollout(
            &ctx,
            RolloutArgs {
                policy: p(policy),
                round: *round,
                limit: *limit,
                all: *all,
            },
        ),
        Command::Annotate => stages::annotate(&ctx),
        Command::TrainDisc { votes, annotators } => stages::train_disc(&ctx, p(votes), *annotators),
        Command::Dpo {
            mode,
            rounds,
            threshold,
            policy,
            votes,
            annotators,
        } => stages::dpo(
            &ctx,
            DpoArgs {
                mode: *mode,
                rounds: *rounds,
                threshold: *threshold,
                policy: p(policy),
                votes: p(votes),
                annotators: *annotators,
            },
        ),
        Command::Evaluate {
            policy,
            against: Against::Pseudo,
            tag,
            discriminator,
        } => stages::evaluate(&ctx, p(policy), tag.as_deref(), p(discriminator)),
        Command::Render {
            sample,
            which,
            region,
            format,
            policy,
            size,
        } => stages::render(
            &ctx,
            RenderArgs {
                sample,
                which: *which,
                region: *region,
                format: *format,
                policy: p(policy),
                size: *size,
            },
        ),
        Command::Judge {
            tasks,
            votes,
            annotators,
        } => stages::judge(&ctx, p(tasks), p(votes), *annotators),
        Command::Serve {
            tasks,
            votes,
            bind,
            port,
            static_dir,
        } => stages::serve(
            &ctx,
            ServeArgs {
                tasks: p(tasks),
                votes: p(votes),
                bind: bind.as_deref(),
                port: *port,
                static_dir: p(static_dir),
            },
        ),
        Command::Report { inputs, force } => stages::report(&ctx, inputs, *force),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let message = e.to_string();
            let first = message.lines().next().unwrap_or("invalid arguments");
            let first = first.strip_prefix("error: ").unwrap_or(first);
            eprintln!("{}", CliError::Usage(first.to_string()).line());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::FAILURE
        }
    }
}
