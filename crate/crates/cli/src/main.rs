use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use aristo_core::negatives::Aspect;
use aristo_core::pipeline::{
    cmd_demo, cmd_evaluate, cmd_extract, cmd_generate, cmd_negatives, cmd_train_lm, cmd_train_rescorer, cmd_tune,
    GenerateIo, GenerateMode, LmStage, PipelineConfig,
};
use aristo_core::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

/// Content-planned story generation: extract plots, train rescorers and
/// language models, tune mixture weights, generate and evaluate.
#[derive(Debug, Parser)]
#[command(name = "aristo", version)]
struct Cli {
    /// TOML pipeline config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Extract plots from annotated stories and write the split files.
    Extract,
    /// Build rescorer training and held-out examples for one aspect.
    Negatives {
        #[arg(long, value_enum)]
        aspect: AspectArg,
    },
    /// Train the n-gram rescorer for one aspect.
    TrainRescorer {
        #[arg(long, value_enum)]
        aspect: AspectArg,
    },
    /// Train the plot or story language model.
    TrainLm {
        #[arg(long, value_enum)]
        stage: StageArg,
        #[arg(long)]
        order: Option<usize>,
        #[arg(long)]
        add_k: Option<f64>,
    },
    /// Tune mixture weights and write the ablation report.
    Tune,
    /// Generate plots and/or stories for the test prompts.
    Generate(GenerateArgs),
    /// Compute plot and story metrics.
    Evaluate,
    /// Run the whole pipeline on a synthetic corpus.
    Demo {
        /// 50 records instead of 500.
        #[arg(long)]
        quick: bool,
        /// Working directory for all demo files.
        #[arg(long, default_value = "aristo-demo")]
        dir: PathBuf,
    },
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long, value_enum)]
    mode: ModeArg,
    #[arg(long)]
    prompts: Option<PathBuf>,
    /// Plots to realize in story mode.
    #[arg(long)]
    plots: Option<PathBuf>,
    #[arg(long)]
    lm: Option<PathBuf>,
    #[arg(long)]
    story_lm: Option<PathBuf>,
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Directory of trained rescorers.
    #[arg(long)]
    scorers: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AspectArg {
    Inter,
    Intra,
    Verb,
    Entity,
    Relevance,
}

impl From<AspectArg> for Aspect {
    fn from(a: AspectArg) -> Self {
        match a {
            AspectArg::Inter => Aspect::Inter,
            AspectArg::Intra => Aspect::Intra,
            AspectArg::Verb => Aspect::Verb,
            AspectArg::Entity => Aspect::Entity,
            AspectArg::Relevance => Aspect::Relevance,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StageArg {
    Plot,
    Story,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Naive,
    Aristotelian,
    Story,
    End2end,
}

impl From<ModeArg> for GenerateMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Naive => GenerateMode::Naive,
            ModeArg::Aristotelian => GenerateMode::Aristotelian,
            ModeArg::Story => GenerateMode::Story,
            ModeArg::End2end => GenerateMode::End2end,
        }
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) if !path.is_file() => {
            return Err(Error::Config(format!("config file {} not found", path.display())));
        }
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Error::Config(format!("--jobs: {e}")))?;
    }
    let mut cfg = load_config(&cli)?;
    let started = Instant::now();
    match cli.command {
        Command::Extract => print_json(&cmd_extract(&cfg)?)?,
        Command::Negatives { aspect } => print_json(&cmd_negatives(&cfg, aspect.into())?)?,
        Command::TrainRescorer { aspect } => print_json(&cmd_train_rescorer(&cfg, aspect.into())?)?,
        Command::TrainLm { stage, order, add_k } => {
            let (stage, lm) = match stage {
                StageArg::Plot => (LmStage::Plot, &mut cfg.plot_lm),
                StageArg::Story => (LmStage::Story, &mut cfg.story_lm),
            };
            lm.order = order.unwrap_or(lm.order);
            lm.add_k = add_k.unwrap_or(lm.add_k);
            print_json(&cmd_train_lm(&cfg, stage)?)?
        }
        Command::Tune => {
            let summary = cmd_tune(&cfg)?;
            print_json(&summary)?
        }
        Command::Generate(args) => {
            let mode: GenerateMode = args.mode.into();
            let sampler = if matches!(mode, GenerateMode::Story) {
                &mut cfg.story_sampler
            } else {
                &mut cfg.plot_sampler
            };
            sampler.k = args.top_k.unwrap_or(sampler.k);
            sampler.temperature = args.temperature.unwrap_or(sampler.temperature);
            sampler.max_len = args.max_len.unwrap_or(sampler.max_len);
            let io = GenerateIo {
                prompts: args.prompts,
                plots: args.plots,
                lm: args.lm,
                story_lm: args.story_lm,
                weights: args.weights,
                scorers: args.scorers,
                out: args.out,
                trace: args.trace,
            };
            print_json(&cmd_generate(&cfg, mode, &io)?)?
        }
        Command::Evaluate => print!("{}", cmd_evaluate(&cfg)?.to_tsv()),
        Command::Demo { quick, dir } => {
            let summary = cmd_demo(cfg.seed, quick, &dir)?;
            print!("{}", summary.text);
            info!("demo finished in {:.1?}", started.elapsed());
            if !summary.passed() {
                eprintln!("aristo: demo check failed");
                return Ok(ExitCode::from(3));
            }
            return Ok(ExitCode::SUCCESS);
        }
    }
    info!("finished in {:.1?}", started.elapsed());
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("aristo: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
