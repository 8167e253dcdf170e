use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use dpe_core::agents::Modality;
use dpe_core::config::{MixtureMode, RunConfig};
use dpe_core::error::DpeError;
use dpe_core::pipeline::{simulate, Pipeline, ProgressFn, Stage};

#[derive(Parser, Debug)]
#[command(name = "dpe", version, about = "Diagnose, generate, filter and train in a closed loop")]
struct Cli {
    /// TOML config file; DPE__SECTION__KEY environment variables override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    workspace: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Use the scripted clients and the synthetic world.
    #[arg(long, global = true)]
    mock: bool,
    /// Ignore the journal and rerun every stage.
    #[arg(long, global = true)]
    force: bool,
    /// Suppress progress lines.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Diagnose the current model on the pool (iterations/{k}/report.json).
    Diagnose(IterArgs),
    /// Generate a quota-exact dataset from the iteration's report.
    Generate {
        #[command(flatten)]
        iter: IterArgs,
        #[arg(long)]
        budget: Option<u64>,
        #[arg(long, value_enum)]
        mixture: Option<Mixture>,
    },
    /// Profile pass rates and keep the moderately difficult samples.
    Filter(IterArgs),
    /// Run GRPO on the kept samples and write the checkpoint.
    Train(IterArgs),
    /// Run every iteration, resuming from the journal.
    Evolve {
        #[arg(long)]
        iterations: Option<u32>,
    },
    /// Paired guided-versus-uniform run on the synthetic world.
    Simulate {
        #[arg(long)]
        iterations: Option<u32>,
        #[arg(long)]
        budget: Option<u64>,
    },
    /// Mean pairwise cosine distance of the dataset's embeddings.
    Diversity {
        #[command(flatten)]
        iter: IterArgs,
        #[arg(long, value_enum, default_value = "text")]
        modality: ModalityArg,
    },
    /// Judge-based quality score of a sample of the dataset.
    Quality {
        #[command(flatten)]
        iter: IterArgs,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Print the effective configuration as TOML.
    Config,
}

#[derive(clap::Args, Debug)]
struct IterArgs {
    #[arg(long, short = 'k', default_value_t = 0)]
    iteration: u32,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Mixture {
    Guided,
    Uniform,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ModalityArg {
    Text,
    Image,
}

fn load_config(cli: &Cli) -> Result<RunConfig, DpeError> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(ws) = &cli.workspace {
        cfg.run.workspace = ws.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
    }
    if cli.mock {
        cfg.run.mock = true;
    }
    match &cli.command {
        Command::Generate { budget, mixture, .. } => {
            if let Some(b) = budget {
                cfg.generation.budget = *b;
            }
            if let Some(m) = mixture {
                cfg.generation.mixture = match m {
                    Mixture::Guided => MixtureMode::Guided,
                    Mixture::Uniform => MixtureMode::Uniform,
                };
            }
        }
        Command::Evolve { iterations } => {
            if let Some(n) = iterations {
                cfg.run.iterations = *n;
            }
        }
        Command::Simulate { iterations, budget } => {
            if let Some(n) = iterations {
                cfg.run.iterations = *n;
            }
            if let Some(b) = budget {
                cfg.generation.budget = *b;
            }
        }
        Command::Quality { samples: Some(n), .. } => cfg.analysis.judge_samples = *n,
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn run(cli: &Cli) -> Result<(), DpeError> {
    let cfg = load_config(cli)?;
    let quiet = cli.quiet;
    let progress: ProgressFn = Arc::new(move |m: &str| {
        if !quiet {
            eprintln!("{m}");
        }
    });
    if let Command::Config = cli.command {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    if let Command::Simulate { .. } = cli.command {
        let report = simulate(&cfg, cli.force, progress)?;
        println!(
            "weakest initial category: {} (largest alpha in iteration 0: {})",
            report.weakest_initial.id(),
            report.weakest_gets_largest_alpha
        );
        println!(
            "min skill guided {:.4} ({}) vs uniform {:.4} ({}), gain {:+.4}",
            report.guided.min_skill,
            report.guided.min_category.id(),
            report.uniform.min_skill,
            report.uniform.min_category.id(),
            report.min_skill_gain
        );
        println!("wrote {}", cfg.run.workspace.join("simulate").join("simulation.json").display());
        return Ok(());
    }
    let pipeline = Pipeline::from_config(cfg)?.with_force(cli.force).with_progress(progress);
    let stage = |s: Stage, k: u32| -> Result<(), DpeError> {
        let path = pipeline.run_stage(s, k)?;
        println!("wrote {}", path.display());
        Ok(())
    };
    match &cli.command {
        Command::Diagnose(a) => stage(Stage::Diagnose, a.iteration)?,
        Command::Generate { iter, .. } => stage(Stage::Generate, iter.iteration)?,
        Command::Filter(a) => stage(Stage::Filter, a.iteration)?,
        Command::Train(a) => stage(Stage::Train, a.iteration)?,
        Command::Evolve { .. } => {
            let summary = pipeline.evolve()?;
            println!("{} iterations, {} summary rows", summary.iterations, summary.rows.len());
            println!("wrote {}", pipeline.workspace.summary_csv().display());
        }
        Command::Diversity { iter, modality } => {
            let m = match modality {
                ModalityArg::Text => Modality::Text,
                ModalityArg::Image => Modality::Image,
            };
            print_json(&pipeline.run_diversity(iter.iteration, m)?);
        }
        Command::Quality { iter, .. } => print_json(&pipeline.run_quality(iter.iteration)?),
        Command::Simulate { .. } | Command::Config => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_env("DPE_LOG"))
        .with_writer(std::io::stderr)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(u8::try_from(e.exit_code()).unwrap_or(1))
        }
    }
}
