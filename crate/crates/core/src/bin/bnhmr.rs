use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bnhmr::bayesnet::Preset;
use bnhmr::experiment::{ambiguity_check_passes, cmd_eval, cmd_generate, cmd_stats, cmd_train, ExperimentConfig, Regime, OUTPUT_ROOT_ENV};
use bnhmr::synth::AmbiguityProfile;
use bnhmr::{Error, Result};

#[derive(Parser)]
#[command(name = "bnhmr", version, about = "Multi-person body-model estimation with a Bayesian network of conditional heads")]
struct Cli {
    /// Experiment configuration (TOML or JSON); flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Directory that relative paths are resolved against.
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV)]
    output_root: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with manifest and statistics.
    Generate(GenerateArgs),
    /// Train a network and write its checkpoint and loss curve.
    Train(TrainArgs),
    /// Evaluate a checkpoint under the conditioning regimes.
    Eval(EvalArgs),
    /// Summary statistics of an existing dataset.
    Stats(StatsArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Output directory (defaults to the configured training set).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// bedlam-like, diverse, size-distance or noiseless.
    #[arg(long)]
    profile: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// naive_bayes, condimen, variant1 or variant2.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Defaults to the checkpoint of the configured run directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    /// Comma-separated regimes: none, intr, intr_dist, intr_shape, intr_shape_dist.
    #[arg(long, value_delimiter = ',')]
    regimes: Option<Vec<String>>,
    /// Comma-separated view counts.
    #[arg(long, value_delimiter = ',')]
    views: Option<Vec<usize>>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    data: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    config.output_root = cli.output_root;
    match cli.command {
        Command::Generate(a) => {
            if let Some(v) = a.scenes {
                config.dataset.scenes = v;
            }
            if let Some(v) = a.views {
                config.dataset.views = v;
            }
            if let Some(v) = a.seed {
                config.dataset.seed = v;
            }
            if let Some(p) = &a.profile {
                config.dataset.profile = AmbiguityProfile::parse(p)?;
            }
            let dir = config.resolve(a.out.as_ref().unwrap_or(&config.train_data));
            let (manifest, stats) = cmd_generate(&config, &dir)?;
            println!("wrote {} scenes to {} (hash {})", manifest.count, dir.display(), manifest.content_hash);
            println!(
                "probe R^2: extent {:.3}, depth {:.3} ({})",
                stats.probe_extent_r2,
                stats.probe_depth_r2,
                if ambiguity_check_passes(&stats) { "ambiguity check passed" } else { "ambiguity check failed" }
            );
        }
        Command::Train(a) => {
            if let Some(v) = a.data {
                config.train_data = v;
            }
            if let Some(p) = &a.preset {
                config.preset = Preset::parse(p)?;
            }
            if let Some(v) = a.lr {
                config.train.learning_rate = v;
            }
            if let Some(v) = a.steps {
                config.train.steps = v;
            }
            if let Some(v) = a.batch_size {
                config.train.batch_size = v;
            }
            if let Some(v) = a.seed {
                config.seed = v;
            }
            if let Some(v) = a.out {
                config.output_dir = v;
            }
            let outcome = cmd_train(&config)?;
            if let (Some(first), Some(last)) = (outcome.curve.first(), outcome.curve.last()) {
                println!("l_prob {:.3} -> {:.3} over {} steps", first.l_prob, last.l_prob, outcome.curve.len());
            }
            println!("checkpoint {}", outcome.checkpoint.display());
        }
        Command::Eval(a) => {
            if let Some(v) = a.data {
                config.eval_data = v;
            }
            if let Some(p) = &a.preset {
                config.preset = Preset::parse(p)?;
            }
            if let Some(rs) = &a.regimes {
                config.regimes = rs.iter().map(|r| Regime::parse(r)).collect::<Result<_>>()?;
            }
            if let Some(v) = a.views {
                config.view_counts = v;
            }
            if let Some(v) = a.out {
                config.output_dir = v;
            }
            let checkpoint = a.checkpoint.map(|c| config.resolve(&c)).unwrap_or_else(|| config.checkpoint_path());
            for (regime, views, r) in cmd_eval(&config, &checkpoint)? {
                println!(
                    "{regime:<16} views {views}  PVE {:.1}  PA-PVE {:.1}  PJE {:.1}  PE {:.1}  PCK-all {:.3}",
                    r.pve, r.pa_pve, r.pje, r.pe, r.pck_all
                );
            }
        }
        Command::Stats(a) => {
            let dir = config.resolve(a.data.as_ref().unwrap_or(&config.train_data));
            let s = cmd_stats(&dir)?;
            println!(
                "{} scenes, {} people, depth {:.2}..{:.2} m, beta0 kurtosis {:.3}, probe R^2 extent {:.3} depth {:.3}",
                s.scenes, s.people, s.depth_min, s.depth_max, s.beta0_excess_kurtosis, s.probe_extent_r2, s.probe_depth_r2
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NonFiniteLoss { .. } => ExitCode::from(3),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
