//! `aneug`: runs the generation pipeline one artifact-producing step at a time.
//!
//! Exit codes: 0 success, 1 usage error, 2 validation failure (bad config,
//! arguments, inputs or missing upstream artifacts), 3 numeric failure.
//! `ANEUG_WORKERS` sets the worker-pool size.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aneug_core::error::{Error, Result};
use aneug_core::markers::Marker;
use aneug_core::toolkit::{worker_pool, GenerateArgs, MorphArgs, Pipeline, PipelineConfig};
use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use log::info;

#[derive(Debug, Parser)]
#[command(name = "aneug", version, about = "Two-stage generation of aneurysm complexes and parent vessels")]
struct Cli {
    /// Pipeline configuration (TOML). Defaults apply when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the configured seed for every stream.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample a synthetic cohort (meshes, tokens, centerline polylines) into the dataset directory.
    SynthData,
    /// Fit GHD tokens to every dataset mesh.
    FitGhd,
    /// Fit Fourier centerline branches to every dataset polyline.
    FitCenterline,
    /// Train the unconditional stage-I VAE on the fitted tokens.
    TrainStage1,
    /// Fit the condition distribution from unconditional stage-I samples.
    EstimateConditions,
    /// Fine-tune stage I with marker conditions.
    TrainStage1Conditional,
    /// Train the stage-II centerline VAE.
    TrainStage2,
    /// Sample complexes and vessels, and assemble meshes.
    Generate {
        /// Number of shapes; the configured count when omitted.
        #[arg(long)]
        count: Option<usize>,
        /// Fixed condition values, comma separated, in the model's marker order.
        #[arg(long, value_delimiter = ',')]
        condition: Option<Vec<f64>>,
        /// Sample the unconditional stage-I model even if a conditional one exists.
        #[arg(long)]
        unconditional: bool,
        /// Output directory (default <output>/generated).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fix one shape's latent code and sweep a condition.
    Morph {
        #[arg(long, default_value = "AR")]
        marker: Marker,
        #[arg(long)]
        from: f64,
        #[arg(long)]
        to: f64,
        #[arg(long, default_value_t = 5)]
        steps: usize,
        /// Dataset shape id (default: the first).
        #[arg(long)]
        shape: Option<String>,
        /// Output directory (default <output>/morph).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute NW, AR, LI and V for every mesh in a directory.
    Markers {
        /// Mesh directory (default: the dataset).
        #[arg(long)]
        dir: Option<PathBuf>,
        /// CSV path (default <output>/markers.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare two cohorts: CD_v, CD_n, TMD and, when B carries requested conditions, CA.
    ///
    /// `real` and `generated` name the dataset and <output>/generated unless
    /// a directory of that name exists.
    Eval {
        #[arg(long)]
        cohort_a: PathBuf,
        #[arg(long)]
        cohort_b: PathBuf,
        /// Output directory (default <output>/eval).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let cfg = match &cli.config {
        Some(p) => PipelineConfig::read(p)?,
        None => {
            let c = PipelineConfig::default();
            c.validate()?;
            c
        }
    };
    Ok(match cli.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn cohort_dir(p: &Pipeline, name: &Path) -> PathBuf {
    if name.exists() {
        return name.to_path_buf();
    }
    match name.to_str() {
        Some("real") => p.cfg.dataset_dir(),
        Some("generated") => p.cfg.output().join("generated"),
        _ => name.to_path_buf(),
    }
}

fn run(cli: Cli) -> Result<()> {
    let p = Pipeline::new(load_config(&cli)?);
    match cli.command {
        Command::SynthData => {
            p.synth_data()?;
        }
        Command::FitGhd => {
            let rows = p.fit_ghd()?;
            let unconverged = rows.iter().filter(|r| !r.converged).count();
            info!("fitted {} shapes ({unconverged} hit the iteration cap)", rows.len());
        }
        Command::FitCenterline => {
            let rows = p.fit_centerline()?;
            info!("fitted centerlines of {} shapes", rows.len());
        }
        Command::TrainStage1 => {
            p.train_stage1()?;
        }
        Command::EstimateConditions => {
            p.estimate_conditions()?;
        }
        Command::TrainStage1Conditional => {
            p.train_stage1_conditional()?;
        }
        Command::TrainStage2 => {
            p.train_stage2()?;
        }
        Command::Generate {
            count,
            condition,
            unconditional,
            out,
        } => {
            let args = GenerateArgs {
                count: count.unwrap_or(p.cfg.generate.count),
                seed: p.cfg.seed,
                condition,
                unconditional,
                out,
            };
            if args.count == 0 {
                return Err(Error::InvalidArgument("--count must be positive".into()));
            }
            let shapes = p.generate(&args)?;
            let invalid = shapes.iter().filter(|s| !s.valid).count();
            if invalid > 0 {
                log::warn!("{invalid} of {} generated shapes failed vessel assembly", shapes.len());
            }
        }
        Command::Morph {
            marker,
            from,
            to,
            steps,
            shape,
            out,
        } => {
            if steps < 2 {
                return Err(Error::InvalidArgument("--steps must be at least 2".into()));
            }
            p.morph(&MorphArgs {
                marker,
                from,
                to,
                steps,
                shape,
                out,
            })?;
        }
        Command::Markers { dir, out } => {
            p.markers(dir.as_deref(), out.as_deref())?;
        }
        Command::Eval { cohort_a, cohort_b, out } => {
            let a = cohort_dir(&p, &cohort_a);
            let b = cohort_dir(&p, &cohort_b);
            let r = p.eval(&a, &b, out.as_deref())?;
            println!("CD_v {:e}  CD_n {:e}  TMD {:e}  CA {}", r.cd_v, r.cd_n, r.tmd, r.ca_percent.map_or("-".into(), |c| format!("{c:.2}%")));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    let result = worker_pool().and_then(|pool| pool.install(|| run(cli)));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
    }
}
