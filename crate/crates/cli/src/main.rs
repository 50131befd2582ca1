use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mbsar::signal::{aperture_sampling_check, SamplingCheck};
use mbsar_cli::bench::{bench, write_report};
use mbsar_cli::config::{load, Loaded, TrajectorySource};
use mbsar_cli::error::CliError;
use mbsar_cli::pipeline::{self, Run};

#[derive(Parser)]
#[command(name = "mbsar", version, about = "Multi-beam automotive SAR simulation and imaging")]
struct Cli {
    /// Worker threads (default: MBSAR_WORKERS, else all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario TOML, or a run manifest to reproduce.
    #[arg(long, short)]
    config: PathBuf,

    /// Override a config key, e.g. `--set radar.noise_std=0.1`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Output directory (default: `output_dir` from the config).
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FocusArgs {
    #[command(flatten)]
    common: Common,

    /// Trajectory used for focusing.
    #[arg(long, value_parser = ["true", "estimated"])]
    trajectory: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize raw data, range-compress it and simulate the sensors.
    Simulate(Common),
    /// Fuse the logged sensor measurements into a trajectory estimate.
    Fuse(Common),
    /// Focus the multi-beam images.
    Focus(FocusArgs),
    /// Build the RGB composite from three focused beams.
    Compose(Common),
    /// Run every stage and write a manifest.
    Pipeline(FocusArgs),
    /// Time focusing for several worker counts.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Comma-separated worker counts.
        #[arg(long = "worker-counts", value_delimiter = ',')]
        worker_counts: Option<Vec<usize>>,
        #[arg(long)]
        repetitions: Option<usize>,
    },
    /// Validate a configuration and report sampling diagnostics.
    Check(Common),
}

fn load_common(c: &Common, trajectory: Option<&str>) -> Result<(Loaded, PathBuf), CliError> {
    let mut overrides = c.overrides.clone();
    if let Some(t) = trajectory {
        overrides.push(format!("focus.trajectory=\"{t}\""));
    }
    let loaded = load(&c.config, &overrides)?;
    let out = c
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&loaded.scenario.config.output_dir));
    Ok((loaded, out))
}

fn check(loaded: &Loaded) -> Result<(), CliError> {
    let s = &loaded.scenario;
    let truth = pipeline::true_trajectory(s)?;
    println!("configuration `{}` is valid", s.config.name);
    println!(
        "  pulses {}  fast-time samples {}  range bins of {:.4} m",
        truth.len(),
        s.params.fast_time_samples,
        s.params.bin_spacing(s.config.radar.zero_pad_factor)
    );
    println!("  grid {} x {} at {:.4} x {:.4} m", s.grid.nx, s.grid.ny, s.grid.dx, s.grid.dy);
    if s.grid.undersampled(&s.params) {
        println!("  warning: grid spacing is coarser than half the range resolution");
    }
    for (b, beam) in s.beams.iter().enumerate() {
        match aperture_sampling_check(&truth, &s.params, beam, s.channels.len()) {
            SamplingCheck::Ok { displacement, limit } => {
                println!("  beam {b}: aperture sampling ok ({displacement:.3e} <= {limit:.3e} m)")
            }
            SamplingCheck::Warning {
                displacement,
                limit,
                max_unambiguous_speed,
            } => println!(
                "  beam {b}: warning, aperture undersampled ({displacement:.3e} > {limit:.3e} m); \
                 unambiguous up to {max_unambiguous_speed:.3} m/s"
            ),
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate(c) => {
            let (loaded, out) = load_common(&c, None)?;
            let mut run = Run::new(&loaded.scenario, &out)?;
            pipeline::simulate(&mut run)?;
        }
        Command::Fuse(c) => {
            let (loaded, out) = load_common(&c, None)?;
            pipeline::run_fuse(&loaded.scenario, &out)?;
        }
        Command::Focus(f) => {
            let (loaded, out) = load_common(&f.common, f.trajectory.as_deref())?;
            pipeline::run_focus(&loaded.scenario, &out)?;
        }
        Command::Compose(c) => {
            let (loaded, out) = load_common(&c, None)?;
            pipeline::run_compose(&loaded.scenario, &out)?;
        }
        Command::Pipeline(f) => {
            let (loaded, out) = load_common(&f.common, f.trajectory.as_deref())?;
            let r = pipeline::run_pipeline(&loaded, &out)?;
            let src = match loaded.scenario.config.focus.trajectory {
                TrajectorySource::True => "true",
                TrajectorySource::Estimated => "estimated",
            };
            println!(
                "{} pulses, {} beams focused on the {src} trajectory; artifacts in {}",
                r.truth.len(),
                r.images.len(),
                out.display()
            );
        }
        Command::Bench {
            common,
            worker_counts,
            repetitions,
        } => {
            let (loaded, out) = load_common(&common, None)?;
            let cfg = &loaded.scenario.config.bench;
            let workers = worker_counts.unwrap_or_else(|| cfg.workers.clone());
            let report = bench(&loaded.scenario, &workers, repetitions.unwrap_or(cfg.repetitions))?;
            for e in &report.entries {
                println!(
                    "workers {:>3}  median {:>8.3} s  {:>10.3e} px*pulse/s  speedup {:>5.2}  {}",
                    e.workers,
                    e.median_seconds,
                    e.throughput,
                    e.speedup,
                    &e.checksum[..16]
                );
            }
            write_report(&report, &out)?;
            if !report.checksums_identical {
                return Err(CliError::Numerical("image checksums differ across worker counts".into()));
            }
        }
        Command::Check(c) => {
            let (loaded, _) = load_common(&c, None)?;
            check(&loaded)?;
        }
    }
    Ok(())
}

fn configure_workers(flag: Option<usize>) -> Result<(), CliError> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("MBSAR_WORKERS") {
            Ok(v) => Some(v.trim().parse::<usize>().map_err(|_| {
                CliError::Config(mbsar_cli::config::ConfigError {
                    key: "MBSAR_WORKERS".into(),
                    line: None,
                    message: format!("`{v}` is not a worker count"),
                })
            })?),
            Err(_) => None,
        },
    };
    if let Some(n) = n.filter(|&n| n > 0) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Numerical(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = configure_workers(cli.workers).and_then(|_| run(cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
