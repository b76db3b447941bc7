use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rhythmic_core::bundle::Bundle;
use rhythmic_core::experiment::{predict_from_bundle, run_experiment, ExperimentConfig, ExperimentKind, Summary};
use rhythmic_core::learner::PhaseMode;
use rhythmic_core::phasenet::write_order_csv;
use rhythmic_steerd::SessionConfig;

/// Phase-modulated reservoir experiments.
#[derive(Parser)]
#[command(name = "rhythmic", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment config; missing fields come from the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed of the driving trajectory.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SystemArg {
    Thomas,
    Lorenz,
    Mackey,
}

impl SystemArg {
    fn detect_kind(self) -> ExperimentKind {
        match self {
            SystemArg::Thomas => ExperimentKind::DetectThomas,
            SystemArg::Lorenz => ExperimentKind::DetectLorenz,
            SystemArg::Mackey => ExperimentKind::DetectMackey,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Coupled,
    Frozen,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate a system under its parameter schedule and write trajectory.csv.
    Simulate {
        #[arg(long, value_enum, default_value = "thomas")]
        system: SystemArg,
        #[command(flatten)]
        common: Common,
    },
    /// Drive a reservoir with a nonstationary signal and detect regime changes from R.
    Detect {
        #[arg(long, value_enum, default_value = "thomas")]
        system: SystemArg,
        #[command(flatten)]
        common: Common,
    },
    /// Train a twin on alternating two-state data and write a model bundle.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Warm a bundled twin on a constant-parameter trajectory and run closed loop.
    Predict {
        /// Bundle directory written by `train`.
        #[arg(long)]
        bundle: PathBuf,
        /// System parameter of the warm-up trajectory.
        #[arg(long)]
        lambda: f64,
        /// Warm-up frames driven open loop.
        #[arg(long, default_value_t = 4000)]
        warmup: usize,
        /// Closed-loop frames.
        #[arg(long, default_value_t = 6000)]
        horizon: usize,
        /// Phase dynamics during the closed loop.
        #[arg(long, value_enum, default_value = "frozen")]
        mode: ModeArg,
        /// Initial condition of the warm-up trajectory.
        #[arg(long, default_value_t = 100)]
        seed: u64,
        #[arg(long, default_value = "out/predict")]
        out: PathBuf,
    },
    /// Train, lock onto each test state by mean-phase targeting, predict.
    Target {
        #[command(flatten)]
        common: Common,
    },
    /// The same two-state protocol with unmodulated links.
    Baseline {
        #[command(flatten)]
        common: Common,
    },
    /// Closed-loop predictions over a series of frozen mean phases.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Serve live steering sessions over HTTP and WebSocket.
    Serve {
        /// Default bundle for sessions that do not name one.
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, default_value_t = 8787)]
        port: u16,
        /// Frames produced per wall-clock second.
        #[arg(long, default_value_t = 30.0)]
        fps: f64,
        /// Directory for per-session replay logs.
        #[arg(long, default_value = "replays")]
        replay_dir: PathBuf,
    },
}

fn load_config(kind: ExperimentKind, common: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            ExperimentConfig::from_json(&text)?
        }
        None => ExperimentConfig::preset(kind),
    };
    let compatible = cfg.experiment == kind || (kind.is_detection() && cfg.experiment.is_detection());
    if !compatible {
        return Err(rhythmic_core::Error::Config(format!("config is for {:?}, this command runs {kind:?}", cfg.experiment)).into());
    }
    if let Some(seed) = common.seed {
        cfg.seeds.data = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn report(summary: &Summary, dir: &Path) {
    match summary {
        Summary::Detect(s) => {
            for g in &s.regimes {
                println!("regime lambda={} frames {}..{}  R = {:.5} ± {:.5}", g.lambda, g.start, g.end, g.r_mean, g.r_std);
            }
            for (f, c) in s.truth_switches.iter().chain(&s.collapse_frame).zip(&s.switch_latency_cycles) {
                match c {
                    Some(c) => println!("switch at frame {f}: detected after {c:.1} cycles"),
                    None => println!("switch at frame {f}: not detected"),
                }
            }
            if let Some(c) = s.r_lambda_correlation {
                println!("corr(smoothed R, lambda) = {c:.3}");
            }
        }
        Summary::Twin(s) => {
            println!("teacher-forced NRMSE {:.3e}", s.train_nrmse);
            for st in &s.states {
                match &st.predicted {
                    Some(p) => println!(
                        "lambda {}: predicted {:?} b_hat {} (truth {:?})",
                        st.lambda,
                        p.class,
                        p.b_hat.map_or("-".into(), |b| format!("{b:.4}")),
                        st.truth.class
                    ),
                    None => println!("lambda {}: {}", st.lambda, st.error.as_deref().unwrap_or("no prediction")),
                }
            }
            for p in &s.sweep {
                let b = p.predicted.as_ref().and_then(|a| a.b_hat).map_or("-".into(), |b| format!("{b:.4}"));
                println!("mean phase {:+.3}: b_hat {b}", p.mean_phase);
            }
        }
    }
    println!("artifacts in {}", dir.display());
}

fn experiment(kind: ExperimentKind, common: &Common) -> anyhow::Result<()> {
    let cfg = load_config(kind, common)?;
    log::info!("running {:?} into {}", cfg.experiment, cfg.output_dir.display());
    let summary = run_experiment(&cfg)?;
    report(&summary, &cfg.output_dir);
    Ok(())
}

fn simulate(system: SystemArg, common: &Common) -> anyhow::Result<()> {
    let cfg = load_config(system.detect_kind(), common)?;
    let traj = rhythmic_core::dynsys::simulate(&cfg.system, &cfg.schedule, &cfg.sim, cfg.seeds.data)?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    let path = cfg.output_dir.join("trajectory.csv");
    let mut w = std::io::BufWriter::new(std::fs::File::create(&path)?);
    traj.write_csv(&mut w)?;
    println!("{} frames of {} written to {}", traj.len(), cfg.system.name(), path.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn predict(bundle: &Path, lambda: f64, warmup: usize, horizon: usize, mode: ModeArg, seed: u64, out: &Path) -> anyhow::Result<()> {
    let bundle = Bundle::load(bundle)?;
    let mode = match mode {
        ModeArg::Coupled => PhaseMode::Coupled,
        ModeArg::Frozen => PhaseMode::Frozen,
    };
    let (traj, orders) = predict_from_bundle(&bundle, lambda, warmup, horizon, mode, seed)?;
    std::fs::create_dir_all(out)?;
    traj.write_csv(std::io::BufWriter::new(std::fs::File::create(out.join("prediction.csv"))?))?;
    write_order_csv(&orders, std::io::BufWriter::new(std::fs::File::create(out.join("prediction_order.csv"))?))?;
    if traj.len() >= rhythmic_core::analysis::MIN_CLASSIFY_FRAMES {
        let a = rhythmic_core::experiment::attractor_report(&traj, &bundle.manifest.system)?;
        println!("{:?}, b_hat {:?}", a.class, a.b_hat);
    }
    println!("artifacts in {}", out.display());
    Ok(())
}

fn serve(bundle: PathBuf, port: u16, fps: f64, replay_dir: PathBuf) -> anyhow::Result<()> {
    if !(fps > 0.0) {
        bail!(rhythmic_core::Error::Config("fps must be positive".into()));
    }
    // Validate up front so a bad bundle fails before binding the port.
    Bundle::load(&bundle)?;
    let defaults = SessionConfig { fps, ..SessionConfig::default() };
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(rhythmic_steerd::serve(([127, 0, 0, 1], port).into(), bundle, defaults, replay_dir))?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Simulate { system, common } => simulate(system, &common),
        Command::Detect { system, common } => experiment(system.detect_kind(), &common),
        Command::Train { common } => experiment(ExperimentKind::TwinTrain, &common),
        Command::Predict { bundle, lambda, warmup, horizon, mode, seed, out } => {
            predict(&bundle, lambda, warmup, horizon, mode, seed, &out)
        }
        Command::Target { common } => experiment(ExperimentKind::TwinTarget, &common),
        Command::Baseline { common } => experiment(ExperimentKind::TwinBaseline, &common),
        Command::Sweep { common } => experiment(ExperimentKind::TwinSweep, &common),
        Command::Serve { bundle, port, fps, replay_dir } => serve(bundle, port, fps, replay_dir),
    }
}

/// Exit status per error category; 1 is anything uncategorized.
fn exit_code(category: &str) -> u8 {
    match category {
        "config" => 2,
        "io" => 3,
        "format" => 4,
        "data" => 5,
        "integration" => 6,
        "dynamics" => 7,
        "numerics" => 8,
        "shape" => 9,
        "topology" => 10,
        "domain" => 11,
        "history" => 12,
        "service" => 13,
        _ => 1,
    }
}

fn category(err: &anyhow::Error) -> &'static str {
    if let Some(e) = err.downcast_ref::<rhythmic_core::Error>() {
        e.category()
    } else if let Some(e) = err.downcast_ref::<rhythmic_steerd::SteerError>() {
        e.category()
    } else if err.downcast_ref::<std::io::Error>().is_some() {
        "io"
    } else {
        "other"
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RHYTHMIC_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let cat = category(&err);
            eprintln!("error[{cat}]: {err:#}");
            ExitCode::from(exit_code(cat))
        }
    }
}
