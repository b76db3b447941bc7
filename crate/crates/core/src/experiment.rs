//! Configuration-driven protocols: regime detection from the order parameter
//! and the two-state digital-twin runs. Every run writes CSV plot data and a
//! versioned `summary.json` into its output directory.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    classify_attractor, cycle_period, detect_equilibrium_shift, mean, moving_average, pearson, AttractorClass, ChangeReport,
};
use crate::bundle::{Bundle, Manifest, BUNDLE_FORMAT};
use crate::dynsys::{estimate_thomas_b, simulate, ParamSchedule, SimOptions, SystemSpec, Trajectory};
use crate::error::{Error, Result};
use crate::learner::{
    closed_loop_predict, drive, harvest_states, ridge_fit, set_mean_phase, target_mean_phase, teacher_forced_nrmse, InputScaler, LossKind,
    ModelConfig, PhaseMode, TargetingConfig, TrainConfig, Twin, UpdateOrder,
};
use crate::phasenet::{global_order, write_order_csv, OrderSample, PhaseConfig};
use crate::reservoir::ReservoirConfig;
use crate::rng::seeded;

pub const SUMMARY_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExperimentKind {
    DetectThomas,
    DetectMackey,
    DetectLorenz,
    TwinTrain,
    TwinTarget,
    TwinBaseline,
    /// Closed-loop runs at a series of frozen mean phases.
    TwinSweep,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 7] = [
        ExperimentKind::DetectThomas,
        ExperimentKind::DetectMackey,
        ExperimentKind::DetectLorenz,
        ExperimentKind::TwinTrain,
        ExperimentKind::TwinTarget,
        ExperimentKind::TwinBaseline,
        ExperimentKind::TwinSweep,
    ];

    pub fn is_detection(self) -> bool {
        matches!(self, ExperimentKind::DetectThomas | ExperimentKind::DetectMackey | ExperimentKind::DetectLorenz)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub window: usize,
    pub k_sigma: f64,
    /// Moving-average window for correlating R with a drifting parameter.
    pub smooth_window: usize,
    /// Frames skipped after each regime start when measuring plateau statistics.
    pub settle_frames: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self { window: 200, k_sigma: 4.0, smooth_window: 300, settle_frames: 3000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwinProtocol {
    /// The two parameter values alternated in the training data.
    pub lambdas: [f64; 2],
    /// Dwell time range, in frames, of each training segment.
    pub dwell_min: usize,
    pub dwell_max: usize,
    /// Length of each test trajectory used to warm up before prediction.
    pub test_frames: usize,
    /// Closed-loop horizon.
    pub horizon: usize,
    /// Leading closed-loop frames excluded from attractor statistics.
    pub discard: usize,
    /// Number of frozen mean phases visited by a sweep.
    pub sweep_values: usize,
    /// Index into `lambdas` of the test state warmed up before a sweep.
    pub sweep_state: usize,
}

impl Default for TwinProtocol {
    fn default() -> Self {
        Self {
            lambdas: [0.18, 0.29],
            dwell_min: 1500,
            dwell_max: 3000,
            test_frames: 4000,
            horizon: 6000,
            discard: 1000,
            sweep_values: 8,
            sweep_state: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    /// Initial condition of the driving trajectory.
    pub data: u64,
    /// Initial conditions of the test trajectories.
    pub test: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub system: SystemSpec,
    /// Parameter schedule of detection runs; twin runs build theirs from `twin`.
    pub schedule: ParamSchedule,
    pub sim: SimOptions,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub targeting: TargetingConfig,
    pub detector: DetectorConfig,
    pub twin: TwinProtocol,
    pub seeds: Seeds,
    pub output_dir: PathBuf,
}

fn detection_phase() -> PhaseConfig {
    PhaseConfig { eps1: -0.2, eps2: 1.0, omega0: 0.01, lambda_density: 0.5, gamma: 0.0, phase_density: 0.05, dt: 0.03 }
}

impl ExperimentConfig {
    /// Calibrated defaults for each protocol.
    pub fn preset(kind: ExperimentKind) -> Self {
        let detect_reservoir = ReservoirConfig {
            n_nodes: 300,
            node_density: 0.02,
            spectral_target: 0.9,
            alpha: 0.2,
            input_scale: 2.0,
            bias: 0.0,
            mod_depth: 0.4,
        };
        let twin_reservoir = ReservoirConfig {
            n_nodes: 300,
            node_density: 0.021233736128596,
            spectral_target: 0.912502572322844,
            alpha: 0.3,
            input_scale: 1.693385468975165,
            bias: 1.0,
            mod_depth: 0.35346657258742,
        };
        let base = ExperimentConfig {
            experiment: kind,
            system: SystemSpec::Thomas,
            schedule: ParamSchedule::constant(0.18),
            sim: SimOptions::for_system(&SystemSpec::Thomas, 16_000),
            model: ModelConfig {
                reservoir: detect_reservoir.clone(),
                phase: detection_phase(),
                order: UpdateOrder::NodeThenPhase,
                seed: 7,
            },
            train: TrainConfig { warmup_steps: 1000, train_steps: 20_000, ridge_beta: 7e-10, predict_warmup_steps: 3000 },
            targeting: TargetingConfig { sweep_omega: 1.0, sweep_duration: 400, ..Default::default() },
            detector: DetectorConfig::default(),
            twin: TwinProtocol::default(),
            seeds: Seeds { data: 5, test: 100 },
            output_dir: PathBuf::from(format!("out/{kind:?}")),
        };
        match kind {
            ExperimentKind::DetectThomas => {
                let mut c = base;
                c.schedule = ParamSchedule::steps_at_frames(0.18, c.sim.frame_dt(), &[(8000, 0.29)]);
                c
            }
            ExperimentKind::DetectMackey => {
                let spec = SystemSpec::mackey_glass();
                let mut c = base;
                c.system = spec;
                c.sim = SimOptions::for_system(&spec, 20_000);
                c.sim.steps_per_frame = 10;
                c.schedule = ParamSchedule::Sinusoid { center: 22.0, amplitude: 2.0, angular_frequency: 0.0035 };
                c.model.phase = PhaseConfig { eps1: -0.386096924293831, omega0: 0.05, dt: 1.0, ..detection_phase() };
                c.model.reservoir = ReservoirConfig {
                    input_scale: 0.821904319238410,
                    bias: 0.067257978488971,
                    alpha: 0.9,
                    spectral_target: 1.2,
                    ..detect_reservoir
                };
                c.model.seed = 83;
                c
            }
            ExperimentKind::DetectLorenz => {
                let spec = SystemSpec::lorenz();
                let mut c = base;
                c.system = spec;
                c.sim = SimOptions::for_system(&spec, 20_000);
                c.sim.steps_per_frame = 4;
                c.schedule = ParamSchedule::steps_at_frames(24.5, c.sim.frame_dt(), &[(5000, 23.5)]);
                c.seeds.data = 1;
                c
            }
            _ => {
                let mut c = base;
                c.sim = SimOptions::for_system(&SystemSpec::Thomas, 0);
                c.sim.steps_per_frame = 6;
                c.model.reservoir = twin_reservoir;
                c.model.phase.dt = 0.1;
                c.model.phase.phase_density = 0.046388444974290;
                c.model.seed = 68;
                c.train.ridge_beta = 1.712856259047195e-10;
                c.targeting = TargetingConfig {
                    sweep_omega: 0.5,
                    sweep_duration: 200,
                    loss: LossKind::Rollout { horizon: 40 },
                    loss_window: 5,
                    ..c.targeting
                };
                if kind == ExperimentKind::TwinBaseline {
                    c.model.reservoir = ReservoirConfig {
                        node_density: 0.024773702716164,
                        spectral_target: 0.929578485229247,
                        alpha: 0.0,
                        input_scale: 1.833967433615705,
                        bias: 0.3,
                        mod_depth: 0.0,
                        ..c.model.reservoir
                    };
                    c.model.seed = 73;
                    c.train.ridge_beta = 9.652478333117922e-8;
                }
                c
            }
        }
    }

    /// Builds a config from JSON: fields not given fall back to the preset
    /// of the named experiment, merged recursively.
    pub fn from_json(text: &str) -> Result<Self> {
        let user: serde_json::Value = serde_json::from_str(text)?;
        let kind_value = user.get("experiment").ok_or_else(|| Error::Config("config must name an `experiment`".into()))?.clone();
        let kind: ExperimentKind = serde_json::from_value(kind_value)?;
        let mut merged = serde_json::to_value(Self::preset(kind))?;
        merge_json(&mut merged, user);
        let cfg: Self = serde_json::from_value(merged)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        self.schedule.validate()?;
        self.model.reservoir.validate()?;
        self.model.phase.validate()?;
        if self.sim.steps_per_frame == 0 || !(self.sim.dt > 0.0) {
            return Err(Error::Config("sim needs dt > 0 and steps_per_frame >= 1".into()));
        }
        if self.experiment.is_detection() {
            if self.sim.n_frames <= 2 * self.detector.window {
                return Err(Error::Config("detection run shorter than two detector windows".into()));
            }
        } else {
            self.train.validate()?;
            self.targeting.validate(self.model.phase.dt)?;
            let p = &self.twin;
            if p.dwell_min == 0 || p.dwell_min > p.dwell_max {
                return Err(Error::Config("need 0 < dwell_min <= dwell_max".into()));
            }
            if p.discard >= p.horizon {
                return Err(Error::Config("discard must be shorter than the horizon".into()));
            }
            if p.sweep_values == 0 || p.sweep_state > 1 {
                return Err(Error::Config("sweep_values >= 1 and sweep_state in {0, 1} required".into()));
            }
            if p.test_frames < self.train.predict_warmup_steps {
                return Err(Error::Config("test_frames must cover predict_warmup_steps".into()));
            }
        }
        Ok(())
    }
}

fn merge_json(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge_json(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Post-transient statistics of R within one regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeStat {
    pub start: usize,
    pub end: usize,
    pub lambda: f64,
    /// Mean spacing of local maxima of the first component, in frames.
    pub cycle_frames: Option<f64>,
    #[serde(rename = "R_mean")]
    pub r_mean: f64,
    #[serde(rename = "R_std")]
    pub r_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectSummary {
    pub schema: u32,
    pub experiment: ExperimentKind,
    pub system: String,
    pub n_frames: usize,
    pub frame_dt: f64,
    /// Ground-truth frames at which the regime changed.
    pub truth_switches: Vec<usize>,
    /// Last sign change of the first component before a collapse to a fixed point.
    pub collapse_frame: Option<usize>,
    pub regimes: Vec<RegimeStat>,
    pub report: ChangeReport,
    /// For every true switch, frames until the first alarm at or after it.
    pub switch_latency_frames: Vec<Option<usize>>,
    /// The same latencies in cycles of the regime preceding the switch.
    pub switch_latency_cycles: Vec<Option<f64>>,
    /// |difference of the first two regime means| / pooled standard deviation.
    pub plateau_separation: Option<f64>,
    /// Pearson correlation of smoothed R with the parameter.
    pub r_lambda_correlation: Option<f64>,
    /// First frame of the first plateau the detector locked onto.
    pub convergence_frame: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttractorReport {
    pub class: AttractorClass,
    pub b_hat: Option<f64>,
    pub x_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateResult {
    pub lambda: f64,
    pub truth: AttractorReport,
    pub predicted: Option<AttractorReport>,
    /// Set when the closed loop blew up.
    pub error: Option<String>,
    #[serde(rename = "R0")]
    pub r0: Option<f64>,
    pub mean_phase0: Option<f64>,
    pub t_r0: Option<usize>,
    pub frozen_at: Option<usize>,
    pub max_r_drift: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub mean_phase: f64,
    #[serde(rename = "R")]
    pub r: f64,
    pub predicted: Option<AttractorReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwinSummary {
    pub schema: u32,
    pub experiment: ExperimentKind,
    pub train_nrmse: f64,
    pub training_switches: Vec<usize>,
    /// Plateaus of R found in the training order log.
    pub training_report: ChangeReport,
    /// Plateau means of the training log, merged when within 0.01.
    pub training_r_levels: Vec<f64>,
    pub states: Vec<StateResult>,
    pub sweep: Vec<SweepPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Summary {
    Detect(DetectSummary),
    Twin(TwinSummary),
}

fn csv_writer(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn write_traj(dir: &Path, name: &str, traj: &Trajectory) -> Result<()> {
    let mut w = csv_writer(dir, name)?;
    traj.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn write_orders(dir: &Path, name: &str, log: &[OrderSample]) -> Result<()> {
    let mut w = csv_writer(dir, name)?;
    write_order_csv(log, &mut w)?;
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(dir.join(name), text)?;
    Ok(())
}

/// Runs the configured protocol and writes its artifacts to `output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Summary> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    write_json(&cfg.output_dir, "config.json", cfg)?;
    let summary = match cfg.experiment {
        k if k.is_detection() => Summary::Detect(run_detection(cfg)?),
        ExperimentKind::TwinTrain => Summary::Twin(run_twin_train(cfg)?),
        ExperimentKind::TwinTarget | ExperimentKind::TwinBaseline => Summary::Twin(run_twin_states(cfg)?),
        ExperimentKind::TwinSweep => Summary::Twin(run_twin_sweep(cfg)?),
        _ => unreachable!(),
    };
    write_json(&cfg.output_dir, "summary.json", &summary)?;
    Ok(summary)
}

/// Drives a freshly built twin with `traj` in coupled mode from blank state.
pub fn order_series(cfg: &ModelConfig, traj: &Trajectory) -> Result<(Vec<OrderSample>, InputScaler)> {
    let scaler = InputScaler::fit(traj);
    let z = scaler.forward_traj(traj);
    let mut twin = Twin::build(cfg, traj.dim)?;
    let log = drive(&mut twin, &z, 0..z.len(), PhaseMode::Coupled)?;
    Ok((log, scaler))
}

/// Frames at which the recorded parameter changes value.
pub fn switch_frames(traj: &Trajectory) -> Vec<usize> {
    (1..traj.len()).filter(|&i| traj.lambda[i] != traj.lambda[i - 1]).collect()
}

/// Last sign change of the first component, provided the trajectory then
/// stays on one side for at least `quiet` frames.
pub fn collapse_frame(traj: &Trajectory, quiet: usize) -> Option<usize> {
    let x = traj.component(0);
    let last = (1..x.len()).rev().find(|&i| (x[i] > 0.0) != (x[i - 1] > 0.0))?;
    (x.len() - last >= quiet).then_some(last)
}

fn regime_stat(traj: &Trajectory, r: &[f64], start: usize, end: usize, settle: usize) -> RegimeStat {
    let a = (start + settle).min(end.saturating_sub(1));
    let seg = &r[a..end];
    let m = mean(seg);
    let sd = (seg.iter().map(|v| (v - m).powi(2)).sum::<f64>() / seg.len() as f64).sqrt();
    RegimeStat { start, end, lambda: traj.lambda[start], cycle_frames: cycle_period(&traj.component(0)[start..end]), r_mean: m, r_std: sd }
}

fn run_detection(cfg: &ExperimentConfig) -> Result<DetectSummary> {
    let traj = simulate(&cfg.system, &cfg.schedule, &cfg.sim, cfg.seeds.data)?;
    let (log, _) = order_series(&cfg.model, &traj)?;
    let r: Vec<f64> = log.iter().map(|o| o.r).collect();
    let mut truth = switch_frames(&traj);
    let collapse = if cfg.experiment == ExperimentKind::DetectLorenz { collapse_frame(&traj, 1000) } else { None };
    if cfg.experiment == ExperimentKind::DetectMackey {
        // The sinusoid has no discrete switches.
        truth.clear();
    }
    let mut bounds = truth.clone();
    bounds.extend(collapse);
    bounds.sort_unstable();
    let det = &cfg.detector;
    let report = detect_equilibrium_shift(&r, det.window, det.k_sigma)?.with_truth(&bounds);

    let mut edges = vec![0];
    edges.extend(&bounds);
    edges.push(traj.len());
    let regimes: Vec<RegimeStat> =
        edges.windows(2).filter(|w| w[1] > w[0]).map(|w| regime_stat(&traj, &r, w[0], w[1], det.settle_frames)).collect();

    let switch_latency_frames: Vec<Option<usize>> = bounds.iter().map(|&s| report.latency_after(s)).collect();
    let switch_latency_cycles = bounds
        .iter()
        .zip(&switch_latency_frames)
        .map(|(&s, lat)| {
            let cycle = regimes.iter().find(|g| g.end == s).and_then(|g| g.cycle_frames)?;
            lat.map(|l| l as f64 / cycle)
        })
        .collect();
    let plateau_separation = (regimes.len() >= 2).then(|| {
        let (a, b) = (&regimes[0], &regimes[1]);
        let pooled = ((a.r_std.powi(2) + b.r_std.powi(2)) / 2.0).sqrt();
        (a.r_mean - b.r_mean).abs() / pooled
    });
    let r_lambda_correlation = if cfg.experiment == ExperimentKind::DetectMackey {
        Some(pearson(&moving_average(&r, det.smooth_window), &traj.lambda)?)
    } else {
        None
    };

    let dir = &cfg.output_dir;
    write_traj(dir, "trajectory.csv", &traj)?;
    write_orders(dir, "order.csv", &log)?;
    write_json(dir, "change_report.json", &report)?;
    Ok(DetectSummary {
        schema: SUMMARY_SCHEMA,
        experiment: cfg.experiment,
        system: cfg.system.name().to_string(),
        n_frames: traj.len(),
        frame_dt: traj.dt,
        truth_switches: truth,
        collapse_frame: collapse,
        regimes,
        convergence_frame: report.plateaus.first().map(|p| p.start),
        report,
        switch_latency_frames,
        switch_latency_cycles,
        plateau_separation,
        r_lambda_correlation,
    })
}

/// Seeded aperiodic alternation between two parameter values.
pub fn alternating_switches(p: &TwinProtocol, n_frames: usize, seed: u64) -> Vec<(usize, f64)> {
    let mut rng = seeded(seed, 0xD3E1);
    let mut switches = Vec::new();
    let (mut frame, mut current) = (0usize, 0usize);
    loop {
        frame += rng.gen_range(p.dwell_min..=p.dwell_max);
        if frame >= n_frames {
            return switches;
        }
        current = 1 - current;
        switches.push((frame, p.lambdas[current]));
    }
}

/// A trained twin and everything needed to drive it.
#[derive(Debug, Clone)]
pub struct Trained {
    pub bundle: Bundle,
    pub training: Trajectory,
    pub order_log: Vec<OrderSample>,
    /// Phases the twin started training from; prediction warm-ups restart here.
    pub initial_phases: crate::phasenet::PhaseState,
    pub nrmse: f64,
}

/// Simulates the two-state training data, harvests and fits the readout.
pub fn train_twin(cfg: &ExperimentConfig) -> Result<Trained> {
    let n = cfg.train.warmup_steps + cfg.train.train_steps + 1;
    let mut sim = cfg.sim;
    sim.n_frames = n;
    let switches = alternating_switches(&cfg.twin, n, cfg.seeds.data);
    let schedule = ParamSchedule::steps_at_frames(cfg.twin.lambdas[0], sim.frame_dt(), &switches);
    let training = simulate(&cfg.system, &schedule, &sim, cfg.seeds.data)?;
    let scaler = InputScaler::fit(&training);
    let z = scaler.forward_traj(&training);
    let mut twin = Twin::build(&cfg.model, training.dim)?;
    let initial_phases = twin.phases.clone();
    let harvest = harvest_states(&z, &mut twin, &cfg.train)?;
    let w_out = ridge_fit(&harvest.states, &harvest.targets, cfg.train.ridge_beta)?;
    let nrmse = teacher_forced_nrmse(&harvest, &w_out);
    twin.nodes = crate::reservoir::ReservoirState::zeros(twin.n_nodes());
    let manifest = Manifest {
        format_version: BUNDLE_FORMAT,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        model: cfg.model.clone(),
        input_dim: training.dim,
        system: cfg.system,
        sim,
        scaler,
        train: cfg.train.clone(),
        targeting: cfg.targeting.clone(),
        data_seed: cfg.seeds.data,
        training_lambdas: cfg.twin.lambdas.to_vec(),
    };
    Ok(Trained { bundle: Bundle { manifest, twin, w_out }, training, order_log: harvest.order_log, initial_phases, nrmse })
}

fn training_summary(cfg: &ExperimentConfig, trained: &Trained) -> Result<TwinSummary> {
    let r: Vec<f64> = trained.order_log.iter().map(|o| o.r).collect();
    let offset = cfg.train.warmup_steps;
    let switches: Vec<usize> = switch_frames(&trained.training).into_iter().filter(|&s| s >= offset).map(|s| s - offset).collect();
    let report = detect_equilibrium_shift(&r, cfg.detector.window, cfg.detector.k_sigma)?.with_truth(&switches);
    let mut levels: Vec<f64> = report.plateaus.iter().map(|p| p.mean).collect();
    levels.sort_by(|a, b| a.total_cmp(b));
    levels.dedup_by(|a, b| (*a - *b).abs() < 0.01);
    Ok(TwinSummary {
        schema: SUMMARY_SCHEMA,
        experiment: cfg.experiment,
        train_nrmse: trained.nrmse,
        training_switches: switches,
        training_report: report,
        training_r_levels: levels,
        states: Vec::new(),
        sweep: Vec::new(),
    })
}

fn run_twin_train(cfg: &ExperimentConfig) -> Result<TwinSummary> {
    let trained = train_twin(cfg)?;
    let dir = &cfg.output_dir;
    write_traj(dir, "training.csv", &trained.training)?;
    write_orders(dir, "training_order.csv", &trained.order_log)?;
    trained.bundle.save(&dir.join("bundle"))?;
    training_summary(cfg, &trained)
}

/// Attractor statistics of a trajectory in physical units.
pub fn attractor_report(traj: &Trajectory, system: &SystemSpec) -> Result<AttractorReport> {
    let class = classify_attractor(traj)?.class;
    let b_hat = match system {
        SystemSpec::Thomas => estimate_thomas_b(traj).ok(),
        _ => None,
    };
    let x = traj.component(0);
    let m = mean(&x);
    let x_std = (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64).sqrt();
    Ok(AttractorReport { class, b_hat, x_std })
}

fn test_trajectory(cfg: &ExperimentConfig, k: usize, frames: usize) -> Result<Trajectory> {
    let mut sim = cfg.sim;
    sim.n_frames = frames;
    simulate(&cfg.system, &ParamSchedule::constant(cfg.twin.lambdas[k]), &sim, cfg.seeds.test + k as u64)
}

/// Closed loop from the twin's current state; returns the physical-unit
/// prediction and its order log.
fn predict(cfg: &ExperimentConfig, trained: &Trained, twin: &mut Twin, mode: PhaseMode) -> Result<(Trajectory, Vec<OrderSample>)> {
    let m = &trained.bundle.manifest;
    let p = closed_loop_predict(twin, mode, &trained.bundle.w_out, cfg.twin.horizon, m.sim.frame_dt())?;
    Ok((m.scaler.inverse_traj(&p.outputs), p.orders))
}

fn evaluate(cfg: &ExperimentConfig, traj: &Trajectory) -> Result<AttractorReport> {
    attractor_report(&traj.slice(cfg.twin.discard..traj.len()), &cfg.system)
}

fn run_twin_states(cfg: &ExperimentConfig) -> Result<TwinSummary> {
    let trained = train_twin(cfg)?;
    let mut summary = training_summary(cfg, &trained)?;
    let dir = &cfg.output_dir;
    let scaler = &trained.bundle.manifest.scaler;
    for k in 0..2 {
        let lambda = cfg.twin.lambdas[k];
        let test = test_trajectory(cfg, k, cfg.twin.test_frames + cfg.twin.horizon)?;
        let truth = evaluate(cfg, &test.slice(cfg.twin.test_frames..test.len()))?;
        let warm = scaler.forward_traj(&test.slice(0..cfg.twin.test_frames));
        let mut twin = trained.bundle.twin.clone();
        twin.reset(trained.initial_phases.clone());
        let mut result = StateResult {
            lambda,
            truth,
            predicted: None,
            error: None,
            r0: None,
            mean_phase0: None,
            t_r0: None,
            frozen_at: None,
            max_r_drift: None,
        };
        if cfg.experiment == ExperimentKind::TwinTarget {
            let out = target_mean_phase(&warm, &mut twin, &trained.bundle.w_out, &cfg.targeting)?;
            drive(&mut twin, &warm, out.frozen_at..warm.len(), PhaseMode::Frozen)?;
            result.r0 = Some(out.r0);
            result.mean_phase0 = Some(out.mean_phase0);
            result.t_r0 = Some(out.t_r0);
            result.frozen_at = Some(out.frozen_at);
            result.max_r_drift = Some(out.max_r_drift);
            let mut w = csv_writer(dir, &format!("sweep_{k}.csv"))?;
            writeln!(w, "frame,R,mean_phase,mean_phase_unwrapped,loss")?;
            for s in &out.sweep {
                writeln!(w, "{},{:.17e},{:.17e},{:.17e},{:.17e}", s.frame, s.r, s.mean_phase, s.mean_phase_unwrapped, s.loss)?;
            }
            w.flush()?;
        } else {
            drive(&mut twin, &warm, 0..warm.len(), PhaseMode::Coupled)?;
        }
        match predict(cfg, &trained, &mut twin, PhaseMode::Frozen) {
            Ok((traj, orders)) => {
                write_traj(dir, &format!("prediction_{k}.csv"), &traj)?;
                write_orders(dir, &format!("prediction_order_{k}.csv"), &orders)?;
                result.predicted = Some(evaluate(cfg, &traj)?);
            }
            Err(e @ Error::PredictionDiverged { .. }) => result.error = Some(e.to_string()),
            Err(e) => return Err(e),
        }
        summary.states.push(result);
    }
    Ok(summary)
}

fn run_twin_sweep(cfg: &ExperimentConfig) -> Result<TwinSummary> {
    let trained = train_twin(cfg)?;
    let mut summary = training_summary(cfg, &trained)?;
    let scaler = &trained.bundle.manifest.scaler;
    let k = cfg.twin.sweep_state;
    let warm = scaler.forward_traj(&test_trajectory(cfg, k, cfg.twin.test_frames)?);
    let mut twin = trained.bundle.twin.clone();
    twin.reset(trained.initial_phases.clone());
    drive(&mut twin, &warm, 0..warm.len(), PhaseMode::Coupled)?;
    let phi0 = global_order(&twin.phases).mean_phase;
    let indices: Vec<usize> = (0..cfg.twin.sweep_values).collect();
    let runs = frozen_phase_sweep(cfg, &trained, &twin, phi0, &indices);
    let mut w = csv_writer(&cfg.output_dir, "sweep_predictions.csv")?;
    writeln!(w, "index,mean_phase,t,x0,x1,x2")?;
    for (i, (o, run)) in runs.into_iter().enumerate() {
        let mut point = SweepPoint { mean_phase: o.mean_phase, r: o.r, predicted: None, error: None };
        match run {
            Ok(traj) => {
                for f in (cfg.twin.discard..traj.len()).step_by(5) {
                    let x = traj.frame(f);
                    writeln!(w, "{i},{:.17e},{f},{:.17e},{:.17e},{:.17e}", o.mean_phase, x[0], x[1], x[2])?;
                }
                point.predicted = Some(evaluate(cfg, &traj)?);
            }
            Err(e @ Error::PredictionDiverged { .. }) => point.error = Some(e.to_string()),
            Err(e) => return Err(e),
        }
        summary.sweep.push(point);
    }
    w.flush()?;
    Ok(summary)
}

/// Closed-loop predictions from copies of `twin` frozen at evenly spaced
/// mean phases, one per index; runs in parallel under the `parallel` feature.
pub fn frozen_phase_sweep(
    cfg: &ExperimentConfig,
    trained: &Trained,
    twin: &Twin,
    phi0: f64,
    indices: &[usize],
) -> Vec<(OrderSample, Result<Trajectory>)> {
    crate::par::map(indices, |&i| {
        let mut t = twin.clone();
        set_mean_phase(&mut t.phases, phi0 + std::f64::consts::TAU * i as f64 / cfg.twin.sweep_values as f64);
        let o = global_order(&t.phases);
        (o, predict(cfg, trained, &mut t, PhaseMode::Frozen).map(|(traj, _)| traj))
    })
}

/// Distinct values under a minimum pairwise gap, greedily from the sorted list.
pub fn distinct_values(values: &[f64], min_gap: f64) -> Vec<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    v.sort_by(|a, b| a.total_cmp(b));
    let mut out: Vec<f64> = Vec::new();
    for x in v {
        if out.last().is_none_or(|&l| x - l > min_gap) {
            out.push(x);
        }
    }
    out
}

/// Convenience used by `predict`: warm a bundle's twin on a constant-parameter
/// test trajectory and run closed loop.
pub fn predict_from_bundle(
    bundle: &Bundle,
    lambda: f64,
    warmup: usize,
    horizon: usize,
    mode: PhaseMode,
    seed: u64,
) -> Result<(Trajectory, Vec<OrderSample>)> {
    let m = &bundle.manifest;
    let mut sim = m.sim;
    sim.n_frames = warmup;
    let test = simulate(&m.system, &ParamSchedule::constant(lambda), &sim, seed)?;
    let z = m.scaler.forward_traj(&test);
    let mut twin = bundle.twin.clone();
    twin.nodes = crate::reservoir::ReservoirState::zeros(twin.n_nodes());
    drive(&mut twin, &z, 0..z.len(), PhaseMode::Coupled)?;
    let p = closed_loop_predict(&mut twin, mode, &bundle.w_out, horizon, sim.frame_dt())?;
    Ok((m.scaler.inverse_traj(&p.outputs), p.orders))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for kind in ExperimentKind::ALL {
            let c = ExperimentConfig::preset(kind);
            c.validate().unwrap();
            let text = serde_json::to_string(&c).unwrap();
            assert_eq!(ExperimentConfig::from_json(&text).unwrap(), c);
        }
    }

    #[test]
    fn partial_json_merges_into_preset() {
        let c = ExperimentConfig::from_json(r#"{"experiment":"TwinTarget","twin":{"horizon":7000},"seeds":{"data":9}}"#).unwrap();
        let p = ExperimentConfig::preset(ExperimentKind::TwinTarget);
        assert_eq!(c.twin.horizon, 7000);
        assert_eq!(c.twin.discard, p.twin.discard);
        assert_eq!(c.seeds.data, 9);
        assert_eq!(c.seeds.test, p.seeds.test);
        assert!(ExperimentConfig::from_json(r#"{"twin":{}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"experiment":"TwinTarget","twin":{"dwell_min":0}}"#).is_err());
    }

    #[test]
    fn alternation_is_aperiodic_and_seeded() {
        let p = TwinProtocol::default();
        let a = alternating_switches(&p, 30_000, 1);
        assert_eq!(a, alternating_switches(&p, 30_000, 1));
        assert_ne!(a, alternating_switches(&p, 30_000, 2));
        let mut prev = 0;
        for (i, &(f, v)) in a.iter().enumerate() {
            assert!((p.dwell_min..=p.dwell_max).contains(&(f - prev)));
            assert_eq!(v, p.lambdas[(i + 1) % 2]);
            prev = f;
        }
        let gaps: Vec<usize> = a.windows(2).map(|w| w[1].0 - w[0].0).collect();
        assert!(gaps.windows(2).any(|g| g[0] != g[1]));
    }

    #[test]
    fn collapse_needs_quiet_tail() {
        let mk = |x: Vec<f64>| Trajectory::from_frames(0.1, 1, x.clone(), vec![0.0; x.len()]).unwrap();
        let mut x: Vec<f64> = (0..100).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        x.extend(vec![2.0; 50]);
        assert_eq!(collapse_frame(&mk(x.clone()), 40), Some(100));
        assert_eq!(collapse_frame(&mk(x), 60), None);
    }

    #[test]
    fn distinct_values_respects_gap() {
        assert_eq!(distinct_values(&[0.2, 0.201, 0.21, f64::NAN, 0.3], 0.005), vec![0.2, 0.21, 0.3]);
    }
}
