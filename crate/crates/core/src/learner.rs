//! Warm-up, ridge training, closed-loop prediction and mean-phase targeting.

use nalgebra::{Cholesky, DMatrix};
use serde::{Deserialize, Serialize};

use crate::dynsys::Trajectory;
use crate::error::{Error, Result};
use crate::phasenet::{
    forced_phase_step, global_order, phase_step, wrap_phase, OrderSample, PhaseConfig, PhaseParams, PhaseState, PhaseTopology,
};
pub use crate::reservoir::ReadoutMatrix;
use crate::reservoir::{build_reservoir, readout, Reservoir, ReservoirConfig, ReservoirState};

/// How link phases evolve during a step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "g")]
pub enum PhaseMode {
    /// Activity-gated mean-field coupling.
    Coupled,
    /// Uniform forcing: every phase advances by `g * dt` per frame.
    Forced(f64),
    /// Phases held constant.
    Frozen,
}

impl PhaseMode {
    pub fn label(&self) -> &'static str {
        match self {
            PhaseMode::Coupled => "Coupled",
            PhaseMode::Forced(_) => "Forced",
            PhaseMode::Frozen => "Frozen",
        }
    }
}

/// Order of the two sub-updates inside a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum UpdateOrder {
    /// Node update with `Phi(t)`, then phase update with `n(t + dt)`.
    #[default]
    NodeThenPhase,
    PhaseThenNode,
}

/// Everything needed to rebuild a twin's random structure.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub reservoir: ReservoirConfig,
    pub phase: PhaseConfig,
    #[serde(default)]
    pub order: UpdateOrder,
    pub seed: u64,
}

/// A reservoir with oscillating links and its live node and phase state.
#[derive(Debug, Clone)]
pub struct Twin {
    pub reservoir: Reservoir,
    pub phase_topo: PhaseTopology,
    pub phase_params: PhaseParams,
    pub phase_dt: f64,
    pub order: UpdateOrder,
    pub nodes: ReservoirState,
    pub phases: PhaseState,
}

impl Twin {
    pub fn build(cfg: &ModelConfig, input_dim: usize) -> Result<Self> {
        let (topo, phase_topo) = build_reservoir(&cfg.reservoir, input_dim, cfg.phase.phase_density, cfg.seed)?;
        let phase_params = PhaseParams::new(phase_topo.n_links, &cfg.phase, cfg.seed)?;
        let phases = PhaseState::random(phase_topo.n_links, cfg.seed);
        let nodes = ReservoirState::zeros(cfg.reservoir.n_nodes);
        Ok(Self {
            reservoir: Reservoir::new(topo, cfg.reservoir.params())?,
            phase_topo,
            phase_params,
            phase_dt: cfg.phase.dt,
            order: cfg.order,
            nodes,
            phases,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.n.len()
    }

    pub fn input_dim(&self) -> usize {
        self.reservoir.topo.input_dim()
    }

    /// Restarts from blank node state and the given phases.
    pub fn reset(&mut self, phases: PhaseState) {
        self.nodes = ReservoirState::zeros(self.n_nodes());
        self.phases = phases;
    }

    fn advance_phases(&mut self, mode: PhaseMode) -> Result<()> {
        match mode {
            PhaseMode::Coupled => phase_step(&mut self.phases, &self.nodes.n, &self.phase_topo, &self.phase_params, self.phase_dt),
            PhaseMode::Forced(g) => {
                forced_phase_step(&mut self.phases, g, self.phase_dt);
                Ok(())
            }
            PhaseMode::Frozen => {
                self.phases.t += self.phase_dt;
                Ok(())
            }
        }
    }

    /// Advances one frame with input `u`.
    pub fn step(&mut self, u: &[f64], mode: PhaseMode) -> Result<()> {
        match self.order {
            UpdateOrder::NodeThenPhase => {
                self.reservoir.step(&mut self.nodes, u, Some(&self.phases.phi))?;
                self.advance_phases(mode)
            }
            UpdateOrder::PhaseThenNode => {
                self.advance_phases(mode)?;
                self.reservoir.step(&mut self.nodes, u, Some(&self.phases.phi))
            }
        }
    }

    pub fn order_sample(&self) -> OrderSample {
        global_order(&self.phases)
    }
}

/// Per-component affine map to zero mean and unit variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputScaler {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl InputScaler {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], scale: vec![1.0; dim] }
    }

    pub fn fit(traj: &Trajectory) -> Self {
        let n = traj.len().max(1) as f64;
        let mean: Vec<f64> = (0..traj.dim).map(|c| traj.frames().map(|f| f[c]).sum::<f64>() / n).collect();
        let scale = (0..traj.dim)
            .map(|c| {
                let var = traj.frames().map(|f| (f[c] - mean[c]).powi(2)).sum::<f64>() / n;
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn inverse(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| v * s + m).collect()
    }

    pub fn forward_traj(&self, traj: &Trajectory) -> Trajectory {
        self.map_traj(traj, |f| self.forward(f))
    }

    pub fn inverse_traj(&self, traj: &Trajectory) -> Trajectory {
        self.map_traj(traj, |f| self.inverse(f))
    }

    fn map_traj(&self, traj: &Trajectory, f: impl Fn(&[f64]) -> Vec<f64>) -> Trajectory {
        let data: Vec<f64> = traj.frames().flat_map(f).collect();
        Trajectory::from_frames(traj.dt, traj.dim, data, traj.lambda.clone()).expect("shape preserved")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub warmup_steps: usize,
    pub train_steps: usize,
    pub ridge_beta: f64,
    pub predict_warmup_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { warmup_steps: 1000, train_steps: 20_000, ridge_beta: 1e-6, predict_warmup_steps: 3000 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps == 0 || self.train_steps == 0 || self.predict_warmup_steps == 0 {
            return Err(Error::Config("step counts must be positive".into()));
        }
        if !(self.ridge_beta >= 0.0) {
            return Err(Error::Config("ridge_beta must be non-negative".into()));
        }
        Ok(())
    }
}

/// Recorded training states and aligned next-frame targets.
#[derive(Debug, Clone)]
pub struct Harvest {
    /// `n_nodes x train_steps`.
    pub states: DMatrix<f64>,
    /// `input_dim x train_steps`.
    pub targets: DMatrix<f64>,
    /// `(t, R, mean phase)` after every frame, warm-up included.
    pub order_log: Vec<OrderSample>,
}

/// Drives the twin open-loop with coupled phases. The first `warmup_steps`
/// states are discarded; column `k` of `states` is the state after feeding
/// frame `warmup_steps + k`, and its target is the following frame.
pub fn harvest_states(inputs: &Trajectory, twin: &mut Twin, cfg: &TrainConfig) -> Result<Harvest> {
    cfg.validate()?;
    let needed = cfg.warmup_steps + cfg.train_steps + 1;
    if inputs.len() < needed {
        return Err(Error::InsufficientData { needed, available: inputs.len() });
    }
    if inputs.dim != twin.input_dim() {
        return Err(Error::DimensionMismatch(format!("input dim {} vs reservoir {}", inputs.dim, twin.input_dim())));
    }
    let mut states = DMatrix::zeros(twin.n_nodes(), cfg.train_steps);
    let mut targets = DMatrix::zeros(inputs.dim, cfg.train_steps);
    let mut order_log = Vec::with_capacity(needed);
    for t in 0..cfg.warmup_steps + cfg.train_steps {
        twin.step(inputs.frame(t), PhaseMode::Coupled)?;
        order_log.push(twin.order_sample());
        if let Some(k) = t.checked_sub(cfg.warmup_steps) {
            states.column_mut(k).copy_from_slice(&twin.nodes.n);
            targets.column_mut(k).copy_from_slice(inputs.frame(t + 1));
        }
    }
    Ok(Harvest { states, targets, order_log })
}

/// Ridge regression `W_out = U S^T (S S^T + beta I)^-1`, solved through a
/// Cholesky factorization of the regularized Gram matrix.
pub fn ridge_fit(states: &DMatrix<f64>, targets: &DMatrix<f64>, beta: f64) -> Result<ReadoutMatrix> {
    if states.ncols() != targets.ncols() {
        return Err(Error::DimensionMismatch(format!("{} state columns vs {} target columns", states.ncols(), targets.ncols())));
    }
    let n = states.nrows();
    let mut gram = states * states.transpose();
    for i in 0..n {
        gram[(i, i)] += beta;
    }
    let rhs = states * targets.transpose();
    let chol = Cholesky::new(gram).ok_or(Error::Singular)?;
    let diag = chol.l_dirty().diagonal();
    let (lo, hi) = diag.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &d| (lo.min(d.abs()), hi.max(d.abs())));
    if !(lo > 0.0) || (lo / hi).powi(2) < 1e-15 {
        return Err(Error::Singular);
    }
    let solution = chol.solve(&rhs);
    let w_out = solution.transpose();
    if w_out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular);
    }
    Ok(ReadoutMatrix { w_out })
}

/// Relative residual of the regularized normal equations.
pub fn ridge_residual(states: &DMatrix<f64>, targets: &DMatrix<f64>, beta: f64, w: &ReadoutMatrix) -> f64 {
    let mut gram = states * states.transpose();
    for i in 0..gram.nrows() {
        gram[(i, i)] += beta;
    }
    let rhs = states * targets.transpose();
    (gram * w.w_out.transpose() - &rhs).norm() / rhs.norm()
}

/// One-step-ahead error of the readout on recorded states, normalized by the
/// RMS deviation of the targets from their mean.
pub fn teacher_forced_nrmse(harvest: &Harvest, w: &ReadoutMatrix) -> f64 {
    let pred = &w.w_out * &harvest.states;
    let err = (&pred - &harvest.targets).norm_squared();
    let mut dev = 0.0;
    for r in 0..harvest.targets.nrows() {
        let row = harvest.targets.row(r);
        let mean = row.mean();
        dev += row.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    }
    (err / dev).sqrt()
}

/// Closed-loop output with per-frame order parameters.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub outputs: Trajectory,
    pub orders: Vec<OrderSample>,
}

/// Feeds the readout back as the next input for `horizon` frames, starting
/// from the twin's current state. Frame `k` of the output is `W_out n` before
/// the `k`-th feedback step.
pub fn closed_loop_predict(twin: &mut Twin, mode: PhaseMode, w_out: &ReadoutMatrix, horizon: usize, frame_dt: f64) -> Result<Prediction> {
    let mut outputs = Trajectory::new(frame_dt, twin.input_dim());
    let mut orders = Vec::with_capacity(horizon);
    for k in 0..horizon {
        let y = readout(w_out, &twin.nodes.n)?;
        if y.iter().any(|v| !v.is_finite() || v.abs() > 1e6) {
            return Err(Error::PredictionDiverged { frame: k });
        }
        outputs.push(&y, f64::NAN);
        twin.step(&y, mode)?;
        orders.push(twin.order_sample());
    }
    Ok(Prediction { outputs, orders })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum LossKind {
    /// Windowed root-mean-square one-step error.
    #[default]
    Rmse,
    /// RMSE of a frozen closed-loop branch of `horizon` frames started at
    /// each sweep frame, against the test signal over the same frames.
    Rollout { horizon: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetingConfig {
    /// Forcing rate during the sweep, radians per unit of phase time.
    pub sweep_omega: f64,
    /// Sweep length in frames; must cover a full rotation.
    pub sweep_duration: usize,
    #[serde(default)]
    pub loss: LossKind,
    pub r_equilibrium_tol: f64,
    pub r_window: usize,
    /// Trailing window (frames) over which each candidate's loss is averaged.
    pub loss_window: usize,
}

impl Default for TargetingConfig {
    fn default() -> Self {
        Self { sweep_omega: 0.05, sweep_duration: 200, loss: LossKind::Rmse, r_equilibrium_tol: 0.01, r_window: 200, loss_window: 50 }
    }
}

impl TargetingConfig {
    pub fn validate(&self, phase_dt: f64) -> Result<()> {
        let span = self.sweep_duration as f64 * self.sweep_omega.abs() * phase_dt;
        if !(span > std::f64::consts::TAU) {
            return Err(Error::Config(format!("sweep covers {span:.3} rad; it must exceed 2 pi")));
        }
        if self.r_window < 2 || self.loss_window == 0 || self.loss_window > self.sweep_duration {
            return Err(Error::Config("r_window >= 2 and 0 < loss_window <= sweep_duration required".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepSample {
    pub frame: usize,
    pub mean_phase: f64,
    /// Mean phase accumulated continuously since the sweep started.
    pub mean_phase_unwrapped: f64,
    #[serde(rename = "R")]
    pub r: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetOutcome {
    pub r0: f64,
    pub mean_phase0: f64,
    /// Frame at which `R` was judged stationary.
    pub t_r0: usize,
    /// Frame at which the phases were frozen.
    pub frozen_at: usize,
    pub sweep: Vec<SweepSample>,
    /// Largest `|R - R0|` while forcing.
    pub max_r_drift: f64,
}

fn rmse(pred: &[f64], truth: &[f64]) -> f64 {
    (pred.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / pred.len() as f64).sqrt()
}

/// Locks the twin onto the state underlying `u_test`.
///
/// 1. Runs coupled dynamics on `u_test` until the rolling standard deviation
///    of `R` over `r_window` frames falls below `r_equilibrium_tol`.
/// 2. Forces all phases uniformly at `sweep_omega` for `sweep_duration`
///    frames, recording the loss of the readout against `u_test`.
/// 3. Picks the mean phase whose trailing-window loss is smallest (earliest on
///    ties), keeps forcing until that mean phase comes round again and freezes.
///
/// The twin keeps consuming `u_test` open-loop throughout.
pub fn target_mean_phase(u_test: &Trajectory, twin: &mut Twin, w_out: &ReadoutMatrix, tcfg: &TargetingConfig) -> Result<TargetOutcome> {
    match tcfg.loss {
        LossKind::Rmse => target_mean_phase_with(u_test, twin, w_out, tcfg, rmse),
        LossKind::Rollout { horizon } => {
            if horizon == 0 {
                return Err(Error::Config("rollout horizon must be positive".into()));
            }
            sweep_and_freeze(u_test, twin, tcfg, horizon, |twin, frame| rollout_loss(twin, w_out, u_test, frame, horizon))
        }
    }
}

/// [`target_mean_phase`] with a caller-supplied per-frame loss `h(pred, truth)`.
/// Windowed losses are root-mean-square averages of `h`.
pub fn target_mean_phase_with<H>(
    u_test: &Trajectory,
    twin: &mut Twin,
    w_out: &ReadoutMatrix,
    tcfg: &TargetingConfig,
    loss: H,
) -> Result<TargetOutcome>
where
    H: Fn(&[f64], &[f64]) -> f64,
{
    sweep_and_freeze(u_test, twin, tcfg, 1, |twin, frame| Ok(loss(&readout(w_out, &twin.nodes.n)?, u_test.frame(frame))))
}

fn rollout_loss(twin: &Twin, w_out: &ReadoutMatrix, u_test: &Trajectory, frame: usize, horizon: usize) -> Result<f64> {
    let mut branch = twin.clone();
    let mut acc = 0.0;
    for j in 0..horizon {
        let y = readout(w_out, &branch.nodes.n)?;
        let truth = u_test.frame(frame + j);
        acc += y.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64;
        if j + 1 < horizon {
            branch.step(&y, PhaseMode::Frozen)?;
        }
    }
    Ok((acc / horizon as f64).sqrt())
}

/// Steps 1 to 3 of the targeting procedure; `loss(twin, frame)` scores the
/// twin against `u_test` from `frame` on and may look `lookahead` frames ahead.
fn sweep_and_freeze<L>(u_test: &Trajectory, twin: &mut Twin, tcfg: &TargetingConfig, lookahead: usize, mut loss: L) -> Result<TargetOutcome>
where
    L: FnMut(&Twin, usize) -> Result<f64>,
{
    tcfg.validate(twin.phase_dt)?;
    let len = u_test.len();
    let mut frame = 0usize;

    // 1. coupled until R is stationary
    let mut r_hist: Vec<f64> = Vec::new();
    let t_r0 = loop {
        if frame >= len {
            return Err(Error::NoEquilibrium { frames: len });
        }
        twin.step(u_test.frame(frame), PhaseMode::Coupled)?;
        frame += 1;
        r_hist.push(twin.order_sample().r);
        if r_hist.len() >= tcfg.r_window {
            let w = &r_hist[r_hist.len() - tcfg.r_window..];
            let mean = w.iter().sum::<f64>() / w.len() as f64;
            let sd = (w.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
            if sd < tcfg.r_equilibrium_tol {
                break frame;
            }
        }
    };
    let r0 = twin.order_sample().r;

    // 2. uniform sweep
    let needed = frame + tcfg.sweep_duration + lookahead;
    if needed > len {
        return Err(Error::InsufficientData { needed, available: len });
    }
    let forcing = PhaseMode::Forced(tcfg.sweep_omega);
    let mut sweep = Vec::with_capacity(tcfg.sweep_duration);
    let mut max_r_drift = 0.0f64;
    let mut unwrapped = twin.order_sample().mean_phase;
    let mut last = unwrapped;
    for _ in 0..tcfg.sweep_duration {
        twin.step(u_test.frame(frame), forcing)?;
        frame += 1;
        let o = twin.order_sample();
        unwrapped += wrap_phase(o.mean_phase - last);
        last = o.mean_phase;
        max_r_drift = max_r_drift.max((o.r - r0).abs());
        sweep.push(SweepSample { frame, mean_phase: o.mean_phase, mean_phase_unwrapped: unwrapped, r: o.r, loss: loss(twin, frame)? });
    }

    let w = tcfg.loss_window;
    let mut best: Option<(usize, f64)> = None;
    let mut acc: f64 = sweep[..w - 1].iter().map(|s| s.loss * s.loss).sum();
    for end in w - 1..sweep.len() {
        acc += sweep[end].loss * sweep[end].loss;
        let windowed = (acc.max(0.0) / w as f64).sqrt();
        if best.is_none_or(|(_, b)| windowed < b) {
            best = Some((end, windowed));
        }
        acc -= sweep[end + 1 - w].loss * sweep[end + 1 - w].loss;
    }
    let (best_idx, _) = best.expect("sweep has at least one full window");
    let mean_phase0 = sweep[best_idx].mean_phase;

    // 3. keep forcing until mean_phase0 comes round again, then freeze
    let step = tcfg.sweep_omega * twin.phase_dt;
    let current = twin.order_sample().mean_phase;
    let mut remaining = wrap_phase(mean_phase0 - current).rem_euclid(std::f64::consts::TAU);
    if step < 0.0 {
        remaining = std::f64::consts::TAU - remaining;
    }
    while remaining >= step.abs() {
        if frame >= len {
            return Err(Error::InsufficientData { needed: frame + 1, available: len });
        }
        twin.step(u_test.frame(frame), forcing)?;
        frame += 1;
        remaining -= step.abs();
        max_r_drift = max_r_drift.max((twin.order_sample().r - r0).abs());
    }
    twin.phases.rotate(remaining * step.signum());
    max_r_drift = max_r_drift.max((twin.order_sample().r - r0).abs());

    Ok(TargetOutcome { r0, mean_phase0, t_r0, frozen_at: frame, sweep, max_r_drift })
}

/// Rotates all phases so that the mean phase equals `target` (R unchanged).
pub fn set_mean_phase(phases: &mut PhaseState, target: f64) {
    let current = global_order(phases).mean_phase;
    phases.rotate(wrap_phase(target - current));
}

/// Feeds `frames` open-loop in the given mode.
pub fn drive(twin: &mut Twin, frames: &Trajectory, range: std::ops::Range<usize>, mode: PhaseMode) -> Result<Vec<OrderSample>> {
    let mut log = Vec::with_capacity(range.len());
    for t in range {
        twin.step(frames.frame(t), mode)?;
        log.push(twin.order_sample());
    }
    Ok(log)
}
