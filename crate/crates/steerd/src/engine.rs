//! Deterministic single-threaded twin loop. The service wraps it in a
//! producer thread; replay drives it directly.

use std::collections::VecDeque;

use rhythmic_core::bundle::Bundle;
use rhythmic_core::dynsys::{
    estimate_thomas_b, lorenz_deriv, rk4_step, simulate, thomas_deriv, ParamSchedule, SimOptions, SystemSpec, Trajectory,
};
use rhythmic_core::learner::{drive, InputScaler, PhaseMode, ReadoutMatrix, Twin};
use rhythmic_core::phasenet::global_order;
use rhythmic_core::reservoir::readout;
use serde::{Deserialize, Serialize};

use crate::error::SteerError;
use crate::protocol::{CommandKind, FramePacket, ModeLabel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    /// Parameter of the warm-up trajectory; defaults to the first training value.
    pub warmup_lambda: Option<f64>,
    pub warmup_frames: usize,
    /// Seed of the warm-up trajectory's initial condition.
    pub seed: u64,
    /// Wall-clock production rate.
    pub fps: f64,
    pub initial_mode: ModeLabel,
    /// Forcing rate used by `Forced`; defaults to the bundle's sweep rate.
    pub omega: Option<f64>,
    /// Trailing frames used for `lambda_estimate`.
    pub lambda_window: usize,
    /// Recompute `lambda_estimate` every this many frames.
    pub lambda_every: u64,
    /// Stop after this many frames; `None` runs until the session is closed.
    pub max_frames: Option<u64>,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            warmup_lambda: None,
            warmup_frames: 4000,
            seed: 100,
            fps: 30.0,
            initial_mode: ModeLabel::Coupled,
            omega: None,
            lambda_window: 2000,
            lambda_every: 50,
            max_frames: None,
        }
    }
}

/// Admissible values for `SwitchInput`.
pub fn parameter_range(system: &SystemSpec) -> (f64, f64) {
    match system {
        SystemSpec::Thomas => (0.0, 1.0),
        SystemSpec::Lorenz { .. } => (0.0, 100.0),
        SystemSpec::MackeyGlass { .. } => (1.0, 100.0),
    }
}

#[derive(Debug, Clone)]
enum Input {
    ClosedLoop,
    /// Live integration of the real system, physical units.
    OpenLoop {
        lambda: f64,
        state: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
pub struct TwinEngine {
    twin: Twin,
    w_out: ReadoutMatrix,
    scaler: InputScaler,
    system: SystemSpec,
    sim: SimOptions,
    cfg: SessionConfig,
    mode: ModeLabel,
    omega: f64,
    input: Input,
    /// Scaled output of the previous frame, fed back in closed loop.
    feedback: Vec<f64>,
    history: VecDeque<Vec<f64>>,
    lambda_estimate: Option<f64>,
    t: u64,
}

impl TwinEngine {
    /// Warms the bundled twin on a simulated trajectory in coupled mode.
    pub fn start(bundle: &Bundle, cfg: &SessionConfig) -> Result<Self, SteerError> {
        let m = &bundle.manifest;
        let lambda = cfg
            .warmup_lambda
            .or(m.training_lambdas.first().copied())
            .ok_or_else(|| SteerError::InvalidCommand("no warm-up parameter configured and none recorded in the bundle".into()))?;
        if !(cfg.fps > 0.0) || cfg.warmup_frames == 0 || cfg.lambda_every == 0 {
            return Err(SteerError::InvalidCommand("fps, warmup_frames and lambda_every must be positive".into()));
        }
        let mut sim = m.sim;
        sim.n_frames = cfg.warmup_frames;
        let warm = simulate(&m.system, &ParamSchedule::constant(lambda), &sim, cfg.seed)?;
        let mut twin = bundle.twin.clone();
        twin.nodes = rhythmic_core::reservoir::ReservoirState::zeros(twin.n_nodes());
        drive(&mut twin, &m.scaler.forward_traj(&warm), 0..warm.len(), PhaseMode::Coupled)?;
        let feedback = readout(&bundle.w_out, &twin.nodes.n)?;
        Ok(Self {
            twin,
            w_out: bundle.w_out.clone(),
            scaler: m.scaler.clone(),
            system: m.system,
            sim: m.sim,
            mode: cfg.initial_mode,
            omega: cfg.omega.unwrap_or(m.targeting.sweep_omega),
            cfg: cfg.clone(),
            input: Input::ClosedLoop,
            feedback,
            history: VecDeque::new(),
            lambda_estimate: None,
            t: 0,
        })
    }

    /// Index of the next frame to be produced.
    pub fn frame(&self) -> u64 {
        self.t
    }

    pub fn mode(&self) -> ModeLabel {
        self.mode
    }

    pub fn config(&self) -> &SessionConfig {
        &self.cfg
    }

    pub fn twin(&self) -> &Twin {
        &self.twin
    }

    pub fn finished(&self) -> bool {
        self.cfg.max_frames.is_some_and(|n| self.t >= n)
    }

    /// Checks a command against the session without applying it.
    pub fn validate(&self, cmd: &CommandKind) -> Result<(), SteerError> {
        match cmd {
            CommandKind::SetOmega(w) if !w.is_finite() => Err(SteerError::InvalidCommand("omega must be finite".into())),
            CommandKind::SwitchInput(Some(lambda)) => {
                let (lo, hi) = parameter_range(&self.system);
                if !(lambda.is_finite() && *lambda > lo && *lambda <= hi) {
                    return Err(SteerError::InvalidCommand(format!("parameter {lambda} outside ({lo}, {hi}]")));
                }
                if matches!(self.system, SystemSpec::MackeyGlass { .. }) {
                    return Err(SteerError::InvalidCommand("live input is only available for ODE systems".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn apply(&mut self, cmd: &CommandKind) -> Result<(), SteerError> {
        self.validate(cmd)?;
        match *cmd {
            CommandKind::SetMode(mode) => self.mode = mode,
            CommandKind::SetOmega(w) => self.omega = w,
            CommandKind::Freeze => self.mode = ModeLabel::Frozen,
            CommandKind::SwitchInput(None) => self.input = Input::ClosedLoop,
            CommandKind::SwitchInput(Some(lambda)) => {
                let state = match &self.input {
                    Input::OpenLoop { state, .. } => state.clone(),
                    Input::ClosedLoop => self.scaler.inverse(&self.feedback),
                };
                self.input = Input::OpenLoop { lambda, state };
            }
        }
        Ok(())
    }

    fn phase_mode(&self) -> PhaseMode {
        match self.mode {
            ModeLabel::Coupled => PhaseMode::Coupled,
            ModeLabel::Forced => PhaseMode::Forced(self.omega),
            ModeLabel::Frozen => PhaseMode::Frozen,
        }
    }

    fn next_input(&mut self) -> Result<Vec<f64>, SteerError> {
        match &mut self.input {
            Input::ClosedLoop => Ok(self.feedback.clone()),
            Input::OpenLoop { lambda, state } => {
                let lam = *lambda;
                for _ in 0..self.sim.steps_per_frame {
                    *state = match self.system {
                        SystemSpec::Thomas => rk4_step(|s, out| out.copy_from_slice(&thomas_deriv(s, lam)), state.as_slice(), self.sim.dt),
                        SystemSpec::Lorenz { sigma, beta } => {
                            rk4_step(|s, out| out.copy_from_slice(&lorenz_deriv(s, sigma, lam, beta)), state.as_slice(), self.sim.dt)
                        }
                        SystemSpec::MackeyGlass { .. } => unreachable!("rejected by validate"),
                    }?;
                }
                Ok(self.scaler.forward(state))
            }
        }
    }

    /// Advances one frame and reports it.
    pub fn step(&mut self) -> Result<FramePacket, SteerError> {
        let u = self.next_input()?;
        let mode = self.phase_mode();
        self.twin.step(&u, mode)?;
        let y = readout(&self.w_out, &self.twin.nodes.n)?;
        if y.iter().any(|v| !v.is_finite() || v.abs() > 1e6) {
            return Err(rhythmic_core::Error::PredictionDiverged { frame: self.t as usize }.into());
        }
        let output = self.scaler.inverse(&y);
        self.feedback = y;
        self.history.push_back(output.clone());
        if self.history.len() > self.cfg.lambda_window {
            self.history.pop_front();
        }
        if self.system == SystemSpec::Thomas && (self.t + 1).is_multiple_of(self.cfg.lambda_every) {
            let flat: Vec<f64> = self.history.iter().flatten().copied().collect();
            let n = self.history.len();
            self.lambda_estimate =
                Trajectory::from_frames(self.sim.frame_dt(), 3, flat, vec![f64::NAN; n]).ok().and_then(|tr| estimate_thomas_b(&tr).ok());
        }
        let o = global_order(&self.twin.phases);
        let packet =
            FramePacket { t: self.t, r: o.r, mean_phase: o.mean_phase, output, mode: self.mode, lambda_estimate: self.lambda_estimate };
        self.t += 1;
        Ok(packet)
    }
}
