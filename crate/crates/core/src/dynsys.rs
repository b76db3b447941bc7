//! Benchmark dynamical systems (Thomas, Lorenz, Mackey-Glass) driven by
//! time-varying parameter schedules.

use std::collections::VecDeque;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded;

/// States larger than this are treated as numerical blow-up.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// One of the three benchmark systems with its fixed parameters. The
/// scheduled parameter (Thomas `b`, Lorenz `rho`, Mackey-Glass `tau`) lives in
/// [`ParamSchedule`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum SystemSpec {
    Thomas,
    Lorenz { sigma: f64, beta: f64 },
    MackeyGlass { beta: f64, gamma: f64, n: f64 },
}

impl SystemSpec {
    pub fn thomas() -> Self {
        SystemSpec::Thomas
    }

    pub fn lorenz() -> Self {
        SystemSpec::Lorenz { sigma: 10.0, beta: 8.0 / 3.0 }
    }

    pub fn mackey_glass() -> Self {
        SystemSpec::MackeyGlass { beta: 0.2, gamma: 0.1, n: 10.0 }
    }

    pub fn dim(&self) -> usize {
        match self {
            SystemSpec::Thomas | SystemSpec::Lorenz { .. } => 3,
            SystemSpec::MackeyGlass { .. } => 1,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SystemSpec::Thomas => "thomas",
            SystemSpec::Lorenz { .. } => "lorenz",
            SystemSpec::MackeyGlass { .. } => "mackey_glass",
        }
    }

    /// Default internal integration step.
    pub fn default_dt(&self) -> f64 {
        match self {
            SystemSpec::Thomas => 0.05,
            SystemSpec::Lorenz { .. } => 0.02,
            SystemSpec::MackeyGlass { .. } => 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = match *self {
            SystemSpec::Thomas => true,
            SystemSpec::Lorenz { sigma, beta } => sigma.is_finite() && beta.is_finite(),
            SystemSpec::MackeyGlass { beta, gamma, n } => beta.is_finite() && gamma.is_finite() && n.is_finite(),
        };
        if finite {
            Ok(())
        } else {
            Err(Error::Config(format!("non-finite parameter in {self:?}")))
        }
    }
}

/// Time course of the scheduled parameter. Times are measured from the first
/// recorded frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum ParamSchedule {
    Constant {
        value: f64,
    },
    /// Starts at `initial`; each `(t_switch, value)` takes effect at `t_switch`.
    StepSwitch {
        initial: f64,
        switches: Vec<(f64, f64)>,
    },
    Sinusoid {
        center: f64,
        amplitude: f64,
        angular_frequency: f64,
    },
}

impl ParamSchedule {
    pub fn constant(value: f64) -> Self {
        ParamSchedule::Constant { value }
    }

    /// Step schedule whose switches land on the given recorded frames.
    pub fn steps_at_frames(initial: f64, frame_dt: f64, switches: &[(usize, f64)]) -> Self {
        ParamSchedule::StepSwitch { initial, switches: switches.iter().map(|&(f, v)| (f as f64 * frame_dt, v)).collect() }
    }

    pub fn base_value(&self) -> f64 {
        match *self {
            ParamSchedule::Constant { value } => value,
            ParamSchedule::StepSwitch { initial, .. } => initial,
            ParamSchedule::Sinusoid { center, .. } => center,
        }
    }

    pub fn value_at(&self, t: f64) -> f64 {
        match self {
            ParamSchedule::Constant { value } => *value,
            ParamSchedule::StepSwitch { initial, switches } => {
                // Absorb rounding in t = step * dt so a switch lands on its frame.
                let slack = 1e-9 * (1.0 + t.abs());
                switches.iter().take_while(|(ts, _)| *ts <= t + slack).last().map_or(*initial, |&(_, v)| v)
            }
            ParamSchedule::Sinusoid { center, amplitude, angular_frequency } => center + amplitude * (angular_frequency * t).sin(),
        }
    }

    /// Largest value the schedule can take.
    pub fn max_value(&self) -> f64 {
        match self {
            ParamSchedule::Constant { value } => *value,
            ParamSchedule::StepSwitch { initial, switches } => switches.iter().map(|s| s.1).fold(*initial, f64::max),
            ParamSchedule::Sinusoid { center, amplitude, .. } => center + amplitude,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ParamSchedule::Constant { value } if !value.is_finite() => Err(Error::Config("constant schedule value must be finite".into())),
            ParamSchedule::StepSwitch { switches, .. } => {
                if switches.windows(2).any(|w| w[1].0 <= w[0].0) {
                    return Err(Error::Config("step switch times must be strictly increasing".into()));
                }
                Ok(())
            }
            ParamSchedule::Sinusoid { amplitude, .. } if *amplitude < 0.0 => {
                Err(Error::Config("sinusoid amplitude must be non-negative".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Integration settings for [`simulate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    pub n_frames: usize,
    /// Internal integration step.
    pub dt: f64,
    /// Internal steps per recorded frame.
    pub steps_per_frame: usize,
    /// Frames integrated and dropped before recording starts.
    pub warmup_discard: usize,
}

impl SimOptions {
    pub fn for_system(spec: &SystemSpec, n_frames: usize) -> Self {
        Self { n_frames, dt: spec.default_dt(), steps_per_frame: 2, warmup_discard: 1000 }
    }

    pub fn frame_dt(&self) -> f64 {
        self.dt * self.steps_per_frame as f64
    }
}

/// A sampled multivariate trajectory with the parameter value at each frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// Time between consecutive frames.
    pub dt: f64,
    pub dim: usize,
    data: Vec<f64>,
    pub lambda: Vec<f64>,
}

impl Trajectory {
    pub fn new(dt: f64, dim: usize) -> Self {
        Self { dt, dim, data: Vec::new(), lambda: Vec::new() }
    }

    pub fn from_frames(dt: f64, dim: usize, data: Vec<f64>, lambda: Vec<f64>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) || data.len() / dim != lambda.len() {
            return Err(Error::DimensionMismatch(format!("{} values with dim {dim} and {} lambda entries", data.len(), lambda.len())));
        }
        Ok(Self { dt, dim, data, lambda })
    }

    pub fn push(&mut self, frame: &[f64], lambda: f64) {
        assert_eq!(frame.len(), self.dim);
        self.data.extend_from_slice(frame);
        self.lambda.push(lambda);
    }

    pub fn len(&self) -> usize {
        self.lambda.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambda.is_empty()
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn component(&self, c: usize) -> Vec<f64> {
        self.frames().map(|f| f[c]).collect()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Frames `range.start..range.end` as a new trajectory.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Trajectory {
        Trajectory {
            dt: self.dt,
            dim: self.dim,
            data: self.data[range.start * self.dim..range.end * self.dim].to_vec(),
            lambda: self.lambda[range].to_vec(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Writes `t,lambda,x0[,x1,x2]` rows with 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let cols: Vec<String> = (0..self.dim).map(|c| format!("x{c}")).collect();
        writeln!(w, "t,lambda,{}", cols.join(","))?;
        for (i, frame) in self.frames().enumerate() {
            write!(w, "{:.16e},{:.16e}", i as f64 * self.dt, self.lambda[i])?;
            for v in frame {
                write!(w, ",{v:.16e}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

pub fn thomas_deriv(state: &[f64], b: f64) -> [f64; 3] {
    let (x, y, z) = (state[0], state[1], state[2]);
    [y.sin() - b * x, z.sin() - b * y, x.sin() - b * z]
}

pub fn lorenz_deriv(state: &[f64], sigma: f64, rho: f64, beta: f64) -> [f64; 3] {
    let (x, y, z) = (state[0], state[1], state[2]);
    [sigma * (y - x), x * (rho - z) - y, x * y - beta * z]
}

/// Classic fourth-order Runge-Kutta step for `dx/dt = f(x)`.
pub fn rk4_step<F>(deriv: F, state: &[f64], dt: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64], &mut [f64]),
{
    let d = state.len();
    let mut k1 = vec![0.0; d];
    let mut k2 = vec![0.0; d];
    let mut k3 = vec![0.0; d];
    let mut k4 = vec![0.0; d];
    let mut tmp = vec![0.0; d];

    deriv(state, &mut k1);
    for i in 0..d {
        tmp[i] = state[i] + 0.5 * dt * k1[i];
    }
    deriv(&tmp, &mut k2);
    for i in 0..d {
        tmp[i] = state[i] + 0.5 * dt * k2[i];
    }
    deriv(&tmp, &mut k3);
    for i in 0..d {
        tmp[i] = state[i] + dt * k3[i];
    }
    deriv(&tmp, &mut k4);

    let next: Vec<f64> = (0..d).map(|i| state[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])).collect();
    if next.iter().all(|v| v.is_finite()) {
        Ok(next)
    } else {
        Err(Error::IntegrationFailure { step: 0 })
    }
}

/// Uniformly spaced scalar history used for the delayed term of the
/// Mackey-Glass equation.
#[derive(Debug, Clone)]
pub struct DelayHistory {
    dt: f64,
    t_last: f64,
    values: VecDeque<f64>,
    capacity: usize,
}

impl DelayHistory {
    /// History sampled from `f` on `[t_start, t_start + (n-1) dt]`.
    pub fn from_fn(t_start: f64, dt: f64, n: usize, capacity: usize, f: impl Fn(f64) -> f64) -> Self {
        assert!(n >= 1 && capacity >= n);
        let values = (0..n).map(|i| f(t_start + i as f64 * dt)).collect();
        Self { dt, t_last: t_start + (n - 1) as f64 * dt, values, capacity }
    }

    pub fn t_last(&self) -> f64 {
        self.t_last
    }

    pub fn earliest(&self) -> f64 {
        self.t_last - (self.values.len() - 1) as f64 * self.dt
    }

    pub fn last(&self) -> f64 {
        *self.values.back().unwrap()
    }

    pub fn push(&mut self, x: f64) {
        if self.values.len() == self.capacity {
            self.values.pop_front();
        }
        self.values.push_back(x);
        self.t_last += self.dt;
    }

    /// Linear interpolation between stored samples.
    pub fn value_at(&self, t: f64) -> Result<f64> {
        let earliest = self.earliest();
        let pos = (t - earliest) / self.dt;
        if pos < -1e-9 {
            return Err(Error::HistoryUnderflow { requested: t, earliest });
        }
        let n = self.values.len();
        if n == 1 {
            return Ok(self.values[0]);
        }
        let pos = pos.clamp(0.0, (n - 1) as f64);
        let i = (pos.floor() as usize).min(n - 2);
        let frac = pos - i as f64;
        let (a, b) = (self.values[i], self.values[i + 1]);
        Ok(a + frac * (b - a))
    }
}

/// Advances the Mackey-Glass state by one forward-Euler step and appends the
/// new value to `history`.
pub fn mackey_glass_step(history: &mut DelayHistory, beta: f64, gamma: f64, n: f64, tau: f64, dt: f64) -> Result<f64> {
    if tau <= 0.0 {
        return Err(Error::Domain(format!("delay must be positive, got {tau}")));
    }
    debug_assert!((dt - history.dt).abs() < 1e-12);
    let x = history.last();
    let delayed = history.value_at(history.t_last() - tau)?;
    let rhs = beta * delayed / (1.0 + delayed.powf(n)) - gamma * x;
    let next = x + dt * rhs;
    history.push(next);
    Ok(next)
}

/// Integrates `spec` under `schedule`, dropping the first
/// `opts.warmup_discard` frames.
pub fn simulate(spec: &SystemSpec, schedule: &ParamSchedule, opts: &SimOptions, seed: u64) -> Result<Trajectory> {
    spec.validate()?;
    schedule.validate()?;
    if opts.n_frames == 0 || opts.steps_per_frame == 0 || opts.dt <= 0.0 {
        return Err(Error::Config("n_frames, steps_per_frame and dt must be positive".into()));
    }
    let mut rng = seeded(seed, 0x5157);
    let k = opts.steps_per_frame;
    let dt = opts.dt;
    let first_step = -((opts.warmup_discard * k) as i64);
    let total_frames = opts.warmup_discard + opts.n_frames;
    let time_of = |step: i64| step as f64 * dt;

    let mut traj = Trajectory::new(opts.frame_dt(), spec.dim());
    let check = |x: &[f64], frame: usize| -> Result<()> {
        let magnitude = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if !magnitude.is_finite() || magnitude > DIVERGENCE_LIMIT {
            return Err(Error::Diverged { frame, magnitude });
        }
        Ok(())
    };

    match *spec {
        SystemSpec::Thomas | SystemSpec::Lorenz { .. } => {
            let mut state: Vec<f64> = match spec {
                SystemSpec::Thomas => (0..3).map(|_| rng.gen_range(-1.0..=1.0)).collect(),
                _ => (0..3).map(|_| 1.0 + rng.gen_range(-0.1..=0.1)).collect(),
            };
            for frame in 0..total_frames {
                let frame_step = first_step + (frame * k) as i64;
                if frame >= opts.warmup_discard {
                    traj.push(&state, schedule.value_at(time_of(frame_step)));
                }
                for j in 0..k {
                    let lam = schedule.value_at(time_of(frame_step + j as i64));
                    state = match *spec {
                        SystemSpec::Thomas => rk4_step(|s, out| out.copy_from_slice(&thomas_deriv(s, lam)), &state, dt),
                        SystemSpec::Lorenz { sigma, beta } => {
                            rk4_step(|s, out| out.copy_from_slice(&lorenz_deriv(s, sigma, lam, beta)), &state, dt)
                        }
                        SystemSpec::MackeyGlass { .. } => unreachable!(),
                    }
                    .map_err(|_| Error::Diverged { frame, magnitude: f64::NAN })?;
                }
                check(&state, frame)?;
            }
        }
        SystemSpec::MackeyGlass { beta, gamma, n } => {
            let tau_max = schedule.max_value();
            if tau_max <= 0.0 {
                return Err(Error::Config("Mackey-Glass delay must be positive".into()));
            }
            let span = (tau_max / dt).ceil() as usize + 2;
            let noise: Vec<f64> = (0..span).map(|_| rng.gen_range(-0.01..=0.01)).collect();
            let t0 = time_of(first_step);
            let mut history = DelayHistory::from_fn(t0 - (span - 1) as f64 * dt, dt, span, span + 1, |t| {
                let i = ((t - t0) / dt + (span - 1) as f64).round() as usize;
                1.1 + noise[i.min(span - 1)]
            });
            for frame in 0..total_frames {
                let frame_step = first_step + (frame * k) as i64;
                if frame >= opts.warmup_discard {
                    traj.push(&[history.last()], schedule.value_at(time_of(frame_step)));
                }
                for j in 0..k {
                    let tau = schedule.value_at(time_of(frame_step + j as i64));
                    mackey_glass_step(&mut history, beta, gamma, n, tau, dt)?;
                }
                check(&[history.last()], frame)?;
            }
        }
    }
    Ok(traj)
}

/// Least-squares estimate of the Thomas damping `b` from central-difference
/// derivatives: `sin(y) - dx/dt = b x` (and cyclic), solved in closed form.
pub fn estimate_thomas_b(traj: &Trajectory) -> Result<f64> {
    const MIN_FRAMES: usize = 200;
    if traj.dim != 3 {
        return Err(Error::DimensionMismatch(format!("Thomas estimate needs 3 components, got {}", traj.dim)));
    }
    if traj.len() < MIN_FRAMES {
        return Err(Error::TooShort { needed: MIN_FRAMES, available: traj.len() });
    }
    let h = traj.dt;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 1..traj.len() - 1 {
        let (prev, cur, next) = (traj.frame(i - 1), traj.frame(i), traj.frame(i + 1));
        for c in 0..3 {
            let deriv = (next[c] - prev[c]) / (2.0 * h);
            let forcing = cur[(c + 1) % 3].sin();
            num += (forcing - deriv) * cur[c];
            den += cur[c] * cur[c];
        }
    }
    if den < 1e-9 {
        return Err(Error::DegenerateTrajectory("sum of squared states below 1e-9".into()));
    }
    Ok(num / den)
}
