//! Link phases with activity-gated mean-field coupling.
//!
//! Each link `i` carries a phase `phi_i` that obeys
//!
//! ```text
//! dphi/dt = omega0 + (eps1 + eps2 * (Qn^T n*)_i) * sin(psi_i - phi_i + gamma_i)
//! ```
//!
//! where `psi_i` is the argument of the row-normalized phasor average over the
//! link's phase neighbours and `n* = (n + 1) / 2` rescales node activity to
//! `(0, 1)`. Phases are advanced with forward Euler and wrapped to `[-pi, pi)`.

use std::f64::consts::PI;
use std::io::Write;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::rng::seeded;
use crate::sparse::CsrMatrix;

/// Phasor averages with modulus at or below this are treated as zero and get
/// argument 0.
pub const ZERO_MODULUS: f64 = 1e-12;

const TAU: f64 = 2.0 * PI;

/// Wraps an angle to `[-pi, pi)`.
pub fn wrap_phase(x: f64) -> f64 {
    let mut r = x - TAU * ((x + PI) / TAU).floor();
    if r >= PI {
        r -= TAU;
    }
    if r < -PI {
        r += TAU;
    }
    r
}

/// Modulus and argument of `(re, im)`, with argument 0 for a vanishing modulus.
fn polar(re: f64, im: f64) -> (f64, f64) {
    let r = re.hypot(im);
    if r <= ZERO_MODULUS {
        (0.0, 0.0)
    } else {
        (r, wrap_phase(im.atan2(re)))
    }
}

/// Phase-to-phase adjacency and link-to-node incidence, raw and row-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseTopology {
    pub n_links: usize,
    pub n_nodes: usize,
    /// Binary `A_Phi` (links x links).
    pub raw_phase_adj: CsrMatrix,
    pub phase_adj_norm: CsrMatrix,
    /// Binary transposed incidence `Q^T` (links x nodes).
    pub raw_incidence: CsrMatrix,
    pub incidence_norm: CsrMatrix,
}

/// Samples a random binary phase adjacency over the given links. Links are
/// `(target, source)` node pairs; the incidence row of a link marks both
/// endpoints (a self-loop marks its single node).
pub fn build_phase_topology(links: &[(usize, usize)], n_nodes: usize, phase_density: f64, seed: u64) -> Result<PhaseTopology> {
    if links.is_empty() {
        return Err(Error::EmptyLinks);
    }
    if !(phase_density > 0.0 && phase_density <= 1.0) {
        return Err(Error::Config(format!("phase density must be in (0, 1], got {phase_density}")));
    }
    let n_links = links.len();
    let mut rng = seeded(seed, 0xF1A5);
    let mut adj = Vec::new();
    for i in 0..n_links {
        for j in 0..n_links {
            if i != j && rng.gen_bool(phase_density) {
                adj.push((i, j, 1.0));
            }
        }
    }
    let raw_phase_adj = CsrMatrix::from_triplets(n_links, n_links, adj)?;

    let mut inc = Vec::with_capacity(2 * n_links);
    for (l, &(target, source)) in links.iter().enumerate() {
        inc.push((l, target, 1.0));
        if source != target {
            inc.push((l, source, 1.0));
        }
    }
    let raw_incidence = CsrMatrix::from_triplets(n_links, n_nodes, inc)?;

    Ok(PhaseTopology {
        n_links,
        n_nodes,
        phase_adj_norm: raw_phase_adj.row_normalized_l1(),
        raw_phase_adj,
        incidence_norm: raw_incidence.row_normalized_l1(),
        raw_incidence,
    })
}

/// Hyperparameters of the phase dynamics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseConfig {
    pub eps1: f64,
    pub eps2: f64,
    /// Natural frequency shared by the active links, in radians per unit of
    /// phase time.
    pub omega0: f64,
    /// Fraction of links with nonzero natural frequency.
    pub lambda_density: f64,
    /// Phase lag applied to every link.
    pub gamma: f64,
    /// Density of the phase adjacency.
    pub phase_density: f64,
    /// Phase time advanced per frame (one Euler step).
    pub dt: f64,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        Self { eps1: 0.0, eps2: 1.0, omega0: 0.05, lambda_density: 0.5, gamma: 0.0, phase_density: 0.05, dt: 1.0 }
    }
}

impl PhaseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_density > 0.0 && self.lambda_density <= 1.0) {
            return Err(Error::Config(format!("lambda_density must be in (0, 1], got {}", self.lambda_density)));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Config("phase dt must be positive".into()));
        }
        for (name, v) in [("eps1", self.eps1), ("eps2", self.eps2), ("omega0", self.omega0), ("gamma", self.gamma)] {
            if !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite")));
            }
        }
        Ok(())
    }
}

/// Per-link parameters of the phase equation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseParams {
    pub omega0: Vec<f64>,
    pub eps1: f64,
    pub eps2: f64,
    pub gamma: Vec<f64>,
    pub lambda_density: f64,
    pub omega0_value: f64,
}

impl PhaseParams {
    /// Assigns `omega0` to `round(lambda_density * n_links)` links chosen
    /// without replacement; the rest get zero.
    pub fn new(n_links: usize, cfg: &PhaseConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let active = (cfg.lambda_density * n_links as f64).round() as usize;
        let mut rng = seeded(seed, 0x0A3E);
        let mut omega0 = vec![0.0; n_links];
        for i in sample(&mut rng, n_links, active.min(n_links)).iter() {
            omega0[i] = cfg.omega0;
        }
        Ok(Self {
            omega0,
            eps1: cfg.eps1,
            eps2: cfg.eps2,
            gamma: vec![cfg.gamma; n_links],
            lambda_density: cfg.lambda_density,
            omega0_value: cfg.omega0,
        })
    }
}

/// Link phases, wrapped, plus an unwrapped accumulator for winding counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseState {
    pub phi: Vec<f64>,
    pub unwrapped: Vec<f64>,
    pub t: f64,
}

impl PhaseState {
    pub fn new(phi: Vec<f64>) -> Self {
        let phi: Vec<f64> = phi.into_iter().map(wrap_phase).collect();
        Self { unwrapped: phi.clone(), phi, t: 0.0 }
    }

    /// Phases drawn uniformly from `[-pi, pi)`.
    pub fn random(n_links: usize, seed: u64) -> Self {
        let mut rng = seeded(seed, 0x9A5E);
        Self::new((0..n_links).map(|_| rng.gen_range(-PI..PI)).collect())
    }

    pub fn len(&self) -> usize {
        self.phi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phi.is_empty()
    }

    /// Adds `delta[i]` to every phase and rewraps.
    fn advance(&mut self, delta: impl Fn(usize) -> f64, dt: f64) {
        for i in 0..self.phi.len() {
            let d = delta(i);
            self.unwrapped[i] += d;
            self.phi[i] = wrap_phase(self.phi[i] + d);
        }
        self.t += dt;
    }

    /// Rotates every phase by the same angle.
    pub fn rotate(&mut self, angle: f64) {
        self.advance(|_| angle, 0.0);
    }
}

/// Global synchrony `R` and mean phase at time `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrderSample {
    #[serde(rename = "R")]
    pub r: f64,
    pub mean_phase: f64,
    pub t: f64,
}

/// Local order parameters `r_i` and mean-field angles `psi_i`.
pub fn local_mean_field(state: &PhaseState, topo: &PhaseTopology) -> (Vec<f64>, Vec<f64>) {
    let cos: Vec<f64> = state.phi.iter().map(|p| p.cos()).collect();
    let sin: Vec<f64> = state.phi.iter().map(|p| p.sin()).collect();
    let re = topo.phase_adj_norm.matvec(&cos);
    let im = topo.phase_adj_norm.matvec(&sin);
    re.iter().zip(&im).map(|(&a, &b)| polar(a, b)).unzip()
}

/// Per-link coupling amplitude `eps1 + eps2 * (Qn^T n*)`.
pub fn coupling_amplitude(node_states: &[f64], topo: &PhaseTopology, params: &PhaseParams) -> Vec<f64> {
    let rescaled: Vec<f64> = node_states.iter().map(|n| 0.5 * (n + 1.0)).collect();
    let activity = topo.incidence_norm.matvec(&rescaled);
    activity.into_iter().map(|a| params.eps1 + params.eps2 * a).collect()
}

/// One forward-Euler step of the coupled phase equation.
pub fn phase_step(state: &mut PhaseState, node_states: &[f64], topo: &PhaseTopology, params: &PhaseParams, dt: f64) -> Result<()> {
    if state.len() != topo.n_links {
        return Err(Error::IndexMismatch { expected: topo.n_links, actual: state.len() });
    }
    if node_states.len() != topo.n_nodes {
        return Err(Error::DimensionMismatch(format!("expected {} node states, got {}", topo.n_nodes, node_states.len())));
    }
    let phasors: Vec<(f64, f64)> = state.phi.iter().map(|p| p.sin_cos()).collect();
    let adj = &topo.phase_adj_norm;
    let inc = &topo.incidence_norm;
    let mut delta = vec![0.0; state.len()];
    // sin(psi - phi + gamma) is formed from the unnormalized mean phasor, so
    // no angle is ever materialized; a vanishing mean field means psi = 0
    par::fill_indexed(&mut delta, adj.nnz() >= par::PAR_MIN_NNZ, |i| {
        let (cols, w) = adj.row(i);
        let (mut re, mut im) = (0.0, 0.0);
        for (&j, &wj) in cols.iter().zip(w) {
            re += wj * phasors[j].1;
            im += wj * phasors[j].0;
        }
        let r = re.hypot(im);
        let (sin_psi, cos_psi) = if r <= ZERO_MODULUS { (0.0, 1.0) } else { (im / r, re / r) };
        let (sin_phi, cos_phi) = phasors[i];
        let mut s = sin_psi * cos_phi - cos_psi * sin_phi;
        let gamma = params.gamma[i];
        if gamma != 0.0 {
            let c = cos_psi * cos_phi + sin_psi * sin_phi;
            s = s * gamma.cos() + c * gamma.sin();
        }
        let (nodes, q) = inc.row(i);
        let activity: f64 = nodes.iter().zip(q).map(|(&k, &qk)| qk * 0.5 * (node_states[k] + 1.0)).sum();
        dt * (params.omega0[i] + (params.eps1 + params.eps2 * activity) * s)
    });
    state.advance(|i| delta[i], dt);
    Ok(())
}

/// Uniform forcing: every phase advances by `g * dt`, leaving all pairwise
/// differences (and therefore `R`) unchanged.
pub fn forced_phase_step(state: &mut PhaseState, g: f64, dt: f64) {
    state.advance(|_| g * dt, dt);
}

pub fn global_order(state: &PhaseState) -> OrderSample {
    let n = state.len().max(1) as f64;
    let (re, im) = state.phi.iter().fold((0.0, 0.0), |(re, im), p| (re + p.cos(), im + p.sin()));
    let (r, mean_phase) = polar(re / n, im / n);
    OrderSample { r: r.min(1.0), mean_phase, t: state.t }
}

/// Closed-form phase of an isolated link, `dphi/dt = omega0 + eps sin(psi0 - phi)`,
/// returned unwrapped (continuous in `t`).
///
/// With `theta = phi - psi0` and `u = tan(theta / 2)` the equation becomes a
/// Riccati equation in `u`. For `|omega0| > |eps|` the solution is a shifted
/// tangent and the phase winds; for `|omega0| < |eps|` it is a hyperbolic
/// tangent (or cotangent) and the phase locks to the stable root of
/// `omega0 = eps sin(theta)`.
pub fn isolated_phase_analytic(omega0: f64, eps: f64, psi0: f64, phi0: f64, t: f64) -> Result<f64> {
    if omega0 == 0.0 && eps == 0.0 {
        return Err(Error::Domain("omega0 and eps cannot both be zero".into()));
    }
    if t < 0.0 {
        return Err(Error::Domain(format!("t must be non-negative, got {t}")));
    }
    let theta0 = phi0 - psi0;
    let base = wrap_phase(theta0);
    let offset = theta0 - base;
    let u0 = (base / 2.0).tan();
    let sign = omega0.signum();

    let theta = if omega0 == 0.0 {
        2.0 * (u0 * (-eps * t).exp()).atan()
    } else {
        let a = eps / omega0;
        let disc = omega0 * omega0 - eps * eps;
        if disc > 0.0 {
            let d = disc.sqrt();
            let c = ((u0 - a) * omega0 / d).atan();
            let arg = 0.5 * d * t + c;
            let poles = ((arg + PI / 2.0) / PI).floor();
            let u = a + d / omega0 * arg.tan();
            2.0 * u.atan() + TAU * sign * poles
        } else if disc < 0.0 {
            let d = (-disc).sqrt();
            let w = (u0 - a) * omega0 / d;
            let s = 0.5 * d * t;
            if w.abs() < 1.0 {
                2.0 * (a - d / omega0 * (s - w.atanh()).tanh()).atan()
            } else if w.abs() > 1.0 {
                let acoth = 0.5 * ((w + 1.0) / (w - 1.0)).ln();
                let x = s - acoth;
                let crossed = w > 1.0 && x > 0.0;
                let u = a - d / omega0 / x.tanh();
                2.0 * u.atan() + if crossed { TAU * sign } else { 0.0 }
            } else {
                base
            }
        } else {
            let e = u0 - a;
            let denom = 1.0 - 0.5 * omega0 * e * t;
            let crossed = omega0 * e > 0.0 && denom < 0.0;
            2.0 * (a + e / denom).atan() + if crossed { TAU * sign } else { 0.0 }
        }
    };
    Ok(psi0 + offset + theta)
}

/// Writes a `t,R,mean_phase` log.
pub fn write_order_csv<W: Write>(samples: &[OrderSample], mut w: W) -> std::io::Result<()> {
    writeln!(w, "t,R,mean_phase")?;
    for s in samples {
        writeln!(w, "{:.16e},{:.16e},{:.16e}", s.t, s.r, s.mean_phase)?;
    }
    Ok(())
}
