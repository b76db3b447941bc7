//! Echo state network whose link strengths are modulated by link phases.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phasenet::{build_phase_topology, PhaseTopology};
use crate::rng::seeded;
use crate::sparse::CsrMatrix;

/// Scalar reservoir hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReservoirConfig {
    pub n_nodes: usize,
    pub node_density: f64,
    pub spectral_target: f64,
    /// Leakage: weight on the previous node state.
    pub alpha: f64,
    /// Input weights are uniform in `[-input_scale, input_scale]`.
    pub input_scale: f64,
    /// Bias added to every node.
    pub bias: f64,
    /// Modulation depth `m`.
    pub mod_depth: f64,
}

impl Default for ReservoirConfig {
    fn default() -> Self {
        Self { n_nodes: 300, node_density: 0.02, spectral_target: 0.9, alpha: 0.2, input_scale: 0.5, bias: 0.0, mod_depth: 0.4 }
    }
}

impl ReservoirConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_nodes < 2 {
            return Err(Error::Config("reservoir needs at least two nodes".into()));
        }
        if !(self.node_density > 0.0 && self.node_density <= 1.0) {
            return Err(Error::Config(format!("node_density must be in (0, 1], got {}", self.node_density)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must be in [0, 1], got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.mod_depth) {
            return Err(Error::Config(format!("mod_depth must be in [0, 1], got {}", self.mod_depth)));
        }
        if !(self.spectral_target > 0.0) || !(self.input_scale >= 0.0) || !self.bias.is_finite() {
            return Err(Error::Config("spectral_target must be positive, input_scale non-negative, bias finite".into()));
        }
        Ok(())
    }

    pub fn params(&self) -> ReservoirParams {
        ReservoirParams { alpha: self.alpha, bias: vec![self.bias; self.n_nodes], mod_depth: self.mod_depth }
    }
}

/// Per-node update parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReservoirParams {
    pub alpha: f64,
    pub bias: Vec<f64>,
    pub mod_depth: f64,
}

/// Node adjacency, input map and the link enumeration. Link `k` is the
/// `k`-th stored nonzero of `node_adj` in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct ReservoirTopology {
    pub node_adj: CsrMatrix,
    /// `n_nodes x input_dim`.
    pub input_map: DMatrix<f64>,
}

impl ReservoirTopology {
    pub fn n_nodes(&self) -> usize {
        self.node_adj.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.input_map.ncols()
    }

    pub fn n_links(&self) -> usize {
        self.node_adj.nnz()
    }

    /// `(target, source)` node pair of every link, in phase-vector order.
    pub fn links(&self) -> Vec<(usize, usize)> {
        self.node_adj.triplets().map(|(r, c, _)| (r, c)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReservoirState {
    pub n: Vec<f64>,
    pub t: u64,
}

impl ReservoirState {
    pub fn zeros(n_nodes: usize) -> Self {
        Self { n: vec![0.0; n_nodes], t: 0 }
    }
}

/// Linear map from node states to outputs (`input_dim x n_nodes`).
#[derive(Debug, Clone, PartialEq)]
pub struct ReadoutMatrix {
    pub w_out: DMatrix<f64>,
}

impl ReadoutMatrix {
    pub fn zeros(outputs: usize, nodes: usize) -> Self {
        Self { w_out: DMatrix::zeros(outputs, nodes) }
    }
}

/// Power-iteration estimate of the spectral radius of `|A|`.
///
/// Iterates on `|A| + I` from a seeded positive start vector; the shift keeps
/// the iteration aperiodic for cyclic sparsity patterns and moves every
/// eigenvalue by exactly one.
pub fn spectral_radius(a: &CsrMatrix, iters: usize, tol: f64) -> Result<f64> {
    if a.rows() != a.cols() {
        return Err(Error::DimensionMismatch(format!("spectral radius of {}x{} matrix", a.rows(), a.cols())));
    }
    let n = a.rows();
    if n == 0 {
        return Ok(0.0);
    }
    if is_acyclic(a) {
        return Ok(0.0);
    }
    let abs = a.abs();
    let mut rng = seeded(0x5EED, 0x50E7);
    let mut x: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let s = norm(&x);
    x.iter_mut().for_each(|v| *v /= s);

    let mut y = vec![0.0; n];
    let mut estimate = f64::NAN;
    let mut delta = f64::INFINITY;
    for _ in 0..iters {
        abs.matvec_into(&x, &mut y);
        for (yi, xi) in y.iter_mut().zip(&x) {
            *yi += xi;
        }
        let ny = norm(&y);
        if ny == 0.0 {
            return Ok(0.0);
        }
        let next = ny - 1.0;
        delta = (next - estimate).abs();
        estimate = next;
        for (xi, yi) in x.iter_mut().zip(&y) {
            *xi = yi / ny;
        }
        if delta <= tol * estimate.abs().max(1.0) {
            return Ok(estimate.max(0.0));
        }
    }
    Err(Error::NonConvergence { iters, last_delta: delta })
}

/// A nonnegative matrix has spectral radius zero exactly when its sparsity
/// graph has no cycles (self-loops included).
fn is_acyclic(a: &CsrMatrix) -> bool {
    let n = a.rows();
    let mut indegree = vec![0usize; n];
    for (_, c, v) in a.triplets() {
        if v != 0.0 {
            indegree[c] += 1;
        }
    }
    let mut stack: Vec<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut seen = 0;
    while let Some(r) = stack.pop() {
        seen += 1;
        let (cols, vals) = a.row(r);
        for (&c, &v) in cols.iter().zip(vals) {
            if v != 0.0 {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    stack.push(c);
                }
            }
        }
    }
    seen == n
}

pub const SPECTRAL_ITERS: usize = 200_000;
pub const SPECTRAL_TOL: f64 = 1e-14;

/// Samples the node adjacency and input map, rescales the adjacency so that
/// `|A_n|` has the configured spectral radius, and builds the phase topology
/// over its links.
pub fn build_reservoir(
    cfg: &ReservoirConfig,
    input_dim: usize,
    phase_density: f64,
    seed: u64,
) -> Result<(ReservoirTopology, PhaseTopology)> {
    cfg.validate()?;
    let n = cfg.n_nodes;
    let mut rng = seeded(seed, 0xAD10);
    let mut entries = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if rng.gen_bool(cfg.node_density) {
                entries.push((i, j, rng.gen_range(-1.0..=1.0)));
            }
        }
    }
    let raw = CsrMatrix::from_triplets(n, n, entries)?;
    if raw.nnz() == 0 {
        return Err(Error::EmptyLinks);
    }
    let radius = spectral_radius(&raw, SPECTRAL_ITERS, SPECTRAL_TOL)?;
    if radius < 1e-12 {
        return Err(Error::NilpotentAdjacency { radius });
    }
    let node_adj = raw.scale(cfg.spectral_target / radius);

    let mut rng = seeded(seed, 0x1A9E);
    let input_map = DMatrix::from_fn(n, input_dim, |_, _| rng.gen_range(-cfg.input_scale..=cfg.input_scale));

    let topo = ReservoirTopology { node_adj, input_map };
    let phases = build_phase_topology(&topo.links(), n, phase_density, seed)?;
    Ok((topo, phases))
}

/// Strength factor of a link with phase `phi`: `1 - (m/2)(1 + sin phi)`.
#[inline]
pub fn modulation_factor(phi: f64, m: f64) -> f64 {
    1.0 - 0.5 * m * (1.0 + phi.sin())
}

/// `A_n` with every nonzero scaled by its link's modulation factor.
pub fn modulated_adjacency(topo: &ReservoirTopology, phi: &[f64], m: f64) -> Result<CsrMatrix> {
    let mut values = vec![0.0; topo.n_links()];
    modulate_into(topo, phi, m, &mut values)?;
    topo.node_adj.with_values(values)
}

fn modulate_into(topo: &ReservoirTopology, phi: &[f64], m: f64, out: &mut [f64]) -> Result<()> {
    if phi.len() != topo.n_links() {
        return Err(Error::IndexMismatch { expected: topo.n_links(), actual: phi.len() });
    }
    for ((o, &a), &p) in out.iter_mut().zip(topo.node_adj.values()).zip(phi) {
        *o = a * modulation_factor(p, m);
    }
    Ok(())
}

/// Stateful stepper that reuses its buffers between frames.
#[derive(Debug, Clone)]
pub struct Reservoir {
    pub topo: ReservoirTopology,
    pub params: ReservoirParams,
    modulated: Vec<f64>,
    pre: Vec<f64>,
}

impl Reservoir {
    pub fn new(topo: ReservoirTopology, params: ReservoirParams) -> Result<Self> {
        if params.bias.len() != topo.n_nodes() {
            return Err(Error::DimensionMismatch(format!("bias has {} entries for {} nodes", params.bias.len(), topo.n_nodes())));
        }
        let (nnz, n) = (topo.n_links(), topo.n_nodes());
        Ok(Self { topo, params, modulated: vec![0.0; nnz], pre: vec![0.0; n] })
    }

    /// `n <- alpha n + (1 - alpha) tanh(A~(phi) n + W_in u + xi)`.
    ///
    /// With `phi = None` the static adjacency is used.
    pub fn step(&mut self, state: &mut ReservoirState, u: &[f64], phi: Option<&[f64]>) -> Result<()> {
        if u.len() != self.topo.input_dim() {
            return Err(Error::DimensionMismatch(format!("input has {} components, expected {}", u.len(), self.topo.input_dim())));
        }
        match phi {
            Some(phi) => {
                modulate_into(&self.topo, phi, self.params.mod_depth, &mut self.modulated)?;
                self.topo.node_adj.matvec_values_into(&self.modulated, &state.n, &mut self.pre);
            }
            None => self.topo.node_adj.matvec_into(&state.n, &mut self.pre),
        }
        let alpha = self.params.alpha;
        let w_in = &self.topo.input_map;
        for (i, (n_i, pre_i)) in state.n.iter_mut().zip(&self.pre).enumerate() {
            let mut drive = pre_i + self.params.bias[i];
            for (c, &uc) in u.iter().enumerate() {
                drive += w_in[(i, c)] * uc;
            }
            *n_i = alpha * *n_i + (1.0 - alpha) * drive.tanh();
        }
        state.t += 1;
        Ok(())
    }
}

/// One node update; allocating convenience wrapper around [`Reservoir::step`].
pub fn reservoir_step(
    state: &ReservoirState,
    u: &[f64],
    phi: &[f64],
    topo: &ReservoirTopology,
    params: &ReservoirParams,
) -> Result<ReservoirState> {
    let mut r = Reservoir::new(topo.clone(), params.clone())?;
    let mut next = state.clone();
    r.step(&mut next, u, Some(phi))?;
    Ok(next)
}

/// `W_out n`.
pub fn readout(w_out: &ReadoutMatrix, state: &[f64]) -> Result<Vec<f64>> {
    if w_out.w_out.ncols() != state.len() {
        return Err(Error::DimensionMismatch(format!("readout has {} columns, state has {} nodes", w_out.w_out.ncols(), state.len())));
    }
    Ok((&w_out.w_out * DVector::from_column_slice(state)).as_slice().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use std::f64::consts::PI;

    #[test]
    fn spectral_radius_simple() {
        let r = spectral_radius(&CsrMatrix::identity(5), 1000, 1e-14).unwrap();
        assert_abs_diff_eq!(r, 1.0, epsilon = 1e-12);
        let d = CsrMatrix::from_triplets(2, 2, vec![(0, 0, 2.0), (1, 1, 0.5)]).unwrap();
        assert_abs_diff_eq!(spectral_radius(&d, 10_000, 1e-15).unwrap(), 2.0, epsilon = 1e-10);
        // negative entries enter through |A|
        let d = CsrMatrix::from_triplets(2, 2, vec![(0, 0, -3.0), (1, 1, 0.5)]).unwrap();
        assert_abs_diff_eq!(spectral_radius(&d, 10_000, 1e-15).unwrap(), 3.0, epsilon = 1e-10);
    }

    #[test]
    fn spectral_radius_reports_non_convergence() {
        let d = CsrMatrix::from_triplets(2, 2, vec![(0, 0, 1.0), (1, 1, 0.999)]).unwrap();
        assert!(matches!(spectral_radius(&d, 3, 1e-15), Err(Error::NonConvergence { iters: 3, .. })));
    }

    #[test]
    fn strictly_triangular_is_nilpotent() {
        let a = CsrMatrix::from_triplets(3, 3, vec![(0, 1, 1.0), (1, 2, 1.0)]).unwrap();
        assert!(spectral_radius(&a, 10_000, 1e-14).unwrap() < 1e-12);
    }

    fn small_cfg() -> ReservoirConfig {
        ReservoirConfig { n_nodes: 60, node_density: 0.1, ..Default::default() }
    }

    #[test]
    fn built_reservoir_meets_targets() {
        let cfg = ReservoirConfig { spectral_target: 0.9, input_scale: 0.5, ..small_cfg() };
        let (topo, phases) = build_reservoir(&cfg, 3, 0.1, 11).unwrap();
        let r = spectral_radius(&topo.node_adj, SPECTRAL_ITERS, SPECTRAL_TOL).unwrap();
        assert!((r - 0.9).abs() <= 1e-6, "{r}");
        assert!(topo.input_map.iter().all(|w| w.abs() <= 0.5));
        assert_eq!(phases.n_links, topo.n_links());
        assert_eq!(topo.input_map.shape(), (60, 3));
    }

    #[test]
    fn modulation_bounds() {
        let a = CsrMatrix::from_triplets(2, 2, vec![(0, 1, 0.8), (1, 0, -0.5)]).unwrap();
        let topo = ReservoirTopology { node_adj: a.clone(), input_map: DMatrix::zeros(2, 1) };
        assert_eq!(modulated_adjacency(&topo, &[0.3, -2.0], 0.0).unwrap(), a);
        let up = modulated_adjacency(&topo, &[-PI / 2.0, -PI / 2.0], 0.4).unwrap();
        assert_eq!(up.values(), a.values());
        let down = modulated_adjacency(&topo, &[PI / 2.0, PI / 2.0], 0.4).unwrap();
        assert_abs_diff_eq!(down.values()[0], 0.6 * 0.8, epsilon = 1e-15);
        assert_abs_diff_eq!(down.values()[1], 0.6 * -0.5, epsilon = 1e-15);
        assert!(matches!(modulated_adjacency(&topo, &[0.0], 0.4), Err(Error::IndexMismatch { .. })));
    }

    fn two_node() -> (ReservoirTopology, ReservoirParams) {
        let a = CsrMatrix::from_triplets(2, 2, vec![(0, 1, 0.5), (1, 0, 0.5)]).unwrap();
        let topo = ReservoirTopology { node_adj: a, input_map: DMatrix::from_column_slice(2, 1, &[1.0, -1.0]) };
        (topo, ReservoirParams { alpha: 0.2, bias: vec![0.0; 2], mod_depth: 0.0 })
    }

    #[test]
    fn node_update_golden() {
        let (topo, params) = two_node();
        let s = ReservoirState { n: vec![0.1, -0.1], t: 0 };
        let next = reservoir_step(&s, &[0.3], &[0.0, 0.0], &topo, &params).unwrap();
        // by hand: drive_0 = 0.5 * -0.1 + 0.3 = 0.25, drive_1 = 0.5 * 0.1 - 0.3 = -0.25
        // n0 = 0.2 * 0.1 + 0.8 * tanh(0.25) = 0.02 + 0.8 * 0.24491866240370913
        assert_abs_diff_eq!(next.n[0], 0.215_934_929_922_967_3, epsilon = 1e-15);
        assert_abs_diff_eq!(next.n[1], -0.215_934_929_922_967_3, epsilon = 1e-15);
    }

    #[test]
    fn node_update_trivial_cases() {
        let (topo, mut params) = two_node();
        let s = ReservoirState { n: vec![0.4, -0.7], t: 0 };
        params.alpha = 1.0;
        assert_eq!(reservoir_step(&s, &[5.0], &[0.0; 2], &topo, &params).unwrap().n, s.n);
        params.alpha = 0.3;
        let z = ReservoirState::zeros(2);
        assert_eq!(reservoir_step(&z, &[0.0], &[1.0; 2], &topo, &params).unwrap().n, vec![0.0, 0.0]);
    }

    #[test]
    fn zero_depth_matches_static_network_bitwise() {
        let cfg = ReservoirConfig { mod_depth: 0.0, ..small_cfg() };
        let (topo, _) = build_reservoir(&cfg, 2, 0.1, 3).unwrap();
        let mut a = Reservoir::new(topo.clone(), cfg.params()).unwrap();
        let mut b = a.clone();
        let mut sa = ReservoirState::zeros(60);
        let mut sb = sa.clone();
        let mut rng = seeded(1, 1);
        for _ in 0..200 {
            let u = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            let phi: Vec<f64> = (0..topo.n_links()).map(|_| rng.gen_range(-PI..PI)).collect();
            a.step(&mut sa, &u, Some(&phi)).unwrap();
            b.step(&mut sb, &u, None).unwrap();
            assert_eq!(sa.n, sb.n);
        }
    }

    #[test]
    fn readout_cases() {
        let n = [0.1, -0.2, 0.3];
        assert_eq!(readout(&ReadoutMatrix::zeros(2, 3), &n).unwrap(), vec![0.0, 0.0]);
        let mut sel = ReadoutMatrix::zeros(1, 3);
        sel.w_out[(0, 2)] = 1.0;
        assert_eq!(readout(&sel, &n).unwrap(), vec![0.3]);
        assert!(readout(&sel, &[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn modulation_factor_in_range(phi in -10.0f64..10.0, m in 0.0f64..=1.0) {
            let f = modulation_factor(phi, m);
            prop_assert!(f >= 1.0 - m - 1e-15 && f <= 1.0 + 1e-15);
        }
    }
}
