//! On-disk model bundle: a directory holding the trained twin's matrices and
//! a JSON manifest with every hyperparameter and seed.
//!
//! ```text
//! manifest.json        Manifest
//! node_adjacency.txt   scaled A_n, sparse triplets
//! input_map.bin        W_in, binary matrix
//! bias.bin             node bias, binary vector
//! phase_adjacency.txt  binary A_Phi, sparse triplets
//! incidence.txt        binary Q^T, sparse triplets
//! omega0.bin           per-link natural frequencies
//! gamma.bin            per-link phase lags
//! phases.bin           phases at the end of training
//! w_out.bin            readout, binary matrix
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynsys::{SimOptions, SystemSpec};
use crate::error::{Error, Result};
use crate::io::{load_matrix, load_vector, save_matrix, save_vector};
use crate::learner::{InputScaler, ModelConfig, ReadoutMatrix, TargetingConfig, TrainConfig, Twin};
use crate::phasenet::{PhaseParams, PhaseState, PhaseTopology};
use crate::reservoir::{Reservoir, ReservoirParams, ReservoirState, ReservoirTopology};
use crate::sparse::CsrMatrix;

pub const BUNDLE_FORMAT: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub code_version: String,
    pub model: ModelConfig,
    pub input_dim: usize,
    pub system: SystemSpec,
    pub sim: SimOptions,
    pub scaler: InputScaler,
    pub train: TrainConfig,
    pub targeting: TargetingConfig,
    pub data_seed: u64,
    /// Parameter values present in the training data.
    pub training_lambdas: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Bundle {
    pub manifest: Manifest,
    /// Twin with blank node state and the post-training phases.
    pub twin: Twin,
    pub w_out: ReadoutMatrix,
}

fn incompatible(msg: impl Into<String>) -> Error {
    Error::BundleIncompatible(msg.into())
}

impl Bundle {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let twin = &self.twin;
        std::fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&self.manifest)?)?;
        twin.reservoir.topo.node_adj.save(&dir.join("node_adjacency.txt"))?;
        save_matrix(&dir.join("input_map.bin"), &twin.reservoir.topo.input_map)?;
        save_vector(&dir.join("bias.bin"), &twin.reservoir.params.bias)?;
        twin.phase_topo.raw_phase_adj.save(&dir.join("phase_adjacency.txt"))?;
        twin.phase_topo.raw_incidence.save(&dir.join("incidence.txt"))?;
        save_vector(&dir.join("omega0.bin"), &twin.phase_params.omega0)?;
        save_vector(&dir.join("gamma.bin"), &twin.phase_params.gamma)?;
        save_vector(&dir.join("phases.bin"), &twin.phases.phi)?;
        save_matrix(&dir.join("w_out.bin"), &self.w_out.w_out)?;
        Ok(())
    }

    /// Loads and cross-checks a bundle. Any missing file, version mismatch or
    /// inconsistent shape is reported as [`Error::BundleIncompatible`].
    pub fn load(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join(MANIFEST))
            .map_err(|e| incompatible(format!("cannot read manifest in {}: {e}", dir.display())))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| incompatible(format!("malformed manifest: {e}")))?;
        if manifest.format_version != BUNDLE_FORMAT {
            return Err(incompatible(format!("bundle format {} but this build reads {BUNDLE_FORMAT}", manifest.format_version)));
        }
        if manifest.code_version != env!("CARGO_PKG_VERSION") {
            return Err(incompatible(format!(
                "bundle written by version {}, this is {}",
                manifest.code_version,
                env!("CARGO_PKG_VERSION")
            )));
        }
        let wrap = |e: Error| match e {
            Error::BundleIncompatible(_) => e,
            other => incompatible(other.to_string()),
        };
        Self::load_parts(dir, manifest).map_err(wrap)
    }

    fn load_parts(dir: &Path, manifest: Manifest) -> Result<Self> {
        let node_adj = CsrMatrix::load(&dir.join("node_adjacency.txt"))?;
        let input_map = load_matrix(&dir.join("input_map.bin"))?;
        let bias = load_vector(&dir.join("bias.bin"))?;
        let raw_phase_adj = CsrMatrix::load(&dir.join("phase_adjacency.txt"))?;
        let raw_incidence = CsrMatrix::load(&dir.join("incidence.txt"))?;
        let omega0 = load_vector(&dir.join("omega0.bin"))?;
        let gamma = load_vector(&dir.join("gamma.bin"))?;
        let phases = load_vector(&dir.join("phases.bin"))?;
        let w_out = load_matrix(&dir.join("w_out.bin"))?;

        let cfg = &manifest.model;
        let n = cfg.reservoir.n_nodes;
        let links = node_adj.nnz();
        let checks = [
            (node_adj.rows() == n && node_adj.cols() == n, "node adjacency shape"),
            (input_map.nrows() == n && input_map.ncols() == manifest.input_dim, "input map shape"),
            (bias.len() == n, "bias length"),
            (raw_phase_adj.rows() == links && raw_phase_adj.cols() == links, "phase adjacency shape"),
            (raw_incidence.rows() == links && raw_incidence.cols() == n, "incidence shape"),
            (omega0.len() == links && gamma.len() == links && phases.len() == links, "per-link vector length"),
            (w_out.nrows() == manifest.input_dim && w_out.ncols() == n, "readout shape"),
            (w_out.iter().all(|v| v.is_finite()), "readout finiteness"),
        ];
        if let Some((_, what)) = checks.iter().find(|(ok, _)| !ok) {
            return Err(incompatible(format!("{what} disagrees with manifest")));
        }

        let topo = ReservoirTopology { node_adj, input_map };
        let params = ReservoirParams { alpha: cfg.reservoir.alpha, bias, mod_depth: cfg.reservoir.mod_depth };
        let phase_topo = PhaseTopology {
            n_links: links,
            n_nodes: n,
            phase_adj_norm: raw_phase_adj.row_normalized_l1(),
            raw_phase_adj,
            incidence_norm: raw_incidence.row_normalized_l1(),
            raw_incidence,
        };
        let phase_params = PhaseParams {
            omega0,
            eps1: cfg.phase.eps1,
            eps2: cfg.phase.eps2,
            gamma,
            lambda_density: cfg.phase.lambda_density,
            omega0_value: cfg.phase.omega0,
        };
        let twin = Twin {
            reservoir: Reservoir::new(topo, params)?,
            phase_topo,
            phase_params,
            phase_dt: cfg.phase.dt,
            order: cfg.order,
            nodes: ReservoirState::zeros(n),
            phases: PhaseState::new(phases),
        };
        Ok(Self { manifest, twin, w_out: ReadoutMatrix { w_out } })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reservoir::ReservoirConfig;

    fn small_bundle() -> Bundle {
        let model = ModelConfig {
            reservoir: ReservoirConfig { n_nodes: 12, node_density: 0.3, ..Default::default() },
            seed: 4,
            ..Default::default()
        };
        let twin = Twin::build(&model, 3).unwrap();
        let w_out = ReadoutMatrix { w_out: nalgebra::DMatrix::from_fn(3, 12, |r, c| (r * 12 + c) as f64 * 0.01) };
        let spec = SystemSpec::Thomas;
        Bundle {
            manifest: Manifest {
                format_version: BUNDLE_FORMAT,
                code_version: env!("CARGO_PKG_VERSION").into(),
                model,
                input_dim: 3,
                system: spec,
                sim: SimOptions::for_system(&spec, 100),
                scaler: InputScaler::identity(3),
                train: TrainConfig::default(),
                targeting: TargetingConfig::default(),
                data_seed: 1,
                training_lambdas: vec![0.18, 0.29],
            },
            twin,
            w_out,
        }
    }

    #[test]
    fn round_trip_preserves_twin() {
        let dir = tempfile::tempdir().unwrap();
        let b = small_bundle();
        b.save(dir.path()).unwrap();
        let back = Bundle::load(dir.path()).unwrap();
        assert_eq!(back.manifest, b.manifest);
        assert_eq!(back.w_out, b.w_out);
        assert_eq!(back.twin.reservoir.topo, b.twin.reservoir.topo);
        assert_eq!(back.twin.phase_topo, b.twin.phase_topo);
        assert_eq!(back.twin.phase_params, b.twin.phase_params);
        assert_eq!(back.twin.phases.phi, b.twin.phases.phi);
    }

    #[test]
    fn corrupted_manifest_is_incompatible() {
        let dir = tempfile::tempdir().unwrap();
        small_bundle().save(dir.path()).unwrap();
        std::fs::write(dir.path().join(MANIFEST), "{ not json").unwrap();
        assert!(matches!(Bundle::load(dir.path()), Err(Error::BundleIncompatible(_))));
    }

    #[test]
    fn version_and_shape_checks() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = small_bundle();
        b.manifest.format_version = 99;
        b.save(dir.path()).unwrap();
        assert!(matches!(Bundle::load(dir.path()), Err(Error::BundleIncompatible(_))));

        let mut b = small_bundle();
        b.manifest.input_dim = 2;
        b.save(dir.path()).unwrap();
        assert!(matches!(Bundle::load(dir.path()), Err(Error::BundleIncompatible(_))));

        small_bundle().save(dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("w_out.bin")).unwrap();
        assert!(matches!(Bundle::load(dir.path()), Err(Error::BundleIncompatible(_))));
    }
}
