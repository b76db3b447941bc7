#![allow(dead_code)]

use std::path::Path;

use rhythmic_core::experiment::{train_twin, ExperimentConfig, ExperimentKind};
use rhythmic_steerd::SessionConfig;

/// Small twin trained on a short two-state record; good enough to stream.
pub fn write_bundle(dir: &Path) {
    let mut cfg = ExperimentConfig::preset(ExperimentKind::TwinTrain);
    cfg.model.reservoir.n_nodes = 60;
    cfg.model.reservoir.node_density = 0.08;
    cfg.train.warmup_steps = 300;
    cfg.train.train_steps = 3000;
    cfg.twin.dwell_min = 500;
    cfg.twin.dwell_max = 900;
    train_twin(&cfg).unwrap().bundle.save(dir).unwrap();
}

pub fn quick(seed: u64) -> SessionConfig {
    SessionConfig { warmup_frames: 300, seed, fps: 200.0, ..SessionConfig::default() }
}
