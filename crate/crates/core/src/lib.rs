//! Phase-modulated reservoir computing for nonstationary dynamical systems.
//!
//! A reservoir whose links carry oscillating phases is driven by a signal,
//! trained with ridge regression and then run closed loop. The link phases
//! track slow changes in the driving system; freezing or re-targeting them
//! steers the twin between regimes.

pub mod analysis;
pub mod bundle;
pub mod dynsys;
pub mod error;
pub mod experiment;
pub mod io;
pub mod learner;
pub mod par;
pub mod phasenet;
pub mod reservoir;
pub mod rng;
pub mod sparse;

pub use error::{Error, Result};
