//! Convergent cross mapping for time-series causality, and a forecaster that
//! fuses a learned multi-manifold causal representation with a pluggable
//! backbone to predict web-service traffic.

pub mod ccm;
pub mod ccmplus;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod forecaster;
pub mod numeric;
pub mod rng;

pub use error::{Error, Result};
pub use numeric::DenseArray;
