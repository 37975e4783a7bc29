//! Long-run equilibrium of coupled zonal energy and capacity markets.
//!
//! Generators, consumers, an energy market operator and a capacity market
//! operator interact in perfectly competitive markets; the equilibrium is
//! found with an ADMM price-coordination loop and cross-checked against a
//! centralized welfare maximization. Six market designs are supported, from
//! an energy-only market to flow-based coupling of capacity markets.

pub mod case;
pub mod equilibrium;
pub mod error;
pub mod market_clearing;
pub mod network;
pub mod participants;
pub mod qp;
pub mod reporting;
pub mod scenario;
pub mod welfare_oracle;

pub use error::{Error, Result};
