//! Deterministic federated-learning simulator for heterogeneous industrial
//! assets.
//!
//! The library simulates a server and a set of clients that never share raw
//! data. After the first communication round the server groups clients into
//! cohorts by spectral clustering of their flattened model parameters
//! ([`cohorting`]), then runs federated rounds per cohort with either a fixed
//! aggregation strategy or an adaptive per-round selection among
//! FedAvg/FedAdagrad/FedYogi/FedAdam ([`aggregation`]).
//!
//! Everything is seeded and bit-reproducible: two runs with the same
//! configuration produce byte-identical logs.
//!
//! The crate splits into:
//! - [`linalg`]: dense symmetric eigendecomposition and k-means,
//! - [`model`]: a small dense network with exact gradients and SGD,
//! - [`cohorting`]: parameter-based, metadata, and moment-based cohorting,
//! - [`aggregation`]: server strategies and the adaptive selector,
//! - [`orchestrator`]: the federation round loop,
//! - [`data`]: CSV ingestion, windowing/labeling, synthetic generators,
//! - [`metrics`]: MSE, F1, adjusted Rand index,
//! - [`experiment`]: config-driven experiment runner and log comparison.

pub mod aggregation;
pub mod cohorting;
pub mod data;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod orchestrator;

pub use error::{Error, Result};

/// Identifier of a client (one industrial machine) in a federation.
pub type ClientId = u64;

/// Derives a deterministic sub-seed for one client at one communication
/// round. Stable mixing, independent of the platform hasher.
pub fn subseed(master: u64, client: ClientId, round: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(master
        .wrapping_add(mix(client.wrapping_add(0x9E37_79B9_7F4A_7C15)))
        .wrapping_add(mix(round.wrapping_mul(0xD1B5_4A32_D192_ED03))))
}
