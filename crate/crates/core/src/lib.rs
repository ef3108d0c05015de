//! Simulation and analysis toolkit for memory-assisted non-local optical
//! interferometry between two quantum-network stations.

pub mod hilbert;
pub mod spin_photon;
pub mod erasure;
pub mod metrics;
pub mod protocols;
pub mod schemes;
pub mod cli;
