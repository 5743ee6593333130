//! Mesoscopic traffic simulation for signalized grid networks.
//!
//! The crate builds rectangular grid networks ([`netgrid`]), synthesizes
//! Poisson demand ([`demand`]), runs a discrete 1 s point-queue engine
//! ([`engine`]) under fixed-cycle or auction-based signal control
//! ([`control`]), and evaluates the results ([`metrics`]). On top of the
//! simulator sit an entitlement market ([`market`]), parameter search and
//! city-scale extrapolation ([`optimize`]), CSV/JSON artifact handling
//! ([`io`]), and config-driven scenario orchestration ([`scenario`]).

pub mod control;
pub mod demand;
pub mod engine;
pub mod market;
pub mod metrics;
pub mod netgrid;
pub mod optimize;
