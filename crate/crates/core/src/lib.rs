//! Privacy-preserving analytics over smart-meter interval data.
//!
//! The crate is organised by technique:
//!
//! - [`meterdata`]: fixed-point interval readings, CSV ingestion and exact
//!   (non-private) interval totals.
//! - [`anonymize`]: keyed rotating pseudonyms, generalization, aggregation
//!   thresholds and a k-anonymity verifier.
//! - [`dp`]: Laplace and Gaussian mechanisms, DP count/sum/mean/histogram
//!   queries and an append-only privacy budget ledger.
//! - [`synthetic`]: cluster-profile load generator plus fidelity and
//!   memorization checks.
//! - [`fedlearn`]: federated averaging of a linear load model with pairwise
//!   masked secure aggregation and clipped, noised updates.
//! - [`smpc`]: additive secret sharing and a simulated n-party secure sum.
//! - [`he`]: Paillier encryption with encrypted aggregation and billing.
//! - [`gateway`]: purpose-based request routing in front of all of the above,
//!   with a hash-chained audit log.

pub mod anonymize;
pub mod dp;
pub mod fedlearn;
pub mod gateway;
pub mod he;
pub mod meterdata;
pub mod smpc;
pub mod synthetic;

pub use meterdata::{EnergyQuantity, FeederDataset, MeterId, MeterReading, ReadingSeries};
