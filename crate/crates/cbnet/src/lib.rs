//! # cbnet
//!
//! A seeded, deterministic simulator of dense IEEE 802.11 deployments using
//! dynamic channel bonding, plus a dataset pipeline and a set of
//! from-scratch regressors that predict per-STA and per-BSS throughput.
//!
//! The crate is organized as a pipeline:
//!
//! 1. [`deployment`] — generate random enterprise-like deployments
//!    (APs on a jittered grid, STAs in a disc around their AP) and
//!    read/write them as versioned CSV files.
//! 2. [`channels`] — the 8x20 MHz channel space and the three dynamic
//!    channel-bonding policies (SCB, AM, PU) as pure functions over a
//!    free/busy mask.
//! 3. [`rf`] — link budgets: path loss, RSSI, SINR, and the SINR-to-rate
//!    lookup table.
//! 4. [`sim`] — an event-driven CSMA/CA simulation producing per-STA
//!    throughput, per-AP per-channel airtime, and time-averaged link
//!    observables.
//! 5. [`features`] — feature tables at STA and BSS granularity, with the
//!    preprocessing steps used by the reference models (standard scaling,
//!    Yeo-Johnson, deployment-level splits).
//! 6. [`predictors`] — MLP, random forest, k-NN, gradient boosting, and a
//!    graph network, all behind one fit/predict contract.
//! 7. [`eval`] — RMSE/MAE scoring, error histograms, and report emission.
//! 8. [`cli`] — batch commands tying the stages together.
//!
//! Every stage is deterministic given its seed: the same configuration
//! produces byte-identical output files.

pub mod channels;
pub mod cli;
pub mod config;
pub mod deployment;
pub mod eval;
pub mod features;
pub mod predictors;
pub mod rf;
pub mod rng;
pub mod sim;
pub mod textio;
