//! Two-phase volume-discount pricing engine.
//!
//! Phase 1 estimates the demand curve by Bayesian linear regression with
//! monotonicity-preserving priors and picks the profit-maximizing average
//! price by Thompson sampling ([`optimizer`]). Phase 2 turns that price into
//! a threshold/price schedule: buyback probability from repeat purchases,
//! thresholds from the basket-size distribution, discounts and margins that
//! keep the expected margin of the schedule equal to the single-price
//! optimum ([`discount`]).
//!
//! The crate also ships a synthetic market with known ground truth
//! ([`sim`]), the closed-loop policies that run against it ([`policy`]),
//! and the permutation-test evaluation harness ([`eval`]).

pub mod config;
pub mod data;
pub mod demand;
pub mod discount;
pub mod error;
pub mod eval;
pub mod optimizer;
pub mod policy;
pub mod sim;

pub use error::{Error, Result};
