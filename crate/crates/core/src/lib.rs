//! Federated unlearning simulator.
//!
//! Clients hold local shards; the server pretrains a classifier with FedAvg,
//! then removes the influence of designated clients by descending a
//! boundary-shift loss under multi-objective (min-norm) updates, and finally
//! restores utility while keeping distance from the pre-unlearning model.
//!
//! All arithmetic is `f64`. Every reduction (dot products, sums over samples,
//! FedAvg averaging) runs sequentially left to right, so results do not
//! depend on the thread count; parallel work is per client and collected in
//! client order.

pub mod audit;
pub mod config;
pub mod data;
pub mod error;
pub mod federation;
pub mod geometry;
pub mod line_search;
pub mod losses;
pub mod metrics;
pub mod mgda;
pub mod model;
pub mod numkit;
pub mod pipeline;
pub mod rundir;
pub mod sweep;

pub use error::{Error, Result};
