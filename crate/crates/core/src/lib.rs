//! Planning-aware evaluation of trajectory forecasts and object detections.
//!
//! A linear planning cost is learned from demonstrations with continuous
//! inverse optimal control; its gradients with respect to predicted or
//! detected agent positions measure how much each agent matters to the
//! ego plan and are used to reweight the usual accuracy metrics.

pub mod cioc;
pub mod cost;
pub mod dynamics;
pub mod error;
pub mod gradcheck;
pub mod lane;
pub mod metrics;
pub mod optim;
pub mod planner;
pub mod prediction;
pub mod scene;
pub mod sim;
pub mod trajectory;

pub use error::{Error, Result};
