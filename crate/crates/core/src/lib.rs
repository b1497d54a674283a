//! Hourly price and headline-sentiment trading with an advantage actor-critic learner.

pub mod agent;
pub mod data;
pub mod env;
pub mod eval;
pub mod nn;
pub mod sentiment;
