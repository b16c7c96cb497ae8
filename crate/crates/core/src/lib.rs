//! Early classification of multivariate time series.
//!
//! An LSTM classifier with an extra stopping-probability head, trained with a
//! stopping-time-weighted earliness-reward loss, plus a synthetic crop
//! phenology generator and the training/evaluation pipeline around it.

pub mod cli;
pub mod data;
pub mod diffcore;
pub mod earliness;
pub mod eval;
pub mod model;
pub mod train;
