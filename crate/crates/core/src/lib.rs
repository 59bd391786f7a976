//! Quickest detection of attacks on the signal of a correlated-equilibrium
//! mediator.

pub mod adversary;
pub mod cli;
pub mod config;
pub mod detection;
pub mod equilibrium;
pub mod error;
pub mod game;
pub mod simulation;
pub mod tilted;

pub use error::{Error, Result};

/// Round-trippable float formatting used in every CSV and JSON report.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "NaN".to_string()
    } else if x.is_infinite() {
        if x > 0.0 {
            "inf".to_string()
        } else {
            "-inf".to_string()
        }
    } else {
        format!("{x:.16e}")
    }
}
