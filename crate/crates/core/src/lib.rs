//! Fractional Brownian motion, fractional calculus primitives and a numerical
//! solver for anticipative backward SDEs driven by fBm (H > 1/2), together with
//! the Monte Carlo and structural checks that exercise them.

pub mod cli;
pub mod config;
pub mod error;
pub mod fbm;
pub mod frac_calc;
pub mod model;
pub mod quadrature;
pub mod solver;
pub mod verify;

pub use error::{Error, Result};
