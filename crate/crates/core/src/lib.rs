//! Simulation, discrete optimal control and optimality checks for controlled
//! sweeping processes over prox-regular sets.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod dynamics;
pub mod error;
pub mod geometry;
pub mod linalg;
pub mod models;
pub mod optimality;
pub mod second_order;
pub mod transcription;

pub use error::{Result, SweepError};
pub use nalgebra;
