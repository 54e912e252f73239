//! Risk-controlled prediction sets over reasoning-answer generations, and
//! certified Shapley attribution of why a target ends up covered.

pub mod admission;
pub mod attribution;
pub mod calibration;
pub mod cli;
pub mod data;
pub mod evaluators;
mod float_serde;
pub mod generation;
pub mod prediction_set;
pub mod quality;
pub mod seed;
