//! Learning expressive robot teleoperation from a scripted operator: a
//! kinematic arena, a mood-driven operator oracle, a diffusion transformer
//! over gamepad command windows, and the runtime around it.

pub mod config;
pub mod controller;
pub mod dataset;
pub mod error;
pub mod evaluator;
pub mod geometry;
pub mod model;
pub mod operator;
pub mod pipeline;
pub mod service;
pub mod sim;
pub mod trainer;

pub use error::{Error, Result};
