//! Desk-scale conditional flow-matching toolkit.
//!
//! Trains a three-stream (condition/image/mask) rectified-flow transformer on
//! procedurally generated land-cover scenes, samples with a task-feedback
//! rectified Euler integrator (CRFM), and scores the synthetic data on a
//! small semantic-segmentation harness.

pub mod ckpt;
pub mod config;
pub mod error;
pub mod flow;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod scenes;
pub mod segment;
pub mod synthpipe;

pub use error::{Error, Result};
