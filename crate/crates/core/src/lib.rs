//! Multi-turn dialogue response generation with a self-supervised
//! utterance-ranking auxiliary loss.
//!
//! The crate is layered bottom-up: [`substrate`] provides tensors, reverse
//! mode autodiff and layers; [`corpus`] loads and tokenizes dialogues;
//! [`encoder`], [`decoder`] and [`ranking`] make up [`model::RedModel`];
//! [`trainer`] and [`eval`] drive it; [`cli`] exposes everything as the
//! `red` binary.

pub mod cli;
pub mod config;
pub mod corpus;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod model;
pub mod par;
pub mod ranking;
pub mod rng;
pub mod substrate;
pub mod trainer;

pub use error::{Error, Result};
