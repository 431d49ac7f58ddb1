#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod detect;
pub mod error;
pub mod geometry;
pub mod optimize;
pub mod pipeline;
pub mod render;
pub mod sis;
pub mod synth;
pub mod tensorio;
pub mod volume;

pub use error::{Error, Result};
