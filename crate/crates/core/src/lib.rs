//! Progressive transfer detection on a synthetic detection benchmark.

pub mod error;
pub mod eval;
pub mod experiment;
pub mod formats;
pub mod geometry;
pub mod gradcheck;
pub mod kvtext;
pub mod labelling;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod rng;
pub mod synthworld;

pub use error::{Error, Result};
