//! Explain a layer of a trained CNN classifier by decoding its activations.
//!
//! The library trains a decoder to reconstruct inputs from a frozen
//! classifier layer and contrasts the result against a reference
//! autoencoder of identical architecture. It ships its own dense-tensor
//! engine with reverse-mode automatic differentiation, the model zoo,
//! training/evaluation procedures, a closed-form linear-autoencoder
//! analysis, and rendering of comparison grids and metrics tables.

pub mod checkpoint;
pub mod data;
pub mod evaluation;
pub mod gradcheck;
pub mod graph;
pub mod manifest;
pub mod models;
pub mod ops;
pub mod optim;
pub mod report;
pub mod tensor;
pub mod theory;
pub mod training;

use std::fmt;

/// Error categories. Each maps to a distinct process exit code in the CLI.
#[derive(Debug)]
pub enum Error {
    /// Invalid configuration, flags, or model/tap combinations (exit 2).
    Config(String),
    /// Dataset ingestion or label problems (exit 3).
    Data(String),
    /// Numeric divergence: NaN/Inf values, non-convergence (exit 4).
    Numeric(String),
    /// Filesystem problems (exit 5).
    Io(std::io::Error),
    /// Tensor dimension mismatches (exit 2).
    Shape(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Shape(m) => write!(f, "shape error: {m}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl Error {
    /// Process exit code for the CLI (0 is success).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape(_) => 2,
            Error::Data(_) => 3,
            Error::Numeric(_) => 4,
            Error::Io(_) => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
