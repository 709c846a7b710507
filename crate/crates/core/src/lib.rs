//! Lifelong sequence-memory engine.
//!
//! Compresses an unlabeled multi-domain stream of fixed-width frame vectors
//! into thought vectors via LSTM autoencoders whose parameters are generated
//! by a shared "stretcher" hypernetwork from 64-element program vectors, and
//! stores episodic and semantic knowledge in an extendable content-addressable
//! vector memory.

pub mod bank;
pub mod cli;
pub mod config;
pub mod datagen;
pub mod error;
pub mod keyclass;
pub mod lifelong;
pub mod model_file;
pub mod numeric;
pub mod seqae;
pub mod stretcher;
pub mod vmem;
pub mod wire;

pub use error::{CoreError, Result};
