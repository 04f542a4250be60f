//! Bit-exact software model of an integer-only transformer accelerator.

pub mod blocks;
pub mod builder;
pub mod commands;
pub mod error;
pub mod kernels;
pub mod mac;
pub mod package;
pub mod report;
pub mod sched;
pub mod quant;
pub mod reference;

pub use error::{Error, Result};
