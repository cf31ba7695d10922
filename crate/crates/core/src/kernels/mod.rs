//! Standalone kernels outside the tape.

pub mod attention;
pub mod bench;
pub mod loss;
