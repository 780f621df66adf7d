//! Synthetic sequence generation and the on-disk sample layout.

pub mod io;
pub mod synthetic;
