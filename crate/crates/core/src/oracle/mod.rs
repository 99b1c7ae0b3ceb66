//! Independent double-precision reference computations used by the test
//! suites. Compiled only for tests or with the `oracle` feature.

pub mod gradcheck;
pub mod nn;
pub mod stats;
