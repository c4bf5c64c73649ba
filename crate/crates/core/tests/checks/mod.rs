//! Checks shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

pub mod flosp;
pub mod identity;
pub mod losses;
pub mod oracles;
