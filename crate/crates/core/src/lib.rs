pub mod attention;
pub mod blocks;
pub mod checks;
pub mod error;
pub mod evalkit;
pub mod numerics;

pub use error::{Error, Result};
