pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod heads;
pub mod model;
pub mod numerics;
pub mod system;
pub mod text;
pub mod training;

pub use error::{Error, Result};
