pub mod checks;
pub mod corpus;
pub mod encoders;
pub mod evalkit;
pub mod error;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod params;
pub mod training;
pub mod voiceloop;

pub use error::{PolyglotError, Result};
