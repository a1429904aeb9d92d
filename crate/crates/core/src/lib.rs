pub mod corpus;
pub mod error;
pub mod losses;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod nncore;
pub mod pipeline;
pub mod segmenter;
pub mod translate;

pub use error::{Error, Result};
