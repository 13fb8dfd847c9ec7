pub mod crf;
pub mod error;
pub mod maps;
pub mod metrics;
pub mod nets;
pub mod pipelines;
pub mod preclassify;
pub mod raster;
pub mod tensor;

pub use error::{Error, ErrorKind, Result};
