//! File formats, configuration, manifests and the pipeline stages behind
//! the `sgt` command line. All computation lives in `sgt-core`.

pub mod checkpoint;
pub mod config;
pub mod corpus_io;
pub mod dump;
pub mod error;
pub mod manifest;
pub mod pipeline;
pub mod report;

pub use error::CliError;
