//! Stacked cross attention for image-text matching.
//!
//! Regions and words are embedded into one space, each fragment attends to
//! the other modality, and the pooled relevances give a pair score. The crate
//! covers scoring, a small reverse-mode tape for training, data files,
//! synthetic corpora and Recall@K evaluation.

pub mod attention;
pub mod checkpoint;
pub mod dataio;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod graph;
pub mod learning;
pub mod linalg;
pub mod presets;
pub mod tape;
pub mod train;

pub use attention::{Direction, Pooling, ScanConfig, Scorer, SumMaxConfig};
pub use error::{Result, ScanError};
pub use linalg::Matrix;
