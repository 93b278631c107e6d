//! Matrix completion with recursive evidence chains.
//!
//! Only a small pool of prototype user and item embeddings is stored. Every
//! other embedding is generated on demand by two small generator networks that
//! aggregate `(embedding, rating)` evidence pulled recursively through the
//! observed ratings graph.
//!
//! The crate is organised bottom-up:
//!
//! - [`data`]: rating file parsers, synthetic low-rank datasets, seeded splits
//! - [`store`]: dual-indexed sparse ratings and prototype selection
//! - [`autodiff`]: dense tensors, a reverse-mode tape, the generator MLPs, Adam
//! - [`engine`]: the recursive embedding generator and its complexity controls
//! - [`training`]: the squared-error objective, pretraining, the PMF baseline
//! - [`experiments`]: the experiment protocols behind the `rec` binary

pub mod autodiff;
pub mod data;
pub mod engine;
pub mod error;
pub mod experiments;
pub mod store;
pub mod training;

pub use error::{Error, Result};
