//! Temporal graph network for edge-cache popularity prediction.
//!
//! The crate builds a continuous-time dynamic graph model on top of a small
//! reverse-mode autodiff engine, trains it on timestamped user–item request
//! traces, and uses its predictions to drive a cache simulator alongside LRU
//! and LFU baselines.

pub mod aggregate;
pub mod autodiff;
pub mod cache;
pub mod checkpoint;
pub mod embed;
pub mod error;
pub mod events;
pub mod metrics;
pub mod model;
pub mod params;
pub mod synth;
pub mod train;
pub mod tensor;
pub mod time_encoding;

// The guide's code listings run as doc-tests, one module per chapter.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/traces.md")]
    mod traces {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/caching.md")]
    mod caching {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
