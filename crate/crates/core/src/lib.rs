//! Multi-hypothesis coarse-to-fine dense matching with beam search over
//! correspondence maps. See the guide in `book/` for a walkthrough.

pub mod attention;
pub mod beam;
pub mod checkpoint;
pub mod cli;
pub mod corrmap;
pub mod error;
pub mod eval;
pub mod features;
pub mod image;
pub mod numeric;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod scene;
pub mod training;
mod svg;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/scenes.md")]
    mod scenes {}
    #[doc = include_str!("../../../book/src/maps.md")]
    mod maps {}
    #[doc = include_str!("../../../book/src/beam.md")]
    mod beam {}
    #[doc = include_str!("../../../book/src/attention.md")]
    mod attention {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
