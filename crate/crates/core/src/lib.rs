//! Synthetic brightfield cell images: phantom generation, a small diffusion
//! model, fluorescence auto-labelling, dataset mixing, a center-point
//! detector, and the evaluation tools used to compare them.

pub mod autolabel;
pub mod dataset;
pub mod detector;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod fid;
pub mod image;
pub mod nn;
pub mod patchify;
pub mod phantom;
pub mod pipeline;
pub mod rng;
pub mod survey;
pub mod train;
pub mod unet;

pub use error::{Error, Result};
pub use image::{BBox, Batch, Image};

// The guide's snippets run as doctests so they cannot drift from the API.
#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/phantoms.md")]
    mod phantoms {}
    #[doc = include_str!("../../../book/src/sampling.md")]
    mod sampling {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/fid.md")]
    mod fid {}
    #[doc = include_str!("../../../book/src/labeling.md")]
    mod labeling {}
    #[doc = include_str!("../../../book/src/datasets.md")]
    mod datasets {}
    #[doc = include_str!("../../../book/src/detection.md")]
    mod detection {}
    #[doc = include_str!("../../../book/src/survey.md")]
    mod survey {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
}
