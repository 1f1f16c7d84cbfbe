//! Inference-time alignment of tabular language models with implicit and
//! explicit value functions.

pub mod error;
pub mod guidance;
pub mod harness;
pub mod lm;
pub mod rng;
pub mod synth;
pub mod training;
pub mod values;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/tabular-lm.md")]
    struct TabularLm;
    #[doc = include_str!("../../../book/src/value-functions.md")]
    struct ValueFunctions;
    #[doc = include_str!("../../../book/src/guided-decoding.md")]
    struct GuidedDecoding;
    #[doc = include_str!("../../../book/src/training.md")]
    struct Training;
    #[doc = include_str!("../../../book/src/harness.md")]
    struct Harness;
}
