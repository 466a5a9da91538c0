//! CTC compressor sequence compression and joint speech/text training for a
//! small decoder-only speech recognizer.

pub mod align;
pub mod cli;
pub mod compressor;
pub mod config;
pub mod ctc;
pub mod data;
pub mod error;
pub mod modality;
pub mod model;
pub mod numerics;
pub mod params;
pub mod trainer;

pub use error::Error;

/// The guide's chapters, compiled and run as doctests.
#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/autodiff.md")]
    pub struct Autodiff;
    #[doc = include_str!("../../../book/src/ctc.md")]
    pub struct Ctc;
    #[doc = include_str!("../../../book/src/compressor.md")]
    pub struct Compressor;
    #[doc = include_str!("../../../book/src/alignment.md")]
    pub struct Alignment;
    #[doc = include_str!("../../../book/src/text_injection.md")]
    pub struct TextInjection;
    #[doc = include_str!("../../../book/src/decoding.md")]
    pub struct Decoding;
    #[doc = include_str!("../../../book/src/training.md")]
    pub struct Training;
}
