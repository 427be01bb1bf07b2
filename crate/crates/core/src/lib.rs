//! Medical visual question answering: a joint image-text Transformer encoder pretrained with
//! masked word prediction, masked feature regression and image-text matching, and a
//! generative answer decoder fine-tuned on top of it.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod float;
pub mod graph;
pub mod image;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pretrain;
pub mod synthetic;
pub mod tensor_file;
pub mod text;
pub mod train;

pub use error::{Error, Result};

/// Guide chapters, compiled and run as doctests.
#[cfg(doctest)]
pub mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/text.md")]
    pub struct Text;
    #[doc = include_str!("../../../book/src/images.md")]
    pub struct Images;
    #[doc = include_str!("../../../book/src/encoder.md")]
    pub struct Encoder;
    #[doc = include_str!("../../../book/src/pretraining.md")]
    pub struct Pretraining;
    #[doc = include_str!("../../../book/src/decoding.md")]
    pub struct Decoding;
    #[doc = include_str!("../../../book/src/training.md")]
    pub struct Training;
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub struct Evaluation;
    #[doc = include_str!("../../../book/src/synthetic.md")]
    pub struct Synthetic;
    #[doc = include_str!("../../../book/src/cli.md")]
    pub struct Cli;
}
