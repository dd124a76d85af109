pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod contrastive;
pub mod datapipe;
pub mod error;
pub mod fewshot;
pub mod graph;
pub mod lm;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod resampler;
pub mod rng;
pub mod selftest;
pub mod tensor;
pub mod tokenizer;
pub mod train;
pub mod vision;
pub mod xattn;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use params::ParamStore;
pub use tensor::{Activation, Tensor};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/tokenizer.md")]
    mod tokenizer {}
    #[doc = include_str!("../../../book/src/vision.md")]
    mod vision {}
    #[doc = include_str!("../../../book/src/cross_attention.md")]
    mod cross_attention {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/contrastive.md")]
    mod contrastive {}
    #[doc = include_str!("../../../book/src/fewshot.md")]
    mod fewshot {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
