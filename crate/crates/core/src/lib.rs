pub mod autograd;
pub mod checkpoint;
pub mod corpus;
pub mod dataset;
pub mod diffusion;
pub mod embedder;
pub mod error;
pub mod eval;
pub mod fr;
pub mod image;
pub mod manifest;
pub mod nn;
pub mod pipeline;
pub mod report;
pub mod sampler;
pub mod similarity;
pub mod tensor;
pub mod toy;

pub use error::{Error, Result};

/// The guide in `book/`, compiled so its snippets run as doctests.
#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    pub mod intro {}
    #[doc = include_str!("../../../book/src/toy-data.md")]
    pub mod toy_data {}
    #[doc = include_str!("../../../book/src/embeddings.md")]
    pub mod embeddings {}
    #[doc = include_str!("../../../book/src/diffusion.md")]
    pub mod diffusion {}
    #[doc = include_str!("../../../book/src/sampling.md")]
    pub mod sampling {}
    #[doc = include_str!("../../../book/src/datasets.md")]
    pub mod datasets {}
    #[doc = include_str!("../../../book/src/similarity-groups.md")]
    pub mod similarity_groups {}
    #[doc = include_str!("../../../book/src/verification.md")]
    pub mod verification {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    pub mod pipeline {}
    #[doc = include_str!("../../../book/src/formats.md")]
    pub mod formats {}
}
