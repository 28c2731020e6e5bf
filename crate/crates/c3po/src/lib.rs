pub mod ablate;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod head;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod msf;
pub mod mtf;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;
pub mod viz;

pub use error::{Error, Result};

/// The guide's chapters, compiled so their examples run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/mtf.md")]
    mod mtf {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/acceptance.md")]
    mod acceptance {}
}
