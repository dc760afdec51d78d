pub mod conformal;
pub mod designs;
pub mod error;
pub mod population;
pub mod quantiles;
pub mod scores;
pub mod simharness;

pub use error::{Error, Result};

// Book chapters compile as doctests, one module per chapter so a failure
// names its file.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/quantiles.md")]
    mod quantiles {}
    #[doc = include_str!("../../../book/src/weighted.md")]
    mod weighted {}
    #[doc = include_str!("../../../book/src/designs.md")]
    mod designs {}
    #[doc = include_str!("../../../book/src/engines.md")]
    mod engines {}
    #[doc = include_str!("../../../book/src/clusters.md")]
    mod clusters {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
}
