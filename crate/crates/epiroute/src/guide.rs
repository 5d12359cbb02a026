//! The narrative guide, compiled into the crate's documentation.
//!
//! Each module below embeds one chapter of `book/src/`, so every code
//! listing in the book runs under `cargo test --doc` and cannot drift from
//! the library. Build the rendered book with `mdbook build book`.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/model.md")]
pub mod model {}

#[doc = include_str!("../../../book/src/policies.md")]
pub mod policies {}

#[doc = include_str!("../../../book/src/metrics.md")]
pub mod metrics {}

#[doc = include_str!("../../../book/src/optimization.md")]
pub mod optimization {}

#[doc = include_str!("../../../book/src/verification.md")]
pub mod verification {}

#[doc = include_str!("../../../book/src/montecarlo.md")]
pub mod montecarlo {}

#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}
