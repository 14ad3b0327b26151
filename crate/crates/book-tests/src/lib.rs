//! Runs the guide's code blocks as doc-tests; mdbook alone cannot link the
//! workspace crates.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/prompts.md")]
pub mod prompts {}
#[doc = include_str!("../../../book/src/selective-scan.md")]
pub mod selective_scan {}
#[doc = include_str!("../../../book/src/population-loss.md")]
pub mod population_loss {}
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
#[doc = include_str!("../../../book/src/dynamics.md")]
pub mod dynamics {}
#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}
