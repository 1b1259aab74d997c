//! The guide under `book/src`, included chapter by chapter so `cargo test`
//! runs every Rust sample in it.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/geometry.md")]
pub mod geometry {}

#[doc = include_str!("../../../book/src/fpf.md")]
pub mod fpf {}

#[doc = include_str!("../../../book/src/transforms.md")]
pub mod transforms {}

#[doc = include_str!("../../../book/src/entropy.md")]
pub mod entropy {}

#[doc = include_str!("../../../book/src/coder.md")]
pub mod coder {}

#[doc = include_str!("../../../book/src/bitstream.md")]
pub mod bitstream {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}

#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
