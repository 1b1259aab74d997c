//! Learned multi-scale feature compression.

pub mod autograd;
pub mod bitstream;
pub mod checkpoint;
pub mod cli;
pub mod blocks;
pub mod codec;
pub mod coder;
pub mod drnet;
pub mod entropy;
pub mod escape;
pub mod evalkit;
pub mod fenet;
pub mod params;
pub mod pyramid;
pub mod tensor;
pub mod training;
