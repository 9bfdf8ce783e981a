pub mod baseline;
pub mod eval;
pub mod export;
pub mod fuse;
pub mod synth;
pub mod train;

mod common;
