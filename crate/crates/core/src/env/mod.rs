//! Branching random walk environments.

mod brw;
mod law;
mod tree;

pub use brw::*;
pub use law::*;
pub use tree::*;
