//! Fact-tree question answering over n-ary knowledge graphs.
//!
//! The crate is `no_std` (it needs `alloc`): file formats, the command line and
//! everything else that touches the operating system live in the `facttree` crate.

#![no_std]
#![allow(clippy::needless_range_loop)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod construct;
pub mod datagen;
pub mod eval;
pub mod kg;
pub mod locate;
pub mod numkit;
pub mod reason;
pub mod syntax;
pub mod train;
pub mod tree;
