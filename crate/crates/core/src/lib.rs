#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod basis;
pub mod behavior;
pub mod error;
pub mod linalg;
pub mod npc;
pub mod plant;
pub mod solver;
pub mod trajlib;

pub use error::{Error, Result};
