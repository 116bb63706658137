//! Channel pruning for convolutional classifiers trained with a handful of
//! labeled images and a larger pool of unlabeled ones.

pub mod cli;
pub mod data;
pub mod error;
mod io;
pub mod layers;
pub mod losses;
pub mod model;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};

// Training allocates and frees many multi-megabyte buffers per step; the
// system allocator returns them to the OS each time.
#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;
