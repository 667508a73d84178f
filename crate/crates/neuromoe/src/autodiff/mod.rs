//! Reverse-mode automatic differentiation.
//!
//! A [`Tape`] records forward operations into a flat arena; [`Tape::backward`]
//! replays them in reverse, accumulating adjoints. Trainable parameters live
//! outside the tape in a persistent [`ParamStore`]; each forward pass binds
//! them onto the tape as leaf nodes and backward adds the leaf adjoints into
//! the store's gradient buffers (which accumulate until explicitly zeroed).

mod kernels;
mod matmul;
mod params;
mod tape;
mod tensor;

pub use params::{Binding, ParamId, ParamStore};
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;

