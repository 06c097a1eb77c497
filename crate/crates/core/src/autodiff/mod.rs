//! Reverse-mode differentiation and the Adam optimizer.

mod adam;
mod tape;

pub use adam::{Adam, AdamState};
pub use tape::{Binary, Gradients, Reduce, Tape, Unary, Var};
