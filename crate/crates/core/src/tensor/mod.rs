//! Minimal f64 matrix plus a reverse-mode tape; the numeric substrate for
//! the encoders, losses, and downstream heads.

mod graph;
mod matrix;

pub use graph::{Graph, NodeId};
pub use matrix::Mat;
