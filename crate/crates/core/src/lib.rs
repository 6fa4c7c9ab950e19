//! Interactive batch-size profiler for deep learning training scripts.
//!
//! The library fits linear run time and memory models from a handful of
//! sampled batch sizes, builds a source-level breakdown of where time and
//! memory go, and serves both to editor clients over TCP or WebSocket.

pub mod breakdown;
pub mod daemon;
pub mod model;
pub mod mutate;
pub mod predict;
pub mod protocol;
pub mod trace;

pub use breakdown::{BreakdownNode, BreakdownTree, NodePath, SortKey};
pub use model::{ProfileSnapshot, StackFrame};
pub use predict::{fit_linear, LinearModel, Prediction};
pub use protocol::{Message, PROTOCOL_VERSION};
