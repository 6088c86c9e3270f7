//! Reverse-mode differentiation over an append-only tape.
//!
//! Each node records the storage policy of whatever it keeps for its
//! backward pass, so the bytes a forward pass pins in memory can be read
//! straight off the tape.

mod backward;
mod params;
mod tape;

pub use backward::GradStore;
pub use params::{Param, ParamId, ParamStore};
pub use tape::{channel_avg_pool, Op, SavedState, StoragePolicy, Tape, TapeNode, Var};
