//! Tuning methods, the toy ViT they wrap, and its checkpoint format.

mod checkpoint;
mod config;
mod layers;
mod model;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use config::{Method, ViTConfig};
pub use layers::{BiasLinear, Cap, Lrp, Lsb};
pub use model::{patchify, Forward, Model};
