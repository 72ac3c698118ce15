//! Progressive rectangle-window attention: token partition, multi-head
//! attention, and the transformer encoder/decoder built on them.

mod decoder;
mod encoder;
mod mha;
mod partition;

pub use decoder::{bin_queries, Decoder};
pub use encoder::Encoder;
pub use mha::{AttnMap, AttnStats, MultiHead};
pub use partition::WindowPartition;
