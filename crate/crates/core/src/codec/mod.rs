//! Entropy coding of quantized attributes and the compressed container.

pub mod container;
pub mod rangecoder;
pub mod scene;
pub mod symbols;

pub use container::{ContainerHeader, SectionKind};
pub use rangecoder::{RangeDecoder, RangeEncoder};
pub use scene::{compress_with, decompress_scene, CodecStats, CompressedScene, DecodedScene, EncoderInput};
pub use symbols::{decode_symbols, discretize, encode_symbols, BinModel};
