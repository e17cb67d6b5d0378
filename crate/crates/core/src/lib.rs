//! Learned entropy coding for anchor-based 3D Gaussian scenes.
//!
//! Anchor attributes (features, scalings and offsets) are quantized and
//! arithmetic-coded under Gaussian distributions predicted by a small MLP from
//! a tri-plane feature field and spatial neighbours. The tri-plane itself is
//! stored through a convolutional autoencoder, and learned masks prune anchors
//! and offsets before coding.

pub mod anchor;
pub mod autoencoder;
pub(crate) mod bytes;
pub mod codec;
pub mod error;
pub mod knn;
pub mod masking;
pub mod model;
pub mod quant;
pub mod scalar;
pub mod train;
pub mod triplane;
pub mod wavelet;

pub use anchor::{AnchorCloud, AttributeGroup, SceneBounds};
pub use error::{Error, Result};
pub use scalar::Real;
pub use train::compress_scene;
pub use triplane::{ContractParams, TriPlaneGrid};

pub type AnchorCloud32 = anchor::AnchorCloud<f32>;
pub type AnchorCloud64 = anchor::AnchorCloud<f64>;
pub type TriPlaneGrid32 = triplane::TriPlaneGrid<f32>;
pub type TriPlaneGrid64 = triplane::TriPlaneGrid<f64>;
pub type PlaneAutoencoder32 = autoencoder::PlaneAutoencoder<f32>;
pub type PlaneAutoencoder64 = autoencoder::PlaneAutoencoder<f64>;
pub type DistributionModel32 = model::DistributionModel<f32>;
pub type DistributionModel64 = model::DistributionModel<f64>;
