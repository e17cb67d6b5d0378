//! Tiny training instance shared by the gradient checks: N=8, R=8, C=2, K=2, H=8.

use anchor_codec::anchor::{coefficients_per_anchor, scene_bounds, synth_correlated_cloud, AnchorCloud};
use anchor_codec::autoencoder::PlaneAutoencoder;
use anchor_codec::masking::MaskParams;
use anchor_codec::model::DistributionModel;
use anchor_codec::quant::QuantConfig;
use anchor_codec::train::{Frame, LossWeights, Params};
use anchor_codec::TriPlaneGrid;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const N: usize = 8;
/// Offsets per anchor; the neighbour count is `k_nn` below.
pub const K: usize = 4;

pub struct Fixture {
    pub cloud: AnchorCloud<f64>,
    pub params: Params,
    pub frame: Frame,
    pub noise: Vec<f64>,
    pub weights: LossWeights,
}

pub fn fixture() -> Fixture {
    let (r, c, k_nn, h) = (8, 2, 2, 8);
    let cloud = synth_correlated_cloud(5, N, 0.5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut masks = MaskParams::new(N, K);
    for l in masks.anchor_logits.iter_mut().chain(masks.offset_logits.iter_mut()) {
        *l = rng.random_range(-2.0..2.0);
    }
    let mut params = Params {
        grid: TriPlaneGrid::random(r, c, 1).unwrap(),
        autoencoder: PlaneAutoencoder::new(r, c, 2).unwrap(),
        model: DistributionModel::new(k_nn, c, h, K, 3).unwrap(),
        masks,
    };
    // biases off zero so no ReLU sits exactly on its kink
    for l in params.autoencoder.layers {
        for b in &mut params.autoencoder.params[l.bias_offset..l.bias_offset + l.out_ch] {
            *b = rng.random_range(-0.1..0.1);
        }
    }
    let noise = (0..N * coefficients_per_anchor(K)).map(|_| rng.random::<f64>() - 0.5).collect();
    let frame = Frame::new(&cloud.positions, &scene_bounds(&cloud.positions).into(), r, k_nn);
    let weights = LossWeights {
        lambda_entropy: 1.0,
        entropy_scale: (N * (3 + coefficients_per_anchor(K))) as f64,
        lambda_mask: 0.5,
        lambda_wavelet: 0.0,
        lambda_tri: 1.0,
        fidelity: [1.0, 0.5, 2.0],
        quant: QuantConfig::default(),
    };
    Fixture { cloud, params, frame, noise, weights }
}
