//! Codelength estimates under hard rounding.

use crate::anchor::{AnchorCloud, AttributeGroup};
use crate::codec::{compress_with, EncoderInput};
use crate::error::Result;
use crate::quant::{coeff_probability, quantize_eval, QuantConfig, SIGMA_MIN};
use crate::train::TrainState;

/// `sum -log2 p` per group of the symbols the codec would write for `cloud`,
/// with contexts built exactly as the decoder builds them.
pub fn estimate_bits(cloud: &AnchorCloud<f64>, state: &TrainState) -> Result<[f64; 3]> {
    state.check_cloud(cloud)?;
    let (am, om) = state.hard_masks();
    let p = &state.params;
    let c = compress_with(
        cloud,
        &EncoderInput {
            grid: &p.grid,
            autoencoder: &p.autoencoder,
            model: &p.model,
            quant: state.config.quant,
            contract: state.contract,
            masks: Some((&am, &om)),
        },
    )?;
    Ok(c.stats.estimated_bits)
}

/// Codelength per group under one fixed Gaussian per channel, fitted to the
/// dequantized values of that channel. No context, parameters not charged.
pub fn global_gaussian_bits(cloud: &AnchorCloud<f64>, quant: &QuantConfig) -> Result<[f64; 3]> {
    cloud.validate()?;
    quant.validate()?;
    let quant = quant.as_stored();
    let (n, k) = (cloud.len(), cloud.k);
    let mut out = [0.0; 3];
    for g in AttributeGroup::ALL {
        let (d, q) = (g.dim(k), quant.step(g));
        let values = cloud.group(g);
        for j in 0..d {
            let symbols = (0..n).map(|i| quantize_eval(values[i * d + j], q).map(|(s, _)| s)).collect::<Result<Vec<i64>>>()?;
            let mean = symbols.iter().map(|&s| s as f64 * q).sum::<f64>() / n as f64;
            let var = symbols.iter().map(|&s| (s as f64 * q - mean).powi(2)).sum::<f64>() / n as f64;
            let sigma = var.sqrt().max(SIGMA_MIN);
            out[g.index()] += symbols.iter().map(|&s| -coeff_probability(s, mean, sigma, q).log2()).sum::<f64>();
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchor::synth_iid_cloud;

    #[test]
    fn constant_channel_costs_nothing() {
        let mut cloud = synth_iid_cloud(0, 50).unwrap();
        cloud.group_mut(AttributeGroup::Scaling).iter_mut().for_each(|v| *v = 0.2);
        let b = global_gaussian_bits(&cloud, &QuantConfig::default()).unwrap();
        assert!(b[1].abs() < 1e-6, "{}", b[1]);
        assert!(b[0] > 0.0 && b[2] > 0.0);
    }

    #[test]
    fn wide_channels_cost_about_their_differential_entropy() {
        // N(0, s^2) quantized with step q costs about log2(s sqrt(2 pi e) / q) bits
        let cloud = synth_iid_cloud(1, 4000).unwrap();
        let q = QuantConfig::default();
        let b = global_gaussian_bits(&cloud, &q).unwrap();
        let g = AttributeGroup::Feature;
        let d = g.dim(cloud.k);
        let vals = cloud.group(g);
        let mut want = 0.0;
        for j in 0..d {
            let col: Vec<f64> = (0..cloud.len()).map(|i| vals[i * d + j]).collect();
            let m = col.iter().sum::<f64>() / col.len() as f64;
            let s = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / col.len() as f64).sqrt();
            want += cloud.len() as f64 * (s * (2.0 * std::f64::consts::PI * std::f64::consts::E).sqrt() / q.step(g)).log2();
        }
        assert!((b[0] - want).abs() < 0.02 * want, "{} vs {want}", b[0]);
    }
}
