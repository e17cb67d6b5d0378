//! The training objective and its hand-derived gradients.
//!
//! Per coefficient with value `x`, step `q`, noise `u` and mask weight `w`
//! (anchor mask times offset-slot mask), the objective charges
//! `w * bits(x + u q)` to the entropy term and
//! `w |u| + (1 - w) |x| / q` to the fidelity term: a kept coefficient costs its
//! quantization error, a dropped one its whole magnitude, both in units of `q`.

use rayon::prelude::*;

use crate::anchor::{coefficients_per_anchor, AnchorCloud, AttributeGroup};
use crate::autoencoder::{tri_rec_loss, tri_rec_loss_grad, PlaneAutoencoder};
use crate::error::{Error, Result};
use crate::knn::knn_indices;
use crate::masking::{mask_forward, sigmoid_grad, MaskParams};
use crate::model::{fill_context, sample_all, scatter_context_grad, DistributionModel};
use crate::quant::{bin_bits, QuantConfig};
use crate::scalar::Real;
use crate::triplane::{contract, ContractParams, SampleStencil, TriPlaneGrid};

/// All trainable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub grid: TriPlaneGrid<f64>,
    pub autoencoder: PlaneAutoencoder<f64>,
    pub model: DistributionModel<f64>,
    pub masks: MaskParams<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Grid,
    Autoencoder,
    Model,
    AnchorMask,
    OffsetMask,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Grid,
        ParamGroup::Autoencoder,
        ParamGroup::Model,
        ParamGroup::AnchorMask,
        ParamGroup::OffsetMask,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Grid => "grid",
            ParamGroup::Autoencoder => "autoencoder",
            ParamGroup::Model => "model",
            ParamGroup::AnchorMask => "anchor_mask",
            ParamGroup::OffsetMask => "offset_mask",
        }
    }
}

impl Params {
    pub fn group(&self, g: ParamGroup) -> &[f64] {
        match g {
            ParamGroup::Grid => &self.grid.data,
            ParamGroup::Autoencoder => &self.autoencoder.params,
            ParamGroup::Model => &self.model.params,
            ParamGroup::AnchorMask => &self.masks.anchor_logits,
            ParamGroup::OffsetMask => &self.masks.offset_logits,
        }
    }

    pub fn group_mut(&mut self, g: ParamGroup) -> &mut [f64] {
        match g {
            ParamGroup::Grid => &mut self.grid.data,
            ParamGroup::Autoencoder => &mut self.autoencoder.params,
            ParamGroup::Model => &mut self.model.params,
            ParamGroup::AnchorMask => &mut self.masks.anchor_logits,
            ParamGroup::OffsetMask => &mut self.masks.offset_logits,
        }
    }
}

/// Gradients mirroring [`Params`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub grid: Vec<f64>,
    pub autoencoder: Vec<f64>,
    pub model: Vec<f64>,
    pub anchor_logits: Vec<f64>,
    pub offset_logits: Vec<f64>,
}

impl Gradients {
    pub fn group(&self, g: ParamGroup) -> &[f64] {
        match g {
            ParamGroup::Grid => &self.grid,
            ParamGroup::Autoencoder => &self.autoencoder,
            ParamGroup::Model => &self.model,
            ParamGroup::AnchorMask => &self.anchor_logits,
            ParamGroup::OffsetMask => &self.offset_logits,
        }
    }

    pub fn group_mut(&mut self, g: ParamGroup) -> &mut [f64] {
        match g {
            ParamGroup::Grid => &mut self.grid,
            ParamGroup::Autoencoder => &mut self.autoencoder,
            ParamGroup::Model => &mut self.model,
            ParamGroup::AnchorMask => &mut self.anchor_logits,
            ParamGroup::OffsetMask => &mut self.offset_logits,
        }
    }
}

/// Weights of the objective's terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_entropy: f64,
    pub entropy_scale: f64,
    pub lambda_mask: f64,
    pub lambda_wavelet: f64,
    pub lambda_tri: f64,
    pub fidelity: [f64; 3],
    pub quant: QuantConfig,
}

/// Unweighted loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    /// Mean per-coefficient fidelity error in units of `q`.
    pub fidelity: f64,
    /// Estimated bits of the whole cloud.
    pub entropy_bits: f64,
    pub mask: f64,
    pub wavelet: f64,
    pub tri_rec: f64,
}

/// `L_fid + lambda_e / eps * L_entropy + lambda_m L_m + lambda_w L_w + lambda_tc L_tri`.
pub fn total_loss(parts: &LossParts, w: &LossWeights, step: u64) -> Result<f64> {
    for (name, v) in [
        ("fidelity", parts.fidelity),
        ("entropy", parts.entropy_bits),
        ("mask", parts.mask),
        ("wavelet", parts.wavelet),
        ("tri_rec", parts.tri_rec),
    ] {
        if !v.is_finite() {
            return Err(Error::Training { component: name.into(), step, message: format!("loss component is {v}") });
        }
    }
    Ok(parts.fidelity
        + w.lambda_entropy / w.entropy_scale * parts.entropy_bits
        + w.lambda_mask * parts.mask
        + w.lambda_wavelet * parts.wavelet
        + w.lambda_tri * parts.tri_rec)
}

/// How masks enter the forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    /// Every mask is 1 and receives no gradient.
    Off,
    /// Binary forward value, straight-through gradient.
    Hard,
    /// `sigmoid(logit)` forward value; the smooth relaxation whose exact
    /// gradient equals the straight-through one. Used by gradient checks.
    Soft,
}

/// Per-step switches.
#[derive(Clone, Copy, Debug)]
pub struct StepOptions<'a> {
    /// Uniform noise in `[-0.5, 0.5]`, `N x D` row-major; `None` trains on exact values.
    pub noise: Option<&'a [f64]>,
    /// Sample contexts from the autoencoder's reconstruction instead of the grid.
    pub use_autoencoder: bool,
    pub masks: MaskMode,
    /// Anchors of this step, ascending; `None` uses all.
    pub batch: Option<&'a [usize]>,
    /// Combine per-anchor gradients in a fixed order.
    pub reproducible: bool,
}

/// Quantities that depend only on positions: neighbours, contracted
/// positions and sampling stencils.
#[derive(Clone, Debug)]
pub struct Frame {
    pub neighbors: Vec<Vec<usize>>,
    pub cubes: Vec<[f64; 3]>,
    pub stencils: Vec<SampleStencil<f64>>,
    pub k_nn: usize,
}

impl Frame {
    pub fn new(positions: &[[f64; 3]], contract_params: &ContractParams<f64>, resolution: usize, k_nn: usize) -> Self {
        let cubes: Vec<[f64; 3]> = positions.iter().map(|&x| contract(x, contract_params)).collect();
        let stencils = cubes.iter().map(|&c| SampleStencil::from_cube(c, resolution)).collect();
        Self { neighbors: knn_indices(positions, k_nn), cubes, stencils, k_nn }
    }
}

fn mask_values(masks: &MaskParams<f64>, mode: MaskMode) -> (Vec<f64>, Vec<f64>) {
    let f = |l: &f64| match mode {
        MaskMode::Off => 1.0,
        MaskMode::Hard => mask_forward(*l, masks.threshold),
        MaskMode::Soft => l.sigmoid(),
    };
    (masks.anchor_logits.iter().map(f).collect(), masks.offset_logits.iter().map(f).collect())
}

/// Partial sums of one block of anchors.
struct BlockOut {
    model_grad: Vec<f64>,
    bits: f64,
    fidelity: f64,
}

/// Anchors per gradient partial; depends only on the batch size.
fn block_len(batch: usize) -> usize {
    batch.div_ceil(64).max(32)
}

/// Loss components and, when `want_grad`, their gradients.
pub fn loss_and_grad(
    params: &Params,
    weights: &LossWeights,
    cloud: &AnchorCloud<f64>,
    frame: &Frame,
    opts: &StepOptions,
    want_grad: bool,
) -> Result<(LossParts, Option<Gradients>)> {
    let (n, k) = (cloud.len(), cloud.k);
    let dim = coefficients_per_anchor(k);
    let model = &params.model;
    if model.offsets != k || params.masks.anchor_logits.len() != n || params.masks.offset_logits.len() != n * k {
        return Err(Error::validation("parameters do not match the cloud shape"));
    }
    if frame.cubes.len() != n || model.neighbors != frame.k_nn {
        return Err(Error::validation("frame does not match the cloud"));
    }
    if let Some(noise) = opts.noise {
        if noise.len() != n * dim {
            return Err(Error::validation("noise has the wrong length"));
        }
    }
    let all: Vec<usize>;
    let batch = match opts.batch {
        Some(b) => b,
        None => {
            all = (0..n).collect();
            &all
        }
    };
    let b = batch.len().max(1);

    let ae_out = if opts.use_autoencoder { Some(params.autoencoder.forward(&params.grid)?) } else { None };
    let eff_grid = ae_out.as_ref().map_or(&params.grid, |(g, _)| g);
    let samples = sample_all(eff_grid, &frame.stencils);
    let fd = eff_grid.feature_dim();
    let ctx_dim = model.input_dim();
    let (m_anchor, m_offset) = mask_values(&params.masks, opts.masks);

    let c_entropy = weights.lambda_entropy * (n as f64 / b as f64) / weights.entropy_scale;
    let c_fid = 1.0 / (b * dim) as f64;
    let steps = weights.quant.steps;
    let group_of: Vec<(usize, usize, usize)> = AttributeGroup::ALL
        .iter()
        .flat_map(|g| (0..g.dim(k)).map(move |j| (g.index(), j, g.dim(k))))
        .collect();

    let mut d_ctx = vec![0.0; if want_grad { batch.len() * ctx_dim } else { 0 }];
    let mut d_mask_anchor = vec![0.0; batch.len()];
    let mut d_mask_offset = vec![0.0; batch.len() * k];
    let blen = block_len(batch.len());
    let n_params = model.params.len();

    let run_block = |((ids, dc), (dma, dmo)): ((&[usize], &mut [f64]), (&mut [f64], &mut [f64]))| {
        let mut out = BlockOut { model_grad: vec![0.0; if want_grad { n_params } else { 0 }], bits: 0.0, fidelity: 0.0 };
        let mut ctx = vec![0.0; ctx_dim];
        let mut act = model.activations();
        let mut d_mu = vec![0.0; dim];
        let mut d_sigma = vec![0.0; dim];
        for (local, &i) in ids.iter().enumerate() {
            fill_context(i, &samples, fd, &frame.neighbors[i], frame.k_nn, frame.cubes[i], &mut ctx);
            model.forward_into(&ctx, &mut act);
            let ma = m_anchor[i];
            let mut da = 0.0;
            for (col, &(gi, j, d)) in group_of.iter().enumerate() {
                let x = cloud.group(AttributeGroup::ALL[gi])[i * d + j];
                let q = steps[gi];
                let u = opts.noise.map_or(0.0, |nz| nz[i * dim + col]);
                let mo = if gi == 2 { m_offset[i * k + j / 3] } else { 1.0 };
                let w = ma * mo;
                let bb = bin_bits(x + u * q, act.mu[col], act.sigma[col], q);
                let fw = weights.fidelity[gi];
                out.bits += w * bb.bits;
                out.fidelity += fw * (w * u.abs() + (1.0 - w) * x.abs() / q);
                d_mu[col] = c_entropy * w * bb.d_mu;
                d_sigma[col] = c_entropy * w * bb.d_sigma;
                let d_w = c_entropy * bb.bits + c_fid * fw * (u.abs() - x.abs() / q);
                da += d_w * mo;
                if gi == 2 {
                    dmo[local * k + j / 3] += d_w * ma;
                }
            }
            dma[local] = da;
            if want_grad {
                model.backward(&ctx, &act, &d_mu, &d_sigma, &mut out.model_grad, Some(&mut dc[local * ctx_dim..(local + 1) * ctx_dim]));
            }
        }
        out
    };

    let ctx_chunk = if want_grad { blen * ctx_dim } else { 1 };
    let d_ctx_chunks: Vec<&mut [f64]> = if want_grad {
        d_ctx.chunks_mut(ctx_chunk).collect()
    } else {
        (0..batch.len().div_ceil(blen)).map(|_| &mut [][..]).collect()
    };
    let jobs: Vec<_> = batch
        .chunks(blen)
        .zip(d_ctx_chunks)
        .zip(d_mask_anchor.chunks_mut(blen).zip(d_mask_offset.chunks_mut(blen * k)))
        .collect();
    let mut model_grad = vec![0.0; if want_grad { n_params } else { 0 }];
    let (mut bits, mut fidelity) = (0.0, 0.0);
    if opts.reproducible {
        let outs: Vec<BlockOut> = jobs.into_par_iter().map(run_block).collect();
        for o in outs {
            bits += o.bits;
            fidelity += o.fidelity;
            for (g, v) in model_grad.iter_mut().zip(&o.model_grad) {
                *g += v;
            }
        }
    } else {
        let o = jobs.into_par_iter().map(run_block).reduce(
            || BlockOut { model_grad: vec![0.0; if want_grad { n_params } else { 0 }], bits: 0.0, fidelity: 0.0 },
            |mut a, o| {
                a.bits += o.bits;
                a.fidelity += o.fidelity;
                for (g, v) in a.model_grad.iter_mut().zip(&o.model_grad) {
                    *g += v;
                }
                a
            },
        );
        bits = o.bits;
        fidelity = o.fidelity;
        model_grad = o.model_grad;
    }

    let mask_on = opts.masks != MaskMode::Off;
    let mut parts = LossParts {
        fidelity: fidelity * c_fid,
        entropy_bits: bits * (n as f64 / b as f64),
        mask: if mask_on { params.masks.loss() } else { 0.0 },
        wavelet: 0.0,
        tri_rec: match &ae_out {
            Some((recon, _)) => tri_rec_loss(&params.grid, recon)?,
            None => 0.0,
        },
    };
    if batch.is_empty() {
        parts.fidelity = 0.0;
    }
    if !want_grad {
        return Ok((parts, None));
    }

    // contexts -> per-anchor sample rows -> plane entries
    let mut d_samples = vec![0.0; n * fd];
    for (local, &i) in batch.iter().enumerate() {
        scatter_context_grad(i, &d_ctx[local * ctx_dim..(local + 1) * ctx_dim], fd, &frame.neighbors[i], &mut d_samples);
    }
    let mut d_eff = vec![0.0; eff_grid.data.len()];
    for (st, row) in frame.stencils.iter().zip(d_samples.chunks_exact(fd)) {
        if row.iter().any(|&v| v != 0.0) {
            st.accumulate_grad(row, eff_grid.resolution, eff_grid.channels, &mut d_eff);
        }
    }

    let mut ae_grad = vec![0.0; params.autoencoder.params.len()];
    let grid_grad = match &ae_out {
        Some((recon, tape)) => {
            let rec = tri_rec_loss_grad(&params.grid, recon);
            let mut d_out = recon.clone();
            for ((d, &e), &r) in d_out.data.iter_mut().zip(&d_eff).zip(&rec) {
                *d = e + weights.lambda_tri * r;
            }
            let mut g = params.autoencoder.backward(tape, &d_out, &mut ae_grad)?;
            for (v, &r) in g.iter_mut().zip(&rec) {
                *v -= weights.lambda_tri * r;
            }
            g
        }
        None => d_eff,
    };

    let mut anchor_logits = vec![0.0; n];
    let mut offset_logits = vec![0.0; n * k];
    if mask_on {
        let (ga, go) = params.masks.loss_grad();
        for (i, g) in anchor_logits.iter_mut().enumerate() {
            *g = weights.lambda_mask * ga[i];
        }
        for (s, g) in offset_logits.iter_mut().enumerate() {
            *g = weights.lambda_mask * go[s];
        }
        for (local, &i) in batch.iter().enumerate() {
            anchor_logits[i] += sigmoid_grad(params.masks.anchor_logits[i]) * d_mask_anchor[local];
            for s in 0..k {
                let slot = i * k + s;
                offset_logits[slot] += sigmoid_grad(params.masks.offset_logits[slot]) * d_mask_offset[local * k + s];
            }
        }
    }

    Ok((parts, Some(Gradients { grid: grid_grad, autoencoder: ae_grad, model: model_grad, anchor_logits, offset_logits })))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchor::synth_correlated_cloud;
    use crate::anchor::scene_bounds;
    use crate::masking::MaskParams;

    fn weights(eps: f64) -> LossWeights {
        LossWeights {
            lambda_entropy: 1.0,
            entropy_scale: eps,
            lambda_mask: 0.0,
            lambda_wavelet: 0.0,
            lambda_tri: 0.0,
            fidelity: [1.0; 3],
            quant: QuantConfig::default(),
        }
    }

    #[test]
    fn total_loss_examples() {
        let parts = LossParts { fidelity: 0.25, entropy_bits: 100.0, mask: 0.5, wavelet: 2.0, tri_rec: 0.1 };
        let mut w = weights(1.0);
        w.lambda_entropy = 0.0;
        assert_eq!(total_loss(&parts, &w, 0).unwrap(), 0.25);
        w.lambda_entropy = 1.0;
        assert_eq!(total_loss(&parts, &w, 0).unwrap(), 100.25);
        let w2 = LossWeights { entropy_scale: 2.0, ..w };
        assert_eq!(total_loss(&parts, &w2, 0).unwrap() - 0.25, 50.0);
        let bad = LossParts { tri_rec: f64::NAN, ..parts };
        match total_loss(&bad, &w, 7) {
            Err(Error::Training { component, step, .. }) => assert_eq!((component.as_str(), step), ("tri_rec", 7)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn batch_estimate_equals_full_when_batch_is_everything() {
        let cloud = synth_correlated_cloud(1, 40, 0.5).unwrap();
        let params = Params {
            grid: TriPlaneGrid::random(8, 2, 0).unwrap(),
            autoencoder: PlaneAutoencoder::new(8, 2, 1).unwrap(),
            model: DistributionModel::new(2, 2, 8, 4, 2).unwrap(),
            masks: MaskParams::new(40, 4),
        };
        let frame = Frame::new(&cloud.positions, &scene_bounds(&cloud.positions).into(), 8, 2);
        let w = weights(1000.0);
        let all: Vec<usize> = (0..40).collect();
        let opts = StepOptions { noise: None, use_autoencoder: true, masks: MaskMode::Hard, batch: None, reproducible: true };
        let (a, ga) = loss_and_grad(&params, &w, &cloud, &frame, &opts, true).unwrap();
        let (b, gb) = loss_and_grad(&params, &w, &cloud, &frame, &StepOptions { batch: Some(&all), ..opts }, true).unwrap();
        assert_eq!(a, b);
        assert_eq!(ga, gb);
        let (c, gc) = loss_and_grad(&params, &w, &cloud, &frame, &StepOptions { reproducible: false, ..opts }, true).unwrap();
        assert!((c.entropy_bits - a.entropy_bits).abs() < 1e-9 * a.entropy_bits);
        let (ga, gc) = (ga.unwrap(), gc.unwrap());
        assert!(ga.model.iter().zip(&gc.model).all(|(x, y)| (x - y).abs() <= 1e-12 * (1.0 + x.abs())));
        let (d, none) = loss_and_grad(&params, &w, &cloud, &frame, &opts, false).unwrap();
        assert!(none.is_none());
        assert_eq!(d, a);
    }

    #[test]
    fn dropping_everything_costs_magnitudes() {
        let cloud = synth_correlated_cloud(2, 10, 0.5).unwrap();
        let mut masks = MaskParams::new(10, 4);
        masks.anchor_logits.iter_mut().for_each(|l| *l = -5.0);
        let params = Params {
            grid: TriPlaneGrid::random(8, 2, 0).unwrap(),
            autoencoder: PlaneAutoencoder::new(8, 2, 1).unwrap(),
            model: DistributionModel::new(2, 2, 8, 4, 2).unwrap(),
            masks,
        };
        let frame = Frame::new(&cloud.positions, &scene_bounds(&cloud.positions).into(), 8, 2);
        let opts = StepOptions { noise: None, use_autoencoder: false, masks: MaskMode::Hard, batch: None, reproducible: true };
        let (p, _) = loss_and_grad(&params, &weights(1.0), &cloud, &frame, &opts, false).unwrap();
        assert_eq!(p.entropy_bits, 0.0);
        let q = QuantConfig::default();
        let mut want = 0.0;
        for g in AttributeGroup::ALL {
            want += cloud.group(g).iter().map(|x| x.abs() / q.step(g)).sum::<f64>();
        }
        want /= (10 * coefficients_per_anchor(4)) as f64;
        assert!((p.fidelity - want).abs() < 1e-12 * want, "{} vs {want}", p.fidelity);
    }
}
