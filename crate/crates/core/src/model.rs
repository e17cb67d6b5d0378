//! Context assembly and the MLP that predicts per-coefficient Gaussians.
//!
//! The context of anchor `i` is the tri-plane sample at `i`, the samples at
//! its `K` nearest neighbours (nearest first, zero blocks when fewer exist),
//! and its contracted position. Only positions and the tri-plane enter, both
//! of which a decoder has before any attribute is decoded.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::anchor::{coefficients_per_anchor, AttributeGroup};
use crate::bytes::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::quant::SIGMA_MIN;
use crate::scalar::Real;
use crate::triplane::{contract, ContractParams, SampleStencil, TriPlaneGrid, PLANES};

pub const DEFAULT_HIDDEN: usize = 96;
const LAYERS: usize = 5;

pub fn context_dim(neighbors: usize, channels: usize) -> usize {
    (neighbors + 1) * PLANES * channels + 3
}

/// Dense layer with weights stored `[in][out]` inside the flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl Linear {
    pub fn param_len(&self) -> usize {
        (self.in_dim + 1) * self.out_dim
    }
}

/// Two ReLU hidden layers followed by one head per attribute group. Head `g`
/// emits `D_g` means then `D_g` raw scales.
#[derive(Clone, Debug, PartialEq)]
pub struct DistributionModel<T> {
    pub neighbors: usize,
    pub channels: usize,
    pub hidden: usize,
    pub offsets: usize,
    pub layers: [Linear; LAYERS],
    pub params: Vec<T>,
}

fn layer_table(input: usize, hidden: usize, k: usize) -> [Linear; LAYERS] {
    let dims = [
        (input, hidden),
        (hidden, hidden),
        (hidden, 2 * AttributeGroup::Feature.dim(k)),
        (hidden, 2 * AttributeGroup::Scaling.dim(k)),
        (hidden, 2 * AttributeGroup::Offsets.dim(k)),
    ];
    let mut off = 0;
    dims.map(|(in_dim, out_dim)| {
        let l = Linear { in_dim, out_dim, weight_offset: off, bias_offset: off + in_dim * out_dim };
        off += l.param_len();
        l
    })
}

/// Per-anchor forward state needed by the backward pass.
#[derive(Clone, Debug, Default)]
pub struct MlpActivations<T> {
    pub h1: Vec<T>,
    pub h2: Vec<T>,
    pub sigma_raw: Vec<T>,
    pub mu: Vec<T>,
    pub sigma: Vec<T>,
}

/// Gaussian parameters for every coefficient of one anchor, in group order.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    pub mu: Vec<T>,
    pub sigma: Vec<T>,
    k: usize,
}

impl<T: Real> Prediction<T> {
    pub fn group(&self, g: AttributeGroup) -> (&[T], &[T]) {
        let start: usize = AttributeGroup::ALL[..g.index()].iter().map(|h| h.dim(self.k)).sum();
        let r = start..start + g.dim(self.k);
        (&self.mu[r.clone()], &self.sigma[r])
    }
}

fn dense_forward<T: Real>(l: &Linear, params: &[T], x: &[T], out: &mut [T]) {
    out.copy_from_slice(&params[l.bias_offset..l.bias_offset + l.out_dim]);
    let w = &params[l.weight_offset..l.bias_offset];
    for (i, &v) in x.iter().enumerate() {
        if v == T::zero() {
            continue;
        }
        for (o, &wv) in out.iter_mut().zip(&w[i * l.out_dim..(i + 1) * l.out_dim]) {
            *o += v * wv;
        }
    }
}

fn dense_backward<T: Real>(l: &Linear, params: &[T], x: &[T], dy: &[T], grad: &mut [T], dx: Option<&mut [T]>) {
    let (gw, gb) = grad[l.weight_offset..l.bias_offset + l.out_dim].split_at_mut(l.in_dim * l.out_dim);
    for (b, &d) in gb.iter_mut().zip(dy) {
        *b += d;
    }
    for (i, &v) in x.iter().enumerate() {
        if v == T::zero() {
            continue;
        }
        for (g, &d) in gw[i * l.out_dim..(i + 1) * l.out_dim].iter_mut().zip(dy) {
            *g += v * d;
        }
    }
    if let Some(dx) = dx {
        let w = &params[l.weight_offset..l.bias_offset];
        for (i, d) in dx.iter_mut().enumerate() {
            let mut acc = T::zero();
            for (&wv, &g) in w[i * l.out_dim..(i + 1) * l.out_dim].iter().zip(dy) {
                acc += wv * g;
            }
            *d += acc;
        }
    }
}

impl<T: Real> DistributionModel<T> {
    /// Fan-in scaled uniform weights, zero biases.
    pub fn new(neighbors: usize, channels: usize, hidden: usize, offsets: usize, seed: u64) -> Result<Self> {
        let mut m = Self::zeros(neighbors, channels, hidden, offsets)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in m.layers {
            let bound = 1.0 / (l.in_dim as f64).sqrt();
            for w in &mut m.params[l.weight_offset..l.bias_offset] {
                *w = T::lit(rng.random_range(-bound..bound));
            }
        }
        Ok(m)
    }

    pub fn zeros(neighbors: usize, channels: usize, hidden: usize, offsets: usize) -> Result<Self> {
        if channels == 0 || hidden == 0 || offsets == 0 {
            return Err(Error::validation("model needs C, H and k all >= 1"));
        }
        let layers = layer_table(context_dim(neighbors, channels), hidden, offsets);
        let n = layers.iter().map(Linear::param_len).sum();
        Ok(Self { neighbors, channels, hidden, offsets, layers, params: vec![T::zero(); n] })
    }

    /// Start every head at a context-free prior: biases give `mean` and
    /// `sigma` per coefficient, head weights shrink by `weight_scale`.
    pub fn set_prior(&mut self, mean: &[T], sigma: &[T], weight_scale: T) -> Result<()> {
        let d = self.coeff_count();
        if mean.len() != d || sigma.len() != d {
            return Err(Error::validation(format!("prior needs {d} means and scales")));
        }
        if sigma.iter().any(|&s| !(s > T::lit(SIGMA_MIN)) || !s.is_finite()) {
            return Err(Error::validation("prior scales must exceed the sigma floor"));
        }
        let mut start = 0;
        for (g, l) in AttributeGroup::ALL.iter().zip(self.layers[2..].iter().copied()) {
            let dg = g.dim(self.offsets);
            self.params[l.weight_offset..l.bias_offset].iter_mut().for_each(|w| *w *= weight_scale);
            for j in 0..dg {
                self.params[l.bias_offset + j] = mean[start + j];
                // inverse of softplus + SIGMA_MIN
                let s = sigma[start + j] - T::lit(SIGMA_MIN);
                self.params[l.bias_offset + dg + j] = s.exp_m1().ln();
            }
            start += dg;
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn coeff_count(&self) -> usize {
        coefficients_per_anchor(self.offsets)
    }

    pub fn activations(&self) -> MlpActivations<T> {
        let d = self.coeff_count();
        MlpActivations {
            h1: vec![T::zero(); self.hidden],
            h2: vec![T::zero(); self.hidden],
            sigma_raw: vec![T::zero(); d],
            mu: vec![T::zero(); d],
            sigma: vec![T::zero(); d],
        }
    }

    /// Forward pass for one context. `ctx` must have [`Self::input_dim`] entries.
    pub fn forward_into(&self, ctx: &[T], act: &mut MlpActivations<T>) {
        debug_assert_eq!(ctx.len(), self.input_dim());
        dense_forward(&self.layers[0], &self.params, ctx, &mut act.h1);
        act.h1.iter_mut().for_each(|v| *v = v.max(T::zero()));
        dense_forward(&self.layers[1], &self.params, &act.h1, &mut act.h2);
        act.h2.iter_mut().for_each(|v| *v = v.max(T::zero()));
        let mut start = 0;
        let mut head = Vec::new();
        for (g, l) in AttributeGroup::ALL.iter().zip(&self.layers[2..]) {
            let d = g.dim(self.offsets);
            head.resize(l.out_dim, T::zero());
            dense_forward(l, &self.params, &act.h2, &mut head);
            act.mu[start..start + d].copy_from_slice(&head[..d]);
            act.sigma_raw[start..start + d].copy_from_slice(&head[d..]);
            start += d;
        }
        for (s, &r) in act.sigma.iter_mut().zip(&act.sigma_raw) {
            *s = r.softplus() + T::lit(SIGMA_MIN);
        }
    }

    /// Backward pass for one context given gradients w.r.t. `mu` and `sigma`.
    /// Parameter gradients are added to `grad`, context gradients to `d_ctx`.
    pub fn backward(
        &self,
        ctx: &[T],
        act: &MlpActivations<T>,
        d_mu: &[T],
        d_sigma: &[T],
        grad: &mut [T],
        d_ctx: Option<&mut [T]>,
    ) {
        let mut d_h2 = vec![T::zero(); self.hidden];
        let mut start = 0;
        let mut d_head = Vec::new();
        for (g, l) in AttributeGroup::ALL.iter().zip(&self.layers[2..]) {
            let d = g.dim(self.offsets);
            d_head.clear();
            d_head.extend_from_slice(&d_mu[start..start + d]);
            for j in start..start + d {
                d_head.push(d_sigma[j] * act.sigma_raw[j].sigmoid());
            }
            dense_backward(l, &self.params, &act.h2, &d_head, grad, Some(&mut d_h2));
            start += d;
        }
        for (d, &h) in d_h2.iter_mut().zip(&act.h2) {
            if h <= T::zero() {
                *d = T::zero();
            }
        }
        let mut d_h1 = vec![T::zero(); self.hidden];
        dense_backward(&self.layers[1], &self.params, &act.h1, &d_h2, grad, Some(&mut d_h1));
        for (d, &h) in d_h1.iter_mut().zip(&act.h1) {
            if h <= T::zero() {
                *d = T::zero();
            }
        }
        dense_backward(&self.layers[0], &self.params, ctx, &d_h1, grad, d_ctx);
    }

    /// Model chunk: `u32` layer count, `(u32 in, u32 out)` per layer, then per
    /// layer the weights `[out][in]` and biases as fp32.
    pub(crate) fn write_chunk(&self, w: &mut ByteWriter) {
        w.u32(LAYERS as u32);
        for l in &self.layers {
            w.u32(l.in_dim as u32);
            w.u32(l.out_dim as u32);
        }
        for l in &self.layers {
            for o in 0..l.out_dim {
                for i in 0..l.in_dim {
                    w.f32(self.params[l.weight_offset + i * l.out_dim + o].as_f64() as f32);
                }
            }
            for o in 0..l.out_dim {
                w.f32(self.params[l.bias_offset + o].as_f64() as f32);
            }
        }
    }

    pub fn to_chunk(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        self.write_chunk(&mut w);
        w.buf
    }

    /// Parse a model chunk whose shape must match the given hyper-parameters.
    pub fn from_chunk(bytes: &[u8], neighbors: usize, channels: usize, hidden: usize, offsets: usize) -> Result<Self> {
        let mut m = Self::zeros(neighbors, channels, hidden, offsets).map_err(|e| Error::format(e.to_string()))?;
        let mut r = ByteReader::new(bytes, "model chunk");
        if r.u32()? as usize != LAYERS {
            return Err(Error::format("model chunk has an unexpected layer count"));
        }
        for l in &m.layers {
            let (i, o) = (r.u32()? as usize, r.u32()? as usize);
            if (i, o) != (l.in_dim, l.out_dim) {
                return Err(Error::format(format!(
                    "model layer shape {i}x{o} does not match expected {}x{}",
                    l.in_dim, l.out_dim
                )));
            }
        }
        for l in m.layers {
            for o in 0..l.out_dim {
                for i in 0..l.in_dim {
                    m.params[l.weight_offset + i * l.out_dim + o] = T::lit(r.f32()? as f64);
                }
            }
            for o in 0..l.out_dim {
                m.params[l.bias_offset + o] = T::lit(r.f32()? as f64);
            }
        }
        if r.remaining() != 0 {
            return Err(Error::format("trailing bytes after model chunk"));
        }
        Ok(m)
    }
}

/// Per-coefficient `(mu, sigma)` for one context.
pub fn predict_distribution<T: Real>(model: &DistributionModel<T>, ctx: &[T]) -> Result<Prediction<T>> {
    if ctx.len() != model.input_dim() {
        return Err(Error::validation(format!(
            "context has {} entries, model expects {}",
            ctx.len(),
            model.input_dim()
        )));
    }
    let mut act = model.activations();
    model.forward_into(ctx, &mut act);
    Ok(Prediction { mu: act.mu, sigma: act.sigma, k: model.offsets })
}

/// Tri-plane samples of every anchor, `N x 3C` row-major.
pub fn sample_all<T: Real>(grid: &TriPlaneGrid<T>, stencils: &[SampleStencil<T>]) -> Vec<T> {
    let w = grid.feature_dim();
    let mut out = vec![T::zero(); stencils.len() * w];
    for (st, row) in stencils.iter().zip(out.chunks_exact_mut(w)) {
        st.sample_into(&grid.data, grid.resolution, grid.channels, row);
    }
    out
}

/// Write the context of anchor `i` from precomputed samples.
pub fn fill_context<T: Real>(
    i: usize,
    samples: &[T],
    feature_dim: usize,
    neighbors: &[usize],
    k_nn: usize,
    cube: [T; 3],
    out: &mut [T],
) {
    let w = feature_dim;
    out[..w].copy_from_slice(&samples[i * w..(i + 1) * w]);
    for slot in 0..k_nn {
        let dst = &mut out[(slot + 1) * w..(slot + 2) * w];
        match neighbors.get(slot) {
            Some(&j) => dst.copy_from_slice(&samples[j * w..(j + 1) * w]),
            None => dst.iter_mut().for_each(|v| *v = T::zero()),
        }
    }
    out[(k_nn + 1) * w..].copy_from_slice(&cube);
}

/// Route a context gradient back onto the per-anchor sample rows.
pub fn scatter_context_grad<T: Real>(
    i: usize,
    d_ctx: &[T],
    feature_dim: usize,
    neighbors: &[usize],
    d_samples: &mut [T],
) {
    let w = feature_dim;
    for (block, &j) in std::iter::once(&i).chain(neighbors.iter()).enumerate() {
        let src = &d_ctx[block * w..(block + 1) * w];
        for (d, &s) in d_samples[j * w..(j + 1) * w].iter_mut().zip(src) {
            *d += s;
        }
    }
}

/// Context vector of anchor `i`. Takes positions only, never attributes.
pub fn assemble_context<T: Real>(
    positions: &[[T; 3]],
    grid: &TriPlaneGrid<T>,
    params: &ContractParams<T>,
    neighbors: &[Vec<usize>],
    k_nn: usize,
    i: usize,
) -> Result<Vec<T>> {
    if i >= positions.len() || neighbors.len() != positions.len() {
        return Err(Error::validation(format!("anchor {i} out of range for {} anchors", positions.len())));
    }
    let w = grid.feature_dim();
    let mut out = vec![T::zero(); context_dim(k_nn, grid.channels)];
    let sample = |j: usize, dst: &mut [T]| {
        SampleStencil::new(positions[j], params, grid.resolution).sample_into(&grid.data, grid.resolution, grid.channels, dst)
    };
    sample(i, &mut out[..w]);
    for (slot, &j) in neighbors[i].iter().take(k_nn).enumerate() {
        sample(j, &mut out[(slot + 1) * w..(slot + 2) * w]);
    }
    let c = contract(positions[i], params);
    out[(k_nn + 1) * w..].copy_from_slice(&c);
    Ok(out)
}
