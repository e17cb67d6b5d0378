//! Convolutional autoencoder shared by the three feature planes.
//!
//! The encoder is three 3x3 stride-2 convolutions (`C -> 2C -> 2C -> C`), the
//! decoder three nearest-neighbour 2x upsamplings each followed by a 3x3
//! stride-1 convolution (`C -> 2C -> 2C -> C`). ReLU sits between layers; the
//! latent and the reconstruction are linear. Only the latent and the decoder
//! are stored in a container.
//!
//! All parameters live in one flat vector so the optimizer and gradient checks
//! can treat them uniformly. Kernels are kept as `[kr][kc][in][out]` so the
//! innermost loop runs over output channels; the chunk format uses
//! `[out][in][kr][kc]` and conversion happens at (de)serialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bytes::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::triplane::{TriPlaneGrid, PLANES};

pub const DOWNSAMPLE: usize = 8;
const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvLayer {
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
    /// Nearest-neighbour 2x upsampling before the convolution.
    pub upsample: bool,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl ConvLayer {
    pub fn weight_len(&self) -> usize {
        TAPS * self.in_ch * self.out_ch
    }

    pub fn param_len(&self) -> usize {
        self.weight_len() + self.out_ch
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlaneAutoencoder<T> {
    pub resolution: usize,
    pub channels: usize,
    /// Encoder layers 0..3, decoder layers 3..6.
    pub layers: [ConvLayer; 6],
    pub params: Vec<T>,
}

/// Latent planes, `3 x (R/8) x (R/8) x C` in `[plane][i][j][c]` order.
#[derive(Clone, Debug, PartialEq)]
pub struct PlaneLatent<T> {
    pub resolution: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Real> PlaneLatent<T> {
    pub fn plane_len(&self) -> usize {
        self.resolution * self.resolution * self.channels
    }

    pub fn plane(&self, p: usize) -> &[T] {
        let n = self.plane_len();
        &self.data[p * n..(p + 1) * n]
    }
}

fn layer_table(c: usize) -> [ConvLayer; 6] {
    let shapes = [
        (c, 2 * c, 2, false),
        (2 * c, 2 * c, 2, false),
        (2 * c, c, 2, false),
        (c, 2 * c, 1, true),
        (2 * c, 2 * c, 1, true),
        (2 * c, c, 1, true),
    ];
    let mut off = 0;
    shapes.map(|(in_ch, out_ch, stride, upsample)| {
        let w = TAPS * in_ch * out_ch;
        let l = ConvLayer {
            in_ch,
            out_ch,
            stride,
            upsample,
            weight_offset: off,
            bias_offset: off + w,
        };
        off += w + out_ch;
        l
    })
}

pub const ENCODER: std::ops::Range<usize> = 0..3;
pub const DECODER: std::ops::Range<usize> = 3..6;

impl<T: Real> PlaneAutoencoder<T> {
    /// Fan-in scaled uniform weights, zero biases.
    pub fn new(resolution: usize, channels: usize, seed: u64) -> Result<Self> {
        let mut ae = Self::zeros(resolution, channels)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in ae.layers {
            let bound = 1.0 / ((TAPS * l.in_ch) as f64).sqrt();
            for w in &mut ae.params[l.weight_offset..l.bias_offset] {
                *w = T::lit(rng.random_range(-bound..bound));
            }
        }
        Ok(ae)
    }

    pub fn zeros(resolution: usize, channels: usize) -> Result<Self> {
        if resolution < DOWNSAMPLE || resolution % DOWNSAMPLE != 0 {
            return Err(Error::validation(format!(
                "autoencoder needs R divisible by {DOWNSAMPLE}, got R={resolution}"
            )));
        }
        if channels == 0 {
            return Err(Error::validation("autoencoder needs C >= 1"));
        }
        let layers = layer_table(channels);
        let n = layers.iter().map(ConvLayer::param_len).sum();
        Ok(Self { resolution, channels, layers, params: vec![T::zero(); n] })
    }

    pub fn latent_resolution(&self) -> usize {
        self.resolution / DOWNSAMPLE
    }

    /// Number of decoder parameters stored in a container.
    pub fn decoder_param_count(&self) -> usize {
        self.layers[DECODER].iter().map(ConvLayer::param_len).sum()
    }

    pub fn decoder_params(&self) -> &[T] {
        &self.params[self.layers[DECODER.start].weight_offset..]
    }

    fn check_grid(&self, grid: &TriPlaneGrid<T>) -> Result<()> {
        if grid.resolution != self.resolution || grid.channels != self.channels {
            return Err(Error::validation(format!(
                "grid {}x{}x{} does not match autoencoder {}x{}x{}",
                grid.resolution, grid.resolution, grid.channels,
                self.resolution, self.resolution, self.channels
            )));
        }
        Ok(())
    }

    pub fn encode_plane(&self, plane: &[T]) -> Vec<T> {
        let mut x = plane.to_vec();
        let mut size = self.resolution;
        for (li, l) in self.layers[ENCODER].iter().enumerate() {
            let (mut y, s) = conv_forward(l, &self.params, &x, size);
            if li + 1 < ENCODER.end {
                relu(&mut y);
            }
            x = y;
            size = s;
        }
        x
    }

    pub fn decode_plane(&self, latent: &[T]) -> Vec<T> {
        let mut x = latent.to_vec();
        let mut size = self.latent_resolution();
        for (li, l) in self.layers[DECODER].iter().enumerate() {
            let up = upsample2(&x, size, l.in_ch);
            let (mut y, s) = conv_forward(l, &self.params, &up, size * 2);
            if li + 1 < DECODER.len() {
                relu(&mut y);
            }
            x = y;
            size = s;
        }
        x
    }

    /// Forward pass over all planes, keeping activations for [`Self::backward`].
    pub fn forward(&self, grid: &TriPlaneGrid<T>) -> Result<(TriPlaneGrid<T>, AeTape<T>)> {
        self.check_grid(grid)?;
        let planes: Vec<PlaneTape<T>> = (0..PLANES)
            .into_par_iter()
            .map(|p| self.forward_plane(grid.plane(p)))
            .collect();
        let mut out = TriPlaneGrid::zeros(self.resolution, self.channels)?;
        for (p, t) in planes.iter().enumerate() {
            out.plane_mut(p).copy_from_slice(&t.acts[6]);
        }
        Ok((out, AeTape { planes }))
    }

    fn forward_plane(&self, plane: &[T]) -> PlaneTape<T> {
        // acts[i] is the input of layer i (before upsampling); acts[6] the output
        let mut acts = Vec::with_capacity(7);
        let mut sizes = Vec::with_capacity(7);
        acts.push(plane.to_vec());
        sizes.push(self.resolution);
        for (li, l) in self.layers.iter().enumerate() {
            let size = sizes[li];
            let (mut y, s) = if l.upsample {
                let up = upsample2(&acts[li], size, l.in_ch);
                conv_forward(l, &self.params, &up, size * 2)
            } else {
                conv_forward(l, &self.params, &acts[li], size)
            };
            if li != 2 && li != 5 {
                relu(&mut y);
            }
            acts.push(y);
            sizes.push(s);
        }
        PlaneTape { acts, sizes }
    }

    /// Backpropagate `d_out` (gradient w.r.t. the reconstruction). Parameter
    /// gradients are added to `grad`; the gradient w.r.t. the input grid is returned.
    pub fn backward(&self, tape: &AeTape<T>, d_out: &TriPlaneGrid<T>, grad: &mut [T]) -> Result<Vec<T>> {
        self.check_grid(d_out)?;
        assert_eq!(grad.len(), self.params.len());
        let per_plane: Vec<(Vec<T>, Vec<T>)> = (0..PLANES)
            .into_par_iter()
            .map(|p| self.backward_plane(&tape.planes[p], d_out.plane(p)))
            .collect();
        let mut d_grid = Vec::with_capacity(d_out.data.len());
        for (gp, dx) in per_plane {
            for (g, v) in grad.iter_mut().zip(gp) {
                *g += v;
            }
            d_grid.extend(dx);
        }
        Ok(d_grid)
    }

    fn backward_plane(&self, tape: &PlaneTape<T>, d_out: &[T]) -> (Vec<T>, Vec<T>) {
        let mut gp = vec![T::zero(); self.params.len()];
        let mut dy = d_out.to_vec();
        for li in (0..self.layers.len()).rev() {
            let l = &self.layers[li];
            if li != 2 && li != 5 {
                // output of this layer went through ReLU
                for (d, &a) in dy.iter_mut().zip(&tape.acts[li + 1]) {
                    if a <= T::zero() {
                        *d = T::zero();
                    }
                }
            }
            let size = tape.sizes[li];
            dy = if l.upsample {
                let up = upsample2(&tape.acts[li], size, l.in_ch);
                let d_up = conv_backward(l, &self.params, &up, size * 2, &dy, &mut gp);
                downsample2_sum(&d_up, size, l.in_ch)
            } else {
                conv_backward(l, &self.params, &tape.acts[li], size, &dy, &mut gp)
            };
        }
        (gp, dy)
    }

    /// Serialize the decoder weights in `[out][in][kr][kc]` order, biases after
    /// each layer's weights, as fp32.
    pub(crate) fn write_decoder(&self, w: &mut ByteWriter) {
        for l in &self.layers[DECODER] {
            for o in 0..l.out_ch {
                for i in 0..l.in_ch {
                    for t in 0..TAPS {
                        let v = self.params[l.weight_offset + (t * l.in_ch + i) * l.out_ch + o];
                        w.f32(v.as_f64() as f32);
                    }
                }
            }
            for o in 0..l.out_ch {
                w.f32(self.params[l.bias_offset + o].as_f64() as f32);
            }
        }
    }

    pub(crate) fn read_decoder(&mut self, r: &mut ByteReader) -> Result<()> {
        for l in self.layers[DECODER].to_vec() {
            for o in 0..l.out_ch {
                for i in 0..l.in_ch {
                    for t in 0..TAPS {
                        self.params[l.weight_offset + (t * l.in_ch + i) * l.out_ch + o] =
                            T::lit(r.f32()? as f64);
                    }
                }
            }
            for o in 0..l.out_ch {
                self.params[l.bias_offset + o] = T::lit(r.f32()? as f64);
            }
        }
        Ok(())
    }
}

/// Activations of one forward pass.
#[derive(Clone, Debug)]
pub struct AeTape<T> {
    planes: Vec<PlaneTape<T>>,
}

#[derive(Clone, Debug)]
struct PlaneTape<T> {
    acts: Vec<Vec<T>>,
    sizes: Vec<usize>,
}

pub fn encode_planes<T: Real>(grid: &TriPlaneGrid<T>, ae: &PlaneAutoencoder<T>) -> Result<PlaneLatent<T>> {
    ae.check_grid(grid)?;
    let parts: Vec<Vec<T>> = (0..PLANES).into_par_iter().map(|p| ae.encode_plane(grid.plane(p))).collect();
    Ok(PlaneLatent {
        resolution: ae.latent_resolution(),
        channels: ae.channels,
        data: parts.concat(),
    })
}

pub fn decode_planes<T: Real>(latent: &PlaneLatent<T>, ae: &PlaneAutoencoder<T>) -> Result<TriPlaneGrid<T>> {
    if latent.resolution != ae.latent_resolution() || latent.channels != ae.channels {
        return Err(Error::validation("latent shape does not match autoencoder"));
    }
    let parts: Vec<Vec<T>> = (0..PLANES).into_par_iter().map(|p| ae.decode_plane(latent.plane(p))).collect();
    Ok(TriPlaneGrid {
        resolution: ae.resolution,
        channels: ae.channels,
        data: parts.concat(),
    })
}

/// Mean absolute difference over all plane entries.
pub fn tri_rec_loss<T: Real>(original: &TriPlaneGrid<T>, reconstructed: &TriPlaneGrid<T>) -> Result<T> {
    if !original.same_shape(reconstructed) {
        return Err(Error::validation("tri-plane shapes differ"));
    }
    let sum: T = original.data.iter().zip(&reconstructed.data).map(|(&a, &b)| (a - b).abs()).sum();
    Ok(sum / T::lit(original.data.len() as f64))
}

/// Gradient of [`tri_rec_loss`] w.r.t. the reconstruction (negate for the original).
pub fn tri_rec_loss_grad<T: Real>(original: &TriPlaneGrid<T>, reconstructed: &TriPlaneGrid<T>) -> Vec<T> {
    let inv = T::one() / T::lit(original.data.len() as f64);
    original
        .data
        .iter()
        .zip(&reconstructed.data)
        .map(|(&a, &b)| {
            if b > a {
                inv
            } else if b < a {
                -inv
            } else {
                T::zero()
            }
        })
        .collect()
}

/// Plane chunk: `R u32, C u32`, the latent as fp32, then the decoder.
pub fn write_plane_chunk<T: Real>(latent: &PlaneLatent<T>, ae: &PlaneAutoencoder<T>) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.u32(ae.resolution as u32);
    w.u32(ae.channels as u32);
    for &v in &latent.data {
        w.f32(v.as_f64() as f32);
    }
    ae.write_decoder(&mut w);
    w.buf
}

/// Inverse of [`write_plane_chunk`]. The returned autoencoder has zero encoder weights.
pub fn read_plane_chunk(bytes: &[u8]) -> Result<(PlaneLatent<f64>, PlaneAutoencoder<f64>)> {
    let mut r = ByteReader::new(bytes, "plane chunk");
    let res = r.u32()? as usize;
    let ch = r.u32()? as usize;
    if res == 0 || ch == 0 || res > 1 << 14 || ch > 1 << 12 {
        return Err(Error::format(format!("implausible plane chunk shape R={res} C={ch}")));
    }
    let mut ae = PlaneAutoencoder::<f64>::zeros(res, ch).map_err(|e| Error::format(e.to_string()))?;
    let lr = ae.latent_resolution();
    let n = PLANES * lr * lr * ch;
    let data = r.f32_vec_as_f64(n)?;
    ae.read_decoder(&mut r)?;
    if r.remaining() != 0 {
        return Err(Error::format("trailing bytes after plane chunk"));
    }
    Ok((PlaneLatent { resolution: lr, channels: ch, data }, ae))
}

fn relu<T: Real>(x: &mut [T]) {
    for v in x {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// `[h][w][c]` square map of side `size` to side `2 size`.
fn upsample2<T: Real>(x: &[T], size: usize, c: usize) -> Vec<T> {
    let big = 2 * size;
    let mut out = vec![T::zero(); big * big * c];
    for y in 0..big {
        for xx in 0..big {
            let src = ((y / 2) * size + xx / 2) * c;
            let dst = (y * big + xx) * c;
            out[dst..dst + c].copy_from_slice(&x[src..src + c]);
        }
    }
    out
}

/// Adjoint of [`upsample2`].
fn downsample2_sum<T: Real>(d: &[T], size: usize, c: usize) -> Vec<T> {
    let big = 2 * size;
    let mut out = vec![T::zero(); size * size * c];
    for y in 0..big {
        for xx in 0..big {
            let dst = ((y / 2) * size + xx / 2) * c;
            let src = (y * big + xx) * c;
            for k in 0..c {
                out[dst + k] += d[src + k];
            }
        }
    }
    out
}

#[inline]
fn tap_input(o: usize, stride: usize, k: usize, size: usize) -> Option<usize> {
    let i = (o * stride + k) as isize - 1;
    (i >= 0 && (i as usize) < size).then_some(i as usize)
}

/// 3x3 convolution with padding 1 over a square `[h][w][c]` map.
fn conv_forward<T: Real>(l: &ConvLayer, params: &[T], x: &[T], size: usize) -> (Vec<T>, usize) {
    let (ci, co, s) = (l.in_ch, l.out_ch, l.stride);
    let out_size = (size - 1) / s + 1;
    let wt = &params[l.weight_offset..l.bias_offset];
    let bias = &params[l.bias_offset..l.bias_offset + co];
    let mut y = vec![T::zero(); out_size * out_size * co];
    for oy in 0..out_size {
        for ox in 0..out_size {
            let acc = &mut y[(oy * out_size + ox) * co..][..co];
            acc.copy_from_slice(bias);
            for kr in 0..KERNEL {
                let Some(iy) = tap_input(oy, s, kr, size) else { continue };
                for kc in 0..KERNEL {
                    let Some(ix) = tap_input(ox, s, kc, size) else { continue };
                    let xin = &x[(iy * size + ix) * ci..][..ci];
                    let wk = &wt[(kr * KERNEL + kc) * ci * co..][..ci * co];
                    for (i, &v) in xin.iter().enumerate() {
                        if v == T::zero() {
                            continue;
                        }
                        for (a, &wv) in acc.iter_mut().zip(&wk[i * co..(i + 1) * co]) {
                            *a += v * wv;
                        }
                    }
                }
            }
        }
    }
    (y, out_size)
}

/// Adds parameter gradients to `grad` and returns the input gradient.
fn conv_backward<T: Real>(l: &ConvLayer, params: &[T], x: &[T], size: usize, dy: &[T], grad: &mut [T]) -> Vec<T> {
    let (ci, co, s) = (l.in_ch, l.out_ch, l.stride);
    let out_size = (size - 1) / s + 1;
    let wt = &params[l.weight_offset..l.bias_offset];
    let mut dx = vec![T::zero(); size * size * ci];
    let (gw, gb) = grad[l.weight_offset..l.bias_offset + co].split_at_mut(l.weight_len());
    for oy in 0..out_size {
        for ox in 0..out_size {
            let g = &dy[(oy * out_size + ox) * co..][..co];
            for (b, &v) in gb.iter_mut().zip(g) {
                *b += v;
            }
            for kr in 0..KERNEL {
                let Some(iy) = tap_input(oy, s, kr, size) else { continue };
                for kc in 0..KERNEL {
                    let Some(ix) = tap_input(ox, s, kc, size) else { continue };
                    let base = (iy * size + ix) * ci;
                    let tap = (kr * KERNEL + kc) * ci * co;
                    for i in 0..ci {
                        let row = tap + i * co;
                        let v = x[base + i];
                        if v != T::zero() {
                            for (gwv, &gv) in gw[row..row + co].iter_mut().zip(g) {
                                *gwv += v * gv;
                            }
                        }
                        let mut d = T::zero();
                        for (&wv, &gv) in wt[row..row + co].iter().zip(g) {
                            d += wv * gv;
                        }
                        dx[base + i] += d;
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_and_parameter_counts() {
        let ae = PlaneAutoencoder::<f64>::new(16, 3, 0).unwrap();
        let grid = TriPlaneGrid::<f64>::random(16, 3, 1).unwrap();
        let lat = encode_planes(&grid, &ae).unwrap();
        assert_eq!(lat.resolution, 2);
        assert_eq!(lat.data.len(), 3 * 2 * 2 * 3);
        let rec = decode_planes(&lat, &ae).unwrap();
        assert!(rec.same_shape(&grid));
        // decoder: 9*(3*6 + 6*6 + 6*3) weights + 6 + 6 + 3 biases
        assert_eq!(ae.decoder_param_count(), 9 * 72 + 15);
        assert_eq!(ae.params.len(), 2 * (9 * 72 + 15));
    }

    #[test]
    fn rejects_bad_resolution() {
        assert!(PlaneAutoencoder::<f64>::new(12, 4, 0).is_err());
        assert!(PlaneAutoencoder::<f64>::new(4, 4, 0).is_err());
        let ae = PlaneAutoencoder::<f64>::new(16, 4, 0).unwrap();
        let g = TriPlaneGrid::<f64>::zeros(8, 4).unwrap();
        assert!(encode_planes(&g, &ae).is_err());
    }

    #[test]
    fn zero_plane_with_zero_biases_gives_zero_latent() {
        let ae = PlaneAutoencoder::<f64>::new(8, 2, 5).unwrap();
        let g = TriPlaneGrid::<f64>::zeros(8, 2).unwrap();
        let lat = encode_planes(&g, &ae).unwrap();
        assert!(lat.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_grids_have_zero_reconstruction_loss() {
        let g = TriPlaneGrid::<f64>::random(8, 2, 2).unwrap();
        assert_eq!(tri_rec_loss(&g, &g).unwrap(), 0.0);
        let mut h = g.clone();
        h.data[0] += 0.6;
        assert!((tri_rec_loss(&g, &h).unwrap() - 0.6 / g.data.len() as f64).abs() < 1e-15);
        let other = TriPlaneGrid::<f64>::zeros(8, 3).unwrap();
        assert!(tri_rec_loss(&g, &other).is_err());
    }

    /// Direct convolution written from the definition, used as an oracle.
    fn naive_conv(x: &[f64], size: usize, ci: usize, co: usize, stride: usize, w: &dyn Fn(usize, usize, usize, usize) -> f64, b: &[f64]) -> Vec<f64> {
        let os = (size + 2 - 3) / stride + 1;
        let mut y = vec![0.0; os * os * co];
        for oy in 0..os {
            for ox in 0..os {
                for o in 0..co {
                    let mut acc = b[o];
                    for kr in 0..3 {
                        for kc in 0..3 {
                            let iy = (oy * stride + kr) as i64 - 1;
                            let ix = (ox * stride + kc) as i64 - 1;
                            if iy < 0 || ix < 0 || iy >= size as i64 || ix >= size as i64 {
                                continue;
                            }
                            for i in 0..ci {
                                acc += x[((iy as usize) * size + ix as usize) * ci + i] * w(o, i, kr, kc);
                            }
                        }
                    }
                    y[(oy * os + ox) * co + o] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_naive_definition() {
        let ae = PlaneAutoencoder::<f64>::new(8, 2, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for l in ae.layers {
            let size = 8;
            let x: Vec<f64> = (0..size * size * l.in_ch).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut params = ae.params.clone();
            for b in &mut params[l.bias_offset..l.bias_offset + l.out_ch] {
                *b = rng.random_range(-1.0..1.0);
            }
            let wfn = |o: usize, i: usize, kr: usize, kc: usize| {
                params[l.weight_offset + ((kr * 3 + kc) * l.in_ch + i) * l.out_ch + o]
            };
            let (y, _) = conv_forward(&l, &params, &x, size);
            let yn = naive_conv(&x, size, l.in_ch, l.out_ch, l.stride, &wfn, &params[l.bias_offset..l.bias_offset + l.out_ch]);
            for (a, b) in y.iter().zip(&yn) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_central_differences() {
        let r = 8;
        let c = 2;
        let mut ae = PlaneAutoencoder::<f64>::new(r, c, 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for b in 0..ae.params.len() {
            // nonzero biases so ReLUs are not all on one side
            if ae.layers.iter().any(|l| b >= l.bias_offset && b < l.bias_offset + l.out_ch) {
                ae.params[b] = rng.random_range(-0.3..0.3);
            }
        }
        let grid = {
            let mut g = TriPlaneGrid::<f64>::zeros(r, c).unwrap();
            for v in &mut g.data {
                *v = rng.random_range(-1.0..1.0);
            }
            g
        };
        let weights: Vec<f64> = (0..grid.data.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |ae: &PlaneAutoencoder<f64>, g: &TriPlaneGrid<f64>| -> f64 {
            let (out, _) = ae.forward(g).unwrap();
            out.data.iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let (_, tape) = ae.forward(&grid).unwrap();
        let d_out = TriPlaneGrid { resolution: r, channels: c, data: weights.clone() };
        let mut gp = vec![0.0; ae.params.len()];
        let d_grid = ae.backward(&tape, &d_out, &mut gp).unwrap();

        // central differences on an O(1) loss carry ~1e-10 absolute noise, so the
        // denominator is floored at 1e-4
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-4);
        let mut worst: f64 = 0.0;
        for idx in (0..ae.params.len()).step_by(7) {
            let h = 1e-6 * ae.params[idx].abs().max(1.0);
            let mut p = ae.clone();
            p.params[idx] += h;
            let mut m = ae.clone();
            m.params[idx] -= h;
            let fd = (loss(&p, &grid) - loss(&m, &grid)) / (2.0 * h);
            worst = worst.max(rel(gp[idx], fd));
        }
        for idx in (0..grid.data.len()).step_by(5) {
            let h = 1e-6 * grid.data[idx].abs().max(1.0);
            let mut p = grid.clone();
            p.data[idx] += h;
            let mut m = grid.clone();
            m.data[idx] -= h;
            let fd = (loss(&ae, &p) - loss(&ae, &m)) / (2.0 * h);
            worst = worst.max(rel(d_grid[idx], fd));
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn plane_chunk_round_trip_is_fp32_exact() {
        let ae = PlaneAutoencoder::<f64>::new(16, 3, 2).unwrap();
        let grid = TriPlaneGrid::<f64>::random(16, 3, 3).unwrap();
        let lat = encode_planes(&grid, &ae).unwrap();
        let bytes = write_plane_chunk(&lat, &ae);
        assert_eq!(bytes.len(), 8 + 4 * (lat.data.len() + ae.decoder_param_count()));
        let (lat2, ae2) = read_plane_chunk(&bytes).unwrap();
        for (a, b) in lat.data.iter().zip(&lat2.data) {
            assert_eq!(*a as f32 as f64, *b);
        }
        for (a, b) in ae.decoder_params().iter().zip(ae2.decoder_params()) {
            assert_eq!(*a as f32 as f64, *b);
        }
        assert_eq!(write_plane_chunk(&lat2, &ae2), bytes);
        assert!(read_plane_chunk(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn chunk_uses_out_in_kr_kc_order() {
        let mut ae = PlaneAutoencoder::<f64>::zeros(8, 1).unwrap();
        let l = ae.layers[3];
        // weight for (out=1, in=0, kr=2, kc=0)
        ae.params[l.weight_offset + (2 * 3) * l.out_ch + 1] = 1.5;
        let lat = PlaneLatent { resolution: 1, channels: 1, data: vec![0.0; 3] };
        let bytes = write_plane_chunk(&lat, &ae);
        let start = 8 + 3 * 4;
        let pos = (1 * l.in_ch * 9) + 2 * 3;
        let v = f32::from_le_bytes(bytes[start + 4 * pos..start + 4 * pos + 4].try_into().unwrap());
        assert_eq!(v, 1.5);
    }
}
