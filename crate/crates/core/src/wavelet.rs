//! Orthonormal Haar wavelet pyramid and the step-scheduled wavelet loss.

use crate::error::{Error, Result};
use crate::scalar::Real;

pub const DEFAULT_LEVELS: usize = 2;

/// Row-major `height x width x channels` image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Real> Image<T> {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, data: vec![T::zero(); height * width * channels] }
    }

    pub fn from_data(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::validation(format!(
                "image data has {} values, expected {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self { height, width, channels, data })
    }

    #[inline]
    fn at(&self, y: usize, x: usize, c: usize) -> T {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    fn set(&mut self, y: usize, x: usize, c: usize, v: T) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        (self.height, self.width, self.channels) == (other.height, other.width, other.channels)
    }

    /// Top-left crop to the largest multiple of `m` in both dimensions.
    pub fn crop_to_multiple(&self, m: usize) -> Self {
        let (h, w) = (self.height / m * m, self.width / m * m);
        let mut out = Self::zeros(h, w, self.channels);
        for y in 0..h {
            let src = y * self.width * self.channels;
            out.data[y * w * self.channels..(y + 1) * w * self.channels]
                .copy_from_slice(&self.data[src..src + w * self.channels]);
        }
        out
    }

    pub fn energy(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }
}

/// Detail subbands of one level.
#[derive(Clone, Debug, PartialEq)]
pub struct DetailBands<T> {
    /// Low-pass down the columns, high-pass along the rows.
    pub lh: Image<T>,
    pub hl: Image<T>,
    pub hh: Image<T>,
}

impl<T> DetailBands<T> {
    pub fn bands(&self) -> [&Image<T>; 3] {
        [&self.lh, &self.hl, &self.hh]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WaveletPyramid<T> {
    pub yl: Image<T>,
    /// Finest level first.
    pub yh: Vec<DetailBands<T>>,
}

impl<T: Real> WaveletPyramid<T> {
    pub fn energy(&self) -> T {
        self.yh.iter().flat_map(|d| d.bands()).fold(self.yl.energy(), |acc, b| acc + b.energy())
    }
}

fn analysis<T: Real>(img: &Image<T>) -> (Image<T>, DetailBands<T>) {
    let (h, w, ch) = (img.height / 2, img.width / 2, img.channels);
    let half = T::lit(0.5);
    let mut ll = Image::zeros(h, w, ch);
    let mut bands = DetailBands { lh: Image::zeros(h, w, ch), hl: Image::zeros(h, w, ch), hh: Image::zeros(h, w, ch) };
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let a = img.at(2 * y, 2 * x, c);
                let b = img.at(2 * y, 2 * x + 1, c);
                let d = img.at(2 * y + 1, 2 * x, c);
                let e = img.at(2 * y + 1, 2 * x + 1, c);
                ll.set(y, x, c, half * (a + b + d + e));
                bands.lh.set(y, x, c, half * (a - b + d - e));
                bands.hl.set(y, x, c, half * (a + b - d - e));
                bands.hh.set(y, x, c, half * (a - b - d + e));
            }
        }
    }
    (ll, bands)
}

fn synthesis<T: Real>(ll: &Image<T>, bands: &DetailBands<T>) -> Image<T> {
    let (h, w, ch) = (ll.height, ll.width, ll.channels);
    let half = T::lit(0.5);
    let mut out = Image::zeros(2 * h, 2 * w, ch);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let (s, p, q, r) = (ll.at(y, x, c), bands.lh.at(y, x, c), bands.hl.at(y, x, c), bands.hh.at(y, x, c));
                out.set(2 * y, 2 * x, c, half * (s + p + q + r));
                out.set(2 * y, 2 * x + 1, c, half * (s - p + q - r));
                out.set(2 * y + 1, 2 * x, c, half * (s + p - q - r));
                out.set(2 * y + 1, 2 * x + 1, c, half * (s - p - q + r));
            }
        }
    }
    out
}

/// `levels`-deep Haar decomposition; both dimensions must divide by `2^levels`.
pub fn dwt2<T: Real>(img: &Image<T>, levels: usize) -> Result<WaveletPyramid<T>> {
    let m = 1usize << levels;
    if img.height == 0 || img.width == 0 || img.height % m != 0 || img.width % m != 0 {
        return Err(Error::validation(format!(
            "image {}x{} is not divisible by {m} for a {levels}-level transform",
            img.height, img.width
        )));
    }
    if img.data.len() != img.height * img.width * img.channels {
        return Err(Error::validation("image data does not match its shape"));
    }
    let mut ll = img.clone();
    let mut yh = Vec::with_capacity(levels);
    for _ in 0..levels {
        let (next, bands) = analysis(&ll);
        yh.push(bands);
        ll = next;
    }
    Ok(WaveletPyramid { yl: ll, yh })
}

pub fn idwt2<T: Real>(pyr: &WaveletPyramid<T>) -> Result<Image<T>> {
    let mut img = pyr.yl.clone();
    for bands in pyr.yh.iter().rev() {
        if bands.bands().iter().any(|b| !b.same_shape(&img)) {
            return Err(Error::validation("wavelet pyramid bands have inconsistent shapes"));
        }
        img = synthesis(&img, bands);
    }
    Ok(img)
}

/// Linear ramps of the low- and high-frequency weights over `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WaveletSchedule {
    pub lambda1_start: f64,
    pub lambda1_end: f64,
    pub lambda2_start: f64,
    pub lambda2_end: f64,
    pub total_steps: u64,
}

impl Default for WaveletSchedule {
    fn default() -> Self {
        Self { lambda1_start: 1.0, lambda1_end: 0.2, lambda2_start: 0.0, lambda2_end: 0.8, total_steps: 30_000 }
    }
}

impl WaveletSchedule {
    pub fn validate(&self) -> Result<()> {
        let l = [self.lambda1_start, self.lambda1_end, self.lambda2_start, self.lambda2_end];
        if !l.iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(Error::validation("wavelet weights must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// `(lambda1, lambda2)` at `step`, clamped to the end values after `total_steps`.
pub fn lambda_schedule(step: u64, sched: &WaveletSchedule) -> (f64, f64) {
    let t = if sched.total_steps == 0 { 1.0 } else { (step as f64 / sched.total_steps as f64).min(1.0) };
    let lerp = |a: f64, b: f64| a * (1.0 - t) + b * t;
    (lerp(sched.lambda1_start, sched.lambda1_end), lerp(sched.lambda2_start, sched.lambda2_end))
}

fn mean_abs<T: Real>(a: &Image<T>, b: &Image<T>) -> T {
    let s: T = a.data.iter().zip(&b.data).map(|(&x, &y)| (x - y).abs()).sum();
    s / T::lit(a.data.len().max(1) as f64)
}

/// The two terms of [`wavelet_loss`] before weighting.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WaveletTerms<T> {
    pub low: T,
    pub high: T,
}

/// Unweighted `L1(YL)` and `sum over levels of mean_bands L1(YH)`.
pub fn wavelet_terms<T: Real>(img1: &Image<T>, img2: &Image<T>) -> Result<WaveletTerms<T>> {
    if !img1.same_shape(img2) {
        return Err(Error::validation("images differ in shape"));
    }
    let a = dwt2(img1, DEFAULT_LEVELS)?;
    let b = dwt2(img2, DEFAULT_LEVELS)?;
    let mut high = T::zero();
    for (da, db) in a.yh.iter().zip(&b.yh) {
        let s: T = da.bands().iter().zip(db.bands()).map(|(x, y)| mean_abs(x, y)).sum();
        high += s / T::lit(3.0);
    }
    Ok(WaveletTerms { low: mean_abs(&a.yl, &b.yl), high })
}

pub fn wavelet_loss<T: Real>(img1: &Image<T>, img2: &Image<T>, step: u64, sched: &WaveletSchedule) -> Result<T> {
    let t = wavelet_terms(img1, img2)?;
    let (l1, l2) = lambda_schedule(step, sched);
    Ok(T::lit(l1) * t.low + T::lit(l2) * t.high)
}
