//! Continuous tri-plane feature field.
//!
//! Positions are normalized by the scene frame, squeezed into a radius-2 ball
//! by the contract mapping and shifted into the unit cube. The cube point is
//! projected onto the xy, yz and xz planes, each plane is sampled bilinearly
//! (align-corners: plane coordinate `p` maps to grid index `p * (R - 1)`), and
//! the three `C`-vectors are concatenated in that plane order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::anchor::SceneBounds;
use crate::error::{Error, Result};
use crate::scalar::Real;

pub const PLANES: usize = 3;
pub const INIT_NOISE: f64 = 1e-2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContractParams<T> {
    pub center: [T; 3],
    pub radius: T,
}

impl<T: Real> ContractParams<T> {
    pub fn new(center: [T; 3], radius: T) -> Result<Self> {
        if !(radius > T::zero()) || !radius.is_finite() {
            return Err(Error::validation("contract radius must be positive and finite"));
        }
        Ok(Self { center, radius })
    }
}

impl<T: Real> From<SceneBounds<T>> for ContractParams<T> {
    fn from(b: SceneBounds<T>) -> Self {
        Self { center: b.center, radius: b.radius }
    }
}

/// Map a scene position into the open unit cube.
///
/// `u = (x - center) / radius` is kept as is inside the unit ball and pulled
/// to `(2 - 1/|u|) u/|u|` outside it; the result `v` with `|v| < 2` is
/// shifted by `(v + 2) / 4`.
pub fn contract<T: Real>(x: [T; 3], params: &ContractParams<T>) -> [T; 3] {
    let mut u = [T::zero(); 3];
    for a in 0..3 {
        u[a] = (x[a] - params.center[a]) / params.radius;
    }
    // scaled norm so that very distant points do not overflow
    let big = u[0].abs().max(u[1].abs()).max(u[2].abs());
    let v = if big == T::zero() {
        u
    } else {
        let s = [u[0] / big, u[1] / big, u[2] / big];
        let norm = big * (s[0] * s[0] + s[1] * s[1] + s[2] * s[2]).sqrt();
        if norm <= T::one() {
            u
        } else {
            // largest magnitude whose image stays below 1 after (v + 2) / 4
            let cap = T::lit(2.0) - T::lit(2.0) * T::epsilon();
            let mag = (T::lit(2.0) - T::one() / norm).min(cap);
            let mut v = [T::zero(); 3];
            for a in 0..3 {
                v[a] = (mag * (u[a] / norm)).max(-cap).min(cap);
            }
            v
        }
    };
    let four = T::lit(4.0);
    let two = T::lit(2.0);
    [(v[0] + two) / four, (v[1] + two) / four, (v[2] + two) / four]
}

/// Plane coordinates for the xy, yz and xz planes.
pub fn project_to_planes<T: Real>(c: [T; 3]) -> [[T; 2]; 3] {
    [[c[0], c[1]], [c[1], c[2]], [c[0], c[2]]]
}

/// Three `R x R x C` feature planes stored contiguously as `[plane][i][j][c]`,
/// where `i` indexes the first plane coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct TriPlaneGrid<T> {
    pub resolution: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Real> TriPlaneGrid<T> {
    pub fn zeros(resolution: usize, channels: usize) -> Result<Self> {
        if resolution < 2 || channels < 1 {
            return Err(Error::validation(format!(
                "tri-plane needs R >= 2 and C >= 1, got R={resolution} C={channels}"
            )));
        }
        Ok(Self {
            resolution,
            channels,
            data: vec![T::zero(); PLANES * resolution * resolution * channels],
        })
    }

    /// I.i.d. uniform entries in `[-1e-2, 1e-2]`.
    pub fn random(resolution: usize, channels: usize, seed: u64) -> Result<Self> {
        let mut g = Self::zeros(resolution, channels)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in &mut g.data {
            *v = T::lit(rng.random_range(-INIT_NOISE..INIT_NOISE));
        }
        Ok(g)
    }

    pub fn plane_len(&self) -> usize {
        self.resolution * self.resolution * self.channels
    }

    pub fn plane(&self, p: usize) -> &[T] {
        let n = self.plane_len();
        &self.data[p * n..(p + 1) * n]
    }

    pub fn plane_mut(&mut self, p: usize) -> &mut [T] {
        let n = self.plane_len();
        &mut self.data[p * n..(p + 1) * n]
    }

    /// Flat index of channel `c` at node `(i, j)` of plane `p`.
    pub fn index(&self, p: usize, i: usize, j: usize, c: usize) -> usize {
        ((p * self.resolution + i) * self.resolution + j) * self.channels + c
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.resolution == other.resolution
            && self.channels == other.channels
            && self.data.len() == other.data.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 2 || self.channels < 1 {
            return Err(Error::validation("tri-plane needs R >= 2 and C >= 1"));
        }
        if self.data.len() != PLANES * self.plane_len() {
            return Err(Error::validation("tri-plane data length does not match R and C"));
        }
        if !self.data.iter().all(|v| v.is_finite()) {
            return Err(Error::validation("tri-plane contains non-finite entries"));
        }
        Ok(())
    }

    /// Output width of [`sample_triplane`], `3C`.
    pub fn feature_dim(&self) -> usize {
        PLANES * self.channels
    }
}

/// Precomputed bilinear stencil of one point: for each plane, the node index
/// of the lower corner and the four corner weights in the order
/// `(i, j), (i, j+1), (i+1, j), (i+1, j+1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleStencil<T> {
    pub base: [usize; PLANES],
    pub weights: [[T; 4]; PLANES],
}

impl<T: Real> SampleStencil<T> {
    /// Stencil for a point already in the unit cube.
    pub fn from_cube(c: [T; 3], resolution: usize) -> Self {
        let planes = project_to_planes(c);
        let scale = T::lit((resolution - 1) as f64);
        let last_cell = resolution - 2;
        let mut base = [0usize; PLANES];
        let mut weights = [[T::zero(); 4]; PLANES];
        for (p, pc) in planes.iter().enumerate() {
            let mut idx = [0usize; 2];
            let mut frac = [T::zero(); 2];
            for a in 0..2 {
                let g = pc[a].max(T::zero()).min(T::one()) * scale;
                let cell = g.floor().to_usize().unwrap_or(0).min(last_cell);
                idx[a] = cell;
                frac[a] = g - T::lit(cell as f64);
            }
            let (fx, fy) = (frac[0], frac[1]);
            base[p] = (p * resolution + idx[0]) * resolution + idx[1];
            weights[p] = [
                (T::one() - fx) * (T::one() - fy),
                (T::one() - fx) * fy,
                fx * (T::one() - fy),
                fx * fy,
            ];
        }
        Self { base, weights }
    }

    pub fn new(x: [T; 3], params: &ContractParams<T>, resolution: usize) -> Self {
        Self::from_cube(contract(x, params), resolution)
    }

    /// Node indices of the four corners on plane `p`.
    #[inline]
    pub fn corners(&self, p: usize, resolution: usize) -> [usize; 4] {
        let b = self.base[p];
        [b, b + 1, b + resolution, b + resolution + 1]
    }

    /// Write the `3C` sampled features into `out`.
    pub fn sample_into(&self, planes: &[T], resolution: usize, channels: usize, out: &mut [T]) {
        debug_assert_eq!(out.len(), PLANES * channels);
        for p in 0..PLANES {
            let dst = &mut out[p * channels..(p + 1) * channels];
            dst.iter_mut().for_each(|v| *v = T::zero());
            for (node, &w) in self.corners(p, resolution).iter().zip(&self.weights[p]) {
                let src = &planes[node * channels..(node + 1) * channels];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
    }

    /// Scatter `upstream` (length `3C`) back onto the plane entries.
    pub fn accumulate_grad(&self, upstream: &[T], resolution: usize, channels: usize, grad: &mut [T]) {
        for p in 0..PLANES {
            let up = &upstream[p * channels..(p + 1) * channels];
            for (node, &w) in self.corners(p, resolution).iter().zip(&self.weights[p]) {
                let dst = &mut grad[node * channels..(node + 1) * channels];
                for (d, &u) in dst.iter_mut().zip(up) {
                    *d += w * u;
                }
            }
        }
    }
}

/// Bilinear tri-plane features at a scene position, `3C` values in plane order xy, yz, xz.
pub fn sample_triplane<T: Real>(grid: &TriPlaneGrid<T>, x: [T; 3], params: &ContractParams<T>) -> Vec<T> {
    let st = SampleStencil::new(x, params, grid.resolution);
    let mut out = vec![T::zero(); grid.feature_dim()];
    st.sample_into(&grid.data, grid.resolution, grid.channels, &mut out);
    out
}

/// Gradient of `<upstream, sample_triplane(grid, x)>` with respect to the grid,
/// as `(flat index, value)` pairs over the touched nodes (at most 12 nodes).
pub fn sample_triplane_grad<T: Real>(
    grid: &TriPlaneGrid<T>,
    x: [T; 3],
    params: &ContractParams<T>,
    upstream: &[T],
) -> Vec<(usize, T)> {
    assert_eq!(upstream.len(), grid.feature_dim(), "upstream must have 3C entries");
    let st = SampleStencil::new(x, params, grid.resolution);
    let c = grid.channels;
    let mut out: Vec<(usize, T)> = Vec::with_capacity(12 * c);
    for p in 0..PLANES {
        for (node, &w) in st.corners(p, grid.resolution).iter().zip(&st.weights[p]) {
            for ch in 0..c {
                let idx = node * c + ch;
                let g = w * upstream[p * c + ch];
                // corners coincide when a weight is exactly zero on a clamped edge
                match out.iter_mut().find(|(i, _)| *i == idx) {
                    Some(e) => e.1 += g,
                    None => out.push((idx, g)),
                }
            }
        }
    }
    out.sort_by_key(|e| e.0);
    out
}
