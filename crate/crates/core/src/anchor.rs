//! Anchor-cloud data model, its binary file format and synthetic fixtures.
//!
//! An anchor carries a position, a 32-dimensional context feature, a
//! 3-dimensional scaling and `k` offsets of three components each. Files store
//! attributes as little-endian `f32`:
//!
//! ```text
//! "TCGA" | version u32 = 1 | N u64 | k u32 | reserved u32
//! N x [ position(3) feature(32) scaling(3) offsets(3k) ]
//! ```

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::bytes::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::scalar::Real;

pub const FEATURE_DIM: usize = 32;
pub const SCALING_DIM: usize = 3;
pub const DEFAULT_OFFSETS: usize = 4;

const MAGIC: &[u8; 4] = b"TCGA";
const VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 24;

/// Attribute groups coded by the context model, in coding order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttributeGroup {
    Feature,
    Scaling,
    Offsets,
}

impl AttributeGroup {
    pub const ALL: [AttributeGroup; 3] = [Self::Feature, Self::Scaling, Self::Offsets];

    /// Per-anchor dimensionality for `k` offsets.
    pub fn dim(self, k: usize) -> usize {
        match self {
            Self::Feature => FEATURE_DIM,
            Self::Scaling => SCALING_DIM,
            Self::Offsets => 3 * k,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Feature => "feature",
            Self::Scaling => "scaling",
            Self::Offsets => "offsets",
        }
    }
}

/// Coded attribute coefficients per anchor, `35 + 3k`; the raw record adds 3 position values.
pub fn coefficients_per_anchor(k: usize) -> usize {
    FEATURE_DIM + SCALING_DIM + 3 * k
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorCloud<T> {
    pub positions: Vec<[T; 3]>,
    /// Row-major `N x 32`.
    pub features: Vec<T>,
    /// Row-major `N x 3`.
    pub scalings: Vec<T>,
    /// Row-major `N x k x 3`.
    pub offsets: Vec<T>,
    pub k: usize,
}

impl<T: Real> AnchorCloud<T> {
    pub fn zeros(n: usize, k: usize) -> Self {
        Self {
            positions: vec![[T::zero(); 3]; n],
            features: vec![T::zero(); n * FEATURE_DIM],
            scalings: vec![T::zero(); n * SCALING_DIM],
            offsets: vec![T::zero(); n * k * 3],
            k,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn group(&self, g: AttributeGroup) -> &[T] {
        match g {
            AttributeGroup::Feature => &self.features,
            AttributeGroup::Scaling => &self.scalings,
            AttributeGroup::Offsets => &self.offsets,
        }
    }

    pub fn group_mut(&mut self, g: AttributeGroup) -> &mut [T] {
        match g {
            AttributeGroup::Feature => &mut self.features,
            AttributeGroup::Scaling => &mut self.scalings,
            AttributeGroup::Offsets => &mut self.offsets,
        }
    }

    /// Attributes of anchor `i` for group `g`.
    pub fn attr(&self, g: AttributeGroup, i: usize) -> &[T] {
        let d = g.dim(self.k);
        &self.group(g)[i * d..(i + 1) * d]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(Error::validation("anchor cloud is empty"));
        }
        if self.k == 0 {
            return Err(Error::validation("offsets-per-anchor k must be at least 1"));
        }
        for g in AttributeGroup::ALL {
            let want = n * g.dim(self.k);
            if self.group(g).len() != want {
                return Err(Error::validation(format!(
                    "{} array has {} values, expected {want}",
                    g.name(),
                    self.group(g).len()
                )));
            }
        }
        let finite = self.positions.iter().flatten().all(|v| v.is_finite())
            && AttributeGroup::ALL
                .iter()
                .all(|&g| self.group(g).iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::validation("anchor cloud contains non-finite values"));
        }
        Ok(())
    }

    pub fn translated(&self, t: [T; 3]) -> Self {
        let mut out = self.clone();
        for p in &mut out.positions {
            for a in 0..3 {
                p[a] += t[a];
            }
        }
        out
    }

    pub fn cast<U: Real>(&self) -> AnchorCloud<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::lit(x.as_f64())).collect::<Vec<_>>();
        AnchorCloud {
            positions: self
                .positions
                .iter()
                .map(|p| [U::lit(p[0].as_f64()), U::lit(p[1].as_f64()), U::lit(p[2].as_f64())])
                .collect(),
            features: conv(&self.features),
            scalings: conv(&self.scalings),
            offsets: conv(&self.offsets),
            k: self.k,
        }
    }

    /// Serialize to the binary anchor format.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let n = self.len();
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u64(n as u64);
        w.u32(self.k as u32);
        w.u32(0);
        let k3 = 3 * self.k;
        for i in 0..n {
            for v in self.positions[i] {
                w.f32(v.as_f64() as f32);
            }
            let rows = [
                &self.features[i * FEATURE_DIM..(i + 1) * FEATURE_DIM],
                &self.scalings[i * SCALING_DIM..(i + 1) * SCALING_DIM],
                &self.offsets[i * k3..(i + 1) * k3],
            ];
            for row in rows {
                for &v in row {
                    w.f32(v.as_f64() as f32);
                }
            }
        }
        Ok(w.buf)
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(data, "anchor cloud");
        if data.len() < HEADER_BYTES {
            return Err(Error::format("anchor file shorter than its header"));
        }
        if r.take(4)? != MAGIC {
            return Err(Error::format("bad magic, expected TCGA"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(format!("unsupported anchor file version {version}")));
        }
        let n = r.u64()?;
        let k = r.u32()? as usize;
        let _reserved = r.u32()?;
        if n == 0 || k == 0 {
            return Err(Error::format(format!("header declares N={n}, k={k}; both must be >= 1")));
        }
        let per = 3 + FEATURE_DIM + SCALING_DIM + 3 * k;
        let n = usize::try_from(n).map_err(|_| Error::format("N does not fit in memory"))?;
        let need = n
            .checked_mul(per * 4)
            .ok_or_else(|| Error::format("declared payload size overflows"))?;
        if r.remaining() < need {
            return Err(Error::truncated("anchor payload"));
        }
        let mut cloud = AnchorCloud::zeros(n, k);
        for i in 0..n {
            let row = r.f32_vec_as_f64(per)?;
            cloud.positions[i] = [T::lit(row[0]), T::lit(row[1]), T::lit(row[2])];
            let mut it = row[3..].iter().map(|&v| T::lit(v));
            for dst in cloud.features[i * FEATURE_DIM..(i + 1) * FEATURE_DIM].iter_mut() {
                *dst = it.next().unwrap();
            }
            for dst in cloud.scalings[i * SCALING_DIM..(i + 1) * SCALING_DIM].iter_mut() {
                *dst = it.next().unwrap();
            }
            for dst in cloud.offsets[i * 3 * k..(i + 1) * 3 * k].iter_mut() {
                *dst = it.next().unwrap();
            }
        }
        cloud.validate()?;
        Ok(cloud)
    }
}

pub fn load_anchor_cloud<T: Real>(path: impl AsRef<Path>) -> Result<AnchorCloud<T>> {
    let data = fs::read(path)?;
    AnchorCloud::from_bytes(&data)
}

pub fn save_anchor_cloud<T: Real>(cloud: &AnchorCloud<T>, path: impl AsRef<Path>) -> Result<()> {
    let bytes = cloud.to_bytes()?;
    fs::write(path, bytes)?;
    Ok(())
}

/// Normalization frame for the contract mapping.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneBounds<T> {
    pub center: [T; 3],
    pub radius: T,
}

/// Bounding-box midpoint, with radius `min(half diagonal, 3 x median distance)`.
pub fn scene_bounds<T: Real>(positions: &[[T; 3]]) -> SceneBounds<T> {
    assert!(!positions.is_empty(), "scene_bounds needs at least one anchor");
    let mut lo = positions[0];
    let mut hi = positions[0];
    for p in positions {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let two = T::lit(2.0);
    let center = [
        (lo[0] + hi[0]) / two,
        (lo[1] + hi[1]) / two,
        (lo[2] + hi[2]) / two,
    ];
    let half_diag = ((hi[0] - lo[0]).powi(2) + (hi[1] - lo[1]).powi(2) + (hi[2] - lo[2]).powi(2))
        .sqrt()
        / two;
    let mut dists: Vec<T> = positions
        .iter()
        .map(|p| {
            ((p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2) + (p[2] - center[2]).powi(2))
                .sqrt()
        })
        .collect();
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let m = dists.len();
    let median = if m % 2 == 1 {
        dists[m / 2]
    } else {
        (dists[m / 2 - 1] + dists[m / 2]) / two
    };
    let radius = half_diag
        .min(median * T::lit(3.0))
        .max(T::min_positive_value());
    SceneBounds { center, radius }
}

/// Amplitude and i.i.d. noise level of each attribute group in the synthetic fixtures.
#[derive(Clone, Copy, Debug)]
pub struct GroupScale {
    pub amplitude: f64,
    pub noise: f64,
}

pub const SYNTH_SCALES: [GroupScale; 3] = [
    GroupScale { amplitude: 0.5, noise: 0.02 },
    GroupScale { amplitude: 0.1, noise: 0.004 },
    GroupScale { amplitude: 0.1, noise: 0.004 },
];

const BASE_FIELDS: usize = 6;
const WAVES_PER_FIELD: usize = 4;

/// A smooth scalar field on R^3: a fixed number of random plane waves.
struct WaveField {
    waves: Vec<([f64; 3], f64)>,
}

impl WaveField {
    fn sample(rng: &mut ChaCha8Rng, corr_len: f64) -> Self {
        let waves = (0..WAVES_PER_FIELD)
            .map(|_| {
                let mut d = [0.0f64; 3];
                loop {
                    for v in d.iter_mut() {
                        *v = StandardNormal.sample(rng);
                    }
                    let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                    if norm > 1e-6 {
                        d.iter_mut().for_each(|v| *v /= norm);
                        break;
                    }
                }
                let wavelength = corr_len * rng.random_range(2.0..4.0);
                let k = 2.0 * PI / wavelength;
                let phase = rng.random_range(0.0..2.0 * PI);
                ([d[0] * k, d[1] * k, d[2] * k], phase)
            })
            .collect();
        Self { waves }
    }

    /// Unit variance over the random phases.
    fn eval(&self, x: [f64; 3]) -> f64 {
        let amp = (2.0 / WAVES_PER_FIELD as f64).sqrt();
        self.waves
            .iter()
            .map(|(w, phase)| amp * (w[0] * x[0] + w[1] * x[1] + w[2] * x[2] + phase).sin())
            .sum()
    }
}

fn check_synth_args(n: usize, corr_len: f64) -> Result<()> {
    if n == 0 {
        return Err(Error::validation("synthetic cloud needs n >= 1"));
    }
    if !(corr_len > 0.0) {
        return Err(Error::validation("corr_len must be positive"));
    }
    Ok(())
}

fn uniform_positions(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| {
            [
                rng.random_range(-1.0f32..1.0) as f64,
                rng.random_range(-1.0f32..1.0) as f64,
                rng.random_range(-1.0f32..1.0) as f64,
            ]
        })
        .collect()
}

/// Cloud whose attributes vary smoothly with position.
///
/// Every channel is a random unit-norm mixture of a few shared wave fields
/// (wavelengths in `[2, 4] x corr_len`), scaled per group, plus small i.i.d.
/// Gaussian noise. Values are rounded to `f32` so the cloud survives a
/// save/load round trip unchanged. Pure function of its arguments.
pub fn synth_correlated_cloud(seed: u64, n: usize, corr_len: f64) -> Result<AnchorCloud<f64>> {
    check_synth_args(n, corr_len)?;
    let k = DEFAULT_OFFSETS;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cloud = AnchorCloud::zeros(n, k);
    cloud.positions = uniform_positions(&mut rng, n);
    let fields: Vec<WaveField> = (0..BASE_FIELDS)
        .map(|_| WaveField::sample(&mut rng, corr_len))
        .collect();
    let base: Vec<[f64; BASE_FIELDS]> = cloud
        .positions
        .iter()
        .map(|&p| std::array::from_fn(|b| fields[b].eval(p)))
        .collect();

    for g in AttributeGroup::ALL {
        let d = g.dim(k);
        let scale = SYNTH_SCALES[g.index()];
        let mixing: Vec<[f64; BASE_FIELDS]> = (0..d)
            .map(|_| {
                let mut a: [f64; BASE_FIELDS] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
                let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                a.iter_mut().for_each(|v| *v /= norm);
                a
            })
            .collect();
        let noise = Normal::new(0.0, scale.noise).unwrap();
        let values = cloud.group_mut(g);
        for (i, b) in base.iter().enumerate() {
            for (j, mix) in mixing.iter().enumerate() {
                let smooth: f64 = mix.iter().zip(b).map(|(m, f)| m * f).sum();
                let v = scale.amplitude * smooth + noise.sample(&mut rng);
                values[i * d + j] = v as f32 as f64;
            }
        }
    }
    Ok(cloud)
}

/// Cloud with the same per-group marginal scales as [`synth_correlated_cloud`]
/// but attributes drawn independently of position.
pub fn synth_iid_cloud(seed: u64, n: usize) -> Result<AnchorCloud<f64>> {
    check_synth_args(n, 1.0)?;
    let k = DEFAULT_OFFSETS;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cloud = AnchorCloud::zeros(n, k);
    cloud.positions = uniform_positions(&mut rng, n);
    for g in AttributeGroup::ALL {
        let s = SYNTH_SCALES[g.index()];
        let dist = Normal::new(0.0, (s.amplitude * s.amplitude + s.noise * s.noise).sqrt()).unwrap();
        for v in cloud.group_mut(g) {
            *v = dist.sample(&mut rng) as f32 as f64;
        }
    }
    Ok(cloud)
}

/// Standard deviation of the pure-noise offsets in [`synth_masking_cloud`].
pub const NOISE_OFFSET_STD: f64 = 0.03;

/// Correlated cloud in which a fraction of the offset slots are replaced by
/// small zero-mean noise that carries no spatial structure.
///
/// Returns the cloud and a per-slot flag (`N x k`, row-major) marking the
/// noise slots.
pub fn synth_masking_cloud(
    seed: u64,
    n: usize,
    corr_len: f64,
    noise_fraction: f64,
) -> Result<(AnchorCloud<f64>, Vec<bool>)> {
    if !(0.0..=1.0).contains(&noise_fraction) {
        return Err(Error::validation("noise_fraction must lie in [0, 1]"));
    }
    let mut cloud = synth_correlated_cloud(seed, n, corr_len)?;
    let k = cloud.k;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d61_736b);
    let noise = Normal::new(0.0, NOISE_OFFSET_STD).unwrap();
    let mut flags = vec![false; n * k];
    for (slot, flag) in flags.iter_mut().enumerate() {
        if rng.random_bool(noise_fraction) {
            *flag = true;
            for c in 0..3 {
                cloud.offsets[slot * 3 + c] = noise.sample(&mut rng) as f32 as f64;
            }
        }
    }
    Ok((cloud, flags))
}
