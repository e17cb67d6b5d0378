//! Scene-level encode and decode.
//!
//! The encoder runs the decoder's reconstruction itself: it dequantizes the
//! stored positions, parses back the fp32 plane and model chunks, decodes the
//! planes and predicts every `(mu, sigma)` from those. Both sides therefore
//! build identical bin models from identical fp64 inputs.

use rayon::prelude::*;

use crate::anchor::{coefficients_per_anchor, AnchorCloud, AttributeGroup, HEADER_BYTES};
use crate::autoencoder::{decode_planes, encode_planes, read_plane_chunk, write_plane_chunk, PlaneAutoencoder};
use crate::bytes::{ByteReader, ByteWriter};
use crate::codec::container::{read_container, write_container, ContainerHeader, SectionKind};
use crate::codec::rangecoder::{RangeDecoder, RangeEncoder};
use crate::codec::symbols::BinModel;
use crate::error::{Error, Result};
use crate::knn::knn_indices;
use crate::masking::apply_masks;
use crate::model::{fill_context, sample_all, DistributionModel};
use crate::quant::{coeff_probability, quantize_eval, QuantConfig};
use crate::triplane::{contract, ContractParams, SampleStencil, TriPlaneGrid};

/// Position quantization levels per axis.
pub const POSITION_LEVELS: u32 = u16::MAX as u32;
/// Coefficients whose bin models are built together before coding.
const BATCH: usize = 4096;

/// Everything the encoder needs besides the cloud.
#[derive(Clone, Copy, Debug)]
pub struct EncoderInput<'a> {
    pub grid: &'a TriPlaneGrid<f64>,
    pub autoencoder: &'a PlaneAutoencoder<f64>,
    pub model: &'a DistributionModel<f64>,
    pub quant: QuantConfig,
    pub contract: ContractParams<f64>,
    /// Hard anchor and offset-slot masks over the full cloud.
    pub masks: Option<(&'a [bool], &'a [bool])>,
}

/// Size and rate accounting of one compressed scene.
#[derive(Clone, Debug, PartialEq)]
pub struct CodecStats {
    pub n_original: usize,
    /// Coded (surviving) anchors.
    pub n: usize,
    pub k: usize,
    pub total_bytes: usize,
    /// Preamble and header, including the survivor bitmaps.
    pub header_bytes: usize,
    /// Payload bytes per section in [`SectionKind::ALL`] order.
    pub section_bytes: [usize; 6],
    /// Coded attribute symbols per group.
    pub symbol_counts: [usize; 3],
    /// Symbols outside their bin window.
    pub escapes: [usize; 3],
    /// `sum -log2 p` under the continuous Gaussian bins, per group.
    pub estimated_bits: [f64; 3],
    /// Exact cost under the integer tables, per group.
    pub table_bits: [f64; 3],
}

impl CodecStats {
    pub fn bits_per_anchor(&self) -> f64 {
        self.total_bytes as f64 * 8.0 / self.n as f64
    }

    /// Bytes of the three attribute sections.
    pub fn attribute_bytes(&self) -> usize {
        self.section_bytes[3..].iter().sum()
    }

    pub fn attribute_bits_per_anchor(&self) -> f64 {
        self.attribute_bytes() as f64 * 8.0 / self.n as f64
    }

    pub fn estimated_attribute_bits(&self) -> f64 {
        self.estimated_bits.iter().sum()
    }

    /// Size of the uncompressed fp32 anchor file of the original cloud.
    pub fn raw_bytes(&self) -> usize {
        HEADER_BYTES + self.n_original * 4 * (3 + coefficients_per_anchor(self.k))
    }

    pub fn compression_ratio(&self) -> f64 {
        self.raw_bytes() as f64 / self.total_bytes as f64
    }

    /// Payload bound `estimate / 8 + 2% + 64` bytes for attribute group `g`.
    pub fn section_bound(&self, g: AttributeGroup) -> f64 {
        let est = self.estimated_bits[g.index()] / 8.0;
        est * 1.02 + 64.0
    }
}

#[derive(Clone, Debug)]
pub struct CompressedScene {
    pub bytes: Vec<u8>,
    pub stats: CodecStats,
    /// The cloud a decoder reconstructs: survivors only, dequantized.
    pub reconstruction: AnchorCloud<f64>,
}

#[derive(Clone, Debug)]
pub struct DecodedScene {
    pub cloud: AnchorCloud<f64>,
    pub stats: CodecStats,
    pub header: ContainerHeader,
}

/// Positions section: `min 3 x f64 | cell 3 x f64 | N x 3 u16`.
fn quantize_positions(positions: &[[f64; 3]]) -> (Vec<u8>, Vec<[f64; 3]>) {
    let mut lo = positions[0];
    let mut hi = positions[0];
    for p in positions {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let cell: [f64; 3] = std::array::from_fn(|a| (hi[a] - lo[a]) / POSITION_LEVELS as f64);
    let mut w = ByteWriter::new();
    w.f64_slice(&lo);
    w.f64_slice(&cell);
    let mut deq = Vec::with_capacity(positions.len());
    for p in positions {
        let mut d = [0.0; 3];
        for a in 0..3 {
            let q = if cell[a] > 0.0 {
                ((p[a] - lo[a]) / cell[a]).round().clamp(0.0, POSITION_LEVELS as f64) as u16
            } else {
                0
            };
            w.u16(q);
            d[a] = lo[a] + q as f64 * cell[a];
        }
        deq.push(d);
    }
    (w.buf, deq)
}

fn read_positions(bytes: &[u8], n: usize) -> Result<Vec<[f64; 3]>> {
    let mut r = ByteReader::new(bytes, "positions section");
    let lo = r.f64_vec(3)?;
    let cell = r.f64_vec(3)?;
    if !lo.iter().chain(&cell).all(|v| v.is_finite()) || cell.iter().any(|&c| c < 0.0) {
        return Err(Error::corruption("position frame is invalid"));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut d = [0.0; 3];
        for a in 0..3 {
            d[a] = lo[a] + r.u16()? as f64 * cell[a];
        }
        out.push(d);
    }
    if r.remaining() != 0 {
        return Err(Error::corruption("trailing bytes in positions section"));
    }
    Ok(out)
}

/// Per-anchor `(mu, sigma)`, `N x D` row-major, as seen by the decoder.
fn predict_all(
    positions: &[[f64; 3]],
    grid: &TriPlaneGrid<f64>,
    model: &DistributionModel<f64>,
    params: &ContractParams<f64>,
) -> (Vec<f64>, Vec<f64>) {
    let res = grid.resolution;
    let stencils: Vec<SampleStencil<f64>> = positions.iter().map(|&x| SampleStencil::new(x, params, res)).collect();
    let samples = sample_all(grid, &stencils);
    let neighbors = knn_indices(positions, model.neighbors);
    let d = model.coeff_count();
    let mut mu = vec![0.0; positions.len() * d];
    let mut sigma = vec![0.0; positions.len() * d];
    mu.par_chunks_mut(d)
        .zip(sigma.par_chunks_mut(d))
        .enumerate()
        .for_each_init(
            || (vec![0.0; model.input_dim()], model.activations()),
            |(ctx, act), (i, (m, s))| {
                let cube = contract(positions[i], params);
                fill_context(i, &samples, grid.feature_dim(), &neighbors[i], model.neighbors, cube, ctx);
                model.forward_into(ctx, act);
                m.copy_from_slice(&act.mu);
                s.copy_from_slice(&act.sigma);
            },
        );
    (mu, sigma)
}

/// Coded coefficients of group `g` in coding order: `(anchor, column in the prediction row, column in the group)`.
fn coded_slots(g: AttributeGroup, n: usize, k: usize, offset_mask: Option<&[bool]>) -> Vec<(usize, usize, usize)> {
    let d = g.dim(k);
    let start: usize = AttributeGroup::ALL[..g.index()].iter().map(|h| h.dim(k)).sum();
    let mut out = Vec::with_capacity(n * d);
    for i in 0..n {
        for j in 0..d {
            if g == AttributeGroup::Offsets {
                if let Some(m) = offset_mask {
                    if !m[i * k + j / 3] {
                        continue;
                    }
                }
            }
            out.push((i, start + j, j));
        }
    }
    out
}

struct GroupCoding {
    bytes: Vec<u8>,
    escapes: usize,
    estimated_bits: f64,
    table_bits: f64,
}

#[derive(Clone, Copy)]
struct Predictions<'a> {
    mu: &'a [f64],
    sigma: &'a [f64],
    width: usize,
}

impl Predictions<'_> {
    fn bin_models(&self, slots: &[(usize, usize, usize)], q: f64) -> Vec<BinModel> {
        slots
            .par_iter()
            .map(|&(i, c, _)| BinModel::gaussian(self.mu[i * self.width + c], self.sigma[i * self.width + c], q))
            .collect()
    }

    fn estimate(&self, slots: &[(usize, usize, usize)], symbols: &[i64], q: f64) -> f64 {
        slots
            .iter()
            .zip(symbols)
            .map(|(&(i, c, _), &s)| -coeff_probability(s, self.mu[i * self.width + c], self.sigma[i * self.width + c], q).log2())
            .sum()
    }
}

fn encode_group(symbols: &[i64], slots: &[(usize, usize, usize)], pred: Predictions, q: f64) -> GroupCoding {
    let mut enc = RangeEncoder::new();
    let mut hash = crc32fast::Hasher::new();
    let (mut escapes, mut table_bits) = (0, 0.0);
    for (sl, sy) in slots.chunks(BATCH).zip(symbols.chunks(BATCH)) {
        for (m, &s) in pred.bin_models(sl, q).iter().zip(sy) {
            m.hash_into(&mut hash);
            escapes += m.frequency(s).is_none() as usize;
            table_bits += m.cost_bits(s);
            m.encode(&mut enc, s);
        }
    }
    let stream = enc.finish();
    let mut w = ByteWriter::new();
    w.u64(symbols.len() as u64);
    w.u32(hash.finalize());
    w.u32(0);
    w.bytes(&stream);
    GroupCoding { bytes: w.buf, escapes, estimated_bits: pred.estimate(slots, symbols, q), table_bits }
}

fn decode_group(bytes: &[u8], slots: &[(usize, usize, usize)], pred: Predictions, q: f64, name: &str) -> Result<(Vec<i64>, GroupCoding)> {
    let mut r = ByteReader::new(bytes, "attribute section");
    let count = r.u64()?;
    if count != slots.len() as u64 {
        return Err(Error::corruption(format!("{name} section holds {count} symbols, expected {}", slots.len())));
    }
    let want_hash = r.u32()?;
    if r.u32()? != 0 {
        return Err(Error::corruption("reserved field is nonzero"));
    }
    let stream = r.take(r.remaining())?;
    let mut dec = RangeDecoder::new(stream)?;
    let mut hash = crc32fast::Hasher::new();
    let mut symbols = Vec::with_capacity(slots.len());
    let (mut escapes, mut table_bits) = (0, 0.0);
    for sl in slots.chunks(BATCH) {
        for m in pred.bin_models(sl, q) {
            m.hash_into(&mut hash);
            let s = m.decode(&mut dec)?;
            escapes += m.frequency(s).is_none() as usize;
            table_bits += m.cost_bits(s);
            symbols.push(s);
        }
    }
    dec.finish()?;
    if hash.finalize() != want_hash {
        return Err(Error::corruption(format!("{name} bin tables differ from the encoder's")));
    }
    let estimated_bits = pred.estimate(slots, &symbols, q);
    Ok((symbols, GroupCoding { bytes: Vec::new(), escapes, estimated_bits, table_bits }))
}

/// Encode `cloud` with frozen components.
pub fn compress_with(cloud: &AnchorCloud<f64>, input: &EncoderInput) -> Result<CompressedScene> {
    cloud.validate()?;
    let (n_original, k) = (cloud.len(), cloud.k);
    let model = input.model;
    if model.offsets != k {
        return Err(Error::validation(format!("model was built for k={}, cloud has k={k}", model.offsets)));
    }
    if model.channels != input.grid.channels || input.autoencoder.channels != input.grid.channels {
        return Err(Error::validation("grid, autoencoder and model disagree on the channel count"));
    }
    input.quant.validate()?;
    let quant = input.quant.as_stored();

    let (anchor_mask, pruned) = match input.masks {
        Some((am, om)) => {
            let p = apply_masks(cloud, am, om)?;
            let any_anchor = p.index_map.len() < n_original;
            let any_offset = p.offset_mask.iter().any(|&b| !b);
            (any_anchor.then(|| am.to_vec()), (p.cloud, any_offset.then_some(p.offset_mask)))
        }
        None => (None, (cloud.clone(), None)),
    };
    let (survivors, offset_mask) = pruned;
    let n = survivors.len();

    let (pos_bytes, positions) = quantize_positions(&survivors.positions);
    let latent = encode_planes(input.grid, input.autoencoder)?;
    let plane_bytes = write_plane_chunk(&latent, input.autoencoder);
    let (latent_rt, decoder) = read_plane_chunk(&plane_bytes)?;
    let grid = decode_planes(&latent_rt, &decoder)?;
    let model_bytes = model.to_chunk();
    let model_rt = DistributionModel::from_chunk(&model_bytes, model.neighbors, model.channels, model.hidden, k)?;

    let (mu, sigma) = predict_all(&positions, &grid, &model_rt, &input.contract);
    let pred = Predictions { mu: &mu, sigma: &sigma, width: model_rt.coeff_count() };

    let mut recon = AnchorCloud::zeros(n, k);
    recon.positions = positions;
    let mut groups = Vec::with_capacity(3);
    for g in AttributeGroup::ALL {
        let q = quant.step(g);
        let slots = coded_slots(g, n, k, offset_mask.as_deref());
        let d = g.dim(k);
        let values = survivors.group(g);
        let mut symbols = Vec::with_capacity(slots.len());
        let out = recon.group_mut(g);
        for &(i, _, j) in &slots {
            let (s, v) = quantize_eval(values[i * d + j], q)?;
            symbols.push(s);
            out[i * d + j] = v;
        }
        groups.push(encode_group(&symbols, &slots, pred, q));
    }

    let header = ContainerHeader {
        n_original: n_original as u64,
        n: n as u64,
        k: k as u32,
        neighbors: model.neighbors as u32,
        resolution: input.grid.resolution as u32,
        channels: input.grid.channels as u32,
        hidden: model.hidden as u32,
        steps: quant.steps.map(|q| q as f32),
        center: input.contract.center,
        radius: input.contract.radius,
        anchor_mask,
        offset_mask,
    };
    let [f, s, o]: [GroupCoding; 3] = groups.try_into().ok().expect("three groups");
    let stats_groups = [&f, &s, &o];
    let sections = [pos_bytes, plane_bytes, model_bytes, f.bytes.clone(), s.bytes.clone(), o.bytes.clone()];
    let bytes = write_container(&header, &sections);
    let stats = CodecStats {
        n_original,
        n,
        k,
        total_bytes: bytes.len(),
        header_bytes: bytes.len() - sections.iter().map(Vec::len).sum::<usize>(),
        section_bytes: std::array::from_fn(|i| sections[i].len()),
        symbol_counts: std::array::from_fn(|i| coded_slots(AttributeGroup::ALL[i], n, k, header.offset_mask.as_deref()).len()),
        escapes: stats_groups.map(|g| g.escapes),
        estimated_bits: stats_groups.map(|g| g.estimated_bits),
        table_bits: stats_groups.map(|g| g.table_bits),
    };
    Ok(CompressedScene { bytes, stats, reconstruction: recon })
}

/// Decode a container produced by [`compress_with`].
pub fn decompress_scene(bytes: &[u8]) -> Result<DecodedScene> {
    let c = read_container(bytes)?;
    let h = &c.header;
    let (n, k) = (h.n as usize, h.k as usize);
    if let Some(m) = &h.offset_mask {
        if m.len() != n * k {
            return Err(Error::corruption("offset bitmap does not match the anchor count"));
        }
    }
    let positions = read_positions(c.section(SectionKind::Positions), n)?;
    let (latent, decoder) = read_plane_chunk(c.section(SectionKind::Planes)).map_err(as_corruption)?;
    if decoder.resolution != h.resolution as usize || decoder.channels != h.channels as usize {
        return Err(Error::corruption("plane section shape disagrees with the header"));
    }
    let grid = decode_planes(&latent, &decoder)?;
    let model = DistributionModel::from_chunk(c.section(SectionKind::Model), h.neighbors as usize, h.channels as usize, h.hidden as usize, k)
        .map_err(as_corruption)?;
    let params = ContractParams::new(h.center, h.radius).map_err(as_corruption)?;
    let (mu, sigma) = predict_all(&positions, &grid, &model, &params);
    let pred = Predictions { mu: &mu, sigma: &sigma, width: model.coeff_count() };

    let mut cloud = AnchorCloud::zeros(n, k);
    cloud.positions = positions;
    let mut codings = Vec::with_capacity(3);
    let mut counts = [0; 3];
    for (gi, g) in AttributeGroup::ALL.into_iter().enumerate() {
        let q = h.steps[gi] as f64;
        let slots = coded_slots(g, n, k, h.offset_mask.as_deref());
        let kind = SectionKind::ALL[3 + gi];
        let (symbols, coding) = decode_group(c.section(kind), &slots, pred, q, g.name())?;
        let d = g.dim(k);
        let out = cloud.group_mut(g);
        for (&(i, _, j), &s) in slots.iter().zip(&symbols) {
            out[i * d + j] = s as f64 * q;
        }
        counts[gi] = slots.len();
        codings.push(coding);
    }
    let stats = CodecStats {
        n_original: h.n_original as usize,
        n,
        k,
        total_bytes: bytes.len(),
        header_bytes: bytes.len() - c.sections.iter().map(|s| s.len()).sum::<usize>(),
        section_bytes: c.sections.map(<[u8]>::len),
        symbol_counts: counts,
        escapes: std::array::from_fn(|i| codings[i].escapes),
        estimated_bits: std::array::from_fn(|i| codings[i].estimated_bits),
        table_bits: std::array::from_fn(|i| codings[i].table_bits),
    };
    Ok(DecodedScene { cloud, stats, header: c.header })
}

fn as_corruption(e: Error) -> Error {
    match e {
        Error::Io(_) | Error::Corruption(_) => e,
        other => Error::corruption(other.to_string()),
    }
}
