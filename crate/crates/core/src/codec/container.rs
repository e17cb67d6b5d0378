//! Compressed scene container.
//!
//! ```text
//! preamble  "TCGS" | version u32 | header_len u32 | header_crc u32
//! header    n_original u64 | n u64 | k u32 | K u32 | R u32 | C u32 | H u32 | flags u32
//!           q_feature f32 | q_scaling f32 | q_offsets f32 | reserved u32
//!           center 3 x f64 | radius f64
//!           section_count u32 | reserved u32
//!           section_count x (offset u64 | len u64 | crc32 u32 | reserved u32)
//!           [anchor survivor bitmap, ceil(n_original / 8) bytes]   if flags & 1
//!           [offset survivor bitmap, ceil(n k / 8) bytes]          if flags & 2
//! sections  positions | planes | model | feature | scaling | offsets
//! ```
//!
//! Integers are little-endian, each section starts on an 8-byte boundary and
//! offsets are absolute. Bitmaps are LSB-first within each byte.

use crate::bytes::{ByteReader, ByteWriter};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TCGS";
pub const VERSION: u32 = 1;
pub const PREAMBLE_BYTES: usize = 16;
pub const ALIGN: usize = 8;
const FLAG_ANCHOR_MASK: u32 = 1;
const FLAG_OFFSET_MASK: u32 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SectionKind {
    Positions,
    Planes,
    Model,
    Feature,
    Scaling,
    Offsets,
}

impl SectionKind {
    pub const ALL: [SectionKind; 6] = [
        SectionKind::Positions,
        SectionKind::Planes,
        SectionKind::Model,
        SectionKind::Feature,
        SectionKind::Scaling,
        SectionKind::Offsets,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SectionKind::Positions => "positions",
            SectionKind::Planes => "planes",
            SectionKind::Model => "model",
            SectionKind::Feature => "feature",
            SectionKind::Scaling => "scaling",
            SectionKind::Offsets => "offsets",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContainerHeader {
    pub n_original: u64,
    pub n: u64,
    pub k: u32,
    pub neighbors: u32,
    pub resolution: u32,
    pub channels: u32,
    pub hidden: u32,
    pub steps: [f32; 3],
    pub center: [f64; 3],
    pub radius: f64,
    /// Survivors among the original anchors, when any were pruned.
    pub anchor_mask: Option<Vec<bool>>,
    /// Kept offset slots of the surviving anchors, when any were pruned.
    pub offset_mask: Option<Vec<bool>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SectionEntry {
    pub offset: u64,
    pub len: u64,
    pub crc: u32,
}

fn write_bitmap(w: &mut ByteWriter, bits: &[bool]) {
    for chunk in bits.chunks(8) {
        let mut b = 0u8;
        for (i, &v) in chunk.iter().enumerate() {
            b |= (v as u8) << i;
        }
        w.bytes(&[b]);
    }
}

fn read_bitmap(r: &mut ByteReader, n: usize) -> Result<Vec<bool>> {
    let raw = r.take(n.div_ceil(8))?;
    let bits: Vec<bool> = (0..n).map(|i| raw[i / 8] >> (i % 8) & 1 == 1).collect();
    if n % 8 != 0 && raw[n / 8] >> (n % 8) != 0 {
        return Err(Error::corruption("bitmap padding bits are set"));
    }
    Ok(bits)
}

impl ContainerHeader {
    fn body_len(&self) -> usize {
        let mut n = 56 + 32 + 8 + 24 * SectionKind::ALL.len();
        if let Some(m) = &self.anchor_mask {
            n += m.len().div_ceil(8);
        }
        if let Some(m) = &self.offset_mask {
            n += m.len().div_ceil(8);
        }
        n
    }

    fn write_body(&self, w: &mut ByteWriter, table: &[SectionEntry]) {
        let flags = self.anchor_mask.is_some() as u32 * FLAG_ANCHOR_MASK
            | self.offset_mask.is_some() as u32 * FLAG_OFFSET_MASK;
        w.u64(self.n_original);
        w.u64(self.n);
        for v in [self.k, self.neighbors, self.resolution, self.channels, self.hidden, flags] {
            w.u32(v);
        }
        for q in self.steps {
            w.f32(q);
        }
        w.u32(0);
        for c in self.center {
            w.f64(c);
        }
        w.f64(self.radius);
        w.u32(table.len() as u32);
        w.u32(0);
        for e in table {
            w.u64(e.offset);
            w.u64(e.len);
            w.u32(e.crc);
            w.u32(0);
        }
        if let Some(m) = &self.anchor_mask {
            write_bitmap(w, m);
        }
        if let Some(m) = &self.offset_mask {
            write_bitmap(w, m);
        }
    }

    fn validate(&self) -> Result<()> {
        let corrupt = |m: &str| Err(Error::corruption(m.to_string()));
        if self.n == 0 || self.n > self.n_original || self.k == 0 {
            return corrupt("header anchor counts are inconsistent");
        }
        if self.channels == 0 || self.hidden == 0 || self.resolution < 8 || self.resolution % 8 != 0 {
            return corrupt("header network shape is invalid");
        }
        if self.resolution > 1 << 14 || self.channels > 1 << 12 || self.hidden > 1 << 16 || self.k > 1 << 10 || self.neighbors > 1 << 10 {
            return corrupt("header network shape is implausibly large");
        }
        if !self.steps.iter().all(|&q| q > 0.0 && q.is_finite()) {
            return corrupt("quantization steps must be positive");
        }
        if !self.center.iter().all(|c| c.is_finite()) || !(self.radius > 0.0 && self.radius.is_finite()) {
            return corrupt("contract frame is invalid");
        }
        match &self.anchor_mask {
            Some(m) if m.iter().filter(|&&b| b).count() as u64 != self.n => {
                return corrupt("anchor bitmap does not match the anchor count")
            }
            None if self.n != self.n_original => return corrupt("pruned anchors without a bitmap"),
            _ => {}
        }
        Ok(())
    }
}

/// Serialize a container from its header and the six section payloads.
pub fn write_container(header: &ContainerHeader, sections: &[Vec<u8>; 6]) -> Vec<u8> {
    let body_len = header.body_len();
    let mut offset = (PREAMBLE_BYTES + body_len).next_multiple_of(ALIGN);
    let mut table = Vec::with_capacity(sections.len());
    for s in sections {
        table.push(SectionEntry { offset: offset as u64, len: s.len() as u64, crc: crc32fast::hash(s) });
        offset = (offset + s.len()).next_multiple_of(ALIGN);
    }
    let mut body = ByteWriter::new();
    header.write_body(&mut body, &table);
    debug_assert_eq!(body.len(), body_len);
    let mut w = ByteWriter::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u32(body_len as u32);
    w.u32(crc32fast::hash(&body.buf));
    w.bytes(&body.buf);
    for (s, e) in sections.iter().zip(&table) {
        w.align(ALIGN);
        debug_assert_eq!(w.len() as u64, e.offset);
        w.bytes(s);
    }
    w.align(ALIGN);
    w.buf
}

/// Parsed container: header, section table and borrowed, checksum-verified payloads.
#[derive(Debug)]
pub struct Container<'a> {
    pub header: ContainerHeader,
    pub table: Vec<SectionEntry>,
    pub sections: [&'a [u8]; 6],
    pub header_bytes: usize,
}

impl<'a> Container<'a> {
    pub fn section(&self, kind: SectionKind) -> &'a [u8] {
        self.sections[kind as usize]
    }
}

fn check_padding(bytes: &[u8], from: usize, to: usize) -> Result<()> {
    let Some(pad) = bytes.get(from..to) else {
        return Err(Error::truncated("container padding"));
    };
    if pad.iter().any(|&b| b != 0) {
        return Err(Error::corruption("nonzero padding"));
    }
    Ok(())
}

pub fn read_container(bytes: &[u8]) -> Result<Container<'_>> {
    let mut r = ByteReader::new(bytes, "container");
    if r.take(4)? != MAGIC {
        return Err(Error::corruption("bad magic, not a compressed scene"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::corruption(format!("unsupported container version {version}")));
    }
    let body_len = r.u32()? as usize;
    let crc = r.u32()?;
    let body = r.take(body_len)?;
    if crc32fast::hash(body) != crc {
        return Err(Error::corruption("header checksum mismatch"));
    }
    let mut h = ByteReader::new(body, "container header");
    let n_original = h.u64()?;
    let n = h.u64()?;
    let k = h.u32()?;
    let neighbors = h.u32()?;
    let resolution = h.u32()?;
    let channels = h.u32()?;
    let hidden = h.u32()?;
    let flags = h.u32()?;
    let steps = [h.f32()?, h.f32()?, h.f32()?];
    h.u32()?;
    let center = [h.f64()?, h.f64()?, h.f64()?];
    let radius = h.f64()?;
    let count = h.u32()? as usize;
    h.u32()?;
    if count != SectionKind::ALL.len() {
        return Err(Error::corruption(format!("expected 6 sections, header lists {count}")));
    }
    if flags & !(FLAG_ANCHOR_MASK | FLAG_OFFSET_MASK) != 0 {
        return Err(Error::corruption("unknown header flags"));
    }
    let mut table = Vec::with_capacity(count);
    for _ in 0..count {
        let offset = h.u64()?;
        let len = h.u64()?;
        let crc = h.u32()?;
        h.u32()?;
        table.push(SectionEntry { offset, len, crc });
    }
    let n_orig_usize = usize::try_from(n_original).map_err(|_| Error::corruption("anchor count overflows"))?;
    let anchor_mask = if flags & FLAG_ANCHOR_MASK != 0 { Some(read_bitmap(&mut h, n_orig_usize)?) } else { None };
    let offset_mask = if flags & FLAG_OFFSET_MASK != 0 {
        let slots = (n as usize)
            .checked_mul(k as usize)
            .filter(|&s| s.div_ceil(8) <= h.remaining())
            .ok_or_else(|| Error::corruption("offset bitmap does not fit the header"))?;
        Some(read_bitmap(&mut h, slots)?)
    } else {
        None
    };
    if h.remaining() != 0 {
        return Err(Error::corruption("trailing bytes in header"));
    }
    let header = ContainerHeader {
        n_original,
        n,
        k,
        neighbors,
        resolution,
        channels,
        hidden,
        steps,
        center,
        radius,
        anchor_mask,
        offset_mask,
    };
    header.validate()?;
    // the layout is canonical: sections in order, zero padding, nothing after
    let mut sections: [&[u8]; 6] = [&[]; 6];
    let mut expected = (PREAMBLE_BYTES + body_len).next_multiple_of(ALIGN);
    let mut cursor = PREAMBLE_BYTES + body_len;
    for (i, (e, kind)) in table.iter().zip(SectionKind::ALL).enumerate() {
        if e.offset != expected as u64 {
            return Err(Error::corruption(format!("{} section is misplaced", kind.name())));
        }
        let len = usize::try_from(e.len).map_err(|_| Error::corruption("section length overflows"))?;
        let end = expected.checked_add(len).ok_or_else(|| Error::corruption("section bounds overflow"))?;
        check_padding(bytes, cursor, expected)?;
        let Some(s) = bytes.get(expected..end) else {
            return Err(Error::truncated(kind.name()));
        };
        if crc32fast::hash(s) != e.crc {
            return Err(Error::corruption(format!("{} section checksum mismatch", kind.name())));
        }
        sections[i] = s;
        cursor = end;
        expected = end.next_multiple_of(ALIGN);
    }
    check_padding(bytes, cursor, expected)?;
    if bytes.len() != expected {
        return Err(Error::corruption("trailing bytes after the last section"));
    }
    Ok(Container { header, table, sections, header_bytes: PREAMBLE_BYTES + body_len })
}
