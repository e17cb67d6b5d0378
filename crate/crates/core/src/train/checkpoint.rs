//! Training checkpoints.
//!
//! Layout, little-endian:
//!
//! ```text
//! "TCGK" | version u32 | payload length u64 | payload crc32 u32 | payload
//! payload: config text (u64 length + UTF-8) | step u64 | entropy_scale f64
//!          | contract center 3 x f64, radius f64 | N u64 | k u64
//!          | grid, autoencoder, model, anchor logits, offset logits as f64
//!          | mask threshold f64 | per optimizer: t u64, m, v as f64
//! ```
//!
//! Parameters are stored at full precision so a resumed run continues
//! bit-exactly. The encoder strips everything but the coded sections.

use std::path::Path;

use crate::bytes::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::masking::MaskParams;
use crate::train::{Adam, ParamGroup, TrainConfig, TrainState};
use crate::triplane::ContractParams;

pub const MAGIC: &[u8; 4] = b"TCGK";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 4 + 4 + 8 + 4;

pub fn write_checkpoint(state: &TrainState) -> Vec<u8> {
    let mut w = ByteWriter::new();
    let text = state.config.to_text();
    w.u64(text.len() as u64);
    w.bytes(text.as_bytes());
    w.u64(state.step);
    w.f64(state.entropy_scale);
    for c in state.contract.center {
        w.f64(c);
    }
    w.f64(state.contract.radius);
    let m = &state.params.masks;
    let n = m.anchor_logits.len();
    w.u64(n as u64);
    w.u64(state.params.model.offsets as u64);
    for g in ParamGroup::ALL {
        w.f64_slice(state.params.group(g));
    }
    w.f64(m.threshold);
    for o in &state.optimizers {
        w.u64(o.t);
        w.f64_slice(&o.m);
        w.f64_slice(&o.v);
    }
    let payload = w.buf;
    let mut out = Vec::with_capacity(PREAMBLE + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out.extend_from_slice(&payload);
    out
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    let mut r = ByteReader::new(bytes, "checkpoint");
    if r.take(4)? != MAGIC {
        return Err(Error::format("not a checkpoint file (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let len = usize::try_from(r.u64()?).map_err(|_| Error::format("checkpoint length overflows"))?;
    let crc = r.u32()?;
    let payload = r.take(len)?;
    if crc32fast::hash(payload) != crc {
        return Err(Error::corruption("checkpoint checksum mismatch"));
    }
    if r.remaining() != 0 {
        return Err(Error::corruption("trailing bytes after checkpoint payload"));
    }

    let mut r = ByteReader::new(payload, "checkpoint payload");
    let text_len = r.count(1)?;
    let text = std::str::from_utf8(r.take(text_len)?).map_err(|_| Error::corruption("checkpoint config is not UTF-8"))?;
    let config = TrainConfig::from_text(text).map_err(|e| Error::corruption(format!("checkpoint config: {e}")))?;
    let step = r.u64()?;
    let entropy_scale = r.f64()?;
    let center = [r.f64()?, r.f64()?, r.f64()?];
    let contract = ContractParams::new(center, r.f64()?).map_err(|e| Error::corruption(e.to_string()))?;
    let n = r.count(8)?;
    let k = r.count(0)?;
    if k == 0 || n == 0 {
        return Err(Error::corruption("checkpoint has an empty mask table"));
    }

    // Shapes follow from the config; build a template and fill it.
    let shape_cloud = crate::anchor::AnchorCloud::<f64>::zeros(n, k);
    let mut template = TrainState::new(&with_positions(shape_cloud), &config)
        .map_err(|e| Error::corruption(format!("checkpoint shapes: {e}")))?;
    for g in ParamGroup::ALL {
        let len = template.params.group(g).len();
        let v = r.f64_vec(len)?;
        template.params.group_mut(g).copy_from_slice(&v);
    }
    let threshold = r.f64()?;
    let mut optimizers = template.optimizers.clone();
    for o in optimizers.iter_mut() {
        let len = o.m.len();
        let t = r.u64()?;
        *o = Adam { m: r.f64_vec(len)?, v: r.f64_vec(len)?, t };
    }
    if r.remaining() != 0 {
        return Err(Error::corruption("checkpoint payload has trailing bytes"));
    }
    let masks = MaskParams { threshold, ..template.params.masks.clone() };
    masks.validate().map_err(|e| Error::corruption(e.to_string()))?;
    template.params.masks = masks;
    Ok(TrainState { config, contract, step, entropy_scale, optimizers, ..template })
}

/// A cloud whose positions are spread enough to pass validation; only its shape matters.
fn with_positions(mut c: crate::anchor::AnchorCloud<f64>) -> crate::anchor::AnchorCloud<f64> {
    for (i, p) in c.positions.iter_mut().enumerate() {
        *p = [i as f64, 0.0, 0.0];
    }
    c
}

pub fn save_checkpoint(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, write_checkpoint(state))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState> {
    read_checkpoint(&std::fs::read(path)?)
}
