use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};

use anchor_codec::anchor::{load_anchor_cloud, save_anchor_cloud, synth_correlated_cloud, synth_iid_cloud, synth_masking_cloud};
use anchor_codec::codec::scene::POSITION_LEVELS;
use anchor_codec::codec::{decompress_scene, CodecStats, SectionKind};
use anchor_codec::masking::apply_masks;
use anchor_codec::quant::{quantize_eval, QuantConfig};
use anchor_codec::train::{compress_scene, estimate_bits, fit_with, load_checkpoint, save_checkpoint, Phase, StepReport, TrainConfig};
use anchor_codec::wavelet::{lambda_schedule, wavelet_terms, Image, WaveletSchedule, DEFAULT_LEVELS};
use anchor_codec::{AnchorCloud, AttributeGroup, Error};

use crate::{exit, Cli, Command, ConfigArgs, DecodeArgs, EncodeArgs, StatsArgs, SynthArgs, SynthKind, TrainArgs, VerifyArgs, WaveletArgs};

pub fn run(cli: &Cli) -> Result<u8> {
    match &cli.command {
        Command::Train(a) => train(a, cli.deterministic),
        Command::Encode(a) => encode(a),
        Command::Decode(a) => decode(a),
        Command::Verify(a) => verify(a),
        Command::Stats(a) => stats(a),
        Command::Wavelet(a) => wavelet(a),
        Command::Synth(a) => synth(a),
    }
}

fn resolve_config(a: &ConfigArgs, deterministic: bool) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(p) = &a.config {
        let text = fs::read_to_string(p).map_err(Error::from).with_context(|| format!("reading {}", p.display()))?;
        cfg.apply_text(&text)?;
    }
    for kv in &a.overrides {
        let Some((k, v)) = kv.split_once('=') else {
            return Err(Error::validation(format!("--set expects KEY=VALUE, got {kv:?}")).into());
        };
        cfg.set(k.trim(), v)?;
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if deterministic {
        cfg.reproducible = true;
    }
    Ok(cfg)
}

fn load_cloud(p: &Path) -> Result<AnchorCloud<f64>> {
    load_anchor_cloud(p).with_context(|| format!("reading {}", p.display()))
}

#[derive(Default)]
struct PhaseRow {
    steps: u64,
    first: f64,
    last: f64,
    fidelity: f64,
    bits: f64,
}

fn train(a: &TrainArgs, deterministic: bool) -> Result<u8> {
    let cfg = resolve_config(&a.config, deterministic)?;
    if a.config.show_config {
        print!("{}", cfg.to_text());
        return Ok(exit::OK);
    }
    cfg.validate()?;
    let (input, output) = (a.input.as_deref().expect("required by clap"), a.output.as_deref().expect("required by clap"));
    let cloud = load_cloud(input)?;
    let n = cloud.len();
    let mut rows = [PhaseRow::default(), PhaseRow::default()];
    let state = fit_with(&cloud, &cfg, |r: &StepReport| {
        let row = &mut rows[(r.phase == Phase::Main) as usize];
        if row.steps == 0 {
            row.first = r.loss;
        }
        row.steps += 1;
        row.last = r.loss;
        row.fidelity = r.parts.fidelity;
        row.bits = r.parts.entropy_bits / n as f64;
    })?;
    println!("{:<8} {:>7} {:>12} {:>12} {:>10} {:>12}", "phase", "steps", "first_loss", "last_loss", "fidelity", "bits/anchor");
    for (phase, row) in [Phase::Warmup, Phase::Main].iter().zip(&rows) {
        if row.steps > 0 {
            println!(
                "{:<8} {:>7} {:>12.6} {:>12.6} {:>10.4} {:>12.3}",
                phase.name(),
                row.steps,
                row.first,
                row.last,
                row.fidelity,
                row.bits
            );
        }
    }
    let bits = estimate_bits(&cloud, &state)?;
    let kept = state.hard_masks().0.iter().filter(|&&b| b).count();
    println!(
        "estimated attribute bits per anchor: {:.3} ({kept} of {n} anchors kept)",
        bits.iter().sum::<f64>() / kept.max(1) as f64
    );
    save_checkpoint(&state, output).with_context(|| format!("writing {}", output.display()))?;
    Ok(exit::OK)
}

fn encode(a: &EncodeArgs) -> Result<u8> {
    let cloud = load_cloud(&a.cloud)?;
    let state = load_checkpoint(&a.checkpoint).with_context(|| format!("reading {}", a.checkpoint.display()))?;
    let c = compress_scene(&cloud, &state)?;
    fs::write(&a.output, &c.bytes).map_err(Error::from).with_context(|| format!("writing {}", a.output.display()))?;
    print!("{}", size_table(&c.stats));
    Ok(exit::OK)
}

fn size_table(s: &CodecStats) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "anchors: {} coded of {}, k = {}", s.n, s.n_original, s.k);
    let _ = writeln!(out, "{:<10} {:>12}", "header", s.header_bytes);
    for (kind, b) in SectionKind::ALL.iter().zip(s.section_bytes) {
        let _ = writeln!(out, "{:<10} {:>12}", kind.name(), b);
    }
    let _ = writeln!(out, "{:<10} {:>12}", "total", s.total_bytes);
    let _ = writeln!(out, "bits per anchor: {:.3}", s.bits_per_anchor());
    out
}

fn decode(a: &DecodeArgs) -> Result<u8> {
    let bytes = fs::read(&a.input).map_err(Error::from).with_context(|| format!("reading {}", a.input.display()))?;
    let d = decompress_scene(&bytes)?;
    save_anchor_cloud(&d.cloud, &a.output).with_context(|| format!("writing {}", a.output.display()))?;
    println!("decoded {} anchors ({} bytes in)", d.cloud.len(), bytes.len());
    Ok(exit::OK)
}

/// Largest deviations found by `verify`.
#[derive(Default)]
struct Deviation {
    attribute: [f64; 3],
    mismatches: [usize; 3],
    position: f64,
    position_limit: f64,
}

fn verify(a: &VerifyArgs) -> Result<u8> {
    let original = load_cloud(&a.original)?;
    let decoded = load_cloud(&a.decoded)?;
    let (quant, expected) = match &a.container {
        Some(p) => {
            let bytes = fs::read(p).map_err(Error::from).with_context(|| format!("reading {}", p.display()))?;
            let h = decompress_scene(&bytes)?.header;
            let quant = QuantConfig::new(h.steps.map(f64::from))?;
            let n = original.len();
            if h.n_original as usize != n || h.k as usize != original.k {
                return Err(Error::validation(format!(
                    "container was encoded from {} anchors with k={}, original has {n} with k={}",
                    h.n_original, h.k, original.k
                ))
                .into());
            }
            let am = h.anchor_mask.unwrap_or_else(|| vec![true; n]);
            let om = match h.offset_mask {
                // the container stores offset slots of survivors only
                Some(m) => {
                    let mut full = vec![false; n * original.k];
                    let survivors = am.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i);
                    for (dst, src) in survivors.enumerate() {
                        full[src * original.k..(src + 1) * original.k].copy_from_slice(&m[dst * original.k..(dst + 1) * original.k]);
                    }
                    full
                }
                None => vec![true; n * original.k],
            };
            (quant, apply_masks(&original, &am, &om)?.cloud)
        }
        None => (resolve_config(&a.config, false)?.quant.as_stored(), original),
    };
    quant.validate()?;
    if decoded.len() != expected.len() || decoded.k != expected.k {
        return Err(Error::validation(format!(
            "decoded cloud has {} anchors with k={}, expected {} with k={}",
            decoded.len(),
            decoded.k,
            expected.len(),
            expected.k
        ))
        .into());
    }

    let mut dev = Deviation::default();
    for g in AttributeGroup::ALL {
        let q = quant.step(g);
        for (&x, &y) in expected.group(g).iter().zip(decoded.group(g)) {
            // the anchor file stores fp32
            let want = quantize_eval(x, q)?.1 as f32 as f64;
            let d = (want - y).abs();
            dev.attribute[g.index()] = dev.attribute[g.index()].max(d);
            if want != y {
                dev.mismatches[g.index()] += 1;
            }
        }
    }
    let mut position_ok = true;
    for axis in 0..3 {
        let lo = expected.positions.iter().map(|p| p[axis]).fold(f64::INFINITY, f64::min);
        let hi = expected.positions.iter().map(|p| p[axis]).fold(f64::NEG_INFINITY, f64::max);
        let cell = (hi - lo) / POSITION_LEVELS as f64;
        // decoded positions pass through fp32 once more in the anchor file
        let slack = 4.0 * f32::EPSILON as f64 * hi.abs().max(lo.abs());
        let limit = cell / 2.0 + slack;
        dev.position_limit = dev.position_limit.max(limit);
        for (p, r) in expected.positions.iter().zip(&decoded.positions) {
            let d = (p[axis] - r[axis]).abs();
            dev.position = dev.position.max(d);
            position_ok &= d <= limit;
        }
    }
    for g in AttributeGroup::ALL {
        println!(
            "{:<9} max deviation {:.3e}, {} mismatched",
            g.name(),
            dev.attribute[g.index()],
            dev.mismatches[g.index()]
        );
    }
    println!("positions max deviation {:.3e} (limit {:.3e})", dev.position, dev.position_limit);
    if dev.mismatches.iter().sum::<usize>() == 0 && position_ok {
        println!("verify: ok");
        Ok(exit::OK)
    } else {
        println!("verify: FAILED");
        Ok(exit::VERIFY_FAILED)
    }
}

fn stats(a: &StatsArgs) -> Result<u8> {
    let bytes = fs::read(&a.input).map_err(Error::from).with_context(|| format!("reading {}", a.input.display()))?;
    let s = decompress_scene(&bytes)?.stats;
    println!("anchors: {} coded of {}, k = {}", s.n, s.n_original, s.k);
    println!("{:<10} {:>12} {:>14} {:>14}", "section", "bytes", "estimate", "bound");
    let mut csv = String::from("section,bytes,estimated_bytes,bound_bytes\n");
    let mut within = true;
    for (kind, b) in SectionKind::ALL.iter().zip(s.section_bytes) {
        let group = AttributeGroup::ALL.iter().find(|g| g.name() == kind.name()).copied();
        match group {
            Some(g) => {
                let est = s.estimated_bits[g.index()] / 8.0;
                let bound = s.section_bound(g);
                within &= (b as f64) <= bound;
                println!("{:<10} {:>12} {:>14.1} {:>14.1}", kind.name(), b, est, bound);
                let _ = writeln!(csv, "{},{b},{est:.3},{bound:.3}", kind.name());
            }
            None => {
                println!("{:<10} {:>12} {:>14} {:>14}", kind.name(), b, "-", "-");
                let _ = writeln!(csv, "{},{b},,", kind.name());
            }
        }
    }
    println!("{:<10} {:>12}", "header", s.header_bytes);
    println!("{:<10} {:>12}", "total", s.total_bytes);
    println!("raw fp32 bytes: {}  compression ratio: {:.2}", s.raw_bytes(), s.compression_ratio());
    println!("bits per anchor: {:.3}", s.bits_per_anchor());
    println!(
        "attribute sections within estimate + 2% + 64 B: {}",
        if within { "yes" } else { "no" }
    );
    if let Some(p) = &a.csv {
        fs::write(p, csv).map_err(Error::from).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(exit::OK)
}

fn parse_shape(s: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<usize> = s
        .split('x')
        .map(|v| v.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::validation(format!("bad --shape {s:?}, expected HxWxC")))?;
    match parts[..] {
        [h, w, c] if h > 0 && w > 0 && c > 0 => Ok((h, w, c)),
        [h, w] if h > 0 && w > 0 => Ok((h, w, 1)),
        _ => Err(Error::validation(format!("bad --shape {s:?}, expected HxWxC")).into()),
    }
}

fn load_image(p: &Path, shape: Option<(usize, usize, usize)>) -> Result<Image<f64>> {
    if let Some((h, w, c)) = shape {
        let bytes = fs::read(p).map_err(Error::from).with_context(|| format!("reading {}", p.display()))?;
        if bytes.len() != h * w * c * 4 {
            return Err(Error::validation(format!(
                "{} has {} bytes, shape {h}x{w}x{c} needs {}",
                p.display(),
                bytes.len(),
                h * w * c * 4
            ))
            .into());
        }
        let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect();
        return Ok(Image::from_data(h, w, c, data)?);
    }
    if !p.exists() {
        return Err(Error::from(std::io::Error::new(std::io::ErrorKind::NotFound, format!("{} not found", p.display()))).into());
    }
    let img = image::open(p).map_err(|e| Error::validation(format!("{}: {e}", p.display())))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (c, data): (usize, Vec<f64>) = if img.color().channel_count() <= 2 {
        (1, img.to_luma32f().into_raw().into_iter().map(f64::from).collect())
    } else {
        (3, img.to_rgb32f().into_raw().into_iter().map(f64::from).collect())
    };
    Ok(Image::from_data(h, w, c, data)?)
}

fn parse_schedule(s: &str) -> Result<WaveletSchedule> {
    let v: Vec<&str> = s.split(',').map(str::trim).collect();
    let bad = || Error::validation(format!("bad --schedule {s:?}, expected l1_start,l1_end,l2_start,l2_end,total_steps"));
    if v.len() != 5 {
        return Err(bad().into());
    }
    let f = |x: &str| x.parse::<f64>().map_err(|_| bad());
    let sched = WaveletSchedule {
        lambda1_start: f(v[0])?,
        lambda1_end: f(v[1])?,
        lambda2_start: f(v[2])?,
        lambda2_end: f(v[3])?,
        total_steps: v[4].parse().map_err(|_| bad())?,
    };
    sched.validate()?;
    Ok(sched)
}

fn wavelet(a: &WaveletArgs) -> Result<u8> {
    let shape = a.shape.as_deref().map(parse_shape).transpose()?;
    let sched = a.schedule.as_deref().map(parse_schedule).transpose()?.unwrap_or_default();
    let mut x = load_image(&a.first, shape)?;
    let mut y = load_image(&a.second, shape)?;
    if !x.same_shape(&y) {
        return Err(Error::validation(format!(
            "images differ in shape: {}x{}x{} vs {}x{}x{}",
            x.height, x.width, x.channels, y.height, y.width, y.channels
        ))
        .into());
    }
    let m = 1 << DEFAULT_LEVELS;
    if x.height % m != 0 || x.width % m != 0 {
        let (h, w) = (x.height / m * m, x.width / m * m);
        if h == 0 || w == 0 {
            return Err(Error::validation(format!("images must be at least {m}x{m}")).into());
        }
        eprintln!("notice: cropping {}x{} to {h}x{w} (multiple of {m})", x.height, x.width);
        x = x.crop_to_multiple(m);
        y = y.crop_to_multiple(m);
    }
    let t = wavelet_terms(&x, &y)?;
    let (l1, l2) = lambda_schedule(a.step, &sched);
    println!("lambda1 {l1}");
    println!("lambda2 {l2}");
    println!("yl_term {:.9e}", t.low);
    println!("yh_term {:.9e}", t.high);
    println!("total {:.9e}", l1 * t.low + l2 * t.high);
    Ok(exit::OK)
}

fn synth(a: &SynthArgs) -> Result<u8> {
    let cloud = match a.kind {
        SynthKind::Correlated => synth_correlated_cloud(a.seed, a.n, a.corr_len)?,
        SynthKind::Iid => synth_iid_cloud(a.seed, a.n)?,
        SynthKind::Masking => {
            let (c, flags) = synth_masking_cloud(a.seed, a.n, a.corr_len, a.noise_fraction)?;
            println!("noise offset slots: {} of {}", flags.iter().filter(|&&f| f).count(), flags.len());
            c
        }
    };
    save_anchor_cloud(&cloud, &a.output).with_context(|| format!("writing {}", a.output.display()))?;
    println!("wrote {} anchors to {}", cloud.len(), a.output.display());
    Ok(exit::OK)
}
