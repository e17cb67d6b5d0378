//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any failure.
//!
//! `cargo test --test acceptance -- AC3 AC9` runs a subset.

mod common;

use std::time::Instant;

use anchor_codec::anchor::{synth_correlated_cloud, synth_iid_cloud, synth_masking_cloud, AnchorCloud};
use anchor_codec::autoencoder::{decode_planes, encode_planes, tri_rec_loss};
use anchor_codec::codec::scene::POSITION_LEVELS;
use anchor_codec::codec::{compress_with, decompress_scene, CodecStats, CompressedScene, EncoderInput};
use anchor_codec::knn::{knn_brute_force, knn_indices};
use anchor_codec::masking::MaskParams;
use anchor_codec::quant::quantize_eval;
use anchor_codec::train::gradcheck::{check_objective, grad_check, sample_coords};
use anchor_codec::train::{
    compress_scene, estimate_bits, fit, global_gaussian_bits, MaskMode, StepOptions, TrainConfig, TrainState,
};
use anchor_codec::triplane::{contract, sample_triplane, sample_triplane_grad, ContractParams};
use anchor_codec::wavelet::{dwt2, idwt2, wavelet_loss, wavelet_terms, Image, WaveletSchedule};
use anchor_codec::{AttributeGroup, TriPlaneGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

/// Round-trip stats gathered along the way; the rate bound is checked on all of them.
#[derive(Default)]
struct Shared {
    fixtures: Vec<(String, CodecStats)>,
}

fn config(text: &str) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.apply_text(text).unwrap();
    c
}

fn encode_untrained(cloud: &AnchorCloud<f64>, state: &TrainState) -> CompressedScene {
    let p = &state.params;
    let input = EncoderInput {
        grid: &p.grid,
        autoencoder: &p.autoencoder,
        model: &p.model,
        quant: state.config.quant,
        contract: state.contract,
        masks: None,
    };
    compress_with(cloud, &input).unwrap()
}

/// Every attribute equals its quantized value and every position lies within half a cell.
fn exact_round_trip(original: &AnchorCloud<f64>, c: &CompressedScene, quant_steps: [f64; 3]) -> Result<(), String> {
    let d = decompress_scene(&c.bytes).map_err(|e| e.to_string())?;
    if d.cloud != c.reconstruction {
        return Err("decoder output differs from the encoder's reconstruction".into());
    }
    for g in AttributeGroup::ALL {
        let q = quant_steps[g.index()];
        for (i, (&x, &y)) in original.group(g).iter().zip(d.cloud.group(g)).enumerate() {
            let want = quantize_eval(x, q).unwrap().1;
            if want.to_bits() != y.to_bits() {
                return Err(format!("{} coefficient {i}: {y} != {want}", g.name()));
            }
        }
    }
    for axis in 0..3 {
        let lo = original.positions.iter().map(|p| p[axis]).fold(f64::INFINITY, f64::min);
        let hi = original.positions.iter().map(|p| p[axis]).fold(f64::NEG_INFINITY, f64::max);
        let cell = (hi - lo) / POSITION_LEVELS as f64;
        for (p, r) in original.positions.iter().zip(&d.cloud.positions) {
            if (p[axis] - r[axis]).abs() > cell / 2.0 + 1e-12 * hi.abs().max(lo.abs()) {
                return Err(format!("position off by {}", (p[axis] - r[axis]).abs()));
            }
        }
    }
    Ok(())
}

fn ac1(shared: &mut Shared) -> Outcome {
    let t0 = Instant::now();
    let cfg = config("resolution = 32\nchannels = 8\nhidden = 32");
    let mut failures = Vec::new();
    let mut count = 0;
    for n in [1, 1000, 10_000] {
        for seed in 0..5 {
            let cloud = synth_correlated_cloud(seed, n, 0.5).unwrap();
            let mut cfg = cfg.clone();
            cfg.seed = seed;
            let state = TrainState::new(&cloud, &cfg).unwrap();
            let c = encode_untrained(&cloud, &state);
            let steps = cfg.quant.as_stored();
            if let Err(e) = exact_round_trip(&cloud, &c, AttributeGroup::ALL.map(|g| steps.step(g))) {
                failures.push(format!("N={n} seed={seed}: {e}"));
            }
            shared.fixtures.push((format!("N={n} seed={seed}"), c.stats));
            count += 1;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = failures.is_empty() && secs < 60.0;
    let mut d = format!("{count} clouds (N in 1, 1000, 10000; k=4; 5 seeds) bit-exact, {secs:.1} s (limit 60 s)");
    if !failures.is_empty() {
        d = format!("{}; {}", d, failures.join("; "));
    }
    outcome(pass, d)
}

fn ac2(shared: &mut Shared) -> Outcome {
    if shared.fixtures.is_empty() {
        return outcome(false, "no round-trip fixtures were produced");
    }
    let mut worst = f64::NEG_INFINITY;
    let mut worst_at = String::new();
    let mut over = Vec::new();
    for (name, s) in &shared.fixtures {
        for g in AttributeGroup::ALL {
            let actual = s.section_bytes[3 + g.index()] as f64;
            let bound = s.section_bound(g);
            // margin relative to the plain estimate
            let excess = actual - s.estimated_bits[g.index()] / 8.0;
            if excess > worst {
                worst = excess;
                worst_at = format!("{name} {}", g.name());
            }
            if actual > bound {
                over.push(format!("{name} {}: {actual} > {bound:.1}", g.name()));
            }
        }
    }
    outcome(
        over.is_empty(),
        format!(
            "{} sections within estimate + 2% + 64 B; largest excess over the estimate {worst:.1} B ({worst_at}){}",
            shared.fixtures.len() * 3,
            if over.is_empty() { String::new() } else { format!("; over: {}", over.join("; ")) }
        ),
    )
}

/// Attribute codelength per anchor before and after training, and the context-free baseline.
fn context_gain(cloud: &AnchorCloud<f64>, cfg: &TrainConfig) -> (f64, f64, f64) {
    let n = cloud.len() as f64;
    let per_anchor = |b: [f64; 3]| b.iter().sum::<f64>() / n;
    let base = per_anchor(global_gaussian_bits(cloud, &cfg.quant).unwrap());
    let before = per_anchor(estimate_bits(cloud, &TrainState::new(cloud, cfg).unwrap()).unwrap());
    let after = per_anchor(estimate_bits(cloud, &fit(cloud, cfg).unwrap()).unwrap());
    (base, before, after)
}

fn ac3(_: &mut Shared) -> Outcome {
    let t0 = Instant::now();
    // no masking, so every codelength covers the same symbols
    let cfg = config("resolution = 64\nchannels = 8\nhidden = 32\nsteps = 600\nmasking = false");
    let (cb, c0, c1) = context_gain(&synth_correlated_cloud(0, 5000, 0.5).unwrap(), &cfg);
    let (ib, i0, i1) = context_gain(&synth_iid_cloud(0, 5000).unwrap(), &cfg);
    let secs = t0.elapsed().as_secs_f64();
    let (gc, gi) = (1.0 - c1 / cb, 1.0 - i1 / ib);
    outcome(
        gc >= 0.20 && gi < 0.05 && secs < 600.0 && c1 <= c0 && i1 <= i0,
        format!(
            "correlated {c1:.2} vs baseline {cb:.2} bits/anchor, gain {:.1}% (need >= 20%); iid {i1:.2} vs {ib:.2}, gain {:.1}% (need < 5%); \
             untrained {c0:.2} / {i0:.2}; {secs:.0} s (limit 600 s)",
            100.0 * gc,
            100.0 * gi
        ),
    )
}

fn ac4(_: &mut Shared) -> Outcome {
    let f = common::fixture();
    let mut worst_full = 0.0f64;
    let mut worst_group = String::new();
    for use_autoencoder in [false, true] {
        let opts = StepOptions { noise: Some(&f.noise), use_autoencoder, masks: MaskMode::Soft, batch: None, reproducible: true };
        for (g, rep) in check_objective(&f.params, &f.weights, &f.cloud, &f.frame, &opts, 200, 1e-5, 17).unwrap() {
            if rep.max_rel_err > worst_full || worst_group.is_empty() {
                worst_full = worst_full.max(rep.max_rel_err);
                worst_group = g.name().to_string();
            }
        }
    }

    // sampling in isolation: <upstream, sample(grid, x)> is linear in the grid
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let grid = TriPlaneGrid::<f64>::random(8, 2, 4).unwrap();
    let cp = ContractParams::new([0.0; 3], 1.0).unwrap();
    let mut worst_sampling = 0.0f64;
    for _ in 0..20 {
        let x = [0, 1, 2].map(|_| rng.random_range(-3.0..3.0));
        let up: Vec<f64> = (0..grid.feature_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut analytic = vec![0.0; grid.data.len()];
        for (i, v) in sample_triplane_grad(&grid, x, &cp, &up) {
            analytic[i] = v;
        }
        let mut trial = grid.clone();
        let coords: Vec<usize> = (0..grid.data.len()).collect();
        let rep = grad_check(
            |theta| {
                trial.data.copy_from_slice(theta);
                sample_triplane(&trial, x, &cp).iter().zip(&up).map(|(a, b)| a * b).sum()
            },
            &grid.data,
            &analytic,
            &coords,
            1e-3,
        );
        worst_sampling = worst_sampling.max(rep.max_rel_err);
    }

    // mask loss in isolation
    let mut masks = MaskParams::<f64>::new(50, 4);
    for l in masks.anchor_logits.iter_mut().chain(masks.offset_logits.iter_mut()) {
        *l = rng.random_range(-4.0..4.0);
    }
    let (ga, go) = masks.loss_grad();
    let analytic: Vec<f64> = ga.into_iter().chain(go).collect();
    let logits: Vec<f64> = masks.anchor_logits.iter().chain(&masks.offset_logits).copied().collect();
    let na = masks.anchor_logits.len();
    let mut trial = masks.clone();
    let rep = grad_check(
        |theta| {
            trial.anchor_logits.copy_from_slice(&theta[..na]);
            trial.offset_logits.copy_from_slice(&theta[na..]);
            trial.loss()
        },
        &logits,
        &analytic,
        &sample_coords(logits.len(), 100, 3),
        1e-8,
    );
    let worst_mask = rep.max_rel_err;
    outcome(
        worst_full < 1e-4 && worst_sampling < 1e-6 && worst_mask < 1e-6,
        format!(
            "full objective max rel err {worst_full:.2e} ({worst_group}, limit 1e-4); sampling {worst_sampling:.2e}, mask loss {worst_mask:.2e} (limit 1e-6)"
        ),
    )
}

fn ac5(_: &mut Shared) -> Outcome {
    let cp = ContractParams::new([0.0; 3], 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut jump = 0.0f64;
    let mut inside = true;
    for _ in 0..2000 {
        let d: [f64; 3] = [0, 1, 2].map(|_| rng.random_range(-1.0..1.0));
        let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        if norm < 1e-3 {
            continue;
        }
        let at = |r: f64| contract(d.map(|v| v / norm * r), &cp);
        let (a, b) = (at(1.0 - 1e-12), at(1.0 + 1e-12));
        jump = jump.max((0..3).map(|i| (a[i] - b[i]).abs()).fold(0.0, f64::max));
        for r in [0.0, 0.5, 1.0, 3.0, 1e3, 1e9, 1e300] {
            inside &= at(r).iter().all(|&v| v > 0.0 && v < 1.0);
        }
    }
    let v = contract([2.0, 0.0, 0.0], &cp);
    let exact = v == [0.875, 0.5, 0.5];
    outcome(
        jump < 1e-6 && inside && exact,
        format!("jump at |u|=1 {jump:.1e} (limit 1e-6); open cube {inside}; contract(2,0,0) = {v:?}"),
    )
}

fn ac6(_: &mut Shared) -> Outcome {
    let sizes = [2000, 1500, 1000, 700, 400, 150, 33, 9, 2, 1];
    let mut bad = Vec::new();
    for (seed, &n) in sizes.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
        // odd seeds use a coarse lattice, so equal distances are common
        let pts: Vec<[f64; 3]> = (0..n)
            .map(|_| {
                [0, 1, 2].map(|_| {
                    if seed % 2 == 1 {
                        rng.random_range(0..6) as f64
                    } else {
                        rng.random_range(-10.0..10.0)
                    }
                })
            })
            .collect();
        for k in [1, 4, 8] {
            if knn_indices(&pts, k) != knn_brute_force(&pts, k) {
                bad.push(format!("seed {seed} N={n} K={k}"));
            }
        }
    }
    outcome(bad.is_empty(), format!("10 seeds, N from 1 to 2000, K in 1, 4, 8: {}", if bad.is_empty() { "all equal to brute force".into() } else { bad.join(", ") }))
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize, dyadic: bool) -> Image<f64> {
    let data = (0..h * w * c)
        .map(|_| if dyadic { rng.random_range(0..1024) as f64 / 1024.0 } else { rng.random_range(-1.0..1.0) })
        .collect();
    Image::from_data(h, w, c, data).unwrap()
}

fn ac7(_: &mut Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut rec, mut parseval) = (0.0f64, 0.0f64);
    let sched = WaveletSchedule::default();
    let mut identical = 0.0f64;
    for _ in 0..10 {
        let img = random_image(&mut rng, 32, 32, 3, false);
        let pyr = dwt2(&img, 2).unwrap();
        let back = idwt2(&pyr).unwrap();
        rec = rec.max(img.data.iter().zip(&back.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        parseval = parseval.max((pyr.energy() - img.energy()).abs() / img.energy());
        for step in [0, 15_000, 30_000] {
            identical = identical.max(wavelet_loss(&img, &img, step, &sched).unwrap().abs());
        }
    }
    let a = random_image(&mut rng, 32, 32, 3, true);
    let mut b = a.clone();
    b.data.iter_mut().for_each(|v| *v += 0.375);
    let t = wavelet_terms(&a, &b).unwrap();
    let yh_ok = t.high == 0.0 && t.low > 0.0;
    outcome(
        rec < 1e-9 && parseval < 1e-9 && identical == 0.0 && yh_ok,
        format!(
            "reconstruction err {rec:.1e}, Parseval rel err {parseval:.1e} (limit 1e-9); loss on identical inputs {identical}; \
             constant offset YH {:e} (YL {:.3})",
            t.high, t.low
        ),
    )
}

fn ac8(_: &mut Shared) -> Outcome {
    let t0 = Instant::now();
    let cloud = synth_correlated_cloud(0, 5000, 0.5).unwrap();
    // the default reconstruction weight of 1 leaves tri_rec at about 0.5 to 0.8 stddev after 300 steps
    let cfg = config("resolution = 128\nchannels = 16\nhidden = 32\nbatch_size = 1000\nsteps = 300\nlambda_tri = 50");
    let state = fit(&cloud, &cfg).unwrap();
    let (grid, ae) = (&state.params.grid, &state.params.autoencoder);
    let latent = encode_planes(grid, ae).unwrap();
    let stored = latent.data.len() + ae.decoder_param_count();
    let raw = grid.data.len();
    let rec = tri_rec_loss(grid, &decode_planes(&latent, ae).unwrap()).unwrap();
    let n = raw as f64;
    let mean = grid.data.iter().sum::<f64>() / n;
    let std = (grid.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let size_ratio = stored as f64 / raw as f64;
    outcome(
        size_ratio <= 0.25 && rec < 0.1 * std,
        format!(
            "latent + decoder {stored} of {raw} plane values ({:.3}, limit 0.25); tri_rec {rec:.4e} = {:.3} x stddev {std:.4e} (limit 0.1); {:.0} s",
            size_ratio,
            rec / std,
            t0.elapsed().as_secs_f64()
        ),
    )
}

fn ac9(shared: &mut Shared) -> Outcome {
    let t0 = Instant::now();
    let (cloud, noise) = synth_masking_cloud(0, 1000, 0.5, 0.5).unwrap();
    let base = "resolution = 32\nchannels = 4\nhidden = 32\nsteps = 2000\nlambda_mask = 5e-4";
    let masked = fit(&cloud, &config(&format!("{base}\nmasking = true"))).unwrap();
    let plain = fit(&cloud, &config(&format!("{base}\nmasking = false"))).unwrap();
    let (_, om) = masked.hard_masks();
    let dropped = om.iter().filter(|&&b| !b).count() as f64 / om.len() as f64;
    let noise_dropped = noise.iter().zip(&om).filter(|(&f, &k)| f && !k).count() as f64 / noise.iter().filter(|&&f| f).count() as f64;
    let a = compress_scene(&cloud, &masked).unwrap();
    let b = compress_scene(&cloud, &plain).unwrap();
    let ok_a = decompress_scene(&a.bytes).map(|d| d.cloud == a.reconstruction).unwrap_or(false);
    let (sa, sb) = (a.bytes.len(), b.bytes.len());
    shared.fixtures.push(("masked".into(), a.stats));
    shared.fixtures.push(("unmasked".into(), b.stats));
    outcome(
        dropped >= 0.30 && sa < sb && ok_a,
        format!(
            "{:.1}% of offset masks at 0 (need >= 30%; {:.1}% of the noise slots); {sa} B masked vs {sb} B unmasked; {:.0} s",
            100.0 * dropped,
            100.0 * noise_dropped,
            t0.elapsed().as_secs_f64()
        ),
    )
}

/// CRC-32 of the deterministic AC10 bitstream, frozen from a reference run.
const GOLDEN_CRC: u32 = 0x3809_d60b;

fn ac10(shared: &mut Shared) -> Outcome {
    let cloud = synth_correlated_cloud(1, 300, 0.5).unwrap();
    let cfg = config("resolution = 16\nchannels = 4\nhidden = 16\nsteps = 40\nreproducible = true");
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| compress_scene(&cloud, &fit(&cloud, &cfg).unwrap()).unwrap())
    };
    let (a, b) = (run(1), run(3));
    let same = a.bytes == b.bytes;
    let decoded = decompress_scene(&a.bytes).map(|d| d.cloud == a.reconstruction).unwrap_or(false);
    let crc = crc32fast::hash(&a.bytes);
    shared.fixtures.push(("deterministic".into(), a.stats));
    outcome(
        same && decoded && crc == GOLDEN_CRC,
        format!(
            "1-thread and 3-thread runs {}; {} B, crc32 {crc:08x} (frozen {GOLDEN_CRC:08x}); decode {}",
            if same { "bit-identical" } else { "differ" },
            a.bytes.len(),
            if decoded { "matches" } else { "MISMATCH" }
        ),
    )
}

type Criterion = (&'static str, &'static str, fn(&mut Shared) -> Outcome);

const CRITERIA: [Criterion; 10] = [
    ("AC1", "lossless codec", ac1),
    ("AC4", "gradient correctness", ac4),
    ("AC5", "contract properties", ac5),
    ("AC6", "KNN exactness", ac6),
    ("AC7", "wavelet", ac7),
    ("AC10", "determinism", ac10),
    ("AC9", "masking", ac9),
    ("AC3", "context gain", ac3),
    ("AC8", "tri-plane autoencoder", ac8),
    // last, over every bitstream produced above
    ("AC2", "rate bound", ac2),
];

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut shared = Shared::default();
    let mut results = Vec::new();
    for (id, name, run) in CRITERIA {
        if !filter.is_empty() && !filter.iter().any(|f| f == id) {
            continue;
        }
        let o = run(&mut shared);
        let line = format!("{} {id} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        println!("{line}");
        results.push((id, o.pass, line));
    }
    results.sort_by_key(|(id, ..)| id[2..].parse::<u32>().unwrap());
    println!("\nsummary");
    for (_, _, line) in &results {
        println!("{line}");
    }
    let failed = results.iter().filter(|r| !r.1).count();
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
