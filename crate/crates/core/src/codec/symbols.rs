//! Integer bin models and symbol coding with an escape path.
//!
//! A Gaussian bin model covers a window of symbols around the rounded mean,
//! extended on each side while the bin would receive at least half a count out
//! of `2^16`, plus one escape bucket holding both tails. Every entry gets a
//! frequency of at least 1 and the table sums to exactly `2^16`. A symbol
//! outside the window is coded as the escape, one side bit, and the Elias-gamma
//! code of its distance past the window edge in equiprobable bits.

use crate::codec::rangecoder::{RangeDecoder, RangeEncoder, TOTAL};
use crate::error::{Error, Result};
use crate::quant::{interval_mass, normal_cdf, SYMBOL_LIMIT};

/// Window half-width cap, keeping every table within `2^14` entries.
pub const MAX_HALF_WIDTH: i64 = 8191;
const GAMMA_MAX_ZEROS: u32 = 40;

/// Largest-remainder rounding of `probs` to integers summing to `total`, each at least 1.
///
/// Remainder ties go to the lower index. Requires `probs.len() <= total`.
pub fn discretize(probs: &[f64], total: u32) -> Vec<u32> {
    let n = probs.len();
    assert!(n >= 1 && n <= total as usize, "cannot give {n} entries a count each out of {total}");
    let sum: f64 = probs.iter().sum();
    let scaled: Vec<f64> = if sum > 0.0 && sum.is_finite() {
        probs.iter().map(|&p| p.max(0.0) / sum * total as f64).collect()
    } else {
        vec![total as f64 / n as f64; n]
    };
    let floors: Vec<f64> = scaled.iter().map(|x| x.floor()).collect();
    let mut freqs: Vec<u32> = floors.iter().map(|&f| (f as u32).max(1)).collect();
    let rem: Vec<f64> = scaled.iter().zip(&floors).map(|(x, f)| x - f).collect();
    let assigned: i64 = freqs.iter().map(|&f| f as i64).sum();
    let mut diff = total as i64 - assigned;
    let mut order: Vec<usize> = (0..n).collect();
    if diff > 0 {
        // every entry gets `diff / n`, the `diff % n` largest remainders one more;
        // the comparator is a total order, so selecting them equals sorting
        let (rounds, extra) = (diff as usize / n, diff as usize % n);
        if rounds > 0 {
            freqs.iter_mut().for_each(|f| *f += rounds as u32);
        }
        if extra > 0 {
            let by_rem = |a: &usize, b: &usize| rem[*b].total_cmp(&rem[*a]).then(a.cmp(b));
            if extra < n {
                order.select_nth_unstable_by(extra - 1, by_rem);
            }
            for &i in &order[..extra] {
                freqs[i] += 1;
            }
        }
    } else {
        order.sort_by(|&a, &b| rem[a].total_cmp(&rem[b]).then(a.cmp(&b)));
        while diff < 0 {
            for &i in &order {
                if diff == 0 {
                    break;
                }
                if freqs[i] > 1 {
                    freqs[i] -= 1;
                    diff += 1;
                }
            }
        }
    }
    freqs
}

/// Frequency table over symbols `lo ..= lo + window - 1` followed by the escape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinModel {
    lo: i64,
    freqs: Vec<u32>,
    cum: Vec<u32>,
}

impl BinModel {
    pub fn from_freqs(lo: i64, freqs: Vec<u32>) -> Result<Self> {
        if freqs.len() < 2 {
            return Err(Error::validation("bin model needs at least one symbol and the escape"));
        }
        if freqs.iter().any(|&f| f == 0) || freqs.iter().map(|&f| f as u64).sum::<u64>() != TOTAL as u64 {
            return Err(Error::validation("bin frequencies must be positive and sum to 2^16"));
        }
        let mut cum = Vec::with_capacity(freqs.len() + 1);
        let mut acc = 0u32;
        cum.push(0);
        for &f in &freqs {
            acc += f;
            cum.push(acc);
        }
        Ok(Self { lo, freqs, cum })
    }

    /// Discretized `N(mu, sigma)` over bins of width `q` centred on multiples of `q`.
    pub fn gaussian(mu: f64, sigma: f64, q: f64) -> Self {
        let limit = SYMBOL_LIMIT as f64;
        let center = (mu / q).round().clamp(-limit, limit) as i64;
        // bin s spans edges s and s + 1, edge t sits at (t - 1/2) q
        let edge = |t: i64| ((t as f64 - 0.5) * q - mu) / sigma;
        let mass = |s: i64| interval_mass(edge(s), edge(s + 1));
        let keep = |p: f64| p * TOTAL as f64 >= 0.5;
        // Walking outwards, each bin shares one edge with the previous one and
        // `interval_mass` evaluates it in the same form, so the CDF value is carried.
        let mut left = Vec::new();
        let mut s = center - 1;
        let mut shared = normal_cdf(edge(center));
        while center - s <= MAX_HALF_WIDTH && s >= -SYMBOL_LIMIT {
            let lo = edge(s);
            let p = if lo > 0.0 {
                shared = normal_cdf(lo);
                mass(s)
            } else {
                let below = normal_cdf(lo);
                let p = shared - below;
                shared = below;
                p
            };
            if !keep(p) {
                break;
            }
            left.push(p);
            s -= 1;
        }
        let mut right = Vec::new();
        let mut s = center + 1;
        let mut shared = normal_cdf(-edge(s));
        while s - center <= MAX_HALF_WIDTH && s <= SYMBOL_LIMIT {
            let p = if edge(s) > 0.0 {
                let above = normal_cdf(-edge(s + 1));
                let p = shared - above;
                shared = above;
                p
            } else {
                shared = normal_cdf(-edge(s + 1));
                mass(s)
            };
            if !keep(p) {
                break;
            }
            right.push(p);
            s += 1;
        }
        let lo = center - left.len() as i64;
        let hi = center + right.len() as i64;
        let mut probs: Vec<f64> = left.into_iter().rev().collect();
        probs.push(mass(center));
        probs.extend(right);
        probs.push(normal_cdf(edge(lo)) + normal_cdf(-edge(hi + 1)));
        let freqs = discretize(&probs, TOTAL);
        Self::from_freqs(lo, freqs).expect("discretize yields a valid table")
    }

    pub fn window_len(&self) -> usize {
        self.freqs.len() - 1
    }

    pub fn lo(&self) -> i64 {
        self.lo
    }

    pub fn hi(&self) -> i64 {
        self.lo + self.window_len() as i64 - 1
    }

    pub fn frequencies(&self) -> &[u32] {
        &self.freqs
    }

    pub fn escape_frequency(&self) -> u32 {
        self.freqs[self.window_len()]
    }

    /// Frequency of `s` if it lies in the window.
    pub fn frequency(&self, s: i64) -> Option<u32> {
        (s >= self.lo && s <= self.hi()).then(|| self.freqs[(s - self.lo) as usize])
    }

    /// Exact coded length of `s` in bits.
    pub fn cost_bits(&self, s: i64) -> f64 {
        let t = TOTAL as f64;
        match self.frequency(s) {
            Some(f) => -(f as f64 / t).log2(),
            None => {
                let d = if s < self.lo { self.lo - s } else { s - self.hi() } as u64;
                let n = 63 - d.leading_zeros();
                -(self.escape_frequency() as f64 / t).log2() + 1.0 + (2 * n + 1) as f64
            }
        }
    }

    pub fn hash_into(&self, h: &mut crc32fast::Hasher) {
        h.update(&self.lo.to_le_bytes());
        h.update(&(self.freqs.len() as u32).to_le_bytes());
        let bytes: Vec<u8> = self.freqs.iter().flat_map(|f| f.to_le_bytes()).collect();
        h.update(&bytes);
    }

    pub fn encode(&self, enc: &mut RangeEncoder, s: i64) {
        if self.frequency(s).is_some() {
            let i = (s - self.lo) as usize;
            enc.encode(self.cum[i], self.freqs[i]);
            return;
        }
        let e = self.window_len();
        enc.encode(self.cum[e], self.freqs[e]);
        let above = s > self.hi();
        enc.encode_bit(above);
        let d = if above { s - self.hi() } else { self.lo - s } as u64;
        let n = 63 - d.leading_zeros();
        for _ in 0..n {
            enc.encode_bit(false);
        }
        for i in (0..=n).rev() {
            enc.encode_bit((d >> i) & 1 == 1);
        }
    }

    pub fn decode(&self, dec: &mut RangeDecoder) -> Result<i64> {
        let t = dec.target();
        let i = self.cum.partition_point(|&c| c <= t) - 1;
        dec.consume(self.cum[i], self.freqs[i])?;
        if i < self.window_len() {
            return Ok(self.lo + i as i64);
        }
        let above = dec.decode_bit()?;
        let mut zeros = 0;
        while !dec.decode_bit()? {
            zeros += 1;
            if zeros > GAMMA_MAX_ZEROS {
                return Err(Error::corruption("escape code too long"));
            }
        }
        let mut d: u64 = 1;
        for _ in 0..zeros {
            d = (d << 1) | dec.decode_bit()? as u64;
        }
        let s = if above { self.hi() + d as i64 } else { self.lo - d as i64 };
        if s.abs() > SYMBOL_LIMIT {
            return Err(Error::corruption("escaped symbol outside the symbol range"));
        }
        Ok(s)
    }
}

/// Range-code `symbols[i]` under `models[i]`.
pub fn encode_symbols(symbols: &[i64], models: &[BinModel]) -> Vec<u8> {
    assert_eq!(symbols.len(), models.len());
    let mut enc = RangeEncoder::new();
    for (&s, m) in symbols.iter().zip(models) {
        m.encode(&mut enc, s);
    }
    enc.finish()
}

/// Inverse of [`encode_symbols`] for `count` symbols.
pub fn decode_symbols(stream: &[u8], models: &[BinModel], count: usize) -> Result<Vec<i64>> {
    if models.len() < count {
        return Err(Error::validation("fewer models than symbols"));
    }
    let mut dec = RangeDecoder::new(stream)?;
    let out = models[..count].iter().map(|m| m.decode(&mut dec)).collect::<Result<Vec<_>>>()?;
    dec.finish()?;
    Ok(out)
}
