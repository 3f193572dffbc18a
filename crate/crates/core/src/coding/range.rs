//! Byte-oriented range coder with 16-bit frequency precision.
//!
//! Carry handling follows the classic scheme: the encoder holds the most
//! recent output byte in `cache` and counts a run of 0xFF bytes that a late
//! carry may still flip; the first byte of the raw stream is provably zero
//! (a carry into it would push the coded value past 1.0) and is therefore
//! never emitted. The flush picks the value with the most trailing zero bits
//! inside the final interval and strips trailing zero bytes; the decoder
//! reads zeros past the end of the payload, reconstructing the same value.

use crate::error::CodecError;

pub const PROB_BITS: u32 = 16;
pub const PROB_TOTAL: u32 = 1 << PROB_BITS;
const TOP: u32 = 1 << 24;

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    pending: u64,
    first: bool,
    out: Vec<u8>,
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder { low: 0, range: u32::MAX, cache: 0, pending: 0, first: true, out: Vec::new() }
    }

    /// Narrows the interval to the slice [cum_lo, cum_hi) of `total`.
    pub fn encode(&mut self, cum_lo: u32, cum_hi: u32, total: u32) {
        debug_assert!(cum_lo < cum_hi && cum_hi <= total);
        let r = self.range / total;
        self.low += r as u64 * cum_lo as u64;
        self.range = r * (cum_hi - cum_lo);
        while self.range < TOP {
            self.shift_low();
            self.range <<= 8;
        }
    }

    fn shift_low(&mut self) {
        let carry = (self.low >> 32) as u8;
        if self.low < 0xFF00_0000 || carry == 1 {
            if self.first {
                debug_assert_eq!(carry, 0);
                self.first = false;
            } else {
                self.out.push(self.cache.wrapping_add(carry));
            }
            while self.pending > 0 {
                self.out.push(0xFFu8.wrapping_add(carry));
                self.pending -= 1;
            }
            self.cache = (self.low >> 24) as u8;
        } else {
            self.pending += 1;
        }
        self.low = (self.low << 8) & 0xFFFF_FFFF;
    }

    pub fn finish(mut self) -> Vec<u8> {
        let lo = self.low;
        let hi = lo + self.range as u64;
        for k in (0..=32u32).rev() {
            let step = 1u64 << k;
            let cand = (lo + step - 1) & !(step - 1);
            if cand < hi {
                self.low = cand;
                break;
            }
        }
        for _ in 0..5 {
            self.shift_low();
        }
        let mut out = self.out;
        while out.last() == Some(&0) {
            out.pop();
        }
        out
    }
}

pub struct RangeDecoder<'a> {
    payload: &'a [u8],
    pos: usize,
    range: u32,
    code: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(payload: &'a [u8]) -> Self {
        let mut d = RangeDecoder { payload, pos: 0, range: u32::MAX, code: 0 };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte() as u32;
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        let b = self.payload.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    /// Frequency offset of the coded value within `total`; pair with
    /// `decode_update` once the symbol is identified.
    pub fn decode_freq(&mut self, total: u32) -> u32 {
        let r = self.range / total;
        (self.code / r).min(total - 1)
    }

    pub fn decode_update(&mut self, cum_lo: u32, cum_hi: u32, total: u32) {
        let r = self.range / total;
        self.code -= r * cum_lo;
        self.range = r * (cum_hi - cum_lo);
        while self.range < TOP {
            self.code = (self.code << 8) | self.next_byte() as u32;
            self.range <<= 8;
        }
    }
}

/// Cumulative frequency table over a fixed-point pmf summing to 2^16.
pub struct CumTable {
    cum: Vec<u32>,
}

impl CumTable {
    pub fn new(freqs: &[u32]) -> Self {
        debug_assert_eq!(freqs.iter().sum::<u32>(), PROB_TOTAL);
        let mut cum = Vec::with_capacity(freqs.len() + 1);
        let mut acc = 0u32;
        cum.push(0);
        for &f in freqs {
            acc += f;
            cum.push(acc);
        }
        CumTable { cum }
    }

    pub fn len(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bounds(&self, symbol: usize) -> (u32, u32) {
        (self.cum[symbol], self.cum[symbol + 1])
    }

    /// Largest symbol whose cumulative start is <= f.
    pub fn find(&self, f: u32) -> usize {
        debug_assert!(f < PROB_TOTAL);
        // partition_point over the starts cum[1..]; frequencies are >= 1 so
        // the strictly increasing table makes this unambiguous.
        self.cum[1..].partition_point(|&c| c <= f)
    }
}

/// Converts real-valued probabilities into integer frequencies that sum to
/// exactly 2^16 with a floor of 1 per symbol. Leftover mass after flooring
/// goes to the largest fractional remainders, lowest index on ties.
/// Non-finite or negative entries are treated as zero; an all-zero pmf
/// degrades to uniform.
pub fn quantize_pmf(probs: &[f32]) -> Result<Vec<u32>, CodecError> {
    let k = probs.len();
    if k == 0 || k > 65535 {
        return Err(CodecError::BadAlphabet(k));
    }
    let clean: Vec<f64> = probs.iter().map(|&p| if p.is_finite() && p > 0.0 { p as f64 } else { 0.0 }).collect();
    let sum: f64 = clean.iter().sum();
    let scale = (PROB_TOTAL as usize - k) as f64;
    let shares: Vec<f64> = if sum > 0.0 {
        clean.iter().map(|p| p / sum * scale).collect()
    } else {
        vec![scale / k as f64; k]
    };
    let mut freqs: Vec<u32> = shares.iter().map(|s| 1 + s.floor() as u32).collect();
    let assigned: u32 = freqs.iter().sum();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        let fa = shares[a] - shares[a].floor();
        let fb = shares[b] - shares[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take((PROB_TOTAL - assigned) as usize) {
        freqs[i] += 1;
    }
    debug_assert_eq!(freqs.iter().sum::<u32>(), PROB_TOTAL);
    Ok(freqs)
}
