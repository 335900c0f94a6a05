//! BPSK over AWGN and the syndrome-based preprocessing.
//!
//! Conventions: bit 0 maps to +1 and bit 1 to −1; `bin(sign(v))` is 1 exactly
//! when `v < 0`, so a zero sample counts as positive.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::code::Code;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error("code rate {0} must lie in (0, 1)")]
    InvalidRate(f64),
    #[error("Eb/N0 range [{lo}, {hi}] is empty")]
    EmptyRange { lo: f64, hi: f64 },
    #[error("vector is not a codeword of {0}")]
    NotACodeword(String),
}

pub fn modulate(x: &[u8]) -> Vec<f64> {
    x.iter().map(|&b| if b & 1 == 0 { 1.0 } else { -1.0 }).collect()
}

#[inline]
pub fn bin_sign(v: f64) -> u8 {
    (v < 0.0) as u8
}

pub fn hard_decision(y: &[f64]) -> Vec<u8> {
    y.iter().map(|&v| bin_sign(v)).collect()
}

/// Noise standard deviation for a given Eb/N0 in dB, normalized per
/// information bit: `sigma = 1 / sqrt(2 · rate · 10^(ebn0/10))`.
pub fn ebn0_to_sigma(ebn0_db: f64, rate: f64) -> Result<f64, ChannelError> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(ChannelError::InvalidRate(rate));
    }
    Ok(1.0 / (2.0 * rate * 10f64.powf(ebn0_db / 10.0)).sqrt())
}

/// Channel-LLR scale for BPSK/AWGN: `llr = 2y / sigma²`.
pub fn llr(y: &[f64], sigma: f64) -> Vec<f64> {
    let s = 2.0 / (sigma * sigma);
    y.iter().map(|&v| s * v).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Inclusive dB range; per-sample Eb/N0 is uniform over it.
    pub ebn0_range_db: (f64, f64),
    pub rate: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(ebn0_range_db: (f64, f64), rate: f64, seed: u64) -> Result<Self, ChannelError> {
        let (lo, hi) = ebn0_range_db;
        if lo > hi || !lo.is_finite() || !hi.is_finite() {
            return Err(ChannelError::EmptyRange { lo, hi });
        }
        if !(rate > 0.0 && rate < 1.0) {
            return Err(ChannelError::InvalidRate(rate));
        }
        Ok(NoiseSpec { ebn0_range_db, rate, seed })
    }

    pub fn fixed(ebn0_db: f64, rate: f64, seed: u64) -> Result<Self, ChannelError> {
        Self::new((ebn0_db, ebn0_db), rate, seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodewordPolicy {
    AllZero,
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSample {
    pub x: Vec<u8>,
    pub x_s: Vec<f64>,
    pub y: Vec<f64>,
    pub y_b: Vec<u8>,
    pub mag: Vec<f64>,
    /// One syndrome per PCM of the code, in order.
    pub syndromes: Vec<Vec<u8>>,
    /// `bin(sign(y ⊙ x_s))`: 1 where the channel flipped the sign.
    pub target: Vec<u8>,
    pub ebn0_db: f64,
}

impl ChannelSample {
    /// Derives every field from a transmitted codeword and the received signal.
    pub fn from_received(code: &Code, x: Vec<u8>, y: Vec<f64>, ebn0_db: f64) -> ChannelSample {
        let x_s = modulate(&x);
        let y_b = hard_decision(&y);
        let mag = y.iter().map(|v| v.abs()).collect();
        let syndromes = code.pcms().iter().map(|h| h.mul_vec(&y_b)).collect();
        let target = y.iter().zip(&x_s).map(|(a, b)| bin_sign(a * b)).collect();
        ChannelSample { x, x_s, y, y_b, mag, syndromes, target, ebn0_db }
    }

    pub fn n(&self) -> usize {
        self.x.len()
    }

    /// Multiplicative noise `y ⊘ x_s` (equal to `y ⊙ x_s` since `x_s = ±1`).
    pub fn multiplicative_noise(&self) -> Vec<f64> {
        self.y.iter().zip(&self.x_s).map(|(a, b)| a * b).collect()
    }
}

/// Independent generator for `(master_seed, stream_id)`.
pub fn stream_rng(master_seed: u64, stream_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(stream_id);
    rng
}

pub fn random_codeword(code: &Code, rng: &mut impl Rng) -> Vec<u8> {
    let info: Vec<u8> = (0..code.k()).map(|_| rng.random_range(0..2u8)).collect();
    code.encode(&info)
}

/// Draws one transmission. Per-sample Eb/N0 is uniform over the configured range.
pub fn draw(code: &Code, spec: &NoiseSpec, policy: CodewordPolicy, rng: &mut impl Rng) -> ChannelSample {
    let (lo, hi) = spec.ebn0_range_db;
    let ebn0_db = if lo < hi { rng.random_range(lo..=hi) } else { lo };
    let sigma = ebn0_to_sigma(ebn0_db, spec.rate).expect("NoiseSpec validates its rate");
    let x = match policy {
        CodewordPolicy::AllZero => vec![0u8; code.n()],
        CodewordPolicy::Random => random_codeword(code, rng),
    };
    let y: Vec<f64> = modulate(&x)
        .into_iter()
        .map(|s| {
            let z: f64 = rng.sample(StandardNormal);
            s + sigma * z
        })
        .collect();
    ChannelSample::from_received(code, x, y, ebn0_db)
}

/// Sample number `index` of the stream defined by `spec.seed`, reproducible
/// in isolation.
pub fn sample(code: &Code, spec: &NoiseSpec, policy: CodewordPolicy, index: u64) -> ChannelSample {
    draw(code, spec, policy, &mut stream_rng(spec.seed, index))
}

/// Retransmits `new_codeword` under the multiplicative noise of `pattern`.
pub fn make_invariance_pair(
    code: &Code,
    pattern: &ChannelSample,
    new_codeword: &[u8],
) -> Result<ChannelSample, ChannelError> {
    if !code.is_codeword(new_codeword) {
        return Err(ChannelError::NotACodeword(code.name().to_string()));
    }
    let noise = pattern.multiplicative_noise();
    let y = modulate(new_codeword).iter().zip(&noise).map(|(s, z)| s * z).collect();
    Ok(ChannelSample::from_received(code, new_codeword.to_vec(), y, pattern.ebn0_db))
}
