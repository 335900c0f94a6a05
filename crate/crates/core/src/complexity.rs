//! Mask densities, attention-map areas and forward FLOP counts for the
//! cross-attention decoder and the self-attention baseline.
//!
//! Counts use the PCM row count `m` (which exceeds `n - k` for matrices with
//! redundant rows). A multiply-accumulate is 2 FLOPs and a softmax entry 5.
//! Attention work is counted over unmasked entries only; layer norms and
//! activations are left out.

use serde::Serialize;

use crate::code::Code;
use crate::mask::build_ecct_mask;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecoderCost {
    /// Unmasked entries of one attention map (`h`, or `h̃` per cross block).
    pub unmasked: usize,
    pub density: f64,
    /// Total attention-map entries held per layer.
    pub area: usize,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComplexityReport {
    pub code: String,
    pub n: usize,
    pub k: usize,
    pub m: usize,
    pub n_layers: usize,
    pub dim: usize,
    pub crossmpt: DecoderCost,
    pub ecct: DecoderCost,
}

impl ComplexityReport {
    pub fn h_exceeds_twice_h_tilde(&self) -> bool {
        self.ecct.unmasked > 2 * self.crossmpt.unmasked
    }

    pub fn density_lower(&self) -> bool {
        self.crossmpt.density < self.ecct.density
    }

    pub fn flops_lower(&self) -> bool {
        self.crossmpt.flops < self.ecct.flops
    }
}

/// Per-sample forward FLOPs shared by both decoders: the Q/K/V/O projections
/// and FFN over all `n + m` positions, plus the output head.
fn dense_flops(n: usize, m: usize, layers: usize, d: usize, ffn: usize) -> u64 {
    let (l, d, f) = ((n + m) as u64, d as u64, ffn as u64);
    let per_layer = 2 * (4 * l * d * d) + 2 * (2 * f * l * d * d);
    let head = 2 * (l * d) + 2 * (l * n as u64);
    layers as u64 * per_layer + head
}

/// Scores, softmax and weighted sum over `entries` unmasked positions.
fn attention_flops(entries: usize, d: usize) -> u64 {
    let (e, d) = (entries as u64, d as u64);
    2 * e * d + 5 * e + 2 * e * d
}

pub fn analyze(code: &Code, n_layers: usize, dim: usize, ffn_expansion: usize) -> ComplexityReport {
    let h = code.pcm();
    let (n, m) = (code.n(), h.rows());
    let h_tilde = h.count_ones();
    let ecct_mask = build_ecct_mask(h);
    let h_full = ecct_mask.unmasked_count();
    let base = dense_flops(n, m, n_layers, dim, ffn_expansion);
    let crossmpt = DecoderCost {
        unmasked: h_tilde,
        density: h_tilde as f64 / (n * m) as f64,
        area: 2 * n * m,
        flops: base + n_layers as u64 * 2 * attention_flops(h_tilde, dim),
    };
    let ecct = DecoderCost {
        unmasked: h_full,
        density: ecct_mask.density(),
        area: (n + m) * (n + m),
        flops: base + n_layers as u64 * attention_flops(h_full, dim),
    };
    ComplexityReport { code: code.name().to_string(), n, k: code.k(), m, n_layers, dim, crossmpt, ecct }
}

/// Published mask densities in percent as `(code, crossmpt, ecct, decimals)`.
pub const REFERENCE_DENSITIES: &[(&str, f64, f64, u32)] = &[
    ("bch_63_45", 32.45, 53.09, 2),
    ("ldpc_121_70", 9.09, 24.01, 2),
    ("ldpc_121_80", 9.09, 21.94, 2),
    ("bch_31_16", 30.1, 38.6, 1),
    ("ldpc_49_24", 14.3, 27.7, 1),
    ("ldpc_121_60", 9.1, 25.5, 1),
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityCheck {
    pub code: String,
    pub crossmpt_pct: f64,
    pub ecct_pct: f64,
    pub reference_crossmpt_pct: f64,
    pub reference_ecct_pct: f64,
    pub matches: bool,
}

/// Compares against the published figure at its printed precision, or
/// `None` when no figure exists for this code.
pub fn check_reference_density(report: &ComplexityReport) -> Option<DensityCheck> {
    let &(_, rc, re, dec) = REFERENCE_DENSITIES.iter().find(|r| r.0 == report.code)?;
    let round = |x: f64| {
        let s = 10f64.powi(dec as i32);
        (x * s).round() / s
    };
    let (c, e) = (100.0 * report.crossmpt.density, 100.0 * report.ecct.density);
    Some(DensityCheck {
        code: report.code.clone(),
        crossmpt_pct: c,
        ecct_pct: e,
        reference_crossmpt_pct: rc,
        reference_ecct_pct: re,
        matches: round(c) == rc && round(e) == re,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::code::CodeClass;
    use crate::gf2::BinaryMatrix;
    use crate::registry;

    #[test]
    fn toy_hand_count() {
        // H (3 x 6), weight 9. Six unordered bit pairs share no check:
        // (0,2) (0,4) (0,5) (1,5) (3,4) (4,5).
        let h = BinaryMatrix::from_rows(&[[1u8, 1, 0, 1, 0, 0], [0, 1, 1, 0, 1, 0], [0, 0, 1, 1, 0, 1]]).unwrap();
        let code = Code::from_pcm("toy", h, CodeClass::Other, false, Some(3)).unwrap();
        let r = analyze(&code, 1, 4, 4);
        assert_eq!(r.crossmpt.unmasked, 9);
        assert_eq!(r.crossmpt.area, 36);
        assert!((r.crossmpt.density - 0.5).abs() < 1e-15);
        // bit-bit 36 - 12, bit-check 2·9, check diagonal 3.
        let shared = (0..6)
            .flat_map(|i| (0..6).map(move |j| (i, j)))
            .filter(|&(i, j)| i == j || (0..3).any(|c| code.pcm().get(c, i) && code.pcm().get(c, j)))
            .count();
        assert_eq!(shared, 24);
        assert_eq!(r.ecct.unmasked, 24 + 18 + 3);
        assert_eq!(r.ecct.area, 81);
    }

    #[test]
    fn reference_densities_reproduce() {
        for name in ["bch_63_45", "ldpc_121_70", "ldpc_121_80"] {
            let r = analyze(&registry::load(name).unwrap(), 6, 128, 4);
            let c = check_reference_density(&r).unwrap();
            assert!(c.matches, "{c:?}");
        }
    }

    #[test]
    fn orderings_hold_for_every_registry_code() {
        for code in registry::all() {
            let r = analyze(&code, 6, 128, 4);
            assert!(r.density_lower(), "{}", r.code);
            assert!(r.h_exceeds_twice_h_tilde(), "{}", r.code);
            assert!(r.flops_lower(), "{}", r.code);
            assert!(r.crossmpt.density > 0.0 && r.ecct.density <= 1.0);
            assert_eq!(r.ecct.area, (r.n + r.m).pow(2));
        }
    }

    #[test]
    fn dim_squared_term_scales_by_four() {
        let code = registry::load("bch_31_16").unwrap();
        let (n, m) = (code.n(), code.pcm().rows());
        let a = dense_flops(n, m, 2, 16, 4) - dense_flops(n, m, 2, 0, 4);
        let b = dense_flops(n, m, 2, 32, 4) - dense_flops(n, m, 2, 0, 4);
        let lin = |d: usize| 2 * ((n + m) * d) as u64;
        assert_eq!(b - lin(32), 4 * (a - lin(16)));
    }
}
