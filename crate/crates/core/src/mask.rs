//! Additive attention masks derived from parity-check matrices.
//!
//! `g(A)` is 0 where `A` has a one and `NEG_INF` elsewhere. The softmax in
//! [`crate::tensor`] never evaluates masked entries, so their weight is exactly
//! zero rather than merely tiny.

use crate::gf2::BinaryMatrix;

pub const NEG_INF: f64 = f64::NEG_INFINITY;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MaskMatrix {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl MaskMatrix {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                allowed.push(f(r, c));
            }
        }
        MaskMatrix { rows, cols, allowed }
    }

    /// `g(A)`.
    pub fn from_binary(a: &BinaryMatrix) -> Self {
        Self::from_fn(a.rows(), a.cols(), |r, c| a.get(r, c))
    }

    pub fn unmasked(rows: usize, cols: usize) -> Self {
        Self::from_fn(rows, cols, |_, _| true)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn is_allowed(&self, r: usize, c: usize) -> bool {
        self.allowed[r * self.cols + c]
    }

    /// Additive value: 0 or `NEG_INF`.
    pub fn value(&self, r: usize, c: usize) -> f64 {
        if self.is_allowed(r, c) {
            0.0
        } else {
            NEG_INF
        }
    }

    pub fn allowed(&self) -> &[bool] {
        &self.allowed
    }

    pub fn unmasked_count(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }

    /// Fraction of unmasked entries.
    pub fn density(&self) -> f64 {
        self.unmasked_count() as f64 / (self.rows * self.cols) as f64
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.is_allowed(c, r))
    }

    pub fn is_symmetric(&self) -> bool {
        self.rows == self.cols && (0..self.rows).all(|r| (0..r).all(|c| self.is_allowed(r, c) == self.is_allowed(c, r)))
    }

    /// Rows with no unmasked entry; softmax over such a row is undefined.
    pub fn empty_rows(&self) -> Vec<usize> {
        (0..self.rows).filter(|&r| (0..self.cols).all(|c| !self.is_allowed(r, c))).collect()
    }
}

/// The two cross-attention masks: `g(Hᵀ)` (bits as queries, `n x m`) and
/// `g(H)` (checks as queries, `m x n`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrossMasks {
    pub bit_to_check: MaskMatrix,
    pub check_to_bit: MaskMatrix,
}

pub fn build_crossmpt_masks(h: &BinaryMatrix) -> CrossMasks {
    CrossMasks { bit_to_check: MaskMatrix::from_binary(&h.transpose()), check_to_bit: MaskMatrix::from_binary(h) }
}

/// Self-attention mask over the concatenated `[bits; checks]` sequence.
///
/// Bit–bit entries are open when the two bits share a check (depth two in the
/// Tanner graph) and on the diagonal; bit–check entries follow `H`;
/// check–check entries are open only on the diagonal.
pub fn build_ecct_mask(h: &BinaryMatrix) -> MaskMatrix {
    let (m, n) = (h.rows(), h.cols());
    let ht = h.transpose();
    let shares = |i: usize, j: usize| (0..m).any(|r| ht.get(i, r) && ht.get(j, r));
    let mut bitbit = vec![false; n * n];
    for i in 0..n {
        for j in i..n {
            let v = i == j || shares(i, j);
            bitbit[i * n + j] = v;
            bitbit[j * n + i] = v;
        }
    }
    MaskMatrix::from_fn(n + m, n + m, |r, c| match (r < n, c < n) {
        (true, true) => bitbit[r * n + c],
        (true, false) => h.get(c - n, r),
        (false, true) => h.get(r - n, c),
        (false, false) => r == c,
    })
}

/// ECCT mask with every bit–bit and check–check pair closed except the
/// diagonal; only the PCM edges stay open off the diagonal.
pub fn build_ecct_fully_masked(h: &BinaryMatrix) -> MaskMatrix {
    let (m, n) = (h.rows(), h.cols());
    MaskMatrix::from_fn(n + m, n + m, |r, c| match (r < n, c < n) {
        (true, true) | (false, false) => r == c,
        (true, false) => h.get(c - n, r),
        (false, true) => h.get(r - n, c),
    })
}
