//! Dense GF(2) matrices with packed rows.
//!
//! Rows are stored as `u64` words, least significant bit first, so row XOR and
//! popcount run a word at a time. Everything needed for parity-check work
//! lives here: products, rank, row reduction, systematic forms and the
//! column-shifted complementary matrices used by the ensemble decoder.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MatrixError {
    #[error("dimension mismatch: {left_rows}x{left_cols} times {right_rows}x{right_cols}")]
    DimensionMismatch {
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },
    #[error("row {row} has length {len}, expected {expected}")]
    RaggedRows { row: usize, len: usize, expected: usize },
    #[error("entry {value} at ({row},{col}) is not a bit")]
    NotABit { row: usize, col: usize, value: u8 },
    #[error("matrix has rank {rank}, expected {expected}")]
    RankDeficient { rank: usize, expected: usize },
    #[error("code is not cyclic; use column diagonalization instead of shifting")]
    NotCyclic,
    #[error("shift index {p} out of range 1..={max}")]
    ShiftOutOfRange { p: usize, max: usize },
}

const WORD: usize = 64;

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryMatrix {
    rows: usize,
    cols: usize,
    words: usize,
    bits: Vec<u64>,
}

impl BinaryMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        let words = cols.div_ceil(WORD).max(1);
        BinaryMatrix { rows, cols, words, bits: vec![0; rows * words] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, true);
        }
        m
    }

    /// Builds a matrix from rows of 0/1 bytes.
    pub fn from_rows<R: AsRef<[u8]>>(rows: &[R]) -> Result<Self, MatrixError> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut m = Self::zeros(rows.len(), cols);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(MatrixError::RaggedRows { row: i, len: row.len(), expected: cols });
            }
            for (j, &v) in row.iter().enumerate() {
                match v {
                    0 => {}
                    1 => m.set(i, j, true),
                    _ => return Err(MatrixError::NotABit { row: i, col: j, value: v }),
                }
            }
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        debug_assert!(r < self.rows && c < self.cols);
        (self.bits[r * self.words + c / WORD] >> (c % WORD)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        debug_assert!(r < self.rows && c < self.cols);
        let w = &mut self.bits[r * self.words + c / WORD];
        let mask = 1u64 << (c % WORD);
        if v {
            *w |= mask;
        } else {
            *w &= !mask;
        }
    }

    fn row_words(&self, r: usize) -> &[u64] {
        &self.bits[r * self.words..(r + 1) * self.words]
    }

    /// Row `r` as 0/1 bytes.
    pub fn row(&self, r: usize) -> Vec<u8> {
        (0..self.cols).map(|c| self.get(r, c) as u8).collect()
    }

    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        (0..self.rows).map(|r| self.row(r)).collect()
    }

    /// Column indices holding a one in row `r`.
    pub fn row_support(&self, r: usize) -> Vec<usize> {
        (0..self.cols).filter(|&c| self.get(r, c)).collect()
    }

    pub fn col_support(&self, c: usize) -> Vec<usize> {
        (0..self.rows).filter(|&r| self.get(r, c)).collect()
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn row_weight(&self, r: usize) -> usize {
        self.row_words(r).iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn col_weight(&self, c: usize) -> usize {
        (0..self.rows).filter(|&r| self.get(r, c)).count()
    }

    pub fn is_zero(&self) -> bool {
        self.bits.iter().all(|&w| w == 0)
    }

    pub fn swap_rows(&mut self, a: usize, b: usize) {
        if a == b {
            return;
        }
        for w in 0..self.words {
            self.bits.swap(a * self.words + w, b * self.words + w);
        }
    }

    /// `row[dst] ^= row[src]`.
    pub fn xor_row_into(&mut self, src: usize, dst: usize) {
        debug_assert_ne!(src, dst);
        for w in 0..self.words {
            let v = self.bits[src * self.words + w];
            self.bits[dst * self.words + w] ^= v;
        }
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                if self.get(r, c) {
                    t.set(c, r, true);
                }
            }
        }
        t
    }

    /// Product over GF(2).
    pub fn mul(&self, other: &BinaryMatrix) -> Result<BinaryMatrix, MatrixError> {
        if self.cols != other.rows {
            return Err(MatrixError::DimensionMismatch {
                left_rows: self.rows,
                left_cols: self.cols,
                right_rows: other.rows,
                right_cols: other.cols,
            });
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                if self.get(r, k) {
                    for w in 0..other.words {
                        out.bits[r * out.words + w] ^= other.bits[k * other.words + w];
                    }
                }
            }
        }
        Ok(out)
    }

    /// `self · v` for a bit vector `v` of length `cols`; this is the syndrome map.
    pub fn mul_vec(&self, v: &[u8]) -> Vec<u8> {
        assert_eq!(v.len(), self.cols, "vector length must equal column count");
        let mut packed = vec![0u64; self.words];
        for (c, &b) in v.iter().enumerate() {
            if b & 1 == 1 {
                packed[c / WORD] |= 1 << (c % WORD);
            }
        }
        (0..self.rows)
            .map(|r| {
                let ones: u32 = self
                    .row_words(r)
                    .iter()
                    .zip(&packed)
                    .map(|(a, b)| (a & b).count_ones())
                    .sum();
                (ones & 1) as u8
            })
            .collect()
    }

    /// Stacks `self` on top of `other`.
    pub fn vstack(&self, other: &BinaryMatrix) -> Result<BinaryMatrix, MatrixError> {
        if self.cols != other.cols {
            return Err(MatrixError::DimensionMismatch {
                left_rows: self.rows,
                left_cols: self.cols,
                right_rows: other.rows,
                right_cols: other.cols,
            });
        }
        let mut bits = self.bits.clone();
        bits.extend_from_slice(&other.bits);
        Ok(BinaryMatrix { rows: self.rows + other.rows, cols: self.cols, words: self.words, bits })
    }

    /// Output column `j` is input column `(j - shift) mod cols`.
    pub fn rotate_columns(&self, shift: usize) -> BinaryMatrix {
        let n = self.cols;
        let mut out = Self::zeros(self.rows, n);
        for r in 0..self.rows {
            for j in 0..n {
                if self.get(r, (j + n - shift % n) % n) {
                    out.set(r, j, true);
                }
            }
        }
        out
    }

    pub fn rank(&self) -> usize {
        self.clone().reduce(&[]).pivots.len()
    }

    /// Gauss-Jordan elimination that first tries to pivot on `preferred`
    /// columns (in order), then on any remaining column left to right.
    ///
    /// Returned rows are ordered so that row `i` owns pivot `pivots[i]`; rows
    /// past the rank are zero.
    fn reduce(mut self, preferred: &[usize]) -> Reduction {
        let mut pivots = Vec::new();
        let mut next = 0;
        let mut used = vec![false; self.cols];
        let order = preferred.iter().copied().chain(0..self.cols);
        for c in order {
            if next == self.rows {
                break;
            }
            if used[c] {
                continue;
            }
            let Some(p) = (next..self.rows).find(|&r| self.get(r, c)) else {
                continue;
            };
            used[c] = true;
            self.swap_rows(p, next);
            for r in 0..self.rows {
                if r != next && self.get(r, c) {
                    self.xor_row_into(next, r);
                }
            }
            pivots.push(c);
            next += 1;
        }
        Reduction { matrix: self, pivots }
    }

    /// Drops all-zero rows.
    fn truncate_rows(mut self, rows: usize) -> Self {
        self.bits.truncate(rows * self.words);
        self.rows = rows;
        self
    }
}

struct Reduction {
    matrix: BinaryMatrix,
    pivots: Vec<usize>,
}

impl fmt::Debug for BinaryMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "BinaryMatrix {}x{}", self.rows, self.cols)?;
        for r in 0..self.rows {
            let s: String = (0..self.cols).map(|c| if self.get(r, c) { '1' } else { '0' }).collect();
            writeln!(f, "  {s}")?;
        }
        Ok(())
    }
}

/// Result of diagonalizing a full-rank parity-check matrix on a target
/// column window.
#[derive(Debug, Clone)]
pub struct Diagonalized {
    /// `rank x n` matrix spanning the input row space.
    pub matrix: BinaryMatrix,
    /// Pivot column of each row.
    pub pivots: Vec<usize>,
    /// How many of the requested columns ended up as identity columns.
    pub identity_cols: usize,
}

impl Diagonalized {
    /// True when every requested column carries an identity column.
    pub fn is_complete(&self, requested: usize) -> bool {
        self.identity_cols == requested
    }
}

/// Row-reduces `h` so that the columns in `targets` become identity columns
/// as far as the row space allows. Columns are never permuted.
pub fn diagonalize(h: &BinaryMatrix, targets: &[usize]) -> Diagonalized {
    let red = h.clone().reduce(targets);
    let rank = red.pivots.len();
    let identity_cols = red.pivots.iter().take_while(|c| targets.contains(c)).count();
    Diagonalized { matrix: red.matrix.truncate_rows(rank), pivots: red.pivots, identity_cols }
}

/// `H_sys = [I P]`: diagonalizes columns `0..rank`.
///
/// Fails only if `h` does not have the expected rank. When the leading
/// columns are dependent the result is diagonalized as far as possible;
/// inspect `identity_cols`.
pub fn systematic_form(h: &BinaryMatrix, expected_rank: usize) -> Result<Diagonalized, MatrixError> {
    let targets: Vec<usize> = (0..expected_rank.min(h.cols())).collect();
    let d = diagonalize(h, &targets);
    if d.pivots.len() != expected_rank {
        return Err(MatrixError::RankDeficient { rank: d.pivots.len(), expected: expected_rank });
    }
    Ok(d)
}

/// Largest valid shift index for complementary matrices, `ceil(n/r) - 1`.
pub fn max_shift(n: usize, r: usize) -> usize {
    n.div_ceil(r).saturating_sub(1)
}

/// Complementary PCM of a cyclic code: `H_c(i,j) = H_sys(i, (j - p·r) mod n)`
/// where `r` is the row count of `h_sys`. `p = 0` returns `h_sys` unchanged.
pub fn complementary_pcm(h_sys: &BinaryMatrix, p: usize, cyclic: bool) -> Result<BinaryMatrix, MatrixError> {
    if !cyclic {
        return Err(MatrixError::NotCyclic);
    }
    let (r, n) = (h_sys.rows(), h_sys.cols());
    let max = max_shift(n, r);
    if p > max {
        return Err(MatrixError::ShiftOutOfRange { p, max });
    }
    Ok(h_sys.rotate_columns(p * r))
}

/// Columns the identity block of the `p`-th shifted matrix occupies.
pub fn identity_window(n: usize, r: usize, p: usize) -> Vec<usize> {
    (0..r).map(|i| (p * r + i) % n).collect()
}

/// Generator matrix for the null space of `h`, built from its reduced form:
/// each free column `f` yields a codeword with bit `f` set and the pivot bits
/// read off column `f`. For `H_sys = [I P]` this is `G = [Pᵀ I]`.
pub fn null_space_generator(h: &BinaryMatrix) -> BinaryMatrix {
    let red = h.clone().reduce(&[]);
    let n = h.cols();
    let is_pivot = {
        let mut v = vec![false; n];
        for &p in &red.pivots {
            v[p] = true;
        }
        v
    };
    let free: Vec<usize> = (0..n).filter(|&c| !is_pivot[c]).collect();
    let mut g = BinaryMatrix::zeros(free.len(), n);
    for (row, &f) in free.iter().enumerate() {
        g.set(row, f, true);
        for (i, &p) in red.pivots.iter().enumerate() {
            if red.matrix.get(i, f) {
                g.set(row, p, true);
            }
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn hamming_h() -> BinaryMatrix {
        BinaryMatrix::from_rows(&[
            [1, 0, 1, 0, 1, 0, 1],
            [0, 1, 1, 0, 0, 1, 1],
            [0, 0, 0, 1, 1, 1, 1],
        ])
        .unwrap()
    }

    fn random_matrix(rng: &mut impl Rng, r: usize, c: usize) -> BinaryMatrix {
        let rows: Vec<Vec<u8>> = (0..r).map(|_| (0..c).map(|_| rng.random_range(0..2u8)).collect()).collect();
        BinaryMatrix::from_rows(&rows).unwrap()
    }

    #[test]
    fn identity_product() {
        let i = BinaryMatrix::identity(3);
        assert_eq!(i.mul(&i).unwrap(), i);
    }

    #[test]
    fn hamming_generator_annihilates_h() {
        let h = hamming_h();
        let g = null_space_generator(&h);
        assert_eq!(g.rows(), 4);
        let prod = g.mul(&h.transpose()).unwrap();
        assert_eq!((prod.rows(), prod.cols()), (4, 3));
        assert!(prod.is_zero());
    }

    #[test]
    fn product_matches_integer_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let a = random_matrix(&mut rng, 5, 5);
            let b = random_matrix(&mut rng, 5, 5);
            let c = a.mul(&b).unwrap();
            let (ar, br) = (a.to_rows(), b.to_rows());
            for i in 0..5 {
                for j in 0..5 {
                    let s: u32 = (0..5).map(|k| ar[i][k] as u32 * br[k][j] as u32).sum();
                    assert_eq!(c.get(i, j), s % 2 == 1);
                }
            }
        }
    }

    #[test]
    fn mismatched_product_is_rejected() {
        let a = BinaryMatrix::zeros(2, 3);
        assert!(matches!(a.mul(&a), Err(MatrixError::DimensionMismatch { .. })));
    }

    #[test]
    fn systematic_form_is_fixed_point_on_systematic_input() {
        let h = BinaryMatrix::from_rows(&[[1, 0, 1, 1], [0, 1, 0, 1]]).unwrap();
        let s = systematic_form(&h, 2).unwrap();
        assert_eq!(s.matrix, h);
        assert_eq!(s.identity_cols, 2);
    }

    #[test]
    fn systematic_form_preserves_row_space() {
        // Hamming columns in the order 3,5,7,1,2,4,6.
        let h = BinaryMatrix::from_rows(&[
            [1, 1, 1, 1, 0, 0, 0],
            [1, 0, 1, 0, 1, 0, 1],
            [0, 1, 1, 0, 0, 1, 1],
        ])
        .unwrap();
        let s = systematic_form(&h, 3).unwrap();
        assert_eq!(s.identity_cols, 3);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(s.matrix.get(i, j), i == j);
            }
        }
        assert_eq!(h.vstack(&s.matrix).unwrap().rank(), 3);
    }

    #[test]
    fn systematic_form_reports_partial_diagonalization() {
        // Columns 0 and 1 are equal, so only one of them can be an identity column.
        let h = BinaryMatrix::from_rows(&[[1, 1, 0, 1], [0, 0, 1, 1]]).unwrap();
        let s = systematic_form(&h, 2).unwrap();
        assert_eq!(s.identity_cols, 1);
        assert_eq!(s.matrix.vstack(&h).unwrap().rank(), 2);
    }

    #[test]
    fn rank_deficient_input_errors() {
        let h = BinaryMatrix::from_rows(&[[1, 1, 0], [1, 1, 0]]).unwrap();
        assert_eq!(systematic_form(&h, 2).unwrap_err(), MatrixError::RankDeficient { rank: 1, expected: 2 });
    }

    #[test]
    fn complementary_shift_unrolls_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = random_matrix(&mut rng, 8, 15);
        let c = complementary_pcm(&h, 1, true).unwrap();
        for i in 0..8 {
            for j in 0..15 {
                assert_eq!(c.get(i, j), h.get(i, (j + 15 - 8) % 15));
            }
        }
        assert_eq!(complementary_pcm(&h, 0, true).unwrap(), h);
        assert_eq!(complementary_pcm(&h, 2, true).unwrap_err(), MatrixError::ShiftOutOfRange { p: 2, max: 1 });
        assert_eq!(complementary_pcm(&h, 1, false).unwrap_err(), MatrixError::NotCyclic);
    }

    #[test]
    fn syndrome_map_matches_product() {
        let h = hamming_h();
        let v = [1u8, 0, 0, 0, 0, 0, 1];
        let col = BinaryMatrix::from_rows(&v.iter().map(|&b| [b]).collect::<Vec<_>>()).unwrap();
        let prod = h.mul(&col).unwrap();
        let s = h.mul_vec(&v);
        assert_eq!(s, (0..3).map(|r| prod.get(r, 0) as u8).collect::<Vec<_>>());
    }

    proptest! {
        #[test]
        fn rank_bounded_and_transpose_invariant(seed in any::<u64>(), r in 1usize..12, c in 1usize..70) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_matrix(&mut rng, r, c);
            let rank = m.rank();
            prop_assert!(rank <= r.min(c));
            prop_assert_eq!(rank, m.transpose().rank());
        }

        #[test]
        fn null_space_generator_is_orthogonal(seed in any::<u64>(), r in 1usize..10, extra in 1usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_matrix(&mut rng, r, r + extra);
            let g = null_space_generator(&m);
            prop_assert_eq!(g.rows() + m.rank(), m.cols());
            prop_assert!(g.mul(&m.transpose()).unwrap().is_zero());
            prop_assert_eq!(g.rank(), g.rows());
        }
    }
}
