//! Constructions for the bundled parity-check matrices.
//!
//! The registry ships these as alist fixtures; the functions here are the
//! provenance and are checked against the fixtures in tests.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::gf2::{diagonalize, BinaryMatrix};

/// Polynomials over GF(2) as coefficient vectors, lowest degree first.
type Poly = Vec<u8>;

fn poly_mul(a: &[u8], b: &[u8]) -> Poly {
    let mut out = vec![0u8; a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        if x == 1 {
            for (j, &y) in b.iter().enumerate() {
                out[i + j] ^= y;
            }
        }
    }
    out
}

/// Exact division `num / den`; panics if there is a remainder.
fn poly_div_exact(num: &[u8], den: &[u8]) -> Poly {
    let mut r = num.to_vec();
    let dd = den.len() - 1;
    let mut q = vec![0u8; num.len() - dd];
    for deg in (dd..num.len()).rev() {
        if r[deg] == 1 {
            let shift = deg - dd;
            q[shift] = 1;
            for (i, &c) in den.iter().enumerate() {
                r[shift + i] ^= c;
            }
        }
    }
    assert!(r.iter().all(|&c| c == 0), "division left a remainder");
    q
}

/// Binary minimal polynomial of `alpha^i` in GF(2^m) defined by `primitive`.
fn minimal_polynomial(m: u32, primitive: u32, i: usize) -> Poly {
    let order = (1usize << m) - 1;
    let mut exp = vec![0u32; order];
    let mut x = 1u32;
    for e in exp.iter_mut() {
        *e = x;
        x <<= 1;
        if x >> m != 0 {
            x ^= primitive;
        }
    }
    let mut log = vec![0usize; 1 << m];
    for (i, &e) in exp.iter().enumerate() {
        log[e as usize] = i;
    }
    let mul = |a: u32, b: u32| if a == 0 || b == 0 { 0 } else { exp[(log[a as usize] + log[b as usize]) % order] };

    let mut coset = vec![i % order];
    let mut j = (2 * i) % order;
    while j != coset[0] {
        coset.push(j);
        j = (2 * j) % order;
    }
    // Expand prod (x + alpha^j) with GF(2^m) coefficients.
    let mut poly = vec![1u32];
    for &j in &coset {
        let root = exp[j];
        let mut next = vec![0u32; poly.len() + 1];
        for (d, &c) in poly.iter().enumerate() {
            next[d] ^= mul(c, root);
            next[d + 1] ^= c;
        }
        poly = next;
    }
    poly.into_iter()
        .map(|c| {
            assert!(c <= 1, "minimal polynomial must have binary coefficients");
            c as u8
        })
        .collect()
}

/// Generator polynomial of the narrow-sense binary BCH code of length
/// `2^m - 1` with designed distance `2t + 1`.
pub fn bch_generator(m: u32, primitive: u32, t: usize) -> Poly {
    let order = (1usize << m) - 1;
    let mut seen = vec![false; order];
    let mut g = vec![1u8];
    for i in 1..=2 * t {
        let i = i % order;
        if seen[i] {
            continue;
        }
        let mut j = i;
        loop {
            seen[j] = true;
            j = (2 * j) % order;
            if j == i {
                break;
            }
        }
        g = poly_mul(&g, &minimal_polynomial(m, primitive, i));
    }
    g
}

/// Banded PCM of the cyclic code with generator `g`: rows are shifts of the
/// reciprocal of `h(x) = (x^n + 1) / g(x)`.
pub fn cyclic_pcm(n: usize, g: &[u8]) -> BinaryMatrix {
    let mut xn1 = vec![0u8; n + 1];
    xn1[0] = 1;
    xn1[n] = 1;
    let h = poly_div_exact(&xn1, g);
    let k = h.len() - 1;
    let r = n - k;
    let mut out = BinaryMatrix::zeros(r, n);
    for row in 0..r {
        for (d, &c) in h.iter().rev().enumerate() {
            if c == 1 {
                out.set(row, row + d, true);
            }
        }
    }
    out
}

/// `[P | I]`: the cyclic PCM row-reduced so the identity sits in the last
/// `n - k` columns.
pub fn right_systematic(h: &BinaryMatrix) -> BinaryMatrix {
    let n = h.cols();
    let r = h.rank();
    let targets: Vec<usize> = (n - r..n).collect();
    let d = diagonalize(h, &targets);
    assert!(d.is_complete(r));
    d.matrix
}

/// Array LDPC code with circulant size `q` (prime) and `j` block rows:
/// block `(a, b)` is the identity shifted by `a·b mod q`.
pub fn array_ldpc(q: usize, j: usize) -> BinaryMatrix {
    let mut h = BinaryMatrix::zeros(j * q, q * q);
    for a in 0..j {
        for b in 0..q {
            let shift = (a * b) % q;
            for i in 0..q {
                h.set(a * q + i, b * q + (i + shift) % q, true);
            }
        }
    }
    h
}

fn has_four_cycle(h: &BinaryMatrix) -> bool {
    let supports: Vec<Vec<usize>> = (0..h.rows()).map(|r| h.row_support(r)).collect();
    for a in 0..supports.len() {
        for b in a + 1..supports.len() {
            let shared = supports[a].iter().filter(|c| supports[b].contains(c)).count();
            if shared > 1 {
                return true;
            }
        }
    }
    false
}

/// Regular LDPC matrix with column weight `wc` and row weight `wr` drawn by
/// socket matching from a fixed seed, retried until it has no repeated
/// edges and full row rank (and, if asked, no four-cycles).
pub fn regular_ldpc(n: usize, wc: usize, wr: usize, seed: u64, forbid_four_cycles: bool) -> BinaryMatrix {
    assert_eq!((n * wc) % wr, 0);
    let m = n * wc / wr;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sockets: Vec<usize> = (0..m).flat_map(|r| std::iter::repeat_n(r, wr)).collect();
    for _ in 0..1_000_000 {
        sockets.shuffle(&mut rng);
        let mut h = BinaryMatrix::zeros(m, n);
        let mut ok = true;
        for (e, &r) in sockets.iter().enumerate() {
            let c = e / wc;
            if h.get(r, c) {
                ok = false;
                break;
            }
            h.set(r, c, true);
        }
        if ok && !(forbid_four_cycles && has_four_cycle(&h)) && h.rank() == m {
            return h;
        }
    }
    panic!("no admissible regular matrix found");
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hamming_generator_polynomial() {
        // x^3 + x + 1
        assert_eq!(bch_generator(3, 0b1011, 1), vec![1, 1, 0, 1]);
    }

    #[test]
    fn bch_dimensions() {
        for (m, prim, t, n, k) in [(4, 0b10011, 2, 15, 7), (5, 0b100101, 2, 31, 21), (5, 0b100101, 3, 31, 16), (6, 0b1000011, 3, 63, 45), (6, 0b1000011, 6, 63, 30)] {
            let g = bch_generator(m, prim, t);
            assert_eq!(g.len() - 1, n - k, "({n},{k})");
            let h = cyclic_pcm(n, &g);
            assert_eq!((h.rows(), h.cols(), h.rank()), (n - k, n, n - k));
        }
    }

    #[test]
    fn cyclic_pcm_rows_are_orthogonal_to_generator_shifts() {
        let g = bch_generator(4, 0b10011, 2);
        let h = cyclic_pcm(15, &g);
        for s in 0..7 {
            let mut cw = vec![0u8; 15];
            for (i, &c) in g.iter().enumerate() {
                cw[s + i] = c;
            }
            assert!(h.mul_vec(&cw).iter().all(|&b| b == 0));
        }
    }

    #[test]
    fn array_ldpc_rank_and_weights() {
        let h = array_ldpc(11, 4);
        assert_eq!((h.rows(), h.cols()), (44, 121));
        assert_eq!(h.rank(), 41);
        assert!((0..44).all(|r| h.row_weight(r) == 11));
        assert!((0..121).all(|c| h.col_weight(c) == 4));
        assert!(!has_four_cycle(&h));
    }
}
