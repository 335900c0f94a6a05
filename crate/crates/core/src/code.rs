//! Linear block codes and their parity-check matrix file formats.
//!
//! A [`Code`] carries one or more parity-check matrices that all describe the
//! same null space. Matrices may carry redundant rows (array LDPC codes do),
//! so the syndrome length of a PCM is its row count, while `n - k` is its rank.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gf2::{null_space_generator, BinaryMatrix, MatrixError};

#[derive(Debug, Error)]
pub enum CodeError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("inconsistent dimensions: {0}")]
    Dimensions(String),
    #[error("parity-check matrix has rank {rank}, expected n-k = {expected}")]
    RankDeficient { rank: usize, expected: usize },
    #[error("parity-check matrices do not share a null space")]
    NullSpaceMismatch,
    #[error("unknown code `{0}`")]
    UnknownCode(String),
    #[error(transparent)]
    Matrix(#[from] MatrixError),
}

fn parse_err(line: usize, msg: impl Into<String>) -> CodeError {
    CodeError::Parse { line, msg: msg.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodeClass {
    Bch,
    Hamming,
    Polar,
    Ldpc,
    Ccsds,
    Wran,
    Turbo,
    Other,
}

impl CodeClass {
    pub fn as_str(self) -> &'static str {
        match self {
            CodeClass::Bch => "bch",
            CodeClass::Hamming => "hamming",
            CodeClass::Polar => "polar",
            CodeClass::Ldpc => "ldpc",
            CodeClass::Ccsds => "ccsds",
            CodeClass::Wran => "wran",
            CodeClass::Turbo => "turbo",
            CodeClass::Other => "other",
        }
    }
}

impl FromStr for CodeClass {
    type Err = CodeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "bch" => CodeClass::Bch,
            "hamming" => CodeClass::Hamming,
            "polar" => CodeClass::Polar,
            "ldpc" => CodeClass::Ldpc,
            "ccsds" => CodeClass::Ccsds,
            "wran" => CodeClass::Wran,
            "turbo" => CodeClass::Turbo,
            _ => CodeClass::Other,
        })
    }
}

impl fmt::Display for CodeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct Code {
    name: String,
    n: usize,
    k: usize,
    generator: BinaryMatrix,
    pcms: Vec<BinaryMatrix>,
    class: CodeClass,
    cyclic: bool,
}

impl fmt::Debug for Code {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Code")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("k", &self.k)
            .field("pcms", &self.pcms.len())
            .field("class", &self.class)
            .field("cyclic", &self.cyclic)
            .finish()
    }
}

impl Code {
    /// Builds a code from a single PCM. `k` is taken as `n - rank(h)` unless
    /// `expected_k` is given, in which case the rank must match.
    pub fn from_pcm(
        name: impl Into<String>,
        h: BinaryMatrix,
        class: CodeClass,
        cyclic: bool,
        expected_k: Option<usize>,
    ) -> Result<Code, CodeError> {
        let n = h.cols();
        let rank = h.rank();
        if let Some(k) = expected_k {
            if k >= n {
                return Err(CodeError::Dimensions(format!("k = {k} must be below n = {n}")));
            }
            if rank != n - k {
                return Err(CodeError::RankDeficient { rank, expected: n - k });
            }
        }
        if rank == 0 || rank == n {
            return Err(CodeError::Dimensions(format!("rank {rank} leaves no usable code of length {n}")));
        }
        let generator = null_space_generator(&h);
        debug_assert!(generator.mul(&h.transpose()).map(|p| p.is_zero()).unwrap_or(false));
        Ok(Code { name: name.into(), n, k: n - rank, generator, pcms: vec![h], class, cyclic })
    }

    /// Same code with a different PCM list; every matrix must span the same
    /// row space as the primary one.
    pub fn with_pcms(&self, pcms: Vec<BinaryMatrix>) -> Result<Code, CodeError> {
        if pcms.is_empty() {
            return Err(CodeError::Dimensions("empty PCM list".into()));
        }
        for h in &pcms {
            self.check_equivalent(h)?;
        }
        Ok(Code { pcms, ..self.clone() })
    }

    /// Verifies `h` has rank `n - k` and `G·hᵀ = 0`.
    pub fn check_equivalent(&self, h: &BinaryMatrix) -> Result<(), CodeError> {
        if h.cols() != self.n {
            return Err(CodeError::Dimensions(format!("PCM has {} columns, code length {}", h.cols(), self.n)));
        }
        let rank = h.rank();
        if rank != self.n - self.k {
            return Err(CodeError::RankDeficient { rank, expected: self.n - self.k });
        }
        if !self.generator.mul(&h.transpose())?.is_zero() {
            return Err(CodeError::NullSpaceMismatch);
        }
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// `n - k`.
    pub fn redundancy(&self) -> usize {
        self.n - self.k
    }

    pub fn rate(&self) -> f64 {
        self.k as f64 / self.n as f64
    }

    pub fn generator(&self) -> &BinaryMatrix {
        &self.generator
    }

    pub fn pcm(&self) -> &BinaryMatrix {
        &self.pcms[0]
    }

    pub fn pcms(&self) -> &[BinaryMatrix] {
        &self.pcms
    }

    pub fn class(&self) -> CodeClass {
        self.class
    }

    pub fn is_cyclic(&self) -> bool {
        self.cyclic
    }

    pub fn is_codeword(&self, x: &[u8]) -> bool {
        x.len() == self.n && self.pcm().mul_vec(x).iter().all(|&s| s == 0)
    }

    /// `u·G` for an information word of length `k`.
    pub fn encode(&self, info: &[u8]) -> Vec<u8> {
        assert_eq!(info.len(), self.k);
        let mut x = vec![0u8; self.n];
        for (r, &b) in info.iter().enumerate() {
            if b & 1 == 1 {
                for (c, xc) in x.iter_mut().enumerate() {
                    *xc ^= self.generator.get(r, c) as u8;
                }
            }
        }
        x
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PcmFormat {
    Alist,
    DenseText,
}

impl PcmFormat {
    /// Guesses from the file extension; anything other than `.alist` is dense text.
    pub fn from_path(path: &Path) -> PcmFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some("alist") => PcmFormat::Alist,
            _ => PcmFormat::DenseText,
        }
    }
}

/// Reads a PCM from disk and builds a code around it.
pub fn load_code(
    path: &Path,
    format: PcmFormat,
    class: CodeClass,
    cyclic: bool,
    expected_k: Option<usize>,
) -> Result<Code, CodeError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| CodeError::Io { path: path.display().to_string(), source })?;
    let h = match format {
        PcmFormat::Alist => parse_alist(&text)?,
        PcmFormat::DenseText => parse_dense(&text)?,
    };
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("custom").to_string();
    Code::from_pcm(name, h, class, cyclic, expected_k)
}

/// Non-empty lines with their 1-based line numbers.
fn numbered_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty())
}

fn parse_numbers(line: usize, s: &str) -> Result<Vec<usize>, CodeError> {
    s.split_whitespace()
        .map(|t| t.parse::<usize>().map_err(|_| parse_err(line, format!("`{t}` is not a non-negative integer"))))
        .collect()
}

/// Parses the alist sparse format: `n m`, max weights, the column and row
/// weight lists, then one 1-based index list per column and per row (zero
/// padding allowed).
pub fn parse_alist(text: &str) -> Result<BinaryMatrix, CodeError> {
    let mut lines = numbered_lines(text);
    let mut next = |what: &str| -> Result<(usize, Vec<usize>), CodeError> {
        let (no, l) = lines.next().ok_or_else(|| parse_err(0, format!("unexpected end of file, expected {what}")))?;
        Ok((no, parse_numbers(no, l)?))
    };
    let (no, dims) = next("dimensions")?;
    let [n, m] = dims[..] else {
        return Err(parse_err(no, "expected `n m`"));
    };
    if n == 0 || m == 0 {
        return Err(parse_err(no, "dimensions must be positive"));
    }
    let (no, maxw) = next("maximum weights")?;
    if maxw.len() != 2 {
        return Err(parse_err(no, "expected `max_col_weight max_row_weight`"));
    }
    let (no, col_w) = next("column weights")?;
    if col_w.len() != n {
        return Err(parse_err(no, format!("expected {n} column weights, found {}", col_w.len())));
    }
    let (no, row_w) = next("row weights")?;
    if row_w.len() != m {
        return Err(parse_err(no, format!("expected {m} row weights, found {}", row_w.len())));
    }
    let mut h = BinaryMatrix::zeros(m, n);
    for (c, &w) in col_w.iter().enumerate() {
        let (no, idx) = next("column list")?;
        let entries: Vec<usize> = idx.into_iter().filter(|&i| i != 0).collect();
        if entries.len() != w {
            return Err(parse_err(no, format!("column {} lists {} entries, weight says {w}", c + 1, entries.len())));
        }
        for r in entries {
            if r > m {
                return Err(parse_err(no, format!("row index {r} exceeds {m}")));
            }
            h.set(r - 1, c, true);
        }
    }
    for (r, &w) in row_w.iter().enumerate() {
        let (no, idx) = next("row list")?;
        let entries: Vec<usize> = idx.into_iter().filter(|&i| i != 0).collect();
        if entries.len() != w {
            return Err(parse_err(no, format!("row {} lists {} entries, weight says {w}", r + 1, entries.len())));
        }
        for &c in &entries {
            if c > n || !h.get(r, c - 1) {
                return Err(parse_err(no, format!("row {} entry {c} disagrees with the column lists", r + 1)));
            }
        }
        if h.row_weight(r) != w {
            return Err(parse_err(no, format!("row {} has weight {} in the column lists, {w} here", r + 1, h.row_weight(r))));
        }
    }
    Ok(h)
}

pub fn write_alist(h: &BinaryMatrix) -> String {
    let (m, n) = (h.rows(), h.cols());
    let col_w: Vec<usize> = (0..n).map(|c| h.col_weight(c)).collect();
    let row_w: Vec<usize> = (0..m).map(|r| h.row_weight(r)).collect();
    let max_c = col_w.iter().copied().max().unwrap_or(0);
    let max_r = row_w.iter().copied().max().unwrap_or(0);
    let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
    let mut out = format!("{n} {m}\n{max_c} {max_r}\n{}\n{}\n", join(&col_w), join(&row_w));
    for c in 0..n {
        let mut idx: Vec<usize> = h.col_support(c).into_iter().map(|r| r + 1).collect();
        idx.resize(max_c, 0);
        out.push_str(&join(&idx));
        out.push('\n');
    }
    for r in 0..m {
        let mut idx: Vec<usize> = h.row_support(r).into_iter().map(|c| c + 1).collect();
        idx.resize(max_r, 0);
        out.push_str(&join(&idx));
        out.push('\n');
    }
    out
}

/// Dense text: first line `rows cols`, then one line of space separated 0/1
/// entries per row.
pub fn parse_dense(text: &str) -> Result<BinaryMatrix, CodeError> {
    let mut lines = numbered_lines(text);
    let (no, first) = lines.next().ok_or_else(|| parse_err(0, "empty file"))?;
    let dims = parse_numbers(no, first)?;
    let [rows, cols] = dims[..] else {
        return Err(parse_err(no, "expected `rows cols`"));
    };
    let mut data = Vec::with_capacity(rows);
    for (no, l) in lines {
        if data.len() == rows {
            return Err(parse_err(no, format!("more than {rows} rows")));
        }
        let row = parse_numbers(no, l)?;
        if row.len() != cols {
            return Err(parse_err(no, format!("expected {cols} entries, found {}", row.len())));
        }
        if let Some(v) = row.iter().find(|&&v| v > 1) {
            return Err(parse_err(no, format!("entry {v} is not a bit")));
        }
        data.push(row.into_iter().map(|v| v as u8).collect::<Vec<u8>>());
    }
    if data.len() != rows {
        return Err(CodeError::Dimensions(format!("header declares {rows} rows, file has {}", data.len())));
    }
    Ok(BinaryMatrix::from_rows(&data)?)
}

pub fn write_dense(h: &BinaryMatrix) -> String {
    let mut out = format!("{} {}\n", h.rows(), h.cols());
    for r in 0..h.rows() {
        let row: Vec<String> = h.row(r).iter().map(|b| b.to_string()).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

/// Splits a registry name `class_n_k` into its parts.
pub fn parse_code_name(name: &str) -> Option<(CodeClass, usize, usize)> {
    let mut parts = name.rsplitn(3, '_');
    let k = parts.next()?.parse().ok()?;
    let n = parts.next()?.parse().ok()?;
    let class = parts.next()?.parse().ok()?;
    Some((class, n, k))
}

#[cfg(test)]
mod tests {
    use super::*;

    const HAMMING_ALIST: &str = "7 3
3 4
1 1 2 1 2 2 3
4 4 4
1 0 0
2 0 0
1 2 0
3 0 0
1 3 0
2 3 0
1 2 3
1 3 5 7
2 3 6 7
4 5 6 7
";

    #[test]
    fn alist_hamming_round_trip() {
        let h = parse_alist(HAMMING_ALIST).unwrap();
        assert_eq!((h.rows(), h.cols()), (3, 7));
        let code = Code::from_pcm("hamming_7_4", h.clone(), CodeClass::Hamming, false, Some(4)).unwrap();
        assert_eq!((code.n(), code.k()), (7, 4));
        assert!(code.generator().mul(&h.transpose()).unwrap().is_zero());
        assert_eq!(parse_alist(&write_alist(&h)).unwrap(), h);
    }

    #[test]
    fn alist_row_weight_mismatch_names_line() {
        let bad = HAMMING_ALIST.replace("4 4 4\n", "4 4 3\n");
        let err = parse_alist(&bad).unwrap_err();
        match err {
            CodeError::Parse { line, .. } => assert_eq!(line, 14),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn alist_truncated_file() {
        let cut: String = HAMMING_ALIST.lines().take(8).map(|l| format!("{l}\n")).collect();
        assert!(matches!(parse_alist(&cut), Err(CodeError::Parse { .. })));
    }

    #[test]
    fn dense_round_trip_and_errors() {
        let h = parse_alist(HAMMING_ALIST).unwrap();
        assert_eq!(parse_dense(&write_dense(&h)).unwrap(), h);
        assert!(matches!(parse_dense("2 3\n1 0 1\n"), Err(CodeError::Dimensions(_))));
        assert!(matches!(parse_dense("1 3\n1 2 1\n"), Err(CodeError::Parse { line: 2, .. })));
    }

    #[test]
    fn wrong_expected_k_is_rank_deficient() {
        let h = parse_alist(HAMMING_ALIST).unwrap();
        assert!(matches!(
            Code::from_pcm("x", h, CodeClass::Hamming, false, Some(3)),
            Err(CodeError::RankDeficient { rank: 3, expected: 4 })
        ));
    }

    #[test]
    fn encode_produces_codewords() {
        let h = parse_alist(HAMMING_ALIST).unwrap();
        let code = Code::from_pcm("h", h, CodeClass::Hamming, false, None).unwrap();
        for u in 0..16u8 {
            let info: Vec<u8> = (0..4).map(|i| (u >> i) & 1).collect();
            assert!(code.is_codeword(&code.encode(&info)));
        }
    }

    #[test]
    fn code_names_parse() {
        assert_eq!(parse_code_name("bch_31_16"), Some((CodeClass::Bch, 31, 16)));
        assert_eq!(parse_code_name("ldpc_121_80"), Some((CodeClass::Ldpc, 121, 80)));
        assert_eq!(parse_code_name("bogus"), None);
    }
}
