//! PCM lists for the parallel ensemble: the systematic matrix followed by
//! column-shifted complements, with per-bit identity coverage.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::code::{Code, CodeError};
use crate::gf2::{complementary_pcm, diagonalize, identity_window, max_shift, systematic_form, BinaryMatrix, MatrixError};
use crate::model::{Fusion, ModelConfig, Variant};

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("ensemble needs at least one branch")]
    NoBranches,
    #[error("p = {p} exceeds the {max} distinct shifts available for n = {n}, n - k = {r}")]
    TooManyBranches { p: usize, max: usize, n: usize, r: usize },
    #[error(transparent)]
    Matrix(#[from] MatrixError),
    #[error(transparent)]
    Code(#[from] CodeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Construction {
    /// Column rotations of `H_sys`.
    CyclicShift,
    /// Row reduction towards each target window.
    Diagonalization,
}

#[derive(Debug, Clone)]
pub struct Ensemble {
    pub construction: Construction,
    pub pcms: Vec<BinaryMatrix>,
    /// Columns each branch was asked to carry as identity.
    pub windows: Vec<Vec<usize>>,
}

/// `[H_sys, H_c^1, ..., H_c^{p-1}]`. Cyclic codes use column shifts;
/// other codes diagonalize each shifted window as far as possible.
pub fn build_ensemble(code: &Code, p: usize) -> Result<Ensemble, EnsembleError> {
    if p == 0 {
        return Err(EnsembleError::NoBranches);
    }
    let (n, r) = (code.n(), code.redundancy());
    let max = max_shift(n, r) + 1;
    if p > max {
        return Err(EnsembleError::TooManyBranches { p, max, n, r });
    }
    let h_sys = systematic_form(code.pcm(), r)?.matrix;
    let windows: Vec<Vec<usize>> = (0..p).map(|j| identity_window(n, r, j)).collect();
    let (construction, pcms) = if code.is_cyclic() {
        let pcms = (0..p).map(|j| complementary_pcm(&h_sys, j, true)).collect::<Result<Vec<_>, _>>()?;
        (Construction::CyclicShift, pcms)
    } else {
        let pcms = windows.iter().map(|w| diagonalize(&h_sys, w).matrix).collect();
        (Construction::Diagonalization, pcms)
    };
    for h in &pcms {
        code.check_equivalent(h)?;
    }
    Ok(Ensemble { construction, pcms, windows })
}

impl Ensemble {
    pub fn p(&self) -> usize {
        self.pcms.len()
    }

    /// The code carrying this PCM list, so samples get one syndrome per branch.
    pub fn code(&self, base: &Code) -> Result<Code, CodeError> {
        base.with_pcms(self.pcms.clone())
    }

    /// Model config for the ensemble decoder.
    pub fn model_config(n_layers: usize, dim: usize, fusion: Fusion) -> ModelConfig {
        ModelConfig { fusion, ..ModelConfig::new(Variant::CrossEd, n_layers, dim) }
    }
}

/// Columns of `h` that are unit vectors (identity columns).
pub fn identity_columns(h: &BinaryMatrix) -> Vec<usize> {
    let mut rows_used = vec![false; h.rows()];
    let mut out = Vec::new();
    for c in 0..h.cols() {
        let sup = h.col_support(c);
        if sup.len() == 1 && !rows_used[sup[0]] {
            rows_used[sup[0]] = true;
            out.push(c);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Coverage {
    /// For each bit, the branches holding an identity column there.
    pub per_bit: Vec<Vec<usize>>,
    pub uncovered: Vec<usize>,
}

impl Coverage {
    pub fn covered_count(&self) -> usize {
        self.per_bit.len() - self.uncovered.len()
    }

    pub fn is_covered(&self, bit: usize) -> bool {
        !self.per_bit[bit].is_empty()
    }
}

pub fn coverage_report(pcms: &[BinaryMatrix]) -> Coverage {
    let n = pcms.first().map_or(0, |h| h.cols());
    let mut per_bit = vec![Vec::new(); n];
    for (j, h) in pcms.iter().enumerate() {
        for c in identity_columns(h) {
            per_bit[c].push(j);
        }
    }
    let uncovered = (0..n).filter(|&c| per_bit[c].is_empty()).collect();
    Coverage { per_bit, uncovered }
}
