//! Transformer decoders over (|y|, s(y)): CrossMPT, its code-agnostic form,
//! the ECCT baseline with its fully masked ablation, and the parallel
//! ensemble built from the code-agnostic towers.
//!
//! Logits `f` estimate the sign of the multiplicative noise: `f < 0` means
//! the channel flipped that bit.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{bin_sign, ChannelSample};
use crate::code::Code;
use crate::gf2::BinaryMatrix;
use crate::mask::{build_crossmpt_masks, build_ecct_fully_masked, build_ecct_mask, MaskMatrix};
use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("model expects a code with n = {n} and {m} check rows, got n = {got_n} and {got_m}")]
    CodeMismatch { n: usize, m: usize, got_n: usize, got_m: usize },
    #[error("batch carries {got} syndromes per sample, context has {expected} PCMs")]
    BranchCount { expected: usize, got: usize },
    #[error("bit {0} is not covered by any check")]
    UncheckedBit(usize),
    #[error("unknown variant '{0}'")]
    UnknownVariant(String),
    #[error("parameter '{name}' has shape {got:?}, expected {expected:?}")]
    ParamShape { name: String, got: [usize; 3], expected: [usize; 3] },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "crossmpt")]
    CrossMpt,
    #[serde(rename = "fcrossmpt")]
    FCrossMpt,
    #[serde(rename = "ecct")]
    Ecct,
    #[serde(rename = "ecct_fully_masked")]
    EcctFullyMasked,
    #[serde(rename = "crossed")]
    CrossEd,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::CrossMpt, Variant::FCrossMpt, Variant::Ecct, Variant::EcctFullyMasked, Variant::CrossEd];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::CrossMpt => "crossmpt",
            Variant::FCrossMpt => "fcrossmpt",
            Variant::Ecct => "ecct",
            Variant::EcctFullyMasked => "ecct_fully_masked",
            Variant::CrossEd => "crossed",
        }
    }

    /// Whether parameter shapes depend on `(n, m)`.
    pub fn is_code_specific(self) -> bool {
        matches!(self, Variant::CrossMpt | Variant::Ecct | Variant::EcctFullyMasked)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let v = s.to_ascii_lowercase().replace('-', "_");
        Variant::ALL
            .into_iter()
            .find(|x| x.as_str() == v)
            .or(match v.as_str() {
                "ecct+masking" | "ecct_masked" => Some(Variant::EcctFullyMasked),
                "fcrossed" => Some(Variant::CrossEd),
                _ => None,
            })
            .ok_or_else(|| ModelError::UnknownVariant(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormOrder {
    /// `x + f(norm(x))`
    Pre,
    /// `norm(x + f(x))`
    Post,
}

/// How syndrome bits enter the embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyndromeEncoding {
    /// `s ∈ {0, 1}`
    Binary,
    /// `1 - 2s ∈ {+1, -1}`
    Bipolar,
}

/// Where ensemble towers exchange information.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Towers run independently; outputs are summed before the final FC.
    Output,
    /// Magnitude embeddings are averaged across towers after every layer.
    PerLayer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub n_layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_expansion: usize,
    pub norm_order: NormOrder,
    pub syndrome_encoding: SyndromeEncoding,
    pub fusion: Fusion,
}

impl ModelConfig {
    pub fn new(variant: Variant, n_layers: usize, dim: usize) -> ModelConfig {
        ModelConfig {
            variant,
            n_layers,
            dim,
            heads: 1,
            ffn_expansion: 4,
            norm_order: NormOrder::Pre,
            syndrome_encoding: SyndromeEncoding::Binary,
            fusion: Fusion::Output,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_layers == 0 {
            return Err(ModelError::Config("n_layers must be at least 1".into()));
        }
        if self.dim == 0 {
            return Err(ModelError::Config("dim must be at least 1".into()));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(ModelError::Config(format!("heads = {} must divide dim = {}", self.heads, self.dim)));
        }
        if self.ffn_expansion == 0 {
            return Err(ModelError::Config("ffn_expansion must be at least 1".into()));
        }
        Ok(())
    }
}

/// Code-dependent sizes: length `n` and PCM row count `m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeDims {
    pub n: usize,
    pub m: usize,
}

impl CodeDims {
    pub fn of(code: &Code) -> CodeDims {
        CodeDims { n: code.n(), m: code.pcm().rows() }
    }
}

const PER_LAYER: usize = 16;

/// Names and shapes of every trainable tensor, in storage order.
pub fn param_shapes(cfg: &ModelConfig, dims: Option<CodeDims>) -> Result<Vec<(String, [usize; 3])>, ModelError> {
    cfg.validate()?;
    let d = cfg.dim;
    let h = cfg.ffn_expansion * d;
    let dims = if cfg.variant.is_code_specific() {
        Some(dims.ok_or_else(|| ModelError::Config(format!("{} needs code dimensions", cfg.variant)))?)
    } else {
        None
    };
    let mut out: Vec<(String, [usize; 3])> = Vec::new();
    let mut push = |name: String, shape: [usize; 3]| out.push((name, shape));
    match dims {
        Some(CodeDims { n, m }) => {
            push("embed.magnitude".into(), [1, n, d]);
            push("embed.syndrome".into(), [1, m, d]);
        }
        None => {
            push("embed.magnitude".into(), [1, 1, d]);
            push("embed.syndrome".into(), [1, 1, d]);
        }
    }
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("layer{l}.{s}");
        push(p("ln1.gain"), [1, 1, d]);
        push(p("ln1.bias"), [1, 1, d]);
        push(p("attn.wq"), [1, d, d]);
        push(p("attn.bq"), [1, 1, d]);
        push(p("attn.wk"), [1, d, d]);
        push(p("attn.bk"), [1, 1, d]);
        push(p("attn.wv"), [1, d, d]);
        push(p("attn.bv"), [1, 1, d]);
        push(p("attn.wo"), [1, d, d]);
        push(p("attn.bo"), [1, 1, d]);
        push(p("ln2.gain"), [1, 1, d]);
        push(p("ln2.bias"), [1, 1, d]);
        push(p("ffn.w1"), [1, d, h]);
        push(p("ffn.b1"), [1, 1, h]);
        push(p("ffn.w2"), [1, h, d]);
        push(p("ffn.b2"), [1, 1, d]);
    }
    push("head.norm.gain".into(), [1, 1, d]);
    push("head.norm.bias".into(), [1, 1, d]);
    push("head.fc1.weight".into(), [1, d, 1]);
    push("head.fc1.bias".into(), [1, 1, 1]);
    if let Some(CodeDims { n, m }) = dims {
        push("head.fc2.weight".into(), [1, n + m, n]);
        push("head.fc2.bias".into(), [1, 1, n]);
    }
    Ok(out)
}

/// Exact number of trainable scalars.
pub fn param_count(cfg: &ModelConfig, dims: Option<CodeDims>) -> Result<usize, ModelError> {
    Ok(param_shapes(cfg, dims)?.iter().map(|(_, s)| s.iter().product::<usize>()).sum())
}

/// Masks and the fixed `Hᵀ` resize matrix for one PCM.
#[derive(Debug, Clone)]
pub struct PcmContext {
    pub h: BinaryMatrix,
    pub ht: Tensor,
    pub bit_to_check: Arc<MaskMatrix>,
    pub check_to_bit: Arc<MaskMatrix>,
}

impl PcmContext {
    pub fn new(h: &BinaryMatrix) -> Result<PcmContext, ModelError> {
        let masks = build_crossmpt_masks(h);
        if let Some(&bit) = masks.bit_to_check.empty_rows().first() {
            return Err(ModelError::UncheckedBit(bit));
        }
        let ht = Tensor::from_fn([1, h.cols(), h.rows()], |_, i, j| h.get(j, i) as u8 as f64);
        Ok(PcmContext {
            h: h.clone(),
            ht,
            bit_to_check: Arc::new(masks.bit_to_check),
            check_to_bit: Arc::new(masks.check_to_bit),
        })
    }

    pub fn rows(&self) -> usize {
        self.h.rows()
    }
}

/// Everything a forward pass needs from the code, built once per code.
#[derive(Debug, Clone)]
pub struct CodeContext {
    pub name: String,
    pub n: usize,
    pub pcms: Vec<PcmContext>,
    pub ecct: Arc<MaskMatrix>,
    pub ecct_fully_masked: Arc<MaskMatrix>,
    /// PCM indices sorted by matrix content; reductions over branches follow
    /// this order so the result does not depend on how the list was given.
    canonical: Vec<usize>,
}

impl CodeContext {
    pub fn new(code: &Code) -> Result<CodeContext, ModelError> {
        let pcms = code.pcms().iter().map(PcmContext::new).collect::<Result<Vec<_>, _>>()?;
        let rows: Vec<Vec<Vec<u8>>> = code.pcms().iter().map(|h| h.to_rows()).collect();
        let mut canonical: Vec<usize> = (0..pcms.len()).collect();
        canonical.sort_by(|&a, &b| rows[a].cmp(&rows[b]));
        Ok(CodeContext {
            name: code.name().to_string(),
            n: code.n(),
            ecct: Arc::new(build_ecct_mask(code.pcm())),
            ecct_fully_masked: Arc::new(build_ecct_fully_masked(code.pcm())),
            pcms,
            canonical,
        })
    }

    pub fn dims(&self) -> CodeDims {
        CodeDims { n: self.n, m: self.pcms[0].rows() }
    }

    pub fn canonical_order(&self) -> &[usize] {
        &self.canonical
    }
}

/// Model inputs for a batch of samples, laid out sample-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub n: usize,
    pub y: Vec<f64>,
    pub mag: Vec<f64>,
    /// One flattened `[size, m_j]` syndrome array per PCM.
    pub syndromes: Vec<Vec<u8>>,
    pub target: Vec<u8>,
}

impl Batch {
    pub fn from_samples(samples: &[ChannelSample]) -> Batch {
        let n = samples.first().map_or(0, |s| s.n());
        let p = samples.first().map_or(0, |s| s.syndromes.len());
        let mut b = Batch {
            size: samples.len(),
            n,
            y: Vec::with_capacity(samples.len() * n),
            mag: Vec::with_capacity(samples.len() * n),
            syndromes: vec![Vec::new(); p],
            target: Vec::with_capacity(samples.len() * n),
        };
        for s in samples {
            b.y.extend_from_slice(&s.y);
            b.mag.extend_from_slice(&s.mag);
            b.target.extend_from_slice(&s.target);
            for (dst, src) in b.syndromes.iter_mut().zip(&s.syndromes) {
                dst.extend_from_slice(src);
            }
        }
        b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    /// Magnitude queries over syndrome keys, `n x m`.
    BitToCheck,
    /// Syndrome queries over magnitude keys, `m x n`.
    CheckToBit,
    /// ECCT self-attention, `(n+m) x (n+m)`.
    SelfAttention,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionRecord {
    pub layer: usize,
    pub branch: usize,
    pub kind: AttentionKind,
    /// Softmax output, `[batch·heads, rows, cols]`.
    pub probs: Var,
}

pub struct Forward {
    pub graph: Graph,
    /// One node per parameter tensor, in storage order.
    pub params: Vec<Var>,
    /// `[batch, 1, n]`
    pub logits: Var,
    pub attention: Vec<AttentionRecord>,
}

impl Forward {
    pub fn logits(&self) -> &[f64] {
        self.graph.value(self.logits).data()
    }
}

struct LayerVars {
    ln1: (Var, Var),
    wq: (Var, Var),
    wk: (Var, Var),
    wv: (Var, Var),
    wo: (Var, Var),
    ln2: (Var, Var),
    ffn1: (Var, Var),
    ffn2: (Var, Var),
}

impl LayerVars {
    fn at(pv: &[Var], base: usize) -> LayerVars {
        let p = |i: usize| (pv[base + i], pv[base + i + 1]);
        LayerVars { ln1: p(0), wq: p(2), wk: p(4), wv: p(6), wo: p(8), ln2: p(10), ffn1: p(12), ffn2: p(14) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    dims: Option<CodeDims>,
    names: Vec<String>,
    params: Vec<Tensor>,
}

impl Model {
    /// Fresh parameters: weights `~ N(0, 1/d)`, biases 0, norm gains 1.
    pub fn init(config: ModelConfig, dims: Option<CodeDims>, seed: u64) -> Result<Model, ModelError> {
        let shapes = param_shapes(&config, dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (config.dim as f64).sqrt()).expect("positive std");
        let mut names = Vec::with_capacity(shapes.len());
        let mut params = Vec::with_capacity(shapes.len());
        for (name, shape) in shapes {
            let t = if name.ends_with(".gain") {
                Tensor::filled(shape, 1.0)
            } else if name.rsplit('.').next().is_some_and(|leaf| leaf.starts_with('b')) {
                Tensor::zeros(shape)
            } else {
                Tensor::from_fn(shape, |_, _, _| normal.sample(&mut rng))
            };
            names.push(name);
            params.push(t);
        }
        Ok(Model { config, dims: dims.filter(|_| config.variant.is_code_specific()), names, params })
    }

    /// Rebuilds a model from stored tensors, checking names and shapes.
    pub fn from_parts(
        config: ModelConfig,
        dims: Option<CodeDims>,
        params: Vec<(String, Tensor)>,
    ) -> Result<Model, ModelError> {
        let shapes = param_shapes(&config, dims)?;
        if shapes.len() != params.len() {
            return Err(ModelError::Config(format!("expected {} parameter tensors, got {}", shapes.len(), params.len())));
        }
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for ((name, shape), (got_name, t)) in shapes.into_iter().zip(params) {
            if name != got_name || t.shape() != shape {
                return Err(ModelError::ParamShape { name: got_name, got: t.shape(), expected: shape });
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(Model { config, dims: dims.filter(|_| config.variant.is_code_specific()), names, params: tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dims(&self) -> Option<CodeDims> {
        self.dims
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|t| t.len()).sum()
    }

    /// Code-specific models accept only codes of their training shape.
    pub fn check_context(&self, ctx: &CodeContext) -> Result<(), ModelError> {
        if let Some(d) = self.dims {
            let got = ctx.dims();
            if got != d {
                return Err(ModelError::CodeMismatch { n: d.n, m: d.m, got_n: got.n, got_m: got.m });
            }
        }
        Ok(())
    }

    pub fn forward(&self, ctx: &CodeContext, batch: &Batch) -> Result<Forward, ModelError> {
        self.check_context(ctx)?;
        let used = match self.config.variant {
            Variant::CrossEd => ctx.pcms.len(),
            _ => 1,
        };
        if batch.syndromes.len() < used || batch.n != ctx.n {
            return Err(ModelError::BranchCount { expected: used, got: batch.syndromes.len() });
        }
        let mut g = Graph::new();
        let pv: Vec<Var> = self.params.iter().enumerate().map(|(i, t)| g.param(i, t)).collect();
        let mut attention = Vec::new();
        let logits = match self.config.variant {
            Variant::CrossMpt => self.crossmpt(&mut g, &pv, ctx, batch, &mut attention)?,
            Variant::Ecct | Variant::EcctFullyMasked => self.ecct(&mut g, &pv, ctx, batch, &mut attention)?,
            Variant::FCrossMpt => self.towers(&mut g, &pv, ctx, batch, &[0], &mut attention)?,
            Variant::CrossEd => self.towers(&mut g, &pv, ctx, batch, ctx.canonical_order(), &mut attention)?,
        };
        Ok(Forward { graph: g, params: pv, logits, attention })
    }

    fn syndrome_input(&self, g: &mut Graph, batch: &Batch, j: usize, m: usize) -> Result<Var, ModelError> {
        let s = &batch.syndromes[j];
        if s.len() != batch.size * m {
            return Err(ModelError::BranchCount { expected: batch.size * m, got: s.len() });
        }
        let data: Vec<f64> = match self.config.syndrome_encoding {
            SyndromeEncoding::Binary => s.iter().map(|&b| b as f64).collect(),
            SyndromeEncoding::Bipolar => s.iter().map(|&b| 1.0 - 2.0 * b as f64).collect(),
        };
        Ok(g.constant(Tensor::new([batch.size, m, 1], data)?))
    }

    fn magnitude_input(&self, g: &mut Graph, batch: &Batch) -> Result<Var, ModelError> {
        Ok(g.constant(Tensor::new([batch.size, batch.n, 1], batch.mag.clone())?))
    }

    fn attend(
        &self,
        g: &mut Graph,
        lv: &LayerVars,
        q_in: Var,
        kv_in: Var,
        mask: &Arc<MaskMatrix>,
    ) -> Result<(Var, Var), ModelError> {
        let heads = self.config.heads;
        let lin = |g: &mut Graph, x: Var, (w, b): (Var, Var)| -> Result<Var, TensorError> {
            let y = g.matmul(x, w)?;
            g.add(y, b)
        };
        let mut q = lin(g, q_in, lv.wq)?;
        let mut k = lin(g, kv_in, lv.wk)?;
        let mut v = lin(g, kv_in, lv.wv)?;
        if heads > 1 {
            q = g.split_heads(q, heads)?;
            k = g.split_heads(k, heads)?;
            v = g.split_heads(v, heads)?;
        }
        let scores = g.matmul_t(q, k, false, true)?;
        let scores = g.scale(scores, 1.0 / ((self.config.dim / heads) as f64).sqrt());
        let probs = g.masked_softmax(scores, mask.clone())?;
        let mut o = g.matmul(probs, v)?;
        if heads > 1 {
            o = g.merge_heads(o, heads)?;
        }
        Ok((lin(g, o, lv.wo)?, probs))
    }

    fn ffn(&self, g: &mut Graph, lv: &LayerVars, x: Var) -> Result<Var, ModelError> {
        let h = g.matmul(x, lv.ffn1.0)?;
        let h = g.add(h, lv.ffn1.1)?;
        let h = g.gelu(h);
        let y = g.matmul(h, lv.ffn2.0)?;
        Ok(g.add(y, lv.ffn2.1)?)
    }

    /// Attention sublayer then FFN sublayer on the query stream `x`.
    fn block(
        &self,
        g: &mut Graph,
        lv: &LayerVars,
        x: Var,
        kv: Var,
        mask: &Arc<MaskMatrix>,
    ) -> Result<(Var, Var), ModelError> {
        match self.config.norm_order {
            NormOrder::Pre => {
                let xq = g.layer_norm(x, lv.ln1.0, lv.ln1.1)?;
                let xkv = if kv == x { xq } else { g.layer_norm(kv, lv.ln1.0, lv.ln1.1)? };
                let (a, probs) = self.attend(g, lv, xq, xkv, mask)?;
                let x = g.add(x, a)?;
                let xn = g.layer_norm(x, lv.ln2.0, lv.ln2.1)?;
                let f = self.ffn(g, lv, xn)?;
                Ok((g.add(x, f)?, probs))
            }
            NormOrder::Post => {
                let (a, probs) = self.attend(g, lv, x, kv, mask)?;
                let x = g.add(x, a)?;
                let x = g.layer_norm(x, lv.ln1.0, lv.ln1.1)?;
                let f = self.ffn(g, lv, x)?;
                let x = g.add(x, f)?;
                Ok((g.layer_norm(x, lv.ln2.0, lv.ln2.1)?, probs))
            }
        }
    }

    /// One decoder layer: magnitude update from syndromes, then syndrome
    /// update from the new magnitudes, both with the same weights.
    #[allow(clippy::too_many_arguments)]
    fn cross_layer(
        &self,
        g: &mut Graph,
        pv: &[Var],
        layer: usize,
        branch: usize,
        pc: &PcmContext,
        m: Var,
        s: Var,
        rec: &mut Vec<AttentionRecord>,
    ) -> Result<(Var, Var), ModelError> {
        let lv = LayerVars::at(pv, 2 + layer * PER_LAYER);
        let (m, p1) = self.block(g, &lv, m, s, &pc.bit_to_check)?;
        let (s, p2) = self.block(g, &lv, s, m, &pc.check_to_bit)?;
        rec.push(AttentionRecord { layer, branch, kind: AttentionKind::BitToCheck, probs: p1 });
        rec.push(AttentionRecord { layer, branch, kind: AttentionKind::CheckToBit, probs: p2 });
        Ok((m, s))
    }

    fn head_base(&self) -> usize {
        2 + self.config.n_layers * PER_LAYER
    }

    /// Final norm, per-position `d -> 1`, then `(n+m) -> n`.
    fn dense_head(&self, g: &mut Graph, pv: &[Var], x: Var, batch: &Batch) -> Result<Var, ModelError> {
        let hb = self.head_base();
        let x = g.layer_norm(x, pv[hb], pv[hb + 1])?;
        let r = g.shape(x)[1];
        let y = g.matmul(x, pv[hb + 2])?;
        let y = g.add(y, pv[hb + 3])?;
        let y = g.reshape(y, [batch.size, 1, r])?;
        let y = g.matmul(y, pv[hb + 4])?;
        Ok(g.add(y, pv[hb + 5])?)
    }

    fn crossmpt(
        &self,
        g: &mut Graph,
        pv: &[Var],
        ctx: &CodeContext,
        batch: &Batch,
        rec: &mut Vec<AttentionRecord>,
    ) -> Result<Var, ModelError> {
        let pc = &ctx.pcms[0];
        let mag = self.magnitude_input(g, batch)?;
        let syn = self.syndrome_input(g, batch, 0, pc.rows())?;
        let mut m = g.mul(mag, pv[0])?;
        let mut s = g.mul(syn, pv[1])?;
        for l in 0..self.config.n_layers {
            (m, s) = self.cross_layer(g, pv, l, 0, pc, m, s, rec)?;
        }
        let x = g.concat_rows(m, s)?;
        self.dense_head(g, pv, x, batch)
    }

    fn ecct(
        &self,
        g: &mut Graph,
        pv: &[Var],
        ctx: &CodeContext,
        batch: &Batch,
        rec: &mut Vec<AttentionRecord>,
    ) -> Result<Var, ModelError> {
        let mask = match self.config.variant {
            Variant::EcctFullyMasked => &ctx.ecct_fully_masked,
            _ => &ctx.ecct,
        };
        let mag = self.magnitude_input(g, batch)?;
        let syn = self.syndrome_input(g, batch, 0, ctx.pcms[0].rows())?;
        let m = g.mul(mag, pv[0])?;
        let s = g.mul(syn, pv[1])?;
        let mut x = g.concat_rows(m, s)?;
        for l in 0..self.config.n_layers {
            let lv = LayerVars::at(pv, 2 + l * PER_LAYER);
            let (nx, probs) = self.block(g, &lv, x, x, mask)?;
            x = nx;
            rec.push(AttentionRecord { layer: l, branch: 0, kind: AttentionKind::SelfAttention, probs });
        }
        self.dense_head(g, pv, x, batch)
    }

    /// Weight-shared code-agnostic towers over the PCMs in `order`; each
    /// tower's output is `norm(M) + Hᵀ·norm(S)`, summed in `order`, then a
    /// shared `d -> 1` projection.
    fn towers(
        &self,
        g: &mut Graph,
        pv: &[Var],
        ctx: &CodeContext,
        batch: &Batch,
        order: &[usize],
        rec: &mut Vec<AttentionRecord>,
    ) -> Result<Var, ModelError> {
        let mag = self.magnitude_input(g, batch)?;
        let m0 = g.mul(mag, pv[0])?;
        let mut states = Vec::with_capacity(order.len());
        for &j in order {
            let syn = self.syndrome_input(g, batch, j, ctx.pcms[j].rows())?;
            states.push((m0, g.mul(syn, pv[1])?));
        }
        let p = order.len();
        for l in 0..self.config.n_layers {
            for (slot, &j) in order.iter().enumerate() {
                let (m, s) = states[slot];
                states[slot] = self.cross_layer(g, pv, l, j, &ctx.pcms[j], m, s, rec)?;
            }
            if self.config.fusion == Fusion::PerLayer && p > 1 && l + 1 < self.config.n_layers {
                let mut acc = states[0].0;
                for st in &states[1..] {
                    acc = g.add(acc, st.0)?;
                }
                let mean = g.scale(acc, 1.0 / p as f64);
                states.iter_mut().for_each(|st| st.0 = mean);
            }
        }
        let hb = self.head_base();
        let mut fused: Option<Var> = None;
        for (slot, &j) in order.iter().enumerate() {
            let (m, s) = states[slot];
            let mn = g.layer_norm(m, pv[hb], pv[hb + 1])?;
            let sn = g.layer_norm(s, pv[hb], pv[hb + 1])?;
            let ht = g.constant(ctx.pcms[j].ht.clone());
            let resized = g.matmul(ht, sn)?;
            let e = g.add(mn, resized)?;
            fused = Some(match fused {
                None => e,
                Some(f) => g.add(f, e)?,
            });
        }
        let fused = fused.expect("at least one tower");
        let y = g.matmul(fused, pv[hb + 2])?;
        let y = g.add(y, pv[hb + 3])?;
        Ok(g.reshape(y, [batch.size, 1, batch.n])?)
    }

    /// Runs the model and returns hard decisions for every sample.
    pub fn decode(&self, ctx: &CodeContext, batch: &Batch) -> Result<Vec<u8>, ModelError> {
        let f = self.forward(ctx, batch)?;
        Ok(decide(&batch.y, f.logits()))
    }
}

/// `x̂ = bin(sign(y·f))`: the hard decision flipped wherever `f < 0`.
pub fn decide(y: &[f64], logits: &[f64]) -> Vec<u8> {
    assert_eq!(y.len(), logits.len());
    y.iter().zip(logits).map(|(&yi, &fi)| bin_sign(yi) ^ (fi < 0.0) as u8).collect()
}

/// Logits that a perfect noise estimator would produce for `target`.
pub fn oracle_logits(target: &[u8], magnitude: f64) -> Vec<f64> {
    target.iter().map(|&z| if z == 1 { -magnitude } else { magnitude }).collect()
}
