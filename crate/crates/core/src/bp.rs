//! Flooding-schedule belief propagation on the Tanner graph.
//!
//! LLRs follow `ln P(0)/P(1)`, so for BPSK over AWGN the channel value is
//! `2y/σ²` and a negative posterior decides 1.

use serde::{Deserialize, Serialize};

use crate::gf2::BinaryMatrix;

const TANH_CLIP: f64 = 1.0 - 1e-12;

#[derive(Debug, Clone)]
pub struct TannerGraph {
    n: usize,
    m: usize,
    /// `(check, variable)` for every one of `H`, row-major.
    edges: Vec<(usize, usize)>,
    check_edges: Vec<Vec<usize>>,
    var_edges: Vec<Vec<usize>>,
}

impl TannerGraph {
    pub fn new(h: &BinaryMatrix) -> TannerGraph {
        let (m, n) = (h.rows(), h.cols());
        let mut edges = Vec::new();
        let mut check_edges = vec![Vec::new(); m];
        let mut var_edges = vec![Vec::new(); n];
        for c in 0..m {
            for v in h.row_support(c) {
                check_edges[c].push(edges.len());
                var_edges[v].push(edges.len());
                edges.push((c, v));
            }
        }
        TannerGraph { n, m, edges, check_edges, var_edges }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn check_neighbors(&self, c: usize) -> impl Iterator<Item = usize> + '_ {
        self.check_edges[c].iter().map(|&e| self.edges[e].1)
    }

    pub fn var_neighbors(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        self.var_edges[v].iter().map(|&e| self.edges[e].0)
    }

    pub fn syndrome_is_zero(&self, x: &[u8]) -> bool {
        self.check_edges.iter().all(|es| es.iter().fold(0u8, |acc, &e| acc ^ x[self.edges[e].1]) == 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BpAlgorithm {
    SumProduct,
    MinSum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BpConfig {
    pub max_iters: usize,
    pub algorithm: BpAlgorithm,
    pub early_stop: bool,
}

impl BpConfig {
    pub fn sum_product(max_iters: usize) -> BpConfig {
        BpConfig { max_iters: max_iters.max(1), algorithm: BpAlgorithm::SumProduct, early_stop: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BpOutput {
    pub x_hat: Vec<u8>,
    pub iterations: usize,
    pub converged: bool,
    pub posterior: Vec<f64>,
}

fn hard(l: &[f64]) -> Vec<u8> {
    l.iter().map(|&v| (v < 0.0) as u8).collect()
}

pub fn bp_decode(llr: &[f64], graph: &TannerGraph, cfg: &BpConfig) -> BpOutput {
    assert_eq!(llr.len(), graph.n, "LLR length must match the code");
    let x0 = hard(llr);
    if cfg.early_stop && graph.syndrome_is_zero(&x0) {
        return BpOutput { x_hat: x0, iterations: 1, converged: true, posterior: llr.to_vec() };
    }
    let ne = graph.edges.len();
    let mut v2c: Vec<f64> = graph.edges.iter().map(|&(_, v)| llr[v]).collect();
    let mut c2v = vec![0.0; ne];
    let mut posterior = llr.to_vec();
    let mut x_hat = x0;
    let mut scratch: Vec<f64> = Vec::new();
    let iters = cfg.max_iters.max(1);
    for it in 1..=iters {
        for es in &graph.check_edges {
            match cfg.algorithm {
                BpAlgorithm::SumProduct => check_update_tanh(es, &v2c, &mut c2v, &mut scratch),
                BpAlgorithm::MinSum => check_update_min(es, &v2c, &mut c2v),
            }
        }
        for (v, es) in graph.var_edges.iter().enumerate() {
            let total: f64 = llr[v] + es.iter().map(|&e| c2v[e]).sum::<f64>();
            posterior[v] = total;
            for &e in es {
                v2c[e] = total - c2v[e];
            }
        }
        x_hat = hard(&posterior);
        if cfg.early_stop && graph.syndrome_is_zero(&x_hat) {
            return BpOutput { x_hat, iterations: it, converged: true, posterior };
        }
    }
    let converged = graph.syndrome_is_zero(&x_hat);
    BpOutput { x_hat, iterations: iters, converged, posterior }
}

/// Leave-one-out tanh products via prefix and suffix passes.
fn check_update_tanh(es: &[usize], v2c: &[f64], c2v: &mut [f64], t: &mut Vec<f64>) {
    let d = es.len();
    t.clear();
    t.extend(es.iter().map(|&e| (0.5 * v2c[e]).tanh().clamp(-TANH_CLIP, TANH_CLIP)));
    let mut prefix = 1.0;
    for i in 0..d {
        c2v[es[i]] = prefix;
        prefix *= t[i];
    }
    let mut suffix = 1.0;
    for i in (0..d).rev() {
        let prod = (c2v[es[i]] * suffix).clamp(-TANH_CLIP, TANH_CLIP);
        c2v[es[i]] = 2.0 * prod.atanh();
        suffix *= t[i];
    }
}

fn check_update_min(es: &[usize], v2c: &[f64], c2v: &mut [f64]) {
    let mut sign = 1.0;
    let (mut min1, mut min2, mut arg) = (f64::INFINITY, f64::INFINITY, usize::MAX);
    for (i, &e) in es.iter().enumerate() {
        let q = v2c[e];
        if q < 0.0 {
            sign = -sign;
        }
        let a = q.abs();
        if a < min1 {
            min2 = min1;
            min1 = a;
            arg = i;
        } else if a < min2 {
            min2 = a;
        }
    }
    for (i, &e) in es.iter().enumerate() {
        let q = v2c[e];
        let s = if q < 0.0 { -sign } else { sign };
        let mag = if i == arg { min2 } else { min1 };
        c2v[e] = s * mag;
    }
}
