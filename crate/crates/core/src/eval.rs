//! Monte-Carlo BER/FER estimation, per-bit tallies and attention dumps.
//!
//! Frames are simulated in chunks; each chunk is a pure function of
//! `(seed, SNR index, chunk index)` and chunks are merged in order with the
//! stop rule checked between them, so counts do not depend on the worker count.

use std::fs;
use std::io::{self, Write};
use std::ops::Range;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bp::{bp_decode, BpConfig, TannerGraph};
use crate::channel::{self, ebn0_to_sigma, llr, ChannelError, ChannelSample, CodewordPolicy, NoiseSpec};
use crate::code::Code;
use crate::ensemble::Coverage;
use crate::model::{AttentionKind, Batch, CodeContext, Model, ModelError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error("bit position {pos} is outside a length-{n} code")]
    Position { pos: usize, n: usize },
    #[error("decoder returned {got} bits for a length-{n} frame")]
    Length { got: usize, n: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

pub trait BatchDecoder: Sync {
    fn name(&self) -> String;
    fn decode(&self, samples: &[ChannelSample]) -> Result<Vec<Vec<u8>>, EvalError>;
}

/// Hard decisions on the channel output.
pub struct Uncoded;

impl BatchDecoder for Uncoded {
    fn name(&self) -> String {
        "uncoded".into()
    }

    fn decode(&self, samples: &[ChannelSample]) -> Result<Vec<Vec<u8>>, EvalError> {
        Ok(samples.iter().map(|s| s.y_b.clone()).collect())
    }
}

pub struct BpDecoder {
    graph: TannerGraph,
    cfg: BpConfig,
    rate: f64,
}

impl BpDecoder {
    pub fn new(code: &Code, cfg: BpConfig) -> BpDecoder {
        BpDecoder { graph: TannerGraph::new(code.pcm()), cfg, rate: code.rate() }
    }
}

impl BatchDecoder for BpDecoder {
    fn name(&self) -> String {
        format!("bp{}", self.cfg.max_iters)
    }

    fn decode(&self, samples: &[ChannelSample]) -> Result<Vec<Vec<u8>>, EvalError> {
        samples
            .iter()
            .map(|s| {
                let sigma = ebn0_to_sigma(s.ebn0_db, self.rate)?;
                Ok(bp_decode(&llr(&s.y, sigma), &self.graph, &self.cfg).x_hat)
            })
            .collect()
    }
}

pub struct NeuralDecoder<'a> {
    model: &'a Model,
    ctx: CodeContext,
}

impl<'a> NeuralDecoder<'a> {
    /// `code` must carry the PCM list the samples' syndromes were taken on.
    pub fn new(model: &'a Model, code: &Code) -> Result<NeuralDecoder<'a>, EvalError> {
        let ctx = CodeContext::new(code)?;
        model.check_context(&ctx)?;
        Ok(NeuralDecoder { model, ctx })
    }
}

impl BatchDecoder for NeuralDecoder<'_> {
    fn name(&self) -> String {
        self.model.config().variant.to_string()
    }

    fn decode(&self, samples: &[ChannelSample]) -> Result<Vec<Vec<u8>>, EvalError> {
        let x = self.model.decode(&self.ctx, &Batch::from_samples(samples))?;
        Ok(x.chunks(self.ctx.n).map(<[u8]>::to_vec).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopRule {
    pub min_errors: u64,
    pub max_bits: u64,
}

impl Default for StopRule {
    fn default() -> Self {
        StopRule { min_errors: 100, max_bits: 10_000_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub seed: u64,
    pub policy: CodewordPolicy,
    pub stop: StopRule,
    pub chunk_frames: usize,
    /// Chunks simulated concurrently before the stop rule is consulted.
    pub wave: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { seed: 0, policy: CodewordPolicy::Random, stop: StopRule::default(), chunk_frames: 256, wave: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BerRow {
    pub ebn0_db: f64,
    pub bits_sent: u64,
    pub bit_errors: u64,
    pub frames_sent: u64,
    pub frame_errors: u64,
    pub ber: f64,
    pub fer: f64,
    /// `None` when no error was seen.
    pub neg_ln_ber: Option<f64>,
    pub ci_low: f64,
    pub ci_high: f64,
    pub per_bit_errors: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BerReport {
    pub decoder: String,
    pub code: String,
    pub n: usize,
    pub rows: Vec<BerRow>,
}

/// 95% Wilson score interval for `k` successes in `n` trials.
pub fn wilson_interval(k: u64, n: u64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    const Z: f64 = 1.959_963_984_540_054;
    let (k, n) = (k as f64, n as f64);
    let p = k / n;
    let z2 = Z * Z;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = Z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    let lo = if k == 0.0 { 0.0 } else { (centre - half).max(0.0) };
    let hi = if k == n { 1.0 } else { (centre + half).min(1.0) };
    (lo, hi)
}

/// Gaussian tail `Q(x)`.
pub fn q_function(x: f64) -> f64 {
    0.5 * libm::erfc(x / std::f64::consts::SQRT_2)
}

/// Closed-form uncoded BPSK BER at the rate-normalized Eb/N0.
pub fn uncoded_ber(ebn0_db: f64, rate: f64) -> f64 {
    q_function((2.0 * rate * 10f64.powf(ebn0_db / 10.0)).sqrt())
}

#[derive(Default)]
struct Tally {
    bits: u64,
    bit_errors: u64,
    frames: u64,
    frame_errors: u64,
    per_bit: Vec<u64>,
}

fn snr_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn run_chunk(
    decoder: &dyn BatchDecoder,
    code: &Code,
    spec: &NoiseSpec,
    cfg: &EvalConfig,
    chunk: u64,
) -> Result<Tally, EvalError> {
    let f = cfg.chunk_frames as u64;
    let samples: Vec<ChannelSample> = (0..f).map(|i| channel::sample(code, spec, cfg.policy, chunk * f + i)).collect();
    let decided = decoder.decode(&samples)?;
    let n = code.n();
    let mut t = Tally { per_bit: vec![0; n], ..Tally::default() };
    for (s, x) in samples.iter().zip(&decided) {
        if x.len() != n {
            return Err(EvalError::Length { got: x.len(), n });
        }
        let mut errs = 0;
        for i in 0..n {
            if x[i] != s.x[i] {
                t.per_bit[i] += 1;
                errs += 1;
            }
        }
        t.bits += n as u64;
        t.bit_errors += errs;
        t.frames += 1;
        t.frame_errors += (errs > 0) as u64;
    }
    Ok(t)
}

pub fn estimate_ber(
    decoder: &dyn BatchDecoder,
    code: &Code,
    ebn0_list: &[f64],
    cfg: &EvalConfig,
) -> Result<BerReport, EvalError> {
    let mut rows = Vec::with_capacity(ebn0_list.len());
    let wave = cfg.wave.max(1) as u64;
    for (si, &snr) in ebn0_list.iter().enumerate() {
        let spec = NoiseSpec::fixed(snr, code.rate(), snr_seed(cfg.seed, si))?;
        let mut total = Tally { per_bit: vec![0; code.n()], ..Tally::default() };
        let done = |t: &Tally| t.bit_errors >= cfg.stop.min_errors || t.bits >= cfg.stop.max_bits;
        let mut next = 0u64;
        'outer: while !done(&total) {
            let parts: Vec<Result<Tally, EvalError>> =
                (next..next + wave).into_par_iter().map(|c| run_chunk(decoder, code, &spec, cfg, c)).collect();
            next += wave;
            for part in parts {
                let p = part?;
                total.bits += p.bits;
                total.bit_errors += p.bit_errors;
                total.frames += p.frames;
                total.frame_errors += p.frame_errors;
                total.per_bit.iter_mut().zip(&p.per_bit).for_each(|(a, b)| *a += b);
                if done(&total) {
                    break 'outer;
                }
            }
        }
        let ber = total.bit_errors as f64 / total.bits as f64;
        let (ci_low, ci_high) = wilson_interval(total.bit_errors, total.bits);
        rows.push(BerRow {
            ebn0_db: snr,
            bits_sent: total.bits,
            bit_errors: total.bit_errors,
            frames_sent: total.frames,
            frame_errors: total.frame_errors,
            ber,
            fer: total.frame_errors as f64 / total.frames as f64,
            neg_ln_ber: (total.bit_errors > 0).then(|| -ber.ln()),
            ci_low,
            ci_high,
            per_bit_errors: total.per_bit,
        });
    }
    Ok(BerReport { decoder: decoder.name(), code: code.name().to_string(), n: code.n(), rows })
}

fn io_err(path: &Path) -> impl Fn(io::Error) -> EvalError + '_ {
    move |source| EvalError::Io { path: path.display().to_string(), source }
}

pub fn write_ber_csv(report: &BerReport, mut w: impl Write) -> io::Result<()> {
    writeln!(w, "ebn0_db,bits_sent,bit_errors,frames_sent,frame_errors,ber,fer,neg_ln_ber,ci95_low,ci95_high")?;
    for r in &report.rows {
        let nl = r.neg_ln_ber.map_or_else(|| "inf".to_string(), |v| v.to_string());
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            r.ebn0_db, r.bits_sent, r.bit_errors, r.frames_sent, r.frame_errors, r.ber, r.fer, nl, r.ci_low, r.ci_high
        )?;
    }
    Ok(())
}

pub fn save_ber_csv(report: &BerReport, path: &Path) -> Result<(), EvalError> {
    let f = fs::File::create(path).map_err(io_err(path))?;
    write_ber_csv(report, io::BufWriter::new(f)).map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BitwiseRow {
    pub bit: usize,
    pub errors: u64,
    pub frames: u64,
    pub ber: f64,
    /// Ensemble branches with an identity column at this bit, if known.
    pub covered_by: Option<Vec<usize>>,
}

pub fn bitwise_ber(row: &BerRow, coverage: Option<&Coverage>) -> Vec<BitwiseRow> {
    row.per_bit_errors
        .iter()
        .enumerate()
        .map(|(bit, &errors)| BitwiseRow {
            bit,
            errors,
            frames: row.frames_sent,
            ber: if row.frames_sent == 0 { 0.0 } else { errors as f64 / row.frames_sent as f64 },
            covered_by: coverage.map(|c| c.per_bit[bit].clone()),
        })
        .collect()
}

pub fn write_bitwise_csv(ebn0_db: f64, rows: &[BitwiseRow], mut w: impl Write) -> io::Result<()> {
    writeln!(w, "ebn0_db,bit,errors,frames,ber,covered,branches")?;
    for r in rows {
        let (cov, br) = match &r.covered_by {
            None => (String::new(), String::new()),
            Some(b) => {
                let list: Vec<String> = b.iter().map(|x| x.to_string()).collect();
                ((!b.is_empty()).to_string(), list.join(";"))
            }
        };
        writeln!(w, "{},{},{},{},{},{},{}", ebn0_db, r.bit, r.errors, r.frames, r.ber, cov, br)?;
    }
    Ok(())
}

/// All-zero codeword received noiselessly except for a sign error at `error_bit`.
pub fn forced_error_sample(code: &Code, error_bit: Option<usize>) -> Result<ChannelSample, EvalError> {
    let n = code.n();
    let mut y = vec![1.0; n];
    if let Some(pos) = error_bit {
        if pos >= n {
            return Err(EvalError::Position { pos, n });
        }
        y[pos] = -1.0;
    }
    Ok(ChannelSample::from_received(code, vec![0; n], y, f64::INFINITY))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttentionDump {
    pub layer: usize,
    pub branch: usize,
    pub kind: String,
    pub rows: usize,
    pub cols: usize,
    /// Row-major attention weights.
    pub probs: Vec<f64>,
    /// Sums down each column.
    pub col_sums: Vec<f64>,
}

fn kind_name(k: AttentionKind) -> &'static str {
    match k {
        AttentionKind::BitToCheck => "bit_to_check",
        AttentionKind::CheckToBit => "check_to_bit",
        AttentionKind::SelfAttention => "self",
    }
}

/// Attention maps of one sample for 0-based layers in `layers`. Multi-head
/// maps are averaged over heads.
pub fn dump_attention(
    model: &Model,
    code: &Code,
    sample: &ChannelSample,
    layers: Range<usize>,
) -> Result<Vec<AttentionDump>, EvalError> {
    let ctx = CodeContext::new(code)?;
    let fwd = model.forward(&ctx, &Batch::from_samples(std::slice::from_ref(sample)))?;
    let mut out = Vec::new();
    for rec in fwd.attention.iter().filter(|r| layers.contains(&r.layer)) {
        let t = fwd.graph.value(rec.probs);
        let [heads, rows, cols] = t.shape();
        let mut probs = vec![0.0; rows * cols];
        for h in 0..heads {
            probs.iter_mut().zip(t.matrix(h)).for_each(|(a, b)| *a += b / heads as f64);
        }
        let col_sums = (0..cols).map(|c| (0..rows).map(|r| probs[r * cols + c]).sum()).collect();
        out.push(AttentionDump {
            layer: rec.layer,
            branch: rec.branch,
            kind: kind_name(rec.kind).to_string(),
            rows,
            cols,
            probs,
            col_sums,
        });
    }
    Ok(out)
}

/// One CSV per dump: the matrix rows, then a `sum` row.
pub fn write_attention_dumps(dumps: &[AttentionDump], dir: &Path) -> Result<Vec<String>, EvalError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let multi_branch = dumps.iter().any(|d| d.branch > 0);
    let mut names = Vec::new();
    for d in dumps {
        let name = if multi_branch {
            format!("attn_layer{}_{}_branch{}.csv", d.layer + 1, d.kind, d.branch)
        } else {
            format!("attn_layer{}_{}.csv", d.layer + 1, d.kind)
        };
        let path = dir.join(&name);
        let mut w = io::BufWriter::new(fs::File::create(&path).map_err(io_err(&path))?);
        let write = |w: &mut io::BufWriter<fs::File>| -> io::Result<()> {
            let header: Vec<String> = (0..d.cols).map(|c| format!("c{c}")).collect();
            writeln!(w, "row,{}", header.join(","))?;
            for r in 0..d.rows {
                let vals: Vec<String> = d.probs[r * d.cols..(r + 1) * d.cols].iter().map(|v| v.to_string()).collect();
                writeln!(w, "{r},{}", vals.join(","))?;
            }
            let sums: Vec<String> = d.col_sums.iter().map(|v| v.to_string()).collect();
            writeln!(w, "sum,{}", sums.join(","))?;
            w.flush()
        };
        write(&mut w).map_err(io_err(&path))?;
        names.push(name);
    }
    Ok(names)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bp::BpConfig;
    use crate::model::{CodeDims, ModelConfig, Variant};
    use crate::registry;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    struct Oracle;

    impl BatchDecoder for Oracle {
        fn name(&self) -> String {
            "oracle".into()
        }

        fn decode(&self, samples: &[ChannelSample]) -> Result<Vec<Vec<u8>>, EvalError> {
            Ok(samples.iter().map(|s| s.x.clone()).collect())
        }
    }

    fn quick(seed: u64) -> EvalConfig {
        EvalConfig { seed, stop: StopRule { min_errors: 2000, max_bits: 2_000_000 }, ..EvalConfig::default() }
    }

    #[test]
    fn wilson_reference() {
        // 10 of 100: centre and half-width from the score formula.
        let (lo, hi) = wilson_interval(10, 100);
        assert!((lo - 0.055_229_2).abs() < 1e-6 && (hi - 0.174_366_2).abs() < 1e-6, "{lo} {hi}");
        let (lo, hi) = wilson_interval(0, 1000);
        assert_eq!(lo, 0.0);
        assert!(hi > 0.0 && hi < 0.004);
    }

    #[test]
    fn q_function_reference() {
        assert!((q_function(0.0) - 0.5).abs() < 1e-15);
        assert!((q_function(1.0) - 0.158_655_253_931_457_05).abs() < 1e-15);
        assert!((q_function(3.0) - 1.349_898_031_630_094_6e-3).abs() < 1e-16);
    }

    #[test]
    fn uncoded_matches_closed_form() {
        let code = registry::load("bch_31_16").unwrap();
        let rep = estimate_ber(&Uncoded, &code, &[2.0, 4.0], &quick(1)).unwrap();
        for r in &rep.rows {
            let want = uncoded_ber(r.ebn0_db, code.rate());
            assert!(r.ci_low <= want && want <= r.ci_high, "{} {want} {:?}", r.ber, (r.ci_low, r.ci_high));
            assert_eq!(r.per_bit_errors.iter().sum::<u64>(), r.bit_errors);
        }
    }

    #[test]
    fn oracle_is_censored() {
        let code = registry::load("hamming_7_4").unwrap();
        let cfg = EvalConfig { stop: StopRule { min_errors: 1, max_bits: 50_000 }, ..EvalConfig::default() };
        let rep = estimate_ber(&Oracle, &code, &[1.0], &cfg).unwrap();
        assert_eq!(rep.rows[0].ber, 0.0);
        assert_eq!(rep.rows[0].neg_ln_ber, None);
        assert!(rep.rows[0].bits_sent >= 50_000);
        let mut buf = Vec::new();
        write_ber_csv(&rep, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().lines().nth(1).unwrap().contains(",inf,"));
    }

    #[test]
    fn counts_are_reproducible_across_workers() {
        let code = registry::load("bch_15_7").unwrap();
        let dec = BpDecoder::new(&code, BpConfig::sum_product(5));
        let cfg = EvalConfig { stop: StopRule { min_errors: 300, max_bits: 10_000_000 }, ..quick(3) };
        let run = |threads| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| estimate_ber(&dec, &code, &[3.0, 5.0], &cfg).unwrap())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn random_and_all_zero_agree_for_bp() {
        let code = registry::load("bch_31_16").unwrap();
        let dec = BpDecoder::new(&code, BpConfig::sum_product(10));
        let r = estimate_ber(&dec, &code, &[3.0], &quick(5)).unwrap().rows.remove(0);
        let z = estimate_ber(&dec, &code, &[3.0], &EvalConfig { policy: CodewordPolicy::AllZero, ..quick(6) })
            .unwrap()
            .rows
            .remove(0);
        assert!(r.ci_low <= z.ci_high && z.ci_low <= r.ci_high, "{:?} {:?}", (r.ci_low, r.ci_high), (z.ci_low, z.ci_high));
    }

    #[test]
    fn uniform_flips_have_flat_bitwise_profile() {
        let code = registry::load("bch_63_45").unwrap();
        let cfg = EvalConfig { stop: StopRule { min_errors: 50_000, max_bits: u64::MAX }, ..quick(8) };
        let row = estimate_ber(&Uncoded, &code, &[1.0], &cfg).unwrap().rows.remove(0);
        let table = bitwise_ber(&row, None);
        assert_eq!(table.len(), code.n());
        let mean = row.bit_errors as f64 / code.n() as f64;
        let chi2: f64 = table.iter().map(|r| (r.errors as f64 - mean).powi(2) / mean).sum();
        let crit = ChiSquared::new((code.n() - 1) as f64).unwrap().inverse_cdf(0.999);
        assert!(chi2 < crit, "{chi2} >= {crit}");
    }

    #[test]
    fn bitwise_joins_coverage() {
        let code = registry::load("bch_31_21").unwrap();
        let ens = crate::ensemble::build_ensemble(&code, 3).unwrap();
        let cov = crate::ensemble::coverage_report(&ens.pcms);
        let row = estimate_ber(&Uncoded, &code, &[4.0], &quick(2)).unwrap().rows.remove(0);
        let table = bitwise_ber(&row, Some(&cov));
        assert_eq!(table.len(), 31);
        assert_eq!(table[30].covered_by, Some(vec![]));
        assert_eq!(table[12].covered_by, Some(vec![1]));
        let mut buf = Vec::new();
        write_bitwise_csv(4.0, &table, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 32);
    }

    #[test]
    fn attention_dump_shapes_and_zeros() {
        let code = registry::load("ldpc_32_16").unwrap();
        let model = Model::init(ModelConfig::new(Variant::CrossMpt, 3, 8), Some(CodeDims::of(&code)), 1).unwrap();
        let s = forced_error_sample(&code, Some(0)).unwrap();
        assert_eq!(s.target[0], 1);
        let dumps = dump_attention(&model, &code, &s, 0..2).unwrap();
        assert_eq!(dumps.len(), 4);
        let h = code.pcm();
        for d in &dumps {
            for r in 0..d.rows {
                for c in 0..d.cols {
                    let open = if d.kind == "bit_to_check" { h.get(c, r) } else { h.get(r, c) };
                    if !open {
                        assert_eq!(d.probs[r * d.cols + c].to_bits(), 0);
                    }
                }
            }
            let total: f64 = d.col_sums.iter().sum();
            assert!((total - d.rows as f64).abs() < 1e-9);
        }
        let clean = dump_attention(&model, &code, &forced_error_sample(&code, None).unwrap(), 0..3).unwrap();
        assert_eq!(clean.len(), 6);
        let (n, m) = (code.n(), h.rows());
        for d in clean.iter().chain(&dumps) {
            let want = if d.kind == "bit_to_check" { (n, m) } else { (m, n) };
            assert_eq!((d.rows, d.cols), want);
        }
        assert!(matches!(forced_error_sample(&code, Some(32)), Err(EvalError::Position { .. })));
        let dir = tempfile::tempdir().unwrap();
        let names = write_attention_dumps(&dumps, dir.path()).unwrap();
        assert_eq!(names.len(), 4);
        assert!(names.contains(&"attn_layer2_check_to_bit.csv".to_string()));
    }
}
