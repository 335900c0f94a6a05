use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crossmpt_core::bp::BpAlgorithm;
use crossmpt_core::code::{load_code, parse_code_name, write_alist, PcmFormat};
use crossmpt_core::complexity::check_reference_density;
use crossmpt_core::eval::{
    bitwise_ber, dump_attention, forced_error_sample, save_ber_csv, write_bitwise_csv, BpDecoder, NeuralDecoder, Uncoded,
};
use crossmpt_core::gf2::max_shift;
use crossmpt_core::train::train_to_dir;
use crossmpt_core::{
    analyze as analyze_code, build_ensemble, coverage_report, estimate_ber, registry, BatchDecoder, BpConfig,
    Checkpoint, Code, CodeClass, CodeContext, CodewordPolicy, EvalConfig, Model, StopRule, Trainer, Variant,
};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{self, Layer};
use crate::error::CliError;
use crate::manifest::Manifest;
use crate::{AnalyzeArgs, CodeArgs, DecoderKind, DumpArgs, EnsembleArgs, EvalArgs, PolicyArg, TrainArgs, OUT_ENV};

fn out_dir(given: Option<PathBuf>, sub: &str) -> Result<PathBuf, CliError> {
    let dir = given.unwrap_or_else(|| {
        std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from).join(sub)
    });
    fs::create_dir_all(&dir).map_err(CliError::io(&dir))?;
    Ok(dir)
}

fn file_sha256(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(CliError::io(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, text + "\n").map_err(CliError::io(path))
}

/// Registry code, or a PCM file whose stem may follow the `class_n_k` pattern.
fn code_from_args(a: &CodeArgs) -> Result<Option<Code>, CliError> {
    match (&a.code, &a.pcm_file) {
        (Some(_), Some(_)) => Err(CliError::Usage("give --code or --pcm-file, not both".into())),
        (Some(name), None) => Ok(Some(registry::load(name)?)),
        (None, Some(path)) => {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
            let (class, k) = parse_code_name(stem).map_or((CodeClass::Other, None), |(c, _, k)| (c, Some(k)));
            Ok(Some(load_code(path, PcmFormat::from_path(path), class, a.cyclic, k)?))
        }
        (None, None) => Ok(None),
    }
}

fn require_code(a: &CodeArgs) -> Result<Code, CliError> {
    code_from_args(a)?.ok_or_else(|| CliError::Usage("a code is required (--code or --pcm-file)".into()))
}

/// The code a checkpointed model runs on: a stored training code when the
/// name matches, otherwise the requested code with ensemble PCMs attached
/// for ensemble models.
fn code_for_model(ck: &Checkpoint, model: &Model, a: &CodeArgs, ensemble_p: Option<usize>) -> Result<Code, CliError> {
    let requested = code_from_args(a)?;
    let stored = match &requested {
        None => ck.header.codes.first(),
        Some(c) if a.pcm_file.is_none() => ck.stored_code(c.name()),
        Some(_) => None,
    };
    if let (Some(s), None) = (stored, ensemble_p) {
        return Ok(s.to_code()?);
    }
    let base = match requested {
        Some(c) => c,
        None => stored.ok_or_else(|| CliError::Usage("checkpoint stores no code; pass --code".into()))?.to_code()?,
    };
    let code = if model.config().variant == Variant::CrossEd {
        let p = ensemble_p
            .or(ck.header.train.as_ref().and_then(|t| t.ensemble_p))
            .unwrap_or_else(|| max_shift(base.n(), base.redundancy()) + 1);
        build_ensemble(&base, p)?.code(&base)?
    } else {
        base
    };
    Ok(code)
}

fn parse_snrs(s: &str) -> Result<Vec<f64>, CliError> {
    let bad = || CliError::Config(format!("--ebn0: cannot parse `{s}`"));
    if s.contains(':') {
        let parts: Vec<f64> = s.split(':').map(|p| p.trim().parse().map_err(|_| bad())).collect::<Result<_, _>>()?;
        let (lo, hi, step) = match parts.as_slice() {
            [lo, hi] => (*lo, *hi, 1.0),
            [lo, hi, step] => (*lo, *hi, *step),
            _ => return Err(bad()),
        };
        if !(step > 0.0) || hi < lo {
            return Err(bad());
        }
        let count = ((hi - lo) / step + 1e-9).floor() as usize + 1;
        return Ok((0..count).map(|i| lo + i as f64 * step).collect());
    }
    let v: Vec<f64> = config::split_list(s).iter().map(|p| p.parse().map_err(|_| bad())).collect::<Result<_, _>>()?;
    if v.is_empty() {
        return Err(bad());
    }
    Ok(v)
}

fn parse_layers(s: &str, n_layers: usize) -> Result<(usize, usize), CliError> {
    let bad = || CliError::Config(format!("--layers `{s}`: expected a 1-based range within 1..{n_layers}"));
    let (a, b) = match s.split_once("..").or_else(|| s.split_once('-')) {
        Some((a, b)) => (a.trim(), b.trim().trim_start_matches('=')),
        None => (s.trim(), s.trim()),
    };
    let a: usize = a.parse().map_err(|_| bad())?;
    let b: usize = b.parse().map_err(|_| bad())?;
    if a == 0 || b < a || b > n_layers {
        return Err(bad());
    }
    Ok((a, b))
}

/// Output files of a run directory, excluding the manifest.
fn artifacts(dir: &Path) -> Result<Vec<String>, CliError> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).map_err(CliError::io(dir))? {
        let e = e.map_err(CliError::io(dir))?;
        let name = e.file_name().to_string_lossy().into_owned();
        if name != "manifest.json" && e.path().is_file() {
            out.push(name);
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct TrainSummary {
    variant: String,
    param_count: usize,
    steps: u64,
    epochs: Vec<crossmpt_core::train::EpochStats>,
    lr_first: Option<f64>,
    lr_last: Option<f64>,
}

pub fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let file = match &a.config {
        Some(p) => config::read_flat(p)?,
        None => Layer::new(),
    };
    let mut flags = Layer::new();
    let mut put = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            flags.insert(k.to_string(), v);
        }
    };
    if a.code.is_some() && a.codes.is_some() {
        return Err(CliError::Usage("give --code or --codes, not both".into()));
    }
    put("codes", a.code.or(a.codes));
    put("profile", a.profile);
    put("variant", a.variant);
    put("n_layers", a.n_layers.map(|v| v.to_string()));
    put("dim", a.dim.map(|v| v.to_string()));
    put("heads", a.heads.map(|v| v.to_string()));
    put("ffn_expansion", a.ffn_expansion.map(|v| v.to_string()));
    put("norm_order", a.norm_order);
    put("syndrome_encoding", a.syndrome_encoding);
    put("fusion", a.fusion);
    put("epochs", a.epochs.map(|v| v.to_string()));
    put("batches_per_epoch", a.batches_per_epoch.map(|v| v.to_string()));
    put("batch_size", a.batch_size.map(|v| v.to_string()));
    put("lr0", a.lr0.map(|v| format!("{v:e}")));
    put("lr_min", a.lr_min.map(|v| format!("{v:e}")));
    put("ebn0_range", a.ebn0_range);
    put("code_sampling", a.code_sampling);
    put("seed", a.seed.map(|v| v.to_string()));
    put("checkpoint_every", a.checkpoint_every.map(|v| v.to_string()));
    put("grad_clip", a.grad_clip);
    put("micro_batch", a.micro_batch.map(|v| v.to_string()));
    put("ensemble_p", a.ensemble_p);
    let resolved = config::resolve(&file, &flags)?;
    let tc = config::train_config(&resolved)?;
    let mc = config::model_config(&resolved)?;
    let out = out_dir(a.out, "train")?;

    let mut trainer = match &a.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.header.model != mc {
                return Err(CliError::Config(format!(
                    "model settings differ from the checkpoint at {}",
                    path.display()
                )));
            }
            Trainer::resume(&ck, tc.clone())?
        }
        None => Trainer::new(tc.clone(), mc)?,
    };
    let quiet = a.quiet;
    let report = train_to_dir(&mut trainer, &out, |s| {
        if !quiet {
            eprintln!("epoch {:>4}  loss {:.5}  lr {:.3e}", s.epoch, s.mean_loss, s.lr);
        }
    })?;
    if !quiet {
        eprintln!("done in {:.1}s -> {}", report.wall_time_s, out.display());
    }
    let summary = TrainSummary {
        variant: mc.variant.to_string(),
        param_count: trainer.model().param_count(),
        steps: trainer.step(),
        epochs: report.epochs.clone(),
        lr_first: report.lr_trace.first().copied(),
        lr_last: report.lr_trace.last().copied(),
    };
    write_json(&out.join("train_report.json"), &summary)?;

    let mut m = Manifest::new("train", tc.seed);
    m.config = resolved;
    if let Some(p) = &a.resume {
        m.set("resume", p.display());
    }
    for code in trainer.codes() {
        m.add_code(&code);
    }
    m.artifacts = artifacts(&out)?;
    m.write(&out)
}

pub fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    let snrs = parse_snrs(&a.ebn0)?;
    let kind = a.decoder.unwrap_or(if a.checkpoint.is_some() { DecoderKind::Model } else { DecoderKind::Bp });
    let cfg = EvalConfig {
        seed: a.seed,
        policy: match a.policy {
            PolicyArg::Random => CodewordPolicy::Random,
            PolicyArg::AllZero => CodewordPolicy::AllZero,
        },
        stop: StopRule { min_errors: a.min_errors, max_bits: a.max_bits },
        ..EvalConfig::default()
    };
    let out = out_dir(a.out.clone(), "eval")?;
    let mut m = Manifest::new("eval", a.seed);
    m.set("ebn0", snrs.iter().map(f64::to_string).collect::<Vec<_>>().join(","));
    m.set("min_errors", a.min_errors);
    m.set("max_bits", a.max_bits);
    m.set("policy", if cfg.policy == CodewordPolicy::Random { "random" } else { "all_zero" });
    m.set("chunk_frames", cfg.chunk_frames);
    m.set("wave", cfg.wave);

    let model;
    let (decoder, code): (Box<dyn BatchDecoder + '_>, Code) = match kind {
        DecoderKind::Model => {
            let path = a.checkpoint.as_ref().ok_or_else(|| CliError::Usage("--decoder model needs --checkpoint".into()))?;
            let ck = Checkpoint::load(path)?;
            model = ck.model()?;
            let code = code_for_model(&ck, &model, &a.code, a.ensemble_p)?;
            m.set("decoder", model.config().variant);
            m.set("checkpoint", path.display());
            m.set("checkpoint_sha256", file_sha256(path)?);
            (Box::new(NeuralDecoder::new(&model, &code)?), code)
        }
        DecoderKind::Bp | DecoderKind::MinSum => {
            let code = require_code(&a.code)?;
            let algorithm = if kind == DecoderKind::Bp { BpAlgorithm::SumProduct } else { BpAlgorithm::MinSum };
            let bp = BpConfig { max_iters: a.iters.max(1), algorithm, early_stop: true };
            m.set("decoder", if kind == DecoderKind::Bp { "bp" } else { "min_sum" });
            m.set("iters", bp.max_iters);
            (Box::new(BpDecoder::new(&code, bp)), code)
        }
        DecoderKind::Uncoded => {
            m.set("decoder", "uncoded");
            (Box::new(Uncoded), require_code(&a.code)?)
        }
    };
    m.set("code", code.name());
    m.add_code(&code);

    let report = estimate_ber(decoder.as_ref(), &code, &snrs, &cfg)?;
    save_ber_csv(&report, &out.join("ber_report.csv"))?;
    if a.bitwise {
        let cov = coverage_report(code.pcms());
        let path = out.join("bitwise.csv");
        let mut buf = Vec::new();
        for (i, row) in report.rows.iter().enumerate() {
            let mut one = Vec::new();
            write_bitwise_csv(row.ebn0_db, &bitwise_ber(row, Some(&cov)), &mut one).map_err(CliError::io(&path))?;
            let skip = if i == 0 { 0 } else { one.iter().position(|&b| b == b'\n').map_or(0, |p| p + 1) };
            buf.extend_from_slice(&one[skip..]);
        }
        fs::write(&path, buf).map_err(CliError::io(&path))?;
    }
    println!("{} on {} (n = {})", report.decoder, report.code, report.n);
    println!("{:>7} {:>12} {:>10} {:>11} {:>9}", "ebn0", "bits", "errors", "ber", "-ln(ber)");
    for r in &report.rows {
        let nl = r.neg_ln_ber.map_or("inf".to_string(), |v| format!("{v:.3}"));
        println!("{:>7.2} {:>12} {:>10} {:>11.4e} {:>9}", r.ebn0_db, r.bits_sent, r.bit_errors, r.ber, nl);
    }
    m.artifacts = artifacts(&out)?;
    m.write(&out)
}

pub fn cmd_analyze(a: AnalyzeArgs) -> Result<(), CliError> {
    let mut codes: Vec<Code> = match &a.codes {
        Some(list) => config::split_list(list).iter().map(|n| registry::load(n)).collect::<Result<_, _>>()?,
        None if a.pcm_file.is_none() => registry::all(),
        None => Vec::new(),
    };
    if let Some(p) = &a.pcm_file {
        codes.push(require_code(&CodeArgs { code: None, pcm_file: Some(p.clone()), cyclic: false })?);
    }
    let out = out_dir(a.out, "analyze")?;
    let path = out.join("complexity.csv");
    let mut w = Vec::new();
    let io = CliError::io(&path);
    writeln!(
        w,
        "code,n,k,m,h_tilde,h,crossmpt_density,ecct_density,crossmpt_area,ecct_area,crossmpt_flops,ecct_flops,h_gt_2h_tilde,density_lower,flops_lower"
    )
    .map_err(&io)?;
    let mut checks = Vec::new();
    let mut m = Manifest::new("analyze", 0);
    m.set("n_layers", a.n_layers);
    m.set("dim", a.dim);
    m.set("ffn_expansion", a.ffn_expansion);
    println!("{:<14} {:>9} {:>9} {:>11} {:>11}", "code", "cross %", "ecct %", "cross MF", "ecct MF");
    for code in &codes {
        m.add_code(code);
        let r = analyze_code(code, a.n_layers, a.dim, a.ffn_expansion);
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.code,
            r.n,
            r.k,
            r.m,
            r.crossmpt.unmasked,
            r.ecct.unmasked,
            r.crossmpt.density,
            r.ecct.density,
            r.crossmpt.area,
            r.ecct.area,
            r.crossmpt.flops,
            r.ecct.flops,
            r.h_exceeds_twice_h_tilde(),
            r.density_lower(),
            r.flops_lower()
        )
        .map_err(&io)?;
        println!(
            "{:<14} {:>9.2} {:>9.2} {:>11.3} {:>11.3}",
            r.code,
            100.0 * r.crossmpt.density,
            100.0 * r.ecct.density,
            r.crossmpt.flops as f64 / 1e6,
            r.ecct.flops as f64 / 1e6
        );
        if let Some(c) = check_reference_density(&r) {
            if !c.matches {
                eprintln!(
                    "note: {} densities {:.2}%/{:.2}% differ from the reference {}%/{}%",
                    c.code, c.crossmpt_pct, c.ecct_pct, c.reference_crossmpt_pct, c.reference_ecct_pct
                );
            }
            checks.push(c);
        }
    }
    fs::write(&path, w).map_err(&io)?;
    if !checks.is_empty() {
        let path = out.join("density_check.csv");
        let mut w = String::from("code,crossmpt_pct,ecct_pct,reference_crossmpt_pct,reference_ecct_pct,matches\n");
        for c in &checks {
            w += &format!(
                "{},{},{},{},{},{}\n",
                c.code, c.crossmpt_pct, c.ecct_pct, c.reference_crossmpt_pct, c.reference_ecct_pct, c.matches
            );
        }
        fs::write(&path, w).map_err(CliError::io(&path))?;
    }
    m.artifacts = artifacts(&out)?;
    m.write(&out)
}

pub fn cmd_dump_attention(a: DumpArgs) -> Result<(), CliError> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = ck.model()?;
    let code = code_for_model(&ck, &model, &a.code, None)?;
    model.check_context(&CodeContext::new(&code)?)?;
    let n = code.n();
    let pos = match a.error_bit {
        Some(b) if b == 0 || b > n => {
            return Err(CliError::Config(format!("--error-bit {b} is out of range 1..{n}")));
        }
        b => b.map(|b| b - 1),
    };
    let layers = model.config().n_layers;
    let (lo, hi) = match &a.layers {
        Some(s) => parse_layers(s, layers)?,
        None => (1, layers),
    };
    let sample = forced_error_sample(&code, pos)?;
    let dumps = dump_attention(&model, &code, &sample, lo - 1..hi)?;
    let out = out_dir(a.out, "attention")?;
    let files = crossmpt_core::eval::write_attention_dumps(&dumps, &out)?;
    for f in &files {
        println!("{f}");
    }
    let mut m = Manifest::new("dump-attention", ck.header.seed);
    m.set("checkpoint", a.checkpoint.display());
    m.set("checkpoint_sha256", file_sha256(&a.checkpoint)?);
    m.set("code", code.name());
    m.set("error_bit", a.error_bit.map_or("none".to_string(), |b| b.to_string()));
    m.set("layers", format!("{lo}..{hi}"));
    m.add_code(&code);
    m.artifacts = artifacts(&out)?;
    m.write(&out)
}

#[derive(Serialize)]
struct EnsembleSummary {
    code: String,
    p: usize,
    construction: crossmpt_core::ensemble::Construction,
    windows: Vec<Vec<usize>>,
    covered: usize,
    uncovered: Vec<usize>,
}

pub fn cmd_build_ensemble(a: EnsembleArgs) -> Result<(), CliError> {
    let code = require_code(&a.code)?;
    let p = a.p.unwrap_or_else(|| max_shift(code.n(), code.redundancy()) + 1);
    let ens = build_ensemble(&code, p)?;
    let out = out_dir(a.out, "ensemble")?;
    for (j, h) in ens.pcms.iter().enumerate() {
        let path = out.join(format!("pcm_branch{j}.alist"));
        fs::write(&path, write_alist(h)).map_err(CliError::io(&path))?;
    }
    let cov = coverage_report(&ens.pcms);
    let path = out.join("coverage.csv");
    let mut w = String::from("bit,covered,branches\n");
    for (bit, b) in cov.per_bit.iter().enumerate() {
        let list: Vec<String> = b.iter().map(|x| x.to_string()).collect();
        w += &format!("{bit},{},{}\n", !b.is_empty(), list.join(";"));
    }
    fs::write(&path, w).map_err(CliError::io(&path))?;
    write_json(
        &out.join("ensemble.json"),
        &EnsembleSummary {
            code: code.name().to_string(),
            p,
            construction: ens.construction,
            windows: ens.windows.clone(),
            covered: cov.covered_count(),
            uncovered: cov.uncovered.clone(),
        },
    )?;
    println!("{}: p = {p}, {} of {} bits covered", code.name(), cov.covered_count(), code.n());
    let mut m = Manifest::new("build-ensemble", 0);
    m.set("p", p);
    m.add_code(&ens.code(&code)?);
    m.artifacts = artifacts(&out)?;
    m.write(&out)
}

pub fn cmd_codes_list() -> Result<(), CliError> {
    println!("{:<14} {:>4} {:>4} {:>4} {:<8} {:<6} construction", "name", "n", "k", "m", "class", "cyclic");
    for e in registry::ENTRIES {
        let c = registry::load(e.name)?;
        println!(
            "{:<14} {:>4} {:>4} {:>4} {:<8} {:<6} {}",
            e.name,
            c.n(),
            c.k(),
            c.pcm().rows(),
            e.class.as_str(),
            e.cyclic,
            e.construction
        );
    }
    Ok(())
}

fn validate_one(code: &Code) -> Result<(), String> {
    let g = code.generator();
    for r in 0..g.rows() {
        let row: Vec<u8> = (0..g.cols()).map(|c| g.get(r, c) as u8).collect();
        if !code.is_codeword(&row) {
            return Err(format!("generator row {r} has a non-zero syndrome"));
        }
    }
    if g.rows() != code.k() {
        return Err(format!("generator has {} rows, k = {}", g.rows(), code.k()));
    }
    Ok(())
}

pub fn cmd_codes_validate(pcm_file: Option<PathBuf>) -> Result<(), CliError> {
    let mut failed = Vec::new();
    let mut report = |name: &str, r: Result<(), String>| match r {
        Ok(()) => println!("ok    {name}"),
        Err(e) => {
            println!("FAIL  {name}: {e}");
            failed.push(name.to_string());
        }
    };
    if let Some(p) = pcm_file {
        let code = require_code(&CodeArgs { code: None, pcm_file: Some(p), cyclic: false })?;
        report(code.name(), validate_one(&code));
    } else {
        for e in registry::ENTRIES {
            let r = registry::load(e.name).map_err(|e| e.to_string()).and_then(|code| {
                validate_one(&code)?;
                match registry::construct(e.name) {
                    Some(h) if &h != code.pcm() => Err("fixture differs from its construction".to_string()),
                    _ => Ok(()),
                }
            });
            report(e.name, r);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Config(format!("invalid codes: {}", failed.join(", "))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snr_lists() {
        assert_eq!(parse_snrs("3,4.5").unwrap(), vec![3.0, 4.5]);
        assert_eq!(parse_snrs("3:6").unwrap(), vec![3.0, 4.0, 5.0, 6.0]);
        assert_eq!(parse_snrs("1:2:0.5").unwrap(), vec![1.0, 1.5, 2.0]);
        assert!(parse_snrs("6:3").is_err());
        assert!(parse_snrs("").is_err());
    }

    #[test]
    fn layer_ranges_are_one_based_inclusive() {
        assert_eq!(parse_layers("1..2", 6).unwrap(), (1, 2));
        assert_eq!(parse_layers("1..=3", 6).unwrap(), (1, 3));
        assert_eq!(parse_layers("4", 6).unwrap(), (4, 4));
        assert_eq!(parse_layers("2-6", 6).unwrap(), (2, 6));
        assert!(parse_layers("0..2", 6).is_err());
        assert!(parse_layers("1..7", 6).is_err());
    }
}
