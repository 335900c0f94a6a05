//! Flat `key = value` run configs. Layers are merged in order: profile
//! defaults, then the config file, then command-line flags.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crossmpt_core::train::CodeSampling;
use crossmpt_core::{Fusion, ModelConfig, NormOrder, SyndromeEncoding, TrainConfig, Variant};

use crate::error::CliError;

pub const TRAIN_KEYS: &[&str] = &[
    "profile",
    "codes",
    "variant",
    "n_layers",
    "dim",
    "heads",
    "ffn_expansion",
    "norm_order",
    "syndrome_encoding",
    "fusion",
    "epochs",
    "batches_per_epoch",
    "batch_size",
    "lr0",
    "lr_min",
    "ebn0_range",
    "code_sampling",
    "seed",
    "checkpoint_every",
    "grad_clip",
    "micro_batch",
    "ensemble_p",
];

pub type Layer = BTreeMap<String, String>;

/// Parses `key = value` lines. `#` starts a comment; blank lines are skipped.
pub fn parse_flat(text: &str, origin: &str) -> Result<Layer, CliError> {
    let mut out = Layer::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("{origin}:{}: expected `key = value`", i + 1)))?;
        let k = k.trim().to_string();
        if !TRAIN_KEYS.contains(&k.as_str()) {
            return Err(CliError::Config(format!("{origin}:{}: unknown key `{k}`", i + 1)));
        }
        out.insert(k, v.trim().trim_matches('"').to_string());
    }
    Ok(out)
}

pub fn read_flat(path: &Path) -> Result<Layer, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    parse_flat(&text, &path.display().to_string())
}

fn profile_defaults(profile: &str) -> Result<Layer, CliError> {
    let (tc, layers, dim) = match profile {
        "desk" => (TrainConfig::desk(Vec::new()), 2, 32),
        "full" => (TrainConfig::full(Vec::new()), 6, 128),
        other => return Err(CliError::Config(format!("unknown profile `{other}` (desk or full)"))),
    };
    let mc = ModelConfig::new(Variant::CrossMpt, layers, dim);
    let mut l = Layer::new();
    let mut put = |k: &str, v: String| {
        l.insert(k.to_string(), v);
    };
    put("profile", profile.to_string());
    put("variant", mc.variant.to_string());
    put("n_layers", mc.n_layers.to_string());
    put("dim", mc.dim.to_string());
    put("heads", mc.heads.to_string());
    put("ffn_expansion", mc.ffn_expansion.to_string());
    put("norm_order", "pre".into());
    put("syndrome_encoding", "binary".into());
    put("fusion", "output".into());
    put("epochs", tc.epochs.to_string());
    put("batches_per_epoch", tc.batches_per_epoch.to_string());
    put("batch_size", tc.batch_size.to_string());
    put("lr0", format!("{:e}", tc.lr0));
    put("lr_min", format!("{:e}", tc.lr_min));
    put("ebn0_range", format!("{},{}", tc.ebn0_range.0, tc.ebn0_range.1));
    put("code_sampling", "uniform".into());
    put("seed", tc.seed.to_string());
    put("checkpoint_every", tc.checkpoint_every.to_string());
    put("grad_clip", tc.grad_clip.map_or("none".into(), |c| c.to_string()));
    put("micro_batch", tc.micro_batch.to_string());
    put("ensemble_p", "auto".into());
    Ok(l)
}

/// Merges the layers over the defaults of whichever profile they name.
pub fn resolve(file: &Layer, flags: &Layer) -> Result<Layer, CliError> {
    let profile = flags.get("profile").or_else(|| file.get("profile")).map_or("desk", String::as_str);
    let mut out = profile_defaults(profile)?;
    for layer in [file, flags] {
        out.extend(layer.iter().map(|(k, v)| (k.clone(), v.clone())));
    }
    Ok(out)
}

fn get<'a>(l: &'a Layer, key: &str) -> Result<&'a str, CliError> {
    l.get(key).map(String::as_str).ok_or_else(|| CliError::Config(format!("missing `{key}`")))
}

fn num<T: FromStr>(l: &Layer, key: &str) -> Result<T, CliError> {
    let v = get(l, key)?;
    v.parse().map_err(|_| CliError::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn choice<T>(l: &Layer, key: &str, opts: &[(&str, T)]) -> Result<T, CliError>
where
    T: Copy,
{
    let v = get(l, key)?.to_ascii_lowercase().replace('-', "_");
    opts.iter().find(|(n, _)| *n == v).map(|x| x.1).ok_or_else(|| {
        let names: Vec<&str> = opts.iter().map(|x| x.0).collect();
        CliError::Config(format!("`{key}`: `{v}` is not one of {}", names.join(", ")))
    })
}

pub fn split_list(s: &str) -> Vec<String> {
    s.split(',').map(str::trim).filter(|x| !x.is_empty()).map(String::from).collect()
}

pub fn model_config(l: &Layer) -> Result<ModelConfig, CliError> {
    let variant: Variant = get(l, "variant")?.parse().map_err(|e| CliError::Config(format!("`variant`: {e}")))?;
    let cfg = ModelConfig {
        variant,
        n_layers: num(l, "n_layers")?,
        dim: num(l, "dim")?,
        heads: num(l, "heads")?,
        ffn_expansion: num(l, "ffn_expansion")?,
        norm_order: choice(l, "norm_order", &[("pre", NormOrder::Pre), ("post", NormOrder::Post)])?,
        syndrome_encoding: choice(
            l,
            "syndrome_encoding",
            &[("binary", SyndromeEncoding::Binary), ("bipolar", SyndromeEncoding::Bipolar)],
        )?,
        fusion: choice(l, "fusion", &[("output", Fusion::Output), ("per_layer", Fusion::PerLayer)])?,
    };
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

pub fn train_config(l: &Layer) -> Result<TrainConfig, CliError> {
    let codes = split_list(l.get("codes").map_or("", String::as_str));
    if codes.is_empty() {
        return Err(CliError::Usage("no training code given (--code or codes = ...)".into()));
    }
    let range = split_list(get(l, "ebn0_range")?);
    let ebn0_range = match range.as_slice() {
        [a, b] => (
            a.parse().map_err(|_| CliError::Config(format!("`ebn0_range`: bad value `{a}`")))?,
            b.parse().map_err(|_| CliError::Config(format!("`ebn0_range`: bad value `{b}`")))?,
        ),
        _ => return Err(CliError::Config("`ebn0_range` takes `lo,hi`".into())),
    };
    let grad_clip = match get(l, "grad_clip")? {
        "none" | "off" => None,
        _ => Some(num(l, "grad_clip")?),
    };
    let ensemble_p = match get(l, "ensemble_p")? {
        "auto" => None,
        _ => Some(num(l, "ensemble_p")?),
    };
    let cfg = TrainConfig {
        epochs: num(l, "epochs")?,
        batches_per_epoch: num(l, "batches_per_epoch")?,
        batch_size: num(l, "batch_size")?,
        lr0: num(l, "lr0")?,
        lr_min: num(l, "lr_min")?,
        ebn0_range,
        codes,
        code_sampling: choice(
            l,
            "code_sampling",
            &[("uniform", CodeSampling::Uniform), ("proportional", CodeSampling::Proportional)],
        )?,
        seed: num(l, "seed")?,
        checkpoint_every: num(l, "checkpoint_every")?,
        grad_clip,
        micro_batch: num(l, "micro_batch")?,
        ensemble_p,
    };
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_override_profile() {
        let file = parse_flat("codes = bch_15_7\nepochs = 3 # short\nlr0 = 1e-3\n", "f").unwrap();
        let mut flags = Layer::new();
        flags.insert("epochs".into(), "5".into());
        let l = resolve(&file, &flags).unwrap();
        let t = train_config(&l).unwrap();
        assert_eq!(t.epochs, 5);
        assert_eq!(t.lr0, 1e-3);
        assert_eq!(t.batch_size, 128);
        assert_eq!(model_config(&l).unwrap().n_layers, 2);
    }

    #[test]
    fn full_profile_from_file() {
        let file = parse_flat("profile = full\ncodes = bch_63_45", "f").unwrap();
        let l = resolve(&file, &Layer::new()).unwrap();
        assert_eq!(train_config(&l).unwrap().epochs, 1000);
        assert_eq!(model_config(&l).unwrap().dim, 128);
    }

    #[test]
    fn unknown_key_is_named() {
        let e = parse_flat("epochz = 3", "run.cfg").unwrap_err();
        assert!(e.to_string().contains("epochz"), "{e}");
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn defaults_round_trip_through_the_parser() {
        let mut flags = Layer::new();
        flags.insert("codes".into(), "bch_15_7".into());
        let l = resolve(&Layer::new(), &flags).unwrap();
        assert_eq!(train_config(&l).unwrap(), TrainConfig::desk(vec!["bch_15_7".into()]));
        assert_eq!(model_config(&l).unwrap(), ModelConfig::new(Variant::CrossMpt, 2, 32));
    }
}
