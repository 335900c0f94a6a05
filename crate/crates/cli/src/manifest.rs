//! `manifest.json` written next to every command's outputs. It holds no
//! timestamps, so identical invocations give identical files.

use std::collections::BTreeMap;
use std::path::Path;

use crossmpt_core::code::write_dense;
use crossmpt_core::Code;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub config: BTreeMap<String, String>,
    /// sha256 over the dense text of each PCM, in branch order.
    pub codes: BTreeMap<String, String>,
    pub seed: u64,
    pub artifacts: Vec<String>,
    pub tool_version: String,
}

pub fn code_hash(code: &Code) -> String {
    let mut h = Sha256::new();
    for pcm in code.pcms() {
        h.update(write_dense(pcm).as_bytes());
    }
    hex::encode(h.finalize())
}

impl Manifest {
    pub fn new(command: &str, seed: u64) -> Manifest {
        Manifest {
            command: command.to_string(),
            config: BTreeMap::new(),
            codes: BTreeMap::new(),
            seed,
            artifacts: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.config.insert(key.to_string(), value.to_string());
    }

    pub fn add_code(&mut self, code: &Code) {
        self.codes.insert(code.name().to_string(), code_hash(code));
    }

    pub fn write(&mut self, dir: &Path) -> Result<(), CliError> {
        self.artifacts.sort();
        self.artifacts.dedup();
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(CliError::io(&path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crossmpt_core::registry;

    #[test]
    fn hash_is_stable_and_branch_sensitive() {
        let code = registry::load("hamming_7_4").unwrap();
        assert_eq!(code_hash(&code), code_hash(&registry::load("hamming_7_4").unwrap()));
        let two = code.with_pcms(vec![code.pcm().clone(), code.pcm().clone()]).unwrap();
        assert_ne!(code_hash(&code), code_hash(&two));
        assert_eq!(code_hash(&code).len(), 64);
    }
}
