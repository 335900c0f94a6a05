//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic, `u32` version, `u64` header length, a JSON header,
//! then every parameter as little-endian `f64` in header order, followed by
//! the Adam moments when present.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::code::{Code, CodeClass, CodeError};
use crate::gf2::{BinaryMatrix, MatrixError};
use crate::model::{CodeDims, Model, ModelConfig, ModelError};
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::Tensor;
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 8] = b"XMPTCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("checkpoint version {found}, this build reads {expected}")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("malformed header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("stored PCM for `{code}`: {msg}")]
    Pcm { code: String, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Code(#[from] CodeError),
    #[error(transparent)]
    Matrix(#[from] MatrixError),
}

/// Enough of a code to rebuild it without the registry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredCode {
    pub name: String,
    pub n: usize,
    pub k: usize,
    pub class: CodeClass,
    pub cyclic: bool,
    /// Each PCM as rows of `'0'`/`'1'`.
    pub pcms: Vec<Vec<String>>,
}

impl StoredCode {
    pub fn of(code: &Code) -> StoredCode {
        let pcms = code
            .pcms()
            .iter()
            .map(|h| h.to_rows().iter().map(|r| r.iter().map(|&b| char::from(b'0' + b)).collect()).collect())
            .collect();
        StoredCode {
            name: code.name().to_string(),
            n: code.n(),
            k: code.k(),
            class: code.class(),
            cyclic: code.is_cyclic(),
            pcms,
        }
    }

    pub fn to_code(&self) -> Result<Code, CheckpointError> {
        let mut mats = Vec::with_capacity(self.pcms.len());
        for rows in &self.pcms {
            let bits: Result<Vec<Vec<u8>>, CheckpointError> = rows
                .iter()
                .map(|r| {
                    r.bytes()
                        .map(|c| match c {
                            b'0' => Ok(0),
                            b'1' => Ok(1),
                            _ => Err(CheckpointError::Pcm { code: self.name.clone(), msg: format!("bad symbol {:?}", c as char) }),
                        })
                        .collect()
                })
                .collect();
            mats.push(BinaryMatrix::from_rows(&bits?)?);
        }
        let first = mats.first().cloned().ok_or_else(|| CheckpointError::Pcm { code: self.name.clone(), msg: "no PCM".into() })?;
        let code = Code::from_pcm(self.name.clone(), first, self.class, self.cyclic, Some(self.k))?;
        Ok(code.with_pcms(mats)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub model: ModelConfig,
    pub dims: Option<CodeDims>,
    /// Training codes, each with the PCM list the model saw.
    pub codes: Vec<StoredCode>,
    pub seed: u64,
    pub step: u64,
    pub epoch: usize,
    pub train: Option<TrainConfig>,
    pub output_fc_bias: bool,
    pub params: Vec<ParamEntry>,
    pub adam: Option<AdamConfig>,
    pub adam_step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub params: Vec<Tensor>,
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, codes: &[Code], seed: u64) -> Checkpoint {
        let params = model
            .names()
            .iter()
            .zip(model.params())
            .map(|(name, t)| ParamEntry { name: name.clone(), shape: t.shape() })
            .collect();
        Checkpoint {
            header: Header {
                version: VERSION,
                model: *model.config(),
                dims: model.dims(),
                codes: codes.iter().map(StoredCode::of).collect(),
                seed,
                step: 0,
                epoch: 0,
                train: None,
                output_fc_bias: true,
                params,
                adam: None,
                adam_step: 0,
            },
            params: model.params().to_vec(),
            optimizer: None,
        }
    }

    pub fn model(&self) -> Result<Model, CheckpointError> {
        let parts = self.header.params.iter().map(|p| p.name.clone()).zip(self.params.iter().cloned()).collect();
        Ok(Model::from_parts(self.header.model, self.header.dims, parts)?)
    }

    pub fn codes(&self) -> Result<Vec<Code>, CheckpointError> {
        self.header.codes.iter().map(StoredCode::to_code).collect()
    }

    pub fn stored_code(&self, name: &str) -> Option<&StoredCode> {
        self.header.codes.iter().find(|c| c.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = self.header.clone();
        header.adam_step = self.optimizer.as_ref().map_or(0, |s| s.step);
        if self.optimizer.is_none() {
            header.adam = None;
        }
        let json = serde_json::to_vec(&header).expect("header serializes");
        let floats: usize = self.params.iter().map(|t| t.len()).sum::<usize>() * if self.optimizer.is_some() { 3 } else { 1 };
        let mut out = Vec::with_capacity(20 + json.len() + 8 * floats);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |v: &[f64]| v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        for t in &self.params {
            put(t.data());
        }
        if let Some(st) = &self.optimizer {
            st.m.iter().for_each(|m| put(m));
            st.v.iter().for_each(|v| put(v));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(CheckpointError::Version { found: version, expected: VERSION });
        }
        let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
        let header: Header = serde_json::from_slice(r.take(len)?)?;
        if header.version != version {
            return Err(CheckpointError::Version { found: header.version, expected: VERSION });
        }
        let mut params = Vec::with_capacity(header.params.len());
        for p in &header.params {
            let n = p.shape.iter().product();
            params.push(Tensor::new(p.shape, r.floats(n)?).map_err(ModelError::from)?);
        }
        let optimizer = if header.adam.is_some() {
            let sizes: Vec<usize> = params.iter().map(|t| t.len()).collect();
            let m = sizes.iter().map(|&n| r.floats(n)).collect::<Result<Vec<_>, _>>()?;
            let v = sizes.iter().map(|&n| r.floats(n)).collect::<Result<Vec<_>, _>>()?;
            Some(AdamState { step: header.adam_step, m, v })
        } else {
            None
        };
        if r.pos != bytes.len() {
            return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(Checkpoint { header, params, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io { path: path.display().to_string(), source };
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)?;
        f.sync_all().map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
        Checkpoint::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated { need: self.pos.saturating_add(n), have: self.bytes.len() })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let raw = self.take(n.checked_mul(8).unwrap_or(usize::MAX))?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::build_ensemble;
    use crate::model::{ModelConfig, Variant};
    use crate::registry;

    fn sample_checkpoint() -> Checkpoint {
        let code = registry::load("bch_15_7").unwrap();
        let cfg = ModelConfig::new(Variant::CrossMpt, 1, 8);
        let model = Model::init(cfg, Some(CodeDims::of(&code)), 11).unwrap();
        Checkpoint::from_model(&model, &[code], 11)
    }

    #[test]
    fn round_trip_is_exact() {
        let mut ck = sample_checkpoint();
        ck.params[0].data_mut()[0] = f64::from_bits(0x3ff0_0000_0000_0001);
        ck.params[1].data_mut()[3] = -0.0;
        let sizes: Vec<usize> = ck.params.iter().map(|t| t.len()).collect();
        let mut st = AdamState::new(sizes);
        st.step = 17;
        st.m[2][1] = 1e-300;
        ck.optimizer = Some(st);
        ck.header.adam = Some(AdamConfig::default());
        ck.header.step = 400;
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.header.step, 400);
        assert_eq!(back.optimizer.as_ref().unwrap().step, 17);
        for (a, b) in ck.params.iter().zip(&back.params) {
            let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(back.optimizer, ck.optimizer);
        assert_eq!(back.to_bytes(), ck.to_bytes());
    }

    #[test]
    fn file_round_trip_and_model() {
        let ck = sample_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let model = back.model().unwrap();
        assert_eq!(model.params(), ck.params.as_slice());
        let codes = back.codes().unwrap();
        assert_eq!(codes[0].pcm(), registry::load("bch_15_7").unwrap().pcm());
    }

    #[test]
    fn ensemble_pcms_are_embedded() {
        let code = registry::load("bch_31_21").unwrap();
        let ens = build_ensemble(&code, 3).unwrap();
        let ens_code = ens.code(&code).unwrap();
        let model = Model::init(ModelConfig::new(Variant::CrossEd, 1, 8), None, 2).unwrap();
        let ck = Checkpoint::from_model(&model, &[ens_code], 2);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.codes().unwrap()[0].pcms(), ens.pcms.as_slice());
    }

    #[test]
    fn rejects_damage() {
        let bytes = sample_checkpoint().to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(CheckpointError::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'Y';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::BadMagic)));
        let mut newer = bytes.clone();
        newer[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(Checkpoint::from_bytes(&newer), Err(CheckpointError::Version { found: 2, .. })));
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }
}
