//! Syndrome-based transformer decoders for binary linear block codes.
//!
//! The crate holds GF(2) code handling, the AWGN/BPSK channel, a small
//! reverse-mode tensor engine, the cross-attention decoder family and its
//! self-attention baseline, belief propagation, training and Monte-Carlo
//! evaluation.

pub mod bp;
pub mod channel;
pub mod checkpoint;
pub mod code;
pub mod complexity;
pub mod construct;
pub mod ensemble;
pub mod eval;
pub mod gf2;
pub mod gradcheck;
pub mod mask;
pub mod model;
pub mod optim;
pub mod registry;
pub mod tensor;
pub mod train;

pub use bp::{bp_decode, BpAlgorithm, BpConfig, TannerGraph};
pub use channel::{ChannelSample, CodewordPolicy, NoiseSpec};
pub use checkpoint::{Checkpoint, CheckpointError};
pub use code::{Code, CodeClass, CodeError};
pub use complexity::{analyze, ComplexityReport};
pub use ensemble::{build_ensemble, coverage_report, Coverage, Ensemble, EnsembleError};
pub use eval::{estimate_ber, BatchDecoder, BerReport, BerRow, EvalConfig, EvalError, StopRule};
pub use gf2::{BinaryMatrix, MatrixError};
pub use mask::MaskMatrix;
pub use model::{Batch, CodeContext, CodeDims, Fusion, Model, ModelConfig, ModelError, NormOrder, SyndromeEncoding, Variant};
pub use optim::{AdamConfig, AdamState};
pub use tensor::{Graph, Tensor, TensorError, Var};
pub use train::{TrainConfig, TrainError, TrainReport, Trainer};
