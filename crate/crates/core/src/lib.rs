//! A small CTC sequence-recognition laboratory.
//!
//! Everything needed to train and evaluate Transformer and Conformer CTC
//! encoders with intermediate-layer CTC losses and stochastic depth, built on
//! a tape-based reverse-mode differentiation engine:
//!
//! - [`tape`] / [`tensor`]: dense tensors and reverse-mode differentiation
//! - [`gradcheck`]: finite-difference gradient verification
//! - [`ctc`]: CTC likelihood, gradient, enumeration reference, greedy decoding
//! - [`encoder`]: Transformer/Conformer stacks with stochastic depth
//! - [`objective`]: final plus intermediate CTC loss composition
//! - [`trainer`]: synthetic data, optimization, checkpoints and averaging
//! - [`metrics`]: edit distance and error rates
//! - [`config`]: plain `key=value` run configuration

pub mod config;
pub mod ctc;
pub mod encoder;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use ctc::{
    collapse, ctc_loss, ctc_loss_bruteforce, greedy_decode, oracle_trials, required_length, Alignment, CtcError,
    LabelSequence, LogPosteriorGrid, OracleReport,
};
pub use encoder::{EncoderConfig, LayerKind, LayerTrace, Mode};
pub use gradcheck::{gradcheck, GradCheckOptions, GradCheckReport};
pub use metrics::{corpus_rate, edit_distance, ErrorCounts};
pub use model::Model;
pub use objective::{IntermediateLossSpec, LossBreakdown, Variant};
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{Primitive, Tape, Var};
pub use tensor::{Tensor, TensorError};

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;
