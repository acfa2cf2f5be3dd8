//! Synthetic two-class task and two-layer MoE used to study how router
//! norms and expert specialization relate to quantization sensitivity.

pub mod bitgap;
pub mod config;
pub mod lemma;
pub mod model;
pub mod tokens;
pub mod train;

pub use bitgap::{bit_gap_experiment, bit_gap_for_run, gap_bound, BitGapRow};
pub use config::SyntheticConfig;
pub use lemma::{lemma1_report, LemmaReport};
pub use model::{MoEModel, MoeForward, TokenSpaceModel};
pub use tokens::{make_token_set, sample_sequence, sample_sequences, Relevant, Sequence, Token, TokenSet};
pub use train::{test_error, train, TraceRow, TrainRun};
