//! Desk-scale decoder-only transformer trainer with call and ignore masks.

pub mod checkpoint;
pub mod model;
pub mod ops;
pub mod optim;
pub mod synth;
pub mod train;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointError};
pub use model::{ModelConfig, Transformer};
pub use synth::{leakage_probes, make_synthetic_fact_corpus, SyntheticConfig, SyntheticCorpus};
pub use train::{
    call_top_rates, dump_losses, train, CallTopRates, CheckpointPlan, StepMetrics, TrainConfig, TrainError, TrainOutput,
};
