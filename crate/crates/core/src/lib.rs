//! Contrastive sentence-embedding toolkit.
//!
//! The crate trains a small transformer encoder with in-batch-negative
//! contrastive objectives (dropout-noise positives, discrete augmentations,
//! next-sentence positives, NLI pairs and hard negatives) and measures the
//! result with alignment/uniformity, singular spectra, cosine densities and
//! STS rank correlations.

pub mod augment;
pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod evalproto;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod numerics;
pub mod train;
pub mod vocab;

pub use augment::{AugmentOp, Sentence, SynonymTable};
pub use checkpoint::Container;
pub use data::{StsDataset, ToyCorpus, ToyCorpusConfig, TrainInstance};
pub use encoder::{
    DropoutMode, DropoutPlan, EncoderConfig, EncoderModel, Phase, Pooling, ProjectionHead,
    TokenBatch,
};
pub use error::{Error, Result};
pub use evalproto::{Aggregation, EvalConfig, EvalResult, Metric};
pub use losses::{EmbeddingBatch, LossConfig, LossOutput, Similarity};
pub use metrics::{DiagnosticsReport, ProbeSet};
pub use numerics::Mat;
pub use train::{
    Checkpoint, EncoderMode, Objective, TrainConfig, TrainData, TrainOutcome, Trainer, TrajectoryLog,
};
pub use vocab::Vocab;
