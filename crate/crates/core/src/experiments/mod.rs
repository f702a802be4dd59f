//! Training loop, metrics, and the diagnostic protocols.

mod metrics;
mod protocols;
mod train;

pub use metrics::{accuracy, harmonic_mean, macro_f1};
pub use protocols::{
    corruption_probe, read_csv, sweep_noise, track_gradients, write_csv, write_json, GradRow,
    GradVariant, ProbeRow, SweepOutput, SweepRow, ThresholdNote, DEFAULT_SCALES,
};
pub use train::{
    fit, train, BranchNorm, EpochRecord, ModelKind, TrainConfig, TrainOptions, TrainReport, Trained,
};
