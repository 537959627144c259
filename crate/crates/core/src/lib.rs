//! Exemplar-based repetition counting over precomputed video feature grids.
//!
//! A decoder fuses optional exemplar latents into the video tokens, refines them
//! with shifted-window self-attention and regresses a per-time-step density whose
//! sum is the count.

pub mod annotations;
pub mod corpus;
pub mod decoder;
pub mod exemplars;
pub mod features;
pub mod inference;
pub mod localisation;
pub mod metrics;
pub mod numerics;
pub mod pipeline;
pub mod training;

pub use annotations::{make_density_map, DensityMap, RepetitionAnnotation, SigmaMode, Timeline};
pub use corpus::{Corpus, CorpusError, CorpusItem};
pub use decoder::{load_checkpoint, save_checkpoint, Checkpoint, Decoder, DecoderConfig, DecoderError, TrainState};
pub use exemplars::{CrossVideoMode, ExemplarPolicy, InferenceSource};
pub use features::{load_features, save_features, ExemplarLatent, FeatureError, FeatureSequence, Grid, SyntheticSpec};
pub use inference::{evaluate_split, predict, CountPrediction, EvalConfig, EvalResult, InferenceError, VideoPrediction};
pub use localisation::{detect_peaks, localisation_report, LocalisationReport, PeakSet, THETA_GRID};
pub use metrics::{compute_metrics, off_by_n, BinSpec, CountPair, MetricReport};
pub use pipeline::CorpusSpec;
pub use training::{LossReport, StepRecord, TrainConfig, TrainError, Trainer};
