//! Benchmark system for lightweight image semantic communication.
//!
//! The crate bundles everything needed to compare a learned segmentation
//! codec against a classical transmission chain on equal footing:
//!
//! * [`costmodel`] — analytic FLOPs / parameter-count model of the codec and
//!   the scalarized objective used to pick the network depth.
//! * [`nn`] — a small f64 CNN stack (conv, batch norm, pooling, CBAM
//!   attention) with hand-written backward passes.
//! * [`codec`] — the UNet-style semantic encoder/decoder built from [`nn`]
//!   pieces, plus a versioned checkpoint container.
//! * [`channel`] — differentiable AWGN channel with calibrated SNR.
//! * [`metrics`] — confusion-matrix mIoU and the pixel cross-entropy loss.
//! * [`data`] — portrait dataset loader and a deterministic synthetic corpus.
//! * [`trainer`] — end-to-end training through the channel and per-SNR
//!   evaluation.
//! * [`classical`] — PNG + LDPC + QAM reference chain.
//! * [`experiment`] / [`report`] — config-driven experiment runner and
//!   emission of result tables/figures (CSV + SVG).

pub mod channel;
pub mod classical;
pub mod codec;
pub mod config;
pub mod costmodel;
pub mod data;
pub mod experiment;
pub mod metrics;
pub mod nn;
pub mod report;
pub mod trainer;

pub use channel::{ChannelConfig, ChannelModel};
pub use codec::{CodecState, FeatureTensor, TensorRole, TransmittedFeatures};
pub use config::{ExperimentConfig, NetworkConfig};
pub use costmodel::{CostReport, CostMode, LayerKind, LayerSpec, ObjectiveWeights};
pub use data::{DatasetSplit, Sample, Split};
pub use metrics::{LossValue, SegmentationEval};
pub use trainer::{TrainConfig, TrainHistory};
