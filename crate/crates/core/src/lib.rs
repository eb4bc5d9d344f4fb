//! Wavelet-spectrogram and exogenous-series fusion forecaster.
//!
//! The crate is organised bottom-up: [`autodiff`] provides tensors, reverse-mode
//! gradients and Adam; [`nn`] builds attention layers on top; [`data`] and
//! [`timefreq`] turn aligned daily series into model inputs; [`encoders`],
//! [`fusion`] and [`model`] assemble the network; [`train`], [`metrics`] and
//! [`ablation`] run experiments.

pub mod ablation;
pub mod autodiff;
pub mod data;
pub mod encoders;
pub mod fusion;
pub mod metrics;
pub mod model;
mod error;
pub mod nn;
pub mod timefreq;
pub mod train;

pub use ablation::Axis;
pub use autodiff::{Graph, ParamStore, Tensor, Var};
pub use data::{AlignedFrame, Dataset, Split, SplitSpec, Standardizer, WindowSample, HORIZONS};
pub use encoders::ExoEncoderKind;
pub use error::{Result, SemfError};
pub use fusion::FusionKind;
pub use metrics::{HorizonMetrics, MetricsReport};
pub use model::{ModelConfig, ModelInput, SemfModel};
pub use timefreq::{ImageConfig, ImageKind, Spectrogram};
pub use train::{TrainConfig, TrainOutcome, TrainingLog};
