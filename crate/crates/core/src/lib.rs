//! Blind inpainting toolkit: a content-adaptive resampler with an EDSR
//! upscaler, a two-stage HINet restorer, their training loops, metrics and
//! the evaluation pipeline.

pub mod autodiff;
pub mod car;
pub mod degrade;
pub mod edsr;
pub mod error;
pub mod hinet;
pub mod imaging;
pub mod learn;
pub mod metrics;
pub mod ops;
pub mod params;
pub mod pipeline;
pub mod resampler;
pub mod seed;
pub mod tensor;

pub use car::{CarConfig, CarModel};
pub use degrade::{DegradationSpec, Mask, MaskParams};
pub use edsr::{Edsr, EdsrConfig};
pub use error::{Error, Result};
pub use hinet::{Hinet, HinetConfig, StageOutputs};
pub use imaging::{ImageTensor, OrigDims, PairedSample};
pub use learn::{Checkpoint, ModelKind, StageInput, TrainConfig};
pub use metrics::{MetricReport, MetricRow};
pub use pipeline::{Checkpoints, PipelineVariant, SweepSpec};
pub use resampler::{KernelField, Resampler, ResamplerConfig};
pub use tensor::{Real, Tensor};
