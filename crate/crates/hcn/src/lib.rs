//! Hierarchical convolutional network for chest X-ray triage at desk scale.
//!
//! The pipeline: a trainable 7x7 front convolution, channel-max pooling with
//! reversible three-way downsampling, four architecturally diverse stems,
//! convolution-sum fusion, ECOC-encoded hierarchical binary classification
//! with DarkNet-style mini backbones, four fusion strategies, Grad-CAM
//! saliency, and a triage CLI. Everything runs on a deterministic f64 tensor
//! core with reverse-mode gradients; there is no GPU path and no threading.
//!
//! See the `examples/` directory for one runnable example per capability and
//! the `hcn` binary for the `synth` / `train` / `eval` / `gradcam` / `triage`
//! subcommands.

pub mod ecoc;
pub mod error;
pub mod init;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{ConvParams, Padding, Tensor};
