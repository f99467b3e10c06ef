//! Uncertainty-aware robust multimodal fusion at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! * [`autodiff`]: reverse-mode tape over dense `f64` tensors plus a
//!   finite-difference checker.
//! * [`interaction`]: cross-attention → self-attention → FFN block with
//!   residual layer norm, and the self-first ordering used for ablation.
//! * [`uncertainty`]: Gaussian posterior heads, reparameterized sampling,
//!   variance-driven fusion weights and the joint classifier head.
//! * [`model`]: the assembled network and its forward pass.
//! * [`objectives`]: cross-entropy, closed-form KL terms, the sampled
//!   contrastive loss and the weighted total.
//! * [`data`]: synthetic incongruity task, corruption injector, batching and
//!   the binary embedding file format.
//! * [`harness`]: configuration, training, metrics, ablation and robustness
//!   experiments, gradient checks and CSV output.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod harness;
pub mod interaction;
mod kv;
pub mod model;
pub mod objectives;
pub mod params;
pub mod rng;
pub mod uncertainty;

pub use autodiff::{finite_diff_check, GradCheckOptions, GradCheckReport, Tape, Tensor, Var};
pub use data::{Dataset, InputModality, ModalBatch, Record, SynthSpec};
pub use error::{Error, Result};
pub use harness::{MetricsReport, TrainConfig};
pub use model::{ModelConfig, Urmf};
pub use objectives::{LossBreakdown, LossWeights, UclDenominator};
pub use params::{Bindings, ParamId, ParamStore};
pub use uncertainty::{FusionState, GaussianPosterior, Modality};
