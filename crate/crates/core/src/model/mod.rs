//! The toy latent diffusion backbone: noise schedule, attention kernel,
//! denoiser, DDIM sampling and inversion, and the hook seam used for
//! feature recording and injection.

pub mod attention;
pub mod ddim;
pub mod grad;
pub mod hooks;
pub mod latent;
pub mod schedule;
pub mod toy;

pub use attention::{attention, attention_weights};
pub use grad::{noise_loss, noise_loss_grad, CondGradient};
pub use ddim::{ddim_invert, ddim_sample, ddim_sample_range, ddim_update, DdimTrajectory};
pub use hooks::{AttentionHook, HookChain, KvRecorder, NoHook, SelfAttentionInputs};
pub use latent::{ControlMaps, LatentCodec, LatentImage, MAX_CONTROL_STRENGTH};
pub use schedule::NoiseSchedule;
pub use toy::{ConditionSet, ModelConfig, StepContext, ToyModel};
