//! Human-to-humanoid video editing at desk scale.
//!
//! The crate covers the whole pipeline: procedural paired video synthesis
//! ([`datagen`]), a lossless patch codec ([`codec`]), a condition-masked video
//! diffusion transformer ([`dit`]), flow-matching training and sampling
//! ([`flow`]), low-rank adapters ([`lora`]), similarity metrics ([`metrics`])
//! and the command implementations behind the CLI ([`pipeline`]).

pub mod autodiff;
pub mod codec;
pub mod datagen;
pub mod dit;
pub mod error;
pub mod flow;
pub mod lora;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod video;

pub use error::{Error, Result};
pub use video::VideoClip;
