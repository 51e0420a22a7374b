//! Latent-space diffusion transformer for procedural video understanding.
//!
//! Observed clip embeddings condition a two-branch transformer that denoises
//! the embeddings of unseen clips with a rectified-flow Euler sampler. The
//! denoised embeddings feed attentive-pooler classifiers for step
//! forecasting, task classification, procedure planning and long-horizon
//! anticipation.
//!
//! ```text
//!  seen clips ──► seen branch ──┐
//!                               ├─ joint attention (RoPE over clip index) ─► L blocks
//!  noise ──────► target branch ─┘
//!        ▲                                         │
//!        └──────── Euler step σ_i → σ_{i+1} ◄──────┘ velocity
//! ```

pub mod ablation;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod scheduler;
pub mod tasks;
pub mod training;
pub mod types;

pub use error::{Error, Result};
pub use types::{EmbeddingMatrix, ModelConfig, ProcedureSample, RngSeed};
