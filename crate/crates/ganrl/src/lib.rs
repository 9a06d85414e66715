//! GAN-based intrinsic reward exploration for a synchronous advantage
//! actor-critic agent, on two deterministic pixel environments.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`] / [`graph`] — a reverse-mode differentiable computation
//!   graph (gradients are graph nodes, so gradient-penalty terms can be
//!   differentiated again) plus the Adam optimizer.
//! * [`nets`] — the actor-critic, generator, critic and encoder
//!   architectures, parameter init and binary checkpoints.
//! * [`girm`] — the intrinsic reward module: observation memory, WGAN-GP
//!   and encoder training, reconstruction-residual novelty scores and
//!   streaming EMA/EMV standardization.
//! * [`envs`] — the scrolling platformer and the multi-room world, with a
//!   synchronous vectorized facade.
//! * [`agent`] — A2C rollout collection and updates on combined
//!   extrinsic + intrinsic rewards.
//! * [`harness`] — experiment configuration, CLI entry points, metrics
//!   and summaries.

pub mod agent;
pub mod envs;
pub mod girm;
pub mod graph;
pub mod harness;
pub mod nets;
pub mod tensor;
