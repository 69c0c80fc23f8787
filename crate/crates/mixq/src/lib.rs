//! A desk-scale recurrent multi-mixture Q-learning agent.
//!
//! The agent trains a family of N policies, each trading off intrinsic
//! against extrinsic reward with its own discount, under a single recurrent
//! network with per-mixture dueling value heads and a distilled policy head.
//! A discounted UCB-Tuned bandit picks the mixture to act with each episode.
//! Learning uses a forward-view Q(λ) return with soft trace cutting, online
//! network bootstrapping guarded by a trust region, per-mixture TD-error
//! normalization, cross-mixture loss weighting, and prioritized sequence
//! replay with samples-per-insert flow control. Episodic k-NN novelty
//! modulated by a lifelong RND signal provides the intrinsic reward.

pub mod cli;
pub mod config;
pub mod env;
pub mod family;
pub mod intrinsic;
pub mod learning;
pub mod nn;
pub mod replay;
pub mod returns;
pub mod runtime;
pub mod verify;
