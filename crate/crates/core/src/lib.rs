// SPDX-License-Identifier: MIT OR Apache-2.0

//! # biasloc
//!
//! Locate the transformer components that drive a targeted next-token
//! behavior, such as a gendered pronoun preference, and mitigate it by
//! fine-tuning only those components.
//!
//! Three discovery routes share one activation-patching core:
//!
//! - [`cma`]: natural indirect effects per component, with top-k and
//!   k-greedy set selection.
//! - [`circuit`]: edge-level counterfactual ablation over the residual
//!   stream graph, pruned at a threshold.
//! - [`diffmask`]: a dataset-global hard-concrete mask trained to splice
//!   counterfactual activations in, under an L0 budget enforced by a
//!   Lagrange multiplier.
//!
//! [`finetune`] then updates only the parameter slices of the selected
//! components, and [`evaluation`] measures the bias/perplexity trade-off.
//! [`groundtruth`] builds hand-wired toy models whose bias-carrying heads are
//! known exactly, which is what the test suite checks every method against.

pub mod autograd;
pub mod circuit;
pub mod cma;
pub mod corpus;
pub mod diffmask;
pub mod error;
pub mod evaluation;
pub mod finetune;
pub mod groundtruth;
pub mod model;
pub mod optim;
pub mod ranked;
pub mod rng;

pub use error::{Error, Result};
