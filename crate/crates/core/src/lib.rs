//! Semi-online preference optimization laboratory.
//!
//! The crate implements the DPO loss family (pairwise, Plackett-Luce offline,
//! online, and the semi-online variants that pair offline winners with
//! online-generated losers), a toy diffusion policy with the diffusion form of
//! the semi-online objective, exact-enumeration oracles for the gradient
//! identities behind these losses, and a 2D synthetic benchmark comparing the
//! training regimes.
//!
//! Start with [`model`] for policies and rewards, [`losses`] for the loss
//! zoo and [`oracles`] for the verification machinery.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod bench;
pub mod config;
pub mod diffusion;
pub mod enumerate;
pub mod error;
pub mod losses;
pub mod model;
pub mod numeric;
pub mod oracles;
pub mod runner;
pub mod sampler;

pub use error::{Error, Result};
pub use losses::{Branch, LossConfig, PreferenceRecord};
pub use model::{Condition, Motion, Policy, ReferenceSnapshot, RewardModel};
