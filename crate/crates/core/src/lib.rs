//! Meta transitional learning for cold-start sequential recommendation.
//!
//! The engine meta-trains a translation-based transition model on few-shot
//! episodes drawn from data-rich users, adapts it to a new user from that
//! user's first `k` interactions, and ranks candidate next items.
//!
//! Module map:
//!
//! * [`model`]: parameters, forward ops and analytic gradients
//! * [`gradcheck`]: finite-difference gradient verification
//! * [`snapshot`]: the `METATL01` checkpoint format
//! * [`data`]: log parsing, item filtering and the temporal user split
//! * [`sampler`]: episode construction and negative sampling
//! * [`meta`]: inner adaptation, meta-updates and test-time adaptation
//! * [`eval`]: ranking metrics (MRR, Hit@1)
//! * [`synthetic`]: Markov-chain logs with a known transition oracle
//! * [`config`] / [`cli`]: the `metatl` command line

use serde::{Deserialize, Serialize};

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod hyper;
pub mod meta;
pub mod model;
pub mod rng;
pub mod sampler;
pub mod snapshot;
pub mod synthetic;

pub use error::{Error, Result};
pub use hyper::{HyperParams, OuterOptimizer};
pub use model::{Grads, ParamView, Params, TransitionRep, Triple};

/// Dense item index into the embedding table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ItemId(pub u32);

impl ItemId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl std::fmt::Display for ItemId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Dense index of a user within one side (train or test) of a split.
pub type UserIdx = usize;
