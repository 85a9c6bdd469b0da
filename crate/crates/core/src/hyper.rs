use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Outer-loop optimiser applied to the accumulated meta-gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OuterOptimizer {
    Sgd,
    Adam,
}

impl std::str::FromStr for OuterOptimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OuterOptimizer::Sgd),
            "adam" => Ok(OuterOptimizer::Adam),
            other => Err(Error::Config(format!(
                "unknown outer optimizer {other:?} (expected sgd|adam)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Embedding dimension.
    pub dim: usize,
    /// Inner-loop (task) learning rate.
    pub task_lr: f64,
    /// Outer-loop (meta) step size.
    pub meta_lr: f64,
    /// Hinge margin.
    pub margin: f64,
    /// Number of initial interactions; a support set holds `k - 1` pairs.
    pub k: usize,
    /// Inner gradient steps. Zero disables adaptation entirely.
    pub inner_steps: usize,
    /// Tasks per meta-update.
    pub meta_batch: usize,
    pub negatives_per_pair: usize,
    pub eval_negatives: usize,
    pub seed: u64,
    pub outer_optimizer: OuterOptimizer,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            dim: 64,
            task_lr: 0.01,
            meta_lr: 0.01,
            margin: 1.0,
            k: 3,
            inner_steps: 1,
            meta_batch: 32,
            negatives_per_pair: 1,
            eval_negatives: 100,
            seed: 0,
            outer_optimizer: OuterOptimizer::Sgd,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "{name} must be positive and finite, got {v}"
                )))
            }
        };
        if self.dim == 0 {
            return Err(Error::Config("dim must be positive".into()));
        }
        positive("task_lr", self.task_lr)?;
        positive("meta_lr", self.meta_lr)?;
        positive("margin", self.margin)?;
        if self.k < 2 {
            return Err(Error::Config(format!(
                "k must be at least 2, got {}",
                self.k
            )));
        }
        if self.meta_batch == 0 {
            return Err(Error::Config("meta_batch must be positive".into()));
        }
        if self.negatives_per_pair == 0 {
            return Err(Error::Config("negatives_per_pair must be positive".into()));
        }
        if self.eval_negatives == 0 {
            return Err(Error::Config("eval_negatives must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        HyperParams::default().validate().unwrap();
    }

    #[test]
    fn rejects_out_of_range_values() {
        let bad = [
            HyperParams {
                k: 1,
                ..Default::default()
            },
            HyperParams {
                margin: 0.0,
                ..Default::default()
            },
            HyperParams {
                task_lr: -1.0,
                ..Default::default()
            },
            HyperParams {
                meta_lr: f64::NAN,
                ..Default::default()
            },
            HyperParams {
                eval_negatives: 0,
                ..Default::default()
            },
            HyperParams {
                dim: 0,
                ..Default::default()
            },
        ];
        for hp in bad {
            assert!(hp.validate().is_err(), "{hp:?}");
        }
    }
}
