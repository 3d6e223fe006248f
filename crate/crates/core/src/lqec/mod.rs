//! Quantization error compensation with low-rank adapters.
//!
//! Scopes, from narrowest to widest:
//! - `weight_svd`: alternate quantization and truncated SVD of the weight residual;
//! - `linear`: each linear module's output, fed the teacher's module input;
//! - `layer`: each decoder layer's output, fed the teacher's layer input;
//! - `model`: the last decoder layer's output, both models run end to end;
//! - `rilq`: a weighted sum of the `model` loss and next-token cross-entropy.
//!
//! Activation losses are squared Frobenius norms divided by the number of
//! tokens in the batch.

mod compensate;
mod loftq;
mod losses;

pub use compensate::{build_compensated, compensate, finetune_task, CompensationRun, ConvergenceReason, EvalPoint, FinetuneConfig, RunConfig};
pub use loftq::{loftq_init, loftq_model, LoftqResult, LoftqStep};
pub use losses::{
    capture_teacher, gt_loss, layer_loss, linear_loss, model_loss, scope_loss_graph, LossParts, TeacherCapture,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    WeightSvd,
    Linear,
    Layer,
    Model,
    Rilq,
}

impl Scope {
    pub const ALL: [Scope; 5] = [Scope::WeightSvd, Scope::Linear, Scope::Layer, Scope::Model, Scope::Rilq];

    pub fn as_str(self) -> &'static str {
        match self {
            Scope::WeightSvd => "weight_svd",
            Scope::Linear => "linear",
            Scope::Layer => "layer",
            Scope::Model => "model",
            Scope::Rilq => "rilq",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown scope {s:?}")))
    }
}

/// What the `model` loss compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelLossTarget {
    /// Last decoder layer output, before the final norm.
    FinalHidden,
    Logits,
}

/// `(λ_model, λ_gt)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub model: f64,
    pub gt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqecConfig {
    pub scope: Scope,
    pub rank: usize,
    pub max_steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub loss_weights: LossWeights,
    pub early_stop_patience: usize,
    pub svd_iters: usize,
    pub seed: u64,
    pub model_loss_target: ModelLossTarget,
    /// Window of the moving average early stopping watches.
    #[serde(default = "default_window")]
    pub smoothing_window: usize,
}

fn default_window() -> usize {
    20
}

impl LqecConfig {
    /// Desk defaults: 2000 steps, lr 1e-4, batch 8, patience 200, five SVD
    /// iterations; `rilq` weights both losses by 0.5.
    pub fn new(scope: Scope, rank: usize, seed: u64) -> Self {
        let loss_weights = match scope {
            Scope::Rilq => LossWeights { model: 0.5, gt: 0.5 },
            _ => LossWeights { model: 1.0, gt: 0.0 },
        };
        Self {
            scope,
            rank,
            max_steps: 2000,
            lr: 1e-4,
            batch_size: 8,
            loss_weights,
            early_stop_patience: 200,
            svd_iters: 5,
            seed,
            model_loss_target: ModelLossTarget::FinalHidden,
            smoothing_window: default_window(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.rank == 0 {
            return bad("rank must be ≥ 1".into());
        }
        if self.batch_size == 0 || self.smoothing_window == 0 {
            return bad("batch_size and smoothing_window must be positive".into());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("learning rate {} must be finite and non-negative", self.lr));
        }
        if self.svd_iters == 0 {
            return bad("svd_iters must be ≥ 1".into());
        }
        let LossWeights { model, gt } = self.loss_weights;
        if !(model.is_finite() && gt.is_finite() && model >= 0.0 && gt >= 0.0) {
            return bad(format!("loss weights ({model}, {gt}) must be finite and non-negative"));
        }
        match self.scope {
            Scope::Rilq if (model + gt - 1.0).abs() > 1e-12 => {
                bad(format!("rilq loss weights must sum to 1, got ({model}, {gt})"))
            }
            Scope::Linear | Scope::Layer | Scope::Model if gt != 0.0 => {
                bad(format!("scope {} takes no GT-loss weight, got {gt}", self.scope.as_str()))
            }
            _ => Ok(()),
        }
    }
}
