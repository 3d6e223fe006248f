//! Full-parameter pretraining of the full-precision teacher.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{next_token_loss, Batch, DecoderModel, Trainable};
use crate::analysis::perplexity;
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::rng::SplitMix64;
use crate::tensor::Graph;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(steps: usize, lr: f64) -> Self {
        Self {
            steps,
            lr,
            batch_size: 8,
            seq_len: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub config: TrainConfig,
    /// Training loss (nats per token) at each step, measured before the update.
    pub losses: Vec<f64>,
    pub initial_heldout_ppl: f64,
    pub final_heldout_ppl: f64,
    pub wall_seconds: f64,
}

/// Trains every parameter with Adam on causal cross-entropy over random
/// windows of the training split. Held-out perplexity is measured before and
/// after with non-overlapping windows of `seq_len`.
pub fn train_base(model: &mut DecoderModel, corpus: &Corpus, cfg: &TrainConfig) -> Result<TrainingLog> {
    let start = Instant::now();
    if cfg.batch_size == 0 || cfg.seq_len < 2 || cfg.seq_len > model.config.max_seq_len {
        return Err(Error::Config(format!(
            "batch size {} / sequence length {} (max {})",
            cfg.batch_size, cfg.seq_len, model.config.max_seq_len
        )));
    }
    let train = corpus.train();
    if train.len() < cfg.seq_len {
        return Err(Error::Input(format!(
            "training split of {} bytes is shorter than sequence length {}",
            train.len(),
            cfg.seq_len
        )));
    }
    let initial_heldout_ppl = perplexity(model, corpus.heldout(), cfg.seq_len, cfg.seq_len)?;

    let mut rng = SplitMix64::derive(cfg.seed, "pretrain-batches");
    let mut adam = Adam::new(AdamConfig::new(cfg.lr));
    let span = (train.len() - cfg.seq_len + 1) as u64;
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let windows: Vec<&[u8]> = (0..cfg.batch_size)
            .map(|_| {
                let o = rng.below(span) as usize;
                &train[o..o + cfg.seq_len]
            })
            .collect();
        let batch = Batch::from_windows(&windows)?;
        let mut g = Graph::new();
        let bound = model.bind(&mut g, Trainable::Everything);
        let trace = model.forward_graph(&mut g, &bound, &batch)?;
        let loss = next_token_loss(&mut g, trace.logits, &batch)?;
        losses.push(g.scalar(loss));
        g.backward(loss)?;
        let grads: Vec<Option<&[f64]>> = bound.trainable.iter().map(|&v| g.grad_data(v)).collect();
        adam.step(&mut model.trainable_params_mut(Trainable::Everything), &grads)?;
    }

    let final_heldout_ppl = perplexity(model, corpus.heldout(), cfg.seq_len, cfg.seq_len)?;
    Ok(TrainingLog {
        config: cfg.clone(),
        losses,
        initial_heldout_ppl,
        final_heldout_ppl,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}
