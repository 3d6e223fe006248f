use crate::error::{Error, Result};
use crate::model::{Batch, DecoderModel};
use crate::tensor::Tensor;

const WINDOWS_PER_FORWARD: usize = 16;

/// Neumaier-compensated running sum.
#[derive(Debug, Default, Clone, Copy)]
pub(crate) struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub(crate) fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub(crate) fn total(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Negative log-likelihood in bits of `target` under the softmax of `row`.
fn nll_bits(row: &[f64], target: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|&l| (l - max).exp()).sum();
    z.log2() + (max - row[target]) * std::f64::consts::LOG2_E
}

/// Summed next-token NLL (bits) and prediction count for one batch.
pub(crate) fn batch_nll_bits(logits: &Tensor, batch: &Batch) -> (CompensatedSum, usize) {
    let v = logits.shape()[1];
    let (rows, targets) = batch.next_token_targets();
    let mut acc = CompensatedSum::default();
    for (&r, &t) in rows.iter().zip(&targets) {
        acc.add(nll_bits(&logits.data()[r * v..(r + 1) * v], t));
    }
    (acc, rows.len())
}

/// `2^(mean NLL in bits)` over windows of `seq_len` starting every `stride`
/// bytes; each window scores its positions 1..seq_len−1. Working in base 2
/// makes a uniform predictor over `V = 2^k` symbols score exactly `V`.
pub fn perplexity(model: &DecoderModel, bytes: &[u8], seq_len: usize, stride: usize) -> Result<f64> {
    if seq_len < 2 || stride == 0 {
        return Err(Error::Config(format!("perplexity needs seq_len ≥ 2 and stride ≥ 1, got {seq_len}/{stride}")));
    }
    if bytes.len() < seq_len {
        return Err(Error::Input(format!(
            "corpus of {} bytes is shorter than one window of {seq_len}",
            bytes.len()
        )));
    }
    let starts: Vec<usize> = (0..=bytes.len() - seq_len).step_by(stride).collect();
    let mut total = CompensatedSum::default();
    let mut count = 0usize;
    for chunk in starts.chunks(WINDOWS_PER_FORWARD) {
        let windows: Vec<&[u8]> = chunk.iter().map(|&s| &bytes[s..s + seq_len]).collect();
        let batch = Batch::from_windows(&windows)?;
        let out = model.forward_batch(&batch, false)?;
        let (s, n) = batch_nll_bits(&out.logits, &batch);
        total.add(s.total());
        count += n;
    }
    Ok((total.total() / count as f64).exp2())
}
