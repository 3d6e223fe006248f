use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{DecoderModel, LoraAdapter, Weight};
use crate::quant::{self, QuantConfig, QuantizedTensor};
use crate::tensor::Tensor;

/// Discrepancies `‖W − Q_t − A‖_F` around one SVD sub-step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoftqStep {
    /// With the previous adapter `A_{t−1}`.
    pub before_svd: f64,
    /// With the refitted adapter `A_t`.
    pub after_svd: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoftqResult {
    pub quantized: QuantizedTensor,
    pub adapter: LoraAdapter,
    pub trace: Vec<LoftqStep>,
}

impl LoftqResult {
    /// `‖W − (dequant(Q_T) + A_T)‖_F`.
    pub fn final_discrepancy(&self) -> f64 {
        self.trace.last().map_or(f64::NAN, |s| s.after_svd)
    }
}

/// Alternates `Q_t = quantize(W − A_{t−1})` and `A_t = SVD_r(W − dequant(Q_t))`
/// for `t = 1..=iters`, starting from `A_0 = 0`.
pub fn loftq_init(w: &Tensor, cfg: &QuantConfig, rank: usize, iters: usize) -> Result<LoftqResult> {
    let (rows, cols) = w.dims2("loftq_init")?;
    if iters == 0 {
        return Err(Error::Config("loftq_init needs at least one iteration".into()));
    }
    if rank == 0 || rank > rows.min(cols) {
        return Err(Error::Config(format!(
            "rank {rank} outside 1..={} for a {rows}×{cols} weight",
            rows.min(cols)
        )));
    }
    let mut adapter = Tensor::zeros(&[rows, cols]);
    let mut factors = None;
    let mut quantized = None;
    let mut trace = Vec::with_capacity(iters);
    for _ in 0..iters {
        let q = quant::quantize(&w.sub(&adapter)?, cfg)?;
        let residual = w.sub(&quant::dequantize(&q))?;
        let before_svd = residual.sub(&adapter)?.frobenius();
        let (l1, l2) = linalg::truncated_factors(&residual, rank)?;
        adapter = l1.matmul_t(&l2)?;
        let after_svd = residual.sub(&adapter)?.frobenius();
        trace.push(LoftqStep { before_svd, after_svd });
        factors = Some((l1, l2));
        quantized = Some(q);
    }
    let (l1, l2) = factors.expect("at least one iteration");
    Ok(LoftqResult {
        quantized: quantized.expect("at least one iteration"),
        adapter: LoraAdapter::new(l1, l2)?,
        trace,
    })
}

/// Quantizes every decoder-layer weight of `fp` with LoftQ initialization.
/// Returns the student and each module's trace in module order.
pub fn loftq_model(
    fp: &DecoderModel,
    cfg: &QuantConfig,
    rank: usize,
    iters: usize,
) -> Result<(DecoderModel, Vec<Vec<LoftqStep>>)> {
    let mut student = fp.clone();
    let mut traces = Vec::new();
    for m in student.modules_mut() {
        let w = match &m.weight {
            Weight::Full(w) => w,
            Weight::Quantized { .. } => {
                return Err(Error::Contract(format!("{} is already quantized", m.name())))
            }
        };
        let r = loftq_init(w, cfg, rank, iters)?;
        m.weight = Weight::quantized(r.quantized);
        m.adapter = Some(r.adapter);
        traces.push(r.trace);
    }
    Ok((student, traces))
}
