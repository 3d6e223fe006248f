//! Diagnostics: relative errors, weight discrepancy, rank requirements,
//! singular-vector profiles, perplexity and rank sweeps.

mod perplexity;
mod plot;
mod report;
mod sweep;

pub use perplexity::perplexity;
pub use plot::render_svg;
pub use report::{AnalysisReport, Metric, ReportMetadata, ReportRow, CSV_HEADER};
pub use sweep::{population_std, rank_sweep, SweepSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::lqec::loftq_init;
use crate::model::{Batch, DecoderModel, LoraAdapter};
use crate::quant::{self, QuantConfig};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-6;

/// Mean over elements of `|y_fp − y_q| / (|y_fp| + eps)`.
pub fn relative_error(y_fp: &Tensor, y_q: &Tensor, eps: f64) -> Result<f64> {
    if y_fp.shape() != y_q.shape() {
        return Err(Error::dim(
            "relative_error",
            format!("{:?} vs {:?}", y_fp.shape(), y_q.shape()),
        ));
    }
    if !(eps > 0.0) {
        return Err(Error::domain("relative_error", format!("eps must be positive, got {eps}")));
    }
    if y_fp.numel() == 0 {
        return Ok(0.0);
    }
    let sum: f64 = y_fp
        .data()
        .iter()
        .zip(y_q.data())
        .map(|(a, b)| (a - b).abs() / (a.abs() + eps))
        .sum();
    Ok(sum / y_fp.numel() as f64)
}

/// Relative error of each decoder layer's output and of the logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerErrorProfile {
    /// `E(Y_n, Y_n^q)` for `n = 1..=N`.
    pub layers: Vec<f64>,
    pub head: f64,
}

/// Both models run end to end on `batch`; the student propagates its own activations.
pub fn layer_error_profile(teacher: &DecoderModel, student: &DecoderModel, batch: &Batch) -> Result<LayerErrorProfile> {
    let t = teacher.forward_batch(batch, true)?;
    let s = student.forward_batch(batch, true)?;
    let (ht, hs) = (t.hidden.expect("requested"), s.hidden.expect("requested"));
    if ht.len() != hs.len() {
        return Err(Error::dim("layer_error_profile", "teacher and student depths differ"));
    }
    let n = ht.len() - 1;
    let layers = ht[..n]
        .iter()
        .zip(&hs[..n])
        .map(|(a, b)| relative_error(a, b, DEFAULT_EPS))
        .collect::<Result<_>>()?;
    Ok(LayerErrorProfile {
        layers,
        head: relative_error(&t.logits, &s.logits, DEFAULT_EPS)?,
    })
}

/// Discrepancy of one weight at one bit width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyRow {
    pub name: String,
    pub bits: u8,
    /// `‖W − dequant(Q_b)‖_F`
    pub raw: f64,
    /// `raw` divided by the 4-bit value.
    pub normalized: f64,
    /// `‖W − dequant(Q_T) − A_T‖_F` after LoftQ alternation at rank r,
    /// divided by the plain 4-bit value.
    pub with_adapter: Option<f64>,
}

/// Alternations used for the adapter overlay of [`discrepancy_scan`].
pub const OVERLAY_ITERS: usize = 5;

/// For each weight and bit width, the quantization discrepancy normalized so
/// the 4-bit value is 1, plus (with `adapter_rank`) the discrepancy left by a
/// rank-r LoftQ initialization run for [`OVERLAY_ITERS`] alternations.
pub fn discrepancy_scan(
    weights: &[(String, Tensor)],
    bits_list: &[u8],
    template: &QuantConfig,
    adapter_rank: Option<usize>,
) -> Result<Vec<DiscrepancyRow>> {
    if let Some(&b) = bits_list.iter().find(|b| !(2..=4).contains(*b)) {
        return Err(Error::Config(format!("bit width {b} outside {{2, 3, 4}}")));
    }
    let cfg_for = |bits: u8| {
        let mut c = template.clone();
        c.bits = bits;
        c.validate().map(|_| c)
    };
    let mut rows = Vec::new();
    for (name, w) in weights {
        let base = quant::discrepancy(w, &cfg_for(4)?)?;
        for &bits in bits_list {
            let cfg = cfg_for(bits)?;
            let raw = quant::discrepancy(w, &cfg)?;
            let with_adapter = match adapter_rank {
                Some(r) => Some(loftq_init(w, &cfg, r, OVERLAY_ITERS)?.final_discrepancy() / base),
                None => None,
            };
            rows.push(DiscrepancyRow {
                name: name.clone(),
                bits,
                raw,
                normalized: if bits == 4 { 1.0 } else { raw / base },
                with_adapter,
            });
        }
    }
    Ok(rows)
}

/// Smallest `r` with `‖E − SVD_r(E)‖_F ≤ target`, from the singular
/// spectrum's tail energies. Comparisons allow a relative slack of 1e-12 so
/// that `target = ‖E‖_F` computed elementwise yields 0.
pub fn min_rank_for_target(e: &Tensor, target: f64) -> Result<usize> {
    if !(target >= 0.0) {
        return Err(Error::domain("min_rank_for_target", format!("target {target} is negative")));
    }
    let s = linalg::singular_values(e)?;
    let tails = linalg::tail_energies(&s);
    let bound = target * (1.0 + 1e-12);
    Ok(tails
        .iter()
        .position(|t| t.sqrt() <= bound)
        .unwrap_or(s.len()))
}

/// `σ_i · mean_j |u_i[j]|` for the top `k` left singular triplets of
/// `L1·L2ᵀ`, computed from the `r × r` core of thin QRs of both factors.
pub fn singular_profile(adapter: &LoraAdapter, k: usize) -> Result<Vec<f64>> {
    let r = adapter.rank();
    if k > r {
        return Err(Error::Config(format!("profile length {k} exceeds adapter rank {r}")));
    }
    let (q1, r1) = linalg::thin_qr(&adapter.l1)?;
    let (_, r2) = linalg::thin_qr(&adapter.l2)?;
    // L1·L2ᵀ = Q1·(R1·R2ᵀ)·Q2ᵀ
    let core = r1.matmul_t(&r2)?;
    if core.data().iter().all(|&v| v == 0.0) {
        return Ok(vec![0.0; k]);
    }
    let dec = linalg::svd(&core)?;
    let u = q1.matmul(&dec.u)?;
    let rows = u.shape()[0];
    Ok((0..k)
        .map(|i| {
            let mean = (0..rows).map(|j| u.get2(j, i).abs()).sum::<f64>() / rows as f64;
            dec.s[i] * mean
        })
        .collect())
}
