use serde::{Deserialize, Serialize};

use super::perplexity;
use super::report::{AnalysisReport, Metric, ReportRow};
use crate::data::{sample_calibration, Corpus};
use crate::error::{Error, Result};
use crate::lqec::{build_compensated, LqecConfig, Scope};
use crate::model::DecoderModel;
use crate::quant::QuantConfig;

/// Population standard deviation; 0 for fewer than two values.
pub fn population_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub experiment_id: String,
    pub quant: QuantConfig,
    pub scopes: Vec<Scope>,
    pub ranks: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Optimizer settings shared by every cell; scope, rank, seed and loss
    /// weights are filled in per cell.
    pub template: LqecConfig,
    pub calib_samples: usize,
    pub calib_seq_len: usize,
    pub eval_seq_len: usize,
}

/// Compensates at every (scope, rank, seed) cell and records held-out
/// perplexity, then the σ of perplexity across ranks per (scope, seed).
pub fn rank_sweep(teacher: &DecoderModel, corpus: &Corpus, spec: &SweepSpec) -> Result<AnalysisReport> {
    if spec.scopes.is_empty() || spec.ranks.is_empty() || spec.seeds.is_empty() {
        return Err(Error::Config("rank sweep needs at least one scope, rank and seed".into()));
    }
    spec.quant.validate()?;
    let mut report = AnalysisReport::new();
    let bits = spec.quant.bits;
    for &seed in &spec.seeds {
        let calib = sample_calibration(corpus, spec.calib_samples, spec.calib_seq_len, seed)?;
        for &scope in &spec.scopes {
            let mut ppls = Vec::with_capacity(spec.ranks.len());
            for &rank in &spec.ranks {
                let mut cfg = LqecConfig {
                    scope,
                    rank,
                    seed,
                    ..spec.template.clone()
                };
                cfg.loss_weights = LqecConfig::new(scope, rank, seed).loss_weights;
                let (student, _) = build_compensated(teacher, &spec.quant, &calib, &cfg)?;
                let ppl = perplexity(&student, corpus.heldout(), spec.eval_seq_len, spec.eval_seq_len)?;
                ppls.push(ppl);
                report.push(
                    ReportRow::new(&spec.experiment_id, Metric::Ppl, ppl)
                        .scope(scope.as_str())
                        .bits(bits)
                        .rank(rank)
                        .seed(seed),
                )?;
            }
            report.push(
                ReportRow::new(&spec.experiment_id, Metric::PplSigma, population_std(&ppls))
                    .scope(scope.as_str())
                    .bits(bits)
                    .seed(seed),
            )?;
        }
    }
    report.metadata.quant_config = Some(serde_json::to_value(&spec.quant)?);
    Ok(report)
}
