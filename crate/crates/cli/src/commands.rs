//! One function per subcommand. Each archives its resolved spec beside the
//! outputs and keeps wall-clock data in a separate `<command>.meta.json`, so
//! every other file is byte-identical across reruns.

use std::fs;
use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde_json::{json, Value};

use lqec::analysis::{
    discrepancy_scan, layer_error_profile, min_rank_for_target, perplexity, rank_sweep, render_svg, singular_profile,
    AnalysisReport, Metric, ReportRow, SweepSpec,
};
use lqec::data::{content_hash, contiguous_windows, load_corpus, sample_calibration, Corpus};
use lqec::lqec::{build_compensated, finetune_task, loftq_model, Scope};
use lqec::model::{load_checkpoint, save_checkpoint, train_base, Batch, DecoderModel};
use lqec::quant::{self, QuantConfig};
use lqec::Tensor;

use crate::spec::{Command, ExperimentSpec};
use crate::CliError;

const PROBE_WINDOWS: usize = 16;

pub fn run(command: Command, spec: &ExperimentSpec, plots: bool) -> Result<(), CliError> {
    let start = Instant::now();
    fs::create_dir_all(&spec.output_dir).map_err(|e| CliError::io(&spec.output_dir, e))?;
    let name = match command {
        Command::Pretrain => "pretrain",
        Command::Quantize => "quantize",
        Command::Compensate => "compensate",
        Command::Finetune => "finetune",
        Command::Eval => "eval",
        Command::Analyze => "analyze",
    };
    write_json(&spec.output_dir.join(format!("{name}.spec.json")), &serde_json::to_value(spec)?)?;
    match command {
        Command::Pretrain => pretrain(spec)?,
        Command::Quantize => quantize(spec)?,
        Command::Compensate => compensate(spec)?,
        Command::Finetune => finetune(spec)?,
        Command::Eval => eval(spec)?,
        Command::Analyze => analyze(spec, plots)?,
    }
    let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    write_json(
        &spec.output_dir.join(format!("{name}.meta.json")),
        &json!({ "command": name, "timestamp": timestamp, "wall_seconds": start.elapsed().as_secs_f64() }),
    )
}

fn write_json(path: &Path, value: &Value) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn corpus(spec: &ExperimentSpec) -> Result<Corpus, CliError> {
    Ok(load_corpus(&spec.corpus, spec.heldout_fraction)?)
}

fn heldout_ppl(model: &DecoderModel, corpus: &Corpus, seq_len: usize) -> Result<f64, CliError> {
    Ok(perplexity(model, corpus.heldout(), seq_len, seq_len)?)
}

fn decoder_weights(model: &DecoderModel) -> Vec<(String, usize, Tensor)> {
    model.modules().map(|m| (m.name(), m.layer, m.weight.effective().clone())).collect()
}

fn pretrain(spec: &ExperimentSpec) -> Result<(), CliError> {
    let cfg = spec.model.clone().expect("validated");
    let corpus = corpus(spec)?;
    let mut model = DecoderModel::build(&cfg)?;
    let log = train_base(&mut model, &corpus, &spec.train_config())?;
    save_checkpoint(&model, &spec.output_dir.join("teacher.ckpt"))?;
    let mut value = serde_json::to_value(&log)?;
    if let Value::Object(map) = &mut value {
        map.remove("wall_seconds");
    }
    write_json(&spec.output_dir.join("pretrain_log.json"), &value)?;
    println!(
        "pretrained {} steps; held-out ppl {:.6} -> {:.6}",
        log.config.steps, log.initial_heldout_ppl, log.final_heldout_ppl
    );
    Ok(())
}

fn quantize(spec: &ExperimentSpec) -> Result<(), CliError> {
    let q = spec.quant.clone().expect("validated");
    let teacher = load_checkpoint(&spec.teacher_path())?;
    let student = teacher.quantized(&q)?;
    save_checkpoint(&student, &spec.output_dir.join("quantized.ckpt"))?;

    let weights: Vec<(String, Tensor)> = decoder_weights(&teacher).into_iter().map(|(n, _, w)| (n, w)).collect();
    let rows = discrepancy_scan(&weights, &[2, 3, 4], &q, None)?;
    let mut summary = Vec::new();
    for bits in [2u8, 3, 4] {
        let of_bits: Vec<_> = rows.iter().filter(|r| r.bits == bits).collect();
        let mean = of_bits.iter().map(|r| r.normalized).sum::<f64>() / of_bits.len() as f64;
        let total = of_bits.iter().map(|r| r.raw * r.raw).sum::<f64>().sqrt();
        let marker = if bits == q.bits { " (selected)" } else { "" };
        println!("{bits}-bit: mean normalized discrepancy {mean:.6}, total {total:.6}{marker}");
        summary.push(json!({ "bits": bits, "mean_normalized": mean, "total": total }));
    }
    write_json(
        &spec.output_dir.join("quantize_summary.json"),
        &json!({ "quant": q, "per_bits": summary, "modules": rows }),
    )
}

fn compensate(spec: &ExperimentSpec) -> Result<(), CliError> {
    let q = spec.quant.clone().expect("validated");
    let cfg = spec.lqec_config().expect("validated");
    let teacher = load_checkpoint(&spec.teacher_path())?;
    let max_rank = teacher.modules().map(|m| m.dims().0.min(m.dims().1)).min().unwrap_or(0);
    if cfg.rank > max_rank {
        return Err(CliError::Spec(format!(
            "rank {} exceeds the smallest module dimension {max_rank}",
            cfg.rank
        )));
    }
    let corpus = corpus(spec)?;
    let calib = sample_calibration(&corpus, spec.calibration.samples, spec.calibration.seq_len, cfg.seed)?;
    fs::write(spec.output_dir.join("calibration.json"), calib.to_json()? + "\n")
        .map_err(|e| CliError::io(spec.output_dir.join("calibration.json"), e))?;

    let (student, run_json, final_loss) = if cfg.scope == Scope::WeightSvd {
        let (student, traces) = loftq_model(&teacher, &q, cfg.rank, cfg.svd_iters)?;
        let names: Vec<String> = teacher.modules().map(|m| m.name()).collect();
        let trace: serde_json::Map<String, Value> = names
            .iter()
            .zip(&traces)
            .map(|(n, t)| Ok((n.clone(), serde_json::to_value(t)?)))
            .collect::<Result<_, serde_json::Error>>()?;
        let total = traces
            .iter()
            .filter_map(|t| t.last())
            .map(|s| s.after_svd * s.after_svd)
            .sum::<f64>()
            .sqrt();
        let value = json!({ "config": cfg, "loftq_trace": trace, "final_discrepancy": total });
        (student, value, total)
    } else {
        let (student, run) = build_compensated(&teacher, &q, &calib, &cfg)?;
        let run = run.expect("gradient scopes return a run");
        let value: Value = serde_json::from_str(&run.to_json(1, false)?)?;
        (student, value, run.final_loss().unwrap_or(f64::NAN))
    };
    save_checkpoint(&student, &spec.output_dir.join("compensated.ckpt"))?;
    write_json(&spec.output_dir.join("compensation_run.json"), &run_json)?;

    let ppl = heldout_ppl(&student, &corpus, spec.eval_seq_len)?;
    let bare = heldout_ppl(&teacher.quantized(&q)?, &corpus, spec.eval_seq_len)?;
    let what = if cfg.scope == Scope::WeightSvd { "weight discrepancy" } else { "loss" };
    println!("scope {} rank {}: final {what} {final_loss:.6}", cfg.scope.as_str(), cfg.rank);
    println!("held-out ppl {ppl:.6} (quantized only {bare:.6})");
    Ok(())
}

fn finetune(spec: &ExperimentSpec) -> Result<(), CliError> {
    let section = spec.finetune.as_ref().expect("validated");
    let cfg = spec.finetune_config().expect("validated");
    let mut student = load_checkpoint(&spec.student_path())?;
    let task = load_corpus(&section.task_corpus, section.heldout_fraction)?;
    let run = finetune_task(&mut student, &task, &cfg)?;
    save_checkpoint(&student, &spec.output_dir.join("finetuned.ckpt"))?;
    write_json(&spec.output_dir.join("finetune_run.json"), &serde_json::from_str(&run.to_json(1, false)?)?)?;
    for p in &run.eval_trace {
        println!("step {}: held-out task loss {:.6}", p.step, p.loss);
    }
    Ok(())
}

fn eval(spec: &ExperimentSpec) -> Result<(), CliError> {
    let path = spec.eval_path();
    let model = load_checkpoint(&path)?;
    let corpus = corpus(spec)?;
    let ppl = heldout_ppl(&model, &corpus, spec.eval_seq_len)?;
    write_json(
        &spec.output_dir.join("eval.json"),
        &json!({ "checkpoint": path, "corpus_hash": corpus.hash(), "seq_len": spec.eval_seq_len, "ppl": ppl }),
    )?;
    println!("held-out ppl {ppl:?}");
    Ok(())
}

fn analyze(spec: &ExperimentSpec, plots: bool) -> Result<(), CliError> {
    let metrics: Vec<Metric> = spec.analysis.iter().map(|n| Metric::parse(n)).collect::<lqec::Result<_>>()?;
    let teacher = load_checkpoint(&spec.teacher_path())?;
    let needs_student =
        |m: &Metric| matches!(m, Metric::RelErrorHead | Metric::RelErrorLayer | Metric::SvMeanMag | Metric::Ppl);
    let student = if metrics.iter().any(needs_student) {
        Some(load_checkpoint(&spec.student_path())?)
    } else {
        None
    };
    let template = spec.quant.clone().map_or_else(|| QuantConfig::rtn(4), Ok)?;
    let id = spec.experiment_id.as_str();
    let mut corpus_cache = None;
    let mut report = AnalysisReport::new();
    let mut done_profile = false;

    for metric in &metrics {
        match metric {
            Metric::WDiscrepancy => {
                let weights = decoder_weights(&teacher);
                let named: Vec<(String, Tensor)> = weights.iter().map(|(n, _, w)| (n.clone(), w.clone())).collect();
                // Rows come out module-major, three widths per module.
                for (i, row) in discrepancy_scan(&named, &[2, 3, 4], &template, None)?.iter().enumerate() {
                    report.push(
                        ReportRow::new(id, Metric::WDiscrepancy, row.normalized)
                            .bits(row.bits)
                            .module(&row.name)
                            .layer(weights[i / 3].1),
                    )?;
                }
            }
            Metric::MinRank => {
                for (name, layer, w) in decoder_weights(&teacher) {
                    let residual = |bits: u8| -> lqec::Result<Tensor> {
                        let mut c = template.clone();
                        c.bits = bits;
                        w.sub(&quant::dequantize(&quant::quantize(&w, &c)?))
                    };
                    let target = residual(4)?.frobenius();
                    for bits in [2u8, 3, 4] {
                        let r = min_rank_for_target(&residual(bits)?, target)?;
                        report.push(
                            ReportRow::new(id, Metric::MinRank, r as f64).bits(bits).module(&name).layer(layer),
                        )?;
                    }
                }
            }
            Metric::RelErrorHead | Metric::RelErrorLayer => {
                if done_profile {
                    continue;
                }
                done_profile = true;
                let corpus: &Corpus = cached(&mut corpus_cache, spec)?;
                let windows = contiguous_windows(corpus.heldout(), spec.eval_seq_len);
                let probe = Batch::from_windows(&windows[..windows.len().min(PROBE_WINDOWS)])?;
                let p = layer_error_profile(&teacher, student.as_ref().expect("loaded"), &probe)?;
                if metrics.contains(&Metric::RelErrorLayer) {
                    for (n, e) in p.layers.iter().enumerate() {
                        report.push(ReportRow::new(id, Metric::RelErrorLayer, *e).layer(n))?;
                    }
                }
                if metrics.contains(&Metric::RelErrorHead) {
                    report.push(ReportRow::new(id, Metric::RelErrorHead, p.head).module("lm_head"))?;
                }
            }
            Metric::SvMeanMag => {
                let student = student.as_ref().expect("loaded");
                for m in student.modules() {
                    if let Some(a) = &m.adapter {
                        for (i, v) in singular_profile(a, a.rank())?.into_iter().enumerate() {
                            report.push(
                                ReportRow::new(id, Metric::SvMeanMag, v).rank(i + 1).module(m.name()).layer(m.layer),
                            )?;
                        }
                    }
                }
            }
            Metric::Ppl => {
                let corpus: &Corpus = cached(&mut corpus_cache, spec)?;
                for (scope, model) in [("teacher", &teacher), ("student", student.as_ref().expect("loaded"))] {
                    let ppl = heldout_ppl(model, corpus, spec.eval_seq_len)?;
                    report.push(ReportRow::new(id, Metric::Ppl, ppl).scope(scope))?;
                }
            }
            Metric::PplSigma => {
                let corpus: &Corpus = cached(&mut corpus_cache, spec)?;
                let sweep = spec.sweep.as_ref().expect("validated");
                let sweep_spec = SweepSpec {
                    experiment_id: id.to_string(),
                    quant: template.clone(),
                    scopes: sweep.scopes.clone(),
                    ranks: sweep.ranks.clone(),
                    seeds: spec.seeds.clone(),
                    template: spec.lqec_config().expect("validated"),
                    calib_samples: spec.calibration.samples,
                    calib_seq_len: spec.calibration.seq_len,
                    eval_seq_len: spec.eval_seq_len,
                };
                report.extend(rank_sweep(&teacher, corpus, &sweep_spec)?);
            }
        }
    }

    report.metadata.model_config_hash = Some(content_hash(&serde_json::to_vec(&teacher.config)?));
    report.metadata.quant_config = spec.quant.as_ref().map(serde_json::to_value).transpose()?;
    let (csv, _) = report.write(&spec.output_dir, "report")?;
    println!("wrote {} rows to {}", report.rows.len(), csv.display());
    for metric in Metric::ALL {
        let values: Vec<f64> = report.rows_for(metric).map(|r| r.value).collect();
        if values.is_empty() {
            continue;
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        println!("{metric}: {} rows, mean {mean:.6}", values.len());
        if plots {
            match render_svg(&report, metric) {
                Ok(svg) => {
                    let path = spec.output_dir.join(format!("report_{metric}.svg"));
                    fs::write(&path, svg).map_err(|e| CliError::io(&path, e))?;
                }
                Err(e) => eprintln!("no plot for {metric}: {e}"),
            }
        }
    }
    Ok(())
}

fn cached<'a>(slot: &'a mut Option<Corpus>, spec: &ExperimentSpec) -> Result<&'a Corpus, CliError> {
    if slot.is_none() {
        *slot = Some(corpus(spec)?);
    }
    Ok(slot.as_ref().expect("just filled"))
}
