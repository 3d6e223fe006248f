//! Acceptance gate: the eleven criteria at their stated tolerances, one
//! PASS/FAIL line each. Runs as a plain binary so the lines are never
//! swallowed by output capture.
//!
//! Positional arguments select criteria by number (`-- 1 4 8`); with none,
//! all run. Trend criteria 5, 6, 7, 9 and 10 share one set of seeded runs,
//! which also feed four supplementary lines for the per-operation trend
//! examples (head error, singular profiles, quantized perplexity, early
//! fine-tuning).

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use lqec::analysis::{
    layer_error_profile, min_rank_for_target, perplexity, population_std, rank_sweep, singular_profile,
    AnalysisReport, SweepSpec, CSV_HEADER,
};
use lqec::data::{contiguous_windows, sample_calibration, synthetic_text, CalibrationSet, Corpus, TextStyle};
use lqec::lqec::{
    build_compensated, capture_teacher, finetune_task, loftq_init, model_loss, scope_loss_graph, FinetuneConfig,
    LqecConfig, ModelLossTarget, Scope,
};
use lqec::model::{
    read_checkpoint, train_base, write_checkpoint, Batch, DecoderModel, LoraAdapter, LoraInit, ModelConfig, ModuleKind,
    TrainConfig, Trainable,
};
use lqec::quant::{dequantize, discrepancy, quantize, QuantConfig, QuantMethod};
use lqec::rng::SplitMix64;
use lqec::tensor::{gradcheck, primitive_gradchecks, Graph, Tensor};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const SWEEP_RANKS: [usize; 4] = [4, 8, 16, 32];

/// Desk-scale recipe shared by the trend criteria.
const PRETRAIN_STEPS: usize = 300;
const PRETRAIN_LR: f64 = 3e-3;
const CORPUS_BYTES: usize = 300_000;
const CALIB_SAMPLES: usize = 64;
const SEQ_LEN: usize = 64;
const COMP_STEPS: usize = 250;
const COMP_LR: f64 = 1e-3;
const COMP_BATCH: usize = 4;
const FINETUNE_STEPS: usize = 500;
const FINETUNE_LR: f64 = 1e-3;
const FINETUNE_EVAL: [usize; 2] = [100, FINETUNE_STEPS];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn main() -> ExitCode {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let selected = |n: usize| wanted.is_empty() || wanted.contains(&n);
    let names = [
        "gradient correctness",
        "quantizer contract",
        "sub-step monotonicity",
        "exact cancellation",
        "rank insensitivity",
        "scope ordering",
        "head-error signature",
        "minimum-rank signature",
        "ground-truth loss ablation",
        "fine-tuning initialization",
        "determinism and i/o",
    ];

    let mut trends: Option<Vec<SeedRuns>> = None;
    let mut failures = 0;
    for (i, name) in names.iter().enumerate() {
        let n = i + 1;
        if !selected(n) {
            continue;
        }
        let start = Instant::now();
        if matches!(n, 5 | 6 | 7 | 9 | 10) && trends.is_none() {
            trends = Some(SEEDS.iter().map(|&s| seed_runs(s)).collect());
        }
        let result = match n {
            1 => criterion_gradients(),
            2 => criterion_quantizer(),
            3 => criterion_loftq(),
            4 => criterion_cancellation(),
            5 => criterion_rank_insensitivity(trends.as_deref().unwrap()),
            6 => criterion_scope_ordering(trends.as_deref().unwrap()),
            7 => criterion_head_error(trends.as_deref().unwrap()),
            8 => criterion_min_rank(),
            9 => criterion_gt_ablation(trends.as_deref().unwrap()),
            10 => criterion_finetune(trends.as_deref().unwrap()),
            _ => criterion_determinism(),
        };
        let verdict = if result.pass { "PASS" } else { "FAIL" };
        if !result.pass {
            failures += 1;
        }
        println!(
            "criterion {n:>2} {verdict} {name}: {} [{:.1}s]",
            result.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if let Some(runs) = trends.as_deref() {
        let extra = [
            ("S1", "head error rilq vs linear", supplementary_head_error(runs)),
            ("S2", "singular-vector activation", supplementary_profiles(runs)),
            ("S3", "quantized perplexity", supplementary_quantized_ppl(runs)),
            ("S4", "fine-tuning at both checkpoints", supplementary_finetune(runs)),
        ];
        for (tag, name, result) in extra {
            let verdict = if result.pass { "PASS" } else { "FAIL" };
            failures += usize::from(!result.pass);
            println!("supplementary {tag} {verdict} {name}: {}", result.detail);
        }
    }
    if failures == 0 {
        println!("acceptance: all selected criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failures} criterion(s) failed");
        ExitCode::FAILURE
    }
}

fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ffn: 32,
        vocab_size: 256,
        max_seq_len: 16,
        seed,
    }
}

fn random_batch(seed: u64, n_seqs: usize, seq_len: usize) -> Batch {
    let mut rng = SplitMix64::new(seed);
    Batch::new((0..n_seqs * seq_len).map(|_| rng.below(256) as usize).collect(), seq_len).unwrap()
}

fn criterion_gradients() -> Outcome {
    let prims = primitive_gradchecks();
    let (worst_name, worst_prim) = prims
        .iter()
        .copied()
        .fold(("", 0.0f64), |acc, (n, e)| if e > acc.1 { (n, e) } else { acc });

    let fp = DecoderModel::build(&tiny_config(12)).unwrap();
    let mut q = fp.quantized(&QuantConfig::new(2, 16, QuantMethod::Rtn).unwrap()).unwrap();
    q.attach_lora(2, LoraInit::GaussianZero, None, 5).unwrap();
    // Non-zero L2 so both factors carry gradient.
    let mut rng = SplitMix64::new(77);
    let adapters = q
        .adapters()
        .into_iter()
        .map(|a| {
            a.map(|a| {
                let l2 = Tensor::randn(a.l2.shape(), 0.3, &mut rng);
                LoraAdapter::new(a.l1, l2).unwrap()
            })
        })
        .collect();
    q.set_adapters(adapters).unwrap();
    let b = random_batch(7, 2, 6);
    let cap = capture_teacher(&fp, &b).unwrap();

    let mut worst_composite = 0.0f64;
    let mut checks = 0;
    for scope in [Scope::Linear, Scope::Layer, Scope::Model, Scope::Rilq] {
        let cfg = LqecConfig::new(scope, 2, 0);
        for (layer, kind) in [(0, ModuleKind::Qkv), (0, ModuleKind::Ffn1), (1, ModuleKind::Out), (1, ModuleKind::Ffn2)] {
            for second in [false, true] {
                let a = q.module(layer, kind).adapter.clone().unwrap();
                let point = if second { a.l2 } else { a.l1 };
                let err = gradcheck(
                    |g: &mut Graph, p| {
                        let mut bound = q.bind(g, Trainable::Nothing);
                        let lin = match kind {
                            ModuleKind::Qkv => &mut bound.layers[layer].qkv,
                            ModuleKind::Out => &mut bound.layers[layer].out,
                            ModuleKind::Ffn1 => &mut bound.layers[layer].ffn1,
                            ModuleKind::Ffn2 => &mut bound.layers[layer].ffn2,
                        };
                        if second {
                            lin.l2 = Some(p);
                        } else {
                            lin.l1 = Some(p);
                        }
                        Ok(scope_loss_graph(g, &fp, &cap, &q, &bound, &b, &cfg)?.total)
                    },
                    &point,
                    1e-5,
                )
                .unwrap();
                worst_composite = worst_composite.max(err);
                checks += 1;
            }
        }
    }
    outcome(
        worst_prim < 1e-5 && worst_composite < 1e-5,
        format!(
            "{} primitives worst {worst_prim:.2e} ({worst_name}); {checks} composite checks worst {worst_composite:.2e}",
            prims.len()
        ),
    )
}

fn criterion_quantizer() -> Outcome {
    let mut problems = Vec::new();
    let mut rng = SplitMix64::new(2024);
    for k in 0..50 {
        let w = Tensor::randn(&[64, 48], 1.0 + (k % 5) as f64, &mut rng);
        let mut by_method: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for method in [QuantMethod::Rtn, QuantMethod::Clip, QuantMethod::Nf] {
            for bits in [2u8, 3, 4] {
                let cfg = QuantConfig::new(bits, 16, method).unwrap();
                let q = quantize(&w, &cfg).unwrap();
                let d = dequantize(&q);
                for i in 0..64 {
                    for j in 0..48 {
                        let g = q.group_of(i, j);
                        let code = q.codes[i * 48 + j];
                        if code > cfg.max_code() || d.get2(i, j) != q.level(g, code) {
                            problems.push(format!("matrix {k} {method:?} b={bits}: off-grid value at ({i},{j})"));
                        }
                        if method != QuantMethod::Nf {
                            let s = q.scales[g];
                            let z = q.zeros[g] as f64;
                            if d.get2(i, j) != s * (code as f64 - z) {
                                problems.push(format!("matrix {k} {method:?}: reconstruction is not s(q-z)"));
                            }
                            let (lo, hi) = (s * -z, s * (cfg.max_code() as f64 - z));
                            let x = w.get2(i, j);
                            if x >= lo && x <= hi && (x - d.get2(i, j)).abs() > s / 2.0 * (1.0 + 1e-12) {
                                problems.push(format!("matrix {k} {method:?}: in-range error above s/2"));
                            }
                        }
                    }
                }
                by_method.entry(method.as_str()).or_default().push(discrepancy(&w, &cfg).unwrap());
            }
        }
        for (m, d) in &by_method {
            if !(d[0] >= d[1] && d[1] >= d[2]) {
                problems.push(format!("matrix {k} {m}: discrepancy not monotone in bits {d:?}"));
            }
        }
        for b in 0..3 {
            if by_method["clip"][b] > by_method["rtn"][b] {
                problems.push(format!("matrix {k}: clip worse than rtn at bits index {b}"));
            }
        }
    }
    problems.dedup();
    match problems.first() {
        None => outcome(true, "50 matrices x 3 methods x 3 widths conform"),
        Some(p) => outcome(false, format!("{} violations, first: {p}", problems.len())),
    }
}

fn criterion_loftq() -> Outcome {
    let cfg = QuantConfig::new(2, 16, QuantMethod::Rtn).unwrap();
    let mut rng = SplitMix64::new(31);
    let mut violations = 0;
    let mut instances = 0;
    for k in 0..20 {
        let w = Tensor::randn(&[64, 48], 1.0, &mut rng);
        for rank in [4, 8, 16] {
            let r = loftq_init(&w, &cfg, rank, 5).unwrap();
            instances += 1;
            if r.trace.iter().any(|s| s.after_svd > s.before_svd * (1.0 + 1e-12)) {
                violations += 1;
                println!("  loftq instance {k} r={rank}: sub-step increased the discrepancy");
            }
        }
    }
    let w = Tensor::randn(&[64, 48], 1.0, &mut rng);
    let full = loftq_init(&w, &cfg, 48, 1).unwrap();
    let rel = full.final_discrepancy() / w.frobenius();
    outcome(
        violations == 0 && rel < 1e-8,
        format!("{}/{instances} instances monotone; full-rank relative discrepancy {rel:.2e}", instances - violations),
    )
}

fn criterion_cancellation() -> Outcome {
    let teacher = DecoderModel::build(&ModelConfig::desk(4)).unwrap();
    let mut student = teacher.quantized(&QuantConfig::rtn(2).unwrap()).unwrap();
    student.attach_lora(128, LoraInit::SvdResidual, Some(&teacher), 0).unwrap();
    let (mut worst_loss, mut worst_logit) = (0.0f64, 0.0f64);
    for k in 0..10 {
        let b = random_batch(500 + k, 4, 64);
        worst_loss = worst_loss.max(model_loss(&teacher, &student, &b, ModelLossTarget::FinalHidden).unwrap());
        let t = teacher.forward_batch(&b, false).unwrap().logits;
        let s = student.forward_batch(&b, false).unwrap().logits;
        worst_logit = worst_logit.max(t.max_abs_diff(&s));
    }
    outcome(
        worst_loss < 1e-8 && worst_logit < 1e-8,
        format!("10 batches: model loss <= {worst_loss:.2e}, logit gap <= {worst_logit:.2e}"),
    )
}

fn criterion_min_rank() -> Outcome {
    let mut lines = Vec::new();
    let mut pass = true;
    for &seed in &SEEDS {
        let model = DecoderModel::build(&ModelConfig::desk(seed)).unwrap();
        let mut cells = Vec::new();
        for kind in ModuleKind::ALL {
            let w = model.module(0, kind).weight.effective().clone();
            let err = |bits: u8| {
                let q = quantize(&w, &QuantConfig::rtn(bits).unwrap()).unwrap();
                w.sub(&dequantize(&q)).unwrap()
            };
            let target = err(4).frobenius();
            let r2 = min_rank_for_target(&err(2), target).unwrap();
            let r3 = min_rank_for_target(&err(3), target).unwrap();
            pass &= r2 > r3;
            cells.push(format!("{}:{r2}>{r3}", kind.as_str()));
        }
        lines.push(format!("seed {seed} [{}]", cells.join(" ")));
    }
    outcome(pass, lines.join("; "))
}

/// Everything the trend criteria need from one seed.
struct SeedRuns {
    seed: u64,
    teacher_ppl: f64,
    quant_only_ppl: [f64; 2],
    /// Held-out PPL per (bits index, scope, rank).
    sweep: BTreeMap<(usize, &'static str, usize), f64>,
    scope_ppl: BTreeMap<&'static str, f64>,
    head_error: BTreeMap<&'static str, (f64, Vec<f64>)>,
    /// Per scope: FFN1 profile sum and active Q-portion directions, over all layers.
    profiles: BTreeMap<&'static str, (f64, Vec<Vec<f64>>)>,
    /// Held-out task loss at each of `FINETUNE_EVAL` steps.
    task_loss: BTreeMap<&'static str, [f64; 2]>,
}

/// FFN1 profile sum over layers and each layer's Q-portion profile
/// (left singular vectors of `L1 · L2[Q rows]ᵀ`).
fn adapter_profiles(student: &DecoderModel, rank: usize) -> (f64, Vec<Vec<f64>>) {
    let d = student.config.d_model;
    let mut ffn1 = 0.0;
    let mut q = Vec::new();
    for layer in &student.layers {
        let a = layer.ffn1.adapter.as_ref().unwrap();
        ffn1 += singular_profile(a, rank).unwrap().iter().sum::<f64>();
        let qkv = layer.qkv.adapter.as_ref().unwrap();
        let q_part = LoraAdapter::new(qkv.l1.clone(), qkv.l2.row_slice(0, d).unwrap()).unwrap();
        q.push(singular_profile(&q_part, rank).unwrap());
    }
    (ffn1, q)
}

fn comp_config(scope: Scope, rank: usize, seed: u64) -> LqecConfig {
    let mut cfg = LqecConfig::new(scope, rank, seed);
    cfg.max_steps = COMP_STEPS;
    cfg.lr = COMP_LR;
    cfg.batch_size = COMP_BATCH;
    cfg
}

fn seed_runs(seed: u64) -> SeedRuns {
    let start = Instant::now();
    let corpus = Corpus::from_bytes(synthetic_text(seed, CORPUS_BYTES, TextStyle::Prose), 0.1, None).unwrap();
    let mut teacher = DecoderModel::build(&ModelConfig::desk(seed)).unwrap();
    let mut tc = TrainConfig::new(PRETRAIN_STEPS, PRETRAIN_LR);
    tc.seed = seed;
    train_base(&mut teacher, &corpus, &tc).unwrap();
    let ppl = |m: &DecoderModel| perplexity(m, corpus.heldout(), SEQ_LEN, SEQ_LEN).unwrap();
    let calib: CalibrationSet = sample_calibration(&corpus, CALIB_SAMPLES, SEQ_LEN, seed).unwrap();
    let quants = [QuantConfig::rtn(2).unwrap(), QuantConfig::rtn(3).unwrap()];

    let teacher_ppl = ppl(&teacher);
    let quant_only_ppl = [ppl(&teacher.quantized(&quants[0]).unwrap()), ppl(&teacher.quantized(&quants[1]).unwrap())];

    let mut sweep = BTreeMap::new();
    let mut rilq16 = None;
    for (bi, quant) in quants.iter().enumerate() {
        for scope in [Scope::WeightSvd, Scope::Rilq] {
            for rank in SWEEP_RANKS {
                let (student, _) = build_compensated(&teacher, quant, &calib, &comp_config(scope, rank, seed)).unwrap();
                sweep.insert((bi, scope.as_str(), rank), ppl(&student));
                if bi == 0 && scope == Scope::Rilq && rank == 16 {
                    rilq16 = Some(student);
                }
            }
        }
    }

    let eval_windows = contiguous_windows(corpus.heldout(), SEQ_LEN);
    let probe = Batch::from_windows(&eval_windows[..16]).unwrap();
    let mut scope_ppl = BTreeMap::new();
    let mut head_error = BTreeMap::new();
    let mut profiles = BTreeMap::new();
    scope_ppl.insert("rilq", sweep[&(0, "rilq", 16)]);
    let p = layer_error_profile(&teacher, rilq16.as_ref().unwrap(), &probe).unwrap();
    head_error.insert("rilq", (p.head, p.layers));
    for scope in [Scope::Linear, Scope::Layer, Scope::Model] {
        let (student, _) = build_compensated(&teacher, &quants[0], &calib, &comp_config(scope, 16, seed)).unwrap();
        scope_ppl.insert(scope.as_str(), ppl(&student));
        if scope != Scope::Layer {
            let p = layer_error_profile(&teacher, &student, &probe).unwrap();
            head_error.insert(scope.as_str(), (p.head, p.layers));
            profiles.insert(scope.as_str(), adapter_profiles(&student, 16));
        }
    }

    let task = Corpus::from_bytes(synthetic_text(seed + 1000, 120_000, TextStyle::Dialogue), 0.2, None).unwrap();
    let mut ft = FinetuneConfig::new(FINETUNE_STEPS, FINETUNE_LR, seed);
    ft.batch_size = COMP_BATCH;
    ft.seq_len = SEQ_LEN;
    ft.eval_at = FINETUNE_EVAL.to_vec();
    let mut task_loss = BTreeMap::new();
    let mut from_rilq = rilq16.unwrap();
    let mut from_gaussian = teacher.quantized(&quants[0]).unwrap();
    from_gaussian.attach_lora(16, LoraInit::GaussianZero, None, seed).unwrap();
    for (name, student) in [("rilq", &mut from_rilq), ("gaussian_zero", &mut from_gaussian)] {
        let run = finetune_task(student, &task, &ft).unwrap();
        task_loss.insert(name, [run.eval_trace[0].loss, run.eval_trace[1].loss]);
    }

    println!(
        "  seed {seed}: teacher ppl {teacher_ppl:.4}, rtn-only {:.4}/{:.4} (2/3-bit), runs took {:.0}s",
        quant_only_ppl[0],
        quant_only_ppl[1],
        start.elapsed().as_secs_f64()
    );
    SeedRuns {
        seed,
        teacher_ppl,
        quant_only_ppl,
        sweep,
        scope_ppl,
        head_error,
        profiles,
        task_loss,
    }
}

fn sigma(r: &SeedRuns, bits_index: usize, scope: &str) -> f64 {
    let ppls: Vec<f64> = SWEEP_RANKS.iter().map(|&k| r.sweep[&(bits_index, scope, k)]).collect();
    population_std(&ppls)
}

fn criterion_rank_insensitivity(runs: &[SeedRuns]) -> Outcome {
    let mut hits = 0;
    let mut three_bit_ok = true;
    let mut lines = Vec::new();
    for r in runs {
        let (w2, q2) = (sigma(r, 0, "weight_svd"), sigma(r, 0, "rilq"));
        let (w3, q3) = (sigma(r, 1, "weight_svd"), sigma(r, 1, "rilq"));
        if q2 < w2 {
            hits += 1;
        }
        three_bit_ok &= w3 < w2 && q3 < w2;
        lines.push(format!("seed {} 2-bit {q2:.4}/{w2:.4} 3-bit {q3:.4}/{w3:.4}", r.seed));
    }
    outcome(
        hits >= 4 && three_bit_ok,
        format!("sigma(rilq) < sigma(weight_svd) in {hits}/5; {}", lines.join("; ")),
    )
}

fn criterion_scope_ordering(runs: &[SeedRuns]) -> Outcome {
    let mut hits = 0;
    let mut lines = Vec::new();
    for r in runs {
        let p = &r.scope_ppl;
        let ok = p["rilq"] <= p["model"]
            && p["model"] <= p["layer"]
            && p["layer"] <= p["linear"]
            && p["linear"] <= r.quant_only_ppl[0]
            && p["rilq"] < p["linear"];
        hits += ok as usize;
        lines.push(format!(
            "seed {} rilq {:.4} model {:.4} layer {:.4} linear {:.4} none {:.4}",
            r.seed, p["rilq"], p["model"], p["layer"], p["linear"], r.quant_only_ppl[0]
        ));
    }
    outcome(hits >= 4, format!("ordering holds in {hits}/5; {}", lines.join("; ")))
}

fn criterion_head_error(runs: &[SeedRuns]) -> Outcome {
    let mut hits = 0;
    let mut lines = Vec::new();
    for r in runs {
        let (mh, ml) = &r.head_error["model"];
        let (lh, ll) = &r.head_error["linear"];
        let reversed = ml.iter().zip(ll).any(|(m, l)| m > l);
        hits += (mh < lh && reversed) as usize;
        lines.push(format!("seed {} head {mh:.4}<{lh:.4} layers model {ml:.3?} linear {ll:.3?}", r.seed));
    }
    outcome(hits >= 4, format!("signature in {hits}/5; {}", lines.join("; ")))
}

fn criterion_gt_ablation(runs: &[SeedRuns]) -> Outcome {
    // λ = (1, 0) is the model-scope objective, so its run is shared.
    let hits = runs.iter().filter(|r| r.scope_ppl["rilq"] <= r.scope_ppl["model"]).count();
    let lines: Vec<String> = runs
        .iter()
        .map(|r| format!("seed {} {:.4} vs {:.4}", r.seed, r.scope_ppl["rilq"], r.scope_ppl["model"]))
        .collect();
    outcome(hits >= 3, format!("(0.5,0.5) <= (1,0) in {hits}/5; {}", lines.join("; ")))
}

fn criterion_finetune(runs: &[SeedRuns]) -> Outcome {
    let hits = runs.iter().filter(|r| r.task_loss["rilq"][1] < r.task_loss["gaussian_zero"][1]).count();
    let lines: Vec<String> = runs
        .iter()
        .map(|r| {
            format!(
                "seed {} {:.4} vs {:.4} (teacher ppl {:.3})",
                r.seed, r.task_loss["rilq"][1], r.task_loss["gaussian_zero"][1], r.teacher_ppl
            )
        })
        .collect();
    outcome(hits >= 4, format!("rilq init lower in {hits}/5; {}", lines.join("; ")))
}

/// Small end-to-end pipeline returning every artifact's bytes.
fn pipeline(seed: u64) -> Vec<(String, Vec<u8>)> {
    let corpus = Corpus::from_bytes(synthetic_text(seed, 20_000, TextStyle::Prose), 0.2, None).unwrap();
    let mut teacher = DecoderModel::build(&ModelConfig::desk(seed)).unwrap();
    let mut tc = TrainConfig::new(10, PRETRAIN_LR);
    tc.seed = seed;
    tc.batch_size = 4;
    tc.seq_len = 32;
    train_base(&mut teacher, &corpus, &tc).unwrap();
    let quant = QuantConfig::rtn(2).unwrap();
    let calib = sample_calibration(&corpus, 8, 32, seed).unwrap();
    let mut cfg = comp_config(Scope::Rilq, 8, seed);
    cfg.max_steps = 10;
    let (student, run) = build_compensated(&teacher, &quant, &calib, &cfg).unwrap();
    let (svd_student, _) = build_compensated(&teacher, &quant, &calib, &comp_config(Scope::WeightSvd, 8, seed)).unwrap();
    let mut template = cfg.clone();
    template.max_steps = 3;
    let spec = SweepSpec {
        experiment_id: "determinism".into(),
        quant: quant.clone(),
        scopes: vec![Scope::WeightSvd, Scope::Rilq],
        ranks: vec![4, 8],
        seeds: vec![seed],
        template,
        calib_samples: 8,
        calib_seq_len: 32,
        eval_seq_len: 64,
    };
    let report: AnalysisReport = rank_sweep(&teacher, &corpus, &spec).unwrap();
    vec![
        ("teacher".into(), write_checkpoint(&teacher).unwrap()),
        ("quantized".into(), write_checkpoint(&teacher.quantized(&quant).unwrap()).unwrap()),
        ("rilq student".into(), write_checkpoint(&student).unwrap()),
        ("weight_svd student".into(), write_checkpoint(&svd_student).unwrap()),
        ("run json".into(), run.unwrap().to_json(1, false).unwrap().into_bytes()),
        ("sweep csv".into(), report.to_csv().unwrap().into_bytes()),
    ]
}

fn criterion_determinism() -> Outcome {
    let a = pipeline(9);
    let b = pipeline(9);
    let mut problems = Vec::new();
    for ((name, x), (_, y)) in a.iter().zip(&b) {
        if x != y {
            problems.push(format!("{name} differs between reruns"));
        }
        if name.contains("student") || name == "teacher" || name == "quantized" {
            let again = write_checkpoint(&read_checkpoint(x).unwrap()).unwrap();
            if &again != x {
                problems.push(format!("{name} save-load-save is not byte-identical"));
            }
        }
    }
    let csv = String::from_utf8(a.last().unwrap().1.clone()).unwrap();
    let header_ok = csv.lines().next() == Some(CSV_HEADER.join(",").as_str());
    let rows = AnalysisReport::rows_from_csv(&csv);
    let width_ok = csv.lines().all(|l| l.split(',').count() == CSV_HEADER.len());
    if !header_ok || rows.is_err() || !width_ok {
        problems.push("sweep CSV does not conform to the header".into());
    }
    match problems.first() {
        None => outcome(
            true,
            format!("{} artifacts identical across reruns; checkpoints round-trip; {} CSV rows conform", a.len(), rows.unwrap().len()),
        ),
        Some(p) => outcome(false, format!("{} problems, first: {p}", problems.len())),
    }
}

fn supplementary_head_error(runs: &[SeedRuns]) -> Outcome {
    let hits = runs.iter().filter(|r| r.head_error["rilq"].0 < r.head_error["linear"].0).count();
    let lines: Vec<String> = runs
        .iter()
        .map(|r| format!("seed {} {:.4} vs {:.4}", r.seed, r.head_error["rilq"].0, r.head_error["linear"].0))
        .collect();
    outcome(hits >= 4, format!("rilq head error lower in {hits}/5; {}", lines.join("; ")))
}

/// A Q-portion direction is active when its σ-weighted magnitude reaches a
/// tenth of the largest entry of either scope's profile in that layer.
fn active_directions(own: &[Vec<f64>], other: &[Vec<f64>]) -> usize {
    own.iter()
        .zip(other)
        .map(|(a, b)| {
            let peak = a.iter().chain(b).fold(0.0f64, |m, &v| m.max(v));
            a.iter().filter(|&&v| v >= 0.1 * peak).count()
        })
        .sum()
}

fn supplementary_profiles(runs: &[SeedRuns]) -> Outcome {
    let mut hits = 0;
    let mut lines = Vec::new();
    for r in runs {
        let (mf, mq) = &r.profiles["model"];
        let (lf, lq) = &r.profiles["linear"];
        let (ma, la) = (active_directions(mq, lq), active_directions(lq, mq));
        hits += (mf > lf && ma > la) as usize;
        lines.push(format!("seed {} ffn1 {mf:.3} vs {lf:.3}, active q {ma} vs {la}", r.seed));
    }
    outcome(hits >= 4, format!("model scope activates more in {hits}/5; {}", lines.join("; ")))
}

fn supplementary_quantized_ppl(runs: &[SeedRuns]) -> Outcome {
    let hits = runs.iter().filter(|r| r.teacher_ppl < r.quant_only_ppl[0]).count();
    let lines: Vec<String> = runs
        .iter()
        .map(|r| format!("seed {} {:.4} < {:.4}", r.seed, r.teacher_ppl, r.quant_only_ppl[0]))
        .collect();
    outcome(hits == 5, format!("teacher below 2-bit in {hits}/5; {}", lines.join("; ")))
}

fn supplementary_finetune(runs: &[SeedRuns]) -> Outcome {
    let mut verdicts = Vec::new();
    for (i, step) in FINETUNE_EVAL.iter().enumerate() {
        let hits = runs.iter().filter(|r| r.task_loss["rilq"][i] < r.task_loss["gaussian_zero"][i]).count();
        let losses: Vec<String> = runs
            .iter()
            .map(|r| format!("{:.4} vs {:.4}", r.task_loss["rilq"][i], r.task_loss["gaussian_zero"][i]))
            .collect();
        verdicts.push((hits, format!("step {step}: rilq lower in {hits}/5 ({})", losses.join(", "))));
    }
    let pass = verdicts.iter().all(|(hits, _)| *hits >= 4);
    outcome(pass, verdicts.into_iter().map(|(_, l)| l).collect::<Vec<_>>().join("; "))
}
