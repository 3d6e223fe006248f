use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

use lqec::analysis::{perplexity, AnalysisReport, Metric};
use lqec::data::{load_corpus, synthetic_text, TextStyle};
use lqec::model::{load_checkpoint, save_checkpoint, write_checkpoint, DecoderModel, ModelConfig};
use lqec::quant::QuantMethod;
use lqec::Tensor;

fn model_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 32,
        n_heads: 2,
        d_ffn: 64,
        vocab_size: 256,
        max_seq_len: 32,
        seed: 0,
    }
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("corpus.txt"), synthetic_text(3, 40_000, TextStyle::Prose)).unwrap();
        fs::write(dir.path().join("task.txt"), synthetic_text(4, 20_000, TextStyle::Dialogue)).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn base_spec(&self) -> Value {
        json!({
            "experiment_id": "cli-test",
            "model": model_config(),
            "corpus": "corpus.txt",
            "output_dir": "out",
            "seeds": [7],
            "pretrain": { "steps": 120, "lr": 3e-3, "batch_size": 8, "seq_len": 32 },
            "quant": { "bits": 2, "group_size": 16, "method": "rtn" },
            "lqec": { "scope": "rilq", "rank": 8, "max_steps": 60, "lr": 2e-3, "batch_size": 4 },
            "calibration": { "samples": 16, "seq_len": 32 },
            "finetune": { "task_corpus": "task.txt", "steps": 20, "batch_size": 4, "seq_len": 32 },
            "eval_seq_len": 32
        })
    }

    fn write_spec(&self, name: &str, spec: &Value) -> PathBuf {
        let p = self.path(name);
        fs::write(&p, serde_json::to_string_pretty(spec).unwrap()).unwrap();
        p
    }

    fn run(&self, args: &[&str], spec: &Path) -> Output {
        Command::new(env!("CARGO_BIN_EXE_lqec"))
            .args(args)
            .arg(spec)
            .output()
            .unwrap()
    }

    fn run_ok(&self, args: &[&str], spec: &Path) -> String {
        let out = self.run(args, spec);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn heldout_ppl(&self, checkpoint: &str) -> f64 {
        let corpus = load_corpus(&self.path("corpus.txt"), 0.1).unwrap();
        let model = load_checkpoint(&self.path(checkpoint)).unwrap();
        perplexity(&model, corpus.heldout(), 32, 32).unwrap()
    }
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn pretrain_writes_a_checkpoint() {
    let f = Fixture::new();
    let spec = f.write_spec("spec.json", &f.base_spec());
    let stdout = f.run_ok(&["pretrain"], &spec);
    assert!(stdout.contains("held-out ppl"));
    assert!(f.path("out/teacher.ckpt").is_file());
    assert!(f.path("out/pretrain.spec.json").is_file());
}

#[test]
fn missing_corpus_is_a_spec_error_naming_the_path() {
    let f = Fixture::new();
    let mut s = f.base_spec();
    s["corpus"] = json!("nowhere.txt");
    let spec = f.write_spec("spec.json", &s);
    let out = f.run(&["pretrain"], &spec);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("nowhere.txt"));
}

#[test]
fn zero_steps_saves_the_freshly_built_model() {
    let f = Fixture::new();
    let spec = f.write_spec("spec.json", &f.base_spec());
    f.run_ok(&["pretrain", "--steps", "0", "--seed", "11"], &spec);
    let mut cfg = model_config();
    cfg.seed = 11;
    let fresh = write_checkpoint(&DecoderModel::build(&cfg).unwrap()).unwrap();
    assert_eq!(fs::read(f.path("out/teacher.ckpt")).unwrap(), fresh);
}

#[test]
fn two_bit_quantization_hurts_perplexity() {
    let f = Fixture::new();
    let spec = f.write_spec("spec.json", &f.base_spec());
    f.run_ok(&["pretrain"], &spec);
    let stdout = f.run_ok(&["quantize"], &spec);
    assert!(stdout.contains("2-bit") && stdout.contains("(selected)"));

    let mut s = f.base_spec();
    s["student"] = json!("out/quantized.ckpt");
    let eval_spec = f.write_spec("eval.json", &s);
    let printed = f.run_ok(&["eval"], &eval_spec);
    let q_ppl: f64 = printed.trim().rsplit(' ').next().unwrap().parse().unwrap();
    assert_eq!(q_ppl, f.heldout_ppl("out/quantized.ckpt"));
    assert!(q_ppl > f.heldout_ppl("out/teacher.ckpt"));

    let reloaded = load_checkpoint(&f.path("out/quantized.ckpt")).unwrap();
    for m in reloaded.modules() {
        let q = m.weight.as_quantized().expect("decoder weights stay quantized");
        assert_eq!((q.bits, q.group_size, q.method), (2, 16, QuantMethod::Rtn));
    }
}

#[test]
fn out_of_range_bits_is_a_spec_error() {
    let f = Fixture::new();
    let mut s = f.base_spec();
    s["quant"]["bits"] = json!(5);
    let spec = f.write_spec("spec.json", &s);
    let out = f.run(&["quantize"], &spec);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn rilq_compensation_beats_quantization_alone() {
    let f = Fixture::new();
    let spec = f.write_spec("spec.json", &f.base_spec());
    f.run_ok(&["pretrain"], &spec);
    f.run_ok(&["quantize"], &spec);
    let stdout = f.run_ok(&["compensate"], &spec);
    assert!(stdout.contains("final loss"));
    assert!(f.heldout_ppl("out/compensated.ckpt") < f.heldout_ppl("out/quantized.ckpt"));
    let run: Value = serde_json::from_str(&fs::read_to_string(f.path("out/compensation_run.json")).unwrap()).unwrap();
    assert_eq!(run["steps_run"], json!(60));
}

#[test]
fn full_rank_weight_svd_recovers_the_teacher() {
    let f = Fixture::new();
    let mut s = f.base_spec();
    s["lqec"] = json!({ "scope": "weight_svd", "rank": 32, "svd_iters": 1 });
    let spec = f.write_spec("spec.json", &s);
    f.run_ok(&["pretrain"], &spec);
    f.run_ok(&["compensate"], &spec);
    let (student, teacher) = (f.heldout_ppl("out/compensated.ckpt"), f.heldout_ppl("out/teacher.ckpt"));
    assert!((student / teacher - 1.0).abs() < 0.02, "{student} vs {teacher}");
}

#[test]
fn invalid_scope_or_rank_is_a_spec_error() {
    let f = Fixture::new();
    let spec = f.write_spec("spec.json", &f.base_spec());
    f.run_ok(&["pretrain", "--steps", "0"], &spec);

    let mut s = f.base_spec();
    s["lqec"]["scope"] = json!("global");
    let bad_scope = f.write_spec("scope.json", &s);
    assert_eq!(f.run(&["compensate"], &bad_scope).status.code(), Some(2));

    let mut s = f.base_spec();
    s["lqec"]["rank"] = json!(33);
    let bad_rank = f.write_spec("rank.json", &s);
    let out = f.run(&["compensate"], &bad_rank);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("rank 33"));

    let mut s = f.base_spec();
    s["lqec"]["rank"] = json!(0);
    let zero_rank = f.write_spec("zero.json", &s);
    assert_eq!(f.run(&["compensate"], &zero_rank).status.code(), Some(2));
}

fn output_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| {
            let name = p.file_name().unwrap().to_string_lossy();
            // Wall-clock data lives only in these.
            !name.ends_with(".meta.json") && name != "report.json"
        })
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn reruns_produce_identical_files() {
    let f = Fixture::new();
    let mut s = f.base_spec();
    s["lqec"]["max_steps"] = json!(10);
    s["pretrain"]["steps"] = json!(10);
    s["analysis"] = json!(["w_discrepancy", "rel_error_layer", "sv_mean_mag"]);
    let spec = f.write_spec("spec.json", &s);
    let mut snapshots = Vec::new();
    for out in ["run_a", "run_b"] {
        for cmd in ["pretrain", "quantize", "compensate", "finetune", "analyze"] {
            f.run_ok(&[cmd, "--out", f.path(out).to_str().unwrap()], &spec);
        }
        snapshots.push(output_files(&f.path(out)));
    }
    // Archived specs name their own output directory; everything else must match.
    let strip = |v: &[(String, Vec<u8>)]| -> Vec<(String, Vec<u8>)> {
        v.iter().filter(|(n, _)| !n.ends_with(".spec.json")).cloned().collect()
    };
    assert_eq!(strip(&snapshots[0]), strip(&snapshots[1]));
    assert!(snapshots[0].iter().any(|(n, _)| n == "finetuned.ckpt"));
    assert!(snapshots[0].iter().any(|(n, _)| n == "report.csv"));
}

#[test]
fn w_discrepancy_rows_at_four_bits_are_exactly_one() {
    let f = Fixture::new();
    let mut s = f.base_spec();
    s["analysis"] = json!(["w_discrepancy"]);
    let spec = f.write_spec("spec.json", &s);
    f.run_ok(&["pretrain", "--steps", "5"], &spec);
    f.run_ok(&["analyze", "--plots"], &spec);
    let csv = fs::read_to_string(f.path("out/report.csv")).unwrap();
    let rows = AnalysisReport::rows_from_csv(&csv).unwrap();
    assert_eq!(rows.len(), 8 * 3);
    for r in &rows {
        assert_eq!(r.metric, Metric::WDiscrepancy);
        if r.bits == Some(4) {
            assert_eq!(r.value, 1.0);
        } else {
            assert!(r.value > 1.0);
        }
    }
    assert!(f.path("out/report_w_discrepancy.svg").is_file());
}

#[test]
fn eval_of_zero_logit_checkpoint_prints_256() {
    let f = Fixture::new();
    let mut model = DecoderModel::build(&model_config()).unwrap();
    model.lm_head = Tensor::zeros(model.lm_head.shape());
    save_checkpoint(&model, &f.path("zero.ckpt")).unwrap();
    let mut s = f.base_spec();
    s["checkpoint"] = json!("zero.ckpt");
    let spec = f.write_spec("spec.json", &s);
    let stdout = f.run_ok(&["eval"], &spec);
    assert!(stdout.contains("256.0"), "{stdout}");
}

#[test]
fn unknown_analysis_lists_the_registry() {
    let f = Fixture::new();
    let mut s = f.base_spec();
    s["analysis"] = json!(["accuracy"]);
    let spec = f.write_spec("spec.json", &s);
    let out = f.run(&["analyze"], &spec);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    for m in Metric::ALL {
        assert!(err.contains(m.as_str()), "{err}");
    }
}

#[test]
fn rank_sweep_emits_sigma_rows() {
    let f = Fixture::new();
    let mut s = f.base_spec();
    s["analysis"] = json!(["ppl_sigma"]);
    s["sweep"] = json!({ "scopes": ["weight_svd", "rilq"], "ranks": [4, 8, 16, 32] });
    s["lqec"]["max_steps"] = json!(5);
    s["seeds"] = json!([1, 2]);
    let spec = f.write_spec("spec.json", &s);
    f.run_ok(&["pretrain", "--steps", "30"], &spec);
    f.run_ok(&["analyze"], &spec);
    let rows = AnalysisReport::rows_from_csv(&fs::read_to_string(f.path("out/report.csv")).unwrap()).unwrap();
    let sigma: Vec<_> = rows.iter().filter(|r| r.metric == Metric::PplSigma).collect();
    assert_eq!(sigma.len(), 4);
    assert_eq!(rows.iter().filter(|r| r.metric == Metric::Ppl).count(), 16);
    assert!(sigma.iter().all(|r| r.rank.is_none() && r.value >= 0.0));
}

#[test]
fn usage_errors_exit_with_two() {
    let out = Command::new(env!("CARGO_BIN_EXE_lqec")).arg("bogus").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let f = Fixture::new();
    fs::write(f.path("broken.json"), "{ not json").unwrap();
    assert_eq!(f.run(&["eval"], &f.path("broken.json")).status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_with_three() {
    let f = Fixture::new();
    fs::write(f.path("garbage.ckpt"), b"not a checkpoint").unwrap();
    let mut s = f.base_spec();
    s["checkpoint"] = json!("garbage.ckpt");
    let spec = f.write_spec("spec.json", &s);
    let out = f.run(&["eval"], &spec);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("parse error"));
}
