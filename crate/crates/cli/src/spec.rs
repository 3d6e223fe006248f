//! The JSON experiment spec every command reads.
//!
//! Relative paths resolve against the spec file's directory. Validation runs
//! before any work starts and reports every problem it finds.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use lqec::analysis::Metric;
use lqec::lqec::{FinetuneConfig, LossWeights, LqecConfig, ModelLossTarget, Scope};
use lqec::model::{ModelConfig, TrainConfig};
use lqec::quant::QuantConfig;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default = "default_id")]
    pub experiment_id: String,
    /// Architecture for `pretrain`.
    #[serde(default)]
    pub model: Option<ModelConfig>,
    /// Teacher checkpoint; defaults to `teacher.ckpt` in the output directory.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    /// Student checkpoint for `finetune`, `eval` and `analyze`.
    #[serde(default)]
    pub student: Option<PathBuf>,
    #[serde(default)]
    pub quant: Option<QuantConfig>,
    #[serde(default)]
    pub lqec: Option<LqecSection>,
    pub corpus: PathBuf,
    #[serde(default = "default_heldout")]
    pub heldout_fraction: f64,
    #[serde(default)]
    pub calibration: CalibrationSection,
    pub output_dir: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub finetune: Option<FinetuneSection>,
    /// Metric names for `analyze`.
    #[serde(default)]
    pub analysis: Vec<String>,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
    #[serde(default = "default_seq")]
    pub eval_seq_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSection {
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_seq")]
    pub seq_len: usize,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        Self {
            samples: default_samples(),
            seq_len: default_seq(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    #[serde(default = "default_pretrain_steps")]
    pub steps: usize,
    #[serde(default = "default_pretrain_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_seq")]
    pub seq_len: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            steps: default_pretrain_steps(),
            lr: default_pretrain_lr(),
            batch_size: default_batch(),
            seq_len: default_seq(),
        }
    }
}

/// Compensation settings; anything omitted takes the library default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqecSection {
    pub scope: Scope,
    pub rank: usize,
    pub max_steps: Option<usize>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub loss_weights: Option<LossWeights>,
    pub early_stop_patience: Option<usize>,
    pub svd_iters: Option<usize>,
    pub model_loss_target: Option<ModelLossTarget>,
    pub smoothing_window: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    pub task_corpus: PathBuf,
    #[serde(default = "default_heldout")]
    pub heldout_fraction: f64,
    #[serde(default = "default_finetune_steps")]
    pub steps: usize,
    #[serde(default = "default_finetune_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_seq")]
    pub seq_len: usize,
    #[serde(default)]
    pub eval_at: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub scopes: Vec<Scope>,
    pub ranks: Vec<usize>,
}

fn default_id() -> String {
    "experiment".into()
}
fn default_heldout() -> f64 {
    0.1
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_samples() -> usize {
    64
}
fn default_seq() -> usize {
    64
}
fn default_batch() -> usize {
    8
}
fn default_pretrain_steps() -> usize {
    300
}
fn default_pretrain_lr() -> f64 {
    3e-3
}
fn default_finetune_steps() -> usize {
    500
}
fn default_finetune_lr() -> f64 {
    1e-3
}

/// Which command is about to run; decides which sections are required.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Pretrain,
    Quantize,
    Compensate,
    Finetune,
    Eval,
    Analyze,
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub steps: Option<usize>,
}

impl ExperimentSpec {
    /// Reads, resolves and validates a spec for `command`.
    pub fn load(path: &Path, overrides: &Overrides, command: Command) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Spec(format!("cannot read spec {}: {e}", path.display())))?;
        let mut spec: ExperimentSpec =
            serde_json::from_str(&text).map_err(|e| CliError::Spec(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        spec.resolve(base);
        spec.apply(overrides, command);
        spec.validate(command)?;
        Ok(spec)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.corpus);
        fix(&mut self.output_dir);
        if let Some(p) = self.checkpoint.as_mut() {
            fix(p);
        }
        if let Some(p) = self.student.as_mut() {
            fix(p);
        }
        if let Some(f) = self.finetune.as_mut() {
            fix(&mut f.task_corpus);
        }
    }

    fn apply(&mut self, o: &Overrides, command: Command) {
        if let Some(seed) = o.seed {
            self.seeds = vec![seed];
            if let Some(m) = self.model.as_mut() {
                m.seed = seed;
            }
        }
        if let Some(out) = &o.out {
            self.output_dir = out.clone();
        }
        if let Some(steps) = o.steps {
            match command {
                Command::Pretrain => self.pretrain.steps = steps,
                Command::Finetune => {
                    if let Some(f) = self.finetune.as_mut() {
                        f.steps = steps;
                    }
                }
                _ => {
                    if let Some(l) = self.lqec.as_mut() {
                        l.max_steps = Some(steps);
                    }
                }
            }
        }
    }

    fn validate(&self, command: Command) -> Result<(), CliError> {
        let mut problems = Vec::new();
        let mut check = |r: lqec::Result<()>| {
            if let Err(e) = r {
                problems.push(e.to_string());
            }
        };
        if !self.corpus.is_file() {
            check(Err(lqec::Error::Config(format!("corpus {} does not exist", self.corpus.display()))));
        }
        if !(self.heldout_fraction > 0.0 && self.heldout_fraction < 1.0) {
            check(Err(lqec::Error::Config(format!(
                "heldout_fraction {} must lie in (0, 1)",
                self.heldout_fraction
            ))));
        }
        if self.seeds.is_empty() {
            check(Err(lqec::Error::Config("seeds must not be empty".into())));
        }
        if self.eval_seq_len < 2 {
            check(Err(lqec::Error::Config("eval_seq_len must be at least 2".into())));
        }
        if let Some(q) = &self.quant {
            check(q.validate());
        }
        if let Some(l) = &self.lqec {
            check(l.to_config(self.seed()).validate());
        }
        let exists = |p: &Path, what: &str| -> lqec::Result<()> {
            if p.is_file() {
                Ok(())
            } else {
                Err(lqec::Error::Config(format!("{what} {} does not exist", p.display())))
            }
        };
        match command {
            Command::Pretrain => match &self.model {
                Some(m) => check(m.validate()),
                None => check(Err(lqec::Error::Config("pretrain needs a \"model\" section".into()))),
            },
            Command::Quantize => {
                check(self.require(self.quant.is_some(), "quant"));
                check(exists(&self.teacher_path(), "teacher checkpoint"));
            }
            Command::Compensate => {
                check(self.require(self.quant.is_some(), "quant"));
                check(self.require(self.lqec.is_some(), "lqec"));
                check(exists(&self.teacher_path(), "teacher checkpoint"));
            }
            Command::Finetune => {
                match &self.finetune {
                    Some(f) => check(exists(&f.task_corpus, "task corpus")),
                    None => check(self.require(false, "finetune")),
                }
                check(exists(&self.student_path(), "student checkpoint"));
            }
            Command::Eval => check(exists(&self.eval_path(), "checkpoint")),
            Command::Analyze => {
                if self.analysis.is_empty() {
                    check(Err(lqec::Error::Config("analyze needs a non-empty \"analysis\" list".into())));
                }
                for name in &self.analysis {
                    check(Metric::parse(name).map(|_| ()));
                }
                check(exists(&self.teacher_path(), "teacher checkpoint"));
                let metrics: Vec<Metric> = self.analysis.iter().filter_map(|n| Metric::parse(n).ok()).collect();
                let needs_student = metrics.iter().any(|m| {
                    matches!(m, Metric::RelErrorHead | Metric::RelErrorLayer | Metric::SvMeanMag | Metric::Ppl)
                });
                if needs_student {
                    check(exists(&self.student_path(), "student checkpoint"));
                }
                if metrics.iter().any(|m| matches!(m, Metric::WDiscrepancy | Metric::PplSigma)) {
                    check(self.require(self.quant.is_some(), "quant"));
                }
                if metrics.contains(&Metric::PplSigma) {
                    check(self.require(self.sweep.is_some(), "sweep"));
                    check(self.require(self.lqec.is_some(), "lqec"));
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CliError::Spec(problems.join("\n  ")))
        }
    }

    fn require(&self, present: bool, section: &str) -> lqec::Result<()> {
        if present {
            Ok(())
        } else {
            Err(lqec::Error::Config(format!("this command needs a \"{section}\" section")))
        }
    }

    /// The first listed seed drives single-run commands.
    pub fn seed(&self) -> u64 {
        self.seeds.first().copied().unwrap_or(0)
    }

    pub fn teacher_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.output_dir.join("teacher.ckpt"))
    }

    pub fn student_path(&self) -> PathBuf {
        self.student.clone().unwrap_or_else(|| self.output_dir.join("compensated.ckpt"))
    }

    /// `eval` scores the student when one is named, otherwise the teacher.
    pub fn eval_path(&self) -> PathBuf {
        self.student.clone().unwrap_or_else(|| self.teacher_path())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.pretrain.steps,
            lr: self.pretrain.lr,
            batch_size: self.pretrain.batch_size,
            seq_len: self.pretrain.seq_len,
            seed: self.seed(),
        }
    }

    pub fn lqec_config(&self) -> Option<LqecConfig> {
        self.lqec.as_ref().map(|l| l.to_config(self.seed()))
    }

    pub fn finetune_config(&self) -> Option<FinetuneConfig> {
        self.finetune.as_ref().map(|f| {
            let mut c = FinetuneConfig::new(f.steps, f.lr, self.seed());
            c.batch_size = f.batch_size;
            c.seq_len = f.seq_len;
            c.eval_at = if f.eval_at.is_empty() { vec![0, f.steps] } else { f.eval_at.clone() };
            c
        })
    }
}

impl LqecSection {
    pub fn to_config(&self, seed: u64) -> LqecConfig {
        let mut c = LqecConfig::new(self.scope, self.rank, seed);
        if let Some(v) = self.max_steps {
            c.max_steps = v;
        }
        if let Some(v) = self.lr {
            c.lr = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = self.loss_weights {
            c.loss_weights = v;
        }
        if let Some(v) = self.early_stop_patience {
            c.early_stop_patience = v;
        }
        if let Some(v) = self.svd_iters {
            c.svd_iters = v;
        }
        if let Some(v) = self.model_loss_target {
            c.model_loss_target = v;
        }
        if let Some(v) = self.smoothing_window {
            c.smoothing_window = v;
        }
        c
    }
}
