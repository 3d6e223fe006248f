use std::collections::VecDeque;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::losses::{capture_teacher, scope_loss_graph, LossParts};
use super::{LqecConfig, Scope};
use crate::data::{CalibrationSet, Corpus};
use crate::error::{Error, Result};
use crate::model::{next_token_loss, Batch, BoundModel, DecoderModel, LoraAdapter, Trainable};
use crate::optim::{Adam, AdamConfig};
use crate::rng::SplitMix64;
use crate::tensor::Graph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvergenceReason {
    MaxSteps,
    EarlyStop,
}

/// Task fine-tuning of adapters on next-token cross-entropy alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub seed: u64,
    /// Steps after which the mean held-out loss is recorded (0 = before training).
    #[serde(default)]
    pub eval_at: Vec<usize>,
    /// Held-out windows scored at each evaluation point.
    #[serde(default = "default_eval_windows")]
    pub eval_windows: usize,
}

fn default_eval_windows() -> usize {
    32
}

impl FinetuneConfig {
    pub fn new(steps: usize, lr: f64, seed: u64) -> Self {
        Self {
            steps,
            lr,
            batch_size: 8,
            seq_len: 64,
            seed,
            eval_at: Vec::new(),
            eval_windows: default_eval_windows(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RunConfig {
    Compensate(LqecConfig),
    Finetune(FinetuneConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompensationRun {
    pub config: RunConfig,
    pub steps_run: usize,
    pub convergence_reason: ConvergenceReason,
    /// Loss of every step, evaluated before that step's update.
    pub loss_trace: Vec<f64>,
    /// Step whose smoothed loss was lowest.
    pub best_step: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub eval_trace: Vec<EvalPoint>,
    pub wall_seconds: f64,
    /// Adapters installed in the student when the run ended, in module order.
    #[serde(skip)]
    pub adapters: Vec<Option<LoraAdapter>>,
}

impl CompensationRun {
    pub fn final_loss(&self) -> Option<f64> {
        self.loss_trace.last().copied()
    }

    /// JSON record with the loss trace kept every `every` steps (plus the
    /// last step). Wall time is left out when `timing` is false so reruns
    /// produce identical bytes.
    pub fn to_json(&self, every: usize, timing: bool) -> Result<String> {
        let every = every.max(1);
        let n = self.loss_trace.len();
        let trace: Vec<Value> = (0..n)
            .filter(|&i| i % every == 0 || i + 1 == n)
            .map(|i| serde_json::json!({"step": i, "loss": self.loss_trace[i]}))
            .collect();
        let mut v = serde_json::to_value(self)?;
        let obj = v.as_object_mut().expect("struct serializes to an object");
        obj.insert("loss_trace".into(), Value::Array(trace));
        obj.insert("trace_every".into(), every.into());
        if !timing {
            obj.remove("wall_seconds");
        }
        Ok(serde_json::to_string_pretty(&v)?)
    }
}

struct LoopSettings {
    max_steps: usize,
    lr: f64,
    patience: Option<usize>,
    window: usize,
}

struct LoopOutcome {
    steps_run: usize,
    reason: ConvergenceReason,
    loss_trace: Vec<f64>,
    best_step: usize,
}

/// Adam over the student's adapters. `step_loss` builds the loss for step
/// `t`; `after_step` runs after each update with the number of updates done.
fn optimize<F, H>(student: &mut DecoderModel, s: &LoopSettings, mut step_loss: F, mut after_step: H) -> Result<LoopOutcome>
where
    F: FnMut(&mut Graph, &DecoderModel, &BoundModel, usize) -> Result<LossParts>,
    H: FnMut(&DecoderModel, usize) -> Result<()>,
{
    let mut adam = Adam::new(AdamConfig::new(s.lr));
    let mut window: VecDeque<f64> = VecDeque::with_capacity(s.window);
    let mut window_sum = 0.0;
    let mut best = f64::INFINITY;
    let mut best_step = 0;
    let mut snapshot = student.adapters();
    let mut trace = Vec::with_capacity(s.max_steps);
    let mut reason = ConvergenceReason::MaxSteps;

    for step in 0..s.max_steps {
        let mut g = Graph::new();
        let bound = student.bind(&mut g, Trainable::Adapters);
        let parts = step_loss(&mut g, student, &bound, step)?;
        let loss = g.scalar(parts.total);
        if !loss.is_finite() {
            return Err(Error::domain("compensate", format!("loss became {loss} at step {step}")));
        }
        trace.push(loss);

        if window.len() == s.window {
            window_sum -= window.pop_front().expect("non-empty window");
        }
        window.push_back(loss);
        window_sum += loss;
        let smoothed = window_sum / window.len() as f64;
        if smoothed < best {
            best = smoothed;
            best_step = step;
            if s.patience.is_some() {
                snapshot = student.adapters();
            }
        } else if s.patience.is_some_and(|p| step - best_step >= p) {
            reason = ConvergenceReason::EarlyStop;
            break;
        }

        g.backward(parts.total)?;
        let grads: Vec<Option<&[f64]>> = bound.trainable.iter().map(|&v| g.grad_data(v)).collect();
        adam.step(&mut student.trainable_params_mut(Trainable::Adapters), &grads)?;
        after_step(student, step + 1)?;
    }
    if reason == ConvergenceReason::EarlyStop {
        student.set_adapters(snapshot)?;
    }
    Ok(LoopOutcome {
        steps_run: trace.len(),
        reason,
        loss_trace: trace,
        best_step,
    })
}

fn require_adapters(student: &DecoderModel) -> Result<()> {
    if !student.has_adapters() {
        return Err(Error::Contract("student has no adapters attached".into()));
    }
    Ok(())
}

/// Seeded epoch-wise shuffled batches over a fixed set of sequences.
struct BatchStream<'a> {
    seqs: &'a [Vec<u8>],
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    rng: SplitMix64,
}

impl<'a> BatchStream<'a> {
    fn new(seqs: &'a [Vec<u8>], batch_size: usize, seed: u64) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Input("calibration set is empty".into()));
        }
        if batch_size > seqs.len() {
            return Err(Error::Config(format!(
                "batch size {batch_size} exceeds the {} calibration sequences",
                seqs.len()
            )));
        }
        let order: Vec<usize> = (0..seqs.len()).collect();
        Ok(Self {
            seqs,
            pos: order.len(),
            order,
            batch_size,
            rng: SplitMix64::derive(seed, "compensate-batches"),
        })
    }

    fn next(&mut self) -> Result<Batch> {
        let mut picked = Vec::with_capacity(self.batch_size);
        while picked.len() < self.batch_size {
            if self.pos == self.order.len() {
                self.rng.shuffle(&mut self.order);
                self.pos = 0;
            }
            picked.push(&self.seqs[self.order[self.pos]]);
            self.pos += 1;
        }
        Batch::from_windows(&picked)
    }
}

/// Tunes the student's adapters against the teacher on calibration data.
/// Base weights stay frozen; on early stop the best smoothed-loss adapters
/// are restored, otherwise the final ones are kept.
pub fn compensate(
    teacher: &DecoderModel,
    student: &mut DecoderModel,
    calib: &CalibrationSet,
    cfg: &LqecConfig,
) -> Result<CompensationRun> {
    let start = Instant::now();
    cfg.validate()?;
    if cfg.scope == Scope::WeightSvd {
        return Err(Error::Contract(
            "scope weight_svd is initialized by loftq_init, not by gradient compensation".into(),
        ));
    }
    require_adapters(student)?;
    let mut batches = BatchStream::new(&calib.sequences, cfg.batch_size, cfg.seed)?;
    let settings = LoopSettings {
        max_steps: cfg.max_steps,
        lr: cfg.lr,
        patience: Some(cfg.early_stop_patience),
        window: cfg.smoothing_window,
    };
    let out = optimize(
        student,
        &settings,
        |g, student, bound, _| {
            let batch = batches.next()?;
            let cap = capture_teacher(teacher, &batch)?;
            scope_loss_graph(g, teacher, &cap, student, bound, &batch, cfg)
        },
        |_, _| Ok(()),
    )?;
    Ok(CompensationRun {
        config: RunConfig::Compensate(cfg.clone()),
        steps_run: out.steps_run,
        convergence_reason: out.reason,
        loss_trace: out.loss_trace,
        best_step: out.best_step,
        eval_trace: Vec::new(),
        wall_seconds: start.elapsed().as_secs_f64(),
        adapters: student.adapters(),
    })
}

/// Mean next-token loss over up to `max_windows` non-overlapping held-out windows.
pub(crate) fn heldout_loss(model: &DecoderModel, bytes: &[u8], seq_len: usize, max_windows: usize) -> Result<f64> {
    let windows: Vec<&[u8]> = bytes.chunks_exact(seq_len).take(max_windows.max(1)).collect();
    if windows.is_empty() {
        return Err(Error::Input(format!(
            "held-out split of {} bytes is shorter than one window of {seq_len}",
            bytes.len()
        )));
    }
    let mut total = 0.0;
    for chunk in windows.chunks(16) {
        let batch = Batch::from_windows(chunk)?;
        total += super::gt_loss(model, &batch)? * chunk.len() as f64;
    }
    Ok(total / windows.len() as f64)
}

/// Trains the adapters on next-token cross-entropy over random windows of
/// the task corpus' training split, recording held-out loss at `eval_at`.
pub fn finetune_task(student: &mut DecoderModel, task: &Corpus, cfg: &FinetuneConfig) -> Result<CompensationRun> {
    let start = Instant::now();
    require_adapters(student)?;
    if cfg.batch_size == 0 || cfg.seq_len < 2 || !(cfg.lr.is_finite() && cfg.lr >= 0.0) {
        return Err(Error::Config(format!(
            "finetune needs batch ≥ 1, seq_len ≥ 2 and a finite lr ≥ 0 (got {}, {}, {})",
            cfg.batch_size, cfg.seq_len, cfg.lr
        )));
    }
    let train = task.train();
    if train.len() < cfg.seq_len {
        return Err(Error::Input(format!(
            "task training split of {} bytes is shorter than {}",
            train.len(),
            cfg.seq_len
        )));
    }
    let span = (train.len() - cfg.seq_len + 1) as u64;
    let mut rng = SplitMix64::derive(cfg.seed, "finetune-batches");
    let mut eval_trace = Vec::new();
    let mut evaluate = |model: &DecoderModel, step: usize| -> Result<()> {
        if cfg.eval_at.contains(&step) {
            let loss = heldout_loss(model, task.heldout(), cfg.seq_len, cfg.eval_windows)?;
            eval_trace.push(EvalPoint { step, loss });
        }
        Ok(())
    };
    evaluate(student, 0)?;
    let settings = LoopSettings {
        max_steps: cfg.steps,
        lr: cfg.lr,
        patience: None,
        window: 1,
    };
    let out = optimize(
        student,
        &settings,
        |g, student, bound, _| {
            let windows: Vec<&[u8]> = (0..cfg.batch_size)
                .map(|_| {
                    let o = rng.below(span) as usize;
                    &train[o..o + cfg.seq_len]
                })
                .collect();
            let batch = Batch::from_windows(&windows)?;
            let tr = student.forward_graph(g, bound, &batch)?;
            let gt = next_token_loss(g, tr.logits, &batch)?;
            Ok(LossParts { total: gt, activation: None, gt: Some(gt) })
        },
        &mut evaluate,
    )?;
    Ok(CompensationRun {
        config: RunConfig::Finetune(cfg.clone()),
        steps_run: out.steps_run,
        convergence_reason: out.reason,
        loss_trace: out.loss_trace,
        best_step: out.best_step,
        eval_trace,
        wall_seconds: start.elapsed().as_secs_f64(),
        adapters: student.adapters(),
    })
}

/// Builds a compensated student for one scope: LoftQ alternation for
/// `weight_svd`; otherwise quantize, attach PEFT-style adapters (`L1`
/// Gaussian, `L2` zero) and run [`compensate`].
pub fn build_compensated(
    teacher: &DecoderModel,
    quant: &crate::quant::QuantConfig,
    calib: &CalibrationSet,
    cfg: &LqecConfig,
) -> Result<(DecoderModel, Option<CompensationRun>)> {
    cfg.validate()?;
    if cfg.scope == Scope::WeightSvd {
        let (student, _) = super::loftq_model(teacher, quant, cfg.rank, cfg.svd_iters)?;
        return Ok((student, None));
    }
    let mut student = teacher.quantized(quant)?;
    student.attach_lora(cfg.rank, crate::model::LoraInit::GaussianZero, None, cfg.seed)?;
    let run = compensate(teacher, &mut student, calib, cfg)?;
    Ok((student, Some(run)))
}
