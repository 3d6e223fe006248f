use super::{LqecConfig, ModelLossTarget, Scope};
use crate::error::{Error, Result};
use crate::model::{linear_graph, next_token_loss, Batch, BoundModel, DecoderModel, LinearModule, ModuleKind, Trainable};
use crate::tensor::{Graph, Tensor, Var};

/// Teacher activations on one batch.
#[derive(Debug, Clone)]
pub struct TeacherCapture {
    /// `Y_0..Y_{N−1}`: the input of each layer.
    pub layer_inputs: Vec<Tensor>,
    /// Per layer, the inputs of qkv, out, ffn1 and ffn2.
    pub module_inputs: Vec<[Tensor; 4]>,
    /// `Y_N`.
    pub last_hidden: Tensor,
    pub logits: Tensor,
}

impl TeacherCapture {
    /// `Y_n` for `n = 1..=N`.
    pub fn layer_output(&self, n: usize) -> &Tensor {
        self.layer_inputs.get(n + 1).unwrap_or(&self.last_hidden)
    }
}

pub fn capture_teacher(teacher: &DecoderModel, batch: &Batch) -> Result<TeacherCapture> {
    let mut g = Graph::new();
    let b = teacher.bind(&mut g, Trainable::Nothing);
    let tr = teacher.forward_graph(&mut g, &b, batch)?;
    let value = |v: Var| g.value(v).clone();
    Ok(TeacherCapture {
        layer_inputs: tr.layers.iter().map(|l| value(l.input)).collect(),
        module_inputs: tr
            .layers
            .iter()
            .map(|l| ModuleKind::ALL.map(|k| value(l.module_input(k))))
            .collect(),
        last_hidden: value(tr.last_hidden()),
        logits: value(tr.logits),
    })
}

fn check_pair(teacher: &DecoderModel, student: &DecoderModel) -> Result<()> {
    let (a, b) = (&teacher.config, &student.config);
    if (a.n_layers, a.d_model, a.n_heads, a.d_ffn, a.vocab_size) != (b.n_layers, b.d_model, b.n_heads, b.d_ffn, b.vocab_size) {
        return Err(Error::dim("lqec", "teacher and student architectures differ"));
    }
    Ok(())
}

/// `‖target − pred‖²_F / rows(pred)`
fn mean_sq_diff(g: &mut Graph, target: Var, pred: Var) -> Result<Var> {
    let rows = g.value(pred).shape().first().copied().unwrap_or(1).max(1);
    let d = g.sub(target, pred)?;
    let sq = g.frobenius_sq(d);
    Ok(g.scale(sq, 1.0 / rows as f64))
}

/// Component losses of one step and their weighted total.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    /// The activation loss of the scope (`None` for pure fine-tuning).
    pub activation: Option<Var>,
    pub gt: Option<Var>,
}

/// Builds the scope's loss on `g` for a student already bound as `bound`.
/// `teacher_model` supplies full-precision weights for the linear scope.
pub fn scope_loss_graph(
    g: &mut Graph,
    teacher_model: &DecoderModel,
    teacher: &TeacherCapture,
    student: &DecoderModel,
    bound: &BoundModel,
    batch: &Batch,
    cfg: &LqecConfig,
) -> Result<LossParts> {
    check_pair(teacher_model, student)?;
    let seq_len = batch.seq_len();
    match cfg.scope {
        Scope::WeightSvd => Err(Error::Contract(
            "weight_svd has no activation loss; use loftq_init".into(),
        )),
        Scope::Linear => {
            let mut total: Option<Var> = None;
            for (n, bl) in bound.layers.iter().enumerate() {
                for (k, kind) in ModuleKind::ALL.into_iter().enumerate() {
                    let x = g.constant(teacher.module_inputs[n][k].clone());
                    let w_fp = g.constant(teacher_model.module(n, kind).weight.effective().clone());
                    let target = g.matmul(x, w_fp)?;
                    let pred = linear_graph(g, bl.module(kind), x)?;
                    let l = mean_sq_diff(g, target, pred)?;
                    total = Some(match total {
                        Some(t) => g.add(t, l)?,
                        None => l,
                    });
                }
            }
            let total = total.ok_or_else(|| Error::Contract("model has no layers".into()))?;
            Ok(LossParts { total, activation: Some(total), gt: None })
        }
        Scope::Layer => {
            let mut total: Option<Var> = None;
            for n in 0..bound.layers.len() {
                let x = g.constant(teacher.layer_inputs[n].clone());
                let out = student.layer_graph(g, bound, n, x, seq_len)?.output;
                let target = g.constant(teacher.layer_output(n).clone());
                let l = mean_sq_diff(g, target, out)?;
                total = Some(match total {
                    Some(t) => g.add(t, l)?,
                    None => l,
                });
            }
            let total = total.ok_or_else(|| Error::Contract("model has no layers".into()))?;
            Ok(LossParts { total, activation: Some(total), gt: None })
        }
        Scope::Model | Scope::Rilq => {
            let tr = student.forward_graph(g, bound, batch)?;
            let (target, pred) = match cfg.model_loss_target {
                ModelLossTarget::FinalHidden => (teacher.last_hidden.clone(), tr.last_hidden()),
                ModelLossTarget::Logits => (teacher.logits.clone(), tr.logits),
            };
            let target = g.constant(target);
            let model = mean_sq_diff(g, target, pred)?;
            if cfg.scope == Scope::Model {
                return Ok(LossParts { total: model, activation: Some(model), gt: None });
            }
            let gt = next_token_loss(g, tr.logits, batch)?;
            let wm = g.scale(model, cfg.loss_weights.model);
            let wg = g.scale(gt, cfg.loss_weights.gt);
            let total = g.add(wm, wg)?;
            Ok(LossParts { total, activation: Some(model), gt: Some(gt) })
        }
    }
}

/// `‖X·W_fp − X·(W_eff + L1·L2ᵀ)‖²_F / rows(X)` for one module.
pub fn linear_loss(teacher: &LinearModule, student: &LinearModule, x: &Tensor) -> Result<f64> {
    if teacher.dims() != student.dims() {
        return Err(Error::dim(
            "linear_loss",
            format!("teacher {:?} vs student {:?}", teacher.dims(), student.dims()),
        ));
    }
    let (rows, d_in) = x.dims2("linear_loss")?;
    if d_in != teacher.dims().0 {
        return Err(Error::dim(
            "linear_loss",
            format!("input width {d_in} for a module expecting {}", teacher.dims().0),
        ));
    }
    let target = x.matmul(teacher.weight.effective())?;
    let pred = x.matmul(&student.merged_weight())?;
    Ok(target.sub(&pred)?.frobenius_sq() / rows.max(1) as f64)
}

/// `‖Y_n − Y_n^q‖²_F / tokens` with both layers fed the teacher's `Y_{n−1}`.
pub fn layer_loss(
    teacher: &DecoderModel,
    student: &DecoderModel,
    n: usize,
    y_prev: &Tensor,
    seq_len: usize,
) -> Result<f64> {
    check_pair(teacher, student)?;
    if n >= teacher.layers.len() {
        return Err(Error::Input(format!("layer {n} out of range (model has {})", teacher.layers.len())));
    }
    let run = |m: &DecoderModel| -> Result<Tensor> {
        let mut g = Graph::new();
        let b = m.bind(&mut g, Trainable::Nothing);
        let x = g.constant(y_prev.clone());
        let out = m.layer_graph(&mut g, &b, n, x, seq_len)?.output;
        Ok(g.value(out).clone())
    };
    let (yt, ys) = (run(teacher)?, run(student)?);
    Ok(yt.sub(&ys)?.frobenius_sq() / yt.shape()[0] as f64)
}

/// `‖Y_N − Y_N^q‖²_F / tokens` (or the logits' difference), both models run end to end.
pub fn model_loss(teacher: &DecoderModel, student: &DecoderModel, batch: &Batch, target: ModelLossTarget) -> Result<f64> {
    check_pair(teacher, student)?;
    let pick = |m: &DecoderModel| -> Result<Tensor> {
        let out = m.forward_batch(batch, true)?;
        Ok(match target {
            ModelLossTarget::Logits => out.logits,
            ModelLossTarget::FinalHidden => {
                let mut hidden = out.hidden.expect("requested hidden states");
                hidden.swap_remove(hidden.len() - 2)
            }
        })
    };
    let (yt, ys) = (pick(teacher)?, pick(student)?);
    Ok(yt.sub(&ys)?.frobenius_sq() / batch.n_tokens() as f64)
}

/// Mean next-token cross-entropy (nats) over positions 1..T−1 of each sequence.
pub fn gt_loss(student: &DecoderModel, batch: &Batch) -> Result<f64> {
    let mut g = Graph::new();
    let b = student.bind(&mut g, Trainable::Nothing);
    let tr = student.forward_graph(&mut g, &b, batch)?;
    let loss = next_token_loss(&mut g, tr.logits, batch)?;
    Ok(g.scalar(loss))
}
