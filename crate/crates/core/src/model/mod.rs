//! Byte-level GPT-style decoder with per-module LoRA adapters.
//!
//! Each layer is pre-norm: `h = x + Out(Attn(QKV(norm(x))))`,
//! `y = h + FFN2(gelu(FFN1(norm(h))))`. The four linear modules QKV (fused),
//! Out, FFN1 and FFN2 compute `X·(W + L1·L2ᵀ)` with `W` stored `d_in × d_out`.
//! Embeddings, norms and the LM head are never quantized or adapted.

mod checkpoint;
mod train;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use train::{train_base, TrainConfig, TrainingLog};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::quant::{self, QuantConfig, QuantizedTensor};
use crate::rng::SplitMix64;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Four layers, width 128, four heads, FFN 512, byte vocabulary, context 128.
    pub fn desk(seed: u64) -> Self {
        Self {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            d_ffn: 512,
            vocab_size: 256,
            max_seq_len: 128,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ffn", self.d_ffn),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config(format!("vocab_size must be ≥ 2, got {}", self.vocab_size)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModuleKind {
    Qkv,
    Out,
    Ffn1,
    Ffn2,
}

impl ModuleKind {
    pub const ALL: [ModuleKind; 4] = [ModuleKind::Qkv, ModuleKind::Out, ModuleKind::Ffn1, ModuleKind::Ffn2];

    pub fn as_str(self) -> &'static str {
        match self {
            ModuleKind::Qkv => "qkv",
            ModuleKind::Out => "out",
            ModuleKind::Ffn1 => "ffn1",
            ModuleKind::Ffn2 => "ffn2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown module {s:?}")))
    }

    /// `(d_in, d_out)` for a model config.
    pub fn dims(self, cfg: &ModelConfig) -> (usize, usize) {
        match self {
            ModuleKind::Qkv => (cfg.d_model, 3 * cfg.d_model),
            ModuleKind::Out => (cfg.d_model, cfg.d_model),
            ModuleKind::Ffn1 => (cfg.d_model, cfg.d_ffn),
            ModuleKind::Ffn2 => (cfg.d_ffn, cfg.d_model),
        }
    }
}

/// Low-rank update `L1·L2ᵀ` with `L1: d_in × r` and `L2: d_out × r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub l1: Tensor,
    pub l2: Tensor,
}

impl LoraAdapter {
    pub fn new(l1: Tensor, l2: Tensor) -> Result<Self> {
        let (_, r1) = l1.dims2("lora")?;
        let (_, r2) = l2.dims2("lora")?;
        if r1 != r2 || r1 == 0 {
            return Err(Error::dim(
                "lora",
                format!("L1 {:?} and L2 {:?} disagree on rank", l1.shape(), l2.shape()),
            ));
        }
        Ok(Self { l1, l2 })
    }

    pub fn rank(&self) -> usize {
        self.l1.shape()[1]
    }

    /// Dense `L1·L2ᵀ`.
    pub fn product(&self) -> Tensor {
        self.l1.matmul_t(&self.l2).expect("adapter factors share rank")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Weight {
    Full(Tensor),
    /// Quantized codes with their dequantized values cached for the forward pass.
    Quantized { q: QuantizedTensor, dequant: Tensor },
}

impl Weight {
    pub fn quantized(q: QuantizedTensor) -> Self {
        let dequant = quant::dequantize(&q);
        Weight::Quantized { q, dequant }
    }

    /// The matrix the forward pass multiplies by (before any adapter).
    pub fn effective(&self) -> &Tensor {
        match self {
            Weight::Full(w) => w,
            Weight::Quantized { dequant, .. } => dequant,
        }
    }

    pub fn as_quantized(&self) -> Option<&QuantizedTensor> {
        match self {
            Weight::Quantized { q, .. } => Some(q),
            Weight::Full(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModule {
    pub kind: ModuleKind,
    pub layer: usize,
    pub weight: Weight,
    pub adapter: Option<LoraAdapter>,
}

impl LinearModule {
    pub fn name(&self) -> String {
        format!("layers.{}.{}", self.layer, self.kind.as_str())
    }

    pub fn dims(&self) -> (usize, usize) {
        let s = self.weight.effective().shape();
        (s[0], s[1])
    }

    /// `W_eff + L1·L2ᵀ` as a dense matrix.
    pub fn merged_weight(&self) -> Tensor {
        let w = self.weight.effective();
        match &self.adapter {
            Some(a) => w.add(&a.product()).expect("adapter matches weight"),
            None => w.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub norm_attn: Tensor,
    pub qkv: LinearModule,
    pub out: LinearModule,
    pub norm_ffn: Tensor,
    pub ffn1: LinearModule,
    pub ffn2: LinearModule,
}

impl Layer {
    pub fn module(&self, kind: ModuleKind) -> &LinearModule {
        match kind {
            ModuleKind::Qkv => &self.qkv,
            ModuleKind::Out => &self.out,
            ModuleKind::Ffn1 => &self.ffn1,
            ModuleKind::Ffn2 => &self.ffn2,
        }
    }

    pub fn module_mut(&mut self, kind: ModuleKind) -> &mut LinearModule {
        match kind {
            ModuleKind::Qkv => &mut self.qkv,
            ModuleKind::Out => &mut self.out,
            ModuleKind::Ffn1 => &mut self.ffn1,
            ModuleKind::Ffn2 => &mut self.ffn2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderModel {
    pub config: ModelConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<Layer>,
    pub final_norm: Tensor,
    /// Untied, `d_model × vocab`.
    pub lm_head: Tensor,
}

/// How adapters are initialized by [`DecoderModel::attach_lora`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraInit {
    /// Both factors zero.
    ZeroPair,
    /// Rank-r truncated SVD of `W_fp − W_eff` (needs the full-precision reference).
    SvdResidual,
    /// `L1 ~ N(0, 1/d_in)`, `L2 = 0`.
    GaussianZero,
}

/// Which parameters become trainable graph leaves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    Adapters,
    /// Every full-precision parameter and adapter; quantized weights stay frozen.
    Everything,
}

/// A token batch of equal-length sequences, flattened row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    tokens: Vec<usize>,
    seq_len: usize,
}

impl Batch {
    pub fn new(tokens: Vec<usize>, seq_len: usize) -> Result<Self> {
        if seq_len == 0 || tokens.is_empty() || tokens.len() % seq_len != 0 {
            return Err(Error::Input(format!(
                "{} tokens do not form whole sequences of length {seq_len}",
                tokens.len()
            )));
        }
        Ok(Self { tokens, seq_len })
    }

    pub fn from_windows<W: AsRef<[u8]>>(windows: &[W]) -> Result<Self> {
        let seq_len = windows.first().map_or(0, |w| w.as_ref().len());
        if windows.iter().any(|w| w.as_ref().len() != seq_len) {
            return Err(Error::Input("windows differ in length".into()));
        }
        let tokens = windows
            .iter()
            .flat_map(|w| w.as_ref().iter().map(|&b| usize::from(b)))
            .collect();
        Self::new(tokens, seq_len)
    }

    pub fn single(tokens: &[usize]) -> Result<Self> {
        Self::new(tokens.to_vec(), tokens.len())
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn n_seqs(&self) -> usize {
        self.tokens.len() / self.seq_len
    }

    pub fn n_tokens(&self) -> usize {
        self.tokens.len()
    }

    /// Rows that have a next token (all but the last position of each
    /// sequence) and the tokens they predict.
    pub fn next_token_targets(&self) -> (Vec<usize>, Vec<usize>) {
        let mut rows = Vec::with_capacity(self.tokens.len());
        let mut targets = Vec::with_capacity(self.tokens.len());
        for s in 0..self.n_seqs() {
            for t in 0..self.seq_len - 1 {
                rows.push(s * self.seq_len + t);
                targets.push(self.tokens[s * self.seq_len + t + 1]);
            }
        }
        (rows, targets)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLinear {
    pub w: Var,
    pub l1: Option<Var>,
    pub l2: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct BoundLayer {
    pub norm_attn: Var,
    pub qkv: BoundLinear,
    pub out: BoundLinear,
    pub norm_ffn: Var,
    pub ffn1: BoundLinear,
    pub ffn2: BoundLinear,
}

impl BoundLayer {
    pub fn module(&self, kind: ModuleKind) -> &BoundLinear {
        match kind {
            ModuleKind::Qkv => &self.qkv,
            ModuleKind::Out => &self.out,
            ModuleKind::Ffn1 => &self.ffn1,
            ModuleKind::Ffn2 => &self.ffn2,
        }
    }
}

/// A model's parameters placed on a graph.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub layers: Vec<BoundLayer>,
    pub final_norm: Var,
    pub lm_head: Var,
    /// Trainable leaves in [`DecoderModel::trainable_params_mut`] order.
    pub trainable: Vec<Var>,
}

/// Graph handles of everything one layer computes.
#[derive(Debug, Clone, Copy)]
pub struct LayerTrace {
    pub input: Var,
    pub qkv_in: Var,
    pub out_in: Var,
    pub ffn1_in: Var,
    pub ffn2_in: Var,
    pub output: Var,
}

impl LayerTrace {
    pub fn module_input(&self, kind: ModuleKind) -> Var {
        match kind {
            ModuleKind::Qkv => self.qkv_in,
            ModuleKind::Out => self.out_in,
            ModuleKind::Ffn1 => self.ffn1_in,
            ModuleKind::Ffn2 => self.ffn2_in,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `Y_0`: token plus position embeddings.
    pub embed: Var,
    pub layers: Vec<LayerTrace>,
    pub final_norm: Var,
    pub logits: Var,
}

impl ForwardTrace {
    /// `Y_N`, the last decoder layer's output (before the final norm).
    pub fn last_hidden(&self) -> Var {
        self.layers.last().map_or(self.embed, |l| l.output)
    }
}

/// Plain-tensor result of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub logits: Tensor,
    /// `Y_1..Y_N` followed by the final-norm output, when requested.
    pub hidden: Option<Vec<Tensor>>,
}

fn bind_linear(g: &mut Graph, m: &LinearModule, mode: Trainable, trainable: &mut Vec<Var>) -> BoundLinear {
    let w_train = mode == Trainable::Everything && matches!(m.weight, Weight::Full(_));
    let w = g.leaf(m.weight.effective().clone(), w_train);
    if w_train {
        trainable.push(w);
    }
    let (l1, l2) = match &m.adapter {
        Some(a) => {
            let t = mode != Trainable::Nothing;
            let l1 = g.leaf(a.l1.clone(), t);
            let l2 = g.leaf(a.l2.clone(), t);
            if t {
                trainable.push(l1);
                trainable.push(l2);
            }
            (Some(l1), Some(l2))
        }
        None => (None, None),
    };
    BoundLinear { w, l1, l2 }
}

/// `X·W (+ (X·L1)·L2ᵀ)`
pub fn linear_graph(g: &mut Graph, lin: &BoundLinear, x: Var) -> Result<Var> {
    let y = g.matmul(x, lin.w)?;
    match (lin.l1, lin.l2) {
        (Some(l1), Some(l2)) => {
            let down = g.matmul(x, l1)?;
            let l2t = g.transpose(l2)?;
            let up = g.matmul(down, l2t)?;
            g.add(y, up)
        }
        _ => Ok(y),
    }
}

/// Mean next-token cross-entropy (nats) of `logits` over every position that
/// has a successor within its sequence.
pub fn next_token_loss(g: &mut Graph, logits: Var, batch: &Batch) -> Result<Var> {
    if batch.seq_len() < 2 {
        return Err(Error::Input(format!(
            "next-token loss needs sequences of length ≥ 2, got {}",
            batch.seq_len()
        )));
    }
    let (rows, targets) = batch.next_token_targets();
    let picked = g.embedding(logits, &rows)?;
    let ce = g.cross_entropy_rows(picked, &targets)?;
    g.mean(ce)
}

impl DecoderModel {
    /// Seeded Gaussian initialization with standard deviation `1/√d_model`;
    /// the LM head uses a fifth of that so initial logits are near uniform.
    pub fn build(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SplitMix64::derive(cfg.seed, "model-init");
        let std = 1.0 / (cfg.d_model as f64).sqrt();
        let d = cfg.d_model;
        let linear = |kind: ModuleKind, layer: usize, rng: &mut SplitMix64| {
            let (din, dout) = kind.dims(cfg);
            LinearModule {
                kind,
                layer,
                weight: Weight::Full(Tensor::randn(&[din, dout], std, rng)),
                adapter: None,
            }
        };
        let tok_emb = Tensor::randn(&[cfg.vocab_size, d], std, &mut rng);
        let pos_emb = Tensor::randn(&[cfg.max_seq_len, d], std, &mut rng);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for n in 0..cfg.n_layers {
            layers.push(Layer {
                norm_attn: Tensor::full(&[d], 1.0),
                qkv: linear(ModuleKind::Qkv, n, &mut rng),
                out: linear(ModuleKind::Out, n, &mut rng),
                norm_ffn: Tensor::full(&[d], 1.0),
                ffn1: linear(ModuleKind::Ffn1, n, &mut rng),
                ffn2: linear(ModuleKind::Ffn2, n, &mut rng),
            });
        }
        let lm_head = Tensor::randn(&[d, cfg.vocab_size], 0.2 * std, &mut rng);
        Ok(Self {
            config: cfg.clone(),
            tok_emb,
            pos_emb,
            layers,
            final_norm: Tensor::full(&[d], 1.0),
            lm_head,
        })
    }

    pub fn modules(&self) -> impl Iterator<Item = &LinearModule> {
        self.layers
            .iter()
            .flat_map(|l| [&l.qkv, &l.out, &l.ffn1, &l.ffn2])
    }

    pub fn modules_mut(&mut self) -> impl Iterator<Item = &mut LinearModule> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.qkv, &mut l.out, &mut l.ffn1, &mut l.ffn2])
    }

    pub fn module(&self, layer: usize, kind: ModuleKind) -> &LinearModule {
        self.layers[layer].module(kind)
    }

    pub fn has_adapters(&self) -> bool {
        self.modules().any(|m| m.adapter.is_some())
    }

    pub fn is_quantized(&self) -> bool {
        self.modules().any(|m| matches!(m.weight, Weight::Quantized { .. }))
    }

    /// Places every parameter on `g`; the leaves selected by `mode` are trainable.
    pub fn bind(&self, g: &mut Graph, mode: Trainable) -> BoundModel {
        let all = mode == Trainable::Everything;
        let mut trainable = Vec::new();
        let leaf = |g: &mut Graph, t: &Tensor, trainable: &mut Vec<Var>| {
            let v = g.leaf(t.clone(), all);
            if all {
                trainable.push(v);
            }
            v
        };
        let tok_emb = leaf(g, &self.tok_emb, &mut trainable);
        let pos_emb = leaf(g, &self.pos_emb, &mut trainable);
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let norm_attn = leaf(g, &l.norm_attn, &mut trainable);
            let qkv = bind_linear(g, &l.qkv, mode, &mut trainable);
            let out = bind_linear(g, &l.out, mode, &mut trainable);
            let norm_ffn = leaf(g, &l.norm_ffn, &mut trainable);
            let ffn1 = bind_linear(g, &l.ffn1, mode, &mut trainable);
            let ffn2 = bind_linear(g, &l.ffn2, mode, &mut trainable);
            layers.push(BoundLayer {
                norm_attn,
                qkv,
                out,
                norm_ffn,
                ffn1,
                ffn2,
            });
        }
        let final_norm = leaf(g, &self.final_norm, &mut trainable);
        let lm_head = leaf(g, &self.lm_head, &mut trainable);
        BoundModel {
            tok_emb,
            pos_emb,
            layers,
            final_norm,
            lm_head,
            trainable,
        }
    }

    /// Mutable views of the parameters [`DecoderModel::bind`] marks trainable, in the same order.
    pub fn trainable_params_mut(&mut self, mode: Trainable) -> Vec<&mut Tensor> {
        let all = mode == Trainable::Everything;
        let mut out: Vec<&mut Tensor> = Vec::new();
        fn linear<'a>(m: &'a mut LinearModule, mode: Trainable, out: &mut Vec<&'a mut Tensor>) {
            if let Weight::Full(w) = &mut m.weight {
                if mode == Trainable::Everything {
                    out.push(w);
                }
            }
            if let Some(a) = &mut m.adapter {
                if mode != Trainable::Nothing {
                    out.push(&mut a.l1);
                    out.push(&mut a.l2);
                }
            }
        }
        if all {
            out.push(&mut self.tok_emb);
            out.push(&mut self.pos_emb);
        }
        for l in &mut self.layers {
            if all {
                out.push(&mut l.norm_attn);
            }
            linear(&mut l.qkv, mode, &mut out);
            linear(&mut l.out, mode, &mut out);
            if all {
                out.push(&mut l.norm_ffn);
            }
            linear(&mut l.ffn1, mode, &mut out);
            linear(&mut l.ffn2, mode, &mut out);
        }
        if all {
            out.push(&mut self.final_norm);
            out.push(&mut self.lm_head);
        }
        out
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let cfg = &self.config;
        if batch.seq_len() > cfg.max_seq_len {
            return Err(Error::Input(format!(
                "sequence length {} exceeds max_seq_len {}",
                batch.seq_len(),
                cfg.max_seq_len
            )));
        }
        if let Some(&t) = batch.tokens().iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::Input(format!(
                "token {t} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        Ok(())
    }

    /// `Y_0 = tok_emb[x] + pos_emb[t]`.
    pub fn embed_graph(&self, g: &mut Graph, b: &BoundModel, batch: &Batch) -> Result<Var> {
        self.check_batch(batch)?;
        let positions: Vec<usize> = (0..batch.n_tokens()).map(|i| i % batch.seq_len()).collect();
        let tok = g.embedding(b.tok_emb, batch.tokens())?;
        let pos = g.embedding(b.pos_emb, &positions)?;
        g.add(tok, pos)
    }

    /// One decoder layer applied to `x` (rows grouped in sequences of `seq_len`).
    pub fn layer_graph(&self, g: &mut Graph, b: &BoundModel, n: usize, x: Var, seq_len: usize) -> Result<LayerTrace> {
        let bl = b
            .layers
            .get(n)
            .ok_or_else(|| Error::Input(format!("layer {n} out of range")))?;
        let qkv_in = g.rmsnorm(x, bl.norm_attn)?;
        let qkv = linear_graph(g, &bl.qkv, qkv_in)?;
        let out_in = g.causal_attention(qkv, self.config.n_heads, seq_len)?;
        let attn = linear_graph(g, &bl.out, out_in)?;
        let h = g.add(x, attn)?;
        let ffn1_in = g.rmsnorm(h, bl.norm_ffn)?;
        let f = linear_graph(g, &bl.ffn1, ffn1_in)?;
        let ffn2_in = g.gelu(f);
        let f2 = linear_graph(g, &bl.ffn2, ffn2_in)?;
        let output = g.add(h, f2)?;
        Ok(LayerTrace {
            input: x,
            qkv_in,
            out_in,
            ffn1_in,
            ffn2_in,
            output,
        })
    }

    /// Final norm and LM head on `Y_N`.
    pub fn head_graph(&self, g: &mut Graph, b: &BoundModel, y: Var) -> Result<(Var, Var)> {
        let normed = g.rmsnorm(y, b.final_norm)?;
        let logits = g.matmul(normed, b.lm_head)?;
        Ok((normed, logits))
    }

    pub fn forward_graph(&self, g: &mut Graph, b: &BoundModel, batch: &Batch) -> Result<ForwardTrace> {
        let embed = self.embed_graph(g, b, batch)?;
        let mut x = embed;
        let mut layers = Vec::with_capacity(self.layers.len());
        for n in 0..self.layers.len() {
            let tr = self.layer_graph(g, b, n, x, batch.seq_len())?;
            x = tr.output;
            layers.push(tr);
        }
        let (final_norm, logits) = self.head_graph(g, b, x)?;
        Ok(ForwardTrace {
            embed,
            layers,
            final_norm,
            logits,
        })
    }

    pub fn forward_batch(&self, batch: &Batch, capture_hidden: bool) -> Result<ModelOutput> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, Trainable::Nothing);
        let tr = self.forward_graph(&mut g, &b, batch)?;
        let hidden = capture_hidden.then(|| {
            tr.layers
                .iter()
                .map(|l| g.value(l.output).clone())
                .chain(std::iter::once(g.value(tr.final_norm).clone()))
                .collect()
        });
        Ok(ModelOutput {
            logits: g.value(tr.logits).clone(),
            hidden,
        })
    }

    /// Logits (`T × V`) and `[Y_1, …, Y_N, final_norm]` for one sequence.
    pub fn forward(&self, tokens: &[usize]) -> Result<(Tensor, Vec<Tensor>)> {
        let out = self.forward_batch(&Batch::single(tokens)?, true)?;
        Ok((out.logits, out.hidden.unwrap_or_default()))
    }

    /// A copy whose decoder-layer weights are quantized with `cfg`.
    pub fn quantized(&self, cfg: &QuantConfig) -> Result<Self> {
        let mut m = self.clone();
        for module in m.modules_mut() {
            let w = match &module.weight {
                Weight::Full(w) => w,
                Weight::Quantized { .. } => {
                    return Err(Error::Contract(format!("{} is already quantized", module.name())))
                }
            };
            module.weight = Weight::quantized(quant::quantize(w, cfg)?);
        }
        Ok(m)
    }

    /// Attaches a rank-`rank` adapter to every linear module of every layer.
    pub fn attach_lora(
        &mut self,
        rank: usize,
        init: LoraInit,
        reference: Option<&DecoderModel>,
        seed: u64,
    ) -> Result<()> {
        let max_rank = self.modules().map(|m| m.dims().0.min(m.dims().1)).min().unwrap_or(0);
        if rank == 0 || rank > max_rank {
            return Err(Error::Config(format!("adapter rank {rank} outside 1..={max_rank}")));
        }
        if init == LoraInit::SvdResidual {
            let r = reference.ok_or_else(|| {
                Error::Contract("svd_residual initialization needs the full-precision reference model".into())
            })?;
            if r.config.n_layers != self.config.n_layers {
                return Err(Error::dim("attach_lora", "reference has a different layer count"));
            }
        }
        let mut rng = SplitMix64::derive(seed, "lora-init");
        for n in 0..self.layers.len() {
            for kind in ModuleKind::ALL {
                let module = self.layers[n].module(kind);
                let (din, dout) = module.dims();
                let adapter = match init {
                    LoraInit::ZeroPair => LoraAdapter::new(Tensor::zeros(&[din, rank]), Tensor::zeros(&[dout, rank]))?,
                    LoraInit::GaussianZero => LoraAdapter::new(
                        Tensor::randn(&[din, rank], 1.0 / (din as f64).sqrt(), &mut rng),
                        Tensor::zeros(&[dout, rank]),
                    )?,
                    LoraInit::SvdResidual => {
                        let reference = reference.expect("checked above").module(n, kind);
                        let w_ref = reference.weight.effective();
                        if w_ref.shape() != module.weight.effective().shape() {
                            return Err(Error::dim(
                                "attach_lora",
                                format!("reference {} has shape {:?}", reference.name(), w_ref.shape()),
                            ));
                        }
                        let residual = w_ref.sub(module.weight.effective())?;
                        let (l1, l2) = linalg::truncated_factors(&residual, rank)?;
                        LoraAdapter::new(l1, l2)?
                    }
                };
                self.layers[n].module_mut(kind).adapter = Some(adapter);
            }
        }
        Ok(())
    }

    /// Folds every adapter into a full-precision weight `W_eff + L1·L2ᵀ`.
    pub fn merge_adapters(&self) -> Result<Self> {
        if !self.has_adapters() {
            return Err(Error::Contract("merge_adapters: model has no adapters".into()));
        }
        let mut m = self.clone();
        for module in m.modules_mut() {
            let merged = module.merged_weight();
            module.weight = Weight::Full(merged);
            module.adapter = None;
        }
        Ok(m)
    }

    pub fn remove_adapters(&mut self) {
        for m in self.modules_mut() {
            m.adapter = None;
        }
    }

    /// Adapters in module order (layer-major, then qkv/out/ffn1/ffn2).
    pub fn adapters(&self) -> Vec<Option<LoraAdapter>> {
        self.modules().map(|m| m.adapter.clone()).collect()
    }

    pub fn set_adapters(&mut self, adapters: Vec<Option<LoraAdapter>>) -> Result<()> {
        let n = self.modules().count();
        if adapters.len() != n {
            return Err(Error::dim("set_adapters", format!("{} adapters for {n} modules", adapters.len())));
        }
        for (m, a) in self.modules_mut().zip(adapters) {
            m.adapter = a;
        }
        Ok(())
    }

    /// Everything except the adapters, for frozen-base comparisons.
    pub fn without_adapters(&self) -> Self {
        let mut m = self.clone();
        m.remove_adapters();
        m
    }
}
