//! Group-wise weight quantizers.
//!
//! A weight `W` is stored `d_in × d_out` (a linear module computes `X·W`).
//! Groups are runs of `group_size` consecutive input rows within one output
//! column, so `W[g·G .. (g+1)·G, j]` shares one scale and zero-point.
//!
//! Uniform methods reconstruct `s·(q − z)` with
//! `s = (γ·max − β·min) / (2^b − 1)`, `z = round(−β·min / s)` and
//! `q = clamp(round(w / s) + z, 0, 2^b − 1)`; rounding is half-to-even.
//! The NormalFloat method reconstructs `s·levels[q]` with `s = max|W_g|`.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantMethod {
    /// Round-to-nearest over the full group range.
    Rtn,
    /// Round-to-nearest with per-group clipping picked from a grid.
    Clip,
    /// NormalFloat codebook scaled by the group's absolute maximum.
    Nf,
}

impl QuantMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            QuantMethod::Rtn => "rtn",
            QuantMethod::Clip => "clip",
            QuantMethod::Nf => "nf",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rtn" => Ok(QuantMethod::Rtn),
            "clip" => Ok(QuantMethod::Clip),
            "nf" => Ok(QuantMethod::Nf),
            other => Err(Error::Config(format!(
                "unknown quantization method {other:?} (expected rtn, clip or nf)"
            ))),
        }
    }
}

pub const DEFAULT_GROUP_SIZE: usize = 64;
const CLIP_FRACTIONS: [f64; 6] = [1.0, 0.95, 0.9, 0.85, 0.8, 0.7];

/// Probability of the outermost NormalFloat quantile (QLoRA / LoftQ constant).
pub const NF_OFFSET: f64 = 0.967_708_3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub bits: u8,
    #[serde(default = "default_group_size")]
    pub group_size: usize,
    pub method: QuantMethod,
    /// Candidate `(γ, β)` pairs for [`QuantMethod::Clip`].
    #[serde(default = "default_clip_grid")]
    pub clip_grid: Vec<(f64, f64)>,
}

fn default_group_size() -> usize {
    DEFAULT_GROUP_SIZE
}

/// All pairs of `{1.0, 0.95, 0.9, 0.85, 0.8, 0.7}`, starting with `(1, 1)`.
pub fn default_clip_grid() -> Vec<(f64, f64)> {
    let mut grid = Vec::with_capacity(CLIP_FRACTIONS.len().pow(2));
    for &g in &CLIP_FRACTIONS {
        for &b in &CLIP_FRACTIONS {
            grid.push((g, b));
        }
    }
    grid
}

impl QuantConfig {
    pub fn new(bits: u8, group_size: usize, method: QuantMethod) -> Result<Self> {
        let cfg = Self {
            bits,
            group_size,
            method,
            clip_grid: default_clip_grid(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn rtn(bits: u8) -> Result<Self> {
        Self::new(bits, DEFAULT_GROUP_SIZE, QuantMethod::Rtn)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=4).contains(&self.bits) {
            return Err(Error::Config(format!("bits must be 2, 3 or 4, got {}", self.bits)));
        }
        if self.group_size == 0 {
            return Err(Error::Config("group_size must be positive".into()));
        }
        if let Some(&(g, b)) = self
            .clip_grid
            .iter()
            .find(|&&(g, b)| !(g > 0.0 && g <= 1.0 && b > 0.0 && b <= 1.0))
        {
            return Err(Error::Config(format!("clip pair ({g}, {b}) outside (0, 1]")));
        }
        Ok(())
    }

    pub fn max_code(&self) -> u8 {
        ((1u16 << self.bits) - 1) as u8
    }
}

/// Integer codes plus per-group affine (or codebook) parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedTensor {
    pub codes: Vec<u8>,
    pub scales: Vec<f64>,
    pub zeros: Vec<i64>,
    /// NormalFloat codebook, ascending; `None` for uniform methods.
    pub levels: Option<Vec<f64>>,
    pub shape: Vec<usize>,
    pub bits: u8,
    pub group_size: usize,
    pub method: QuantMethod,
}

impl QuantizedTensor {
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn n_groups(&self) -> usize {
        self.rows() / self.group_size * self.cols()
    }

    /// Group index of element `(i, j)`.
    pub fn group_of(&self, i: usize, j: usize) -> usize {
        (i / self.group_size) * self.cols() + j
    }

    /// Reconstructed value of code `q` in group `g`.
    pub fn level(&self, g: usize, q: u8) -> f64 {
        match &self.levels {
            Some(levels) => self.scales[g] * levels[q as usize],
            None => self.scales[g] * (i64::from(q) - self.zeros[g]) as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Integrity(m));
        if self.shape.len() != 2 {
            return bad(format!("quantized tensor must be 2-D, got {:?}", self.shape));
        }
        if !(2..=4).contains(&self.bits) || self.group_size == 0 {
            return bad(format!("bits {} / group size {}", self.bits, self.group_size));
        }
        if self.rows() % self.group_size != 0 {
            return bad(format!("group size {} does not divide {} rows", self.group_size, self.rows()));
        }
        if self.codes.len() != self.rows() * self.cols() {
            return bad(format!("{} codes for shape {:?}", self.codes.len(), self.shape));
        }
        let n = self.n_groups();
        if self.scales.len() != n || self.zeros.len() != n {
            return bad(format!(
                "{} scales / {} zeros for {n} groups",
                self.scales.len(),
                self.zeros.len()
            ));
        }
        let max = (1u16 << self.bits) - 1;
        if let Some(c) = self.codes.iter().find(|&&c| u16::from(c) > max) {
            return bad(format!("code {c} exceeds {max}"));
        }
        match (&self.levels, self.method) {
            (Some(l), QuantMethod::Nf) if l.len() == 1 << self.bits => Ok(()),
            (None, QuantMethod::Rtn | QuantMethod::Clip) => Ok(()),
            _ => bad("codebook presence does not match method".into()),
        }
    }
}

fn check_shape(w: &Tensor, cfg: &QuantConfig) -> Result<(usize, usize)> {
    cfg.validate()?;
    let (rows, cols) = w.dims2("quantize")?;
    if rows % cfg.group_size != 0 {
        return Err(Error::dim(
            "quantize",
            format!("group size {} does not divide input dimension {rows}", cfg.group_size),
        ));
    }
    if !w.all_finite() {
        return Err(Error::domain("quantize", "non-finite weight"));
    }
    Ok((rows, cols))
}

/// Quantizes with the method named in `cfg`.
pub fn quantize(w: &Tensor, cfg: &QuantConfig) -> Result<QuantizedTensor> {
    match cfg.method {
        QuantMethod::Rtn | QuantMethod::Clip => quantize_uniform(w, cfg),
        QuantMethod::Nf => quantize_nf(w, cfg),
    }
}

/// Affine parameters and codes of one group for clipping `(γ, β)`.
struct UniformGroup {
    scale: f64,
    zero: i64,
    codes: Vec<u8>,
}

fn uniform_group(vals: &[f64], gamma: f64, beta: f64, max_code: u8) -> Option<UniformGroup> {
    let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
    if max == min {
        // Degenerate group: represent the constant exactly with a single code.
        let c = max;
        let (scale, zero, code) = if c > 0.0 {
            (c, 0, 1)
        } else if c < 0.0 {
            (-c, 1, 0)
        } else {
            (1.0, 0, 0)
        };
        return Some(UniformGroup {
            scale,
            zero,
            codes: vec![code; vals.len()],
        });
    }
    let hi = gamma * max;
    let lo = beta * min;
    if !(hi > lo) {
        return None;
    }
    let scale = (hi - lo) / f64::from(max_code);
    let zero = (-lo / scale).round_ties_even() as i64;
    let codes = vals
        .iter()
        .map(|&w| ((w / scale).round_ties_even() as i64 + zero).clamp(0, i64::from(max_code)) as u8)
        .collect();
    Some(UniformGroup { scale, zero, codes })
}

fn group_error(vals: &[f64], g: &UniformGroup) -> f64 {
    vals.iter()
        .zip(&g.codes)
        .map(|(&w, &q)| {
            let d = w - g.scale * (i64::from(q) - g.zero) as f64;
            d * d
        })
        .sum()
}

/// Round-to-nearest uniform quantization, optionally with searched clipping.
pub fn quantize_uniform(w: &Tensor, cfg: &QuantConfig) -> Result<QuantizedTensor> {
    if cfg.method == QuantMethod::Nf {
        return Err(Error::Contract("quantize_uniform called with method nf".into()));
    }
    let (rows, cols) = check_shape(w, cfg)?;
    let gs = cfg.group_size;
    let max_code = cfg.max_code();
    let n_groups = rows / gs * cols;
    let mut codes = vec![0u8; rows * cols];
    let mut scales = Vec::with_capacity(n_groups);
    let mut zeros = Vec::with_capacity(n_groups);
    let data = w.data();
    let mut vals = vec![0.0; gs];
    for gr in 0..rows / gs {
        for j in 0..cols {
            for (r, v) in vals.iter_mut().enumerate() {
                *v = data[(gr * gs + r) * cols + j];
            }
            let mut best = uniform_group(&vals, 1.0, 1.0, max_code).expect("rtn range is valid");
            if cfg.method == QuantMethod::Clip {
                let mut best_err = group_error(&vals, &best);
                for &(gamma, beta) in &cfg.clip_grid {
                    if let Some(cand) = uniform_group(&vals, gamma, beta, max_code) {
                        let e = group_error(&vals, &cand);
                        if e < best_err {
                            best_err = e;
                            best = cand;
                        }
                    }
                }
            }
            for (r, &q) in best.codes.iter().enumerate() {
                codes[(gr * gs + r) * cols + j] = q;
            }
            scales.push(best.scale);
            zeros.push(best.zero);
        }
    }
    Ok(QuantizedTensor {
        codes,
        scales,
        zeros,
        levels: None,
        shape: vec![rows, cols],
        bits: cfg.bits,
        group_size: gs,
        method: cfg.method,
    })
}

/// The `2^bits` NormalFloat levels in ascending order: `2^(bits−1)` negative
/// standard-normal quantiles and `2^(bits−1)` non-negative ones (including
/// zero) at evenly spaced probabilities, normalized so the extremes are ±1.
pub fn nf_levels(bits: u8) -> Vec<f64> {
    let normal = Normal::standard();
    let half = 1usize << (bits - 1);
    let linspace = |n: usize| -> Vec<f64> {
        (0..n)
            .map(|i| {
                if n == 1 {
                    NF_OFFSET
                } else {
                    NF_OFFSET + (0.5 - NF_OFFSET) * i as f64 / (n - 1) as f64
                }
            })
            .collect()
    };
    let top = normal.inverse_cdf(NF_OFFSET);
    let mut levels: Vec<f64> = Vec::with_capacity(2 * half);
    for p in linspace(half + 1).into_iter().take(half) {
        levels.push(-normal.inverse_cdf(p) / top);
    }
    for p in linspace(half).into_iter().take(half - 1) {
        levels.push(normal.inverse_cdf(p) / top);
    }
    levels.push(0.0);
    levels.sort_by(f64::total_cmp);
    levels
}

fn nearest_level(levels: &[f64], x: f64) -> u8 {
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for (i, &l) in levels.iter().enumerate() {
        let d = (x - l).abs();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best as u8
}

/// NormalFloat codebook quantization with absmax group scaling.
pub fn quantize_nf(w: &Tensor, cfg: &QuantConfig) -> Result<QuantizedTensor> {
    if cfg.method != QuantMethod::Nf {
        return Err(Error::Contract("quantize_nf called with a uniform method".into()));
    }
    let (rows, cols) = check_shape(w, cfg)?;
    let gs = cfg.group_size;
    let levels = nf_levels(cfg.bits);
    let zero_code = nearest_level(&levels, 0.0);
    let data = w.data();
    let mut codes = vec![0u8; rows * cols];
    let mut scales = Vec::with_capacity(rows / gs * cols);
    for gr in 0..rows / gs {
        for j in 0..cols {
            let idx = |r: usize| (gr * gs + r) * cols + j;
            let s = (0..gs).map(|r| data[idx(r)].abs()).fold(0.0, f64::max);
            for r in 0..gs {
                codes[idx(r)] = if s == 0.0 {
                    zero_code
                } else {
                    nearest_level(&levels, data[idx(r)] / s)
                };
            }
            scales.push(s);
        }
    }
    Ok(QuantizedTensor {
        codes,
        zeros: vec![0; scales.len()],
        scales,
        levels: Some(levels),
        shape: vec![rows, cols],
        bits: cfg.bits,
        group_size: gs,
        method: QuantMethod::Nf,
    })
}

pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    let (rows, cols) = (q.rows(), q.cols());
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[i * cols + j] = q.level(q.group_of(i, j), q.codes[i * cols + j]);
        }
    }
    Tensor::new(vec![rows, cols], out).expect("shape was validated at construction")
}

/// `‖W − dequant(quantize(W))‖_F`.
pub fn discrepancy(w: &Tensor, cfg: &QuantConfig) -> Result<f64> {
    let q = quantize(w, cfg)?;
    Ok(w.sub(&dequantize(&q))?.frobenius())
}
