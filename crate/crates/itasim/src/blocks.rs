//! Integer encoder blocks: attention heads, multi-head attention, the
//! feed-forward pair, and the full encoder layer, wired together with
//! per-junction requantization. Every tensor carries its scale; junction
//! target scales are frozen into the weights ahead of time.

use crate::error::{Error, Result};
use crate::kernels::{i_gelu, i_layernorm_traced, i_softmax_i8, ExpConsts, GeluConsts, LnConsts};
use crate::mac::{matmul_tracked, Tile};
use crate::quant::{
    auto_precision, dyadic_apply_flagged, dyadic_fit, requantize_tracked, rescale_add_tracked,
    DyadicScale, QMat32, QMat8, SatCounters, Scale,
};
use crate::reference::{fit_erf_segment, fit_exp_segment, Poly2Fit, ScoreScaling};
use crate::sched::{layernorm_cycles, softmax_cycles};
use serde::{Deserialize, Serialize};

/// LayerNorm blocks emit values on this fixed scale; the following
/// requantization moves them onto the calibrated junction scale.
pub fn ln_out_scale() -> Scale {
    Scale::new(1.0 / 128.0).expect("constant scale")
}

/// How attention scores are shrunk before softmax. The datapath has no
/// divider, so the default is an arithmetic right shift approximating
/// division by sqrt(head_dim); the alternative multiplies by the dyadic
/// closest to 1/d_model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleMode {
    #[default]
    SqrtDhShift,
    ModelDim,
}

impl ScaleMode {
    /// Shift that best matches division by sqrt(d_h): round(log2(d_h) / 2).
    pub fn shift_amount(d_h: usize) -> u8 {
        (0.5 * (d_h as f64).log2()).round() as u8
    }

    /// The matching real-arithmetic scaling for the float oracle.
    pub fn float_scaling(self, d: usize, d_h: usize) -> ScoreScaling {
        match self {
            ScaleMode::SqrtDhShift => ScoreScaling::Shift(Self::shift_amount(d_h)),
            ScaleMode::ModelDim => ScoreScaling::Recip(1.0 / d as f64),
        }
    }
}

/// Model shape plus the knobs the cycle model exposes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub k_heads: usize,
    /// Sequence length.
    pub m: usize,
    pub d_ff: usize,
    pub clock_period_ns: f64,
    /// Heads processed concurrently per batch (1 = fully serial).
    #[serde(default = "default_heads_parallel")]
    pub heads_parallel: usize,
    /// Physical array extent; None means one array per logical matrix.
    #[serde(default)]
    pub tile: Option<Tile>,
    #[serde(default)]
    pub scale_mode: ScaleMode,
    /// Handshake cycles around each sequential block (start + done).
    #[serde(default = "default_ctrl_overhead")]
    pub ctrl_overhead: u64,
}

fn default_heads_parallel() -> usize {
    1
}

fn default_ctrl_overhead() -> u64 {
    2
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.k_heads == 0 || self.m == 0 || self.d_ff == 0 {
            return Err(Error::config("model dimensions must be positive"));
        }
        if self.d % self.k_heads != 0 {
            return Err(Error::config(format!(
                "d = {} not divisible by k_heads = {}",
                self.d, self.k_heads
            )));
        }
        if self.heads_parallel == 0 || self.heads_parallel > self.k_heads {
            return Err(Error::config(format!(
                "heads_parallel = {} out of range 1..={}",
                self.heads_parallel, self.k_heads
            )));
        }
        if !(self.clock_period_ns.is_finite() && self.clock_period_ns > 0.0) {
            return Err(Error::config("clock period must be positive"));
        }
        if self.ctrl_overhead < 2 {
            return Err(Error::config(
                "control overhead below 2 cannot fit a start and a done cycle",
            ));
        }
        if let Some(t) = self.tile {
            if t.rows == 0 || t.cols == 0 {
                return Err(Error::config("tile dimensions must be positive"));
            }
        }
        Ok(())
    }

    pub fn d_h(&self) -> usize {
        self.d / self.k_heads
    }

    /// The array extent used for a logical rows x cols product.
    pub fn tile_for(&self, rows: usize, cols: usize) -> Tile {
        self.tile.unwrap_or(Tile { rows, cols })
    }
}

/// Integer bias with the dyadic multiplier that aligns it onto the
/// accumulator scale it is added to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bias {
    pub q: Vec<i32>,
    pub align: DyadicScale,
}

impl Bias {
    /// Bias already stored on the accumulator scale.
    pub fn pre_aligned(q: Vec<i32>) -> Self {
        Bias {
            q,
            align: DyadicScale { b: 1, c: 0 },
        }
    }

    fn as_arg(&self) -> (&[i32], DyadicScale) {
        (&self.q, self.align)
    }
}

/// One attention head's frozen parameters: projection weights, biases, and
/// the calibrated scales of the Q/K/V junctions plus the softmax output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadWeights {
    pub wq: QMat8,
    pub bq: Bias,
    pub wk: QMat8,
    pub bk: Bias,
    pub wv: QMat8,
    pub bv: Bias,
    pub s_q: Scale,
    pub s_k: Scale,
    pub s_v: Scale,
    pub s_probs: Scale,
}

/// One encoder layer's frozen parameters and junction scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub heads: Vec<HeadWeights>,
    pub wo: QMat8,
    pub bo: Bias,
    pub w1: QMat8,
    pub b1: Bias,
    pub w2: QMat8,
    pub b2: Bias,
    pub ln1_gamma: Vec<f64>,
    pub ln1_beta: Vec<f64>,
    pub ln2_gamma: Vec<f64>,
    pub ln2_beta: Vec<f64>,
    /// Declared scale of the int8 input this layer expects.
    pub s_in: Scale,
    pub s_concat: Scale,
    /// Wide (int32) scale of the first residual sum.
    pub s_res1: Scale,
    pub s_ffn_in: Scale,
    pub s_gelu_in: Scale,
    pub s_ffn_mid: Scale,
    /// Wide (int32) scale of the second residual sum.
    pub s_res2: Scale,
    pub s_out: Scale,
}

/// Frozen quadratic fit coefficients the integer kernels derive their
/// constants from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelFits {
    pub exp: Poly2Fit,
    pub erf: Poly2Fit,
}

impl KernelFits {
    /// Fit both segments from scratch (deterministic).
    pub fn compute() -> Result<Self> {
        Ok(KernelFits {
            exp: fit_exp_segment()?,
            erf: fit_erf_segment()?,
        })
    }
}

/// A complete frozen model: shape, fit constants, per-layer weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderWeights {
    pub config: ModelConfig,
    pub fits: KernelFits,
    pub layers: Vec<LayerWeights>,
}

impl EncoderWeights {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let (d, d_ff, d_h) = (self.config.d, self.config.d_ff, self.config.d_h());
        for (li, lw) in self.layers.iter().enumerate() {
            let ctx = |what: &str| format!("layer {li}: {what}");
            if lw.heads.len() != self.config.k_heads {
                return Err(Error::config(ctx(&format!(
                    "{} heads, expected {}",
                    lw.heads.len(),
                    self.config.k_heads
                ))));
            }
            for (hi, hw) in lw.heads.iter().enumerate() {
                for (name, w, b) in [
                    ("wq", &hw.wq, &hw.bq),
                    ("wk", &hw.wk, &hw.bk),
                    ("wv", &hw.wv, &hw.bv),
                ] {
                    if w.rows() != d || w.cols() != d_h {
                        return Err(Error::config(ctx(&format!(
                            "head {hi} {name} is {}x{}, expected {d}x{d_h}",
                            w.rows(),
                            w.cols()
                        ))));
                    }
                    if b.q.len() != d_h {
                        return Err(Error::config(ctx(&format!(
                            "head {hi} {name} bias length {}, expected {d_h}",
                            b.q.len()
                        ))));
                    }
                }
                let r = (1.0 / hw.s_probs.value()).round();
                if !(1.0..=127.0).contains(&r) {
                    return Err(Error::config(ctx(&format!(
                        "head {hi} softmax scale {} has no int8 reciprocal",
                        hw.s_probs.value()
                    ))));
                }
            }
            for (name, w, b, rows, cols) in [
                ("wo", &lw.wo, &lw.bo, d, d),
                ("w1", &lw.w1, &lw.b1, d, d_ff),
                ("w2", &lw.w2, &lw.b2, d_ff, d),
            ] {
                if w.rows() != rows || w.cols() != cols {
                    return Err(Error::config(ctx(&format!(
                        "{name} is {}x{}, expected {rows}x{cols}",
                        w.rows(),
                        w.cols()
                    ))));
                }
                if b.q.len() != cols {
                    return Err(Error::config(ctx(&format!(
                        "{name} bias length {}, expected {cols}",
                        b.q.len()
                    ))));
                }
            }
            for (name, v) in [
                ("ln1_gamma", &lw.ln1_gamma),
                ("ln1_beta", &lw.ln1_beta),
                ("ln2_gamma", &lw.ln2_gamma),
                ("ln2_beta", &lw.ln2_beta),
            ] {
                if v.len() != d {
                    return Err(Error::config(ctx(&format!(
                        "{name} length {}, expected {d}",
                        v.len()
                    ))));
                }
            }
            if li + 1 < self.layers.len() && self.layers[li + 1].s_in != lw.s_out {
                return Err(Error::config(ctx(
                    "output scale does not match the next layer's input scale",
                )));
            }
        }
        Ok(())
    }
}

/// Per-layer cycle breakdown by sequential block, control overhead excluded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCycles {
    pub mhsa: u64,
    pub ln1: u64,
    pub ffn: u64,
    pub ln2: u64,
    /// Measured Newton iterations summed over rows, already inside ln1/ln2.
    pub ln1_sqrt_iters: u64,
    pub ln2_sqrt_iters: u64,
}

impl LayerCycles {
    pub fn blocks_total(&self) -> u64 {
        self.mhsa + self.ln1 + self.ffn + self.ln2
    }

    /// Four sequential blocks, each paying the handshake overhead.
    pub fn total_with_ctrl(&self, ctrl_overhead: u64) -> u64 {
        self.blocks_total() + 4 * ctrl_overhead
    }
}

fn requant8(x: &QMat32, target: Scale, sat: &mut SatCounters) -> Result<QMat8> {
    let c = auto_precision(x.scale.value() / target.value());
    requantize_tracked(x, target, c, sat)
}

fn join32(x: &QMat32, y: &QMat32, out: Scale, sat: &mut SatCounters) -> Result<QMat32> {
    let c = auto_precision(x.scale.value() / out.value())
        .min(auto_precision(y.scale.value() / out.value()));
    rescale_add_tracked(x, y, out, c, sat)
}

/// Shrink raw attention scores in place per the configured mode. The scale
/// annotation is unchanged: the shift is part of the softmax temperature,
/// exactly as in the float mirror.
fn scale_scores(scores: &mut QMat32, cfg: &ModelConfig, sat: &mut SatCounters) -> Result<()> {
    match cfg.scale_mode {
        ScaleMode::SqrtDhShift => {
            let s = ScaleMode::shift_amount(cfg.d_h());
            if s > 0 {
                for q in scores.data_mut() {
                    *q >>= s;
                }
            }
        }
        ScaleMode::ModelDim => {
            let r = 1.0 / cfg.d as f64;
            let dy = dyadic_fit(r, auto_precision(r))?;
            for q in scores.data_mut() {
                let (v, overflow) = dyadic_apply_flagged(*q, dy);
                if overflow {
                    sat.dyadic_saturations += 1;
                }
                *q = v;
            }
        }
    }
    Ok(())
}

/// Row-wise integer softmax of a score matrix into int8 probabilities.
fn softmax_probs(scores: &QMat32, exp: &ExpConsts, s_probs: Scale) -> Result<QMat8> {
    let mut probs = QMat8::zeros(scores.rows(), scores.cols(), s_probs)?;
    for r in 0..scores.rows() {
        let row = i_softmax_i8(scores.row(r), exp, s_probs)?;
        for (j, &p) in row.iter().enumerate() {
            probs.set(r, j, p);
        }
    }
    Ok(probs)
}

/// One attention head: project Q/K/V, form scaled scores, softmax, and mix
/// values. Output is an int32 matrix on scale s_probs * s_v.
pub fn attention_head(
    x: &QMat8,
    hw: &HeadWeights,
    fits: &KernelFits,
    cfg: &ModelConfig,
    sat: &mut SatCounters,
) -> Result<(QMat32, u64)> {
    let m = x.rows();
    let d_h = hw.wq.cols();
    let mut cycles = 0u64;

    let (q32, c) = matmul_tracked(x, &hw.wq, Some(hw.bq.as_arg()), cfg.tile_for(m, d_h), sat)?;
    cycles += c;
    let q8 = requant8(&q32, hw.s_q, sat)?;
    let (k32, c) = matmul_tracked(x, &hw.wk, Some(hw.bk.as_arg()), cfg.tile_for(m, d_h), sat)?;
    cycles += c;
    let k8 = requant8(&k32, hw.s_k, sat)?;
    let (v32, c) = matmul_tracked(x, &hw.wv, Some(hw.bv.as_arg()), cfg.tile_for(m, d_h), sat)?;
    cycles += c;
    let v8 = requant8(&v32, hw.s_v, sat)?;

    let (mut scores, c) = matmul_tracked(&q8, &k8.transposed(), None, cfg.tile_for(m, m), sat)?;
    cycles += c;
    scale_scores(&mut scores, cfg, sat)?;

    let exp = ExpConsts::new(&fits.exp, hw.s_q.times(hw.s_k)?)?;
    let probs = softmax_probs(&scores, &exp, hw.s_probs)?;
    cycles += softmax_cycles(m);

    let (pv, c) = matmul_tracked(&probs, &v8, None, cfg.tile_for(m, d_h), sat)?;
    cycles += c;
    Ok((pv, cycles))
}

/// Multi-head attention: heads in the given processing order, requantized
/// into their concat columns, then the output projection. The order only
/// affects scheduling, never the numbers.
fn mhsa_ordered(
    x: &QMat8,
    lw: &LayerWeights,
    fits: &KernelFits,
    cfg: &ModelConfig,
    order: &[usize],
    sat: &mut SatCounters,
) -> Result<(QMat32, u64)> {
    if x.scale != lw.s_in {
        return Err(Error::usage(format!(
            "input scale {} does not match the layer's declared {}",
            x.scale.value(),
            lw.s_in.value()
        )));
    }
    let m = x.rows();
    let d_h = cfg.d_h();
    let mut concat = QMat8::zeros(m, cfg.d, lw.s_concat)?;
    let mut head_cost = Vec::with_capacity(order.len());
    for &h in order {
        let (pv, c) = attention_head(x, &lw.heads[h], fits, cfg, sat)?;
        let p8 = requant8(&pv, lw.s_concat, sat)?;
        for r in 0..m {
            for j in 0..d_h {
                concat.set(r, h * d_h + j, p8.get(r, j));
            }
        }
        head_cost.push(c);
    }
    // heads_parallel heads run concurrently; each batch costs its slowest.
    let attn_cycles: u64 = head_cost
        .chunks(cfg.heads_parallel)
        .map(|batch| batch.iter().copied().max().unwrap_or(0))
        .sum();
    let (out, c_wo) = matmul_tracked(
        &concat,
        &lw.wo,
        Some(lw.bo.as_arg()),
        cfg.tile_for(m, cfg.d),
        sat,
    )?;
    Ok((out, attn_cycles + c_wo))
}

pub fn mhsa(
    x: &QMat8,
    lw: &LayerWeights,
    fits: &KernelFits,
    cfg: &ModelConfig,
    sat: &mut SatCounters,
) -> Result<(QMat32, u64)> {
    let order: Vec<usize> = (0..lw.heads.len()).collect();
    mhsa_ordered(x, lw, fits, cfg, &order, sat)
}

/// Position-wise feed-forward: expand, integer GELU, contract.
pub fn ffn(
    x: &QMat8,
    lw: &LayerWeights,
    fits: &KernelFits,
    cfg: &ModelConfig,
    sat: &mut SatCounters,
) -> Result<(QMat32, u64)> {
    if x.scale != lw.s_ffn_in {
        return Err(Error::usage(format!(
            "ffn input scale {} does not match the layer's declared {}",
            x.scale.value(),
            lw.s_ffn_in.value()
        )));
    }
    let m = x.rows();
    let (h32, c1) = matmul_tracked(
        x,
        &lw.w1,
        Some(lw.b1.as_arg()),
        cfg.tile_for(m, cfg.d_ff),
        sat,
    )?;
    let g_in = requant8(&h32, lw.s_gelu_in, sat)?;
    let gc = GeluConsts::new(&fits.erf, lw.s_gelu_in)?;
    let mut act = QMat32::zeros(m, cfg.d_ff, gc.s_out())?;
    for (slot, &q) in act.data_mut().iter_mut().zip(g_in.data()) {
        *slot = i_gelu(i32::from(q), &gc)?;
    }
    let mid = requant8(&act, lw.s_ffn_mid, sat)?;
    let (out, c2) = matmul_tracked(
        &mid,
        &lw.w2,
        Some(lw.b2.as_arg()),
        cfg.tile_for(m, cfg.d),
        sat,
    )?;
    Ok((out, c1 + c2))
}

/// Row-wise layernorm of a wide tensor onto the fixed LN output scale,
/// returning the summed Newton iteration count for the cycle model.
fn layernorm_mat(
    x: &QMat32,
    gamma: &[f64],
    beta: &[f64],
    sat: &mut SatCounters,
) -> Result<(QMat32, u64)> {
    let k = LnConsts::new(gamma, beta, ln_out_scale())?;
    let mut out = QMat32::zeros(x.rows(), x.cols(), ln_out_scale())?;
    let mut iters = 0u64;
    for r in 0..x.rows() {
        let (row, it) = i_layernorm_traced(x.row(r), &k, sat)?;
        for (j, &v) in row.iter().enumerate() {
            out.set(r, j, v);
        }
        iters += u64::from(it);
    }
    Ok((out, iters))
}

/// One full encoder layer. Residual joins happen on the wide junction
/// scales; both sums feed layernorm, and the final output is requantized to
/// the layer's declared int8 scale.
pub fn encoder_layer(
    x: &QMat8,
    lw: &LayerWeights,
    fits: &KernelFits,
    cfg: &ModelConfig,
    sat: &mut SatCounters,
) -> Result<(QMat8, LayerCycles)> {
    let (attn, c_mhsa) = mhsa(x, lw, fits, cfg, sat)?;
    let res1 = join32(&x.widen(), &attn, lw.s_res1, sat)?;
    let (ln1, it1) = layernorm_mat(&res1, &lw.ln1_gamma, &lw.ln1_beta, sat)?;
    let ffn_in = requant8(&ln1, lw.s_ffn_in, sat)?;
    let (ffn_out, c_ffn) = ffn(&ffn_in, lw, fits, cfg, sat)?;
    let res2 = join32(&ffn_in.widen(), &ffn_out, lw.s_res2, sat)?;
    let (ln2, it2) = layernorm_mat(&res2, &lw.ln2_gamma, &lw.ln2_beta, sat)?;
    let out = requant8(&ln2, lw.s_out, sat)?;
    Ok((
        out,
        LayerCycles {
            mhsa: c_mhsa,
            ln1: layernorm_cycles(cfg.d, it1),
            ffn: c_ffn,
            ln2: layernorm_cycles(cfg.d, it2),
            ln1_sqrt_iters: it1,
            ln2_sqrt_iters: it2,
        },
    ))
}

/// Run the whole stack, returning every layer's int8 output (the last one
/// is the model output) and the per-layer cycle breakdowns.
pub fn encoder_stack(
    x: &QMat8,
    w: &EncoderWeights,
    sat: &mut SatCounters,
) -> Result<(Vec<QMat8>, Vec<LayerCycles>)> {
    w.validate()?;
    if x.rows() != w.config.m || x.cols() != w.config.d {
        return Err(Error::usage(format!(
            "input is {}x{} but the configuration expects {}x{}",
            x.rows(),
            x.cols(),
            w.config.m,
            w.config.d
        )));
    }
    let mut outs: Vec<QMat8> = Vec::with_capacity(w.layers.len());
    let mut cycles = Vec::with_capacity(w.layers.len());
    for lw in &w.layers {
        let cur = outs.last().unwrap_or(x);
        let (o, c) = encoder_layer(cur, lw, &w.fits, &w.config, sat)?;
        outs.push(o);
        cycles.push(c);
    }
    Ok((outs, cycles))
}
