//! Deterministic toy-model generation: seeded random float weights,
//! calibration over random sample inputs, and freezing the result into
//! integer weights with per-junction scales.

use crate::blocks::{Bias, EncoderWeights, HeadWeights, KernelFits, LayerWeights, ModelConfig};
use crate::error::{Error, Result};
use crate::quant::{QMat8, Scale};
use crate::reference::{
    float_encoder_forward, CalibRecorder, CalibStat, CalibrationSet, FMat, FloatEncoderParams,
    FloatHeadParams, FloatLayerParams, JunctionSink, MIN_SCALE,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Everything a generated model consists of: the frozen integer side, the
/// float mirror it was derived from, and the calibration material.
#[derive(Debug, Clone)]
pub struct ToyModel {
    pub weights: EncoderWeights,
    pub float_params: FloatEncoderParams,
    pub calibration: CalibrationSet,
    pub samples: Vec<FMat>,
    /// First sample quantized at the input junction scale.
    pub x8: QMat8,
    /// First sample in real arithmetic, for oracle comparisons.
    pub xf: FMat,
}

/// Symmetric per-tensor quantization at S = max|v| / 127 (floored).
pub fn quantize_max_abs(f: &FMat) -> Result<QMat8> {
    let max = f.data().iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let s = Scale::new((max / 127.0).max(MIN_SCALE))?;
    quantize_at(f, s)
}

/// Round-to-nearest int8 quantization at a given scale.
pub fn quantize_at(f: &FMat, s: Scale) -> Result<QMat8> {
    QMat8::from_fn(f.rows(), f.cols(), s, |r, c| {
        (f.get(r, c) / s.value()).round().clamp(-127.0, 127.0) as i8
    })
}

/// Freeze a float bias vector directly on the accumulator scale it will be
/// added at, so no runtime alignment is needed.
fn freeze_bias(b: &[f64], acc_scale: Scale) -> Result<Bias> {
    let mut q = Vec::with_capacity(b.len());
    for &v in b {
        let r = (v / acc_scale.value()).round();
        if r.abs() > f64::from(i32::MAX) {
            return Err(Error::config(format!(
                "bias value {v} does not fit i32 at scale {}",
                acc_scale.value()
            )));
        }
        q.push(r as i32);
    }
    Ok(Bias::pre_aligned(q))
}

fn normal_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> FMat {
    let n = Normal::new(0.0, std).expect("positive std");
    FMat::from_fn(rows, cols, |_, _| n.sample(rng)).expect("nonempty shape")
}

fn normal_vec(rng: &mut ChaCha8Rng, len: usize, mean: f64, std: f64) -> Vec<f64> {
    let n = Normal::new(mean, std).expect("positive std");
    (0..len).map(|_| n.sample(rng)).collect()
}

/// Random float encoder parameters: weights N(0, 1/sqrt(fan_in)), biases
/// N(0, 0.02), gamma N(1, 0.02), beta N(0, 0.02). Draw order is fixed
/// (layers outer; per layer: heads, then wo, ffn, layernorms) so a seed
/// pins the whole model.
pub fn toy_float_encoder(
    cfg: &ModelConfig,
    n_layers: usize,
    rng: &mut ChaCha8Rng,
) -> FloatEncoderParams {
    let (d, d_ff, d_h) = (cfg.d, cfg.d_ff, cfg.d_h());
    let w_std = 1.0 / (d as f64).sqrt();
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let mut heads = Vec::with_capacity(cfg.k_heads);
        for _ in 0..cfg.k_heads {
            heads.push(FloatHeadParams {
                wq: normal_mat(rng, d, d_h, w_std),
                bq: normal_vec(rng, d_h, 0.0, 0.02),
                wk: normal_mat(rng, d, d_h, w_std),
                bk: normal_vec(rng, d_h, 0.0, 0.02),
                wv: normal_mat(rng, d, d_h, w_std),
                bv: normal_vec(rng, d_h, 0.0, 0.02),
            });
        }
        layers.push(FloatLayerParams {
            heads,
            wo: normal_mat(rng, d, d, w_std),
            bo: normal_vec(rng, d, 0.0, 0.02),
            w1: normal_mat(rng, d, d_ff, w_std),
            b1: normal_vec(rng, d_ff, 0.0, 0.02),
            w2: normal_mat(rng, d_ff, d, 1.0 / (d_ff as f64).sqrt()),
            b2: normal_vec(rng, d, 0.0, 0.02),
            ln1_gamma: normal_vec(rng, d, 1.0, 0.02),
            ln1_beta: normal_vec(rng, d, 0.0, 0.02),
            ln2_gamma: normal_vec(rng, d, 1.0, 0.02),
            ln2_beta: normal_vec(rng, d, 0.0, 0.02),
        });
    }
    FloatEncoderParams {
        layers,
        score_scaling: cfg.scale_mode.float_scaling(cfg.d, cfg.d_h()),
    }
}

/// Standard-normal calibration inputs, m x d each.
pub fn toy_samples(cfg: &ModelConfig, n_samples: usize, rng: &mut ChaCha8Rng) -> Vec<FMat> {
    (0..n_samples)
        .map(|_| normal_mat(rng, cfg.m, cfg.d, 1.0))
        .collect()
}

/// Run the float graph over every sample and collect per-junction
/// magnitude statistics.
pub fn calibrate_encoder(
    fp: &FloatEncoderParams,
    samples: &[FMat],
    stat: CalibStat,
) -> Result<CalibrationSet> {
    let mut rec = CalibRecorder::new(stat);
    for s in samples {
        let mut sink = rec.sink();
        let mut sr: JunctionSink = &mut sink;
        float_encoder_forward(fp, s, &mut sr)?;
    }
    Ok(rec.finish())
}

/// Quantize weights, freeze biases on their accumulator scales, and attach
/// the calibrated junction scales. The input scale of layer i + 1 is layer
/// i's output scale by construction.
pub fn freeze(
    cfg: &ModelConfig,
    fp: &FloatEncoderParams,
    calib: &CalibrationSet,
) -> Result<EncoderWeights> {
    let s_probs = Scale::new(1.0 / 127.0)?;
    let mut layers = Vec::with_capacity(fp.layers.len());
    for (li, flp) in fp.layers.iter().enumerate() {
        let s_in = if li == 0 {
            calib.scale_int8("input")?
        } else {
            calib.scale_int8(&format!("l{}.out", li - 1))?
        };
        let mut heads = Vec::with_capacity(flp.heads.len());
        for (hi, fh) in flp.heads.iter().enumerate() {
            let wq = quantize_max_abs(&fh.wq)?;
            let wk = quantize_max_abs(&fh.wk)?;
            let wv = quantize_max_abs(&fh.wv)?;
            let bq = freeze_bias(&fh.bq, s_in.times(wq.scale)?)?;
            let bk = freeze_bias(&fh.bk, s_in.times(wk.scale)?)?;
            let bv = freeze_bias(&fh.bv, s_in.times(wv.scale)?)?;
            heads.push(HeadWeights {
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                s_q: calib.scale_int8(&format!("l{li}.h{hi}.q"))?,
                s_k: calib.scale_int8(&format!("l{li}.h{hi}.k"))?,
                s_v: calib.scale_int8(&format!("l{li}.h{hi}.v"))?,
                s_probs,
            });
        }
        let s_concat = calib.scale_int8(&format!("l{li}.concat"))?;
        let s_ffn_in = calib.scale_int8(&format!("l{li}.ffn_in"))?;
        let s_ffn_mid = calib.scale_int8(&format!("l{li}.ffn_mid"))?;
        let wo = quantize_max_abs(&flp.wo)?;
        let bo = freeze_bias(&flp.bo, s_concat.times(wo.scale)?)?;
        let w1 = quantize_max_abs(&flp.w1)?;
        let b1 = freeze_bias(&flp.b1, s_ffn_in.times(w1.scale)?)?;
        let w2 = quantize_max_abs(&flp.w2)?;
        let b2 = freeze_bias(&flp.b2, s_ffn_mid.times(w2.scale)?)?;
        layers.push(LayerWeights {
            heads,
            wo,
            bo,
            w1,
            b1,
            w2,
            b2,
            ln1_gamma: flp.ln1_gamma.clone(),
            ln1_beta: flp.ln1_beta.clone(),
            ln2_gamma: flp.ln2_gamma.clone(),
            ln2_beta: flp.ln2_beta.clone(),
            s_in,
            s_concat,
            s_res1: calib.scale_int32(&format!("l{li}.res1"))?,
            s_ffn_in,
            s_gelu_in: calib.scale_int8(&format!("l{li}.gelu_in"))?,
            s_ffn_mid,
            s_res2: calib.scale_int32(&format!("l{li}.res2"))?,
            s_out: calib.scale_int8(&format!("l{li}.out"))?,
        });
    }
    let weights = EncoderWeights {
        config: *cfg,
        fits: KernelFits::compute()?,
        layers,
    };
    weights.validate()?;
    Ok(weights)
}

/// One-call generator: weights, samples, calibration, freeze.
pub fn toy_encoder(
    cfg: &ModelConfig,
    n_layers: usize,
    seed: u64,
    n_samples: usize,
    stat: CalibStat,
) -> Result<ToyModel> {
    cfg.validate()?;
    if n_samples == 0 {
        return Err(Error::config("calibration needs at least one sample"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let float_params = toy_float_encoder(cfg, n_layers, &mut rng);
    let samples = toy_samples(cfg, n_samples, &mut rng);
    let calibration = calibrate_encoder(&float_params, &samples, stat)?;
    let weights = freeze(cfg, &float_params, &calibration)?;
    let xf = samples[0].clone();
    let s_in = weights
        .layers
        .first()
        .map(|l| l.s_in)
        .map_or_else(|| calibration.scale_int8("input"), Ok)?;
    let x8 = quantize_at(&xf, s_in)?;
    Ok(ToyModel {
        weights,
        float_params,
        calibration,
        samples,
        x8,
        xf,
    })
}

/// A fresh standard-normal input drawn from its own seeded stream,
/// quantized onto the given int8 scale. Returns both views so the same
/// stimulus can drive the integer pipeline and the float mirror.
pub fn seeded_input(cfg: &ModelConfig, s_in: Scale, seed: u64) -> Result<(QMat8, FMat)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xf = normal_mat(&mut rng, cfg.m, cfg.d, 1.0);
    let x8 = quantize_at(&xf, s_in)?;
    Ok((x8, xf))
}

/// The all-zero stimulus at the given scale.
pub fn zero_input(cfg: &ModelConfig, s_in: Scale) -> Result<(QMat8, FMat)> {
    Ok((
        QMat8::zeros(cfg.m, cfg.d, s_in)?,
        FMat::from_fn(cfg.m, cfg.d, |_, _| 0.0)?,
    ))
}

fn dequant_mat(m: &QMat8) -> Result<FMat> {
    let vals = m.dequant();
    let cols = m.cols();
    FMat::from_fn(m.rows(), cols, |r, c| vals[r * cols + c])
}

fn dequant_bias(b: &Bias, acc_scale: Scale) -> Vec<f64> {
    let align = f64::from(b.align.b) / f64::from(1u32 << b.align.c);
    b.q.iter()
        .map(|&q| f64::from(q) * align * acc_scale.value())
        .collect()
}

/// Real-arithmetic mirror reconstructed from frozen integer weights. The
/// float reference this yields isolates integer *arithmetic* error: weight
/// quantization is already baked into both sides.
pub fn dequantized_float_params(w: &EncoderWeights) -> Result<FloatEncoderParams> {
    let mut layers = Vec::with_capacity(w.layers.len());
    for lw in &w.layers {
        let mut heads = Vec::with_capacity(lw.heads.len());
        for hw in &lw.heads {
            heads.push(FloatHeadParams {
                wq: dequant_mat(&hw.wq)?,
                bq: dequant_bias(&hw.bq, lw.s_in.times(hw.wq.scale)?),
                wk: dequant_mat(&hw.wk)?,
                bk: dequant_bias(&hw.bk, lw.s_in.times(hw.wk.scale)?),
                wv: dequant_mat(&hw.wv)?,
                bv: dequant_bias(&hw.bv, lw.s_in.times(hw.wv.scale)?),
            });
        }
        layers.push(FloatLayerParams {
            heads,
            wo: dequant_mat(&lw.wo)?,
            bo: dequant_bias(&lw.bo, lw.s_concat.times(lw.wo.scale)?),
            w1: dequant_mat(&lw.w1)?,
            b1: dequant_bias(&lw.b1, lw.s_ffn_in.times(lw.w1.scale)?),
            w2: dequant_mat(&lw.w2)?,
            b2: dequant_bias(&lw.b2, lw.s_ffn_mid.times(lw.w2.scale)?),
            ln1_gamma: lw.ln1_gamma.clone(),
            ln1_beta: lw.ln1_beta.clone(),
            ln2_gamma: lw.ln2_gamma.clone(),
            ln2_beta: lw.ln2_beta.clone(),
        });
    }
    Ok(FloatEncoderParams {
        layers,
        score_scaling: w
            .config
            .scale_mode
            .float_scaling(w.config.d, w.config.d_h()),
    })
}
