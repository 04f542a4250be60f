//! Floating-point reference model.
//!
//! Everything in here runs in real arithmetic: the quadratic fits whose
//! coefficients seed the integer kernels, the elementwise oracles the
//! kernels are tested against, a float mirror of the full encoder graph,
//! and the calibration recorder that derives per-junction scales.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::quant::Scale;

/// Number of grid points used for fitting and error measurement.
pub const FIT_GRID_POINTS: usize = 100_001;

/// Upper end of the erf fitting window. The quadratic is fitted on
/// [0, this] and then evaluated on [0, -b] (its own vertex), which is where
/// the integer kernel clips; the window is chosen so the clip-interval
/// error stays under the 0.01 gate.
pub const ERF_FIT_UPPER: f64 = 1.65;

/// Quality gate applied to both quadratic fits.
pub const FIT_MAX_ERR_GATE: f64 = 0.01;

// ---------------------------------------------------------------------------
// Float matrices
// ---------------------------------------------------------------------------

/// Dense row-major f64 matrix for the reference path.
#[derive(Debug, Clone, PartialEq)]
pub struct FMat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl FMat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::usage(format!(
                "matrix dimensions must be nonzero, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::usage(format!(
                "data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(FMat { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        FMat::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn from_fn(
        rows: usize,
        cols: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        FMat::new(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn transposed(&self) -> FMat {
        let mut out = Vec::with_capacity(self.data.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                out.push(self.data[r * self.cols + c]);
            }
        }
        FMat {
            rows: self.cols,
            cols: self.rows,
            data: out,
        }
    }

    pub fn matmul(&self, other: &FMat) -> Result<FMat> {
        if self.cols != other.rows {
            return Err(Error::usage(format!(
                "matmul inner dimension mismatch: {}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = vec![0.0; self.rows * other.cols];
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[r * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let row_k = &other.data[k * other.cols..(k + 1) * other.cols];
                let out_r = &mut out[r * other.cols..(r + 1) * other.cols];
                for (o, &b) in out_r.iter_mut().zip(row_k) {
                    *o += a * b;
                }
            }
        }
        FMat::new(self.rows, other.cols, out)
    }

    /// Add a bias vector to every row.
    pub fn add_row_bias(&self, bias: &[f64]) -> Result<FMat> {
        if bias.len() != self.cols {
            return Err(Error::usage(format!(
                "bias length {} does not match {} columns",
                bias.len(),
                self.cols
            )));
        }
        let data = self
            .data
            .chunks(self.cols)
            .flat_map(|row| row.iter().zip(bias).map(|(&v, &b)| v + b))
            .collect();
        FMat::new(self.rows, self.cols, data)
    }

    pub fn add(&self, other: &FMat) -> Result<FMat> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::usage(format!(
                "add shape mismatch: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        FMat::new(self.rows, self.cols, data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> FMat {
        FMat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Horizontal concatenation (same row count).
    pub fn hconcat(parts: &[&FMat]) -> Result<FMat> {
        let rows = parts
            .first()
            .ok_or_else(|| Error::usage("hconcat of zero matrices"))?
            .rows;
        if parts.iter().any(|p| p.rows != rows) {
            return Err(Error::usage("hconcat row count mismatch"));
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        FMat::new(rows, cols, data)
    }
}

// ---------------------------------------------------------------------------
// Elementwise oracles
// ---------------------------------------------------------------------------

/// Gauss error function (high-precision library implementation).
pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

/// GELU in its exact erf form.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

/// Row-wise softmax with the max-subtraction identity.
pub fn softmax_rows(x: &FMat) -> FMat {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = x.row(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for (c, e) in exps.into_iter().enumerate() {
            out.set(r, c, e / sum);
        }
    }
    out
}

/// Row-wise layer normalization with population variance.
pub fn layernorm_rows(x: &FMat, gamma: &[f64], beta: &[f64]) -> Result<FMat> {
    let d = x.cols();
    if gamma.len() != d || beta.len() != d {
        return Err(Error::usage(format!(
            "layernorm parameter length {} / {} does not match width {d}",
            gamma.len(),
            beta.len()
        )));
    }
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let std = var.sqrt().max(f64::MIN_POSITIVE);
        for c in 0..d {
            out.set(r, c, (row[c] - mean) / std * gamma[c] + beta[c]);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Quadratic fitting
// ---------------------------------------------------------------------------

/// Least-squares quadratic in vertex form `a (x + b)^2 + c`, together with
/// the errors measured on the grid it was evaluated on.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Poly2Fit {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub max_abs_err: f64,
    pub rms_err: f64,
}

impl Poly2Fit {
    pub fn eval(&self, x: f64) -> f64 {
        let t = x + self.b;
        self.a * t * t + self.c
    }
}

/// Solve a 3x3 linear system by Gaussian elimination with partial pivoting.
fn solve3(mut m: [[f64; 4]; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let pivot = (col..3).max_by(|&i, &j| {
            m[i][col]
                .abs()
                .partial_cmp(&m[j][col].abs())
                .unwrap_or(std::cmp::Ordering::Equal)
        })?;
        if m[pivot][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, pivot);
        for row in (col + 1)..3 {
            let factor = m[row][col] / m[col][col];
            for k in col..4 {
                m[row][k] -= factor * m[col][k];
            }
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let mut acc = m[row][3];
        for k in (row + 1)..3 {
            acc -= m[row][k] * x[k];
        }
        x[row] = acc / m[row][row];
    }
    Some(x)
}

/// Least-squares fit of `a (x + b)^2 + c` to `f` on `[lo, hi]` over a uniform
/// grid, via the normal equations of the monomial basis {x^2, x, 1}.
pub fn fit_poly2(f: impl Fn(f64) -> f64, lo: f64, hi: f64, points: usize) -> Result<Poly2Fit> {
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::usage(format!(
            "fit interval [{lo}, {hi}] is degenerate"
        )));
    }
    if points < 3 {
        return Err(Error::usage("fit needs at least 3 sample points"));
    }
    let n = points;
    let step = (hi - lo) / (n - 1) as f64;
    // Normal equations: sums of x^k for k = 0..4 and of x^k * y for k = 0..2.
    let (mut s0, mut s1, mut s2, mut s3, mut s4) = (0.0f64, 0.0, 0.0, 0.0, 0.0);
    let (mut t0, mut t1, mut t2) = (0.0f64, 0.0, 0.0);
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for i in 0..n {
        let x = lo + step * i as f64;
        let y = f(x);
        if !y.is_finite() {
            return Err(Error::usage(format!(
                "target function not finite at x = {x}"
            )));
        }
        let x2 = x * x;
        s0 += 1.0;
        s1 += x;
        s2 += x2;
        s3 += x2 * x;
        s4 += x2 * x2;
        t0 += y;
        t1 += x * y;
        t2 += x2 * y;
        xs.push(x);
        ys.push(y);
    }
    let sys = [[s4, s3, s2, t2], [s3, s2, s1, t1], [s2, s1, s0, t0]];
    let [alpha, beta, gamma] =
        solve3(sys).ok_or_else(|| Error::config("quadratic fit normal equations are singular"))?;
    // y ~= alpha x^2 + beta x + gamma  ->  a (x + b)^2 + c.
    let y_span = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - ys.iter().cloned().fold(f64::INFINITY, f64::min);
    if alpha.abs() < 1e-9 * (y_span.max(1.0)) {
        return Err(Error::config(
            "quadratic fit is degenerate: leading coefficient is ~0",
        ));
    }
    let a = alpha;
    let b = beta / (2.0 * alpha);
    let c = gamma - beta * beta / (4.0 * alpha);
    let fit = Poly2Fit {
        a,
        b,
        c,
        max_abs_err: 0.0,
        rms_err: 0.0,
    };
    let (max_abs_err, rms_err) = measure_fit(&fit, &xs, &ys);
    Ok(Poly2Fit {
        max_abs_err,
        rms_err,
        ..fit
    })
}

fn measure_fit(fit: &Poly2Fit, xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let mut max_abs = 0.0f64;
    let mut sq_sum = 0.0f64;
    for (&x, &y) in xs.iter().zip(ys) {
        let e = (fit.eval(x) - y).abs();
        max_abs = max_abs.max(e);
        sq_sum += e * e;
    }
    (max_abs, (sq_sum / xs.len() as f64).sqrt())
}

/// Fit exp on [-ln 2, 0], the residue interval the exponential kernel
/// reduces every input into. Gated at 0.01 max error.
pub fn fit_exp_segment() -> Result<Poly2Fit> {
    let fit = fit_poly2(f64::exp, -std::f64::consts::LN_2, 0.0, FIT_GRID_POINTS)?;
    if fit.max_abs_err >= FIT_MAX_ERR_GATE {
        return Err(Error::config(format!(
            "exp fit error {} exceeds gate {FIT_MAX_ERR_GATE}",
            fit.max_abs_err
        )));
    }
    Ok(fit)
}

/// Fit erf on [0, ERF_FIT_UPPER], then re-measure the error on the clip
/// interval [0, -b] actually used by the integer kernel (the fit vertex is
/// at -b; beyond it the kernel holds the value constant). Gated at 0.01 max
/// error over the clip interval.
pub fn fit_erf_segment() -> Result<Poly2Fit> {
    let fit = fit_poly2(erf, 0.0, ERF_FIT_UPPER, FIT_GRID_POINTS)?;
    if !(fit.a < 0.0 && fit.b < 0.0) {
        return Err(Error::config(format!(
            "erf fit has unexpected shape: a = {}, b = {}",
            fit.a, fit.b
        )));
    }
    let clip_hi = -fit.b;
    let n = FIT_GRID_POINTS;
    let step = clip_hi / (n - 1) as f64;
    let xs: Vec<f64> = (0..n).map(|i| step * i as f64).collect();
    let ys: Vec<f64> = xs.iter().map(|&x| erf(x)).collect();
    let (max_abs_err, rms_err) = measure_fit(&fit, &xs, &ys);
    if max_abs_err >= FIT_MAX_ERR_GATE {
        return Err(Error::config(format!(
            "erf fit error {max_abs_err} on clip interval exceeds gate {FIT_MAX_ERR_GATE}"
        )));
    }
    Ok(Poly2Fit {
        max_abs_err,
        rms_err,
        ..fit
    })
}

// ---------------------------------------------------------------------------
// Float encoder mirror
// ---------------------------------------------------------------------------

/// How attention scores are shrunk before softmax. The integer datapath has
/// no divider, so the default is an arithmetic right shift by
/// round(log2(sqrt(head_dim))); the alternative multiplies by the
/// reciprocal of the model dimension.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScoreScaling {
    /// Multiply by 2^-s (mirrors the integer shift).
    Shift(u8),
    /// Multiply by 1/d_model.
    Recip(f64),
}

impl ScoreScaling {
    pub fn factor(self) -> f64 {
        match self {
            ScoreScaling::Shift(s) => 0.5f64.powi(i32::from(s)),
            ScoreScaling::Recip(r) => r,
        }
    }
}

/// One attention head's projection parameters.
#[derive(Debug, Clone)]
pub struct FloatHeadParams {
    pub wq: FMat,
    pub bq: Vec<f64>,
    pub wk: FMat,
    pub bk: Vec<f64>,
    pub wv: FMat,
    pub bv: Vec<f64>,
}

/// One encoder layer's parameters in real arithmetic.
#[derive(Debug, Clone)]
pub struct FloatLayerParams {
    pub heads: Vec<FloatHeadParams>,
    pub wo: FMat,
    pub bo: Vec<f64>,
    pub w1: FMat,
    pub b1: Vec<f64>,
    pub w2: FMat,
    pub b2: Vec<f64>,
    pub ln1_gamma: Vec<f64>,
    pub ln1_beta: Vec<f64>,
    pub ln2_gamma: Vec<f64>,
    pub ln2_beta: Vec<f64>,
}

/// Full encoder stack in real arithmetic.
#[derive(Debug, Clone)]
pub struct FloatEncoderParams {
    pub layers: Vec<FloatLayerParams>,
    pub score_scaling: ScoreScaling,
}

/// Junction observation callback used by calibration; a no-op sink gives the
/// plain forward pass.
pub type JunctionSink<'a> = &'a mut dyn FnMut(&str, &[f64]);

pub fn no_sink(_: &str, _: &[f64]) {}

fn observe(sink: &mut JunctionSink, name: &str, m: &FMat) {
    sink(name, m.data());
}

/// One attention head: projections, scaled scores, softmax, value mix.
pub fn float_attention_head(
    x: &FMat,
    h: &FloatHeadParams,
    scaling: ScoreScaling,
    layer: usize,
    head: usize,
    sink: &mut JunctionSink,
) -> Result<FMat> {
    let q = x.matmul(&h.wq)?.add_row_bias(&h.bq)?;
    let k = x.matmul(&h.wk)?.add_row_bias(&h.bk)?;
    let v = x.matmul(&h.wv)?.add_row_bias(&h.bv)?;
    observe(sink, &format!("l{layer}.h{head}.q"), &q);
    observe(sink, &format!("l{layer}.h{head}.k"), &k);
    observe(sink, &format!("l{layer}.h{head}.v"), &v);
    let factor = scaling.factor();
    let scores = q.matmul(&k.transposed())?.map(|s| s * factor);
    let probs = softmax_rows(&scores);
    probs.matmul(&v)
}

/// Multi-head attention with concatenation and output projection.
pub fn float_mhsa(
    x: &FMat,
    lp: &FloatLayerParams,
    scaling: ScoreScaling,
    layer: usize,
    sink: &mut JunctionSink,
) -> Result<FMat> {
    let mut head_outs = Vec::with_capacity(lp.heads.len());
    for (hi, h) in lp.heads.iter().enumerate() {
        head_outs.push(float_attention_head(x, h, scaling, layer, hi, sink)?);
    }
    let refs: Vec<&FMat> = head_outs.iter().collect();
    let concat = FMat::hconcat(&refs)?;
    observe(sink, &format!("l{layer}.concat"), &concat);
    concat.matmul(&lp.wo)?.add_row_bias(&lp.bo)
}

/// One encoder layer: attention residual + LN, then FFN residual + LN.
pub fn float_encoder_layer(
    x: &FMat,
    lp: &FloatLayerParams,
    scaling: ScoreScaling,
    layer: usize,
    sink: &mut JunctionSink,
) -> Result<FMat> {
    let attn = float_mhsa(x, lp, scaling, layer, sink)?;
    let res1 = x.add(&attn)?;
    observe(sink, &format!("l{layer}.res1"), &res1);
    let ln1 = layernorm_rows(&res1, &lp.ln1_gamma, &lp.ln1_beta)?;
    observe(sink, &format!("l{layer}.ffn_in"), &ln1);
    let mid = ln1.matmul(&lp.w1)?.add_row_bias(&lp.b1)?;
    observe(sink, &format!("l{layer}.gelu_in"), &mid);
    let act = mid.map(gelu);
    observe(sink, &format!("l{layer}.ffn_mid"), &act);
    let ffn = act.matmul(&lp.w2)?.add_row_bias(&lp.b2)?;
    let res2 = ln1.add(&ffn)?;
    observe(sink, &format!("l{layer}.res2"), &res2);
    let out = layernorm_rows(&res2, &lp.ln2_gamma, &lp.ln2_beta)?;
    observe(sink, &format!("l{layer}.out"), &out);
    Ok(out)
}

/// Full stack forward pass. The sink sees every junction the integer path
/// requantizes at, which is exactly what calibration needs.
pub fn float_encoder_forward(
    params: &FloatEncoderParams,
    x: &FMat,
    sink: &mut JunctionSink,
) -> Result<FMat> {
    observe(sink, "input", x);
    let mut cur = x.clone();
    for (li, lp) in params.layers.iter().enumerate() {
        cur = float_encoder_layer(&cur, lp, params.score_scaling, li, sink)?;
    }
    Ok(cur)
}

// ---------------------------------------------------------------------------
// Calibration
// ---------------------------------------------------------------------------

/// Statistic used to turn observed magnitudes into a scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CalibStat {
    /// Max magnitude over all observations.
    MaxAbs,
    /// Magnitude at the given quantile (e.g. 0.999), for outlier robustness.
    Percentile(f64),
}

/// Scales are floored here so a dead junction (all zeros) cannot produce a
/// zero or denormal scale.
pub const MIN_SCALE: f64 = 1e-6;

/// Gathers per-junction magnitude statistics from forward passes.
#[derive(Debug)]
pub struct CalibRecorder {
    stat: CalibStat,
    maxes: BTreeMap<String, f64>,
    values: BTreeMap<String, Vec<f64>>,
}

impl CalibRecorder {
    pub fn new(stat: CalibStat) -> Self {
        CalibRecorder {
            stat,
            maxes: BTreeMap::new(),
            values: BTreeMap::new(),
        }
    }

    pub fn record(&mut self, name: &str, data: &[f64]) {
        match self.stat {
            CalibStat::MaxAbs => {
                let m = data.iter().fold(0.0f64, |acc, &v| acc.max(v.abs()));
                let e = self.maxes.entry(name.to_string()).or_insert(0.0);
                *e = e.max(m);
            }
            CalibStat::Percentile(_) => {
                self.values
                    .entry(name.to_string())
                    .or_default()
                    .extend(data.iter().map(|v| v.abs()));
            }
        }
    }

    /// A sink borrowing this recorder, for use with the float forward pass.
    pub fn sink(&mut self) -> impl FnMut(&str, &[f64]) + '_ {
        move |name, data| self.record(name, data)
    }

    pub fn finish(self) -> CalibrationSet {
        let stats = match self.stat {
            CalibStat::MaxAbs => self.maxes,
            CalibStat::Percentile(p) => self
                .values
                .into_iter()
                .map(|(name, mut vals)| {
                    vals.sort_by(|a, b| a.partial_cmp(b).expect("magnitudes are finite"));
                    let idx = ((vals.len() as f64 - 1.0) * p).round() as usize;
                    let m = vals.get(idx).copied().unwrap_or(0.0);
                    (name, m)
                })
                .collect(),
        };
        CalibrationSet { stats }
    }
}

/// Frozen per-junction magnitude statistics with scale derivation.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CalibrationSet {
    /// Junction name to observed magnitude.
    pub stats: BTreeMap<String, f64>,
}

impl CalibrationSet {
    fn stat(&self, name: &str) -> Result<f64> {
        self.stats.get(name).copied().ok_or_else(|| {
            Error::config(format!("no calibration statistic for junction {name}"))
        })
    }

    /// Symmetric int8 scale: S = max|x| / 127, floored.
    pub fn scale_int8(&self, name: &str) -> Result<Scale> {
        let m = self.stat(name)?;
        Scale::new((m / 127.0).max(MIN_SCALE))
    }

    /// Wide-junction scale for int32 tensors: S = max|x| / 2^15. Values then
    /// use ~16 of the 32 bits, leaving headroom for the adds that follow.
    pub fn scale_int32(&self, name: &str) -> Result<Scale> {
        let m = self.stat(name)?;
        Scale::new((m / 32768.0).max(MIN_SCALE))
    }
}
