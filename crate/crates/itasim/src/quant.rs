//! Quantized tensors and dyadic rescaling.
//!
//! Every tensor in the datapath is an integer matrix paired with a positive
//! real scale: the matrix entry `q` represents the real value `q * S`. Scale
//! changes between junctions are performed with dyadic multipliers `b / 2^c`
//! so the hardware needs only one integer multiply and one arithmetic shift
//! per element, never a runtime divide.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A positive, finite quantization step size.
///
/// Construction is the only place positivity is checked; everything
/// downstream relies on it, which is what lets ratios of scales be fed to
/// [`dyadic_fit`] without further validation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Scale(f64);

impl Scale {
    pub fn new(value: f64) -> Result<Self> {
        if value.is_finite() && value > 0.0 {
            Ok(Scale(value))
        } else {
            Err(Error::config(format!(
                "scale must be a positive finite real, got {value}"
            )))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// Product of two scales, e.g. the scale of a raw integer matmul output.
    pub fn times(self, other: Scale) -> Result<Scale> {
        Scale::new(self.0 * other.0)
    }
}

/// A dyadic multiplier `b / 2^c` with `b: i32` and `c <= 31`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DyadicScale {
    pub b: i32,
    pub c: u8,
}

impl DyadicScale {
    pub fn new(b: i32, c: u8) -> Result<Self> {
        if c > 31 {
            return Err(Error::config(format!(
                "dyadic shift amount {c} exceeds 31"
            )));
        }
        Ok(DyadicScale { b, c })
    }

    /// The real ratio this multiplier approximates.
    pub fn ratio(self) -> f64 {
        self.b as f64 / f64::from(1u32 << self.c)
    }
}

/// Quantize a positive real ratio as `round(ratio * 2^c) / 2^c`.
///
/// Fails if the rounded numerator does not fit in `i32`; the caller is
/// expected to pick `c` so that it does (see [`auto_precision`]).
pub fn dyadic_fit(ratio: f64, c: u8) -> Result<DyadicScale> {
    if c > 31 {
        return Err(Error::config(format!(
            "dyadic shift amount {c} exceeds 31"
        )));
    }
    if !(ratio.is_finite() && ratio > 0.0) {
        return Err(Error::config(format!(
            "dyadic ratio must be positive and finite, got {ratio}"
        )));
    }
    let b = (ratio * f64::from(1u32 << c)).round();
    if b > i32::MAX as f64 {
        return Err(Error::config(format!(
            "dyadic numerator for ratio {ratio} at precision {c} overflows i32"
        )));
    }
    // A positive ratio below 2^-(c+1) rounds to b = 0, which would silently
    // zero every value it touches. Treat that as a configuration error too.
    let b = b as i32;
    if b == 0 {
        return Err(Error::config(format!(
            "dyadic ratio {ratio} underflows to zero at precision {c}"
        )));
    }
    DyadicScale::new(b, c)
}

/// Largest shift `c <= 31` such that `round(ratio * 2^c)` still fits in i32.
///
/// More fractional bits mean a tighter approximation of the ratio, so per
/// junction we take as many as the numerator width allows.
pub fn auto_precision(ratio: f64) -> u8 {
    let mut c = 31u8;
    loop {
        let b = (ratio * f64::from(1u32 << c)).round();
        if b <= i32::MAX as f64 || c == 0 {
            return c;
        }
        c -= 1;
    }
}

/// Apply a dyadic multiplier with round-to-nearest (ties away from zero are
/// not needed; the half-up convention matches adding `2^(c-1)` before an
/// arithmetic right shift, which is what the RTL does).
///
/// The multiply runs in 64 bits, so `q * b` cannot overflow; the final
/// result saturates to the i32 range.
pub fn dyadic_apply(q: i32, d: DyadicScale) -> i32 {
    dyadic_apply_flagged(q, d).0
}

/// Same as [`dyadic_apply`] but also reports whether saturation occurred.
pub fn dyadic_apply_flagged(q: i32, d: DyadicScale) -> (i32, bool) {
    let p = i64::from(q) * i64::from(d.b);
    saturate_shift_i64(p, d.c)
}

/// Dyadic multiply for a 64-bit intermediate (used where the value being
/// rescaled is itself a wide product, e.g. the gamma stage of layernorm).
pub fn dyadic_apply_wide(p: i64, d: DyadicScale) -> (i32, bool) {
    let wide = i128::from(p) * i128::from(d.b);
    let v = if d.c == 0 {
        wide
    } else {
        (wide + (1i128 << (d.c - 1))) >> d.c
    };
    saturate_i128(v)
}

fn saturate_shift_i64(p: i64, c: u8) -> (i32, bool) {
    let v = if c == 0 { p } else { (p + (1i64 << (c - 1))) >> c };
    if v > i64::from(i32::MAX) {
        (i32::MAX, true)
    } else if v < i64::from(i32::MIN) {
        (i32::MIN, true)
    } else {
        (v as i32, false)
    }
}

fn saturate_i128(v: i128) -> (i32, bool) {
    if v > i128::from(i32::MAX) {
        (i32::MAX, true)
    } else if v < i128::from(i32::MIN) {
        (i32::MIN, true)
    } else {
        (v as i32, false)
    }
}

/// Saturating i32 add used by accumulators and residual joins.
pub fn sat_add_i32(a: i32, b: i32) -> (i32, bool) {
    let v = i64::from(a) + i64::from(b);
    if v > i64::from(i32::MAX) {
        (i32::MAX, true)
    } else if v < i64::from(i32::MIN) {
        (i32::MIN, true)
    } else {
        (v as i32, false)
    }
}

/// Saturation counters accumulated across a run, reported per layer so a
/// badly calibrated junction is visible instead of silently clipping.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SatCounters {
    /// Final int8 clamps in requantize.
    pub requant_clamps: u64,
    /// i32 saturations inside a dyadic multiply.
    pub dyadic_saturations: u64,
    /// i32 saturations in residual adds.
    pub add_saturations: u64,
    /// i32 saturations in matmul accumulators.
    pub acc_saturations: u64,
}

impl SatCounters {
    pub fn total(&self) -> u64 {
        self.requant_clamps + self.dyadic_saturations + self.add_saturations + self.acc_saturations
    }

    pub fn merge(&mut self, other: &SatCounters) {
        self.requant_clamps += other.requant_clamps;
        self.dyadic_saturations += other.dyadic_saturations;
        self.add_saturations += other.add_saturations;
        self.acc_saturations += other.acc_saturations;
    }
}

/// Row-major int8 matrix with its quantization scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QMat8 {
    rows: usize,
    cols: usize,
    data: Vec<i8>,
    pub scale: Scale,
}

/// Row-major int32 matrix with its quantization scale (accumulator domain).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QMat32 {
    rows: usize,
    cols: usize,
    data: Vec<i32>,
    pub scale: Scale,
}

macro_rules! mat_common {
    ($name:ident, $elem:ty) => {
        impl $name {
            pub fn new(rows: usize, cols: usize, data: Vec<$elem>, scale: Scale) -> Result<Self> {
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
                Ok(Self { rows, cols, data, scale })
            }

            pub fn zeros(rows: usize, cols: usize, scale: Scale) -> Result<Self> {
                Self::new(rows, cols, vec![0; rows * cols], scale)
            }

            pub fn from_fn(
                rows: usize,
                cols: usize,
                scale: Scale,
                mut f: impl FnMut(usize, usize) -> $elem,
            ) -> Result<Self> {
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for c in 0..cols {
                        data.push(f(r, c));
                    }
                }
                Self::new(rows, cols, data, scale)
            }

            pub fn rows(&self) -> usize {
                self.rows
            }

            pub fn cols(&self) -> usize {
                self.cols
            }

            pub fn get(&self, r: usize, c: usize) -> $elem {
                debug_assert!(r < self.rows && c < self.cols);
                self.data[r * self.cols + c]
            }

            pub fn set(&mut self, r: usize, c: usize, v: $elem) {
                debug_assert!(r < self.rows && c < self.cols);
                self.data[r * self.cols + c] = v;
            }

            pub fn row(&self, r: usize) -> &[$elem] {
                debug_assert!(r < self.rows);
                &self.data[r * self.cols..(r + 1) * self.cols]
            }

            pub fn data(&self) -> &[$elem] {
                &self.data
            }

            pub fn data_mut(&mut self) -> &mut [$elem] {
                &mut self.data
            }

            /// Transposed copy. The scale is unchanged.
            pub fn transposed(&self) -> Self {
                let mut out = Vec::with_capacity(self.data.len());
                for c in 0..self.cols {
                    for r in 0..self.rows {
                        out.push(self.data[r * self.cols + c]);
                    }
                }
                Self {
                    rows: self.cols,
                    cols: self.rows,
                    data: out,
                    scale: self.scale,
                }
            }
        }
    };
}

mat_common!(QMat8, i8);
mat_common!(QMat32, i32);

impl QMat8 {
    /// Widen to the i32 domain without changing the represented values.
    pub fn widen(&self) -> QMat32 {
        QMat32 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| i32::from(v)).collect(),
            scale: self.scale,
        }
    }

    /// Dequantize to real values.
    pub fn dequant(&self) -> Vec<f64> {
        let s = self.scale.value();
        self.data.iter().map(|&v| f64::from(v) * s).collect()
    }
}

impl QMat32 {
    /// Dequantize to real values.
    pub fn dequant(&self) -> Vec<f64> {
        let s = self.scale.value();
        self.data.iter().map(|&v| f64::from(v) * s).collect()
    }

    /// Clamp every entry into int8 range, keeping the scale.
    pub fn narrow_tracked(&self, sat: &mut SatCounters) -> QMat8 {
        let data = self
            .data
            .iter()
            .map(|&v| {
                let cl = v.clamp(-128, 127);
                if cl != v {
                    sat.requant_clamps += 1;
                }
                cl as i8
            })
            .collect();
        QMat8 {
            rows: self.rows,
            cols: self.cols,
            data,
            scale: self.scale,
        }
    }
}

/// Move an i32 tensor onto a new int8 scale with one dyadic multiply per
/// element: `q_out = clamp_i8(dyadic(q_in, fit(S_in / S_out, c)))`.
pub fn requantize(x: &QMat32, target: Scale, c: u8) -> Result<QMat8> {
    let mut sat = SatCounters::default();
    requantize_tracked(x, target, c, &mut sat)
}

pub fn requantize_tracked(
    x: &QMat32,
    target: Scale,
    c: u8,
    sat: &mut SatCounters,
) -> Result<QMat8> {
    let d = dyadic_fit(x.scale.value() / target.value(), c)?;
    let data = x
        .data
        .iter()
        .map(|&q| {
            let (v, overflowed) = dyadic_apply_flagged(q, d);
            if overflowed {
                sat.dyadic_saturations += 1;
            }
            let cl = v.clamp(-128, 127);
            if cl != v {
                sat.requant_clamps += 1;
            }
            cl as i8
        })
        .collect();
    QMat8::new(x.rows, x.cols, data, target)
}

/// Bring two i32 tensors onto a common scale and add them elementwise,
/// e.g. a residual join. Both inputs get their own dyadic multiplier; the
/// sum saturates in i32.
pub fn rescale_add(x: &QMat32, y: &QMat32, out_scale: Scale, c: u8) -> Result<QMat32> {
    let mut sat = SatCounters::default();
    rescale_add_tracked(x, y, out_scale, c, &mut sat)
}

pub fn rescale_add_tracked(
    x: &QMat32,
    y: &QMat32,
    out_scale: Scale,
    c: u8,
    sat: &mut SatCounters,
) -> Result<QMat32> {
    if x.rows != y.rows || x.cols != y.cols {
        return Err(Error::usage(format!(
            "rescale_add shape mismatch: {}x{} vs {}x{}",
            x.rows, x.cols, y.rows, y.cols
        )));
    }
    let dx = dyadic_fit(x.scale.value() / out_scale.value(), c)?;
    let dy = dyadic_fit(y.scale.value() / out_scale.value(), c)?;
    let data = x
        .data
        .iter()
        .zip(&y.data)
        .map(|(&a, &b)| {
            let (va, fa) = dyadic_apply_flagged(a, dx);
            let (vb, fb) = dyadic_apply_flagged(b, dy);
            if fa {
                sat.dyadic_saturations += 1;
            }
            if fb {
                sat.dyadic_saturations += 1;
            }
            let (s, fs) = sat_add_i32(va, vb);
            if fs {
                sat.add_saturations += 1;
            }
            s
        })
        .collect();
    QMat32::new(x.rows, x.cols, data, out_scale)
}
