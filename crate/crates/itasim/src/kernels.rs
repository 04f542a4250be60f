//! Integer-only nonlinear kernels.
//!
//! Every operation here works purely on integers once its constants are
//! derived: a quadratic-polynomial exponential with range reduction, softmax
//! built on it, an odd-symmetric error function, GELU, a Newton integer
//! square root, and layer normalization. Constants are derived once per
//! configuration from real-valued fit coefficients and scales; derivation is
//! the only place floating point appears.

use crate::error::{Error, Result};
use crate::quant::{
    dyadic_apply, dyadic_apply_wide, sat_add_i32, DyadicScale, SatCounters, Scale,
};
use crate::reference::Poly2Fit;

/// Worst-case Newton iteration count for [`i_sqrt`] over the full
/// nonnegative i32 domain, established by exhaustive scan (the maximum is 6,
/// first reached at n = 16_785_408; below 2^24 the maximum is only 5). The
/// cycle model budgets this many iterations per row.
pub const WORST_CASE_SQRT_ITERS: u32 = 6;

/// Real-valued input floor for the integer exponential: anything below this
/// short-circuits to zero (the shift count would exceed the datapath width
/// and e^x is far below one output LSB).
pub const EXP_UNDERFLOW_FLOOR: f64 = -30.0;

/// Fraction bits used to encode layernorm gamma multipliers.
pub const GAMMA_SHIFT: u8 = 14;

/// Fraction bits used to encode layernorm beta offsets.
pub const BETA_SHIFT: u8 = 10;

fn floor_to_i32(x: f64, what: &str) -> Result<i32> {
    let f = x.floor();
    if f >= i32::MIN as f64 && f <= i32::MAX as f64 {
        Ok(f as i32)
    } else {
        Err(Error::config(format!("{what} = {f} does not fit in i32")))
    }
}

fn round_to_i32(x: f64, what: &str) -> Result<i32> {
    let r = x.round();
    if r >= i32::MIN as f64 && r <= i32::MAX as f64 {
        Ok(r as i32)
    } else {
        Err(Error::config(format!("{what} = {r} does not fit in i32")))
    }
}

// ---------------------------------------------------------------------------
// Generic quadratic
// ---------------------------------------------------------------------------

/// Real coefficients of `a (x + b)^2 + c` together with the interval the
/// approximation is valid on.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PolyCoeffs {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub lo: f64,
    pub hi: f64,
}

impl PolyCoeffs {
    pub fn new(a: f64, b: f64, c: f64, lo: f64, hi: f64) -> Result<Self> {
        if a == 0.0 || !a.is_finite() || !b.is_finite() || !c.is_finite() {
            return Err(Error::config(format!(
                "quadratic coefficients must be finite with a != 0, got a={a} b={b} c={c}"
            )));
        }
        if !(lo < hi) {
            return Err(Error::config(format!(
                "quadratic validity interval [{lo}, {hi}] is degenerate"
            )));
        }
        Ok(PolyCoeffs { a, b, c, lo, hi })
    }

    pub fn from_fit(fit: &Poly2Fit, lo: f64, hi: f64) -> Result<Self> {
        PolyCoeffs::new(fit.a, fit.b, fit.c, lo, hi)
    }
}

/// Evaluate the quadratic in integer arithmetic:
/// `q_out = (q + q_b)^2 + q_c` with `q_b = floor(b/S)`, `q_c = floor(c/(a S^2))`
/// and output scale `a S^2`.
///
/// Requires a positive leading coefficient (the output scale must be
/// positive); callers approximating a concave function fold the sign
/// themselves, as the error-function kernel does.
pub fn i_poly2(q: i32, s: Scale, k: &PolyCoeffs) -> Result<(i32, Scale)> {
    if k.a < 0.0 {
        return Err(Error::usage(
            "i_poly2 needs a positive leading coefficient; fold the sign at the call site",
        ));
    }
    let sv = s.value();
    let x = f64::from(q) * sv;
    // A hair of slack so values that land on the boundary after float
    // rounding are not rejected.
    let eps = 1e-9 * (k.hi - k.lo);
    if x < k.lo - eps || x > k.hi + eps {
        return Err(Error::usage(format!(
            "i_poly2 input {x} outside validity interval [{}, {}]",
            k.lo, k.hi
        )));
    }
    let s_out = Scale::new(k.a * sv * sv)?;
    let q_b = floor_to_i32(k.b / sv, "i_poly2 q_b")?;
    let q_c = floor_to_i32(k.c / (k.a * sv * sv), "i_poly2 q_c")?;
    let t = i64::from(q) + i64::from(q_b);
    let sq = t * t;
    if sq > i64::from(i32::MAX) {
        return Err(Error::KernelOverflow {
            op: "i_poly2 square",
            input: i64::from(q),
        });
    }
    let out = sq + i64::from(q_c);
    if out > i64::from(i32::MAX) || out < i64::from(i32::MIN) {
        return Err(Error::KernelOverflow {
            op: "i_poly2 sum",
            input: i64::from(q),
        });
    }
    Ok((out as i32, s_out))
}

// ---------------------------------------------------------------------------
// Exponential
// ---------------------------------------------------------------------------

/// Integer constants for the exponential kernel at a fixed input scale.
///
/// The input is reduced as e^x = e^r * 2^-z with r in (-ln2, 0], the
/// quadratic evaluates e^r, and the shift applies the power of two. The
/// remainder is consumed at the input scale itself (the fit scale equals the
/// input scale; the contract leaves the conversion free and identity is the
/// minimal choice). A fourth constant floor(-1/q3) appears in the original
/// constant list but is -1 for every legal q3 and has no datapath role, so
/// it is not stored.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ExpConsts {
    q1: i32,
    q2: i32,
    q3: i32,
    /// Inputs strictly below this short-circuit to zero.
    q_floor: i64,
    s_e: Scale,
    s_out: Scale,
    /// Max absolute error of the underlying fit, carried for test budgets.
    fit_max_abs_err: f64,
}

impl ExpConsts {
    pub fn new(fit: &Poly2Fit, s_e: Scale) -> Result<Self> {
        if fit.a <= 0.0 {
            return Err(Error::config(format!(
                "exponential fit must open upward, got a = {}",
                fit.a
            )));
        }
        let sv = s_e.value();
        let q3 = floor_to_i32(std::f64::consts::LN_2 / sv, "exp q3")?;
        if q3 < 1 {
            return Err(Error::config(format!(
                "input scale {sv} is too coarse for exponential range reduction (q3 = {q3})"
            )));
        }
        let q1 = floor_to_i32(fit.b / sv, "exp q1")?;
        let q2 = floor_to_i32(fit.c / (fit.a * sv * sv), "exp q2")?;
        let s_out = Scale::new(fit.a * sv * sv)?;
        // Worst-case quadratic argument is the residue range plus q1.
        let worst = i64::from(q3) + i64::from(q1).abs();
        if worst * worst + i64::from(q2).abs() > i64::from(i32::MAX) {
            return Err(Error::config(format!(
                "exponential constants overflow i32 at scale {sv} (worst square {})",
                worst * worst
            )));
        }
        if i64::from(q1) * i64::from(q1) + i64::from(q2) < 1 {
            return Err(Error::config(format!(
                "exponential polynomial at zero is below one LSB at scale {sv}"
            )));
        }
        let q_floor = (EXP_UNDERFLOW_FLOOR / sv).ceil() as i64;
        Ok(ExpConsts {
            q1,
            q2,
            q3,
            q_floor,
            s_e,
            s_out,
            fit_max_abs_err: fit.max_abs_err,
        })
    }

    pub fn q1(&self) -> i32 {
        self.q1
    }

    pub fn q2(&self) -> i32 {
        self.q2
    }

    pub fn q3(&self) -> i32 {
        self.q3
    }

    pub fn s_e(&self) -> Scale {
        self.s_e
    }

    pub fn s_out(&self) -> Scale {
        self.s_out
    }

    pub fn fit_max_abs_err(&self) -> f64 {
        self.fit_max_abs_err
    }
}

/// Integer exponential for nonpositive inputs: `q_out * S_out ~= e^(q * S_e)`.
///
/// Positive inputs are a usage error (softmax callers subtract the row max
/// first). Inputs below the underflow floor return zero.
pub fn i_exp(q: i32, k: &ExpConsts) -> Result<i32> {
    if q > 0 {
        return Err(Error::usage(format!(
            "i_exp input {q} is positive; subtract the maximum first"
        )));
    }
    if i64::from(q) < k.q_floor {
        return Ok(0);
    }
    let neg = -i64::from(q);
    let z = neg / i64::from(k.q3);
    let q_p = (i64::from(q) + z * i64::from(k.q3)) as i32;
    debug_assert!(q_p > -k.q3 && q_p <= 0);
    let t = i64::from(q_p) + i64::from(k.q1);
    // Cannot overflow: the constructor bounded (q3 + |q1|)^2 + |q2|.
    let q_l = (t * t + i64::from(k.q2)) as i32;
    debug_assert!(q_l >= 0);
    if z >= 31 {
        // The value is below one LSB; also keeps the shift amount legal.
        Ok(0)
    } else {
        Ok(q_l >> z)
    }
}

/// Integer softmax over one row of logits already scaled for `k`.
///
/// Output element i is `floor(e_i * R / sum_j e_j)` with `R = round(1/out_scale)`,
/// so outputs are nonnegative and their dequantized sum is 1 up to one
/// truncation per element. The denominator cannot be zero: the maximum
/// element contributes the polynomial's value at zero, which the constants
/// constructor guarantees is at least one.
pub fn i_softmax(row: &[i32], k: &ExpConsts, out_scale: Scale) -> Result<Vec<i32>> {
    if row.is_empty() {
        return Err(Error::usage("i_softmax on an empty row"));
    }
    let r = round_to_i32(1.0 / out_scale.value(), "softmax reciprocal R")?;
    if r < 1 {
        return Err(Error::usage(format!(
            "softmax output scale {} is coarser than one",
            out_scale.value()
        )));
    }
    let m = *row.iter().max().expect("nonempty");
    let mut exps = Vec::with_capacity(row.len());
    let mut sum: i64 = 0;
    for &q in row {
        // The difference can underflow i32 for extreme logits; anything that
        // far down is zero after the underflow floor anyway.
        let d = (i64::from(q) - i64::from(m)).max(i64::from(i32::MIN)) as i32;
        let e = i_exp(d, k)?;
        sum += i64::from(e);
        exps.push(e);
    }
    debug_assert!(sum > 0);
    Ok(exps
        .into_iter()
        .map(|e| ((i64::from(e) * i64::from(r)) / sum) as i32)
        .collect())
}

/// Softmax with int8 outputs. The reciprocal must fit the int8 range
/// (out_scale >= 1/127 or so); outputs are clamped defensively.
pub fn i_softmax_i8(row: &[i32], k: &ExpConsts, out_scale: Scale) -> Result<Vec<i8>> {
    let r = round_to_i32(1.0 / out_scale.value(), "softmax reciprocal R")?;
    if r > 127 {
        return Err(Error::usage(format!(
            "softmax int8 output cannot represent R = {r} > 127"
        )));
    }
    let wide = i_softmax(row, k, out_scale)?;
    Ok(wide.into_iter().map(|v| v.clamp(-128, 127) as i8).collect())
}

// ---------------------------------------------------------------------------
// Error function and GELU
// ---------------------------------------------------------------------------

/// Integer constants for the error-function and GELU kernels at a fixed
/// input scale.
///
/// The 1/sqrt(2) in erf(x/sqrt(2)) is folded into the scale: constants are
/// derived against S' = S/sqrt(2), so the kernel consumes the GELU input q
/// directly and no runtime multiply by an irrational is needed. The erf fit
/// opens downward (a < 0); the sign is folded so the output scale stays
/// positive: q_out = sgn(q) * (q7 - (q_clip + q6)^2) with q6 = floor(b/S'),
/// q7 = floor(c / (|a| S'^2)).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GeluConsts {
    /// Clip bound floor(-b/S'): erf inputs beyond the fit vertex hold the
    /// vertex value.
    clip: i32,
    q6: i32,
    q7: i32,
    q8: i32,
    s: Scale,
    s_erf: Scale,
    s_out: Scale,
    fit_max_abs_err: f64,
    /// Fit saturation value c (the quadratic's vertex height); the erf
    /// approximation tends to this, not to 1, for large arguments.
    fit_c: f64,
}

impl GeluConsts {
    pub fn new(fit: &Poly2Fit, s: Scale) -> Result<Self> {
        if !(fit.a < 0.0 && fit.b < 0.0 && fit.c > 0.0) {
            return Err(Error::config(format!(
                "error-function fit shape unexpected: a={} b={} c={}",
                fit.a, fit.b, fit.c
            )));
        }
        let s_prime = s.value() / std::f64::consts::SQRT_2;
        let a_mag = -fit.a;
        let clip = floor_to_i32(-fit.b / s_prime, "erf clip bound")?;
        if clip < 1 {
            return Err(Error::config(format!(
                "input scale {} is too coarse for the error function (clip bound {clip})",
                s.value()
            )));
        }
        let q6 = floor_to_i32(fit.b / s_prime, "erf q6")?;
        let s_erf = Scale::new(a_mag * s_prime * s_prime)?;
        let q7 = floor_to_i32(fit.c / s_erf.value(), "erf q7")?;
        let q8 = floor_to_i32(1.0 / s_erf.value(), "gelu q8")?;
        if q8 < 1 {
            return Err(Error::config(format!(
                "gelu reciprocal constant is zero at scale {} (S_erf = {})",
                s.value(),
                s_erf.value()
            )));
        }
        // Worst quadratic argument magnitude is |q6| (clip + q6 is -1 or 0).
        let worst = i64::from(q6).abs();
        if worst * worst + i64::from(q7).abs() > i64::from(i32::MAX) {
            return Err(Error::config(format!(
                "error-function constants overflow i32 at scale {}",
                s.value()
            )));
        }
        let s_out = Scale::new(s.value() * s_erf.value() / 2.0)?;
        Ok(GeluConsts {
            clip,
            q6,
            q7,
            q8,
            s,
            s_erf,
            s_out,
            fit_max_abs_err: fit.max_abs_err,
            fit_c: fit.c,
        })
    }

    pub fn clip_bound(&self) -> i32 {
        self.clip
    }

    pub fn q6(&self) -> i32 {
        self.q6
    }

    pub fn q7(&self) -> i32 {
        self.q7
    }

    pub fn q8(&self) -> i32 {
        self.q8
    }

    pub fn s(&self) -> Scale {
        self.s
    }

    pub fn s_erf(&self) -> Scale {
        self.s_erf
    }

    pub fn s_out(&self) -> Scale {
        self.s_out
    }

    pub fn fit_max_abs_err(&self) -> f64 {
        self.fit_max_abs_err
    }

    pub fn fit_c(&self) -> f64 {
        self.fit_c
    }
}

/// Integer error function: `q_out * S_erf ~= erf(q * S / sqrt(2))`.
///
/// Exactly odd by construction; inputs beyond the fit vertex are clipped to
/// it, so the result saturates at the fit's vertex height.
pub fn i_erf(q: i32, k: &GeluConsts) -> i32 {
    let sgn = i64::from(q).signum();
    let q_clip = i64::from(q).abs().min(i64::from(k.clip));
    let t = q_clip + i64::from(k.q6);
    // In range by the constructor's worst-case bound.
    let core = i64::from(k.q7) - t * t;
    (sgn * core) as i32
}

/// Integer GELU: `q_out * S_out ~= x * (1 + erf(x / sqrt(2))) / 2` for
/// `x = q * S`. The product runs in 64 bits and must land back in i32.
pub fn i_gelu(q: i32, k: &GeluConsts) -> Result<i32> {
    let q_erf = i_erf(q, k);
    let prod = i64::from(q) * (i64::from(q_erf) + i64::from(k.q8));
    if prod > i64::from(i32::MAX) || prod < i64::from(i32::MIN) {
        return Err(Error::KernelOverflow {
            op: "i_gelu product",
            input: i64::from(q),
        });
    }
    Ok(prod as i32)
}

// ---------------------------------------------------------------------------
// Integer square root
// ---------------------------------------------------------------------------

/// Exact floor(sqrt(n)) by Newton iteration from above, plus the number of
/// iterations taken (the cycle model charges one cycle per iteration).
///
/// Start: x0 = 2^ceil(bits(n)/2), which is always >= sqrt(n). Iterate
/// x' = (x + n/x) >> 1 until x' >= x; the answer is the last x, adjusted
/// down by one if its square still exceeds n. Zero input returns zero with
/// zero iterations (a dedicated bypass, matching the hardware).
pub fn i_sqrt(n: i32) -> Result<(i32, u32)> {
    if n < 0 {
        return Err(Error::usage(format!("i_sqrt of negative input {n}")));
    }
    if n == 0 {
        return Ok((0, 0));
    }
    let n64 = i64::from(n);
    let bits = 32 - (n as u32).leading_zeros();
    let mut x = 1i64 << ((bits + 1) / 2);
    let mut iters = 0u32;
    loop {
        let next = (x + n64 / x) >> 1;
        iters += 1;
        if next >= x {
            break;
        }
        x = next;
    }
    if x * x > n64 {
        x -= 1;
    }
    Ok((x as i32, iters))
}

// ---------------------------------------------------------------------------
// Layer normalization
// ---------------------------------------------------------------------------

/// Integer layernorm constants: row width, the output scale's reciprocal,
/// and per-feature affine parameters encoded as (integer, dyadic) pairs.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LnConsts {
    d: usize,
    /// Per-feature gamma: value = .0 * 2^-GAMMA_SHIFT, applied as a wide
    /// dyadic multiply of the normalized value.
    gamma: Vec<(i32, DyadicScale)>,
    /// Per-feature beta in output-scale units: value = .0 * 2^-BETA_SHIFT,
    /// resolved to an integer addend by dyadic_apply.
    beta: Vec<(i32, DyadicScale)>,
    out_scale: Scale,
    r: i32,
}

impl LnConsts {
    pub fn new(gamma: &[f64], beta: &[f64], out_scale: Scale) -> Result<Self> {
        let d = gamma.len();
        if d == 0 {
            return Err(Error::config("layernorm width must be at least 1"));
        }
        if beta.len() != d {
            return Err(Error::config(format!(
                "layernorm gamma/beta length mismatch: {d} vs {}",
                beta.len()
            )));
        }
        let r = round_to_i32(1.0 / out_scale.value(), "layernorm reciprocal R")?;
        if r < 1 {
            return Err(Error::config(format!(
                "layernorm output scale {} is coarser than one",
                out_scale.value()
            )));
        }
        let gshift = DyadicScale::new(1, GAMMA_SHIFT)?;
        let bshift = DyadicScale::new(1, BETA_SHIFT)?;
        let gamma = gamma
            .iter()
            .map(|&g| {
                Ok((
                    round_to_i32(g * f64::from(1u32 << GAMMA_SHIFT), "layernorm gamma")?,
                    gshift,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let beta = beta
            .iter()
            .map(|&b| {
                Ok((
                    round_to_i32(
                        b / out_scale.value() * f64::from(1u32 << BETA_SHIFT),
                        "layernorm beta",
                    )?,
                    bshift,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LnConsts {
            d,
            gamma,
            beta,
            out_scale,
            r,
        })
    }

    pub fn width(&self) -> usize {
        self.d
    }

    pub fn out_scale(&self) -> Scale {
        self.out_scale
    }
}

/// Integer layernorm over one row, also reporting the square-root iteration
/// count for the cycle model and recording saturations.
///
/// mu = floor(mean), var = floor(mean of squared deviations) with 64-bit
/// accumulation (saturating; a variance beyond i32 clamps to i32::MAX before
/// the root). normalized = (q - mu) * R / max(std, 1), truncating, or 0 when
/// the row is constant. Normalization is scale-free: the input scale cancels
/// between deviation and standard deviation, so none is taken.
pub fn i_layernorm_traced(
    row: &[i32],
    k: &LnConsts,
    sat: &mut SatCounters,
) -> Result<(Vec<i32>, u32)> {
    if row.len() != k.d {
        return Err(Error::usage(format!(
            "layernorm row length {} does not match width {}",
            row.len(),
            k.d
        )));
    }
    let d = k.d as i64;
    let sum: i64 = row.iter().map(|&q| i64::from(q)).sum();
    let mu = sum.div_euclid(d);
    let mut acc: i64 = 0;
    for &q in row {
        let dev = i64::from(q) - mu;
        acc = acc.saturating_add(dev.saturating_mul(dev));
    }
    let var = (acc / d).min(i64::from(i32::MAX)) as i32;
    let (std, iters) = i_sqrt(var)?;
    let mut out = Vec::with_capacity(k.d);
    for (i, &q) in row.iter().enumerate() {
        let normalized = if std > 0 {
            (i64::from(q) - mu) * i64::from(k.r) / i64::from(std)
        } else {
            0
        };
        let (g_q, g_dy) = k.gamma[i];
        let (scaled, overflow) = dyadic_apply_wide(normalized * i64::from(g_q), g_dy);
        if overflow {
            sat.dyadic_saturations += 1;
        }
        let (b_q, b_dy) = k.beta[i];
        let addend = dyadic_apply(b_q, b_dy);
        let (v, sat_add) = sat_add_i32(scaled, addend);
        if sat_add {
            sat.add_saturations += 1;
        }
        out.push(v);
    }
    Ok((out, iters))
}

/// Layernorm without trace plumbing.
pub fn i_layernorm(row: &[i32], k: &LnConsts) -> Result<Vec<i32>> {
    let mut sat = SatCounters::default();
    i_layernorm_traced(row, k, &mut sat).map(|(v, _)| v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference;
    use proptest::prelude::*;

    fn exp_fit() -> Poly2Fit {
        reference::fit_exp_segment().unwrap()
    }

    fn erf_fit() -> Poly2Fit {
        reference::fit_erf_segment().unwrap()
    }

    fn scale(v: f64) -> Scale {
        Scale::new(v).unwrap()
    }

    // -- i_poly2 ------------------------------------------------------------

    #[test]
    fn poly2_square_examples() {
        let k = PolyCoeffs::new(1.0, 0.0, 0.0, -10.0, 10.0).unwrap();
        let (q, s) = i_poly2(3, scale(1.0), &k).unwrap();
        assert_eq!(q, 9);
        assert_eq!(s.value(), 1.0);

        let k = PolyCoeffs::new(1.0, 1.0, 0.0, -10.0, 10.0).unwrap();
        let (q, _) = i_poly2(-1, scale(1.0), &k).unwrap();
        assert_eq!(q, 0);
    }

    #[test]
    fn poly2_exp_fit_point() {
        let fit = exp_fit();
        let k = PolyCoeffs::from_fit(&fit, -std::f64::consts::LN_2, 0.0).unwrap();
        let s = scale(0.001);
        let q = -300; // q * S = -0.3
        let (q_out, s_out) = i_poly2(q, s, &k).unwrap();
        let deq = f64::from(q_out) * s_out.value();
        let want = (-0.3f64).exp();
        // Constant flooring costs up to the contract's slack term; two input
        // LSBs bound it comfortably at this scale.
        let tol = fit.max_abs_err + 2.0 * s.value();
        assert!((deq - want).abs() <= tol, "deq {deq} want {want} tol {tol}");
    }

    #[test]
    fn poly2_rejects_bad_usage() {
        let k = PolyCoeffs::new(1.0, 0.0, 0.0, -1.0, 1.0).unwrap();
        // Outside validity interval.
        assert!(i_poly2(5, scale(1.0), &k).is_err());
        // Negative leading coefficient.
        let neg = PolyCoeffs::new(-1.0, 0.0, 0.0, -1.0, 1.0).unwrap();
        assert!(i_poly2(0, scale(1.0), &neg).is_err());
        // Square overflow.
        let wide = PolyCoeffs::new(1.0, 0.0, 0.0, -1e9, 1e9).unwrap();
        assert!(matches!(
            i_poly2(100_000, scale(1.0), &wide),
            Err(Error::KernelOverflow { .. })
        ));
    }

    #[test]
    fn poly2_constructor_validation() {
        assert!(PolyCoeffs::new(0.0, 1.0, 1.0, 0.0, 1.0).is_err());
        assert!(PolyCoeffs::new(1.0, 1.0, 1.0, 1.0, 1.0).is_err());
        assert!(PolyCoeffs::new(f64::NAN, 1.0, 1.0, 0.0, 1.0).is_err());
    }

    proptest! {
        /// The contract's quantization-slack bound holds for random
        /// coefficients, scales, and in-interval inputs.
        #[test]
        fn poly2_slack_bound(
            a in 0.1f64..3.0,
            b in -2.0f64..2.0,
            c in -1.0f64..1.0,
            s in 0.001f64..0.1,
            x in -3.0f64..3.0,
        ) {
            let k = PolyCoeffs::new(a, b, c, -3.0, 3.0).unwrap();
            let sc = scale(s);
            let q = (x / s) as i32;
            let xq = f64::from(q) * s;
            let (q_out, s_out) = i_poly2(q, sc, &k).unwrap();
            let exact = a * (xq + b) * (xq + b) + c;
            let slack = 2.0 * a * s * (xq.abs() + b.abs()) + s_out.value();
            let err = (f64::from(q_out) * s_out.value() - exact).abs();
            prop_assert!(err <= slack + 1e-12, "err {err} slack {slack}");
        }
    }

    // -- i_exp --------------------------------------------------------------

    #[test]
    fn exp_at_zero_is_near_one() {
        let k = ExpConsts::new(&exp_fit(), scale(0.0025)).unwrap();
        let deq = f64::from(i_exp(0, &k).unwrap()) * k.s_out().value();
        assert!((0.98..=1.02).contains(&deq), "deq {deq}");
    }

    #[test]
    fn exp_at_minus_ln2_halves() {
        // S_e chosen so q3 = 512 exactly and q = -512 lands on -ln2.
        let s_e = scale(std::f64::consts::LN_2 / 512.0);
        let k = ExpConsts::new(&exp_fit(), s_e).unwrap();
        assert_eq!(k.q3(), 512);
        let deq = f64::from(i_exp(-512, &k).unwrap()) * k.s_out().value();
        assert!((0.48..=0.52).contains(&deq), "deq {deq}");
    }

    #[test]
    fn exp_deep_negative_underflows() {
        let k = ExpConsts::new(&exp_fit(), scale(0.0025)).unwrap();
        // q * S_e = -20.
        let deq = f64::from(i_exp(-8000, &k).unwrap()) * k.s_out().value();
        assert!(deq < 1e-5, "deq {deq}");
        // Below the -30 floor: exactly zero.
        assert_eq!(i_exp(-16000, &k).unwrap(), 0);
        assert_eq!(i_exp(i32::MIN, &k).unwrap(), 0);
    }

    #[test]
    fn exp_rejects_positive_input() {
        let k = ExpConsts::new(&exp_fit(), scale(0.0025)).unwrap();
        assert!(matches!(i_exp(1, &k), Err(Error::Usage(_))));
    }

    #[test]
    fn exp_consts_reject_coarse_scale() {
        // ln2 / S < 1 makes range reduction impossible.
        assert!(ExpConsts::new(&exp_fit(), scale(1.0)).is_err());
    }

    #[test]
    fn exp_matches_generic_poly_on_residue() {
        let fit = exp_fit();
        let s_e = scale(0.0025);
        let k = ExpConsts::new(&fit, s_e).unwrap();
        let pc = PolyCoeffs::from_fit(&fit, -std::f64::consts::LN_2, 0.0).unwrap();
        // Residue inputs (z = 0) must agree exactly with the generic kernel.
        for q in [-250i32, -100, -1, 0] {
            let (want, _) = i_poly2(q, s_e, &pc).unwrap();
            assert_eq!(i_exp(q, &k).unwrap(), want);
        }
    }

    proptest! {
        /// Dequantized i_exp tracks e^x within fit error plus two input LSBs
        /// across the whole usable range.
        #[test]
        fn exp_tracks_oracle(q in -20_000i32..=0) {
            let fit = exp_fit();
            let s_e = scale(0.0025);
            let k = ExpConsts::new(&fit, s_e).unwrap();
            let deq = f64::from(i_exp(q, &k).unwrap()) * k.s_out().value();
            let want = (f64::from(q) * s_e.value()).exp();
            // The poly error halves with each shift, but truncation adds one
            // output LSB; fit error + 2 LSB at the residue scale dominates.
            let tol = fit.max_abs_err + 2.0 * s_e.value() + 2.0 * k.s_out().value();
            prop_assert!((deq - want).abs() <= tol, "q {q} deq {deq} want {want}");
        }

        /// Monotone within two output LSBs.
        #[test]
        fn exp_monotone(q2 in -20_000i32..=0, delta in 0i32..5_000) {
            let k = ExpConsts::new(&exp_fit(), scale(0.0025)).unwrap();
            let q1 = q2.saturating_sub(delta);
            let lo = i_exp(q1, &k).unwrap();
            let hi = i_exp(q2, &k).unwrap();
            prop_assert!(lo <= hi + 2, "q1 {q1} -> {lo}, q2 {q2} -> {hi}");
        }

        /// Shifting the input down by q3 exactly halves the output, within
        /// one output LSB.
        #[test]
        fn exp_shift_invariance(q in -8_000i32..=0) {
            let k = ExpConsts::new(&exp_fit(), scale(0.0025)).unwrap();
            let base = i_exp(q, &k).unwrap();
            let shifted = i_exp(q - k.q3(), &k).unwrap();
            let diff = (f64::from(shifted) - f64::from(base) / 2.0).abs();
            prop_assert!(diff <= 1.0, "q {q} base {base} shifted {shifted}");
        }
    }

    // -- i_softmax ----------------------------------------------------------

    #[test]
    fn softmax_equal_row_is_uniform() {
        let k = ExpConsts::new(&exp_fit(), scale(0.0025)).unwrap();
        let out = i_softmax(&[37, 37, 37, 37], &k, scale(1.0 / 256.0)).unwrap();
        assert_eq!(out, vec![64, 64, 64, 64]);
    }

    #[test]
    fn softmax_limiting_case() {
        let k = ExpConsts::new(&exp_fit(), scale(0.0025)).unwrap();
        let out_scale = scale(1.0 / 256.0);
        let out = i_softmax(&[0, -1_000_000, -1_000_000], &k, out_scale).unwrap();
        let deq: Vec<f64> = out.iter().map(|&v| f64::from(v) / 256.0).collect();
        assert!(deq[0] >= 0.99, "max element got {}", deq[0]);
        assert_eq!(&out[1..], &[0, 0]);
    }

    #[test]
    fn softmax_empty_row_is_usage_error() {
        let k = ExpConsts::new(&exp_fit(), scale(0.0025)).unwrap();
        assert!(matches!(
            i_softmax(&[], &k, scale(1.0 / 256.0)),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn softmax_shift_invariance_is_exact() {
        let k = ExpConsts::new(&exp_fit(), scale(0.0025)).unwrap();
        let row = [100, -250, 3, 77, -1900, 0];
        let base = i_softmax(&row, &k, scale(1.0 / 256.0)).unwrap();
        for offset in [-5000, -1, 1, 999] {
            let shifted: Vec<i32> = row.iter().map(|&v| v + offset).collect();
            let got = i_softmax(&shifted, &k, scale(1.0 / 256.0)).unwrap();
            assert_eq!(got, base, "offset {offset}");
        }
    }

    #[test]
    fn softmax_matches_float_oracle_on_random_rows() {
        let fit = exp_fit();
        let s_e = scale(0.0025);
        let k = ExpConsts::new(&fit, s_e).unwrap();
        let out_scale = scale(1.0 / 256.0);
        let tol = 2.0 / 256.0 + 4.0 * fit.max_abs_err;
        // Simple deterministic LCG logits in roughly [-8/S_e, 8/S_e].
        let mut state = 0x2545F4914F6CDD1Du64;
        let mut rng = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as i32 % 16000 - 8000
        };
        let mut tie_flips = 0;
        for _case in 0..64 {
            let row: Vec<i32> = (0..256).map(|_| rng()).collect();
            let ints = i_softmax(&row, &k, out_scale).unwrap();
            let floats = reference::softmax_rows(
                &reference::FMat::new(
                    1,
                    256,
                    row.iter().map(|&q| f64::from(q) * s_e.value()).collect(),
                )
                .unwrap(),
            );
            let int_argmax = ints
                .iter()
                .enumerate()
                .max_by_key(|(_, &v)| v)
                .map(|(i, _)| i)
                .unwrap();
            let f_row = floats.row(0);
            let f_argmax = f_row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            if int_argmax != f_argmax {
                // A genuine flip is only acceptable when quantization tied
                // the two candidates.
                assert_eq!(
                    ints[int_argmax], ints[f_argmax],
                    "argmax flip without an integer tie"
                );
                tie_flips += 1;
            }
            for (i, &qv) in ints.iter().enumerate() {
                let p = f64::from(qv) * out_scale.value();
                assert!(
                    (p - f_row[i]).abs() <= tol,
                    "element {i}: int {p} float {}",
                    f_row[i]
                );
            }
        }
        assert!(tie_flips <= 2, "too many argmax flips: {tie_flips}");
    }

    proptest! {
        /// Dequantized outputs are nonnegative and sum to one within one
        /// truncation per element plus the reciprocal rounding.
        #[test]
        fn softmax_normalization(
            row in proptest::collection::vec(-40_000i32..=40_000, 1..64),
        ) {
            let k = ExpConsts::new(&exp_fit(), scale(0.0025)).unwrap();
            let out_scale = scale(1.0 / 256.0);
            let out = i_softmax(&row, &k, out_scale).unwrap();
            prop_assert!(out.iter().all(|&v| v >= 0));
            let sum: f64 = out.iter().map(|&v| f64::from(v) * out_scale.value()).sum();
            let lo = 1.0 - row.len() as f64 * out_scale.value() - 0.01;
            prop_assert!(sum >= lo && sum <= 1.01, "sum {sum} lo {lo}");
        }
    }

    #[test]
    fn softmax_i8_variant_clamps_and_checks() {
        let k = ExpConsts::new(&exp_fit(), scale(0.0025)).unwrap();
        let out = i_softmax_i8(&[5, 5], &k, scale(1.0 / 127.0)).unwrap();
        // Each probability 0.5 -> 63 or 64 at R = 127.
        assert!(out.iter().all(|&v| (63..=64).contains(&i32::from(v))));
        // R too large for int8.
        assert!(i_softmax_i8(&[5, 5], &k, scale(1.0 / 256.0)).is_err());
    }

    // -- i_erf / i_gelu -----------------------------------------------------

    #[test]
    fn erf_zero_is_zero() {
        let k = GeluConsts::new(&erf_fit(), scale(1.0 / 64.0)).unwrap();
        assert_eq!(i_erf(0, &k), 0);
    }

    #[test]
    fn erf_saturates_at_fit_vertex() {
        let fit = erf_fit();
        let k = GeluConsts::new(&fit, scale(1.0 / 64.0)).unwrap();
        let s_prime = k.s().value() / std::f64::consts::SQRT_2;
        let at_clip = f64::from(i_erf(k.clip_bound(), &k)) * k.s_erf().value();
        let want = reference::erf(-fit.b);
        // Within fit error plus the sub-LSB clip offset.
        let tol = fit.max_abs_err + 2.0 * k.s_erf().value() + s_prime;
        assert!((at_clip - want).abs() <= tol, "{at_clip} vs {want}");
        // Far beyond the clip the value is identical.
        assert_eq!(i_erf(k.clip_bound(), &k), i_erf(i32::MAX, &k));
    }

    #[test]
    fn erf_tracks_oracle_inside_interval() {
        let fit = erf_fit();
        let s = scale(1.0 / 64.0);
        let k = GeluConsts::new(&fit, s).unwrap();
        let s_prime = s.value() / std::f64::consts::SQRT_2;
        for q in -k.clip_bound()..=k.clip_bound() {
            let deq = f64::from(i_erf(q, &k)) * k.s_erf().value();
            let want = reference::erf(f64::from(q) * s_prime);
            let tol = fit.max_abs_err + 2.0 * k.s_erf().value() + 2.0 * s_prime;
            assert!((deq - want).abs() <= tol, "q {q}: {deq} vs {want}");
        }
    }

    proptest! {
        /// Odd symmetry holds exactly over the full i32 range.
        #[test]
        fn erf_is_exactly_odd(q in -(i32::MAX)..=i32::MAX) {
            let k = GeluConsts::new(&erf_fit(), scale(1.0 / 64.0)).unwrap();
            prop_assert_eq!(i_erf(-q, &k), -i_erf(q, &k));
        }

        /// GELU output has the sign of x (or is zero) and never exceeds x
        /// for nonnegative x by more than two output LSBs.
        #[test]
        fn gelu_sign_and_bound(q in -127i32..=127) {
            let k = GeluConsts::new(&erf_fit(), scale(2.0 / 127.0)).unwrap();
            let out = i_gelu(q, &k).unwrap();
            let x = f64::from(q) * k.s().value();
            let deq = f64::from(out) * k.s_out().value();
            if q > 0 {
                prop_assert!(deq >= -2.0 * k.s_out().value());
                prop_assert!(deq <= x + 2.0 * k.s_out().value(), "deq {deq} x {x}");
            } else if q < 0 {
                prop_assert!(deq <= 2.0 * k.s_out().value());
            } else {
                prop_assert_eq!(out, 0);
            }
        }
    }

    #[test]
    fn gelu_zero_is_zero() {
        let k = GeluConsts::new(&erf_fit(), scale(1.0 / 64.0)).unwrap();
        assert_eq!(i_gelu(0, &k).unwrap(), 0);
    }

    #[test]
    fn gelu_at_one_matches_oracle() {
        let fit = erf_fit();
        let k = GeluConsts::new(&fit, scale(1.0 / 64.0)).unwrap();
        let deq = f64::from(i_gelu(64, &k).unwrap()) * k.s_out().value();
        let tol = fit.max_abs_err + 3.0 * k.s().value();
        assert!((deq - 0.841345).abs() <= tol, "deq {deq}");
    }

    #[test]
    fn gelu_beyond_clip_follows_saturated_asymptote() {
        // Past the erf clip the kernel computes x * (1 + c_fit) / 2: the
        // identity asymptote scaled by the fit's saturation height, which
        // sits a hair below 1. Assert tightly against that, and loosely
        // (within 2%) against the identity itself.
        let fit = erf_fit();
        let k = GeluConsts::new(&erf_fit(), scale(1.0 / 16.0)).unwrap();
        let q = 96; // x = 6, well beyond the clip bound
        let x = 6.0;
        let deq = f64::from(i_gelu(q, &k).unwrap()) * k.s_out().value();
        let saturated = x * (1.0 + fit.c) / 2.0;
        // Three sub-LSB floors stack up here: q7, q8, and the one-unit
        // offset of the clipped vertex square, worth x/2 * 3 LSB total.
        let tol = 1.5 * x * k.s_erf().value() + 2.0 * k.s_out().value();
        assert!((deq - saturated).abs() <= tol, "deq {deq} vs {saturated}");
        assert!((deq - x).abs() / x < 0.02, "deq {deq} relative to identity");
    }

    #[test]
    fn gelu_overflow_is_kernel_error() {
        // A tiny scale makes q8 huge, so a large q overflows the i32 output.
        let k = GeluConsts::new(&erf_fit(), scale(1e-4)).unwrap();
        assert!(matches!(
            i_gelu(2_000_000, &k),
            Err(Error::KernelOverflow { .. })
        ));
    }

    #[test]
    fn gelu_tracks_oracle_in_calibrated_range() {
        let fit = erf_fit();
        let s = scale(2.0 / 127.0);
        let k = GeluConsts::new(&fit, s).unwrap();
        for q in -127i32..=127 {
            let x = f64::from(q) * s.value();
            let deq = f64::from(i_gelu(q, &k).unwrap()) * k.s_out().value();
            let want = reference::gelu(x);
            assert!(
                (deq - want).abs() <= 0.02,
                "q {q} x {x}: {deq} vs {want}"
            );
        }
    }

    // -- i_sqrt -------------------------------------------------------------

    #[test]
    fn sqrt_examples() {
        assert_eq!(i_sqrt(16).unwrap().0, 4);
        assert_eq!(i_sqrt(10).unwrap().0, 3);
        assert_eq!(i_sqrt(0).unwrap(), (0, 0));
        assert_eq!(i_sqrt(1).unwrap().0, 1);
        assert_eq!(i_sqrt(i32::MAX).unwrap().0, 46340);
        assert!(i_sqrt(-1).is_err());
    }

    #[test]
    fn sqrt_exact_on_dense_prefix() {
        // The full 2^24 sweep lives in the acceptance suite; this covers the
        // small-number edge cases where the start guess is coarsest.
        let mut root = 0i32;
        for n in 0..200_000i32 {
            if (root + 1).checked_mul(root + 1).map_or(false, |sq| sq <= n) {
                root += 1;
            }
            let (got, iters) = i_sqrt(n).unwrap();
            assert_eq!(got, root, "n = {n}");
            let bits = 32 - (n as u32).leading_zeros();
            assert!(iters <= WORST_CASE_SQRT_ITERS);
            assert!(iters <= 2 + bits, "n = {n} iters {iters}");
        }
    }

    #[test]
    fn sqrt_iteration_budget_holds_at_boundaries() {
        // Adversarial shapes: perfect squares and neighbors, powers of two,
        // and the recorded global worst case.
        let mut cases = vec![16_785_408i32, i32::MAX, i32::MAX - 1];
        for k in (1..=46_340i32).step_by(7) {
            let sq = k * k;
            cases.extend([sq - 1, sq, sq.saturating_add(1), sq.saturating_add(k)]);
        }
        for b in 1..31 {
            cases.extend([(1i32 << b) - 1, 1i32 << b, (1i32 << b) + 1]);
        }
        for n in cases {
            let n = n.max(0);
            let (got, iters) = i_sqrt(n).unwrap();
            let g64 = i64::from(got);
            assert!(g64 * g64 <= i64::from(n) && (g64 + 1) * (g64 + 1) > i64::from(n));
            assert!(iters <= WORST_CASE_SQRT_ITERS, "n = {n} iters {iters}");
        }
        // The recorded worst case actually needs the full budget.
        assert_eq!(i_sqrt(16_785_408).unwrap().1, WORST_CASE_SQRT_ITERS);
    }

    // -- i_layernorm ----------------------------------------------------------

    fn ln_consts(d: usize, out_scale: f64) -> LnConsts {
        LnConsts::new(&vec![1.0; d], &vec![0.0; d], scale(out_scale)).unwrap()
    }

    #[test]
    fn layernorm_constant_row_yields_beta() {
        let out_scale = 1.0 / 128.0;
        let beta = [0.5, -0.25, 0.0, 1.0];
        let k = LnConsts::new(&[1.0; 4], &beta, scale(out_scale)).unwrap();
        let out = i_layernorm(&[700; 4], &k).unwrap();
        for (got, want) in out.iter().zip(&beta) {
            let deq = f64::from(*got) * out_scale;
            assert!((deq - want).abs() <= out_scale, "{deq} vs {want}");
        }
    }

    #[test]
    fn layernorm_symmetric_pair() {
        let out_scale = 1.0 / 128.0;
        let k = ln_consts(2, out_scale);
        let out = i_layernorm(&[9000, -9000], &k).unwrap();
        let deq: Vec<f64> = out.iter().map(|&v| f64::from(v) * out_scale).collect();
        assert!((deq[0] - 1.0).abs() <= 2.0 * out_scale, "{:?}", deq);
        assert!((deq[1] + 1.0).abs() <= 2.0 * out_scale, "{:?}", deq);
    }

    #[test]
    fn layernorm_rejects_length_mismatch() {
        let k = ln_consts(4, 1.0 / 128.0);
        assert!(matches!(
            i_layernorm(&[1, 2, 3], &k),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn layernorm_zero_variance_short_row() {
        // Deviations of one with d larger than the squared sum: var floors
        // to zero and the normalized part vanishes.
        let k = ln_consts(8, 1.0 / 128.0);
        let mut row = [500i32; 8];
        row[0] = 501;
        let out = i_layernorm(&row, &k).unwrap();
        assert!(out.iter().all(|&v| v == 0), "{out:?}");
    }

    #[test]
    fn layernorm_tracks_float_oracle() {
        // Rows quantized at the wide-junction convention S = max/2^15; the
        // integer std is then large enough that root granularity is
        // negligible.
        let d = 64;
        let out_scale = 1.0 / 128.0;
        let gamma: Vec<f64> = (0..d).map(|i| 0.9 + 0.2 * (i as f64 / d as f64)).collect();
        let beta: Vec<f64> = (0..d).map(|i| -0.3 + 0.01 * i as f64).collect();
        let k = LnConsts::new(&gamma, &beta, scale(out_scale)).unwrap();
        let mut state = 0x9E3779B97F4A7C15u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 40) as f64 / (1u64 << 24) as f64 * 8.0 - 4.0
        };
        for _case in 0..200 {
            let xs: Vec<f64> = (0..d).map(|_| next()).collect();
            let max = xs.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
            let s_in = (max / 32768.0).max(1e-9);
            let row: Vec<i32> = xs.iter().map(|&v| (v / s_in).round() as i32).collect();
            let out = i_layernorm(&row, &k).unwrap();
            let fm = reference::FMat::new(
                1,
                d,
                row.iter().map(|&q| f64::from(q) * s_in).collect(),
            )
            .unwrap();
            let want = reference::layernorm_rows(&fm, &gamma, &beta).unwrap();
            for i in 0..d {
                let deq = f64::from(out[i]) * out_scale;
                assert!(
                    (deq - want.get(0, i)).abs() <= 0.02,
                    "element {i}: {deq} vs {}",
                    want.get(0, i)
                );
            }
        }
    }

    #[test]
    fn layernorm_reports_sqrt_iterations() {
        let k = ln_consts(4, 1.0 / 128.0);
        let mut sat = SatCounters::default();
        let (_, iters) = i_layernorm_traced(&[100, -50, 25, 300], &k, &mut sat).unwrap();
        assert!(iters >= 1 && iters <= WORST_CASE_SQRT_ITERS);
        // Constant row takes the zero-iteration bypass.
        let (_, iters) = i_layernorm_traced(&[7, 7, 7, 7], &k, &mut sat).unwrap();
        assert_eq!(iters, 0);
    }

    #[test]
    fn layernorm_consts_validation() {
        assert!(LnConsts::new(&[], &[], scale(1.0 / 128.0)).is_err());
        assert!(LnConsts::new(&[1.0, 1.0], &[0.0], scale(1.0 / 128.0)).is_err());
        // Output scale coarser than one unit per LSB.
        assert!(LnConsts::new(&[1.0], &[0.0], scale(4.0)).is_err());
    }
}
