//! Run reports: tensor digests and integer-vs-float comparison metrics,
//! bundled with the cycle and saturation summaries of a run.
//!
//! Reports serialize to pretty JSON with fully ordered fields, so two runs
//! with identical inputs produce byte-identical documents.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::package::sha256_hex;
use crate::quant::{QMat8, SatCounters};
use crate::sched::CycleReport;

/// SHA-256 over an int8 tensor: shape header (rows, cols as u64 LE) then the
/// raw row-major bytes, so equal data with different shapes digests apart.
pub fn digest_mat(m: &QMat8) -> String {
    let mut bytes = Vec::with_capacity(16 + m.rows() * m.cols());
    bytes.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    bytes.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    bytes.extend(m.data().iter().map(|&v| v as u8));
    sha256_hex(&bytes)
}

/// Elementwise comparison of a dequantized integer tensor against its real
/// arithmetic counterpart.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub max_abs_err: f64,
    pub mean_abs_err: f64,
    pub cosine: f64,
    /// Fraction of rows whose argmax position agrees.
    pub argmax_agreement: f64,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Compute comparison metrics over two equally shaped row-major tensors.
pub fn compare_outputs(int_out: &[f64], float_out: &[f64], cols: usize) -> Result<Metrics> {
    if int_out.len() != float_out.len() {
        return Err(Error::usage(format!(
            "comparison length mismatch: {} vs {}",
            int_out.len(),
            float_out.len()
        )));
    }
    if cols == 0 || int_out.is_empty() || int_out.len() % cols != 0 {
        return Err(Error::usage(format!(
            "{} elements do not form rows of width {cols}",
            int_out.len()
        )));
    }
    let mut max_abs = 0.0f64;
    let mut sum_abs = 0.0f64;
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&a, &b) in int_out.iter().zip(float_out) {
        let d = (a - b).abs();
        max_abs = max_abs.max(d);
        sum_abs += d;
        dot += a * b;
        na += a * a;
        nb += b * b;
    }
    let cosine = if na == 0.0 && nb == 0.0 {
        1.0
    } else if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    };
    let rows = int_out.len() / cols;
    let agreeing = (0..rows)
        .filter(|&r| {
            argmax(&int_out[r * cols..(r + 1) * cols])
                == argmax(&float_out[r * cols..(r + 1) * cols])
        })
        .count();
    Ok(Metrics {
        max_abs_err: max_abs,
        mean_abs_err: sum_abs / int_out.len() as f64,
        cosine,
        argmax_agreement: agreeing as f64 / rows as f64,
    })
}

/// The full record of one integer inference run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// Stimulus description ("zero" or "seed N"); the data itself is
    /// reproducible from it.
    pub input: String,
    /// SHA-256 of each layer's int8 output, in layer order.
    pub layer_digests: Vec<String>,
    /// Final output compared against the dequantized-weight float mirror.
    pub metrics: Metrics,
    pub cycles: CycleReport,
    pub saturation: SatCounters,
}

impl RunReport {
    /// Canonical text form: pretty JSON with a trailing newline.
    pub fn to_text(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

/// Side-by-side comparison document: metrics plus both full output tensors,
/// so the metrics can be recomputed independently from the dump alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub input: String,
    pub rows: usize,
    pub cols: usize,
    pub metrics: Metrics,
    /// Dequantized integer output, row-major.
    pub int_output: Vec<f64>,
    /// Float mirror output, row-major.
    pub float_output: Vec<f64>,
}

impl CompareReport {
    pub fn to_text(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::Scale;

    fn s() -> Scale {
        Scale::new(0.5).unwrap()
    }

    #[test]
    fn digest_separates_data_and_shape() {
        let a = QMat8::from_fn(2, 3, s(), |r, c| (r * 3 + c) as i8).unwrap();
        let b = QMat8::from_fn(3, 2, s(), |r, c| (r * 2 + c) as i8).unwrap();
        let c = QMat8::from_fn(2, 3, s(), |r, c| (r * 3 + c) as i8 + 1).unwrap();
        assert_eq!(digest_mat(&a), digest_mat(&a));
        assert_ne!(digest_mat(&a), digest_mat(&b));
        assert_ne!(digest_mat(&a), digest_mat(&c));
    }

    #[test]
    fn identical_tensors_have_perfect_metrics() {
        let v = vec![1.0, -2.0, 3.0, 0.5, 0.25, -1.0];
        let m = compare_outputs(&v, &v, 3).unwrap();
        assert_eq!(m.max_abs_err, 0.0);
        assert_eq!(m.mean_abs_err, 0.0);
        assert!((m.cosine - 1.0).abs() < 1e-12);
        assert_eq!(m.argmax_agreement, 1.0);
    }

    #[test]
    fn hand_checked_metrics() {
        // Rows: [1, 0] vs [0.5, 0] and [0, 2] vs [2, 0].
        let a = vec![1.0, 0.0, 0.0, 2.0];
        let b = vec![0.5, 0.0, 2.0, 0.0];
        let m = compare_outputs(&a, &b, 2).unwrap();
        assert_eq!(m.max_abs_err, 2.0);
        assert_eq!(m.mean_abs_err, (0.5 + 0.0 + 2.0 + 2.0) / 4.0);
        // dot = 0.5, |a| = sqrt(5), |b| = sqrt(4.25).
        assert!((m.cosine - 0.5 / (5.0f64.sqrt() * 4.25f64.sqrt())).abs() < 1e-12);
        assert_eq!(m.argmax_agreement, 0.5);
    }

    #[test]
    fn zero_tensors_compare_as_identical() {
        let z = vec![0.0; 4];
        let m = compare_outputs(&z, &z, 2).unwrap();
        assert_eq!(m.cosine, 1.0);
        assert_eq!(m.argmax_agreement, 1.0);
    }

    #[test]
    fn one_sided_zero_has_no_direction() {
        let z = vec![0.0; 2];
        let v = vec![1.0, 2.0];
        assert_eq!(compare_outputs(&z, &v, 2).unwrap().cosine, 0.0);
    }

    #[test]
    fn shape_errors_are_rejected() {
        assert!(compare_outputs(&[1.0], &[1.0, 2.0], 1).is_err());
        assert!(compare_outputs(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], 2).is_err());
        assert!(compare_outputs(&[], &[], 3).is_err());
        assert!(compare_outputs(&[1.0], &[1.0], 0).is_err());
    }

    #[test]
    fn argmax_takes_the_first_of_ties() {
        assert_eq!(argmax(&[1.0, 1.0, 0.0]), 0);
        assert_eq!(argmax(&[0.0, 2.0, 2.0]), 1);
    }
}
