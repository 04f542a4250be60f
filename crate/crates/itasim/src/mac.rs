//! Cycle-level model of the matrix-multiply block: a grid of
//! multiply-accumulate cells fed one inner-dimension step per cycle, read
//! out column by column with optional bias injection at the output mux.

use crate::error::{Error, Result};
use crate::quant::{dyadic_apply, sat_add_i32, DyadicScale, QMat32, QMat8, SatCounters};

/// Where the array is in its fill/drain protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Fresh or reset; no inner dimension declared yet.
    Idle,
    /// Mid-accumulation: `done` of `expected` outer-product steps taken.
    Accumulating { done: usize, expected: usize },
    /// Accumulation complete; columns may be read (non-destructively).
    Readout,
}

/// A rows x cols grid of saturating int32 accumulators.
#[derive(Debug, Clone)]
pub struct MacArray {
    n_rows: usize,
    n_cols: usize,
    acc: Vec<i32>,
    bias: Option<(Vec<i32>, DyadicScale)>,
    phase: Phase,
    cycles: u64,
    sat: SatCounters,
}

impl MacArray {
    pub fn new(n_rows: usize, n_cols: usize) -> Result<Self> {
        if n_rows == 0 || n_cols == 0 {
            return Err(Error::usage(format!(
                "array dimensions must be positive, got {n_rows}x{n_cols}"
            )));
        }
        Ok(MacArray {
            n_rows,
            n_cols,
            acc: vec![0; n_rows * n_cols],
            bias: None,
            phase: Phase::Idle,
            cycles: 0,
            sat: SatCounters::default(),
        })
    }

    /// Install per-column bias values with their scale-alignment multiplier.
    /// Applied only on readout when requested.
    pub fn set_bias(&mut self, bias: Vec<i32>, align: DyadicScale) -> Result<()> {
        if bias.len() != self.n_cols {
            return Err(Error::usage(format!(
                "bias length {} does not match {} columns",
                bias.len(),
                self.n_cols
            )));
        }
        self.bias = Some((bias, align));
        Ok(())
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    /// Simulated cycles consumed so far (one per accumulate step, one per
    /// column read).
    pub fn cycles(&self) -> u64 {
        self.cycles
    }

    pub fn saturations(&self) -> SatCounters {
        self.sat
    }

    /// Declare the inner dimension of the upcoming product and clear the
    /// accumulators. Readout becomes legal after exactly `k` steps.
    pub fn begin(&mut self, k: usize) -> Result<()> {
        if k == 0 {
            return Err(Error::usage("inner dimension must be at least 1"));
        }
        self.acc.fill(0);
        self.phase = Phase::Accumulating {
            done: 0,
            expected: k,
        };
        Ok(())
    }

    /// One outer-product step: acc[i][j] += row_in[i] * col_in[j].
    /// Consumes one cycle. The phase advances to readout after the declared
    /// number of steps.
    pub fn step_accumulate(&mut self, row_in: &[i8], col_in: &[i8]) -> Result<()> {
        let (done, expected) = match self.phase {
            Phase::Accumulating { done, expected } => (done, expected),
            Phase::Idle => {
                return Err(Error::usage(
                    "accumulate before declaring an inner dimension",
                ))
            }
            Phase::Readout => {
                return Err(Error::usage("accumulate after accumulation completed"))
            }
        };
        if row_in.len() != self.n_rows || col_in.len() != self.n_cols {
            return Err(Error::usage(format!(
                "input lengths {}x{} do not match array {}x{}",
                row_in.len(),
                col_in.len(),
                self.n_rows,
                self.n_cols
            )));
        }
        for (i, &r) in row_in.iter().enumerate() {
            let row_acc = &mut self.acc[i * self.n_cols..(i + 1) * self.n_cols];
            for (cell, &c) in row_acc.iter_mut().zip(col_in) {
                let (v, overflow) = sat_add_i32(*cell, i32::from(r) * i32::from(c));
                if overflow {
                    self.sat.acc_saturations += 1;
                }
                *cell = v;
            }
        }
        self.cycles += 1;
        self.phase = if done + 1 == expected {
            Phase::Readout
        } else {
            Phase::Accumulating {
                done: done + 1,
                expected,
            }
        };
        Ok(())
    }

    /// Read accumulator column `j`, optionally adding the aligned bias to
    /// every element. Consumes one cycle; non-destructive.
    pub fn read_column(&mut self, j: usize, with_bias: bool) -> Result<Vec<i32>> {
        if self.phase != Phase::Readout {
            return Err(Error::usage("read before accumulation completed"));
        }
        if j >= self.n_cols {
            return Err(Error::usage(format!(
                "column {j} out of range for {} columns",
                self.n_cols
            )));
        }
        let addend = if with_bias {
            let (bias, align) = self
                .bias
                .as_ref()
                .ok_or_else(|| Error::usage("bias requested but none installed"))?;
            dyadic_apply(bias[j], *align)
        } else {
            0
        };
        let mut out = Vec::with_capacity(self.n_rows);
        for i in 0..self.n_rows {
            let (v, overflow) = sat_add_i32(self.acc[i * self.n_cols + j], addend);
            if overflow {
                self.sat.add_saturations += 1;
            }
            out.push(v);
        }
        self.cycles += 1;
        Ok(out)
    }

    /// Back to idle with cleared accumulators; the cycle counter and
    /// saturation statistics persist.
    pub fn reset(&mut self) {
        self.acc.fill(0);
        self.phase = Phase::Idle;
    }
}

/// Physical array extent used by the tiling driver.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Tile {
    pub rows: usize,
    pub cols: usize,
}

impl Tile {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::usage(format!(
                "tile dimensions must be positive, got {rows}x{cols}"
            )));
        }
        Ok(Tile { rows, cols })
    }
}

/// Cycle cost of an m x k x n product on a given tile, per the step
/// contract: every tile pays k accumulate cycles, and each row block pays
/// one readout cycle per output column.
pub fn matmul_cycles(m: usize, k: usize, n: usize, tile: Tile) -> u64 {
    let row_blocks = m.div_ceil(tile.rows) as u64;
    let col_blocks = n.div_ceil(tile.cols) as u64;
    row_blocks * col_blocks * k as u64 + row_blocks * n as u64
}

/// Exact integer product A (m x k) times B (k x n) on the array, tiled to
/// the physical extent, with optional per-output-column bias. Returns the
/// int32 result at the product scale and the cycle count. The numerical
/// result is independent of the tile choice.
pub fn matmul(
    a: &QMat8,
    b: &QMat8,
    bias: Option<(&[i32], DyadicScale)>,
    tile: Tile,
) -> Result<(QMat32, u64)> {
    let mut sat = SatCounters::default();
    matmul_tracked(a, b, bias, tile, &mut sat)
}

pub fn matmul_tracked(
    a: &QMat8,
    b: &QMat8,
    bias: Option<(&[i32], DyadicScale)>,
    tile: Tile,
    sat: &mut SatCounters,
) -> Result<(QMat32, u64)> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    if b.rows() != k {
        return Err(Error::usage(format!(
            "matmul inner dimension mismatch: {m}x{k} times {}x{n}",
            b.rows()
        )));
    }
    if let Some((bv, _)) = bias {
        if bv.len() != n {
            return Err(Error::usage(format!(
                "bias length {} does not match {n} output columns",
                bv.len()
            )));
        }
    }
    let out_scale = a.scale.times(b.scale)?;
    let mut out = QMat32::zeros(m, n, out_scale)?;
    let mut cycles = 0u64;
    let mut row_in = vec![0i8; tile.rows.min(m)];
    let mut col_in = vec![0i8; tile.cols.min(n)];
    for r0 in (0..m).step_by(tile.rows) {
        let tr = tile.rows.min(m - r0);
        for c0 in (0..n).step_by(tile.cols) {
            let tc = tile.cols.min(n - c0);
            let mut arr = MacArray::new(tr, tc)?;
            if let Some((bv, align)) = bias {
                arr.set_bias(bv[c0..c0 + tc].to_vec(), align)?;
            }
            arr.begin(k)?;
            for t in 0..k {
                for (i, slot) in row_in[..tr].iter_mut().enumerate() {
                    *slot = a.get(r0 + i, t);
                }
                for (j, slot) in col_in[..tc].iter_mut().enumerate() {
                    *slot = b.get(t, c0 + j);
                }
                arr.step_accumulate(&row_in[..tr], &col_in[..tc])?;
            }
            for j in 0..tc {
                let col = arr.read_column(j, bias.is_some())?;
                for (i, &v) in col.iter().enumerate() {
                    out.set(r0 + i, c0 + j, v);
                }
            }
            cycles += arr.cycles();
            sat.merge(&arr.saturations());
        }
    }
    debug_assert_eq!(cycles, matmul_cycles(m, k, n, tile));
    Ok((out, cycles))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::Scale;
    use proptest::prelude::*;

    fn s(v: f64) -> Scale {
        Scale::new(v).unwrap()
    }

    /// Plain i64 triple-loop product (valid while nothing saturates).
    fn naive(a: &QMat8, b: &QMat8, bias: Option<&[i32]>) -> Vec<i64> {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0i64; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0i64;
                for t in 0..k {
                    acc += i64::from(a.get(i, t)) * i64::from(b.get(t, j));
                }
                if let Some(bv) = bias {
                    acc += i64::from(bv[j]);
                }
                out[i * n + j] = acc;
            }
        }
        out
    }

    #[test]
    fn hand_multiplication_2x2() {
        // [[1,2],[3,4]] x [[5,6],[7,8]] = [[19,22],[43,50]]
        let mut arr = MacArray::new(2, 2).unwrap();
        arr.begin(2).unwrap();
        // Feed A's columns against B's rows.
        arr.step_accumulate(&[1, 3], &[5, 6]).unwrap();
        arr.step_accumulate(&[2, 4], &[7, 8]).unwrap();
        assert_eq!(arr.phase(), Phase::Readout);
        assert_eq!(arr.read_column(0, false).unwrap(), vec![19, 43]);
        assert_eq!(arr.read_column(1, false).unwrap(), vec![22, 50]);
        // Two accumulate cycles + two readout cycles.
        assert_eq!(arr.cycles(), 4);
    }

    #[test]
    fn zero_inputs_leave_accumulators_unchanged() {
        let mut arr = MacArray::new(3, 3).unwrap();
        arr.begin(2).unwrap();
        arr.step_accumulate(&[1, 2, 3], &[4, 5, 6]).unwrap();
        arr.step_accumulate(&[0, 0, 0], &[0, 0, 0]).unwrap();
        assert_eq!(arr.read_column(0, false).unwrap(), vec![4, 8, 12]);
    }

    #[test]
    fn protocol_violations_are_usage_errors() {
        let mut arr = MacArray::new(2, 2).unwrap();
        // Step before begin.
        assert!(arr.step_accumulate(&[0, 0], &[0, 0]).is_err());
        arr.begin(1).unwrap();
        // Read before the declared number of steps.
        assert!(arr.read_column(0, false).is_err());
        // Wrong vector lengths.
        assert!(arr.step_accumulate(&[1], &[1, 2]).is_err());
        arr.step_accumulate(&[1, 1], &[1, 1]).unwrap();
        // Step past the declared inner dimension.
        assert!(arr.step_accumulate(&[1, 1], &[1, 1]).is_err());
        // Column index out of range.
        assert!(arr.read_column(2, false).is_err());
        // Bias requested but never installed.
        assert!(arr.read_column(0, true).is_err());
        // Reads are non-destructive and repeatable.
        assert_eq!(arr.read_column(0, false).unwrap(), vec![1, 1]);
        assert_eq!(arr.read_column(0, false).unwrap(), vec![1, 1]);
    }

    #[test]
    fn bias_injection_on_readout() {
        let mut arr = MacArray::new(2, 3).unwrap();
        arr.set_bias(vec![5, -7, 100], DyadicScale::new(1, 0).unwrap())
            .unwrap();
        arr.begin(1).unwrap();
        arr.step_accumulate(&[0, 0], &[0, 0, 0]).unwrap();
        assert_eq!(arr.read_column(0, true).unwrap(), vec![5, 5]);
        assert_eq!(arr.read_column(1, true).unwrap(), vec![-7, -7]);
        // Raw read of the same column stays unbiased.
        assert_eq!(arr.read_column(1, false).unwrap(), vec![0, 0]);
        // Dyadic alignment applies to the bias value.
        let mut arr = MacArray::new(1, 1).unwrap();
        arr.set_bias(vec![1000], DyadicScale::new(32768, 16).unwrap())
            .unwrap();
        arr.begin(1).unwrap();
        arr.step_accumulate(&[2], &[3]).unwrap();
        assert_eq!(arr.read_column(0, true).unwrap(), vec![506]);
    }

    #[test]
    fn accumulators_saturate_and_count() {
        let mut arr = MacArray::new(1, 1).unwrap();
        let k = 140_000;
        arr.begin(k).unwrap();
        for _ in 0..k {
            arr.step_accumulate(&[127], &[127]).unwrap();
        }
        assert_eq!(arr.read_column(0, false).unwrap(), vec![i32::MAX]);
        assert!(arr.saturations().acc_saturations > 0);
    }

    #[test]
    fn matmul_identity_widens() {
        let a = QMat8::new(3, 3, vec![1, -2, 3, 4, 5, -6, 7, 8, 9], s(0.5)).unwrap();
        let eye = QMat8::from_fn(3, 3, s(0.25), |r, c| i8::from(r == c)).unwrap();
        let (out, _) = matmul(&a, &eye, None, Tile::new(3, 3).unwrap()).unwrap();
        assert_eq!(out.data(), &[1, -2, 3, 4, 5, -6, 7, 8, 9]);
        assert!((out.scale.value() - 0.125).abs() < 1e-15);
    }

    #[test]
    fn full_tile_32_cube_costs_64_cycles() {
        let a = QMat8::zeros(32, 32, s(1.0)).unwrap();
        let b = QMat8::zeros(32, 32, s(1.0)).unwrap();
        let (_, cycles) = matmul(&a, &b, None, Tile::new(32, 32).unwrap()).unwrap();
        assert_eq!(cycles, 64);
        assert_eq!(matmul_cycles(32, 32, 32, Tile::new(32, 32).unwrap()), 64);
    }

    #[test]
    fn tiling_invariance_16_cube() {
        let a = QMat8::from_fn(16, 16, s(1.0), |r, c| {
            (((r * 31 + c * 7) % 255) as i16 - 127) as i8
        })
        .unwrap();
        let b = QMat8::from_fn(16, 16, s(1.0), |r, c| {
            (((r * 13 + c * 3) % 255) as i16 - 127) as i8
        })
        .unwrap();
        let (full, full_cycles) = matmul(&a, &b, None, Tile::new(16, 16).unwrap()).unwrap();
        let (unit, unit_cycles) = matmul(&a, &b, None, Tile::new(1, 1).unwrap()).unwrap();
        assert_eq!(full.data(), unit.data());
        // Cycle counts differ: reuse of a 1x1 cell costs far more.
        assert!(unit_cycles > full_cycles);
        assert_eq!(full_cycles, 16 + 16);
        // 256 unit tiles, each paying the full k=16 plus one readout.
        assert_eq!(unit_cycles, 16 * 16 * (16 + 1));
    }

    #[test]
    fn random_8x8_matches_oracle() {
        let a = QMat8::from_fn(8, 8, s(1.0), |r, c| ((r * 91 + c * 57 + 11) % 200) as i8)
            .unwrap();
        let b = QMat8::from_fn(8, 8, s(1.0), |r, c| (((r * 17 + c * 43) % 200) as i16 - 100) as i8)
            .unwrap();
        let bias: Vec<i32> = (0..8).map(|j| j * 1000 - 3500).collect();
        let (out, _) = matmul(
            &a,
            &b,
            Some((&bias, DyadicScale::new(1, 0).unwrap())),
            Tile::new(8, 8).unwrap(),
        )
        .unwrap();
        let want = naive(&a, &b, Some(&bias));
        let got: Vec<i64> = out.data().iter().map(|&v| i64::from(v)).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn matmul_rejects_mismatched_shapes() {
        let a = QMat8::zeros(2, 3, s(1.0)).unwrap();
        let b = QMat8::zeros(4, 2, s(1.0)).unwrap();
        assert!(matmul(&a, &b, None, Tile::new(2, 2).unwrap()).is_err());
        let b = QMat8::zeros(3, 2, s(1.0)).unwrap();
        let bias = vec![0i32; 5];
        assert!(matmul(
            &a,
            &b,
            Some((&bias, DyadicScale::new(1, 0).unwrap())),
            Tile::new(2, 2).unwrap()
        )
        .is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        /// Any shape and tile decomposition matches the plain oracle
        /// bit-for-bit and the closed-form cycle count.
        #[test]
        fn matmul_matches_oracle_any_tile(
            m in 1usize..12,
            k in 1usize..12,
            n in 1usize..12,
            tr in 1usize..14,
            tc in 1usize..14,
            seed in any::<u64>(),
        ) {
            let mut state = seed | 1;
            let mut next = move || {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                (state >> 32) as i64 as i8
            };
            let a = QMat8::from_fn(m, k, s(0.02), |_, _| next()).unwrap();
            let b = QMat8::from_fn(k, n, s(0.05), |_, _| next()).unwrap();
            let tile = Tile::new(tr, tc).unwrap();
            let (out, cycles) = matmul(&a, &b, None, tile).unwrap();
            let want = naive(&a, &b, None);
            let got: Vec<i64> = out.data().iter().map(|&v| i64::from(v)).collect();
            prop_assert_eq!(got, want);
            prop_assert_eq!(cycles, matmul_cycles(m, k, n, tile));
            prop_assert!((out.scale.value() - 0.001).abs() < 1e-12);
        }
    }
}
