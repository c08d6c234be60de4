//! Dense row-major matrices/vectors in f32 with 64-bit accumulation,
//! plus the stable scalar functions the loss and gating need and a
//! counter-based seeded RNG that reproduces bit-identically everywhere.

use crate::error::{JamError, Result};

/// Row-major dense matrix of 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(JamError::DimMismatch(format!(
                "matrix {}x{} needs {} entries, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(JamError::DimMismatch("ragged rows".into()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    /// Entries drawn uniformly from [-1/sqrt(cols), 1/sqrt(cols)].
    pub fn uniform_init(rows: usize, cols: usize, rng: &mut SeededRng) -> Self {
        let bound = 1.0 / (cols.max(1) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| (rng.uniform_f64() * 2.0 * bound - bound) as f32)
            .collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn at(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        self.data[i * self.cols + j] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Dense vector of 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseVector {
    data: Vec<f32>,
}

impl DenseVector {
    pub fn zeros(dim: usize) -> Self {
        Self { data: vec![0.0; dim] }
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        Self { data }
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Index<usize> for DenseVector {
    type Output = f32;
    fn index(&self, i: usize) -> &f32 {
        &self.data[i]
    }
}

impl std::ops::IndexMut<usize> for DenseVector {
    fn index_mut(&mut self, i: usize) -> &mut f32 {
        &mut self.data[i]
    }
}

/// m · v with f64 accumulation, rounded to f32 per output entry.
pub fn matvec(m: &DenseMatrix, v: &[f32]) -> Result<DenseVector> {
    if m.cols() != v.len() {
        return Err(JamError::DimMismatch(format!(
            "matvec: matrix is {}x{}, vector has dim {}",
            m.rows(),
            m.cols(),
            v.len()
        )));
    }
    let mut out = Vec::with_capacity(m.rows());
    for i in 0..m.rows() {
        out.push(dot64(m.row(i), v) as f32);
    }
    Ok(DenseVector::from_vec(out))
}

/// m · v kept in f64, for loss/gradient paths that must agree tightly.
pub fn matvec64(m: &DenseMatrix, v: &[f32]) -> Result<Vec<f64>> {
    if m.cols() != v.len() {
        return Err(JamError::DimMismatch(format!(
            "matvec64: matrix is {}x{}, vector has dim {}",
            m.rows(),
            m.cols(),
            v.len()
        )));
    }
    Ok((0..m.rows()).map(|i| dot64(m.row(i), v)).collect())
}

/// Dot product accumulated in f64.
pub fn dot64(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Elementwise sum of two equal-length slices.
pub fn add(a: &[f32], b: &[f32]) -> DenseVector {
    debug_assert_eq!(a.len(), b.len());
    DenseVector::from_vec(a.iter().zip(b).map(|(&x, &y)| x + y).collect())
}

/// Numerically stable softmax. `f32::NEG_INFINITY` entries are masked to
/// exactly zero; at least one entry must be finite.
pub fn softmax(logits: &DenseVector) -> Result<DenseVector> {
    let xs = logits.as_slice();
    let max = xs.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if max == f32::NEG_INFINITY {
        return Err(JamError::EmptySupport(
            "softmax: all logits are -inf".into(),
        ));
    }
    let mut exps = vec![0.0f64; xs.len()];
    let mut sum = 0.0f64;
    for (e, &x) in exps.iter_mut().zip(xs) {
        if x == f32::NEG_INFINITY {
            *e = 0.0;
        } else {
            *e = ((x - max) as f64).exp();
            sum += *e;
        }
    }
    Ok(DenseVector::from_vec(
        exps.into_iter().map(|e| (e / sum) as f32).collect(),
    ))
}

/// ln(1 + e^x), overflow-safe.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// ln sigmoid(x) = -softplus(-x). Finite for all finite x.
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// 1 / (1 + e^-x).
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// SplitMix64: a counter-based generator giving the same draw sequence for
/// a given seed on every platform. Good enough statistically for negative
/// sampling, shuffles, and gate noise.
#[derive(Debug, Clone)]
pub struct SeededRng {
    state: u64,
    /// Cached second output of the Box-Muller pair.
    spare_normal: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed, spare_normal: None }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn uniform_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n). n must be > 0.
    pub fn uniform_usize(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Modulo bias is below 2^-40 for the catalog sizes involved.
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // u1 in (0, 1] so ln is finite.
        let u1 = 1.0 - self.uniform_f64();
        let u2 = self.uniform_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.uniform_usize(i + 1);
            xs.swap(i, j);
        }
    }

    /// Derive an independent stream, e.g. one per record or per seed index.
    pub fn derive(&self, stream: u64) -> SeededRng {
        let mut r = SeededRng::new(self.state ^ stream.wrapping_mul(0xA076_1D64_78BD_642F));
        r.next_u64();
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn matvec_identity_and_zero() {
        let id = DenseMatrix::identity(3);
        let v = [1.0, 2.0, 3.0];
        assert_eq!(matvec(&id, &v).unwrap().as_slice(), &v);

        let z = DenseMatrix::zeros(2, 3);
        assert_eq!(matvec(&z, &v).unwrap().as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn matvec_hand_case() {
        let m = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let out = matvec(&m, &[1.0, 1.0]).unwrap();
        assert_eq!(out.as_slice(), &[3.0, 7.0]);
    }

    #[test]
    fn matvec_dim_mismatch_errors() {
        let m = DenseMatrix::zeros(2, 3);
        match matvec(&m, &[1.0, 2.0]) {
            Err(JamError::DimMismatch(_)) => {}
            other => panic!("expected DimMismatch, got {other:?}"),
        }
    }

    #[test]
    fn matvec_agrees_with_naive_reference() {
        // Independent reference: plain f64 loop over indices.
        let mut rng = SeededRng::new(11);
        let n = 256;
        let mut data = Vec::with_capacity(n * n);
        for _ in 0..n * n {
            data.push((rng.uniform_f64() * 2.0 - 1.0) as f32);
        }
        let m = DenseMatrix::from_vec(n, n, data).unwrap();
        let v: Vec<f32> = (0..n).map(|_| (rng.uniform_f64() * 2.0 - 1.0) as f32).collect();

        let got = matvec(&m, &v).unwrap();
        for i in 0..n {
            let mut acc = 0.0f64;
            for j in 0..n {
                acc += m.at(i, j) as f64 * v[j] as f64;
            }
            let rel = (got[i] as f64 - acc).abs() / acc.abs().max(1e-12);
            assert!(rel < 1e-5, "row {i}: {} vs {acc}", got[i]);
        }
    }

    #[test]
    fn softmax_symmetry_and_hand_cases() {
        let s = softmax(&DenseVector::from_vec(vec![0.0, 0.0])).unwrap();
        assert_eq!(s.as_slice(), &[0.5, 0.5]);

        let s = softmax(&DenseVector::from_vec(vec![0.0, 3.0f32.ln()])).unwrap();
        assert_close(s[0] as f64, 0.25, 1e-6);
        assert_close(s[1] as f64, 0.75, 1e-6);

        let s = softmax(&DenseVector::from_vec(vec![f32::NEG_INFINITY, 5.0])).unwrap();
        assert_eq!(s.as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn softmax_all_masked_errors() {
        let all_neg = DenseVector::from_vec(vec![f32::NEG_INFINITY; 3]);
        match softmax(&all_neg) {
            Err(JamError::EmptySupport(_)) => {}
            other => panic!("expected EmptySupport, got {other:?}"),
        }
    }

    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant() {
        // Logits and shifts are multiples of 1/1024 so x + c is exact in
        // f32 and the check exercises softmax, not input rounding.
        let mut rng = SeededRng::new(7);
        let grid = |rng: &mut SeededRng, lo: i64, hi: i64| -> f32 {
            let steps = ((hi - lo) * 1024) as usize;
            (lo * 1024 + rng.uniform_usize(steps + 1) as i64) as f32 / 1024.0
        };
        for _ in 0..10_000 {
            let dim = 1 + rng.uniform_usize(8);
            let logits: Vec<f32> = (0..dim).map(|_| grid(&mut rng, -100, 100)).collect();
            let v = DenseVector::from_vec(logits.clone());
            let s = softmax(&v).unwrap();
            let sum: f64 = s.as_slice().iter().map(|&x| x as f64).sum();
            assert_close(sum, 1.0, 1e-6);
            assert!(s.as_slice().iter().all(|&x| x >= 0.0));

            let c = grid(&mut rng, -10, 10);
            let shifted = DenseVector::from_vec(logits.iter().map(|&x| x + c).collect());
            let s2 = softmax(&shifted).unwrap();
            for i in 0..dim {
                assert_close(s[i] as f64, s2[i] as f64, 1e-6);
            }
        }
    }

    #[test]
    fn log_sigmoid_values() {
        assert_close(log_sigmoid(0.0), -0.693147180559945, 1e-12);
        assert_close(log_sigmoid(1.0), -0.313261687518223, 1e-12);
        // No overflow at large negative input.
        assert_close(log_sigmoid(-40.0), -40.0, 1e-8);
        assert!(log_sigmoid(-40.0).is_finite());
    }

    #[test]
    fn log_sigmoid_is_monotone() {
        let mut prev = f64::NEG_INFINITY;
        for i in -100..=100 {
            let v = log_sigmoid(i as f64 * 0.5);
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn softplus_values() {
        assert_close(softplus(0.0), std::f64::consts::LN_2, 1e-12);
        assert!((softplus(50.0) - 50.0).abs() < 1e-9);
        assert_close(softplus(-20.0), 2.06115362031438e-9, 1e-20);
        assert!(softplus(-700.0) > 0.0);
    }

    #[test]
    fn sigmoid_complement_identity() {
        let mut rng = SeededRng::new(3);
        for _ in 0..1000 {
            let x = rng.uniform_f64() * 60.0 - 30.0;
            assert_close(sigmoid(x) + sigmoid(-x), 1.0, 1e-6);
        }
    }

    #[test]
    fn rng_matches_splitmix64_reference() {
        // Reference outputs computed with an independent SplitMix64
        // implementation (standard constants) for seed 42.
        let mut rng = SeededRng::new(42);
        let expected: [u64; 6] = [
            0xBDD7_3226_2FEB_6E95,
            0x28EF_E333_B266_F103,
            0x4752_6757_130F_9F52,
            0x581C_E1FF_0E4A_E394,
            0x09BC_585A_2448_23F2,
            0xDE44_31FA_3C80_DB06,
        ];
        for e in expected {
            assert_eq!(rng.next_u64(), e);
        }
    }

    #[test]
    fn rng_reproduces_sequence_for_fixed_seed() {
        let mut a = SeededRng::new(123_456);
        let mut b = SeededRng::new(123_456);
        for _ in 0..10_000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut a = SeededRng::new(9);
        let mut b = SeededRng::new(9);
        for _ in 0..10_000 {
            assert_eq!(a.normal(), b.normal());
        }
    }

    #[test]
    fn rng_shuffle_is_a_permutation() {
        let mut rng = SeededRng::new(5);
        let mut xs: Vec<usize> = (0..100).collect();
        rng.shuffle(&mut xs);
        let mut sorted = xs.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn rng_normal_has_reasonable_moments() {
        let mut rng = SeededRng::new(77);
        let n = 100_000;
        let (mut sum, mut sumsq) = (0.0, 0.0);
        for _ in 0..n {
            let z = rng.normal();
            sum += z;
            sumsq += z * z;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }
}
