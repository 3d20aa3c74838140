//! Dense matrices, softmax, nearest-neighbour resampling and the SplitMix64
//! generator every other module draws from.
//!
//! All arithmetic is in `f64` with a fixed evaluation order, and the
//! transcendental functions come from `libm`, so a given seed produces the
//! same bits on every platform.

use crate::error::{Error, Result};

/// Row-major dense matrix of finite `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix, rejecting a wrong data length or any NaN/Inf entry.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { rows, cols, data })
    }

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

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != cols) {
            return Err(Error::Dimension(format!(
                "row {bad} has {} values, expected {cols}",
                rows[bad].len()
            )));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// Skips validation; callers guarantee shape and finiteness.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Vec::with_capacity(self.data.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                out.push(self.get(r, c));
            }
        }
        Matrix::from_raw(self.cols, self.rows, out)
    }

    /// Elementwise sum; shapes must agree.
    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::shapes("add", self.shape(), other.shape()));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Matrix::from_raw(self.rows, self.cols, data))
    }

    pub fn scale(&self, k: f64) -> Matrix {
        Matrix::from_raw(self.rows, self.cols, self.data.iter().map(|x| x * k).collect())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix::from_raw(self.rows, self.cols, self.data.iter().map(|&x| f(x)).collect())
    }

    /// Column `c` as a vector.
    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }
}

/// Matrix product. Every output entry is accumulated from `0.0` over the
/// inner index in ascending order, so results do not depend on the loop
/// nest. Rows are processed four at a time with the column loop innermost.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shapes("matmul", a.shape(), b.shape()));
    }
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; n * m];
    if m == 0 || k == 0 {
        return Ok(Matrix::from_raw(n, m, out));
    }
    let mut blocks = out.chunks_exact_mut(4 * m);
    let mut i = 0;
    for block in &mut blocks {
        let (o0, rest) = block.split_at_mut(m);
        let (o1, rest) = rest.split_at_mut(m);
        let (o2, o3) = rest.split_at_mut(m);
        for (p, b_row) in b.data.chunks_exact(m).enumerate() {
            let (a0, a1, a2, a3) =
                (a.data[i * k + p], a.data[(i + 1) * k + p], a.data[(i + 2) * k + p], a.data[(i + 3) * k + p]);
            for j in 0..m {
                let bj = b_row[j];
                o0[j] += a0 * bj;
                o1[j] += a1 * bj;
                o2[j] += a2 * bj;
                o3[j] += a3 * bj;
            }
        }
        i += 4;
    }
    for out_row in blocks.into_remainder().chunks_exact_mut(m) {
        for (&a_ip, b_row) in a.row(i).iter().zip(b.data.chunks_exact(m)) {
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * b_pj;
            }
        }
        i += 1;
    }
    Ok(Matrix::from_raw(n, m, out))
}

/// Row-wise softmax of `scale * m`, max-subtracted.
pub fn softmax_rows(m: &Matrix, scale: f64) -> Matrix {
    let mut out = Vec::with_capacity(m.data.len());
    for row in m.iter_rows() {
        let max = row
            .iter()
            .map(|&x| scale * x)
            .fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut total = 0.0;
        for &x in row {
            let e = libm::exp(scale * x - max);
            total += e;
            out.push(e);
        }
        for e in &mut out[start..] {
            *e /= total;
        }
    }
    Matrix::from_raw(m.rows, m.cols, out)
}

/// Nearest-neighbour resampling of a `rows x cols` grid. Source index for
/// target `i` is `floor((i + 0.5) * src / target)`, evaluated in integers.
pub fn resample_nearest(map: &Matrix, target_rows: usize, target_cols: usize) -> Result<Matrix> {
    if target_rows == 0 || target_cols == 0 {
        return Err(Error::Dimension(format!(
            "resample target must be non-empty, got {target_rows}x{target_cols}"
        )));
    }
    if map.rows == 0 || map.cols == 0 {
        return Err(Error::Dimension("resample source is empty".into()));
    }
    let src = |i: usize, src_len: usize, dst_len: usize| ((2 * i + 1) * src_len / (2 * dst_len)).min(src_len - 1);
    let mut out = Vec::with_capacity(target_rows * target_cols);
    for i in 0..target_rows {
        let si = src(i, map.rows, target_rows);
        for j in 0..target_cols {
            out.push(map.get(si, src(j, map.cols, target_cols)));
        }
    }
    Ok(Matrix::from_raw(target_rows, target_cols, out))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix_finalize(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent stream seed from `(seed, stream)`.
pub fn mix(seed: u64, stream: u64) -> u64 {
    splitmix_finalize(seed.wrapping_add(splitmix_finalize(stream.wrapping_add(GOLDEN_GAMMA))))
}

/// SplitMix64 generator. Single owner; clone to fork a stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeededRng {
    state: u64,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        splitmix_finalize(self.state)
    }

    /// Uniform in (0, 1]: `((x >> 11) + 1) * 2^-53`.
    pub fn next_unit(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller (cosine branch) on two successive outputs.
    pub fn gaussian(&mut self) -> f64 {
        let u1 = self.next_unit();
        let u2 = self.next_unit();
        (-2.0 * libm::log(u1)).sqrt() * libm::cos(2.0 * std::f64::consts::PI * u2)
    }

    pub fn gaussian_matrix(&mut self, rows: usize, cols: usize, scale: f64) -> Matrix {
        let data = (0..rows * cols).map(|_| self.gaussian() * scale).collect();
        Matrix::from_raw(rows, cols, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive_product(a: &Matrix, b: &Matrix) -> Vec<f64> {
        let mut out = Vec::new();
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.push(s);
            }
        }
        out
    }

    #[test]
    fn identity_product_is_noop() {
        let m = Matrix::from_rows(&[vec![1.5, -2.0], vec![0.25, 7.0]]).unwrap();
        assert_eq!(matmul(&Matrix::identity(2), &m).unwrap(), m);
    }

    #[test]
    fn hand_product() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn random_product_matches_naive_loop_bitwise() {
        let mut rng = SeededRng::new(11);
        for (n, k, m) in [(5, 7, 3), (8, 4, 9), (1, 1, 1), (3, 0, 2), (0, 2, 2), (13, 32, 17)] {
            let a = rng.gaussian_matrix(n, k, 1.0);
            let b = rng.gaussian_matrix(k, m, 1.0);
            assert_eq!(matmul(&a, &b).unwrap().data(), naive_product(&a, &b).as_slice(), "{n}x{k}x{m}");
        }
    }

    #[test]
    fn product_shape_error_names_both_shapes() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3 vs 2x3"), "{msg}");
    }

    #[test]
    fn construction_rejects_nan_and_bad_length() {
        assert!(matches!(Matrix::new(1, 2, vec![0.0, f64::NAN]), Err(Error::NonFinite { index: 1 })));
        assert!(matches!(Matrix::new(2, 2, vec![0.0; 3]), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_examples() {
        let eq = softmax_rows(&Matrix::from_rows(&[vec![3.0; 4]]).unwrap(), 2.5);
        assert!(eq.data().iter().all(|&p| p == 0.25));

        let s = softmax_rows(&Matrix::from_rows(&[vec![0.0, std::f64::consts::LN_2]]).unwrap(), 1.0);
        assert!((s.get(0, 0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.get(0, 1) - 2.0 / 3.0).abs() < 1e-15);

        let big = softmax_rows(&Matrix::from_rows(&[vec![1000.0, 0.0]]).unwrap(), 1.0);
        assert!(big.data().iter().all(|x| x.is_finite()));
        assert_eq!(big.get(0, 0), 1.0);
        assert!(big.get(0, 1) < 1e-300);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = SeededRng::new(3);
        let m = rng.gaussian_matrix(10_000, 9, 20.0);
        for row in softmax_rows(&m, 0.7).iter_rows() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn splitmix_seed_zero_first_output() {
        assert_eq!(SeededRng::new(0).next_u64(), 0xE220_A839_7B1D_CDAF);
    }

    #[test]
    fn golden_streams() {
        let golden = include_str!("../tests/data/splitmix64_golden.txt");
        for line in golden.lines().filter(|l| !l.starts_with('#') && !l.is_empty()) {
            let (seed, values) = line.split_once(':').unwrap();
            let mut rng = SeededRng::new(seed.trim().parse().unwrap());
            let expected: Vec<u64> = values.split_whitespace().map(|v| v.parse().unwrap()).collect();
            assert_eq!(expected.len(), 16);
            let got: Vec<u64> = (0..16).map(|_| rng.next_u64()).collect();
            assert_eq!(got, expected, "seed {seed}");
        }
    }

    #[test]
    fn gaussian_matches_reference_values() {
        // Box-Muller evaluated on the seed-42 stream by an independent script.
        let expected = [0.41471975043153003, -0.8918862136277573, 1.729593087937403, 0.545620436182866];
        let mut rng = SeededRng::new(42);
        for e in expected {
            assert!((rng.gaussian() - e).abs() < 1e-15);
        }
    }

    #[test]
    fn same_seed_same_gaussians() {
        let mut a = SeededRng::new(99);
        let mut b = SeededRng::new(99);
        for _ in 0..1000 {
            assert_eq!(a.gaussian().to_bits(), b.gaussian().to_bits());
        }
    }

    #[test]
    fn gaussian_mean_is_near_zero() {
        let mut rng = SeededRng::new(2024);
        let mean = (0..100_000).map(|_| rng.gaussian()).sum::<f64>() / 100_000.0;
        assert!(mean.abs() <= 0.02, "mean {mean}");
    }

    #[test]
    fn mix_matches_reference() {
        assert_eq!(mix(42, 0), 8_687_977_485_176_545_950);
        assert_ne!(mix(42, 0), mix(42, 1));
        assert_ne!(mix(42, 0), mix(43, 0));
    }

    #[test]
    fn resample_examples() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        assert_eq!(resample_nearest(&m, 2, 3).unwrap(), m);

        let one = Matrix::from_rows(&[vec![0.7]]).unwrap();
        assert!(resample_nearest(&one, 3, 5).unwrap().data().iter().all(|&x| x == 0.7));

        let checker = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let expected = Matrix::from_rows(&[
            vec![0.0, 0.0, 1.0, 1.0],
            vec![0.0, 0.0, 1.0, 1.0],
            vec![1.0, 1.0, 0.0, 0.0],
            vec![1.0, 1.0, 0.0, 0.0],
        ])
        .unwrap();
        assert_eq!(resample_nearest(&checker, 4, 4).unwrap(), expected);

        assert!(matches!(resample_nearest(&m, 0, 2), Err(Error::Dimension(_))));
    }

    proptest! {
        #[test]
        fn resampled_binary_map_stays_binary(
            bits in prop::collection::vec(any::<bool>(), 1..64),
            cols in 1usize..8,
            th in 1usize..20,
            tw in 1usize..20,
        ) {
            let rows = bits.len().div_ceil(cols);
            let mut data: Vec<f64> = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            data.resize(rows * cols, 0.0);
            let out = resample_nearest(&Matrix::new(rows, cols, data).unwrap(), th, tw).unwrap();
            prop_assert!(out.data().iter().all(|&x| x == 0.0 || x == 1.0));
        }
    }
}
