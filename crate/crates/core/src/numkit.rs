//! Deterministic numeric primitives shared by every other module.
//!
//! Everything here is `f64` and single-threaded so that results are
//! bit-reproducible across runs and platforms.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of finite `f64` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::invalid(format!("non-finite matrix entry at {i}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Appends one row; `row.len()` must equal `cols`.
    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.cols {
            return Err(Error::shape(format!(
                "row of length {} pushed onto matrix with {} columns",
                row.len(),
                self.cols
            )));
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    /// New matrix holding the given rows, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::range(format!("row {i} of {}", self.rows)));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        })
    }

    /// Columns `[start, start + width)` as a new matrix.
    pub fn column_block(&self, start: usize, width: usize) -> Result<Self> {
        if start + width > self.cols {
            return Err(Error::range(format!(
                "columns {start}..{} of {}",
                start + width,
                self.cols
            )));
        }
        let mut data = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..start + width]);
        }
        Ok(Self {
            rows: self.rows,
            cols: width,
            data,
        })
    }
}

/// Standard matrix product, accumulated row-major and left to right.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// `x · m` for a row vector `x`.
pub fn vecmat(x: &[f64], m: &Matrix) -> Result<Vec<f64>> {
    if x.len() != m.rows {
        return Err(Error::shape(format!(
            "vector of length {} times {}x{} matrix",
            x.len(),
            m.rows,
            m.cols
        )));
    }
    let mut out = vec![0.0; m.cols];
    for (k, &xk) in x.iter().enumerate() {
        for (o, &mkj) in out.iter_mut().zip(m.row(k)) {
            *o += xk * mkj;
        }
    }
    Ok(out)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Max-shifted softmax.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Empty("softmax input"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("softmax input must be finite"));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for o in &mut out {
        *o /= sum;
    }
    Ok(out)
}

/// Descending by value, ascending by index on ties.
fn rank_order(v: &[f64], a: usize, b: usize) -> Ordering {
    v[b].partial_cmp(&v[a])
        .unwrap_or(Ordering::Equal)
        .then(a.cmp(&b))
}

/// Indices of the `k` largest entries, largest first; ties go to the lower index.
pub fn top_k_indices(v: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > v.len() {
        return Err(Error::invalid(format!(
            "top-{k} requested from {} values",
            v.len()
        )));
    }
    let mut idx: Vec<usize> = (0..v.len()).collect();
    if k == 0 {
        return Ok(Vec::new());
    }
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, |&a, &b| rank_order(v, a, b));
        idx.truncate(k);
    }
    idx.sort_unstable_by(|&a, &b| rank_order(v, a, b));
    Ok(idx)
}

/// Index of the maximum entry (lowest index on ties). `None` on empty input.
pub fn argmax(v: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &x) in v.iter().enumerate() {
        match best {
            Some(b) if v[b] >= x => {}
            _ => best = Some(i),
        }
    }
    best
}

/// SplitMix64 step; used for seeding and for deriving independent streams.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded xoshiro256** generator.
///
/// The four state words are filled by successive SplitMix64 outputs
/// starting from `seed`. Each step computes
///
/// ```text
/// out = rotl(s1 * 5, 7) * 9
/// t   = s1 << 17
/// s2 ^= s0; s3 ^= s1; s1 ^= s2; s0 ^= s3; s2 ^= t; s3 = rotl(s3, 45)
/// ```
///
/// Uniform reals use the top 53 bits: `(out >> 11) * 2^-53`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeededRng {
    seed: u64,
    state: [u64; 4],
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let state = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Self { seed, state }
    }

    /// Generator for a sub-stream identified by `path`, independent of
    /// how many draws other streams have made.
    pub fn derive(seed: u64, path: &[u64]) -> Self {
        let mut sm = seed;
        let mut mixed = splitmix64(&mut sm);
        for &p in path {
            let mut s = mixed ^ p.wrapping_mul(0xD134_2543_DE82_EF95);
            mixed = splitmix64(&mut s);
        }
        Self::new(mixed)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        // rejection sampling keeps the draw unbiased
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }

    /// Standard normal via Box-Muller (one draw per call, two uniforms consumed).
    pub fn gaussian(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct values from `[0, n)` in draw order.
    pub fn sample_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot draw {k} distinct values from {n}");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(softmax(&[1000.0, 1000.0]).unwrap(), vec![0.5, 0.5]);
        assert!(matches!(softmax(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k_indices(&[0.1, 0.9, 0.3, 0.5], 2).unwrap(), vec![1, 3]);
        assert_eq!(top_k_indices(&[0.5, 0.5], 1).unwrap(), vec![0]);
        assert_eq!(top_k_indices(&[3.0, 1.0, 2.0], 3).unwrap(), vec![0, 2, 1]);
        assert!(top_k_indices(&[1.0], 2).is_err());
        assert!(top_k_indices(&[1.0], 0).unwrap().is_empty());
    }

    #[test]
    fn matmul_examples() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&Matrix::identity(2), &m).unwrap(), m);
        let ones = Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let prod = matmul(&m, &ones).unwrap();
        assert_eq!(prod.data(), &[3.0, 7.0]);
        assert_eq!(
            matmul(&Matrix::zeros(2, 2), &m).unwrap(),
            Matrix::zeros(2, 2)
        );
        assert!(matches!(
            matmul(&m, &Matrix::zeros(3, 1)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn matrix_rejects_bad_data() {
        assert!(Matrix::new(2, 2, vec![0.0; 3]).is_err());
        assert!(Matrix::new(1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), Some(1));
        assert_eq!(argmax(&[]), None);
    }

    #[test]
    fn rng_streams_reproduce() {
        let a: Vec<u64> = {
            let mut r = SeededRng::new(42);
            (0..8).map(|_| r.next_u64()).collect()
        };
        let b: Vec<u64> = {
            let mut r = SeededRng::new(42);
            (0..8).map(|_| r.next_u64()).collect()
        };
        assert_eq!(a, b);
        let mut c = SeededRng::new(43);
        assert_ne!(a[0], c.next_u64());
        assert_ne!(
            SeededRng::derive(1, &[0, 1]).next_u64(),
            SeededRng::derive(1, &[1, 0]).next_u64()
        );
    }

    #[test]
    fn rng_uniform_range() {
        let mut r = SeededRng::new(5);
        for _ in 0..1000 {
            let x = r.next_f64();
            assert!((0.0..1.0).contains(&x));
            assert!(r.below(7) < 7);
        }
        let d = r.sample_distinct(10, 10);
        let mut s = d.clone();
        s.sort();
        assert_eq!(s, (0..10).collect::<Vec<_>>());
    }

    fn sort_oracle(v: &[f64], k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        // stable sort keeps lower indices first among equal values
        idx.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).unwrap());
        idx.truncate(k);
        idx
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn softmax_is_a_distribution(v in prop::collection::vec(-50.0f64..50.0, 1..32)) {
            let p = softmax(&v).unwrap();
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            for &x in &p {
                prop_assert!(x > 0.0 && x <= 1.0);
            }
        }
    }

    proptest! {
        #[test]
        fn top_k_matches_full_sort(
            v in prop::collection::vec(prop_oneof![(0u8..4).prop_map(f64::from), -1.0f64..1.0], 1..64),
            frac in 0.0f64..=1.0,
        ) {
            let k = ((v.len() as f64) * frac).floor() as usize;
            prop_assert_eq!(top_k_indices(&v, k).unwrap(), sort_oracle(&v, k));
        }

        #[test]
        fn matmul_is_associative(seed in any::<u64>()) {
            let mut rng = SeededRng::new(seed);
            let mut rand8 = || {
                Matrix::new(8, 8, (0..64).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
            };
            let (a, b, c) = (rand8(), rand8(), rand8());
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            let scale = left.data().iter().fold(1.0f64, |m, x| m.max(x.abs()));
            for (x, y) in left.data().iter().zip(right.data()) {
                prop_assert!((x - y).abs() <= 1e-9 * scale);
            }
        }
    }
}
