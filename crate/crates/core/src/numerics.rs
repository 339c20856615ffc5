//! Small deterministic numeric kernels.
//!
//! Everything here works on `f64` and accumulates in ascending index order.
//! The matrix products are written in "axpy" form (`y_row += a * w_row`), so
//! every output element is a left-to-right sum over the reduction index.
//! That order does not depend on the target's vector width, which keeps
//! results bit-identical across machines.

use std::cmp::Ordering;

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_vec",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::shape(
                    "Matrix::from_rows",
                    format!("row {i} has {} entries, expected {cols}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// `self · w`, where `self` is `n×k` and `w` is `k×m`.
    pub fn matmul(&self, w: &Matrix) -> Result<Matrix> {
        if self.cols != w.rows {
            return Err(Error::shape(
                "matmul",
                format!("{}x{} times {}x{}", self.rows, self.cols, w.rows, w.cols),
            ));
        }
        let m = w.cols;
        let mut out = Matrix::zeros(self.rows, m);
        // four output rows per pass share each load of `w.row(k)`; every
        // element still accumulates over k in ascending order
        let mut blocks = out.data.chunks_exact_mut(4 * m);
        let mut i = 0;
        for block in &mut blocks {
            let (o0, rest) = block.split_at_mut(m);
            let (o1, rest) = rest.split_at_mut(m);
            let (o2, o3) = rest.split_at_mut(m);
            let (x0, x1, x2, x3) = (self.row(i), self.row(i + 1), self.row(i + 2), self.row(i + 3));
            for k in 0..self.cols {
                let wr = w.row(k);
                let (a0, a1, a2, a3) = (x0[k], x1[k], x2[k], x3[k]);
                for c in 0..m {
                    let wc = wr[c];
                    o0[c] += a0 * wc;
                    o1[c] += a1 * wc;
                    o2[c] += a2 * wc;
                    o3[c] += a3 * wc;
                }
            }
            i += 4;
        }
        for out_row in blocks.into_remainder().chunks_exact_mut(m) {
            for (k, &a) in self.row(i).iter().enumerate() {
                axpy(out_row, a, w.row(k));
            }
            i += 1;
        }
        Ok(out)
    }

    /// `self += xᵀ · dy`, with `x` `n×k`, `dy` `n×m` and `self` `k×m`.
    /// Each element accumulates over the shared row index in ascending order.
    pub fn add_xt_dy(&mut self, x: &Matrix, dy: &Matrix) -> Result<()> {
        if x.rows != dy.rows || self.rows != x.cols || self.cols != dy.cols {
            return Err(Error::shape(
                "add_xt_dy",
                format!(
                    "{}x{} += ({}x{})ᵀ · {}x{}",
                    self.rows, self.cols, x.rows, x.cols, dy.rows, dy.cols
                ),
            ));
        }
        let m = self.cols;
        let mut t = 0;
        // four rows of dy per pass over `self`; the sum for each element is
        // still formed in ascending t order
        while t + 4 <= x.rows {
            let (d0, d1, d2, d3) = (dy.row(t), dy.row(t + 1), dy.row(t + 2), dy.row(t + 3));
            let (x0, x1, x2, x3) = (x.row(t), x.row(t + 1), x.row(t + 2), x.row(t + 3));
            for k in 0..x.cols {
                let (a0, a1, a2, a3) = (x0[k], x1[k], x2[k], x3[k]);
                let row = &mut self.data[k * m..(k + 1) * m];
                for c in 0..m {
                    row[c] = row[c] + a0 * d0[c] + a1 * d1[c] + a2 * d2[c] + a3 * d3[c];
                }
            }
            t += 4;
        }
        while t < x.rows {
            let dy_row = dy.row(t);
            for (k, &a) in x.row(t).iter().enumerate() {
                axpy(&mut self.data[k * m..(k + 1) * m], a, dy_row);
            }
            t += 1;
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                "add_assign",
                format!("{:?} += {:?}", self.shape(), other.shape()),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                "max_abs_diff",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(max_abs_diff(&self.data, &other.data))
    }
}

/// `y += a · x`.
#[inline]
pub fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Dot product, accumulated in ascending index order.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

pub fn checked_dot(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("dot", format!("{} vs {}", a.len(), b.len())));
    }
    Ok(dot(a, b))
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn check_finite_nonempty(op: &'static str, v: &[f64]) -> Result<()> {
    if v.is_empty() {
        return Err(Error::InvalidArgument(format!("{op}: empty input")));
    }
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("{op}: entry {i} is {}", v[i])));
    }
    Ok(())
}

/// Numerically stable softmax (max subtraction).
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    check_finite_nonempty("softmax", v)?;
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= sum);
    Ok(out)
}

/// `log Σ exp(v)`, computed around the maximum.
pub fn logsumexp(v: &[f64]) -> Result<f64> {
    check_finite_nonempty("logsumexp", v)?;
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = v.iter().map(|x| (x - max).exp()).sum();
    Ok(max + s.ln())
}

pub fn log_softmax(v: &[f64]) -> Result<Vec<f64>> {
    let lse = logsumexp(v)?;
    Ok(v.iter().map(|x| x - lse).collect())
}

/// Indices of the `k` largest entries, largest first. Equal values are
/// ordered by ascending index.
pub fn topk_indices(v: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > v.len() {
        return Err(Error::InvalidArgument(format!(
            "top-k with k={k} over {} entries",
            v.len()
        )));
    }
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| {
        v[b].partial_cmp(&v[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    Ok(idx)
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Population standard deviation (divisor `n`).
pub fn population_std(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

fn is_constant(v: &[f64]) -> bool {
    v.iter().all(|&x| x == v[0])
}

/// Pearson correlation with population moments.
///
/// A constant operand makes the coefficient undefined; that is reported as
/// [`Error::Degenerate`] rather than a NaN.
pub fn pearson_corr(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(
            "pearson_corr",
            format!("{} vs {}", a.len(), b.len()),
        ));
    }
    if a.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "pearson_corr needs at least 2 points, got {}",
            a.len()
        )));
    }
    if is_constant(a) || is_constant(b) {
        return Err(Error::Degenerate("correlation with a constant vector".into()));
    }
    let n = a.len() as f64;
    let (ma, mb) = (mean(a), mean(b));
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    let denom = (va / n).sqrt() * (vb / n).sqrt();
    if denom == 0.0 {
        return Err(Error::Degenerate("zero variance".into()));
    }
    Ok((cov / n) / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        for c in [-3.5, 0.0, 17.0, 1e6] {
            let s = softmax(&[c; 4]).unwrap();
            assert!(s.iter().all(|&x| (x - 0.25).abs() < 1e-15));
        }
        let e = std::f64::consts::E;
        let s = softmax(&[1.0, 0.0]).unwrap();
        assert!((s[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((s[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
        assert!((s[0] - 0.73106).abs() < 1e-5);
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(matches!(softmax(&[]), Err(Error::InvalidArgument(_))));
        assert!(matches!(softmax(&[1.0, f64::NAN]), Err(Error::NonFinite(_))));
        assert!(matches!(
            softmax(&[f64::INFINITY]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn topk_examples() {
        assert_eq!(topk_indices(&[0.1, 0.9, 0.5], 2).unwrap(), vec![1, 2]);
        assert_eq!(topk_indices(&[0.5, 0.5, 0.1], 1).unwrap(), vec![0]);
        assert_eq!(topk_indices(&[3.0, 1.0, 2.0, 5.0], 4).unwrap(), vec![3, 0, 2, 1]);
        assert!(topk_indices(&[1.0], 0).is_err());
        assert!(topk_indices(&[1.0], 2).is_err());
    }

    #[test]
    fn pearson_examples() {
        assert!((pearson_corr(&[1., 2., 3.], &[1., 2., 3.]).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson_corr(&[1., 2., 3.], &[3., 2., 1.]).unwrap() + 1.0).abs() < 1e-15);
        assert!((pearson_corr(&[1., 2., 3.], &[1., 3., 2.]).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(
            pearson_corr(&[1., 1., 1.], &[1., 2., 3.]),
            Err(Error::Degenerate(_))
        ));
        assert!(pearson_corr(&[1.], &[1.]).is_err());
        assert!(pearson_corr(&[1., 2.], &[1., 2., 3.]).is_err());
    }

    #[test]
    fn matmul_checks_shapes() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(matches!(a.matmul(&b), Err(Error::Shape { .. })));
        assert!(Matrix::from_vec(2, 2, vec![1.0; 3]).is_err());
    }

    #[test]
    fn matmul_and_outer_accumulate_agree_with_loops() {
        let a = Matrix::from_rows(&[vec![1., 2., 3.], vec![-1., 0.5, 2.]]).unwrap();
        let w = Matrix::from_rows(&[vec![1., 0.], vec![0., 1.], vec![2., -1.]]).unwrap();
        let y = a.matmul(&w).unwrap();
        assert_eq!(y.as_slice(), &[7., -1., 3., -1.5]);
        let mut g = Matrix::zeros(3, 2);
        g.add_xt_dy(&a, &y).unwrap();
        // g = aᵀ y
        for i in 0..3 {
            for j in 0..2 {
                let want: f64 = (0..2).map(|t| a.get(t, i) * y.get(t, j)).sum();
                assert_eq!(g.get(i, j), want);
            }
        }
        assert_eq!(a.transpose().transpose(), a);
    }

    proptest! {
        #[test]
        fn blocked_kernels_match_sequential_loops_bitwise(
            n in 1usize..11, k in 1usize..6, m in 1usize..7, seed in 0u64..1000
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut gen = |r: usize, c: usize| {
                Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
            };
            let x = gen(n, k);
            let w = gen(k, m);
            let dy = gen(n, m);
            let mut g = gen(k, m);
            let g0 = g.clone();
            let y = x.matmul(&w).unwrap();
            g.add_xt_dy(&x, &dy).unwrap();
            for i in 0..n {
                for c in 0..m {
                    let mut acc = 0.0;
                    for j in 0..k {
                        acc += x.get(i, j) * w.get(j, c);
                    }
                    prop_assert_eq!(y.get(i, c).to_bits(), acc.to_bits());
                }
            }
            for j in 0..k {
                for c in 0..m {
                    let mut acc = g0.get(j, c);
                    for t in 0..n {
                        acc += x.get(t, j) * dy.get(t, c);
                    }
                    prop_assert_eq!(g.get(j, c).to_bits(), acc.to_bits());
                }
            }
        }

        #[test]
        fn softmax_shift_invariant(v in prop::collection::vec(-50.0f64..50.0, 1..12), c in -100.0f64..100.0) {
            let s1 = softmax(&v).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let s2 = softmax(&shifted).unwrap();
            prop_assert!(max_abs_diff(&s1, &s2) < 1e-12);
            prop_assert!((s1.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(s1.iter().all(|&x| x >= 0.0));
        }

        #[test]
        fn topk_is_deterministic_and_sorted(v in prop::collection::vec(-5i32..5, 1..20), k in 1usize..20) {
            let v: Vec<f64> = v.into_iter().map(f64::from).collect();
            let k = k.min(v.len());
            let a = topk_indices(&v, k).unwrap();
            let b = topk_indices(&v, k).unwrap();
            prop_assert_eq!(&a, &b);
            for w in a.windows(2) {
                prop_assert!(v[w[0]] > v[w[1]] || (v[w[0]] == v[w[1]] && w[0] < w[1]));
            }
            // nothing left out is larger than the smallest kept entry
            let min_kept = v[*a.last().unwrap()];
            for (i, &x) in v.iter().enumerate() {
                if !a.contains(&i) {
                    prop_assert!(x < min_kept || (x == min_kept && i > *a.last().unwrap()));
                }
            }
        }

        #[test]
        fn pearson_symmetric_and_bounded(
            a in prop::collection::vec(-10.0f64..10.0, 2..15),
            seed in prop::collection::vec(-10.0f64..10.0, 15),
        ) {
            let b = &seed[..a.len()];
            match (pearson_corr(&a, b), pearson_corr(b, &a)) {
                (Ok(x), Ok(y)) => {
                    prop_assert!((x - y).abs() < 1e-12);
                    prop_assert!(x.abs() <= 1.0 + 1e-12);
                }
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "asymmetric degeneracy"),
            }
        }
    }
}
