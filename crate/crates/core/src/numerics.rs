//! Dense linear-algebra and statistics kernels.
//!
//! Everything here is 64-bit and sums in a fixed sequential order, so results
//! are reproducible bit for bit across runs and thread counts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms below this are treated as zero by cosine similarity and row normalization.
pub const ZERO_NORM: f64 = 1e-12;

/// Sweep budget for the cyclic Jacobi eigensolver.
pub const JACOBI_MAX_SWEEPS: usize = 100;

/// Relative off-diagonal mass at which the Jacobi iteration stops.
pub const JACOBI_TOL: f64 = 1e-12;

/// Row-major dense matrix of finite `f64`s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimMismatch {
                expected: rows * cols,
                got: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / cols.max(1),
                col: pos % cols.max(1),
            });
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
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimMismatch {
                    expected: cols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// Squared Frobenius norm.
    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Stacks the rows of `other` under the rows of `self`.
    pub fn vstack(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.cols {
            return Err(Error::DimMismatch {
                expected: self.cols,
                got: other.cols,
            });
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Mat {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity `aᵀb / (‖a‖‖b‖)`.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let aa = dot(a, a);
    if aa.sqrt() < ZERO_NORM {
        return Err(Error::ZeroNorm { row: 0 });
    }
    let bb = dot(b, b);
    if bb.sqrt() < ZERO_NORM {
        return Err(Error::ZeroNorm { row: 1 });
    }
    // sqrt(aa * aa) rounds back to aa, so cosine_sim(a, a) is exactly 1
    Ok((dot(a, b) / (aa * bb).sqrt()).clamp(-1.0, 1.0))
}

/// Scales every row to unit Euclidean norm.
pub fn normalize_rows(w: &Mat) -> Result<Mat> {
    let mut out = w.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let n = norm(row);
        if n < ZERO_NORM {
            return Err(Error::ZeroNorm { row: i });
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

/// Fractional ranks (1-based), ties share the average of the ranks they span.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedSeries {
    pub ranks: Vec<f64>,
}

impl RankedSeries {
    pub fn new(values: &[f64]) -> Self {
        let n = values.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        let mut ranks = vec![0.0; n];
        let mut start = 0;
        while start < n {
            let mut end = start + 1;
            while end < n && values[order[end]] == values[order[start]] {
                end += 1;
            }
            // positions start..end hold ranks start+1..=end
            let avg = (start + 1 + end) as f64 / 2.0;
            for &idx in &order[start..end] {
                ranks[idx] = avg;
            }
            start = end;
        }
        Self { ranks }
    }
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::DimMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::DegenerateSeries);
    }
    Ok(())
}

/// Pearson product-moment correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::DegenerateSeries);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman rank correlation: Pearson over average-tie ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let rx = RankedSeries::new(x);
    let ry = RankedSeries::new(y);
    pearson(&rx.ranks, &ry.ranks)
}

/// Sum of every entry of `W Wᵀ`, evaluated as the squared norm of the column sums.
pub fn gram_sum(w: &Mat) -> f64 {
    let mut colsum = vec![0.0; w.cols()];
    for row in w.row_iter() {
        for (c, v) in colsum.iter_mut().zip(row) {
            *c += v;
        }
    }
    colsum.iter().map(|c| c * c).sum()
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, in descending order.
pub fn symmetric_eigenvalues(a: &Mat) -> Result<Vec<f64>> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::DimMismatch {
            expected: n,
            got: a.cols(),
        });
    }
    let mut m = a.clone();
    let total = m.frobenius_sq().sqrt();
    let off_mass = |m: &Mat| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m.get(i, j) * m.get(i, j);
                }
            }
        }
        s.sqrt()
    };
    let mut converged = off_mass(&m) <= JACOBI_TOL * total;
    let mut sweeps = 0;
    while !converged {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::NoConvergence {
                budget: JACOBI_MAX_SWEEPS,
            });
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m.get(k, p);
                    let akq = m.get(k, q);
                    m.set(k, p, c * akp - s * akq);
                    m.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = m.get(p, k);
                    let aqk = m.get(q, k);
                    m.set(p, k, c * apk - s * aqk);
                    m.set(q, k, s * apk + c * aqk);
                }
            }
        }
        sweeps += 1;
        converged = off_mass(&m) <= JACOBI_TOL * total;
    }
    let mut eig: Vec<f64> = (0..n).map(|i| m.get(i, i)).collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    Ok(eig)
}

/// Singular values of `w`, descending, `min(rows, cols)` of them.
///
/// Computed from the eigenvalues of the smaller of `WᵀW` and `WWᵀ`.
pub fn singular_values(w: &Mat) -> Result<Vec<f64>> {
    let (r, c) = w.shape();
    let gram = if c <= r {
        let mut g = Mat::zeros(c, c);
        for row in w.row_iter() {
            for i in 0..c {
                for j in i..c {
                    let v = g.get(i, j) + row[i] * row[j];
                    g.set(i, j, v);
                }
            }
        }
        for i in 0..c {
            for j in 0..i {
                g.set(i, j, g.get(j, i));
            }
        }
        g
    } else {
        let mut g = Mat::zeros(r, r);
        for i in 0..r {
            for j in i..r {
                let v = dot(w.row(i), w.row(j));
                g.set(i, j, v);
                g.set(j, i, v);
            }
        }
        g
    };
    let eig = symmetric_eigenvalues(&gram)?;
    Ok(eig.into_iter().map(|l| l.max(0.0).sqrt()).collect())
}

/// Divides a descending spectrum by its leading value; an all-zero spectrum is returned as is.
pub fn max_normalized(spectrum: &[f64]) -> Vec<f64> {
    match spectrum.first() {
        Some(&top) if top > 0.0 => spectrum.iter().map(|s| s / top).collect(),
        _ => spectrum.to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_sim(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_sim(&[1.0, 2.0], &[2.0, 1.0]).unwrap() - 0.8).abs() < 1e-15);
        assert!(matches!(
            cosine_sim(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::ZeroNorm { .. })
        ));
        assert!(matches!(
            cosine_sim(&[1.0], &[1.0, 0.0]),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn normalize_examples() {
        let w = Mat::from_rows(&[[3.0, 4.0]]).unwrap();
        let n = normalize_rows(&w).unwrap();
        assert!((n.get(0, 0) - 0.6).abs() < 1e-15 && (n.get(0, 1) - 0.8).abs() < 1e-15);
        assert_eq!(normalize_rows(&Mat::identity(3)).unwrap(), Mat::identity(3));
        let z = Mat::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap();
        assert!(matches!(normalize_rows(&z), Err(Error::ZeroNorm { row: 1 })));
    }

    #[test]
    fn mat_rejects_nonfinite() {
        assert!(matches!(
            Mat::new(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFinite { row: 0, col: 1 })
        ));
        assert!(Mat::new(2, 2, vec![1.0; 3]).is_err());
    }

    #[test]
    fn spearman_and_pearson_examples() {
        assert!((spearman(&[1., 2., 3.], &[1., 4., 9.]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&[1., 2., 3.], &[3., 2., 1.]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(RankedSeries::new(&[1., 2., 2., 3.]).ranks, vec![1.0, 2.5, 2.5, 4.0]);
        assert!((pearson(&[1., 2., 3.], &[2., 4., 6.]).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&[1., 2., 3.], &[6., 4., 2.]).unwrap() + 1.0).abs() < 1e-15);
        // mean y = 14/3, sxy = 8, sxx = 2, syy = 294/9
        let expected = 8.0 / (2.0f64 * 294.0 / 9.0).sqrt();
        assert!((pearson(&[1., 2., 3.], &[1., 4., 9.]).unwrap() - expected).abs() < 1e-14);
        assert!((expected - 0.989743318610787).abs() < 1e-12);
        assert!(matches!(
            spearman(&[1., 1., 1.], &[1., 2., 3.]),
            Err(Error::DegenerateSeries)
        ));
        assert!(matches!(pearson(&[1.], &[1.]), Err(Error::DegenerateSeries)));
    }

    #[test]
    fn gram_sum_examples() {
        assert_eq!(gram_sum(&Mat::identity(2)), 2.0);
        assert_eq!(gram_sum(&Mat::from_rows(&[[1.0, 0.0], [1.0, 0.0]]).unwrap()), 4.0);
        assert_eq!(gram_sum(&Mat::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]).unwrap()), 0.0);
    }

    #[test]
    fn singular_value_examples() {
        let s = singular_values(&Mat::identity(3)).unwrap();
        for v in s {
            assert!((v - 1.0).abs() < 1e-12);
        }
        let u = [0.6, 0.0, 0.8];
        let w = Mat::from_rows(&[u, u, u, u]).unwrap();
        let s = singular_values(&w).unwrap();
        assert!((s[0] - 2.0).abs() < 1e-12);
        assert!(s[1..].iter().all(|v| v.abs() < 1e-7));
        assert_eq!(max_normalized(&[2.0, 1.0, 0.0]), vec![1.0, 0.5, 0.0]);
    }

    #[test]
    fn singular_values_wide_matrix() {
        let w = Mat::from_rows(&[[1.0, 2.0, 3.0, 4.0], [0.5, -1.0, 2.0, 0.0]]).unwrap();
        let s = singular_values(&w).unwrap();
        assert_eq!(s.len(), 2);
        let energy: f64 = s.iter().map(|v| v * v).sum();
        assert!((energy - w.frobenius_sq()).abs() < 1e-10 * w.frobenius_sq());
    }

    /// Roots of the characteristic polynomial of a symmetric 2×2 or 3×3 matrix in closed form.
    fn charpoly_eigenvalues(a: &Mat) -> Vec<f64> {
        let mut out = match a.rows() {
            2 => {
                let (p, q, r) = (a.get(0, 0), a.get(0, 1), a.get(1, 1));
                let tr = p + r;
                let det = p * r - q * q;
                let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
                vec![tr / 2.0 + disc, tr / 2.0 - disc]
            }
            3 => {
                // trigonometric solution of the depressed cubic
                let g = |i, j| a.get(i, j);
                let q = (g(0, 0) + g(1, 1) + g(2, 2)) / 3.0;
                let p1 = g(0, 1).powi(2) + g(0, 2).powi(2) + g(1, 2).powi(2);
                let p2 = (g(0, 0) - q).powi(2) + (g(1, 1) - q).powi(2) + (g(2, 2) - q).powi(2)
                    + 2.0 * p1;
                let p = (p2 / 6.0).sqrt();
                if p == 0.0 {
                    return vec![q; 3];
                }
                let b = |i: usize, j: usize| (g(i, j) - if i == j { q } else { 0.0 }) / p;
                let det_b = b(0, 0) * (b(1, 1) * b(2, 2) - b(1, 2) * b(2, 1))
                    - b(0, 1) * (b(1, 0) * b(2, 2) - b(1, 2) * b(2, 0))
                    + b(0, 2) * (b(1, 0) * b(2, 1) - b(1, 1) * b(2, 0));
                let phi = (det_b / 2.0).clamp(-1.0, 1.0).acos() / 3.0;
                let e1 = q + 2.0 * p * phi.cos();
                let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
                vec![e1, 3.0 * q - e1 - e3, e3]
            }
            _ => unreachable!(),
        };
        out.sort_by(|a, b| b.total_cmp(a));
        out
    }

    #[test]
    fn singular_values_match_characteristic_polynomial() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..200 {
            let d = 2 + trial % 2;
            let n = d + rng.random_range(0..4);
            let data: Vec<f64> = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let w = Mat::new(n, d, data).unwrap();
            let mut g = Mat::zeros(d, d);
            for i in 0..d {
                for j in 0..d {
                    g.set(i, j, (0..n).map(|k| w.get(k, i) * w.get(k, j)).sum());
                }
            }
            let expected: Vec<f64> = charpoly_eigenvalues(&g)
                .into_iter()
                .map(|l| l.max(0.0).sqrt())
                .collect();
            let got = singular_values(&w).unwrap();
            for (a, b) in got.iter().zip(&expected) {
                assert!((a - b).abs() < 1e-8, "{got:?} vs {expected:?}");
            }
        }
    }

    #[test]
    fn spectrum_energy_equals_frobenius() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..15).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = Mat::new(5, 3, data).unwrap();
        let s = singular_values(&w).unwrap();
        let energy: f64 = s.iter().map(|v| v * v).sum();
        assert!((energy - w.frobenius_sq()).abs() <= 1e-8 * w.frobenius_sq());
        assert!(s.windows(2).all(|p| p[0] >= p[1]));
    }

    proptest! {
        #[test]
        fn cosine_symmetric_and_scale_invariant(
            a in prop::collection::vec(-5.0f64..5.0, 4),
            b in prop::collection::vec(-5.0f64..5.0, 4),
            c in 0.01f64..100.0,
        ) {
            prop_assume!(norm(&a) > 1e-3 && norm(&b) > 1e-3);
            let ab = cosine_sim(&a, &b).unwrap();
            prop_assert_eq!(ab, cosine_sim(&b, &a).unwrap());
            let ca: Vec<f64> = a.iter().map(|v| v * c).collect();
            prop_assert!((cosine_sim(&ca, &b).unwrap() - ab).abs() < 1e-12);
            prop_assert_eq!(cosine_sim(&a, &a).unwrap(), 1.0);
        }

        #[test]
        fn spearman_invariant_under_monotone_transform(
            x in prop::collection::vec(-10i32..10, 3..30),
            y in prop::collection::vec(-10i32..10, 3..30),
        ) {
            let n = x.len().min(y.len());
            let x: Vec<f64> = x[..n].iter().map(|&v| v as f64).collect();
            let y: Vec<f64> = y[..n].iter().map(|&v| v as f64).collect();
            if let Ok(r) = spearman(&x, &y) {
                let tx: Vec<f64> = x.iter().map(|v| (v / 3.0).exp() + 7.0).collect();
                prop_assert!((spearman(&tx, &y).unwrap() - r).abs() < 1e-12);
            }
        }

        #[test]
        fn ranks_sum_to_triangular_number(x in prop::collection::vec(-4i32..4, 1..40)) {
            let x: Vec<f64> = x.into_iter().map(f64::from).collect();
            let n = x.len() as f64;
            let s: f64 = RankedSeries::new(&x).ranks.iter().sum();
            prop_assert!((s - n * (n + 1.0) / 2.0).abs() < 1e-9);
        }
    }
}
