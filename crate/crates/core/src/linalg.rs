//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Sign convention for eigen/singular vectors: the largest-magnitude entry is positive
/// (the first such entry on ties).
pub fn canonical_sign(v: &mut DVector<f64>) {
    let mut best = 0usize;
    for i in 1..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if v.len() > 0 && v[best] < 0.0 {
        v.neg_mut();
    }
}

/// Eigen-decomposition of a symmetric matrix, eigenvalues sorted descending.
/// Columns of the returned matrix are the matching unit eigenvectors.
pub fn sym_eigen_desc(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = m.nrows();
    if n == 0 {
        return (DVector::zeros(0), DMatrix::zeros(0, 0));
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let vals = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vecs = DMatrix::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        let mut c = eig.eigenvectors.column(i).into_owned();
        canonical_sign(&mut c);
        vecs.set_column(k, &c);
    }
    (vals, vecs)
}

/// Thin SVD with singular values sorted descending: `(U, s, V)` with `m = U diag(s) Vᵀ`.
///
/// One-sided Jacobi rotations. nalgebra's bidiagonal SVD returned factors that
/// did not reconstruct some small, nearly rank-deficient inputs.
pub fn svd_desc(m: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    if m.nrows() < m.ncols() {
        let (v, s, u) = svd_tall(&m.transpose());
        return fix_signs(u, s, v);
    }
    let (u, s, v) = svd_tall(m);
    fix_signs(u, s, v)
}

fn svd_tall(m: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let (rows, n) = m.shape();
    let mut u = m.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    for _ in 0..80 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = u.column(p).norm_squared();
                let beta = u.column(q).norm_squared();
                let gamma = u.column(p).dot(&u.column(q));
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for mat in [&mut u, &mut v] {
                    for r in 0..mat.nrows() {
                        let (x, y) = (mat[(r, p)], mat[(r, q)]);
                        mat[(r, p)] = c * x - s * y;
                        mat[(r, q)] = s * x + c * y;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut s = DVector::zeros(n);
    let scale = (0..n).map(|j| u.column(j).norm()).fold(0.0, f64::max);
    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = (0..n).map(|j| u.column(j).norm()).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    let mut uo = DMatrix::zeros(rows, n);
    let mut vo = DMatrix::zeros(n, n);
    let mut kept: Vec<DVector<f64>> = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        s[k] = norms[j];
        vo.set_column(k, &v.column(j));
        if norms[j] > 1e-300 && norms[j] > 1e-14 * scale {
            let c = u.column(j) / norms[j];
            kept.push(c.clone());
            uo.set_column(k, &c);
        } else {
            // complete the left basis for (numerically) zero singular values
            let c = orthogonal_unit(rows, &kept);
            kept.push(c.clone());
            uo.set_column(k, &c);
        }
    }
    (uo, s, vo)
}

/// A unit vector orthogonal to the given orthonormal vectors.
fn orthogonal_unit(rows: usize, basis: &[DVector<f64>]) -> DVector<f64> {
    let mut best = DVector::zeros(rows);
    for k in 0..rows {
        let mut e = DVector::zeros(rows);
        e[k] = 1.0;
        for _ in 0..2 {
            for q in basis {
                let d = q.dot(&e);
                e.axpy(-d, q, 1.0);
            }
        }
        if e.norm() > best.norm() {
            best = e;
        }
    }
    let n = best.norm();
    if n > 0.0 {
        best / n
    } else {
        best
    }
}

fn fix_signs(mut u: DMatrix<f64>, s: DVector<f64>, mut v: DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    // sign fixed on the left vector, carried to the right one
    for j in 0..s.len() {
        let col = u.column(j);
        let mut best = 0usize;
        for r in 1..col.len() {
            if col[r].abs() > col[best].abs() {
                best = r;
            }
        }
        if col.len() > 0 && col[best] < 0.0 {
            u.column_mut(j).neg_mut();
            v.column_mut(j).neg_mut();
        }
    }
    (u, s, v)
}

/// Orthonormal basis for the column span of `m`, modified Gram-Schmidt with one
/// re-orthogonalisation pass. Columns whose residual norm falls below
/// `tol * max_column_norm` are dropped.
pub fn orthonormal_columns(m: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let scale = (0..m.ncols()).map(|j| m.column(j).norm()).fold(0.0, f64::max);
    let mut out: Vec<DVector<f64>> = Vec::new();
    if scale == 0.0 {
        return DMatrix::zeros(m.nrows(), 0);
    }
    for j in 0..m.ncols() {
        let mut v = m.column(j).into_owned();
        for _ in 0..2 {
            for q in &out {
                let d = q.dot(&v);
                v.axpy(-d, q, 1.0);
            }
        }
        let n = v.norm();
        if n > tol * scale {
            out.push(v / n);
        }
    }
    columns_to_matrix(m.nrows(), &out)
}

pub fn columns_to_matrix(rows: usize, cols: &[DVector<f64>]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows, cols.len());
    for (j, c) in cols.iter().enumerate() {
        m.set_column(j, c);
    }
    m
}

/// `D × N` matrix with one sample per column.
pub fn data_matrix(data: &[DVector<f64>]) -> DMatrix<f64> {
    let d = data.first().map_or(0, |x| x.len());
    columns_to_matrix(d, data)
}

pub fn mean(data: &[DVector<f64>]) -> DVector<f64> {
    let d = data.first().map_or(0, |x| x.len());
    let mut m = DVector::zeros(d);
    for x in data {
        m += x;
    }
    if !data.is_empty() {
        m /= data.len() as f64;
    }
    m
}

/// Biased (1/N) covariance about `mu`.
pub fn covariance(data: &[DVector<f64>], mu: &DVector<f64>) -> DMatrix<f64> {
    let d = mu.len();
    let mut c = DMatrix::zeros(d, d);
    for x in data {
        let r = x - mu;
        c.ger(1.0, &r, &r, 1.0);
    }
    if !data.is_empty() {
        c /= data.len() as f64;
    }
    c
}

/// Replace eigenvalues below `floor` by `floor`.
pub fn floor_eigenvalues(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let (vals, vecs) = sym_eigen_desc(m);
    if vals.iter().all(|&v| v >= floor) {
        return (m + m.transpose()) * 0.5;
    }
    let clamped = vals.map(|v| v.max(floor));
    &vecs * DMatrix::from_diagonal(&clamped) * vecs.transpose()
}

/// Lower Cholesky factor, adding growing jitter if the matrix is not numerically SPD.
pub fn robust_cholesky(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    if let Some(c) = sym.clone().cholesky() {
        return c.l();
    }
    let scale = (0..sym.nrows()).map(|i| sym[(i, i)].abs()).fold(0.0, f64::max).max(1e-300);
    let mut jitter = 1e-12 * scale;
    loop {
        let mut t = sym.clone();
        for i in 0..t.nrows() {
            t[(i, i)] += jitter;
        }
        if let Some(c) = t.cholesky() {
            return c.l();
        }
        jitter *= 10.0;
    }
}

/// `log det` of a symmetric positive definite matrix via its Cholesky factor.
pub fn log_det_spd(m: &DMatrix<f64>) -> f64 {
    let l = robust_cholesky(m);
    2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
}

/// `‖P1 − P2‖_F` for the orthogonal projectors onto two column spans.
pub fn projector_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let pa = a * a.transpose();
    let pb = b * b.transpose();
    (pa - pb).norm()
}

/// Lexicographic total order on vectors.
pub fn lex_cmp(a: &DVector<f64>, b: &DVector<f64>) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b.iter()) {
        let o = x.total_cmp(y);
        if o != std::cmp::Ordering::Equal {
            return o;
        }
    }
    a.len().cmp(&b.len())
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigen_sorted_and_reconstructs() {
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 1.0]);
        let (v, q) = sym_eigen_desc(&m);
        assert!(v[0] >= v[1] && v[1] >= v[2]);
        let r = &q * DMatrix::from_diagonal(&v) * q.transpose();
        assert!((r - m).norm() < 1e-12);
    }

    #[test]
    fn svd_sorted_and_reconstructs() {
        let m = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 7.0]);
        let (u, s, v) = svd_desc(&m);
        assert!(s[0] >= s[1]);
        let r = &u * DMatrix::from_diagonal(&s) * v.transpose();
        assert!((r - m).norm() < 1e-12);
    }

    #[test]
    fn gram_schmidt_drops_dependent_columns() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        let q = orthonormal_columns(&m, 1e-10);
        assert_eq!(q.ncols(), 2);
        assert!((q.transpose() * &q - DMatrix::identity(2, 2)).norm() < 1e-14);
    }

    #[test]
    fn log_det_matches_product_of_diagonal() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0, 5.0]));
        assert!((log_det_spd(&m) - 30f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn log_sum_exp_stable() {
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }

    fn check_svd(m: &DMatrix<f64>) {
        let (u, s, v) = svd_desc(m);
        let k = m.nrows().min(m.ncols());
        assert_eq!((u.shape(), s.len(), v.shape()), ((m.nrows(), k), k, (m.ncols(), k)));
        assert!(s.as_slice().windows(2).all(|w| w[0] >= w[1]));
        let r = &u * DMatrix::from_diagonal(&s) * v.transpose();
        assert!((r - m).amax() < 1e-12 * m.amax().max(1.0));
        assert!((u.transpose() * &u - DMatrix::identity(k, k)).amax() < 1e-12);
        assert!((v.transpose() * &v - DMatrix::identity(k, k)).amax() < 1e-12);
    }

    #[test]
    fn svd_nearly_rank_deficient_block() {
        // cross-Gram of two 3-D subspaces of R⁴: singular values (1, 1, 0.01714...)
        let m = DMatrix::from_column_slice(
            3,
            3,
            &[
                -0.1176027994312577,
                -0.7141320669671656,
                -0.4351415126432787,
                -0.031372020401931766,
                0.3714381206681977,
                0.4183364538680675,
                -0.6239927936900097,
                -0.4121171666272383,
                0.6434028277919901,
            ],
        );
        check_svd(&m);
        let (_, s, _) = svd_desc(&m);
        // oracle: square roots of the eigenvalues of mᵀm
        let (e, _) = sym_eigen_desc(&(m.transpose() * &m));
        for i in 0..3 {
            assert!((s[i] - e[i].max(0.0).sqrt()).abs() < 1e-12);
        }
    }

    proptest::proptest! {
        #[test]
        fn svd_reconstructs_random(seed in 0u64..100_000, r in 1usize..7, c in 1usize..7, rank in 0usize..7) {
            let mut rng = crate::rng::Rng::new(seed);
            let a = DMatrix::from_fn(r, rank.min(r).min(c), |_, _| rng.normal());
            let b = DMatrix::from_fn(rank.min(r).min(c), c, |_, _| rng.normal());
            check_svd(&(a * b));
            check_svd(&DMatrix::from_fn(r, c, |_, _| rng.normal()));
        }
    }
}
