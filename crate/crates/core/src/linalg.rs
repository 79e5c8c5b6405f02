//! Dense helpers: Haar-distributed orthogonal matrices, basis completion and
//! a full (square-factor) SVD.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Deterministic generator for a (seed, stream) pair. Streams keep the
/// draws of independent model components apart.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn gaussian_vector(rng: &mut impl Rng, n: usize, std: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| std * rng.sample::<f64, _>(StandardNormal))
}

pub fn gaussian_matrix(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> DMatrix<f64> {
    // column-major fill order, fixed for reproducibility
    DMatrix::from_fn(rows, cols, |_, _| std * rng.sample::<f64, _>(StandardNormal))
}

/// Haar-distributed n×n orthogonal matrix (QR of a Gaussian matrix with the
/// sign of R's diagonal folded into Q).
pub fn haar_orthogonal(rng: &mut impl Rng, n: usize) -> DMatrix<f64> {
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let g = gaussian_matrix(rng, n, n, 1.0);
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Extends the orthonormal columns of `u` (m×r) to an m×m orthogonal matrix
/// whose leading r columns equal `u` up to rounding.
pub fn complete_orthonormal(u: &DMatrix<f64>) -> DMatrix<f64> {
    let (m, r) = u.shape();
    if r == m {
        return u.clone();
    }
    let mut aug = DMatrix::<f64>::zeros(m, r + m);
    aug.view_mut((0, 0), (m, r)).copy_from(u);
    aug.view_mut((0, r), (m, m)).fill_with_identity();
    let qr = aug.qr();
    let mut q = qr.q();
    for j in 0..r {
        if q.column(j).dot(&u.column(j)) < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Full SVD `w = u · diag(s) · vt` with square orthogonal `u` (m×m) and
/// `vt` (n×n), singular values sorted descending. Values at or below the
/// numerical rank threshold are dropped from `s`.
pub fn full_svd(w: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let (m, n) = w.shape();
    let k = m.min(n);
    if k == 0 {
        return (DMatrix::identity(m, m), Vec::new(), DMatrix::identity(n, n));
    }
    let svd = w.clone().svd(true, true);
    let u = svd.u.expect("left singular vectors requested");
    let vt = svd.v_t.expect("right singular vectors requested");
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let s_max = order
        .first()
        .map(|&i| svd.singular_values[i])
        .unwrap_or(0.0);
    let tol = (m.max(n) as f64) * f64::EPSILON * s_max;
    let rank = order
        .iter()
        .take_while(|&&i| svd.singular_values[i] > tol && s_max > 0.0)
        .count();

    let u_sorted = DMatrix::from_fn(m, k, |i, j| u[(i, order[j])]);
    let v_sorted = DMatrix::from_fn(n, k, |i, j| vt[(order[j], i)]);
    let s = order[..rank].iter().map(|&i| svd.singular_values[i]).collect();
    let u_full = complete_orthonormal(&u_sorted);
    let v_full = complete_orthonormal(&v_sorted);
    (u_full, s, v_full.transpose())
}

/// max |QᵀQ - I|
pub fn orthogonality_defect(q: &DMatrix<f64>) -> f64 {
    let n = q.ncols();
    let g = q.transpose() * q;
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((g[(i, j)] - target).abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn haar_is_orthogonal_and_seeded() {
        let q1 = haar_orthogonal(&mut rng_for(7, 0), 30);
        let q2 = haar_orthogonal(&mut rng_for(7, 0), 30);
        assert!(orthogonality_defect(&q1) < 1e-12);
        assert_eq!(q1, q2);
        let q3 = haar_orthogonal(&mut rng_for(7, 1), 30);
        assert_ne!(q1, q3);
    }

    #[test]
    fn completion_keeps_leading_columns() {
        let q = haar_orthogonal(&mut rng_for(1, 0), 9);
        let u = q.columns(0, 4).into_owned();
        let full = complete_orthonormal(&u);
        assert!(orthogonality_defect(&full) < 1e-12);
        assert!((full.columns(0, 4) - &u).amax() < 1e-12);
    }

    #[test]
    fn full_svd_reconstructs_wide_and_tall() {
        for &(m, n) in &[(8, 12), (12, 8), (5, 5)] {
            let w = gaussian_matrix(&mut rng_for(3, (m * n) as u64), m, n, 1.0);
            let (u, s, vt) = full_svd(&w);
            let mut sigma = DMatrix::zeros(m, n);
            for (i, si) in s.iter().enumerate() {
                sigma[(i, i)] = *si;
            }
            let rec = &u * sigma * &vt;
            assert!((rec - &w).amax() < 1e-12 * w.amax().max(1.0));
            assert!(s.windows(2).all(|p| p[0] >= p[1]));
        }
    }
}
