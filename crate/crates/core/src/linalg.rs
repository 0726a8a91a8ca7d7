// SPDX-License-Identifier: MIT OR Apache-2.0

//! Cosine similarity, Jacobi SVD, Moore-Penrose pseudo-inverse, and a
//! central-difference gradient used as an oracle for the tape.

use crate::error::{Error, Result};
use crate::tensor::{dot, norm, Tensor};

/// Norms below this are treated as zero.
pub const NORM_EPS: f64 = 1e-12;

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape(format!("cosine of {} vs {}", u.len(), v.len())));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu < NORM_EPS || nv < NORM_EPS {
        return Err(Error::ZeroNorm);
    }
    // Symmetric: dot and the norm product are both commutative in IEEE arithmetic.
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

pub fn normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if n < NORM_EPS {
        return Err(Error::ZeroNorm);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

#[derive(Debug, Clone, Copy)]
pub struct SvdOptions {
    /// Singular values below `rel_tol * sigma_max` are treated as zero.
    pub rel_tol: f64,
    pub max_sweeps: usize,
}

impl Default for SvdOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-10,
            max_sweeps: 60,
        }
    }
}

/// Thin SVD `M = U diag(s) Vᵀ` for a matrix with `rows >= cols`.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Tensor,
    pub singular_values: Vec<f64>,
    pub v: Tensor,
}

/// One-sided (Hestenes) Jacobi SVD. Requires `rows >= cols`.
pub fn svd_tall(m: &Tensor, max_sweeps: usize) -> Result<Svd> {
    let (rows, cols) = (m.rows(), m.cols());
    if rows < cols {
        return Err(Error::shape("svd_tall needs rows >= cols"));
    }
    // Work on columns stored contiguously.
    let mut a: Vec<Vec<f64>> = (0..cols).map(|j| m.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..cols).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let mut converged = cols < 2;
    for _ in 0..max_sweeps {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha = dot(&a[p], &a[p]);
                let beta = dot(&a[q], &a[q]);
                let gamma = dot(&a[p], &a[q]);
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::SvdFailure { sweeps: max_sweeps });
    }

    let singular_values: Vec<f64> = a.iter().map(|col| norm(col)).collect();
    let mut u = Tensor::zeros(&[rows, cols]);
    for (j, col) in a.iter().enumerate() {
        let s = singular_values[j];
        for (i, x) in col.iter().enumerate() {
            u.data_mut()[i * cols + j] = if s > 0.0 { x / s } else { 0.0 };
        }
    }
    let mut vt = Tensor::zeros(&[cols, cols]);
    for (j, col) in v.iter().enumerate() {
        for (i, x) in col.iter().enumerate() {
            vt.data_mut()[i * cols + j] = *x;
        }
    }
    Ok(Svd {
        u,
        singular_values,
        v: vt,
    })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

pub fn pseudo_inverse(m: &Tensor) -> Result<Tensor> {
    pseudo_inverse_with(m, SvdOptions::default())
}

pub fn pseudo_inverse_with(m: &Tensor, opts: SvdOptions) -> Result<Tensor> {
    if !m.is_finite() {
        return Err(Error::NonFinite("pseudo_inverse input".into()));
    }
    if m.rows() < m.cols() {
        return Ok(pseudo_inverse_with(&m.transpose(), opts)?.transpose());
    }
    let (rows, cols) = (m.rows(), m.cols());
    let svd = svd_tall(m, opts.max_sweeps)?;
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let cutoff = opts.rel_tol * smax;
    // M† = V diag(1/s) Uᵀ, shape cols × rows.
    let mut out = vec![0.0; cols * rows];
    for (j, &s) in svd.singular_values.iter().enumerate() {
        if s <= cutoff || s == 0.0 {
            continue;
        }
        let inv = 1.0 / s;
        for i in 0..cols {
            let vij = svd.v.get(i, j) * inv;
            if vij == 0.0 {
                continue;
            }
            for r in 0..rows {
                out[i * rows + r] += vij * svd.u.get(r, j);
            }
        }
    }
    Tensor::matrix(cols, rows, out)
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn finite_difference_gradient<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe)?;
        probe[i] = x[i] - h;
        let down = f(&probe)?;
        probe[i] = x[i];
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian, rng_for};
    use proptest::prelude::*;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = rng_for(seed, "linalg-test");
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| gaussian(&mut rng)).collect()).unwrap()
    }

    fn frob_residual(a: &Tensor, b: &Tensor) -> f64 {
        a.sub(b).unwrap().norm()
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1., 0.], &[1., 0.]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1., 0.], &[0., 1.]).unwrap(), 0.0);
        // hand arithmetic: 32 / (sqrt(14) * sqrt(77))
        let expect = 32.0 / (14.0f64.sqrt() * 77.0f64.sqrt());
        let got = cosine_similarity(&[1., 2., 3.], &[4., 5., 6.]).unwrap();
        assert!((got - expect).abs() < 1e-15);
        assert!(matches!(cosine_similarity(&[0., 0.], &[1., 0.]), Err(Error::ZeroNorm)));
    }

    #[test]
    fn pinv_examples() {
        let i3 = Tensor::identity(3);
        assert!(pseudo_inverse(&i3).unwrap().max_abs_diff(&i3) < 1e-15);
        let d = Tensor::diag(&[2.0, 0.0]);
        let p = pseudo_inverse(&d).unwrap();
        assert!(p.max_abs_diff(&Tensor::diag(&[0.5, 0.0])) < 1e-15);
        let m = random_matrix(4, 2, 3);
        let mp = pseudo_inverse(&m).unwrap();
        assert_eq!(mp.shape(), &[2, 4]);
        let back = m.matmul(&mp).unwrap().matmul(&m).unwrap();
        assert!(frob_residual(&back, &m) < 1e-8);
    }

    #[test]
    fn svd_failure_reported() {
        let m = random_matrix(5, 5, 9);
        assert!(matches!(svd_tall(&m, 0), Err(Error::SvdFailure { .. })));
    }

    #[test]
    fn fd_examples() {
        let g = finite_difference_gradient(|x| Ok(x[0] * x[0] + x[1] * x[1]), &[1.0, 2.0], 1e-5).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] - 4.0).abs() < 1e-8);
        let g = finite_difference_gradient(|_| Ok(3.5), &[1.0, 2.0, 3.0], 1e-5).unwrap();
        assert_eq!(g, vec![0.0; 3]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn penrose_conditions(rows in 1usize..40, cols in 1usize..40, rank_cut in 0usize..3, seed in 0u64..1000) {
            let mut m = random_matrix(rows, cols, seed);
            // Optionally make it rank-deficient by duplicating columns.
            for _ in 0..rank_cut.min(cols.saturating_sub(1)) {
                for r in 0..rows {
                    let v = m.get(r, 0);
                    m.data_mut()[r * cols + cols - 1] = v;
                }
            }
            let mp = pseudo_inverse(&m).unwrap();
            let r1 = frob_residual(&m.matmul(&mp).unwrap().matmul(&m).unwrap(), &m);
            let r2 = frob_residual(&mp.matmul(&m).unwrap().matmul(&mp).unwrap(), &mp);
            prop_assert!(r1 < 1e-8, "MM+M residual {r1}");
            prop_assert!(r2 < 1e-8, "M+MM+ residual {r2}");
            let mmp = m.matmul(&mp).unwrap();
            prop_assert!(frob_residual(&mmp, &mmp.transpose()) < 1e-8);
            let mpm = mp.matmul(&m).unwrap();
            prop_assert!(frob_residual(&mpm, &mpm.transpose()) < 1e-8);
        }

        #[test]
        fn cosine_symmetric_and_bounded(u in prop::collection::vec(-10.0f64..10.0, 1..20), seed in 0u64..100) {
            let mut rng = rng_for(seed, "cos");
            let v: Vec<f64> = u.iter().map(|_| gaussian(&mut rng)).collect();
            if let (Ok(a), Ok(b)) = (cosine_similarity(&u, &v), cosine_similarity(&v, &u)) {
                prop_assert_eq!(a, b);
                prop_assert!(a.abs() <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn penrose_at_64() {
        let m = random_matrix(64, 64, 17);
        let mp = pseudo_inverse(&m).unwrap();
        assert!(frob_residual(&m.matmul(&mp).unwrap().matmul(&m).unwrap(), &m) < 1e-8);
        assert!(frob_residual(&mp.matmul(&m).unwrap().matmul(&mp).unwrap(), &mp) < 1e-8);
    }
}
