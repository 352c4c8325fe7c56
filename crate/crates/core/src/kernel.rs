//! Squared-exponential GP covariance over the observed covariate rows, built
//! and factorized once per fit.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 0.1;

/// `R(x, x') = exp(-|x - x'|²) + ε² 1[x = x']` over the rows of `x`.
#[derive(Debug, Clone)]
pub struct KernelCache {
    x: DMatrix<f64>,
    epsilon: f64,
    r: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    lower: DMatrix<f64>,
}

pub fn kernel_value(a: &[f64], b: &[f64]) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum();
    (-d2).exp()
}

/// Builds and factorizes the kernel matrix over the rows of `x_matrix`.
pub fn build_kernel(x_matrix: &DMatrix<f64>, epsilon: f64) -> Result<KernelCache> {
    let n = x_matrix.nrows();
    if n == 0 {
        return Err(Error::Domain("kernel needs at least one row".into()));
    }
    if x_matrix.iter().any(|v| !v.is_finite()) || !epsilon.is_finite() {
        return Err(Error::Factorization("non-finite covariates or nugget".into()));
    }
    let rows: Vec<Vec<f64>> = (0..n).map(|i| x_matrix.row(i).iter().copied().collect()).collect();
    let mut r = DMatrix::zeros(n, n);
    for i in 0..n {
        r[(i, i)] = 1.0 + epsilon * epsilon;
        for j in 0..i {
            let v = kernel_value(&rows[i], &rows[j]);
            r[(i, j)] = v;
            r[(j, i)] = v;
        }
    }
    let chol = Cholesky::new(r.clone())
        .ok_or_else(|| Error::Factorization(format!("kernel matrix ({n}×{n}, ε = {epsilon}) is not positive definite")))?;
    let lower = chol.l();
    Ok(KernelCache { x: x_matrix.clone(), epsilon, r, chol, lower })
}

impl KernelCache {
    pub fn n(&self) -> usize {
        self.r.nrows()
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.x
    }

    /// Lower Cholesky factor L with L Lᵀ = R.
    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    /// Both endpoints share one kernel formula, hence one factorization.
    pub fn for_endpoint(&self, _endpoint: usize) -> &KernelCache {
        self
    }

    /// R⁻¹ rhs.
    pub fn solve(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        if rhs.len() != self.n() {
            return Err(Error::Domain(format!("rhs length {} does not match kernel size {}", rhs.len(), self.n())));
        }
        Ok(self.chol.solve(rhs))
    }

    pub fn solve_matrix(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if rhs.nrows() != self.n() {
            return Err(Error::Domain(format!("rhs has {} rows, kernel size is {}", rhs.nrows(), self.n())));
        }
        Ok(self.chol.solve(rhs))
    }

    /// out = L z, using the column-major layout of the factor.
    pub fn lower_mul(&self, z: &[f64], out: &mut [f64]) {
        let n = self.n();
        debug_assert_eq!(z.len(), n);
        out.fill(0.0);
        for (j, &zj) in z.iter().enumerate() {
            if zj == 0.0 {
                continue;
            }
            let col = &self.lower.as_slice()[j * n..(j + 1) * n];
            for (o, &l) in out[j..].iter_mut().zip(&col[j..]) {
                *o += l * zj;
            }
        }
    }

    /// Kernel vector k(x_new, X).
    pub fn cross(&self, x_new: &[f64]) -> DVector<f64> {
        DVector::from_fn(self.n(), |i, _| {
            let row: Vec<f64> = self.x.row(i).iter().copied().collect();
            kernel_value(x_new, &row)
        })
    }

    /// Posterior-mean kriging at `x_new` for one GP path observed at the rows:
    /// `[1, x_new]·β + k(x_new, X)ᵀ R⁻¹ (θ* − [1, X] β)`. `beta` carries the
    /// intercept first.
    pub fn gp_predict(&self, theta_star: &[f64], beta: &[f64], x_new: &[f64]) -> Result<f64> {
        let alpha = self.residual_weights(theta_star, beta)?;
        Ok(self.predict_with_weights(&alpha, beta, x_new))
    }

    /// R⁻¹ (θ* − [1, X] β), reusable across prediction points.
    pub fn residual_weights(&self, theta_star: &[f64], beta: &[f64]) -> Result<DVector<f64>> {
        let d = self.x.ncols();
        if beta.len() != d + 1 || theta_star.len() != self.n() {
            return Err(Error::Domain("gp_predict dimension mismatch".into()));
        }
        let resid = DVector::from_fn(self.n(), |i, _| {
            theta_star[i] - beta[0] - (0..d).map(|k| self.x[(i, k)] * beta[k + 1]).sum::<f64>()
        });
        self.solve(&resid)
    }

    pub fn predict_with_weights(&self, weights: &DVector<f64>, beta: &[f64], x_new: &[f64]) -> f64 {
        let mean = beta[0] + x_new.iter().zip(&beta[1..]).map(|(a, b)| a * b).sum::<f64>();
        mean + self.cross(x_new).dot(weights)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use rand::Rng;

    fn xm(rows: &[&[f64]]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j])
    }

    #[test]
    fn entries() {
        let k = build_kernel(&xm(&[&[0.5, 1.0], &[0.5, 1.0], &[1.5, 1.0]]), 0.1).unwrap();
        assert_eq!(k.matrix()[(0, 1)], 1.0);
        assert!((k.matrix()[(0, 0)] - 1.01).abs() < 1e-15);
        assert!((k.matrix()[(0, 2)] - (-1.0f64).exp()).abs() < 1e-15);
        let l = k.lower();
        let rec = l * l.transpose();
        assert!((rec - k.matrix()).abs().max() < 1e-8);
    }

    #[test]
    fn rejects_nan() {
        assert!(matches!(build_kernel(&xm(&[&[f64::NAN]]), 0.1), Err(Error::Factorization(_))));
    }

    #[test]
    fn solve_cases() {
        let k = build_kernel(&xm(&[&[0.0], &[0.3], &[1.1]]), 0.1).unwrap();
        let col = k.matrix().column(1).into_owned();
        let e = k.solve(&col).unwrap();
        for i in 0..3 {
            assert!((e[i] - if i == 1 { 1.0 } else { 0.0 }).abs() < 1e-10);
        }
        let k1 = build_kernel(&xm(&[&[2.0]]), 0.1).unwrap();
        let v = k1.solve(&DVector::from_vec(vec![3.0])).unwrap();
        assert!((v[0] - 3.0 / 1.01).abs() < 1e-15);
        assert!(k.solve(&DVector::zeros(2)).is_err());
    }

    #[test]
    fn solve_matches_dense_inverse() {
        let mut rng = rng_for(1, &[]);
        let x = DMatrix::from_fn(5, 2, |_, _| rng.gen_range(-1.5..1.5));
        let k = build_kernel(&x, 0.1).unwrap();
        let rhs = DVector::from_fn(5, |_, _| rng.gen_range(-2.0..2.0));
        let inv = k.matrix().clone().try_inverse().unwrap();
        let got = k.solve(&rhs).unwrap();
        assert!((got - inv * &rhs).abs().max() < 1e-9);
        let resid = k.matrix() * k.solve(&rhs).unwrap() - &rhs;
        assert!(resid.abs().max() <= 1e-8 * rhs.abs().max());
    }

    #[test]
    fn lower_mul_matches_dense() {
        let mut rng = rng_for(2, &[]);
        let x = DMatrix::from_fn(7, 1, |_, _| rng.gen_range(-2.0..2.0));
        let k = build_kernel(&x, 0.1).unwrap();
        let z: Vec<f64> = (0..7).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut out = vec![0.0; 7];
        k.lower_mul(&z, &mut out);
        let dense = k.lower() * DVector::from_vec(z);
        for i in 0..7 {
            assert!((out[i] - dense[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn predict_cases() {
        let mut rng = rng_for(3, &[]);
        let x = DMatrix::from_fn(6, 2, |_, _| rng.gen_range(-1.0..1.0));
        let beta = [0.5, 1.0, -2.0];
        let mean: Vec<f64> = (0..6).map(|i| beta[0] + beta[1] * x[(i, 0)] + beta[2] * x[(i, 1)]).collect();
        let k = build_kernel(&x, 0.1).unwrap();
        // θ* on the mean: prediction equals the regression.
        let p = k.gp_predict(&mean, &beta, &[0.2, 0.3]).unwrap();
        assert!((p - (0.5 + 0.2 - 0.6)).abs() < 1e-12);
        // Far away: kernel vanishes.
        let theta: Vec<f64> = mean.iter().map(|m| m + rng.gen_range(-1.0..1.0)).collect();
        let p = k.gp_predict(&theta, &beta, &[50.0, -40.0]).unwrap();
        assert!((p - (0.5 + 50.0 + 80.0)).abs() < 1e-12);
        // At a row: dense oracle, and interpolation as ε → 0.
        let row: Vec<f64> = x.row(2).iter().copied().collect();
        let kv = DVector::from_fn(6, |i, _| kernel_value(&row, &x.row(i).iter().copied().collect::<Vec<_>>()));
        let inv = k.matrix().clone().try_inverse().unwrap();
        let resid = DVector::from_fn(6, |i, _| theta[i] - mean[i]);
        let dense = mean[2] + (kv.transpose() * inv * resid)[0];
        let p = k.gp_predict(&theta, &beta, &row).unwrap();
        assert!((p - dense).abs() < 1e-8);
        let k0 = build_kernel(&x, 1e-5).unwrap();
        let p0 = k0.gp_predict(&theta, &beta, &row).unwrap();
        assert!((p0 - theta[2]).abs() < 1e-4);
    }

    #[test]
    fn permutation_invariance() {
        let mut rng = rng_for(4, &[]);
        let x = DMatrix::from_fn(5, 3, |_, _| rng.gen_range(-1.0..1.0));
        let perm_rows = [3, 0, 4, 1, 2];
        let perm_cols = [2, 0, 1];
        let xp = DMatrix::from_fn(5, 3, |i, j| x[(perm_rows[i], perm_cols[j])]);
        let k = build_kernel(&x, 0.1).unwrap();
        let kp = build_kernel(&xp, 0.1).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert!((kp.matrix()[(i, j)] - k.matrix()[(perm_rows[i], perm_rows[j])]).abs() < 1e-15);
            }
        }
    }
}
