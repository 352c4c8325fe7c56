//! Sampler self-checks: joint-distribution ("getting it right") tests and a
//! conjugate posterior comparison.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{coarsen, Arm, PotentialRecord};
use crate::error::Result;
use crate::gibbs::{batch_means_se, sample_categorical, ModelKind, Sampler};
use crate::kernel::build_kernel;
use crate::model::{ArmView, Cov2, Hyperparameters, ModelState};
use crate::rng::{rng_for, SimRng};

/// One scalar functional compared between two estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentComparison {
    pub name: String,
    pub reference: f64,
    pub reference_se: f64,
    pub estimate: f64,
    pub estimate_se: f64,
}

impl MomentComparison {
    /// Standardized difference.
    pub fn z(&self) -> f64 {
        (self.estimate - self.reference) / (self.reference_se.powi(2) + self.estimate_se.powi(2)).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GewekeSettings {
    pub kind: ModelKind,
    /// Subjects in the arm; each gets a fixed log censoring time.
    pub censor_times: Vec<f64>,
    /// Pooled rows outside the arm.
    pub extra_rows: usize,
    pub k_trunc: usize,
    pub cycles: usize,
    pub lambda0: f64,
    pub seed: u64,
}

impl GewekeSettings {
    pub fn small(kind: ModelKind, seed: u64) -> Self {
        Self {
            kind,
            censor_times: vec![1.0, 1.8, 2.5, 3.2, 4.0],
            extra_rows: 2,
            k_trunc: 3,
            cycles: 100_000,
            lambda0: 10.0,
            seed,
        }
    }
}

/// Named functionals of the state recorded by the joint-distribution test.
fn functionals(kind: ModelKind, s: &ModelState) -> Vec<(&'static str, f64)> {
    let c = &s.components[0];
    let mut out = vec![
        ("sigma11", s.sigma.s11),
        ("sigma12", s.sigma.s12),
        ("sigma22", s.sigma.s22),
        ("sigma11^2", s.sigma.s11 * s.sigma.s11),
        ("sigma12^2", s.sigma.s12 * s.sigma.s12),
        ("sigma22^2", s.sigma.s22 * s.sigma.s22),
        ("beta_p0", c.beta[0][0]),
        ("beta_p1", c.beta[0][1]),
        ("beta_d0", c.beta[1][0]),
        ("beta_d1", c.beta[1][1]),
        ("beta_p0^2", c.beta[0][0].powi(2)),
        ("beta_d1^2", c.beta[1][1].powi(2)),
        ("beta_p1*beta_d0", c.beta[0][1] * c.beta[1][0]),
    ];
    if kind == ModelKind::Bnp {
        out.extend([
            ("alpha", s.alpha),
            ("alpha^2", s.alpha * s.alpha),
            ("w1", c.w),
            ("theta_p[0]", c.theta_star[0][0]),
            ("theta_d[last]", c.theta_star[1][c.theta_star[1].len() - 1]),
            ("theta_p[0]^2", c.theta_star[0][0].powi(2)),
        ]);
    }
    out
}

/// Replace the arm's data with a fresh draw from the model given the
/// parameters: labels, complete outcomes, then censoring.
pub fn resimulate_data(sampler: &mut Sampler, state: &mut ModelState, censor: &[f64], rng: &mut SimRng) -> Result<()> {
    let w = state.weights();
    for i in 0..sampler.view.len() {
        let g = sample_categorical(&w, rng);
        let row = sampler.view.rows[i];
        let c = &state.components[g];
        let y = state.sigma.bvn([c.theta_star[0][row], c.theta_star[1][row]])?.sample(rng);
        let rec = coarsen(&PotentialRecord { yp: [y[0]; 2], yd: [y[1]; 2], c: [censor[i]; 2] }, Arm::Control, vec![]);
        let (t1, t2) = rec.fit_times(0.0);
        sampler.view.t1[i] = t1;
        sampler.view.t2[i] = t2;
        sampler.view.cases[i] = rec.censoring_case();
        state.gamma[i] = g;
        state.y_aug[i] = y;
    }
    Ok(())
}

fn geweke_problem(settings: &GewekeSettings) -> (DMatrix<f64>, Hyperparameters, ArmView) {
    let n = settings.censor_times.len();
    let rows = n + settings.extra_rows;
    let x = DMatrix::from_fn(rows, 1, |i, _| -1.0 + 2.0 * i as f64 / (rows - 1).max(1) as f64);
    let psi_mean = Cov2::new(1.0, 0.5, 1.0).expect("positive definite");
    let f = settings.lambda0 - 3.0;
    let hp = Hyperparameters {
        beta0: [vec![1.0, 0.5], vec![1.5, 0.3]],
        lambda0_cov: [DMatrix::from_diagonal_element(2, 2, 0.5), DMatrix::from_diagonal_element(2, 2, 0.5)],
        lambda0: settings.lambda0,
        psi: Cov2::new(psi_mean.s11 * f, psi_mean.s12 * f, psi_mean.s22 * f).expect("positive definite"),
        lambda1: 2.0,
        lambda2: 2.0,
        k_trunc: settings.k_trunc,
        epsilon: crate::kernel::DEFAULT_EPSILON,
    };
    let view = ArmView {
        arm: Arm::Control,
        rows: (0..n).collect(),
        t1: vec![0.0; n],
        t2: vec![0.0; n],
        cases: vec![crate::data::CensoringCase::Both; n],
    };
    (x, hp, view)
}

fn mean_se_iid(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Joint-distribution test: functionals of the prior (marginal-conditional
/// simulator) against the alternating data/parameter chain
/// (successive-conditional simulator).
pub fn geweke_test(settings: &GewekeSettings) -> Result<Vec<MomentComparison>> {
    let (x, hp, view) = geweke_problem(settings);
    let design = DMatrix::from_fn(x.nrows(), 2, |i, j| if j == 0 { 1.0 } else { x[(i, 0)] });
    let kernel = build_kernel(&x, hp.epsilon)?;
    let mut sampler = Sampler::new(settings.kind, hp, Some(&kernel), design, view)?;
    let censor = settings.censor_times.clone();

    let mut rng = rng_for(settings.seed, &[0]);
    let mut marginal: Vec<Vec<f64>> = vec![];
    for _ in 0..settings.cycles {
        let s = sampler.sample_prior_state(&mut rng)?;
        marginal.push(functionals(settings.kind, &s).into_iter().map(|(_, v)| v).collect());
    }

    let mut rng = rng_for(settings.seed, &[1]);
    let mut state = sampler.sample_prior_state(&mut rng)?;
    resimulate_data(&mut sampler, &mut state, &censor, &mut rng)?;
    let mut successive: Vec<Vec<f64>> = vec![];
    for _ in 0..settings.cycles {
        sampler.sweep(&mut state, &mut rng)?;
        resimulate_data(&mut sampler, &mut state, &censor, &mut rng)?;
        successive.push(functionals(settings.kind, &state).into_iter().map(|(_, v)| v).collect());
    }

    let names: Vec<&str> = functionals(settings.kind, &state).into_iter().map(|(n, _)| n).collect();
    Ok(names
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let a: Vec<f64> = marginal.iter().map(|r| r[k]).collect();
            let b: Vec<f64> = successive.iter().map(|r| r[k]).collect();
            let (ma, sa) = mean_se_iid(&a);
            let mb = b.iter().sum::<f64>() / b.len() as f64;
            MomentComparison {
                name: name.to_string(),
                reference: ma,
                reference_se: sa,
                estimate: mb,
                estimate_se: batch_means_se(&b, 50),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConjugateSettings {
    pub n: usize,
    pub iterations: usize,
    pub burn_in: usize,
    /// Prior variance of each coefficient; large values approach the flat-prior closed form.
    pub prior_var: f64,
    pub seed: u64,
}

impl Default for ConjugateSettings {
    fn default() -> Self {
        Self { n: 200, iterations: 40_000, burn_in: 2_000, prior_var: 1e6, seed: 11 }
    }
}

/// One-component regression without censoring. With a flat coefficient prior
/// the posterior is E[β | y] = (XᵀX)⁻¹XᵀY and Σ | y ~ IW(λ₀ + n − p, Ψ + S),
/// S the residual cross-product; both are compared to the chain's means.
pub fn conjugate_check(settings: &ConjugateSettings) -> Result<Vec<MomentComparison>> {
    let n = settings.n;
    let mut rng = rng_for(settings.seed, &[0]);
    let x: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let truth = Cov2::new(1.0, 0.6, 1.5)?;
    let bvn = truth.bvn([0.0, 0.0])?;
    let mut y = DMatrix::zeros(n, 2);
    for i in 0..n {
        let e = bvn.sample(&mut rng);
        y[(i, 0)] = 1.0 + 0.5 * x[i] + e[0];
        y[(i, 1)] = 8.0 + 0.3 * x[i] + e[1];
        debug_assert!(y[(i, 0)] < y[(i, 1)]);
    }
    let design = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { x[i] });
    let psi = Cov2::new(0.5, 0.1, 0.5)?;
    let lambda0 = 4.0;
    let hp = Hyperparameters {
        beta0: [vec![0.0, 0.0], vec![0.0, 0.0]],
        lambda0_cov: [
            DMatrix::from_diagonal_element(2, 2, settings.prior_var),
            DMatrix::from_diagonal_element(2, 2, settings.prior_var),
        ],
        lambda0,
        psi,
        lambda1: 1.0,
        lambda2: 1.0,
        k_trunc: 1,
        epsilon: crate::kernel::DEFAULT_EPSILON,
    };
    let view = ArmView {
        arm: Arm::Control,
        rows: (0..n).collect(),
        t1: (0..n).map(|i| y[(i, 0)]).collect(),
        t2: (0..n).map(|i| y[(i, 1)]).collect(),
        cases: vec![crate::data::CensoringCase::Both; n],
    };

    // Closed form.
    let xtx = design.transpose() * &design;
    let bhat = xtx.clone().cholesky().expect("full rank").solve(&(design.transpose() * &y));
    let resid = &y - &design * &bhat;
    let s = resid.transpose() * &resid;
    let df = lambda0 + (n - 2) as f64;
    let post_scale = [psi.s11 + s[(0, 0)], psi.s12 + s[(0, 1)], psi.s22 + s[(1, 1)]];
    let sigma_mean: Vec<f64> = post_scale.iter().map(|v| v / (df - 3.0)).collect();

    let mut sampler = Sampler::new(ModelKind::Naive, hp, None, design, view)?;
    let mut rng = rng_for(settings.seed, &[1]);
    let mut state = sampler.initial_state(&mut rng)?;
    let mut trace: Vec<[f64; 7]> = Vec::with_capacity(settings.iterations);
    for it in 0..settings.burn_in + settings.iterations {
        sampler.sweep(&mut state, &mut rng)?;
        if it >= settings.burn_in {
            let c = &state.components[0];
            trace.push([
                c.beta[0][0],
                c.beta[0][1],
                c.beta[1][0],
                c.beta[1][1],
                state.sigma.s11,
                state.sigma.s12,
                state.sigma.s22,
            ]);
        }
    }
    let reference = [bhat[(0, 0)], bhat[(1, 0)], bhat[(0, 1)], bhat[(1, 1)], sigma_mean[0], sigma_mean[1], sigma_mean[2]];
    let names = ["beta_p0", "beta_p1", "beta_d0", "beta_d1", "sigma11", "sigma12", "sigma22"];
    Ok((0..7)
        .map(|k| {
            let v: Vec<f64> = trace.iter().map(|r| r[k]).collect();
            MomentComparison {
                name: names[k].to_string(),
                reference: reference[k],
                reference_se: 0.0,
                estimate: v.iter().sum::<f64>() / v.len() as f64,
                estimate_se: batch_means_se(&v, 50),
            }
        })
        .collect())
}
