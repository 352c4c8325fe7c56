//! Blocked Gibbs sampler for one arm, chain management and chain storage.
//!
//! One sweep runs, in order: stick fractions, DP mass, Σ, GP values θ*,
//! mean-function coefficients β, then memberships with data augmentation.
//! GP values live on every pooled covariate row (both arms), so the fitted
//! mixture can be evaluated at any subject of the study.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Beta, Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bvn::{Region, RegionSampler};
use crate::data::{Arm, CensoringCase, Dataset, DEFAULT_TIE_JITTER};
use crate::error::{Error, Result};
use crate::kernel::{build_kernel, KernelCache};
use crate::model::{
    log_component_case_likelihood, stick_weights, ArmView, Cov2, Draw, Hyperparameters, MixtureComponent,
    ModelState,
};
use crate::rng::{derive_seed, SimRng};

pub const CHAIN_FORMAT: &str = "ddpgp-chain";
pub const CHAIN_VERSION: u32 = 1;
const STICK_CLAMP: f64 = 1.0 - 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// DDP-GP mixture.
    Bnp,
    /// Single bivariate normal regression, no GP.
    Naive,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bnp" | "ddpgp" | "ddp-gp" => Ok(ModelKind::Bnp),
            "naive" => Ok(ModelKind::Naive),
            other => Err(Error::Config(format!("unknown model `{other}` (expected bnp or naive)"))),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Bnp => "bnp",
            ModelKind::Naive => "naive",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    /// Overrides the truncation level in the hyperparameters when set.
    pub k_trunc: Option<usize>,
    /// Independent chains per arm; their draws are pooled.
    pub chains: usize,
    pub tie_jitter: f64,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self { iterations: 5000, burn_in: 2000, thin: 10, seed: 0, k_trunc: None, chains: 1, tie_jitter: DEFAULT_TIE_JITTER }
    }
}

impl ChainConfig {
    /// 3000 iterations, 1000 burn-in, thin 10.
    pub fn desk(seed: u64) -> Self {
        Self { iterations: 3000, burn_in: 1000, thin: 10, seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.burn_in >= self.iterations {
            return Err(Error::Config(format!(
                "burn_in ({}) must be below iterations ({})",
                self.burn_in, self.iterations
            )));
        }
        if self.thin == 0 {
            return Err(Error::Config("thin must be at least 1".into()));
        }
        if self.chains == 0 {
            return Err(Error::Config("chains must be at least 1".into()));
        }
        if self.k_trunc == Some(0) {
            return Err(Error::Config("k_trunc must be at least 1".into()));
        }
        Ok(())
    }

    /// Draws kept by one chain.
    pub fn draws_per_chain(&self) -> usize {
        (self.iterations - self.burn_in) / self.thin
    }
}

/// Counters for numerical fallbacks taken during a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChainStats {
    pub iterations: usize,
    /// Subjects whose membership masses all vanished; label kept.
    pub degenerate_memberships: u64,
    /// Augmentation draws skipped because the region mass underflowed.
    pub negligible_mass: u64,
    /// Stick fractions clamped below 1 before the α update.
    pub clamped_sticks: u64,
    /// Wall-clock seconds; not serialized so chain files stay reproducible.
    #[serde(skip)]
    pub seconds: f64,
}

impl ChainStats {
    fn absorb(&mut self, other: &ChainStats) {
        self.iterations += other.iterations;
        self.degenerate_memberships += other.degenerate_memberships;
        self.negligible_mass += other.negligible_mass;
        self.clamped_sticks += other.clamped_sticks;
        self.seconds += other.seconds;
    }

    pub fn seconds_per_iteration(&self) -> f64 {
        if self.iterations == 0 {
            0.0
        } else {
            self.seconds / self.iterations as f64
        }
    }
}

/// Blocked Gibbs sampler for one arm. Holds everything that is fixed across
/// iterations; the chain state is passed in and updated in place.
pub struct Sampler<'a> {
    pub kind: ModelKind,
    pub hp: Hyperparameters,
    kernel: Option<&'a KernelCache>,
    /// Pooled design `[1, x]`, N × p.
    design: DMatrix<f64>,
    pub view: ArmView,
    /// R⁻¹ X (N × p).
    rinv_x: DMatrix<f64>,
    /// Posterior covariance of β per endpoint and its lower Cholesky factor.
    beta_cov: [DMatrix<f64>; 2],
    beta_cov_lower: [DMatrix<f64>; 2],
    /// Λ₀⁻¹ β₀ per endpoint.
    prior_pull: [DVector<f64>; 2],
    lambda0_inv: [DMatrix<f64>; 2],
    pub region_sampler: RegionSampler,
    pub stats: ChainStats,
    scratch_z: Vec<f64>,
    scratch_f: Vec<f64>,
}

fn std_normals<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
}

fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let chol = m.clone().cholesky().ok_or_else(|| Error::Factorization(format!("{what} is not positive definite")))?;
    Ok(chol.inverse())
}

fn lower_factor(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    Ok(m.clone().cholesky().ok_or_else(|| Error::Factorization(format!("{what} is not positive definite")))?.l())
}

/// Draw from the inverse-Wishart with `df` degrees of freedom and scale `scale`
/// (mean scale / (df − 3)), via a Bartlett draw of the Wishart of the inverse.
pub fn sample_inverse_wishart<R: Rng + ?Sized>(df: f64, scale: Cov2, rng: &mut R) -> Result<Cov2> {
    if !(df > 1.0) || !scale.is_pd() {
        return Err(Error::Domain(format!("inverse-Wishart needs df > 1 and PD scale, got df={df}")));
    }
    let inv = scale.inverse();
    let l11 = inv.s11.sqrt();
    let l21 = inv.s12 / l11;
    let l22 = (inv.s22 - l21 * l21).sqrt();
    let chi = |k: f64, rng: &mut R| Gamma::new(k / 2.0, 2.0).expect("positive shape").sample(rng);
    let a11 = chi(df, rng).sqrt();
    let a22 = chi(df - 1.0, rng).sqrt();
    let a21: f64 = rng.sample(StandardNormal);
    // B = L A (lower), W = B Bᵀ.
    let b11 = l11 * a11;
    let b21 = l21 * a11 + l22 * a21;
    let b22 = l22 * a22;
    let w = Cov2 { s11: b11 * b11, s12: b11 * b21, s22: b21 * b21 + b22 * b22 };
    let out = w.inverse();
    if !out.is_pd() {
        return Err(Error::Factorization("inverse-Wishart draw is not positive definite".into()));
    }
    Ok(out)
}

/// Region for augmenting subject `i` of `view`.
fn augmentation_region(view: &ArmView, i: usize) -> Option<Region> {
    let (t1, t2) = (view.t1[i], view.t2[i]);
    match view.cases[i] {
        CensoringCase::Both => None,
        CensoringCase::ProgressionOnly => Some(Region::RayT { s: t1, c: t2 }),
        CensoringCase::DeathOnly => Some(Region::RayS { t: t2, c: t1 }),
        CensoringCase::Neither => Some(Region::Quadrant { c: t2 }),
    }
}

impl<'a> Sampler<'a> {
    /// `kernel` must be built over the same pooled rows as `design`; it is
    /// required for the mixture model and ignored by the naive one.
    pub fn new(
        kind: ModelKind,
        hp: Hyperparameters,
        kernel: Option<&'a KernelCache>,
        design: DMatrix<f64>,
        view: ArmView,
    ) -> Result<Self> {
        hp.validate()?;
        let p = design.ncols();
        if hp.n_coef() != p {
            return Err(Error::Config(format!("hyperparameters have {} coefficients, design has {p}", hp.n_coef())));
        }
        let lambda0_inv = [spd_inverse(&hp.lambda0_cov[0], "lambda0_cov")?, spd_inverse(&hp.lambda0_cov[1], "lambda0_cov")?];
        let prior_pull = [
            &lambda0_inv[0] * DVector::from_column_slice(&hp.beta0[0]),
            &lambda0_inv[1] * DVector::from_column_slice(&hp.beta0[1]),
        ];
        let (rinv_x, beta_cov, beta_cov_lower) = match kind {
            ModelKind::Bnp => {
                let k = kernel.ok_or_else(|| Error::Config("the mixture model needs a kernel".into()))?;
                if k.n() != design.nrows() {
                    return Err(Error::Domain("kernel and design row counts differ".into()));
                }
                let rinv_x = k.solve_matrix(&design)?;
                let xtrx = design.transpose() * &rinv_x;
                let mut cov = Vec::with_capacity(2);
                let mut low = Vec::with_capacity(2);
                for inv0 in &lambda0_inv {
                    let c = spd_inverse(&(&xtrx + inv0), "beta posterior precision")?;
                    low.push(lower_factor(&c, "beta posterior covariance")?);
                    cov.push(c);
                }
                let c1 = cov.pop().unwrap();
                let c0 = cov.pop().unwrap();
                let l1 = low.pop().unwrap();
                let l0 = low.pop().unwrap();
                (rinv_x, [c0, c1], [l0, l1])
            }
            ModelKind::Naive => {
                let empty = DMatrix::zeros(0, 0);
                (DMatrix::zeros(0, 0), [empty.clone(), empty.clone()], [empty.clone(), empty])
            }
        };
        let n = design.nrows();
        Ok(Self {
            kind,
            hp,
            kernel: if kind == ModelKind::Bnp { kernel } else { None },
            design,
            view,
            rinv_x,
            beta_cov,
            beta_cov_lower,
            prior_pull,
            lambda0_inv,
            region_sampler: RegionSampler::default(),
            stats: ChainStats::default(),
            scratch_z: vec![0.0; n],
            scratch_f: vec![0.0; n],
        })
    }

    pub fn n_rows(&self) -> usize {
        self.design.nrows()
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn k_trunc(&self) -> usize {
        match self.kind {
            ModelKind::Bnp => self.hp.k_trunc,
            ModelKind::Naive => 1,
        }
    }

    fn mean_function(&self, beta: &[f64]) -> Vec<f64> {
        crate::model::design_times(&self.design, beta)
    }

    /// Starting state: k-means labels on the fit times, θ* at the prior mean
    /// function, Σ = Ψ, α = 1, stick fractions at their conditional means and
    /// latent outcomes drawn inside their censoring regions.
    pub fn initial_state(&self, rng: &mut SimRng) -> Result<ModelState> {
        let k = self.k_trunc();
        let n = self.view.len();
        let pts: Vec<[f64; 2]> = (0..n).map(|i| [self.view.t1[i], self.view.t2[i]]).collect();
        let gamma = kmeans_labels(&pts, k.min(5), rng);
        let alpha = 1.0;
        let mut counts = vec![0usize; k];
        for &g in &gamma {
            counts[g] += 1;
        }
        let mut v = vec![1.0; k];
        let mut tail: usize = counts.iter().sum();
        for h in 0..k.saturating_sub(1) {
            tail -= counts[h];
            let a = 1.0 + counts[h] as f64;
            v[h] = a / (a + alpha + tail as f64);
        }
        let w = stick_weights(&v);
        let theta0 = [self.mean_function(&self.hp.beta0[0]), self.mean_function(&self.hp.beta0[1])];
        let components = (0..k)
            .map(|h| MixtureComponent { v: v[h], w: w[h], theta_star: theta0.clone(), beta: self.hp.beta0.clone() })
            .collect();
        let mut state = ModelState {
            components,
            sigma: self.hp.psi,
            alpha,
            gamma,
            y_aug: vec![[0.0, 0.0]; n],
        };
        for i in 0..n {
            state.y_aug[i] = self.initial_latent(&state, i, rng)?;
        }
        Ok(state)
    }

    fn initial_latent(&self, state: &ModelState, i: usize, rng: &mut SimRng) -> Result<[f64; 2]> {
        let (t1, t2) = (self.view.t1[i], self.view.t2[i]);
        let Some(region) = augmentation_region(&self.view, i) else {
            return Ok([t1, t2]);
        };
        let row = self.view.rows[i];
        let c = &state.components[state.gamma[i]];
        let b = state.sigma.bvn([c.theta_star[0][row], c.theta_star[1][row]])?;
        match self.region_sampler.sample(&b, region, None, rng) {
            Ok(y) => Ok(y),
            Err(Error::NegligibleMass { .. }) => Ok(match region {
                Region::RayT { s, c } => [s, c + 1e-3],
                Region::RayS { t, c } => [c + 1e-3, t],
                Region::Quadrant { c } => [c + 1e-3, c + 1e-3],
            }),
            Err(e) => Err(e),
        }
    }

    /// Draw a complete state from the prior, with labels and latent outcomes
    /// from the model. Used by joint-distribution tests.
    pub fn sample_prior_state(&self, rng: &mut SimRng) -> Result<ModelState> {
        let k = self.k_trunc();
        let n = self.view.len();
        let alpha = Gamma::new(self.hp.lambda1, 1.0 / self.hp.lambda2)
            .map_err(|e| Error::Domain(e.to_string()))?
            .sample(rng);
        let mut v = vec![1.0; k];
        for vh in v.iter_mut().take(k.saturating_sub(1)) {
            *vh = Beta::new(1.0, alpha).map_err(|e| Error::Domain(e.to_string()))?.sample(rng);
        }
        let w = stick_weights(&v);
        let sigma = sample_inverse_wishart(self.hp.lambda0, self.hp.psi, rng)?;
        let mut components = Vec::with_capacity(k);
        for h in 0..k {
            let mut beta: [Vec<f64>; 2] = [vec![], vec![]];
            let mut theta: [Vec<f64>; 2] = [vec![], vec![]];
            for j in 0..2 {
                let l = lower_factor(&self.hp.lambda0_cov[j], "lambda0_cov")?;
                let z = DVector::from_fn(self.hp.n_coef(), |_, _| rng.sample::<f64, _>(StandardNormal));
                let b = DVector::from_column_slice(&self.hp.beta0[j]) + l * z;
                beta[j] = b.iter().copied().collect();
                theta[j] = self.mean_function(&beta[j]);
                if let Some(kernel) = self.kernel {
                    let mut z = vec![0.0; self.n_rows()];
                    std_normals(rng, &mut z);
                    let mut lz = vec![0.0; self.n_rows()];
                    kernel.lower_mul(&z, &mut lz);
                    for (t, d) in theta[j].iter_mut().zip(&lz) {
                        *t += d;
                    }
                }
            }
            components.push(MixtureComponent { v: v[h], w: w[h], theta_star: theta, beta });
        }
        let mut gamma = Vec::with_capacity(n);
        let mut y_aug = Vec::with_capacity(n);
        for i in 0..n {
            let g = sample_categorical(&w, rng);
            let row = self.view.rows[i];
            let c = &components[g];
            let b = sigma.bvn([c.theta_star[0][row], c.theta_star[1][row]])?;
            gamma.push(g);
            y_aug.push(b.sample(rng));
        }
        Ok(ModelState { components, sigma, alpha, gamma, y_aug })
    }

    /// Stick fractions v_h ~ Beta(1 + n_h, α + Σ_{l>h} n_l), h < K; weights recomputed.
    pub fn step1_update_weights(&mut self, state: &mut ModelState, rng: &mut SimRng) -> Result<()> {
        let k = state.k();
        let counts = state.counts();
        let mut tail: usize = counts.iter().sum();
        for h in 0..k {
            tail -= counts[h];
            state.components[h].v = if h + 1 == k {
                1.0
            } else {
                let b = Beta::new(1.0 + counts[h] as f64, state.alpha + tail as f64)
                    .map_err(|e| Error::Domain(format!("stick update: {e}")))?;
                b.sample(rng)
            };
        }
        let v: Vec<f64> = state.components.iter().map(|c| c.v).collect();
        for (c, w) in state.components.iter_mut().zip(stick_weights(&v)) {
            c.w = w;
        }
        Ok(())
    }

    /// α ~ Gamma(λ₁ + K − 1, rate λ₂ − Σ_{h<K} ln(1 − v_h)).
    pub fn step2_update_alpha(&mut self, state: &mut ModelState, rng: &mut SimRng) -> Result<()> {
        let k = state.k();
        let mut log_sum = 0.0;
        for c in state.components.iter().take(k.saturating_sub(1)) {
            let v = if c.v > STICK_CLAMP {
                self.stats.clamped_sticks += 1;
                log::debug!("stick fraction {} clamped before the DP mass update", c.v);
                STICK_CLAMP
            } else {
                c.v
            };
            log_sum += (1.0 - v).ln();
        }
        let shape = self.hp.lambda1 + (k - 1) as f64;
        let rate = self.hp.lambda2 - log_sum;
        state.alpha = Gamma::new(shape, 1.0 / rate)
            .map_err(|e| Error::Domain(format!("DP mass update: {e}")))?
            .sample(rng);
        Ok(())
    }

    /// Σ ~ IW(λ₀ + n, Ψ + Σ_i (Y_i − θ_{γ_i}(x_i))(·)ᵀ).
    pub fn step3_update_sigma(&mut self, state: &mut ModelState, rng: &mut SimRng) -> Result<()> {
        let mut s = self.hp.psi;
        for (i, y) in state.y_aug.iter().enumerate() {
            let row = self.view.rows[i];
            let c = &state.components[state.gamma[i]];
            let e0 = y[0] - c.theta_star[0][row];
            let e1 = y[1] - c.theta_star[1][row];
            s.s11 += e0 * e0;
            s.s12 += e0 * e1;
            s.s22 += e1 * e1;
        }
        state.sigma = sample_inverse_wishart(self.hp.lambda0 + state.y_aug.len() as f64, s, rng)?;
        Ok(())
    }

    /// Endpoint-j working response for the members of a component: the latent
    /// outcome adjusted by its regression on the other endpoint's residual.
    /// Returns (ỹ per member, σ̃²).
    fn working_response(&self, state: &ModelState, h: usize, j: usize, members: &[usize]) -> (Vec<f64>, f64) {
        let s = state.sigma;
        let (slope, var) = if j == 0 {
            (s.s12 / s.s22, s.s11 - s.s12 * s.s12 / s.s22)
        } else {
            (s.s12 / s.s11, s.s22 - s.s12 * s.s12 / s.s11)
        };
        let other = &state.components[h].theta_star[1 - j];
        let y = members
            .iter()
            .map(|&i| {
                let row = self.view.rows[i];
                let yi = state.y_aug[i];
                yi[j] - slope * (yi[1 - j] - other[row])
            })
            .collect();
        (y, var)
    }

    fn members(&self, state: &ModelState) -> Vec<Vec<usize>> {
        let mut m = vec![Vec::new(); state.k()];
        for (i, &g) in state.gamma.iter().enumerate() {
            m[g].push(i);
        }
        m
    }

    /// θ*_{hj} from its Gaussian full conditional over the pooled rows, drawn
    /// by conditioning a prior path on the members' noisy working responses.
    pub fn step4_update_theta_star(&mut self, state: &mut ModelState, rng: &mut SimRng) -> Result<()> {
        let kernel = self.kernel.ok_or_else(|| Error::Config("the mixture model needs a kernel".into()))?;
        let members = self.members(state);
        let r = kernel.matrix();
        for (h, memb) in members.iter().enumerate() {
            for j in 0..2 {
                let (ytil, var) = self.working_response(state, h, j, memb);
                let mut f = self.mean_function(&state.components[h].beta[j]);
                let mut z = std::mem::take(&mut self.scratch_z);
                let mut lz = std::mem::take(&mut self.scratch_f);
                std_normals(rng, &mut z);
                kernel.lower_mul(&z, &mut lz);
                for (a, b) in f.iter_mut().zip(&lz) {
                    *a += b;
                }
                self.scratch_z = z;
                self.scratch_f = lz;
                if !memb.is_empty() {
                    let rows: Vec<usize> = memb.iter().map(|&i| self.view.rows[i]).collect();
                    let m = rows.len();
                    let mut raa = DMatrix::from_fn(m, m, |a, b| r[(rows[a], rows[b])]);
                    for a in 0..m {
                        raa[(a, a)] += var;
                    }
                    let sd = var.sqrt();
                    let rhs = DVector::from_fn(m, |a, _| {
                        let e: f64 = rng.sample(StandardNormal);
                        ytil[a] - f[rows[a]] - sd * e
                    });
                    let chol = raa.cholesky().ok_or_else(|| {
                        Error::Factorization(format!("GP conditional for component {} endpoint {} is singular", h + 1, j + 1))
                    })?;
                    let v = chol.solve(&rhs);
                    let n = f.len();
                    let rs = r.as_slice();
                    for (a, &row) in rows.iter().enumerate() {
                        let col = &rs[row * n..(row + 1) * n];
                        let va = v[a];
                        for (fi, ri) in f.iter_mut().zip(col) {
                            *fi += ri * va;
                        }
                    }
                }
                state.components[h].theta_star[j] = f;
            }
        }
        Ok(())
    }

    /// Conditional mean of β_{hj} given θ*_{hj}: Λ (Xᵀ R⁻¹ θ* + Λ₀⁻¹ β₀).
    pub fn beta_conditional_mean(&self, theta_star: &[f64], j: usize) -> DVector<f64> {
        let t = DVector::from_column_slice(theta_star);
        let rhs = self.rinv_x.transpose() * t + &self.prior_pull[j];
        &self.beta_cov[j] * rhs
    }

    pub fn beta_conditional_cov(&self, j: usize) -> &DMatrix<f64> {
        &self.beta_cov[j]
    }

    /// β_{hj} ~ N(Λ (Xᵀ R⁻¹ θ* + Λ₀⁻¹ β₀), Λ), Λ = (Xᵀ R⁻¹ X + Λ₀⁻¹)⁻¹.
    pub fn step5_update_beta(&mut self, state: &mut ModelState, rng: &mut SimRng) -> Result<()> {
        let p = self.design.ncols();
        for h in 0..state.k() {
            for j in 0..2 {
                let mean = self.beta_conditional_mean(&state.components[h].theta_star[j], j);
                let z = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
                let b = mean + &self.beta_cov_lower[j] * z;
                state.components[h].beta[j] = b.iter().copied().collect();
            }
        }
        Ok(())
    }

    /// Naive model: β_j from its conjugate normal conditional given the other
    /// endpoint, on the arm's subjects; θ = [1, x]β at every row.
    pub fn naive_update_beta(&mut self, state: &mut ModelState, rng: &mut SimRng) -> Result<()> {
        let all: Vec<usize> = (0..self.view.len()).collect();
        let p = self.design.ncols();
        let xa = DMatrix::from_fn(all.len(), p, |a, c| self.design[(self.view.rows[a], c)]);
        let xtx = xa.transpose() * &xa;
        for j in 0..2 {
            let (ytil, var) = self.working_response(state, 0, j, &all);
            let prec = &xtx / var + &self.lambda0_inv[j];
            let cov = spd_inverse(&prec, "naive beta precision")?;
            let rhs = xa.transpose() * DVector::from_vec(ytil) / var + &self.prior_pull[j];
            let mean = &cov * rhs;
            let l = lower_factor(&cov, "naive beta covariance")?;
            let z = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
            let b: Vec<f64> = (mean + l * z).iter().copied().collect();
            state.components[0].theta_star[j] = self.mean_function(&b);
            state.components[0].beta[j] = b;
        }
        Ok(())
    }

    /// Unnormalized log membership probabilities for subject `i`:
    /// ln w_h + ln(case likelihood under component h).
    pub fn membership_log_weights(&self, state: &ModelState, i: usize) -> Result<Vec<f64>> {
        let row = self.view.rows[i];
        let (t1, t2, case) = (self.view.t1[i], self.view.t2[i], self.view.cases[i]);
        state
            .components
            .iter()
            .map(|c| {
                if c.w <= 0.0 {
                    return Ok(f64::NEG_INFINITY);
                }
                let b = state.sigma.bvn([c.theta_star[0][row], c.theta_star[1][row]])?;
                Ok(c.w.ln() + log_component_case_likelihood(&b, t1, t2, case))
            })
            .collect()
    }

    /// Memberships from their case-specific discrete conditionals, then the
    /// latent outcomes from the chosen component restricted to the censoring
    /// region. Shared by both model kinds.
    pub fn step6_update_membership_and_augment(&mut self, state: &mut ModelState, rng: &mut SimRng) -> Result<()> {
        let k = state.k();
        let mut probs = vec![0.0; k];
        for i in 0..self.view.len() {
            if k > 1 {
                let lw = self.membership_log_weights(state, i)?;
                let mx = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if mx.is_finite() {
                    for (p, l) in probs.iter_mut().zip(&lw) {
                        *p = (l - mx).exp();
                    }
                    state.gamma[i] = sample_categorical(&probs, rng);
                } else {
                    self.stats.degenerate_memberships += 1;
                    log::debug!("all membership masses vanished for subject {i}; label kept");
                }
            } else {
                state.gamma[i] = 0;
            }
            let Some(region) = augmentation_region(&self.view, i) else {
                state.y_aug[i] = [self.view.t1[i], self.view.t2[i]];
                continue;
            };
            let row = self.view.rows[i];
            let c = &state.components[state.gamma[i]];
            let b = state.sigma.bvn([c.theta_star[0][row], c.theta_star[1][row]])?;
            let prev = state.y_aug[i];
            let start = if region.contains(prev) { Some(prev) } else { None };
            match self.region_sampler.sample(&b, region, start, rng) {
                Ok(y) => state.y_aug[i] = y,
                Err(Error::NegligibleMass { mass }) => {
                    self.stats.negligible_mass += 1;
                    log::debug!("augmentation region mass {mass:e} for subject {i}; latent kept");
                    if !region.contains(prev) {
                        state.y_aug[i] = self.initial_latent(state, i, rng)?;
                    }
                }
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }

    /// One full sweep in the fixed step order.
    pub fn sweep(&mut self, state: &mut ModelState, rng: &mut SimRng) -> Result<()> {
        match self.kind {
            ModelKind::Bnp => {
                self.step1_update_weights(state, rng)?;
                self.step2_update_alpha(state, rng)?;
                self.step3_update_sigma(state, rng)?;
                self.step4_update_theta_star(state, rng)?;
                self.step5_update_beta(state, rng)?;
                self.step6_update_membership_and_augment(state, rng)?;
            }
            ModelKind::Naive => {
                self.step3_update_sigma(state, rng)?;
                self.naive_update_beta(state, rng)?;
                self.step6_update_membership_and_augment(state, rng)?;
            }
        }
        self.stats.iterations += 1;
        Ok(())
    }
}

/// Index drawn with probability proportional to `p` (nonnegative, not all zero).
pub fn sample_categorical<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let total: f64 = p.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (h, &ph) in p.iter().enumerate() {
        if u < ph {
            return h;
        }
        u -= ph;
    }
    p.iter().rposition(|&v| v > 0.0).unwrap_or(0)
}

/// Lloyd's k-means with k-means++ seeding; returns labels in 0..k.
pub fn kmeans_labels<R: Rng + ?Sized>(pts: &[[f64; 2]], k: usize, rng: &mut R) -> Vec<usize> {
    let n = pts.len();
    if n == 0 || k <= 1 {
        return vec![0; n];
    }
    let k = k.min(n);
    let d2 = |a: [f64; 2], b: [f64; 2]| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
    let mut centers = vec![pts[rng.gen_range(0..n)]];
    while centers.len() < k {
        let w: Vec<f64> = pts
            .iter()
            .map(|&p| centers.iter().map(|&c| d2(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        if w.iter().sum::<f64>() <= 0.0 {
            break;
        }
        centers.push(pts[sample_categorical(&w, rng)]);
    }
    let mut labels = vec![0usize; n];
    for _ in 0..100 {
        let mut changed = false;
        for (i, &p) in pts.iter().enumerate() {
            let best = (0..centers.len())
                .min_by(|&a, &b| d2(p, centers[a]).total_cmp(&d2(p, centers[b])))
                .unwrap();
            if best != labels[i] {
                labels[i] = best;
                changed = true;
            }
        }
        let mut sums = vec![[0.0, 0.0, 0.0]; centers.len()];
        for (i, &p) in pts.iter().enumerate() {
            let s = &mut sums[labels[i]];
            s[0] += p[0];
            s[1] += p[1];
            s[2] += 1.0;
        }
        for (c, s) in centers.iter_mut().zip(&sums) {
            if s[2] > 0.0 {
                *c = [s[0] / s[2], s[1] / s[2]];
            }
        }
        if !changed {
            break;
        }
    }
    labels
}

/// Stored output of one arm's fit (draws pooled over chains).
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorChain {
    pub arm: Arm,
    pub model: ModelKind,
    pub config: ChainConfig,
    pub hyperparameters: Hyperparameters,
    pub draws: Vec<Draw>,
    pub stats: ChainStats,
}

#[derive(Serialize, Deserialize)]
struct ChainHeader {
    format: String,
    version: u32,
    arm: usize,
    model: ModelKind,
    config: ChainConfig,
    hyperparameters: Hyperparameters,
    stats: ChainStats,
    n_draws: usize,
}

impl PosteriorChain {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn n_rows(&self) -> usize {
        self.draws.first().map(|d| d.n_rows).unwrap_or(0)
    }

    /// JSON lines: a header record, then one record per draw.
    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let header = ChainHeader {
            format: CHAIN_FORMAT.into(),
            version: CHAIN_VERSION,
            arm: self.arm.index(),
            model: self.model,
            config: self.config.clone(),
            hyperparameters: self.hyperparameters.clone(),
            stats: self.stats.clone(),
            n_draws: self.draws.len(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for d in &self.draws {
            serde_json::to_writer(&mut w, d)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let path = path.as_ref();
        let reader = BufReader::new(File::open(path)?);
        let mut lines = reader.lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::Config(format!("{} is empty", path.display())))??;
        let header: ChainHeader = serde_json::from_str(&first)?;
        if header.format != CHAIN_FORMAT || header.version != CHAIN_VERSION {
            return Err(Error::Config(format!(
                "{} is not a version {CHAIN_VERSION} chain file",
                path.display()
            )));
        }
        let mut draws = Vec::with_capacity(header.n_draws);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            draws.push(serde_json::from_str::<Draw>(&line)?);
        }
        if draws.len() != header.n_draws {
            return Err(Error::Config(format!(
                "{}: header announces {} draws, found {}",
                path.display(),
                header.n_draws,
                draws.len()
            )));
        }
        let arm = Arm::from_index(header.arm).ok_or_else(|| Error::Config("arm must be 0 or 1".into()))?;
        Ok(Self {
            arm,
            model: header.model,
            config: header.config,
            hyperparameters: header.hyperparameters,
            draws,
            stats: header.stats,
        })
    }

    /// Per-draw scalar traces: α, Σ entries, occupied components, largest weight.
    pub fn write_trace_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["draw", "alpha", "sigma11", "sigma12", "sigma22", "occupied", "max_weight"])?;
        for (k, d) in self.draws.iter().enumerate() {
            let mw = d.weights.iter().copied().fold(0.0, f64::max);
            w.write_record([
                k.to_string(),
                format!("{:?}", d.alpha),
                format!("{:?}", d.sigma.s11),
                format!("{:?}", d.sigma.s12),
                format!("{:?}", d.sigma.s22),
                d.occupied.to_string(),
                format!("{mw:?}"),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One chain from an explicit sampler; returns thinned post-burn-in draws.
pub fn run_sampler(sampler: &mut Sampler, cfg: &ChainConfig, rng: &mut SimRng) -> Result<Vec<Draw>> {
    let start = Instant::now();
    let mut state = sampler.initial_state(rng)?;
    let mut draws = Vec::with_capacity(cfg.draws_per_chain());
    for it in 1..=cfg.iterations {
        sampler
            .sweep(&mut state, rng)
            .map_err(|e| Error::Iteration { iteration: it, source: Box::new(e) })?;
        if it > cfg.burn_in && (it - cfg.burn_in) % cfg.thin == 0 {
            draws.push(state.snapshot());
        }
    }
    sampler.stats.seconds = start.elapsed().as_secs_f64();
    Ok(draws)
}

/// Fit one arm with a prebuilt kernel over the dataset's pooled rows.
pub fn run_chain_with_kernel(
    ds: &Dataset,
    arm: Arm,
    hp: &Hyperparameters,
    cfg: &ChainConfig,
    kind: ModelKind,
    kernel: Option<&KernelCache>,
) -> Result<PosteriorChain> {
    cfg.validate()?;
    let mut hp = hp.clone();
    if let Some(k) = cfg.k_trunc {
        hp.k_trunc = k;
    }
    if kind == ModelKind::Naive {
        hp.k_trunc = 1;
    }
    let view = ArmView::new(ds, arm, cfg.tie_jitter);
    if view.is_empty() {
        return Err(Error::Validation(vec![format!("arm {arm} has no subjects")]));
    }
    let design = ds.design_matrix();
    let results: Vec<Result<(Vec<Draw>, ChainStats)>> = (0..cfg.chains)
        .into_par_iter()
        .map(|c| {
            let mut sampler = Sampler::new(kind, hp.clone(), kernel, design.clone(), view.clone())?;
            let mut rng = crate::rng::rng_for(cfg.seed, &[arm.index() as u64, c as u64]);
            let draws = run_sampler(&mut sampler, cfg, &mut rng)?;
            Ok((draws, sampler.stats))
        })
        .collect();
    let mut draws = Vec::with_capacity(cfg.chains * cfg.draws_per_chain());
    let mut stats = ChainStats::default();
    for r in results {
        let (d, s) = r?;
        draws.extend(d);
        stats.absorb(&s);
    }
    Ok(PosteriorChain { arm, model: kind, config: cfg.clone(), hyperparameters: hp, draws, stats })
}

/// Fit one arm; builds the kernel over all pooled covariate rows.
pub fn run_chain(
    ds: &Dataset,
    arm: Arm,
    hp: &Hyperparameters,
    cfg: &ChainConfig,
    kind: ModelKind,
) -> Result<PosteriorChain> {
    let kernel = match kind {
        ModelKind::Bnp => Some(build_kernel(&ds.covariate_matrix(), hp.epsilon)?),
        ModelKind::Naive => None,
    };
    run_chain_with_kernel(ds, arm, hp, cfg, kind, kernel.as_ref())
}

/// Seed used by chain `c` of `arm`.
pub fn chain_seed(master: u64, arm: Arm, c: usize) -> u64 {
    derive_seed(master, &[arm.index() as u64, c as u64])
}

/// Batch-means standard error of the mean of `x`.
pub fn batch_means_se(x: &[f64], batches: usize) -> f64 {
    let n = x.len();
    let b = batches.max(2).min(n.max(2));
    let size = n / b;
    if size == 0 {
        return f64::NAN;
    }
    let means: Vec<f64> = (0..b).map(|k| x[k * size..(k + 1) * size].iter().sum::<f64>() / size as f64).collect();
    let m = means.iter().sum::<f64>() / b as f64;
    let var = means.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (b - 1) as f64;
    (var / b as f64).sqrt()
}

/// Effective sample size from the initial positive autocorrelation sequence.
pub fn effective_sample_size(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 4 {
        return n as f64;
    }
    let m = x.iter().sum::<f64>() / n as f64;
    let c0 = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64;
    if c0 <= 0.0 {
        return n as f64;
    }
    let acf = |lag: usize| (0..n - lag).map(|i| (x[i] - m) * (x[i + lag] - m)).sum::<f64>() / n as f64 / c0;
    let mut tau = 1.0;
    let mut lag = 1;
    while lag + 1 < n {
        let pair = acf(lag) + acf(lag + 1);
        if pair <= 0.0 {
            break;
        }
        tau += 2.0 * pair;
        lag += 2;
    }
    n as f64 / tau
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bvn::{quadrant_upper_prob, sample_bvn_region};
    use crate::data::{ObservedRecord, DEFAULT_TIE_JITTER};
    use crate::kernel::build_kernel;
    use crate::rng::rng_for;

    fn hp(p: usize, k: usize) -> Hyperparameters {
        Hyperparameters {
            beta0: [vec![0.0; p], vec![0.0; p]],
            lambda0_cov: [DMatrix::identity(p, p) * 10.0, DMatrix::identity(p, p) * 10.0],
            lambda0: 4.0,
            psi: Cov2::new(1.0, 0.3, 1.0).unwrap(),
            lambda1: 1.0,
            lambda2: 1.0,
            k_trunc: k,
            epsilon: 0.1,
        }
    }

    fn toy_dataset(n: usize, seed: u64, censor: bool) -> Dataset {
        let mut rng = rng_for(seed, &[]);
        let records = (0..n)
            .map(|i| {
                let x = rng.gen_range(-1.5..1.5);
                let yp = 1.0 + 0.5 * x + rng.sample::<f64, _>(StandardNormal) * 0.5;
                let yd = yp + 0.5 + rng.gen::<f64>();
                let c = if censor { rng.gen_range(1.0..3.5) } else { 1e9 };
                let p = crate::data::PotentialRecord { yp: [yp, yp], yd: [yd, yd], c: [c, c] };
                crate::data::coarsen(&p, Arm::from_index(i % 2).unwrap(), vec![x])
            })
            .collect();
        Dataset::new(records, vec!["x".into()]).unwrap()
    }

    fn sampler<'a>(ds: &Dataset, k: &'a KernelCache, kk: usize) -> Sampler<'a> {
        Sampler::new(ModelKind::Bnp, hp(2, kk), Some(k), ds.design_matrix(), ArmView::new(ds, Arm::Control, DEFAULT_TIE_JITTER))
            .unwrap()
    }

    fn ks_two_sample(a: &mut [f64], b: &mut [f64]) -> f64 {
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let (mut i, mut j, mut d) = (0, 0, 0.0f64);
        while i < a.len() && j < b.len() {
            if a[i] <= b[j] {
                i += 1;
            } else {
                j += 1;
            }
            d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
        }
        d
    }

    #[test]
    fn stick_update_moments() {
        let ds = toy_dataset(20, 1, false);
        let k = build_kernel(&ds.covariate_matrix(), 0.1).unwrap();
        let mut s = sampler(&ds, &k, 3);
        let mut rng = rng_for(2, &[]);
        let mut st = s.initial_state(&mut rng).unwrap();
        st.gamma = vec![0; st.gamma.len()];
        st.alpha = 2.0;
        let n = st.gamma.len() as f64;
        let reps = 10_000;
        let mut v1 = Vec::with_capacity(reps);
        for _ in 0..reps {
            s.step1_update_weights(&mut st, &mut rng).unwrap();
            v1.push(st.components[0].v);
            assert!((st.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let mean = v1.iter().sum::<f64>() / reps as f64;
        let exact = (1.0 + n) / (1.0 + n + 2.0);
        let sd = (v1.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / reps as f64).sqrt();
        assert!((mean - exact).abs() < 4.0 * sd / (reps as f64).sqrt());
        // Direct Beta oracle, two-sample KS at the 1% level.
        let beta = Beta::new(1.0 + n, 2.0).unwrap();
        let mut direct: Vec<f64> = (0..reps).map(|_| beta.sample(&mut rng)).collect();
        let d = ks_two_sample(&mut v1, &mut direct);
        assert!(d < 1.63 * (2.0 / reps as f64).sqrt(), "ks={d}");
        // Empty component 2 sees Beta(1, α).
        let mut v2 = 0.0;
        for _ in 0..reps {
            s.step1_update_weights(&mut st, &mut rng).unwrap();
            v2 += st.components[1].v;
        }
        assert!((v2 / reps as f64 - 1.0 / 3.0).abs() < 0.01);
    }

    #[test]
    fn alpha_update_cases() {
        let ds = toy_dataset(10, 3, false);
        let k = build_kernel(&ds.covariate_matrix(), 0.1).unwrap();
        let mut s = sampler(&ds, &k, 4);
        let mut rng = rng_for(4, &[]);
        let mut st = s.initial_state(&mut rng).unwrap();
        for c in st.components.iter_mut() {
            c.v = 1e-300;
        }
        let reps = 10_000;
        let draws: Vec<f64> = (0..reps)
            .map(|_| {
                s.step2_update_alpha(&mut st, &mut rng).unwrap();
                st.alpha
            })
            .collect();
        let mean = draws.iter().sum::<f64>() / reps as f64;
        // Gamma(1 + 3, 1): mean 4, sd 2.
        assert!((mean - 4.0).abs() < 4.0 * 2.0 / (reps as f64).sqrt());
        // K = 2, v₁ = 1 − e⁻¹: rate λ₂ + 1 = 2, shape 2 → mean 1.
        let mut s2 = sampler(&ds, &k, 2);
        let mut st2 = s2.initial_state(&mut rng).unwrap();
        st2.components[0].v = 1.0 - (-1.0f64).exp();
        let mean: f64 = (0..reps)
            .map(|_| {
                s2.step2_update_alpha(&mut st2, &mut rng).unwrap();
                st2.alpha
            })
            .sum::<f64>()
            / reps as f64;
        assert!((mean - 1.0).abs() < 4.0 * (2.0f64).sqrt() / 2.0 / (reps as f64).sqrt());
        st2.components[0].v = 1.0;
        s2.step2_update_alpha(&mut st2, &mut rng).unwrap();
        assert!(st2.alpha > 0.0 && s2.stats.clamped_sticks == 1);
    }

    #[test]
    fn inverse_wishart_moments() {
        let mut rng = rng_for(5, &[]);
        let scale = Cov2::new(2.0, 0.6, 1.5).unwrap();
        let df = 12.0;
        let reps = 20_000;
        let draws: Vec<Cov2> = (0..reps).map(|_| sample_inverse_wishart(df, scale, &mut rng).unwrap()).collect();
        for (get, target) in [
            (Box::new(|c: &Cov2| c.s11) as Box<dyn Fn(&Cov2) -> f64>, 2.0 / (df - 3.0)),
            (Box::new(|c: &Cov2| c.s12), 0.6 / (df - 3.0)),
            (Box::new(|c: &Cov2| c.s22), 1.5 / (df - 3.0)),
        ] {
            let v: Vec<f64> = draws.iter().map(&get).collect();
            let m = v.iter().sum::<f64>() / reps as f64;
            let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / reps as f64).sqrt();
            assert!((m - target).abs() < 4.0 * sd / (reps as f64).sqrt(), "{m} vs {target}");
        }
    }

    #[test]
    fn sigma_update_with_zero_residuals() {
        let ds = toy_dataset(8, 6, false);
        let k = build_kernel(&ds.covariate_matrix(), 0.1).unwrap();
        let mut s = sampler(&ds, &k, 2);
        let mut rng = rng_for(7, &[]);
        let mut st = s.initial_state(&mut rng).unwrap();
        for (i, y) in st.y_aug.clone().iter().enumerate() {
            let row = s.view.rows[i];
            let g = st.gamma[i];
            st.components[g].theta_star[0][row] = y[0];
            st.components[g].theta_star[1][row] = y[1];
        }
        let n = st.y_aug.len() as f64;
        let reps = 10_000;
        let mut acc = 0.0;
        let mut sq = 0.0;
        for _ in 0..reps {
            s.step3_update_sigma(&mut st, &mut rng).unwrap();
            acc += st.sigma.s11;
            sq += st.sigma.s11 * st.sigma.s11;
        }
        let m = acc / reps as f64;
        let sd = (sq / reps as f64 - m * m).sqrt();
        assert!((m - 1.0 / (4.0 + n - 3.0)).abs() < 4.0 * sd / (reps as f64).sqrt());
    }

    #[test]
    fn theta_scalar_conjugate() {
        // One row, one member, σ12 = 0: θ ~ N(m, 1 + ε²), ỹ | θ ~ N(θ, σ11).
        let rec = ObservedRecord { t1: 0.7, t2: 2.0, delta: true, xi: true, z: Arm::Control, x: vec![0.0] };
        let ds = Dataset::new(vec![rec], vec!["x".into()]).unwrap();
        let k = build_kernel(&ds.covariate_matrix(), 0.1).unwrap();
        let mut h = hp(2, 1);
        h.beta0 = [vec![0.2, 0.0], vec![1.0, 0.0]];
        let mut s = Sampler::new(ModelKind::Bnp, h, Some(&k), ds.design_matrix(), ArmView::new(&ds, Arm::Control, 0.0)).unwrap();
        let mut rng = rng_for(8, &[]);
        let mut st = s.initial_state(&mut rng).unwrap();
        st.sigma = Cov2::new(0.5, 0.0, 0.8).unwrap();
        let reps = 40_000;
        let mut v = Vec::with_capacity(reps);
        for _ in 0..reps {
            s.step4_update_theta_star(&mut st, &mut rng).unwrap();
            v.push(st.components[0].theta_star[0][0]);
        }
        let prior_var = 1.01;
        let post_var = 1.0 / (1.0 / prior_var + 1.0 / 0.5);
        let post_mean = post_var * (0.2 / prior_var + 0.7 / 0.5);
        let m = v.iter().sum::<f64>() / reps as f64;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (reps - 1) as f64;
        assert!((m - post_mean).abs() < 4.0 * (post_var / reps as f64).sqrt());
        assert!((var - post_var).abs() < 4.0 * post_var * (2.0 / reps as f64).sqrt());
    }

    #[test]
    fn empty_component_draws_from_prior() {
        let ds = toy_dataset(6, 9, false);
        let k = build_kernel(&ds.covariate_matrix(), 0.1).unwrap();
        let mut s = sampler(&ds, &k, 2);
        let mut rng = rng_for(10, &[]);
        let mut st = s.initial_state(&mut rng).unwrap();
        st.gamma = vec![0; st.gamma.len()];
        st.components[1].beta = [vec![1.0, 2.0], vec![-1.0, 0.5]];
        let reps = 20_000;
        let n = s.n_rows();
        let mut sum = vec![0.0; n];
        let mut sq = vec![0.0; n];
        for _ in 0..reps {
            s.step4_update_theta_star(&mut st, &mut rng).unwrap();
            for i in 0..n {
                let v = st.components[1].theta_star[0][i];
                sum[i] += v;
                sq[i] += v * v;
            }
        }
        let design = ds.design_matrix();
        for i in 0..n {
            let m = sum[i] / reps as f64;
            let mean = design[(i, 0)] + 2.0 * design[(i, 1)];
            let var = sq[i] / reps as f64 - m * m;
            assert!((m - mean).abs() < 4.0 * (1.01f64 / reps as f64).sqrt());
            assert!((var - 1.01).abs() < 4.0 * 1.01 * (2.0 / reps as f64).sqrt());
        }
    }

    #[test]
    fn beta_conditional_mean_cases() {
        let ds = toy_dataset(12, 11, false);
        let k = build_kernel(&ds.covariate_matrix(), 0.1).unwrap();
        let mut h = hp(2, 2);
        h.lambda0_cov = [DMatrix::identity(2, 2) * 1e12, DMatrix::identity(2, 2) * 1e12];
        let s = Sampler::new(ModelKind::Bnp, h, Some(&k), ds.design_matrix(), ArmView::new(&ds, Arm::Control, 0.0)).unwrap();
        let x = ds.design_matrix();
        let mut rng = rng_for(12, &[]);
        let theta: Vec<f64> = (0..x.nrows()).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let rinv = k.matrix().clone().try_inverse().unwrap();
        let t = DVector::from_column_slice(&theta);
        let gls = (x.transpose() * &rinv * &x).try_inverse().unwrap() * x.transpose() * &rinv * t;
        let got = s.beta_conditional_mean(&theta, 0);
        assert!((got - gls).abs().max() < 1e-6);
        let exact = crate::model::design_times(&x, &[0.3, -1.2]);
        let got = s.beta_conditional_mean(&exact, 1);
        assert!((got[0] - 0.3).abs() < 1e-6 && (got[1] + 1.2).abs() < 1e-6);
        // X'R⁻¹θ = 0 leaves the prior pull.
        let mut h = hp(2, 2);
        h.beta0 = [vec![1.0, 2.0], vec![0.0, 0.0]];
        let s = Sampler::new(ModelKind::Bnp, h, Some(&k), ds.design_matrix(), ArmView::new(&ds, Arm::Control, 0.0)).unwrap();
        let got = s.beta_conditional_mean(&vec![0.0; x.nrows()], 0);
        let expect = s.beta_conditional_cov(0) * DVector::from_vec(vec![0.1, 0.2]);
        assert!((got - expect).abs().max() < 1e-12);
    }

    #[test]
    fn membership_and_augmentation() {
        let ds = toy_dataset(30, 13, true);
        let k = build_kernel(&ds.covariate_matrix(), 0.1).unwrap();
        // K = 1: label always 0.
        let mut s1 = sampler(&ds, &k, 1);
        let mut rng = rng_for(14, &[]);
        let mut st = s1.initial_state(&mut rng).unwrap();
        s1.step6_update_membership_and_augment(&mut st, &mut rng).unwrap();
        assert!(st.gamma.iter().all(|&g| g == 0));
        for i in 0..s1.view.len() {
            assert!(s1.view.consistent(i, st.y_aug[i]), "subject {i}");
        }
        // K = 2, quadrant subject: normalized membership vs direct quadrant masses.
        let s2 = sampler(&ds, &k, 2);
        let mut st = s2.initial_state(&mut rng).unwrap();
        st.components[0].w = 0.3;
        st.components[1].w = 0.7;
        for r in 0..s2.n_rows() {
            st.components[1].theta_star[0][r] += 1.5;
            st.components[1].theta_star[1][r] += 0.8;
        }
        let i = (0..s2.view.len())
            .find(|&i| s2.view.cases[i] == CensoringCase::Neither)
            .expect("fixture has a doubly censored subject");
        let lw = s2.membership_log_weights(&st, i).unwrap();
        let row = s2.view.rows[i];
        let direct: Vec<f64> = (0..2)
            .map(|h| {
                let c = &st.components[h];
                let b = st.sigma.bvn([c.theta_star[0][row], c.theta_star[1][row]]).unwrap();
                c.w * quadrant_upper_prob(&b, s2.view.t2[i])
            })
            .collect();
        let z: f64 = lw.iter().map(|l| l.exp()).sum();
        let zd: f64 = direct.iter().sum();
        for h in 0..2 {
            assert!((lw[h].exp() / z - direct[h] / zd).abs() < 1e-10);
        }
        // Quadrant augmentation vs plain rejection.
        let c = &st.components[0];
        let b = st.sigma.bvn([c.theta_star[0][row], c.theta_star[1][row]]).unwrap();
        let region = Region::Quadrant { c: s2.view.t2[i] };
        let reps = 5000;
        let mut a: Vec<f64> = (0..reps).map(|_| sample_bvn_region(&b, region, &mut rng).unwrap()[1]).collect();
        let mut rej = Vec::with_capacity(reps);
        while rej.len() < reps {
            let y = b.sample(&mut rng);
            if region.contains(y) {
                rej.push(y[1]);
            }
        }
        let d = ks_two_sample(&mut a, &mut rej);
        assert!(d < 1.63 * (2.0 / reps as f64).sqrt());
    }

    #[test]
    fn chain_is_deterministic_and_sized() {
        let ds = toy_dataset(24, 15, true);
        let cfg = ChainConfig { iterations: 60, burn_in: 20, thin: 4, seed: 99, k_trunc: Some(4), ..Default::default() };
        let a = run_chain(&ds, Arm::Treated, &hp(2, 4), &cfg, ModelKind::Bnp).unwrap();
        let b = run_chain(&ds, Arm::Treated, &hp(2, 4), &cfg, ModelKind::Bnp).unwrap();
        assert_eq!(a.draws, b.draws);
        assert_eq!(a.draws.len(), 10);
        let cfg2 = ChainConfig { chains: 3, ..cfg.clone() };
        let c = run_chain(&ds, Arm::Treated, &hp(2, 4), &cfg2, ModelKind::Bnp).unwrap();
        assert_eq!(c.draws.len(), 30);
        assert_eq!(c.draws[..10], a.draws[..]);
        assert_eq!(ChainConfig::default().draws_per_chain(), 300);
    }

    #[test]
    fn chain_file_round_trip() {
        let ds = toy_dataset(16, 16, true);
        let cfg = ChainConfig { iterations: 20, burn_in: 10, thin: 2, seed: 1, k_trunc: Some(3), ..Default::default() };
        let ch = run_chain(&ds, Arm::Control, &hp(2, 3), &cfg, ModelKind::Bnp).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        ch.save(&p).unwrap();
        let back = PosteriorChain::load(&p).unwrap();
        assert_eq!(back.draws, ch.draws);
        assert_eq!(back.config, ch.config);
        assert_eq!(back.arm, Arm::Control);
        ch.write_trace_csv(dir.path().join("t.csv")).unwrap();
    }

    #[test]
    fn config_validation() {
        assert!(ChainConfig { burn_in: 10, iterations: 10, ..Default::default() }.validate().is_err());
        assert!(ChainConfig { thin: 0, ..Default::default() }.validate().is_err());
        assert!("naive".parse::<ModelKind>().is_ok());
        assert!("cox".parse::<ModelKind>().is_err());
    }

    #[test]
    fn kmeans_separates_clusters() {
        let mut rng = rng_for(17, &[]);
        let mut pts = vec![];
        for i in 0..40 {
            let c = if i < 20 { 0.0 } else { 10.0 };
            pts.push([c + rng.gen::<f64>(), c + rng.gen::<f64>()]);
        }
        let l = kmeans_labels(&pts, 2, &mut rng);
        assert!(l[..20].iter().all(|&v| v == l[0]));
        assert!(l[20..].iter().all(|&v| v == l[20]));
        assert_ne!(l[0], l[20]);
    }

    #[test]
    fn diagnostics() {
        let x: Vec<f64> = (0..1000).map(|i| (i % 2) as f64).collect();
        assert!(batch_means_se(&x, 20) < 1e-12);
        let mut rng = rng_for(18, &[]);
        let iid: Vec<f64> = (0..4000).map(|_| rng.sample(StandardNormal)).collect();
        let ess = effective_sample_size(&iid);
        assert!(ess > 2500.0 && ess < 6000.0, "{ess}");
    }
}
