//! Per-arm DDP-GP mixture: hyperparameters, chain state, stored draws and the
//! mixture functionals (density, marginal death CDF, conditional progression
//! CDF, observed-data likelihood) evaluated at a covariate row.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bvn::{self, Bvn};
use crate::config::KvConfig;
use crate::data::{Arm, CensoringCase, Dataset, ObservedRecord};
use crate::error::{Error, Result};
use crate::kernel::DEFAULT_EPSILON;

pub const DEFAULT_K_TRUNC: usize = 20;
pub const DEFAULT_PRIOR_BETA_VAR: f64 = 10.0;

/// 2×2 symmetric positive-definite matrix stored as (s11, s12, s22).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cov2 {
    pub s11: f64,
    pub s12: f64,
    pub s22: f64,
}

impl Cov2 {
    pub fn new(s11: f64, s12: f64, s22: f64) -> Result<Self> {
        let c = Self { s11, s12, s22 };
        if !c.is_pd() {
            return Err(Error::Domain(format!("2×2 covariance not positive definite: {c:?}")));
        }
        Ok(c)
    }

    pub fn is_pd(&self) -> bool {
        self.s11 > 0.0 && self.s22 > 0.0 && self.det() > 0.0 && self.det().is_finite()
    }

    pub fn det(&self) -> f64 {
        self.s11 * self.s22 - self.s12 * self.s12
    }

    pub fn inverse(&self) -> Cov2 {
        let d = self.det();
        Cov2 { s11: self.s22 / d, s12: -self.s12 / d, s22: self.s11 / d }
    }

    pub fn as_array(&self) -> [[f64; 2]; 2] {
        [[self.s11, self.s12], [self.s12, self.s22]]
    }

    pub fn bvn(&self, mu: [f64; 2]) -> Result<Bvn> {
        Bvn::from_parts(mu, self.s11, self.s12, self.s22)
    }
}

/// Fixed prior settings for one arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    /// Prior mean of the GP mean-function coefficients per endpoint
    /// (intercept first, then covariates).
    pub beta0: [Vec<f64>; 2],
    /// Prior covariance of those coefficients per endpoint.
    pub lambda0_cov: [DMatrix<f64>; 2],
    /// Inverse-Wishart degrees of freedom for Σ.
    pub lambda0: f64,
    /// Inverse-Wishart scale for Σ.
    pub psi: Cov2,
    /// Gamma shape and rate for the DP mass α.
    pub lambda1: f64,
    pub lambda2: f64,
    pub k_trunc: usize,
    pub epsilon: f64,
}

impl Hyperparameters {
    pub fn n_coef(&self) -> usize {
        self.beta0[0].len()
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.beta0[0].len();
        if self.beta0[1].len() != p || self.lambda0_cov.iter().any(|m| m.nrows() != p || m.ncols() != p) {
            return Err(Error::Config("hyperparameter dimensions disagree".into()));
        }
        if !(self.lambda0 > 3.0) {
            return Err(Error::Config(format!("lambda0 must exceed 3, got {}", self.lambda0)));
        }
        if !self.psi.is_pd() {
            return Err(Error::Config("psi must be positive definite".into()));
        }
        if !(self.lambda1 > 0.0 && self.lambda2 > 0.0) {
            return Err(Error::Config("lambda1 and lambda2 must be positive".into()));
        }
        if self.k_trunc < 1 {
            return Err(Error::Config("k_trunc must be at least 1".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        for m in &self.lambda0_cov {
            if m.clone().cholesky().is_none() {
                return Err(Error::Config("lambda0_cov must be positive definite".into()));
            }
        }
        Ok(())
    }

    /// Overrides from flat keys: `k_trunc`, `epsilon`, `lambda0`, `lambda1`,
    /// `lambda2`, `psi = s11,s12,s22`, `beta0.1`/`beta0.2 = b0,b1,...`,
    /// `lambda0_diag = v` (diagonal prior variance, both endpoints).
    pub fn apply_config(&mut self, cfg: &KvConfig) -> Result<()> {
        if let Some(k) = cfg.get("k_trunc")? {
            self.k_trunc = k;
        }
        if let Some(e) = cfg.get("epsilon")? {
            self.epsilon = e;
        }
        if let Some(v) = cfg.get("lambda0")? {
            self.lambda0 = v;
        }
        if let Some(v) = cfg.get("lambda1")? {
            self.lambda1 = v;
        }
        if let Some(v) = cfg.get("lambda2")? {
            self.lambda2 = v;
        }
        if let Some(v) = cfg.get_list::<f64>("psi")? {
            if v.len() != 3 {
                return Err(Error::Config("psi needs three values s11,s12,s22".into()));
            }
            self.psi = Cov2 { s11: v[0], s12: v[1], s22: v[2] };
        }
        for j in 0..2 {
            if let Some(v) = cfg.get_list::<f64>(&format!("beta0.{}", j + 1))? {
                self.beta0[j] = v;
            }
        }
        if let Some(v) = cfg.get::<f64>("lambda0_diag")? {
            let p = self.beta0[0].len();
            self.lambda0_cov = [DMatrix::from_diagonal_element(p, p, v), DMatrix::from_diagonal_element(p, p, v)];
        }
        self.validate()
    }
}

/// Least-squares fit of (t1, t2) on `[1, x]` among an arm's fully observed subjects.
pub struct CompleteCaseFit {
    pub beta: [Vec<f64>; 2],
    pub resid_cov: Cov2,
    pub n: usize,
}

pub fn complete_case_regression(ds: &Dataset, arm: Arm, jitter: f64) -> Result<CompleteCaseFit> {
    let p = ds.dim() + 1;
    let rows: Vec<&ObservedRecord> =
        ds.records().iter().filter(|r| r.z == arm && r.delta && r.xi).collect();
    let need = ds.dim() + 2;
    if rows.len() < need {
        return Err(Error::TooFewCompleteCases { arm: arm.index() as u8, have: rows.len(), need });
    }
    let n = rows.len();
    let x = DMatrix::from_fn(n, p, |i, j| if j == 0 { 1.0 } else { rows[i].x[j - 1] });
    let y = DMatrix::from_fn(n, 2, |i, j| {
        let (a, b) = rows[i].fit_times(jitter);
        if j == 0 { a } else { b }
    });
    let xtx = x.transpose() * &x;
    let chol = xtx.cholesky().ok_or_else(|| {
        Error::Validation(vec![format!(
            "complete cases in arm {arm} give a rank-deficient design; supply hyperparameters explicitly"
        )])
    })?;
    let b = chol.solve(&(x.transpose() * &y));
    let e = &y - &x * &b;
    let df = (n - p) as f64;
    let s = e.transpose() * &e / df;
    let resid_cov = Cov2::new(s[(0, 0)], s[(0, 1)], s[(1, 1)])
        .map_err(|_| Error::Factorization("complete-case residual covariance is singular".into()))?;
    Ok(CompleteCaseFit {
        beta: [b.column(0).iter().copied().collect(), b.column(1).iter().copied().collect()],
        resid_cov,
        n,
    })
}

/// Empirical-Bayes defaults: β₀ from the complete-case bivariate regression,
/// Λ₀ = 10·I, λ₀ = 4 and Ψ = Σ̂ (so E[Σ] = Ψ / (λ₀ − 3) = Σ̂), λ₁ = λ₂ = 1.
pub fn empirical_bayes_init(ds: &Dataset, arm: Arm) -> Result<Hyperparameters> {
    let fit = complete_case_regression(ds, arm, crate::data::DEFAULT_TIE_JITTER)?;
    let p = ds.dim() + 1;
    let lam = DMatrix::from_diagonal_element(p, p, DEFAULT_PRIOR_BETA_VAR);
    let hp = Hyperparameters {
        beta0: fit.beta,
        lambda0_cov: [lam.clone(), lam],
        lambda0: 4.0,
        psi: fit.resid_cov,
        lambda1: 1.0,
        lambda2: 1.0,
        k_trunc: DEFAULT_K_TRUNC,
        epsilon: DEFAULT_EPSILON,
    };
    hp.validate()?;
    Ok(hp)
}

/// One stick-breaking component; GP values are held at every pooled row.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureComponent {
    pub v: f64,
    pub w: f64,
    pub theta_star: [Vec<f64>; 2],
    pub beta: [Vec<f64>; 2],
}

/// Complete Gibbs state for one arm.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub components: Vec<MixtureComponent>,
    pub sigma: Cov2,
    pub alpha: f64,
    /// Component label per arm subject, 0-based.
    pub gamma: Vec<usize>,
    /// Augmented (Y_P, Y_D) per arm subject.
    pub y_aug: Vec<[f64; 2]>,
}

/// w_h = v_h Π_{l<h}(1 − v_l) for h < K, with the last weight taking the rest.
pub fn stick_weights(v: &[f64]) -> Vec<f64> {
    let k = v.len();
    let mut w = Vec::with_capacity(k);
    let mut rest = 1.0;
    for (h, &vh) in v.iter().enumerate() {
        if h + 1 == k {
            w.push(rest);
        } else {
            w.push(vh * rest);
            rest *= 1.0 - vh;
        }
    }
    w
}

impl ModelState {
    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.w).collect()
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut n = vec![0; self.k()];
        for &g in &self.gamma {
            n[g] += 1;
        }
        n
    }

    pub fn snapshot(&self) -> Draw {
        let k = self.k();
        let n_rows = self.components[0].theta_star[0].len();
        let p = self.components[0].beta[0].len();
        let mut theta = Vec::with_capacity(k * 2 * n_rows);
        let mut beta = Vec::with_capacity(k * 2 * p);
        for c in &self.components {
            for j in 0..2 {
                theta.extend_from_slice(&c.theta_star[j]);
                beta.extend_from_slice(&c.beta[j]);
            }
        }
        Draw {
            k,
            n_rows,
            n_coef: p,
            weights: self.weights(),
            theta,
            beta,
            sigma: self.sigma,
            alpha: self.alpha,
            occupied: self.counts().iter().filter(|&&c| c > 0).count(),
        }
    }
}

/// A stored posterior draw: everything downstream functionals need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Draw {
    pub k: usize,
    pub n_rows: usize,
    pub n_coef: usize,
    pub weights: Vec<f64>,
    /// Layout `[component][endpoint][row]`.
    pub theta: Vec<f64>,
    /// Layout `[component][endpoint][coef]`.
    pub beta: Vec<f64>,
    pub sigma: Cov2,
    pub alpha: f64,
    pub occupied: usize,
}

impl Draw {
    pub fn theta(&self, h: usize, j: usize) -> &[f64] {
        let start = (h * 2 + j) * self.n_rows;
        &self.theta[start..start + self.n_rows]
    }

    pub fn beta(&self, h: usize, j: usize) -> &[f64] {
        let start = (h * 2 + j) * self.n_coef;
        &self.beta[start..start + self.n_coef]
    }

    /// Mixture at pooled row `i`, all components.
    pub fn row_mixture(&self, i: usize) -> RowMixture {
        self.row_mixture_pruned(i, 0.0)
    }

    /// Mixture at row `i` dropping components with weight ≤ `min_weight`.
    /// The dropped mass is bounded by `k · min_weight`.
    pub fn row_mixture_pruned(&self, i: usize, min_weight: f64) -> RowMixture {
        let mut weights = Vec::with_capacity(self.k);
        let mut means = Vec::with_capacity(self.k);
        for h in 0..self.k {
            let w = self.weights[h];
            if w > min_weight || (min_weight == 0.0 && w >= 0.0) {
                weights.push(w);
                means.push([self.theta(h, 0)[i], self.theta(h, 1)[i]]);
            }
        }
        RowMixture::new(weights, means, self.sigma)
    }

    pub fn mixture_density(&self, i: usize, yp: f64, yd: f64) -> f64 {
        self.row_mixture(i).density(yp, yd)
    }

    pub fn death_marginal_cdf(&self, i: usize, t: f64) -> f64 {
        self.row_mixture(i).death_cdf(t)
    }

    pub fn progression_conditional_cdf(&self, i: usize, s: f64, t: f64) -> Result<f64> {
        self.row_mixture(i).progression_conditional_cdf(s, t)
    }

    pub fn observed_likelihood(&self, record: &ObservedRecord, i: usize, jitter: f64) -> f64 {
        let (t1, t2) = record.fit_times(jitter);
        self.row_mixture(i).observed_likelihood(t1, t2, record.censoring_case())
    }
}

/// A bivariate normal mixture with common covariance, at one covariate row.
#[derive(Debug, Clone)]
pub struct RowMixture {
    pub weights: Vec<f64>,
    pub means: Vec<[f64; 2]>,
    pub sigma: Cov2,
    sd1: f64,
    sd2: f64,
    /// sd of Y_P given Y_D.
    sd1_given2: f64,
    /// Regression slope of Y_P on Y_D.
    slope12: f64,
}

impl RowMixture {
    pub fn new(weights: Vec<f64>, means: Vec<[f64; 2]>, sigma: Cov2) -> Self {
        let sd1 = sigma.s11.sqrt();
        let sd2 = sigma.s22.sqrt();
        Self {
            weights,
            means,
            sigma,
            sd1,
            sd2,
            sd1_given2: (sigma.det() / sigma.s22).sqrt(),
            slope12: sigma.s12 / sigma.s22,
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn sd_death(&self) -> f64 {
        self.sd2
    }

    fn bvn(&self, h: usize) -> Bvn {
        Bvn::from_parts(self.means[h], self.sigma.s11, self.sigma.s12, self.sigma.s22)
            .expect("row mixture covariance is positive definite")
    }

    /// Σ_h w_h φ₂((yp, yd); μ_h, Σ).
    pub fn density(&self, yp: f64, yd: f64) -> f64 {
        (0..self.len()).map(|h| self.weights[h] * self.bvn(h).density(yp, yd)).sum()
    }

    /// G(t) = Σ_h w_h Φ((t − μ_h2) / σ2).
    pub fn death_cdf(&self, t: f64) -> f64 {
        let v: f64 = self
            .weights
            .iter()
            .zip(&self.means)
            .map(|(w, m)| w * bvn::std_normal_cdf((t - m[1]) / self.sd2))
            .sum();
        v.clamp(0.0, 1.0)
    }

    /// 1 − G(t), summed from upper tails.
    pub fn death_sf(&self, t: f64) -> f64 {
        let v: f64 = self
            .weights
            .iter()
            .zip(&self.means)
            .map(|(w, m)| w * bvn::std_normal_sf((t - m[1]) / self.sd2))
            .sum();
        v.clamp(0.0, 1.0)
    }

    /// g(t), the marginal death density.
    pub fn death_pdf(&self, t: f64) -> f64 {
        self.weights
            .iter()
            .zip(&self.means)
            .map(|(w, m)| w * bvn::norm_pdf((t - m[1]) / self.sd2))
            .sum::<f64>()
            / self.sd2
    }

    /// V(s | t) = Pr[Y_P ≤ s | Y_D = t] for s ≤ t.
    pub fn progression_conditional_cdf(&self, s: f64, t: f64) -> Result<f64> {
        if s > t {
            return Err(Error::Domain(format!("conditional progression CDF needs s ≤ t, got s={s}, t={t}")));
        }
        let dens = self.death_pdf(t);
        if dens <= 0.0 {
            // All conditional weight underflowed; use the nearest component.
            let h = self.nearest_death_component(t);
            return Ok(self.component_progression_cdf(h, s, t));
        }
        Ok((self.progression_subdensity(s, t) / dens).clamp(0.0, 1.0))
    }

    fn nearest_death_component(&self, t: f64) -> usize {
        (0..self.len())
            .max_by(|&a, &b| {
                let la = self.weights[a].ln() - 0.5 * ((t - self.means[a][1]) / self.sd2).powi(2);
                let lb = self.weights[b].ln() - 0.5 * ((t - self.means[b][1]) / self.sd2).powi(2);
                la.total_cmp(&lb)
            })
            .unwrap_or(0)
    }

    fn component_progression_cdf(&self, h: usize, s: f64, t: f64) -> f64 {
        let m = self.means[h][0] + self.slope12 * (t - self.means[h][1]);
        bvn::std_normal_cdf((s - m) / self.sd1_given2)
    }

    /// V(s | t) g(t) = Σ_h w_h φ(t; μ_h2, σ2) Φ((s − μ_{1|2,h}(t)) / σ_{1|2}).
    pub fn progression_subdensity(&self, s: f64, t: f64) -> f64 {
        (0..self.len())
            .map(|h| {
                let z = (t - self.means[h][1]) / self.sd2;
                self.weights[h] * bvn::norm_pdf(z) / self.sd2 * self.component_progression_cdf(h, s, t)
            })
            .sum()
    }

    /// Likelihood factor for one observed record, selected by censoring case.
    pub fn observed_likelihood(&self, t1: f64, t2: f64, case: CensoringCase) -> f64 {
        (0..self.len())
            .map(|h| self.weights[h] * component_case_likelihood(&self.bvn(h), t1, t2, case))
            .sum()
    }

    /// Death-margin likelihood: g(t2) if death observed, else 1 − G(t2).
    pub fn death_likelihood(&self, t2: f64, xi: bool) -> f64 {
        if xi {
            self.death_pdf(t2)
        } else {
            self.death_sf(t2)
        }
    }

    pub fn sd_progression(&self) -> f64 {
        self.sd1
    }
}

/// ln of one component's case-specific factor.
pub fn log_component_case_likelihood(b: &Bvn, t1: f64, t2: f64, case: CensoringCase) -> f64 {
    match case {
        CensoringCase::Both => b.log_density(t1, t2),
        CensoringCase::ProgressionOnly => bvn::log_halfplane_slice(b, t1, t2),
        CensoringCase::DeathOnly => bvn::log_slice_ge(b, t2, t1),
        CensoringCase::Neither => bvn::log_quadrant_upper_prob(b, t2),
    }
}

pub fn component_case_likelihood(b: &Bvn, t1: f64, t2: f64, case: CensoringCase) -> f64 {
    match case {
        CensoringCase::Neither => bvn::quadrant_upper_prob(b, t2),
        _ => log_component_case_likelihood(b, t1, t2, case).exp(),
    }
}

/// An arm's subjects as seen by the sampler: pooled row index, fit times
/// (tie-jittered) and censoring case.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmView {
    pub arm: Arm,
    pub rows: Vec<usize>,
    pub t1: Vec<f64>,
    pub t2: Vec<f64>,
    pub cases: Vec<CensoringCase>,
}

impl ArmView {
    pub fn new(ds: &Dataset, arm: Arm, jitter: f64) -> Self {
        let rows = ds.arm_indices(arm);
        let mut t1 = Vec::with_capacity(rows.len());
        let mut t2 = Vec::with_capacity(rows.len());
        let mut cases = Vec::with_capacity(rows.len());
        for &i in &rows {
            let r = &ds.records()[i];
            let (a, b) = r.fit_times(jitter);
            t1.push(a);
            t2.push(b);
            cases.push(r.censoring_case());
        }
        Self { arm, rows, t1, t2, cases }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// True when `y` is consistent with subject `i`'s censoring pattern.
    pub fn consistent(&self, i: usize, y: [f64; 2]) -> bool {
        let (t1, t2) = (self.t1[i], self.t2[i]);
        match self.cases[i] {
            CensoringCase::Both => y == [t1, t2],
            CensoringCase::ProgressionOnly => y[0] == t1 && y[1] > t2,
            CensoringCase::DeathOnly => y[1] == t2 && y[0] > t1,
            CensoringCase::Neither => y[0] > t2 && y[1] > t2,
        }
    }
}

/// (N × p) design rows times coefficients.
pub fn design_times(design: &DMatrix<f64>, beta: &[f64]) -> Vec<f64> {
    let b = DVector::from_column_slice(beta);
    (design * b).iter().copied().collect()
}
