//! Simulation scenarios with known truth: potential-outcome generation, analytic
//! marginal death survival, Monte Carlo truth for τ(u), and RMSE metrics.

use std::f64::consts::{FRAC_PI_2, PI};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bvn::{sample_truncated_normal, std_normal_cdf, std_normal_sf};
use crate::data::{coarsen, Arm, Dataset, PotentialRecord};
use crate::error::{Error, Result};
use crate::quadrature::GaussLegendre;
use crate::rng::{rng_for, SimRng};

pub const GRID_POINTS: usize = 34;
const X1_MEAN: f64 = 4.5;
const X1_LO: f64 = 2.0;
const X1_HI: f64 = 7.5;
const X2_PROB: f64 = 0.4;
const ERR_CORR: f64 = 0.75;
const DEATH_ERR_MEAN: f64 = 1.5;
const T_DF: f64 = 3.0;

/// 34 equally spaced log-day points strictly inside (0, 10).
pub fn log_grid() -> Vec<f64> {
    (1..=GRID_POINTS).map(|k| 10.0 * k as f64 / (GRID_POINTS + 1) as f64).collect()
}

/// [`log_grid`] in days.
pub fn day_grid() -> Vec<f64> {
    log_grid().into_iter().map(f64::exp).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    /// Bivariate normal errors.
    Normal,
    /// Scaled bivariate t errors with 3 degrees of freedom.
    StudentT,
    /// Normal errors, death mean with an extra 0.5√x₁ term.
    Nonlinear,
}

impl Scenario {
    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            1 => Ok(Scenario::Normal),
            2 => Ok(Scenario::StudentT),
            3 => Ok(Scenario::Nonlinear),
            _ => Err(Error::Config(format!("scenario must be 1, 2 or 3, got {id}"))),
        }
    }

    pub fn id(self) -> u8 {
        match self {
            Scenario::Normal => 1,
            Scenario::StudentT => 2,
            Scenario::Nonlinear => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub scenario: Scenario,
    pub n: usize,
    /// Gaussian-copula correlation joining the arms' death times.
    pub rho_true: f64,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn new(id: u8, n: usize, seed: u64) -> Result<Self> {
        let s = Self { scenario: Scenario::from_id(id)?, n, rho_true: 0.5, seed };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 10 {
            return Err(Error::Config(format!("n must be at least 10, got {}", self.n)));
        }
        if !(self.rho_true.abs() <= 1.0) {
            return Err(Error::Config("rho_true must lie in [-1, 1]".into()));
        }
        Ok(())
    }
}

/// Mean of (Y_P, Y_D) under arm z at covariates (x₁, x₂), excluding the error means.
pub fn linear_predictors(scenario: Scenario, z: f64, x1: f64, x2: f64) -> [f64; 2] {
    let mut d = 4.0 * z + 0.3 * x1 + x2;
    if scenario == Scenario::Nonlinear {
        d += 0.5 * x1.sqrt();
    }
    [1.5 * z + 0.6 * x1 + 2.0 * x2, d]
}

/// Student-t CDF with 3 degrees of freedom.
pub fn t3_cdf(t: f64) -> f64 {
    if t > 0.0 {
        return 1.0 - t3_cdf(-t);
    }
    // With φ = atan(t/√3) + π/2: F = (φ − sin φ cos φ) / π.
    let phi = (-(3f64.sqrt()) / t).atan();
    let phi = if t == 0.0 { FRAC_PI_2 } else { phi };
    h_phi(phi) / PI
}

fn h_phi(phi: f64) -> f64 {
    if phi < 0.1 {
        let p2 = phi * phi;
        phi * p2 * (2.0 / 3.0 - p2 * (2.0 / 15.0 - p2 * (4.0 / 315.0 - p2 * 2.0 / 2835.0)))
    } else {
        phi - phi.sin() * phi.cos()
    }
}

/// Lower quantile of the t₃ distribution for p ∈ (0, 1/2]; safeguarded Newton in
/// the angle φ with F = (φ − sin φ cos φ)/π.
fn t3_lower_quantile(p: f64) -> f64 {
    let target = PI * p;
    let (mut lo, mut hi) = (0.0, FRAC_PI_2);
    let mut phi = (1.5 * target).cbrt().min(FRAC_PI_2 * 0.999);
    for _ in 0..100 {
        let g = h_phi(phi) - target;
        if g > 0.0 {
            hi = phi;
        } else {
            lo = phi;
        }
        let step = g / (2.0 * phi.sin().powi(2));
        if step.abs() <= 1e-15 * phi {
            break;
        }
        let mut next = phi - step;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        phi = next;
    }
    if phi >= FRAC_PI_2 {
        return 0.0;
    }
    -(3f64.sqrt()) * phi.cos() / phi.sin()
}

/// t₃ value with the same lower-tail probability as the standard normal score `eta`.
pub fn t3_from_normal_score(eta: f64) -> f64 {
    if eta <= 0.0 {
        t3_lower_quantile(std_normal_cdf(eta))
    } else {
        -t3_lower_quantile(std_normal_sf(eta))
    }
}

/// Scale that gives the t₃ marginal unit variance.
pub fn t_scale() -> f64 {
    ((T_DF - 2.0) / T_DF).sqrt()
}

/// Death error ν from a standard normal score, preserving the marginal law.
fn death_error(scenario: Scenario, eta: f64) -> f64 {
    match scenario {
        Scenario::StudentT => DEATH_ERR_MEAN + t_scale() * t3_from_normal_score(eta),
        _ => DEATH_ERR_MEAN + eta,
    }
}

/// Progression error ε given the death error ν.
fn progression_error<R: Rng + ?Sized>(scenario: Scenario, nu: f64, rng: &mut R) -> f64 {
    let r = ERR_CORR;
    match scenario {
        Scenario::StudentT => {
            let s = t_scale();
            let v = (nu - DEATH_ERR_MEAN) / s;
            // Bivariate t: ε/s | v = r v + √((df + v²)(1 − r²)/(df + 1)) T_{df+1}.
            let df1 = T_DF + 1.0;
            let w = Gamma::new(df1 / 2.0, 2.0).expect("valid").sample(rng);
            let t: f64 = rng.sample::<f64, _>(StandardNormal) / (w / df1).sqrt();
            s * (r * v + ((T_DF + v * v) * (1.0 - r * r) / df1).sqrt() * t)
        }
        _ => r * (nu - DEATH_ERR_MEAN) + (1.0 - r * r).sqrt() * rng.sample::<f64, _>(StandardNormal),
    }
}

/// Marginal CDF of ν.
fn death_error_cdf(scenario: Scenario, v: f64) -> f64 {
    match scenario {
        Scenario::StudentT => t3_cdf((v - DEATH_ERR_MEAN) / t_scale()),
        _ => std_normal_cdf(v - DEATH_ERR_MEAN),
    }
}

/// One subject's covariates and potential outcomes for both arms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub x1: f64,
    pub x2: f64,
    pub outcomes: PotentialRecord,
}

pub fn sample_covariates<R: Rng + ?Sized>(rng: &mut R) -> (f64, f64) {
    let x1 = sample_truncated_normal(X1_MEAN, 1.0, X1_LO, X1_HI, rng).expect("interval has mass");
    let x2 = if rng.gen::<f64>() < X2_PROB { 1.0 } else { 0.0 };
    (x1, x2)
}

/// Potential (Y_P, Y_D) for both arms; death scores joined by the Gaussian
/// copula with correlation `rho`. Censoring is not drawn.
pub fn sample_potential<R: Rng + ?Sized>(scenario: Scenario, rho: f64, x1: f64, x2: f64, rng: &mut R) -> ([f64; 2], [f64; 2]) {
    let e0: f64 = rng.sample(StandardNormal);
    let e1: f64 = rng.sample(StandardNormal);
    let eta = [e0, rho * e0 + (1.0 - rho * rho).max(0.0).sqrt() * e1];
    let mut yp = [0.0; 2];
    let mut yd = [0.0; 2];
    for z in 0..2 {
        let nu = death_error(scenario, eta[z]);
        let eps = progression_error(scenario, nu, rng);
        let m = linear_predictors(scenario, z as f64, x1, x2);
        yp[z] = m[0] + eps;
        yd[z] = m[1] + nu;
    }
    (yp, yd)
}

pub fn sample_subject<R: Rng + ?Sized>(spec: &ScenarioSpec, rng: &mut R) -> Subject {
    let (x1, x2) = sample_covariates(rng);
    let (yp, yd) = sample_potential(spec.scenario, spec.rho_true, x1, x2, rng);
    let c = rng.gen_range(8.0..10.0);
    Subject { x1, x2, outcomes: PotentialRecord { yp, yd, c: [c, c] } }
}

/// A generated dataset (standardized covariates) with its latent subjects.
#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub dataset: Dataset,
    pub subjects: Vec<Subject>,
}

pub fn generate_scenario(spec: &ScenarioSpec, rng: &mut SimRng) -> Result<SimulatedData> {
    spec.validate()?;
    let mut subjects = Vec::with_capacity(spec.n);
    let mut records = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let z = if rng.gen::<f64>() < 0.5 { Arm::Treated } else { Arm::Control };
        let s = sample_subject(spec, rng);
        records.push(coarsen(&s.outcomes, z, vec![s.x1, s.x2]));
        subjects.push(s);
    }
    let dataset = Dataset::new(records, vec!["x1".into(), "x2".into()])?.standardize()?;
    Ok(SimulatedData { dataset, subjects })
}

/// Population covariate law: Gauss–Legendre nodes over the truncated normal
/// for x₁, crossed with x₂ ∈ {0, 1}. Returns (x₁, x₂, weight).
fn covariate_quadrature(nodes: usize) -> Vec<(f64, f64, f64)> {
    let gl = GaussLegendre::new(nodes);
    let z = std_normal_cdf(X1_HI - X1_MEAN) - std_normal_cdf(X1_LO - X1_MEAN);
    let mut out = Vec::with_capacity(2 * nodes);
    for (x1, w) in gl.mapped(X1_LO, X1_HI) {
        let dens = crate::bvn::norm_pdf(x1 - X1_MEAN) / z;
        out.push((x1, 0.0, w * dens * (1.0 - X2_PROB)));
        out.push((x1, 1.0, w * dens * X2_PROB));
    }
    out
}

/// True Pr[Y_D^z > t] at log-time `t`, averaged over the population covariates.
pub fn true_death_survival(scenario: Scenario, arm: Arm, t: f64) -> f64 {
    covariate_quadrature(96)
        .iter()
        .map(|&(x1, x2, w)| {
            let m = linear_predictors(scenario, arm.index() as f64, x1, x2)[1];
            w * (1.0 - death_error_cdf(scenario, t - m))
        })
        .sum()
}

/// Monte Carlo truth for τ on a log grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauTruth {
    pub scenario: Scenario,
    pub rho: f64,
    pub draws: u64,
    pub seed: u64,
    pub log_grid: Vec<f64>,
    /// `None` where the stratum or the control progression count is empty.
    pub tau: Vec<Option<f64>>,
    pub se: Vec<Option<f64>>,
    /// Fraction of draws in the always-survivor stratum at each point.
    pub stratum_mass: Vec<f64>,
    /// Progression probability within the stratum, treated and control.
    pub p_treated: Vec<f64>,
    pub p_control: Vec<f64>,
}

/// Thresholds deciding where the truth (and so the RMSE) is defined.
pub const MIN_STRATUM_MASS: f64 = 0.01;
pub const MIN_CONTROL_PROGRESSION: f64 = 0.01;

impl TauTruth {
    /// Grid points where the stratum and the control progression probability
    /// are both large enough for τ to be estimable.
    pub fn usable(&self) -> Vec<bool> {
        (0..self.tau.len())
            .map(|k| {
                self.stratum_mass[k] >= MIN_STRATUM_MASS
                    && self.p_control[k] >= MIN_CONTROL_PROGRESSION
                    && self.tau[k].is_some()
            })
            .collect()
    }
}

pub const DEFAULT_TRUTH_DRAWS: u64 = 10_000_000;

/// τ(u) = Pr[Y_P¹ < u | Y_D⁰ ≥ u, Y_D¹ ≥ u] / Pr[Y_P⁰ < u | same] by direct
/// simulation of potential outcomes through the copula.
pub fn tau_truth_mc(scenario: Scenario, rho: f64, draws: u64, seed: u64, log_grid: &[f64]) -> TauTruth {
    let chunks = 200u64;
    let per = draws / chunks;
    let g = log_grid.len();
    // Per grid point: stratum, treated prog, control prog, both.
    let counts = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = rng_for(seed, &[0x7a, c]);
            let mut acc = vec![[0u64; 4]; g];
            for _ in 0..per {
                let (x1, x2) = sample_covariates(&mut rng);
                let (yp, yd) = sample_potential(scenario, rho, x1, x2, &mut rng);
                let floor = yd[0].min(yd[1]);
                for (k, &a) in log_grid.iter().enumerate() {
                    if floor < a {
                        break;
                    }
                    let e = &mut acc[k];
                    e[0] += 1;
                    let p1 = yp[1] < a;
                    let p0 = yp[0] < a;
                    e[1] += p1 as u64;
                    e[2] += p0 as u64;
                    e[3] += (p1 && p0) as u64;
                }
            }
            acc
        })
        .reduce(
            || vec![[0u64; 4]; g],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(&b) {
                    for i in 0..4 {
                        x[i] += y[i];
                    }
                }
                a
            },
        );
    let total = (per * chunks) as f64;
    let mut out = TauTruth {
        scenario,
        rho,
        draws: per * chunks,
        seed,
        log_grid: log_grid.to_vec(),
        tau: vec![],
        se: vec![],
        stratum_mass: vec![],
        p_treated: vec![],
        p_control: vec![],
    };
    for c in &counts {
        let m = c[0] as f64;
        out.stratum_mass.push(m / total);
        if c[0] == 0 || c[2] == 0 {
            out.tau.push(None);
            out.se.push(None);
            out.p_treated.push(0.0);
            out.p_control.push(0.0);
            continue;
        }
        let (p1, p0, p11) = (c[1] as f64 / m, c[2] as f64 / m, c[3] as f64 / m);
        let tau = p1 / p0;
        // Delta method on log(p1/p0) with a shared multinomial denominator.
        let se = if c[1] == 0 {
            None
        } else {
            let var_log = (1.0 - p1) / (m * p1) + (1.0 - p0) / (m * p0) - 2.0 * (p11 - p1 * p0) / (m * p1 * p0);
            Some(tau * var_log.max(0.0).sqrt())
        };
        out.tau.push(Some(tau));
        out.se.push(se);
        out.p_treated.push(p1);
        out.p_control.push(p0);
    }
    out
}

/// Cached [`tau_truth_mc`] keyed by a hash of its inputs; recomputed when absent.
pub fn tau_truth_cached(
    cache_dir: Option<&Path>,
    scenario: Scenario,
    rho: f64,
    draws: u64,
    seed: u64,
    log_grid: &[f64],
) -> Result<TauTruth> {
    let Some(dir) = cache_dir else {
        return Ok(tau_truth_mc(scenario, rho, draws, seed, log_grid));
    };
    let path = truth_cache_path(dir, scenario, rho, draws, seed, log_grid);
    if let Ok(text) = std::fs::read_to_string(&path) {
        if let Ok(t) = serde_json::from_str::<TauTruth>(&text) {
            return Ok(t);
        }
    }
    let t = tau_truth_mc(scenario, rho, draws, seed, log_grid);
    std::fs::create_dir_all(dir)?;
    std::fs::write(&path, serde_json::to_string(&t)?)?;
    Ok(t)
}

pub fn truth_cache_path(dir: &Path, scenario: Scenario, rho: f64, draws: u64, seed: u64, log_grid: &[f64]) -> PathBuf {
    let key = serde_json::json!({
        "scenario": scenario.id(),
        "rho": rho,
        "draws": draws,
        "seed": seed,
        "grid": log_grid,
    });
    let digest = Sha256::digest(key.to_string().as_bytes());
    dir.join(format!("tau-truth-s{}-{}.json", scenario.id(), &hex::encode(digest)[..16]))
}

/// Root mean squared difference over the points where `mask` holds (all when `None`).
pub fn rmse(fitted: &[f64], truth: &[f64], mask: Option<&[bool]>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for k in 0..fitted.len().min(truth.len()) {
        if mask.map_or(true, |m| m[k]) && fitted[k].is_finite() && truth[k].is_finite() {
            sum += (fitted[k] - truth[k]).powi(2);
            n += 1;
        }
    }
    if n == 0 {
        f64::NAN
    } else {
        (sum / n as f64).sqrt()
    }
}

/// RMSE of a fitted survival curve against the analytic truth on its log grid.
pub fn survival_rmse(fitted: &[f64], scenario: Scenario, arm: Arm, log_grid: &[f64]) -> f64 {
    let truth: Vec<f64> = log_grid.iter().map(|&t| true_death_survival(scenario, arm, t)).collect();
    rmse(fitted, &truth, None)
}

/// RMSE of a fitted τ curve on the points where the truth is usable.
pub fn tau_rmse(fitted: &[f64], truth: &TauTruth) -> f64 {
    let mask = truth.usable();
    let values: Vec<f64> = truth.tau.iter().map(|t| t.unwrap_or(f64::NAN)).collect();
    rmse(fitted, &values, Some(&mask))
}
