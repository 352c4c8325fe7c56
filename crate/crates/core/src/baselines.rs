//! Comparators: the naive bivariate-normal regression, Kaplan–Meier and LPML.

use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bvn::std_normal_quantile_clamped;
use crate::config::KvConfig;
use crate::data::{Arm, Dataset};
use crate::error::{Error, Result};
use crate::gibbs::{run_chain, ChainConfig, ModelKind, PosteriorChain};
use crate::model::{complete_case_regression, Hyperparameters};

/// Default prior variance of the naive regression coefficients.
pub const NAIVE_PRIOR_VAR: f64 = 100.0;

/// Naive-model hyperparameters: β ~ N(0, τ²I), Σ ~ IW(4, Σ̂).
pub fn naive_hyperparameters(ds: &Dataset, arm: Arm, jitter: f64) -> Result<Hyperparameters> {
    let fit = complete_case_regression(ds, arm, jitter)?;
    let p = ds.dim() + 1;
    let lam = DMatrix::from_diagonal_element(p, p, NAIVE_PRIOR_VAR);
    let hp = Hyperparameters {
        beta0: [vec![0.0; p], vec![0.0; p]],
        lambda0_cov: [lam.clone(), lam],
        lambda0: 4.0,
        psi: fit.resid_cov,
        lambda1: 1.0,
        lambda2: 1.0,
        k_trunc: 1,
        epsilon: crate::kernel::DEFAULT_EPSILON,
    };
    hp.validate()?;
    Ok(hp)
}

/// Fit the naive model to one arm. `overrides` may set `naive_prior_var`,
/// `lambda0` and `psi`.
pub fn fit_naive(ds: &Dataset, arm: Arm, cfg: &ChainConfig, overrides: Option<&KvConfig>) -> Result<PosteriorChain> {
    let mut hp = naive_hyperparameters(ds, arm, cfg.tie_jitter)?;
    if let Some(o) = overrides {
        if let Some(v) = o.get::<f64>("naive_prior_var")? {
            if !(v > 0.0) {
                return Err(Error::Config("naive_prior_var must be positive".into()));
            }
            let p = hp.n_coef();
            let lam = DMatrix::from_diagonal_element(p, p, v);
            hp.lambda0_cov = [lam.clone(), lam];
        }
        if let Some(v) = o.get::<f64>("lambda0")? {
            hp.lambda0 = v;
        }
        if let Some(v) = o.get_list::<f64>("psi")? {
            if v.len() != 3 {
                return Err(Error::Config("psi takes three values: s11, s12, s22".into()));
            }
            hp.psi = crate::model::Cov2::new(v[0], v[1], v[2])?;
        }
        hp.validate()?;
    }
    run_chain(ds, arm, &hp, cfg, ModelKind::Naive)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmCurve {
    /// Distinct event times, ascending.
    pub times: Vec<f64>,
    /// Survival just after each event time.
    pub survival: Vec<f64>,
    pub at_risk: Vec<usize>,
    pub events: Vec<usize>,
    /// Greenwood variance of the survival estimate.
    pub variance: Vec<f64>,
    /// Pointwise 95% log–log interval.
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl KmCurve {
    /// Step-function value at `t` (right-continuous).
    pub fn survival_at(&self, t: f64) -> f64 {
        match self.times.partition_point(|&s| s <= t) {
            0 => 1.0,
            k => self.survival[k - 1],
        }
    }

    /// CSV step function, starting at (0, 1).
    pub fn write_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["t", "survival", "lo", "hi", "at_risk", "events"])?;
        w.write_record(["0", "1", "1", "1", "", ""])?;
        for k in 0..self.times.len() {
            w.write_record([
                format!("{:?}", self.times[k]),
                format!("{:?}", self.survival[k]),
                format!("{:?}", self.lo[k]),
                format!("{:?}", self.hi[k]),
                self.at_risk[k].to_string(),
                self.events[k].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Product-limit estimator. Censorings tied with an event time are counted at
/// risk for that event.
pub fn kaplan_meier(times: &[f64], events: &[bool]) -> Result<KmCurve> {
    if times.is_empty() {
        return Err(Error::Domain("Kaplan-Meier needs at least one observation".into()));
    }
    if times.len() != events.len() {
        return Err(Error::Domain("times and event indicators differ in length".into()));
    }
    if let Some(t) = times.iter().find(|t| !(**t > 0.0) || !t.is_finite()) {
        return Err(Error::Domain(format!("times must be positive and finite, got {t}")));
    }
    let mut idx: Vec<usize> = (0..times.len()).collect();
    idx.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let z = std_normal_quantile_clamped(0.975);
    let mut curve = KmCurve {
        times: vec![],
        survival: vec![],
        at_risk: vec![],
        events: vec![],
        variance: vec![],
        lo: vec![],
        hi: vec![],
    };
    let mut at_risk = times.len();
    let mut s = 1.0;
    let mut gw = 0.0;
    let mut k = 0;
    while k < idx.len() {
        let t = times[idx[k]];
        let mut d = 0;
        let mut m = 0;
        while k + m < idx.len() && times[idx[k + m]] == t {
            d += usize::from(events[idx[k + m]]);
            m += 1;
        }
        if d > 0 {
            let (n, df) = (at_risk as f64, d as f64);
            s *= 1.0 - df / n;
            if at_risk > d {
                gw += df / (n * (n - df));
            }
            let var = s * s * gw;
            let (lo, hi) = loglog_interval(s, gw, z);
            curve.times.push(t);
            curve.survival.push(s);
            curve.at_risk.push(at_risk);
            curve.events.push(d);
            curve.variance.push(var);
            curve.lo.push(lo);
            curve.hi.push(hi);
        }
        at_risk -= m;
        k += m;
    }
    Ok(curve)
}

/// exp(−exp(log(−log S) ± z·se)) with se² = Σ d/(n(n−d)) / log(S)².
fn loglog_interval(s: f64, gw: f64, z: f64) -> (f64, f64) {
    if s <= 0.0 {
        return (0.0, 0.0);
    }
    if s >= 1.0 {
        return (1.0, 1.0);
    }
    let ls = s.ln();
    let se = gw.sqrt() / ls.abs();
    let c = (-ls).ln();
    let lo = (-(c + z * se).exp()).exp();
    let hi = (-(c - z * se).exp()).exp();
    (lo, hi)
}

/// KM of observed death times for one arm, in days.
pub fn kaplan_meier_arm(ds: &Dataset, arm: Arm) -> Result<KmCurve> {
    let recs: Vec<_> = ds.records().iter().filter(|r| r.z == arm).collect();
    let t: Vec<f64> = recs.iter().map(|r| r.t2.exp()).collect();
    let e: Vec<bool> = recs.iter().map(|r| r.xi).collect();
    kaplan_meier(&t, &e)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LpmlScope {
    SurvivalOnly,
    Joint,
}

impl std::fmt::Display for LpmlScope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LpmlScope::SurvivalOnly => "survival-only",
            LpmlScope::Joint => "joint",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpmlResult {
    pub arm: Arm,
    pub scope: LpmlScope,
    pub lpml: f64,
    /// ln CPO per subject, in arm order.
    pub log_cpo: Vec<f64>,
    /// Dataset rows whose CPO is zero.
    pub zero_cpo: Vec<usize>,
}

/// ln of the harmonic mean of exp(log_l): −ln( mean exp(−log_l) ).
pub fn log_harmonic_mean(log_l: &[f64]) -> f64 {
    let m = log_l.iter().map(|v| -v).fold(f64::NEG_INFINITY, f64::max);
    if m == f64::INFINITY {
        return f64::NEG_INFINITY;
    }
    let s: f64 = log_l.iter().map(|v| (-v - m).exp()).sum();
    -(m + (s / log_l.len() as f64).ln())
}

/// LPML of `chain` over its arm's subjects. Likelihoods are densities of log
/// times, as used by the sampler.
pub fn lpml(chain: &PosteriorChain, ds: &Dataset, scope: LpmlScope) -> Result<LpmlResult> {
    if chain.is_empty() {
        return Err(Error::Domain("chain has no draws".into()));
    }
    if chain.n_rows() != ds.len() {
        return Err(Error::Domain("chain was fit on a different dataset".into()));
    }
    let jitter = chain.config.tie_jitter;
    let rows = ds.arm_indices(chain.arm);
    let log_cpo: Vec<f64> = rows
        .par_iter()
        .map(|&i| {
            let rec = &ds.records()[i];
            let (t1, t2) = rec.fit_times(jitter);
            let ll: Vec<f64> = chain
                .draws
                .iter()
                .map(|d| {
                    let m = d.row_mixture(i);
                    match scope {
                        LpmlScope::SurvivalOnly => m.death_likelihood(t2, rec.xi).ln(),
                        LpmlScope::Joint => m.observed_likelihood(t1, t2, rec.censoring_case()).ln(),
                    }
                })
                .collect();
            log_harmonic_mean(&ll)
        })
        .collect();
    let zero_cpo: Vec<usize> =
        rows.iter().zip(&log_cpo).filter(|(_, v)| **v == f64::NEG_INFINITY).map(|(i, _)| *i).collect();
    if !zero_cpo.is_empty() {
        log::warn!("arm {}: {} subject(s) with zero CPO", chain.arm, zero_cpo.len());
    }
    Ok(LpmlResult { arm: chain.arm, scope, lpml: log_cpo.iter().sum(), log_cpo, zero_cpo })
}
