//! Posterior functionals of fitted chains: marginal death survival, the
//! copula-identified progression risk ratio τ(u) among always-survivors, and
//! pointwise summaries with credible bands.

use std::f64::consts::FRAC_1_SQRT_2;
use std::path::Path;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::bvn::{conditional_survival_scores, std_normal_quantile_clamped};
use crate::data::{Arm, Dataset};
use crate::error::{Error, Result};
use crate::gibbs::PosteriorChain;
use crate::kernel::KernelCache;
use crate::model::{Draw, RowMixture};
use crate::quadrature::GaussLegendre;

/// 1/√(2π).
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Denominators below this are flagged unstable and left out of summaries.
pub const UNSTABLE_DENOMINATOR: f64 = 1e-12;

/// Pointwise posterior summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    /// Draws contributing at each point.
    pub n: Vec<usize>,
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    } else {
        sorted[i]
    }
}

/// Mean and 2.5%/97.5% quantiles over draws; non-finite entries are skipped.
/// `draws[k][g]` is draw k at grid point g.
pub fn summarize(draws: &[Vec<f64>]) -> Result<Summary> {
    summarize_with(draws, 0.025, 0.975)
}

pub fn summarize_with(draws: &[Vec<f64>], lo_q: f64, hi_q: f64) -> Result<Summary> {
    if draws.len() < 2 {
        return Err(Error::Domain(format!("summaries need at least 2 draws, got {}", draws.len())));
    }
    let g = draws[0].len();
    let mut out = Summary { mean: vec![], lo: vec![], hi: vec![], n: vec![] };
    for k in 0..g {
        let mut v: Vec<f64> = draws.iter().map(|d| d[k]).filter(|x| x.is_finite()).collect();
        v.sort_by(f64::total_cmp);
        let mean = if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
        let lo = quantile_sorted(&v, lo_q).min(mean);
        let hi = quantile_sorted(&v, hi_q).max(mean);
        out.mean.push(mean);
        out.lo.push(lo);
        out.hi.push(hi);
        out.n.push(v.len());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalCurve {
    pub arm: Arm,
    /// Days.
    pub t_grid: Vec<f64>,
    pub point: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimandCurve {
    /// Days.
    pub u_grid: Vec<f64>,
    pub point: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub rho: f64,
    /// Draws excluded at each point for a vanishing denominator.
    pub unstable: Vec<usize>,
}

fn write_curve_csv(path: &Path, header: [&str; 4], grid: &[f64], cols: [&[f64]; 3]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for k in 0..grid.len() {
        w.write_record([
            format!("{:?}", grid[k]),
            format!("{:?}", cols[0][k]),
            format!("{:?}", cols[1][k]),
            format!("{:?}", cols[2][k]),
        ])?;
    }
    w.flush()?;
    Ok(())
}

impl SurvivalCurve {
    pub fn write_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        write_curve_csv(path.as_ref(), ["t", "mean", "lo", "hi"], &self.t_grid, [&self.point, &self.lo, &self.hi])
    }

    pub fn write_json<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

impl EstimandCurve {
    pub fn write_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        write_curve_csv(path.as_ref(), ["u", "mean", "lo", "hi"], &self.u_grid, [&self.point, &self.lo, &self.hi])
    }

    pub fn write_json<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

fn check_rows(chain: &PosteriorChain, ds: &Dataset) -> Result<()> {
    if chain.is_empty() {
        return Err(Error::Domain("chain has no draws".into()));
    }
    if chain.n_rows() != ds.len() {
        return Err(Error::Domain(format!(
            "chain was fit on {} rows but the dataset has {}",
            chain.n_rows(),
            ds.len()
        )));
    }
    Ok(())
}

/// Per-draw covariate-averaged death survival at log times.
pub fn survival_draws(chain: &PosteriorChain, rows: &[usize], log_grid: &[f64]) -> Vec<Vec<f64>> {
    chain
        .draws
        .par_iter()
        .map(|d| {
            let mut s = vec![0.0; log_grid.len()];
            for &i in rows {
                let m = d.row_mixture(i);
                for (acc, &t) in s.iter_mut().zip(log_grid) {
                    *acc += m.death_sf(t);
                }
            }
            for v in s.iter_mut() {
                *v /= rows.len() as f64;
            }
            s
        })
        .collect()
}

/// Marginal death survival of the chain's arm, averaged over every subject's
/// covariates; `t_grid` in days.
pub fn marginal_survival(chain: &PosteriorChain, ds: &Dataset, t_grid: &[f64]) -> Result<SurvivalCurve> {
    check_rows(chain, ds)?;
    if t_grid.iter().any(|&t| !(t > 0.0)) {
        return Err(Error::Domain("survival grid must be positive days".into()));
    }
    let log_grid: Vec<f64> = t_grid.iter().map(|t| t.ln()).collect();
    let rows: Vec<usize> = (0..ds.len()).collect();
    let draws = survival_draws(chain, &rows, &log_grid);
    let s = summarize_draws_allow_one(&draws)?;
    Ok(SurvivalCurve { arm: chain.arm, t_grid: t_grid.to_vec(), point: s.mean, lo: s.lo, hi: s.hi })
}

fn summarize_draws_allow_one(draws: &[Vec<f64>]) -> Result<Summary> {
    if draws.len() == 1 {
        let d = draws[0].clone();
        return Ok(Summary { mean: d.clone(), lo: d.clone(), hi: d, n: vec![1; draws[0].len()] });
    }
    summarize(draws)
}

/// Numerical settings for τ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauSettings {
    /// Gauss–Legendre nodes on [log u, max component mean + `upper_sds` σ].
    pub nodes: usize,
    pub upper_sds: f64,
    /// Components with weight at or below this are dropped per draw.
    pub min_weight: f64,
    /// Average over at most this many evenly spaced rows instead of all of them.
    #[serde(default)]
    pub max_rows: Option<usize>,
    /// Average over one arm's rows only (diagnostics); pooled when `None`.
    #[serde(default)]
    pub marginal_arm: Option<Arm>,
}

impl Default for TauSettings {
    fn default() -> Self {
        Self { nodes: 256, upper_sds: 8.0, min_weight: 1e-10, max_rows: None, marginal_arm: None }
    }
}

/// Normal score Φ⁻¹(F) from a CDF value and its complement, keeping precision
/// in whichever tail is small.
fn normal_score(cdf: f64, sf: f64) -> f64 {
    if cdf <= 0.5 {
        std_normal_quantile_clamped(cdf)
    } else {
        -std_normal_quantile_clamped(sf)
    }
}

/// Φ(z) and 1 − Φ(z) from a single erfc evaluation.
#[inline]
fn phi_pair(z: f64) -> (f64, f64) {
    let tail = 0.5 * erfc(z.abs() * FRAC_1_SQRT_2);
    if z > 0.0 {
        (1.0 - tail, tail)
    } else {
        (tail, 1.0 - tail)
    }
}

/// One row's pruned mixture in flat form, reused across grid points and ρ values.
struct RowPrep {
    w: Vec<f64>,
    m_prog: Vec<f64>,
    m_death: Vec<f64>,
    inv_sd2: f64,
    slope: f64,
    inv_sd_cond: f64,
    lower: f64,
    upper: f64,
}

impl RowPrep {
    fn new(d: &Draw, i: usize, s: &TauSettings) -> Self {
        let mix = d.row_mixture_pruned(i, s.min_weight);
        let sd2 = mix.sd_death();
        let sig = mix.sigma;
        let m_death: Vec<f64> = mix.means.iter().map(|m| m[1]).collect();
        let mmax = m_death.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mmin = m_death.iter().copied().fold(f64::INFINITY, f64::min);
        Self {
            w: mix.weights.clone(),
            m_prog: mix.means.iter().map(|m| m[0]).collect(),
            m_death,
            inv_sd2: 1.0 / sd2,
            slope: sig.s12 / sig.s22,
            inv_sd_cond: (sig.s22 / sig.det()).sqrt(),
            lower: mmin - s.upper_sds * sd2,
            upper: mmax + s.upper_sds * sd2,
        }
    }

    /// (G(t), 1 − G(t)).
    fn death_cdf_sf(&self, t: f64) -> (f64, f64) {
        let mut c = 0.0;
        let mut s = 0.0;
        for (w, m) in self.w.iter().zip(&self.m_death) {
            let (pc, ps) = phi_pair((t - m) * self.inv_sd2);
            c += w * pc;
            s += w * ps;
        }
        (c.clamp(0.0, 1.0), s.clamp(0.0, 1.0))
    }
}

/// ∫_{t ≥ a} V_num(a | t) · Pr[Y_D^{other} ≥ a | Y_D^{num} = t] · g_num(t) dt for
/// every ρ in `rhos`, at one covariate row. `q_other` is Φ⁻¹(G_other(a)).
fn stratum_progression(num: &RowPrep, a: f64, q_other: f64, rhos: &[f64], gl: &GaussLegendre, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    let lo = a.max(num.lower);
    if lo >= num.upper {
        return;
    }
    let dens_scale = num.inv_sd2 * FRAC_1_SQRT_2PI;
    for (t, w) in gl.mapped(lo, num.upper) {
        let mut sub = 0.0;
        let mut cdf = 0.0;
        let mut sf = 0.0;
        for h in 0..num.w.len() {
            let wh = num.w[h];
            let d = t - num.m_death[h];
            let z = d * num.inv_sd2;
            let mc = num.m_prog[h] + num.slope * d;
            let v = 0.5 * erfc((mc - a) * num.inv_sd_cond * FRAC_1_SQRT_2);
            sub += wh * (-0.5 * z * z).exp() * v;
            let (pc, ps) = phi_pair(z);
            cdf += wh * pc;
            sf += wh * ps;
        }
        if sub <= 0.0 {
            continue;
        }
        let q_t = normal_score(cdf.clamp(0.0, 1.0), sf.clamp(0.0, 1.0));
        let f = w * sub * dens_scale;
        for (o, &rho) in out.iter_mut().zip(rhos) {
            *o += f * conditional_survival_scores(q_other, q_t, rho);
        }
    }
}

/// All of `0..n`, or `m` indices spread evenly across it.
pub fn spaced_rows(n: usize, m: Option<usize>) -> Vec<usize> {
    match m {
        Some(m) if m > 0 && m < n => (0..m).map(|k| k * n / m).collect(),
        _ => (0..n).collect(),
    }
}

/// Rows entering the covariate average under `settings`.
pub fn tau_rows(ds: &Dataset, settings: &TauSettings) -> Vec<usize> {
    let base: Vec<usize> = match settings.marginal_arm {
        Some(arm) => ds.arm_indices(arm),
        None => (0..ds.len()).collect(),
    };
    spaced_rows(base.len(), settings.max_rows).into_iter().map(|k| base[k]).collect()
}

/// Per-draw numerator and denominator of τ at each log grid point and ρ.
/// Result layout: `[draw][rho][grid] -> (num, den)`.
pub fn tau_components(
    chain0: &PosteriorChain,
    chain1: &PosteriorChain,
    rows: &[usize],
    log_grid: &[f64],
    rhos: &[f64],
    settings: &TauSettings,
) -> Result<Vec<Vec<Vec<(f64, f64)>>>> {
    if chain0.len() != chain1.len() {
        return Err(Error::Domain(format!(
            "arms have different draw counts ({} vs {})",
            chain0.len(),
            chain1.len()
        )));
    }
    if chain0.n_rows() != chain1.n_rows() {
        return Err(Error::Domain("arms were fit on different datasets".into()));
    }
    for &r in rhos {
        if !(r.abs() <= 1.0) {
            return Err(Error::Domain(format!("copula correlation must lie in [-1, 1], got {r}")));
        }
    }
    let gl = GaussLegendre::new(settings.nodes);
    let nr = rhos.len();
    let g = log_grid.len();
    let out = chain0
        .draws
        .par_iter()
        .zip(chain1.draws.par_iter())
        .map(|(d0, d1)| {
            let mut num = vec![vec![0.0; g]; nr];
            let mut den = vec![vec![0.0; g]; nr];
            let mut buf = vec![0.0; nr];
            for &i in rows {
                let p0 = RowPrep::new(d0, i, settings);
                let p1 = RowPrep::new(d1, i, settings);
                for (k, &a) in log_grid.iter().enumerate() {
                    let (c0, s0) = p0.death_cdf_sf(a);
                    let (c1, s1) = p1.death_cdf_sf(a);
                    let q0 = normal_score(c0, s0);
                    let q1 = normal_score(c1, s1);
                    stratum_progression(&p1, a, q0, rhos, &gl, &mut buf);
                    for r in 0..nr {
                        num[r][k] += buf[r];
                    }
                    stratum_progression(&p0, a, q1, rhos, &gl, &mut buf);
                    for r in 0..nr {
                        den[r][k] += buf[r];
                    }
                }
            }
            let n = rows.len() as f64;
            (0..nr)
                .map(|r| (0..g).map(|k| (num[r][k] / n, den[r][k] / n)).collect())
                .collect::<Vec<Vec<(f64, f64)>>>()
        })
        .collect();
    Ok(out)
}

/// Monte Carlo version of [`tau_components`] for cross-checking the quadrature:
/// the t-integral is replaced by an average over `samples` death times drawn
/// from the numerator arm's mixture at each row.
pub fn tau_components_mc(
    chain0: &PosteriorChain,
    chain1: &PosteriorChain,
    rows: &[usize],
    log_grid: &[f64],
    rhos: &[f64],
    samples: usize,
    seed: u64,
) -> Result<Vec<Vec<Vec<(f64, f64)>>>> {
    if chain0.len() != chain1.len() || chain0.n_rows() != chain1.n_rows() {
        return Err(Error::Domain("arms must have matching draw and row counts".into()));
    }
    if samples == 0 {
        return Err(Error::Domain("Monte Carlo check needs at least one sample".into()));
    }
    let side = |num: &RowMixture, other: &RowMixture, rng: &mut crate::rng::SimRng, out: &mut [Vec<f64>]| {
        let ts: Vec<f64> = (0..samples)
            .map(|_| {
                let h = crate::gibbs::sample_categorical(&num.weights, rng);
                num.means[h][1] + num.sd_death() * rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        for (k, &a) in log_grid.iter().enumerate() {
            let q_other = normal_score(other.death_cdf(a), other.death_sf(a));
            for &t in ts.iter().filter(|&&t| t >= a) {
                let v = num.progression_conditional_cdf(a, t).unwrap_or(0.0);
                let q_t = normal_score(num.death_cdf(t), num.death_sf(t));
                for (r, &rho) in rhos.iter().enumerate() {
                    out[r][k] += v * conditional_survival_scores(q_other, q_t, rho) / samples as f64;
                }
            }
        }
    };
    let out = chain0
        .draws
        .par_iter()
        .zip(chain1.draws.par_iter())
        .enumerate()
        .map(|(d, (d0, d1))| {
            let mut rng = crate::rng::rng_for(seed, &[d as u64]);
            let mut num = vec![vec![0.0; log_grid.len()]; rhos.len()];
            let mut den = num.clone();
            for &i in rows {
                let m0 = d0.row_mixture(i);
                let m1 = d1.row_mixture(i);
                side(&m1, &m0, &mut rng, &mut num);
                side(&m0, &m1, &mut rng, &mut den);
            }
            let n = rows.len() as f64;
            (0..rhos.len())
                .map(|r| (0..log_grid.len()).map(|k| (num[r][k] / n, den[r][k] / n)).collect())
                .collect::<Vec<Vec<(f64, f64)>>>()
        })
        .collect();
    Ok(out)
}

/// τ curves for each ρ, pairing draw k of the control chain with draw k of the
/// treated chain; `u_grid` in days.
pub fn tau_curves(
    chain0: &PosteriorChain,
    chain1: &PosteriorChain,
    ds: &Dataset,
    u_grid: &[f64],
    rhos: &[f64],
    settings: &TauSettings,
) -> Result<Vec<EstimandCurve>> {
    check_rows(chain0, ds)?;
    check_rows(chain1, ds)?;
    if chain0.arm != Arm::Control || chain1.arm != Arm::Treated {
        log::warn!("tau_curves called with arms ({}, {}); the first is used as control", chain0.arm, chain1.arm);
    }
    if u_grid.iter().any(|&u| !(u > 0.0)) || u_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Domain("u grid must be positive and strictly increasing".into()));
    }
    let log_grid: Vec<f64> = u_grid.iter().map(|u| u.ln()).collect();
    let rows = tau_rows(ds, settings);
    let comps = tau_components(chain0, chain1, &rows, &log_grid, rhos, settings)?;
    rhos.iter()
        .enumerate()
        .map(|(r, &rho)| {
            let (ratios, unstable) = tau_ratios(&comps, r);
            let s = summarize_draws_allow_one(&ratios)?;
            let n_unstable: usize = unstable.iter().sum();
            if n_unstable > 0 {
                log::info!("rho = {rho}: {n_unstable} draw/grid evaluations had a vanishing denominator");
            }
            Ok(EstimandCurve { u_grid: u_grid.to_vec(), point: s.mean, lo: s.lo, hi: s.hi, rho, unstable })
        })
        .collect()
}

pub fn tau_curve(
    chain0: &PosteriorChain,
    chain1: &PosteriorChain,
    ds: &Dataset,
    u_grid: &[f64],
    rho: f64,
    settings: &TauSettings,
) -> Result<EstimandCurve> {
    Ok(tau_curves(chain0, chain1, ds, u_grid, &[rho], settings)?.remove(0))
}

/// Per-draw ratios for ρ index `r` (NaN where unstable) and unstable counts per point.
pub fn tau_ratios(comps: &[Vec<Vec<(f64, f64)>>], r: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let g = comps.first().map(|c| c[r].len()).unwrap_or(0);
    let mut unstable = vec![0; g];
    let ratios = comps
        .iter()
        .map(|c| {
            c[r].iter()
                .enumerate()
                .map(|(k, &(n, d))| {
                    if d < UNSTABLE_DENOMINATOR {
                        unstable[k] += 1;
                        f64::NAN
                    } else {
                        n / d
                    }
                })
                .collect()
        })
        .collect();
    (ratios, unstable)
}

/// Survival at a new covariate profile (original scale): each component's GP
/// value at the profile is kriged from its values at the fitted rows.
pub fn predict_profile(
    chain: &PosteriorChain,
    ds: &Dataset,
    kernel: &KernelCache,
    x_new: &[f64],
    t_grid: &[f64],
) -> Result<SurvivalCurve> {
    check_rows(chain, ds)?;
    if kernel.n() != ds.len() {
        return Err(Error::Domain("kernel was not built on this dataset".into()));
    }
    let x = ds.standardize_profile(x_new)?;
    let log_grid: Vec<f64> = t_grid.iter().map(|t| t.ln()).collect();
    let cross: DVector<f64> = kernel.cross(&x);
    let draws: Vec<Vec<f64>> = chain
        .draws
        .par_iter()
        .map(|d| -> Result<Vec<f64>> {
            let mut means = Vec::with_capacity(d.k);
            for h in 0..d.k {
                let mut mu = [0.0; 2];
                for (j, m) in mu.iter_mut().enumerate() {
                    let beta = d.beta(h, j);
                    let wts = kernel.residual_weights(d.theta(h, j), beta)?;
                    let lin = beta[0] + x.iter().zip(&beta[1..]).map(|(a, b)| a * b).sum::<f64>();
                    *m = lin + cross.dot(&wts);
                }
                means.push(mu);
            }
            let mix = RowMixture::new(d.weights.clone(), means, d.sigma);
            Ok(log_grid.iter().map(|&t| mix.death_sf(t)).collect())
        })
        .collect::<Result<_>>()?;
    let s = summarize_draws_allow_one(&draws)?;
    Ok(SurvivalCurve { arm: chain.arm, t_grid: t_grid.to_vec(), point: s.mean, lo: s.lo, hi: s.hi })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bvn::{bvn_cdf, std_normal_cdf, Bvn};
    use crate::gibbs::{ChainConfig, ChainStats, ModelKind};
    use crate::model::{Cov2, Hyperparameters};
    use crate::rng::rng_for;
    use nalgebra::DMatrix;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn hp() -> Hyperparameters {
        Hyperparameters {
            beta0: [vec![0.0, 0.0], vec![0.0, 0.0]],
            lambda0_cov: [DMatrix::identity(2, 2), DMatrix::identity(2, 2)],
            lambda0: 4.0,
            psi: Cov2::new(1.0, 0.0, 1.0).unwrap(),
            lambda1: 1.0,
            lambda2: 1.0,
            k_trunc: 3,
            epsilon: 0.1,
        }
    }

    /// Random draws with `k` components over `n` rows.
    fn random_chain(arm: Arm, n: usize, k: usize, draws: usize, seed: u64, shift: f64) -> PosteriorChain {
        let mut rng = rng_for(seed, &[]);
        let draws = (0..draws)
            .map(|_| {
                let mut w: Vec<f64> = (0..k).map(|_| rng.gen_range(0.1..1.0)).collect();
                let s: f64 = w.iter().sum();
                w.iter_mut().for_each(|v| *v /= s);
                let theta: Vec<f64> = (0..k * 2 * n)
                    .map(|idx| {
                        let j = (idx / n) % 2;
                        let base = if j == 0 { 1.5 } else { 2.5 + shift };
                        base + 0.7 * rng.sample::<f64, _>(StandardNormal)
                    })
                    .collect();
                let r = rng.gen_range(-0.6..0.8);
                Draw {
                    k,
                    n_rows: n,
                    n_coef: 2,
                    weights: w,
                    theta,
                    beta: vec![0.0; k * 2 * 2],
                    sigma: Cov2::new(0.6, r * (0.6f64 * 0.9).sqrt(), 0.9).unwrap(),
                    alpha: 1.0,
                    occupied: k,
                }
            })
            .collect();
        PosteriorChain {
            arm,
            model: ModelKind::Bnp,
            config: ChainConfig::default(),
            hyperparameters: hp(),
            draws,
            stats: ChainStats::default(),
        }
    }

    fn dataset(n: usize) -> Dataset {
        let recs = (0..n)
            .map(|i| crate::data::ObservedRecord {
                t1: 1.0,
                t2: 2.0,
                delta: true,
                xi: true,
                z: Arm::from_index(i % 2).unwrap(),
                x: vec![i as f64 * 0.1],
            })
            .collect();
        Dataset::new(recs, vec!["x".into()]).unwrap()
    }

    fn grid() -> Vec<f64> {
        [0.8, 1.5, 2.2, 3.0, 4.0].iter().map(|a: &f64| a.exp()).collect()
    }

    #[test]
    fn summarize_cases() {
        let s = summarize(&[vec![2.0, 1.0], vec![2.0, 1.0], vec![2.0, 1.0]]).unwrap();
        assert_eq!(s.lo, s.hi);
        assert_eq!(s.mean, vec![2.0, 1.0]);
        let s = summarize(&[vec![0.0], vec![1.0]]).unwrap();
        assert_eq!(s.mean[0], 0.5);
        let mut rng = rng_for(1, &[]);
        let d: Vec<Vec<f64>> = (0..10_000).map(|_| vec![rng.sample(StandardNormal)]).collect();
        let s = summarize(&d).unwrap();
        assert!((s.lo[0] + 1.96).abs() < 0.05 && (s.hi[0] - 1.96).abs() < 0.05);
        assert!(summarize(&[vec![1.0]]).is_err());
    }

    #[test]
    fn survival_closed_form_and_monotone() {
        let ds = dataset(1);
        let mut ch = random_chain(Arm::Control, 1, 1, 1, 2, 0.0);
        ch.draws[0].theta = vec![0.3, 1.7];
        let grid = [1e-300, 1.0, 5.0, 20.0];
        let s = marginal_survival(&ch, &ds, &grid).unwrap();
        let sd = 0.9f64.sqrt();
        for (k, &t) in grid.iter().enumerate() {
            assert!((s.point[k] - (1.0 - std_normal_cdf((t.ln() - 1.7) / sd))).abs() < 1e-15);
        }
        assert!((s.point[0] - 1.0).abs() < 1e-15);
        let ds = dataset(6);
        let ch = random_chain(Arm::Control, 6, 3, 20, 3, 0.0);
        let rows: Vec<usize> = (0..6).collect();
        let lg: Vec<f64> = (0..40).map(|k| k as f64 * 0.2).collect();
        for d in survival_draws(&ch, &rows, &lg) {
            assert!(d.windows(2).all(|w| w[1] <= w[0]));
        }
        assert!(marginal_survival(&ch, &dataset(5), &grid).is_err());
        let _ = ds;
    }

    #[test]
    fn tau_identities() {
        let n = 4;
        let ds = dataset(n);
        let c0 = random_chain(Arm::Control, n, 3, 6, 4, 0.0);
        let mut c1 = random_chain(Arm::Treated, n, 3, 6, 5, 0.5);
        let s = TauSettings::default();
        // Identical arms.
        let mut same = c0.clone();
        same.arm = Arm::Treated;
        for rho in [0.0, 0.5, 0.9] {
            let t = tau_curve(&c0, &same, &ds, &grid(), rho, &s).unwrap();
            for v in &t.point {
                assert!((v - 1.0).abs() < 1e-6);
            }
        }
        // Swap inverts per draw.
        let rows: Vec<usize> = (0..n).collect();
        let lg: Vec<f64> = grid().iter().map(|u| u.ln()).collect();
        let a = tau_components(&c0, &c1, &rows, &lg, &[0.3], &s).unwrap();
        c1.arm = Arm::Control;
        let b = tau_components(&c1, &c0, &rows, &lg, &[0.3], &s).unwrap();
        for (da, db) in a.iter().zip(&b) {
            for (&(n1, d1), &(n2, d2)) in da[0].iter().zip(&db[0]) {
                assert!((0.0..=1.0).contains(&n1) && (0.0..=1.0).contains(&d1));
                assert!(((n1 / d1) * (n2 / d2) - 1.0).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn tau_rho_zero_matches_independent_integral() {
        // ρ = 0: numerator = mean_x (1 − G⁰(a)) Pr[Y_P¹ < a, Y_D¹ ≥ a], each factor in closed form.
        let n = 3;
        let c0 = random_chain(Arm::Control, n, 2, 3, 6, 0.0);
        let c1 = random_chain(Arm::Treated, n, 3, 3, 7, 0.4);
        let rows: Vec<usize> = (0..n).collect();
        let lg = [1.0, 2.0, 3.3];
        let comps = tau_components(&c0, &c1, &rows, &lg, &[0.0], &TauSettings::default()).unwrap();
        let joint = |d: &Draw, i: usize, a: f64| -> f64 {
            let m = d.row_mixture(i);
            (0..m.len())
                .map(|h| {
                    let b = Bvn::from_parts(m.means[h], m.sigma.s11, m.sigma.s12, m.sigma.s22).unwrap();
                    let p_lt = std_normal_cdf((a - b.mu[0]) / b.sd1());
                    let both = bvn_cdf((a - b.mu[0]) / b.sd1(), (a - b.mu[1]) / b.sd2(), b.corr());
                    m.weights[h] * (p_lt - both)
                })
                .sum()
        };
        for (k, (d0, d1)) in c0.draws.iter().zip(&c1.draws).enumerate() {
            for (g, &a) in lg.iter().enumerate() {
                let num: f64 = rows.iter().map(|&i| d0.row_mixture(i).death_sf(a) * joint(d1, i, a)).sum::<f64>() / n as f64;
                let den: f64 = rows.iter().map(|&i| d1.row_mixture(i).death_sf(a) * joint(d0, i, a)).sum::<f64>() / n as f64;
                assert!((comps[k][0][g].0 - num).abs() < 1e-6, "{} vs {num}", comps[k][0][g].0);
                assert!((comps[k][0][g].1 - den).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn monte_carlo_check_agrees_with_quadrature() {
        let n = 3;
        let c0 = random_chain(Arm::Control, n, 2, 2, 12, 0.0);
        let c1 = random_chain(Arm::Treated, n, 3, 2, 13, 0.3);
        let rows: Vec<usize> = (0..n).collect();
        let lg = [1.5, 2.5, 3.5];
        let q = tau_components(&c0, &c1, &rows, &lg, &[0.5], &TauSettings::default()).unwrap();
        let m = tau_components_mc(&c0, &c1, &rows, &lg, &[0.5], 200_000, 1).unwrap();
        for (a, b) in q.iter().zip(&m) {
            for (x, y) in a[0].iter().zip(&b[0]) {
                assert!((x.0 - y.0).abs() < 4e-3 && (x.1 - y.1).abs() < 4e-3, "{x:?} vs {y:?}");
            }
        }
    }

    #[test]
    fn tau_validation() {
        let ds = dataset(2);
        let c0 = random_chain(Arm::Control, 2, 2, 3, 8, 0.0);
        let c1 = random_chain(Arm::Treated, 2, 2, 4, 9, 0.0);
        assert!(tau_curve(&c0, &c1, &ds, &grid(), 0.5, &TauSettings::default()).is_err());
        let c1 = random_chain(Arm::Treated, 2, 2, 3, 9, 0.0);
        assert!(tau_curve(&c0, &c1, &ds, &grid(), 1.5, &TauSettings::default()).is_err());
        assert!(tau_curve(&c0, &c1, &ds, &[2.0, 1.0], 0.5, &TauSettings::default()).is_err());
    }

    #[test]
    fn spaced_row_subsets() {
        assert_eq!(spaced_rows(5, None), vec![0, 1, 2, 3, 4]);
        assert_eq!(spaced_rows(10, Some(3)), vec![0, 3, 6]);
        assert_eq!(spaced_rows(3, Some(7)), vec![0, 1, 2]);
    }

    #[test]
    fn unstable_points_are_flagged() {
        let comps = vec![vec![vec![(0.1, 0.2), (0.0, 0.0)]], vec![vec![(0.2, 0.4), (0.1, 0.5)]]];
        let (r, u) = tau_ratios(&comps, 0);
        assert_eq!(u, vec![0, 1]);
        assert!(r[0][1].is_nan());
        let s = summarize(&r).unwrap();
        assert_eq!(s.n, vec![2, 1]);
        assert!((s.mean[1] - 0.2).abs() < 1e-15);
    }
}
