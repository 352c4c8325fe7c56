//! Scalar and bivariate Gaussian primitives: densities, CDFs, half-plane and
//! quadrant masses, truncated sampling, and the Gaussian copula.
//!
//! Everything here is pure given an explicit generator.

use std::f64::consts::{FRAC_1_SQRT_2, PI, SQRT_2};
use std::sync::OnceLock;

use rand::Rng;
use rand_distr::StandardNormal;
use statrs::function::erf::{erfc, erfc_inv};

use crate::error::{Error, Result};
use crate::quadrature::GaussLegendre;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
const MIN_MASS: f64 = 1e-300;
const TAIL_SWITCH: f64 = 5.0;

/// Standard normal density.
pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x - LN_SQRT_2PI).exp()
}

pub fn norm_logpdf(x: f64) -> f64 {
    -0.5 * x * x - LN_SQRT_2PI
}

/// Standard normal CDF, Φ(x).
pub fn std_normal_cdf(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// Upper tail 1 - Φ(x), computed without cancellation.
pub fn std_normal_sf(x: f64) -> f64 {
    std_normal_cdf(-x)
}

/// ln(1 - Φ(x)), finite far into the upper tail.
pub fn log_std_normal_sf(x: f64) -> f64 {
    if x < 30.0 {
        std_normal_sf(x).ln()
    } else {
        let x2 = x * x;
        let series = 1.0 - 1.0 / x2 + 3.0 / (x2 * x2) - 15.0 / (x2 * x2 * x2);
        norm_logpdf(x) - x.ln() + series.ln()
    }
}

pub fn log_std_normal_cdf(x: f64) -> f64 {
    log_std_normal_sf(-x)
}

/// Φ⁻¹(p) for p in (0, 1).
pub fn std_normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("normal quantile needs p in (0,1), got {p}")));
    }
    Ok(quantile_unchecked(p))
}

fn quantile_unchecked(p: f64) -> f64 {
    if p == 0.5 {
        return 0.0;
    }
    let mut x = -SQRT_2 * erfc_inv(2.0 * p);
    // One Halley step against the accurate CDF.
    let (e, upper) = if x > 0.0 {
        (std_normal_sf(x) - (1.0 - p), true)
    } else {
        (std_normal_cdf(x) - p, false)
    };
    let d = norm_pdf(x);
    if d > 0.0 && e.is_finite() {
        let u = if upper { -e / d } else { e / d };
        x -= u / (1.0 + 0.5 * x * u);
    }
    x
}

/// Φ⁻¹ clamped to a finite range, for probabilities that may round to 0 or 1.
pub fn std_normal_quantile_clamped(p: f64) -> f64 {
    if p <= 0.0 {
        f64::NEG_INFINITY
    } else if p >= 1.0 {
        f64::INFINITY
    } else {
        quantile_unchecked(p)
    }
}

fn gl_rule(n: usize) -> &'static GaussLegendre {
    static R6: OnceLock<GaussLegendre> = OnceLock::new();
    static R12: OnceLock<GaussLegendre> = OnceLock::new();
    static R20: OnceLock<GaussLegendre> = OnceLock::new();
    match n {
        6 => R6.get_or_init(|| GaussLegendre::new(6)),
        12 => R12.get_or_init(|| GaussLegendre::new(12)),
        _ => R20.get_or_init(|| GaussLegendre::new(20)),
    }
}

/// Pr[X > h, Y > k] for a standard bivariate normal with correlation `r`.
///
/// Genz's reduction of the BVN integral to a single integral over the
/// correlation (Drezner–Wesolowsky form), evaluated with a 6/12/20 point
/// Gauss–Legendre rule depending on |r|, and the asymptotic expansion of the
/// integrand for |r| ≥ 0.925.
pub fn bvn_upper(h: f64, k: f64, r: f64) -> f64 {
    // Below -38 the normal CDF is exactly 1 in double precision.
    let h = if h < -38.0 { f64::NEG_INFINITY } else { h };
    let k = if k < -38.0 { f64::NEG_INFINITY } else { k };
    if h == f64::NEG_INFINITY && k == f64::NEG_INFINITY {
        return 1.0;
    }
    if h == f64::INFINITY || k == f64::INFINITY {
        return 0.0;
    }
    if h == f64::NEG_INFINITY {
        return std_normal_sf(k);
    }
    if k == f64::NEG_INFINITY {
        return std_normal_sf(h);
    }
    if r >= 1.0 {
        return std_normal_sf(h.max(k));
    }
    if r <= -1.0 {
        return (std_normal_sf(h) - std_normal_cdf(k)).max(0.0);
    }

    let rule = if r.abs() < 0.3 {
        gl_rule(6)
    } else if r.abs() < 0.75 {
        gl_rule(12)
    } else {
        gl_rule(20)
    };
    let half = rule.len() / 2;
    // Negative half of the symmetric rule; the loops below use both signs.
    let xs = &rule.nodes[..half];
    let ws = &rule.weights[..half];

    let mut k = k;
    let mut hk = h * k;
    let mut bvn = 0.0;
    if r.abs() < 0.925 {
        let hs = 0.5 * (h * h + k * k);
        let asr = r.asin();
        for (&x, &w) in xs.iter().zip(ws) {
            let sn = (asr * (1.0 - x) * 0.5).sin();
            bvn += w * ((sn * hk - hs) / (1.0 - sn * sn)).exp();
            let sn = (asr * (1.0 + x) * 0.5).sin();
            bvn += w * ((sn * hk - hs) / (1.0 - sn * sn)).exp();
        }
        return (bvn * asr / (4.0 * PI) + std_normal_sf(h) * std_normal_sf(k)).clamp(0.0, 1.0);
    }

    if r < 0.0 {
        k = -k;
        hk = -hk;
    }
    let as_ = (1.0 - r) * (1.0 + r);
    let mut a = as_.sqrt();
    let bs = (h - k) * (h - k);
    let c = (4.0 - hk) / 8.0;
    let d = (12.0 - hk) / 16.0;
    bvn = a
        * (-(bs / as_ + hk) * 0.5).exp()
        * (1.0 - c * (bs - as_) * (1.0 - d * bs / 5.0) / 3.0 + c * d * as_ * as_ / 5.0);
    if hk > -160.0 {
        let b = bs.sqrt();
        bvn -= (-hk * 0.5).exp()
            * (2.0 * PI).sqrt()
            * std_normal_cdf(-b / a)
            * b
            * (1.0 - c * bs * (1.0 - d * bs / 5.0) / 3.0);
    }
    a *= 0.5;
    for (&x, &w) in xs.iter().zip(ws) {
        for sign in [-1.0, 1.0] {
            let xs2 = (a * (sign * x + 1.0)).powi(2);
            let rs = (1.0 - xs2).sqrt();
            let t1 = (-bs / (2.0 * xs2) - hk / (1.0 + rs)).exp() / rs;
            let t2 = (-(bs / xs2 + hk) * 0.5).exp() * (1.0 + c * xs2 * (1.0 + d * xs2));
            bvn += a * w * (t1 - t2);
        }
    }
    bvn = -bvn / (2.0 * PI);
    let out = if r > 0.0 {
        bvn + std_normal_sf(h.max(k))
    } else {
        let mut v = -bvn;
        if k > h {
            v += std_normal_cdf(k) - std_normal_cdf(h);
        }
        v
    };
    out.clamp(0.0, 1.0)
}

/// Φ₂,ρ(a, b) = Pr[X ≤ a, Y ≤ b] for standard margins and correlation `rho`.
/// |rho| = 1 gives the comonotone / countermonotone limits.
pub fn bvn_cdf(a: f64, b: f64, rho: f64) -> f64 {
    bvn_upper(-a, -b, rho)
}

/// Bivariate normal with mean `mu` and covariance `[[s11, s12], [s12, s22]]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bvn {
    pub mu: [f64; 2],
    s11: f64,
    s12: f64,
    s22: f64,
}

impl Bvn {
    pub fn new(mu: [f64; 2], sigma: [[f64; 2]; 2]) -> Result<Self> {
        let [[s11, s12], [s21, s22]] = sigma;
        if (s12 - s21).abs() > 1e-12 * (1.0 + s12.abs()) {
            return Err(Error::Domain("covariance is not symmetric".into()));
        }
        Self::from_parts(mu, s11, s12, s22)
    }

    pub fn from_parts(mu: [f64; 2], s11: f64, s12: f64, s22: f64) -> Result<Self> {
        if !(s11 > 0.0 && s22 > 0.0 && s11 * s22 - s12 * s12 > 0.0) {
            return Err(Error::Domain(format!(
                "covariance not positive definite: ({s11}, {s12}, {s22})"
            )));
        }
        if !mu.iter().all(|m| m.is_finite()) {
            return Err(Error::Domain("non-finite mean".into()));
        }
        Ok(Self { mu, s11, s12, s22 })
    }

    pub fn sigma(&self) -> [[f64; 2]; 2] {
        [[self.s11, self.s12], [self.s12, self.s22]]
    }

    pub fn sd1(&self) -> f64 {
        self.s11.sqrt()
    }

    pub fn sd2(&self) -> f64 {
        self.s22.sqrt()
    }

    pub fn corr(&self) -> f64 {
        (self.s12 / (self.s11 * self.s22).sqrt()).clamp(-1.0, 1.0)
    }

    pub fn det(&self) -> f64 {
        self.s11 * self.s22 - self.s12 * self.s12
    }

    /// Mean and sd of the second coordinate given the first equals `y1`.
    pub fn cond2_given1(&self, y1: f64) -> (f64, f64) {
        let m = self.mu[1] + self.s12 / self.s11 * (y1 - self.mu[0]);
        (m, (self.det() / self.s11).sqrt())
    }

    /// Mean and sd of the first coordinate given the second equals `y2`.
    pub fn cond1_given2(&self, y2: f64) -> (f64, f64) {
        let m = self.mu[0] + self.s12 / self.s22 * (y2 - self.mu[1]);
        (m, (self.det() / self.s22).sqrt())
    }

    pub fn log_density(&self, s: f64, t: f64) -> f64 {
        let det = self.det();
        let ds = s - self.mu[0];
        let dt = t - self.mu[1];
        let q = (self.s22 * ds * ds - 2.0 * self.s12 * ds * dt + self.s11 * dt * dt) / det;
        -0.5 * q - 2.0 * LN_SQRT_2PI - 0.5 * det.ln()
    }

    pub fn density(&self, s: f64, t: f64) -> f64 {
        self.log_density(s, t).exp()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 2] {
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rng.sample(StandardNormal);
        let sd1 = self.sd1();
        let s = self.mu[0] + sd1 * z1;
        let t = self.mu[1] + self.s12 / sd1 * z1 + (self.det() / self.s11).sqrt() * z2;
        [s, t]
    }
}

/// Pr[S > c, T > c] under `bvn`.
pub fn quadrant_upper_prob(bvn: &Bvn, c: f64) -> f64 {
    if c == f64::NEG_INFINITY {
        return 1.0;
    }
    let h = (c - bvn.mu[0]) / bvn.sd1();
    let k = (c - bvn.mu[1]) / bvn.sd2();
    bvn_upper(h, k, bvn.corr())
}

/// ln Pr[S > c, T > c], accurate when the mass is below f64 resolution of 1.
pub fn log_quadrant_upper_prob(bvn: &Bvn, c: f64) -> f64 {
    let p = quadrant_upper_prob(bvn, c);
    if p > 1e-280 {
        return p.ln();
    }
    // Deep tail: bound by the product of the conditional factorization
    // Pr[S > c] · Pr[T > c | S = s*] evaluated at the truncation point, which
    // is the dominant term of the Laplace expansion. Used only for relative
    // weighting of components that are all negligible.
    let h = (c - bvn.mu[0]) / bvn.sd1();
    let k = (c - bvn.mu[1]) / bvn.sd2();
    let (hi, lo) = if h >= k { (h, k) } else { (k, h) };
    let r = bvn.corr();
    let rr = (1.0 - r * r).max(1e-300).sqrt();
    log_std_normal_sf(hi) + log_std_normal_sf((lo - r * hi) / rr)
}

/// ∫_{t > c} φ₂(y1, t; bvn) dt.
pub fn halfplane_slice(bvn: &Bvn, y1: f64, c: f64) -> f64 {
    log_halfplane_slice(bvn, y1, c).exp()
}

pub fn log_halfplane_slice(bvn: &Bvn, y1: f64, c: f64) -> f64 {
    let sd1 = bvn.sd1();
    let marg = norm_logpdf((y1 - bvn.mu[0]) / sd1) - sd1.ln();
    if c == f64::NEG_INFINITY {
        return marg;
    }
    let (m, s) = bvn.cond2_given1(y1);
    marg + log_std_normal_sf((c - m) / s)
}

/// ∫_{s > c} φ₂(s, t; bvn) ds, the mirror of [`halfplane_slice`].
pub fn slice_ge(bvn: &Bvn, t: f64, c: f64) -> f64 {
    log_slice_ge(bvn, t, c).exp()
}

pub fn log_slice_ge(bvn: &Bvn, t: f64, c: f64) -> f64 {
    let sd2 = bvn.sd2();
    let marg = norm_logpdf((t - bvn.mu[1]) / sd2) - sd2.ln();
    if c == f64::NEG_INFINITY {
        return marg;
    }
    let (m, s) = bvn.cond1_given2(t);
    marg + log_std_normal_sf((c - m) / s)
}

/// Draw from N(mu, sd²) restricted to (lo, hi).
///
/// Inverse-CDF in the body; exponential (or uniform, for narrow intervals)
/// proposal rejection once the interval lies beyond five standard deviations.
pub fn sample_truncated_normal<R: Rng + ?Sized>(
    mu: f64,
    sd: f64,
    lo: f64,
    hi: f64,
    rng: &mut R,
) -> Result<f64> {
    if !(sd > 0.0) || !(lo < hi) || mu.is_nan() {
        return Err(Error::Domain(format!(
            "truncated normal needs sd > 0 and lo < hi (mu={mu}, sd={sd}, lo={lo}, hi={hi})"
        )));
    }
    let a = (lo - mu) / sd;
    let b = (hi - mu) / sd;
    let z = if a >= TAIL_SWITCH {
        tail_sample(a, b, rng)?
    } else if b <= -TAIL_SWITCH {
        -tail_sample(-b, -a, rng)?
    } else {
        body_sample(a, b, rng)?
    };
    let x = mu + sd * z;
    // Keep the draw strictly inside after rescaling round-off.
    Ok(if x <= lo || x >= hi {
        if hi.is_finite() && lo.is_finite() {
            0.5 * (lo + hi)
        } else if lo.is_finite() {
            lo + (lo.abs() * f64::EPSILON).max(f64::MIN_POSITIVE)
        } else {
            hi - (hi.abs() * f64::EPSILON).max(f64::MIN_POSITIVE)
        }
    } else {
        x
    })
}

fn body_sample<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> Result<f64> {
    let u: f64 = rng.gen();
    if a > 0.0 {
        let pa = std_normal_sf(a);
        let pb = std_normal_sf(b);
        let mass = pa - pb;
        if !(mass >= MIN_MASS) {
            return Err(Error::NegligibleMass { mass });
        }
        let p = (pb + u * mass).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON);
        Ok(-quantile_unchecked(p))
    } else {
        let pa = std_normal_cdf(a);
        let pb = std_normal_cdf(b);
        let mass = pb - pa;
        if !(mass >= MIN_MASS) {
            return Err(Error::NegligibleMass { mass });
        }
        let p = (pa + u * mass).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON);
        Ok(quantile_unchecked(p))
    }
}

/// Standard normal restricted to (a, b) with a ≥ 5.
fn tail_sample<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> Result<f64> {
    let log_mass = {
        let la = log_std_normal_sf(a);
        let lb = log_std_normal_sf(b);
        la + (-(lb - la).exp()).ln_1p()
    };
    if !(log_mass >= MIN_MASS.ln()) {
        return Err(Error::NegligibleMass { mass: log_mass.exp() });
    }
    let lambda = 0.5 * (a + (a * a + 4.0).sqrt());
    if lambda * (b - a) < 1.0 {
        // Narrow interval: uniform proposal, acceptance ≥ exp(-(a(b-a) + (b-a)²/2)).
        loop {
            let z = a + (b - a) * rng.gen::<f64>();
            let u: f64 = rng.gen();
            if u.ln() <= 0.5 * (a * a - z * z) {
                return Ok(z);
            }
        }
    }
    loop {
        let e: f64 = -rng.gen::<f64>().ln() / lambda;
        let z = a + e;
        if z >= b {
            continue;
        }
        let u: f64 = rng.gen();
        if u.ln() <= -0.5 * (z - lambda).powi(2) {
            return Ok(z);
        }
    }
}

/// Truncation region for bivariate draws.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Region {
    /// s > c and t > c.
    Quadrant { c: f64 },
    /// s fixed, t > c.
    RayT { s: f64, c: f64 },
    /// t fixed, s > c.
    RayS { t: f64, c: f64 },
}

impl Region {
    pub fn contains(&self, y: [f64; 2]) -> bool {
        match *self {
            Region::Quadrant { c } => y[0] > c && y[1] > c,
            Region::RayT { s, c } => y[0] == s && y[1] > c,
            Region::RayS { t, c } => y[1] == t && y[0] > c,
        }
    }
}

/// Tuning for quadrant draws.
#[derive(Debug, Clone, Copy)]
pub struct RegionSampler {
    /// Below this region mass, skip plain rejection and run truncated Gibbs sweeps.
    pub min_acceptance: f64,
    pub gibbs_sweeps: usize,
}

impl Default for RegionSampler {
    fn default() -> Self {
        Self { min_acceptance: 0.01, gibbs_sweeps: 10 }
    }
}

/// Draw from `bvn` restricted to `region`, with default tuning.
pub fn sample_bvn_region<R: Rng + ?Sized>(bvn: &Bvn, region: Region, rng: &mut R) -> Result<[f64; 2]> {
    RegionSampler::default().sample(bvn, region, None, rng)
}

impl RegionSampler {
    /// `start`, when inside the region, seeds the Gibbs fallback.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        bvn: &Bvn,
        region: Region,
        start: Option<[f64; 2]>,
        rng: &mut R,
    ) -> Result<[f64; 2]> {
        match region {
            Region::RayT { s, c } => {
                let (m, sd) = bvn.cond2_given1(s);
                Ok([s, sample_truncated_normal(m, sd, c, f64::INFINITY, rng)?])
            }
            Region::RayS { t, c } => {
                let (m, sd) = bvn.cond1_given2(t);
                Ok([sample_truncated_normal(m, sd, c, f64::INFINITY, rng)?, t])
            }
            Region::Quadrant { c } => {
                if c == f64::NEG_INFINITY {
                    return Ok(bvn.sample(rng));
                }
                let log_mass = log_quadrant_upper_prob(bvn, c);
                if !(log_mass >= MIN_MASS.ln()) {
                    return Err(Error::NegligibleMass { mass: log_mass.exp() });
                }
                let mass = log_mass.exp();
                if mass >= self.min_acceptance {
                    let max_tries = (100.0 / mass).ceil() as usize;
                    for _ in 0..max_tries {
                        let y = bvn.sample(rng);
                        if y[0] > c && y[1] > c {
                            return Ok(y);
                        }
                    }
                }
                self.quadrant_gibbs(bvn, c, start, rng)
            }
        }
    }

    fn quadrant_gibbs<R: Rng + ?Sized>(
        &self,
        bvn: &Bvn,
        c: f64,
        start: Option<[f64; 2]>,
        rng: &mut R,
    ) -> Result<[f64; 2]> {
        let inf = f64::INFINITY;
        let mut y = match start {
            Some(y) if y[0] > c && y[1] > c && y.iter().all(|v| v.is_finite()) => y,
            _ => {
                // Start the coordinate with the larger standardized bound from
                // its marginal, then the other from its conditional.
                let h = (c - bvn.mu[0]) / bvn.sd1();
                let k = (c - bvn.mu[1]) / bvn.sd2();
                if h >= k {
                    let s = sample_truncated_normal(bvn.mu[0], bvn.sd1(), c, inf, rng)?;
                    let (m, sd) = bvn.cond2_given1(s);
                    [s, sample_truncated_normal(m, sd, c, inf, rng)?]
                } else {
                    let t = sample_truncated_normal(bvn.mu[1], bvn.sd2(), c, inf, rng)?;
                    let (m, sd) = bvn.cond1_given2(t);
                    [sample_truncated_normal(m, sd, c, inf, rng)?, t]
                }
            }
        };
        for _ in 0..self.gibbs_sweeps {
            let (m, sd) = bvn.cond1_given2(y[1]);
            y[0] = sample_truncated_normal(m, sd, c, inf, rng)?;
            let (m, sd) = bvn.cond2_given1(y[0]);
            y[1] = sample_truncated_normal(m, sd, c, inf, rng)?;
        }
        Ok(y)
    }
}

/// Gaussian copula with correlation `rho`, |rho| ≤ 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CopulaSpec {
    pub rho: f64,
}

impl CopulaSpec {
    pub fn new(rho: f64) -> Result<Self> {
        if !(-1.0..=1.0).contains(&rho) {
            return Err(Error::Domain(format!("copula correlation must lie in [-1, 1], got {rho}")));
        }
        Ok(Self { rho })
    }
}

/// Pr[V > v, W > w] given the marginal CDF values u0 = G⁰(v), u1 = G¹(w).
pub fn copula_joint_survival(u0: f64, u1: f64, rho: f64) -> f64 {
    let q0 = std_normal_quantile_clamped(u0);
    let q1 = std_normal_quantile_clamped(u1);
    // Upper orthant of the latent scores directly, avoiding 1 - u0 - u1 + C.
    bvn_upper(q0, q1, rho).clamp(0.0, 1.0)
}

/// Pr[score_target > Φ⁻¹(u_target) | score_given = Φ⁻¹(u_given)].
pub fn copula_conditional_survival(u_target: f64, u_given: f64, rho: f64) -> f64 {
    let qt = std_normal_quantile_clamped(u_target);
    let qg = std_normal_quantile_clamped(u_given);
    conditional_survival_scores(qt, qg, rho)
}

/// Same as [`copula_conditional_survival`] on the normal-score scale.
pub fn conditional_survival_scores(q_target: f64, q_given: f64, rho: f64) -> f64 {
    if rho.abs() >= 1.0 {
        let shifted = rho.signum() * q_given;
        return if shifted > q_target {
            1.0
        } else if shifted < q_target {
            0.0
        } else {
            0.5
        };
    }
    if q_target == f64::NEG_INFINITY {
        return 1.0;
    }
    if q_target == f64::INFINITY {
        return 0.0;
    }
    std_normal_sf((q_target - rho * q_given) / (1.0 - rho * rho).sqrt())
}
