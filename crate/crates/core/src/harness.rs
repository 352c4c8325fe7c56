//! Repeated-simulation benchmark: survival and τ RMSE for the mixture model
//! and the naive comparator across scenarios.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::fit_naive;
use crate::data::Arm;
use crate::error::{Error, Result};
use crate::estimands::{survival_draws, tau_curves, TauSettings};
use crate::gibbs::{run_chain, ChainConfig, ModelKind, PosteriorChain};
use crate::model::empirical_bayes_init;
use crate::rng::{derive_seed, rng_for};
use crate::sim::{
    generate_scenario, log_grid, rmse, tau_truth_cached, true_death_survival, Scenario, ScenarioSpec, TauTruth,
    DEFAULT_TRUTH_DRAWS,
};

pub const DEFAULT_RHOS: [f64; 3] = [0.2, 0.5, 0.8];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSettings {
    pub scenarios: Vec<u8>,
    pub reps: usize,
    pub n: usize,
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub k_trunc: Option<usize>,
    pub rhos: Vec<f64>,
    pub tau: TauSettings,
    /// τ uses every `tau_draw_stride`-th retained draw.
    pub tau_draw_stride: usize,
    /// Copula correlation used to generate the data.
    pub rho_true: f64,
    pub truth_draws: u64,
    pub master_seed: u64,
}

impl BenchmarkSettings {
    /// 20 repetitions of n = 500, chains 3000/1000/10.
    pub fn desk(master_seed: u64) -> Self {
        Self {
            scenarios: vec![1, 2, 3],
            reps: 20,
            n: 500,
            iterations: 3000,
            burn_in: 1000,
            thin: 10,
            k_trunc: None,
            rhos: DEFAULT_RHOS.to_vec(),
            tau: TauSettings { nodes: 32, min_weight: 1e-4, ..TauSettings::default() },
            tau_draw_stride: 2,
            rho_true: 0.5,
            truth_draws: DEFAULT_TRUTH_DRAWS,
            master_seed,
        }
    }

    /// 500 repetitions, chains 5000/2000/10, τ on every draw.
    pub fn paper_scale(master_seed: u64) -> Self {
        Self {
            reps: 500,
            iterations: 5000,
            burn_in: 2000,
            tau_draw_stride: 1,
            ..Self::desk(master_seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(Error::Config("reps must be at least 1".into()));
        }
        if self.scenarios.is_empty() {
            return Err(Error::Config("no scenarios requested".into()));
        }
        for &s in &self.scenarios {
            Scenario::from_id(s)?;
        }
        if self.tau_draw_stride == 0 {
            return Err(Error::Config("tau_draw_stride must be at least 1".into()));
        }
        if self.rhos.iter().any(|r| !(r.abs() <= 1.0)) {
            return Err(Error::Config("copula correlations must lie in [-1, 1]".into()));
        }
        self.chain_config(0).validate()
    }

    fn chain_config(&self, seed: u64) -> ChainConfig {
        ChainConfig {
            iterations: self.iterations,
            burn_in: self.burn_in,
            thin: self.thin,
            seed,
            k_trunc: self.k_trunc,
            ..ChainConfig::default()
        }
    }

    /// Seed of repetition `rep` of scenario `scenario`.
    pub fn rep_seed(&self, scenario: u8, rep: usize) -> u64 {
        derive_seed(self.master_seed, &[u64::from(scenario), rep as u64])
    }
}

/// Per-arm values indexed by [`Arm::index`].
pub type PerArm = [f64; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepetitionOutcome {
    pub scenario: u8,
    pub rep: usize,
    pub seed: u64,
    pub survival_rmse_bnp: PerArm,
    pub survival_rmse_naive: PerArm,
    /// Indexed like `BenchmarkSettings::rhos`.
    pub tau_rmse_bnp: Vec<f64>,
    pub tau_rmse_naive: Vec<f64>,
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepetitionFailure {
    pub scenario: u8,
    pub rep: usize,
    pub seed: u64,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

impl MeanSd {
    /// Mean and sample sd over the finite entries.
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().filter(|x| x.is_finite()).collect();
        let n = v.len();
        if n == 0 {
            return Self { mean: f64::NAN, sd: f64::NAN, n };
        }
        let mean = v.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, sd, n }
    }
}

/// One row of the survival table: a scenario, each (arm, model) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRow {
    pub scenario: u8,
    pub bnp: [MeanSd; 2],
    pub naive: [MeanSd; 2],
}

/// One row of the τ table: a scenario, each (ρ, model) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauRow {
    pub scenario: u8,
    pub rhos: Vec<f64>,
    pub bnp: Vec<MeanSd>,
    pub naive: Vec<MeanSd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepetitionReport {
    pub settings: BenchmarkSettings,
    pub outcomes: Vec<RepetitionOutcome>,
    pub failures: Vec<RepetitionFailure>,
    pub survival_table: Vec<SurvivalRow>,
    pub tau_table: Vec<TauRow>,
}

fn posterior_mean_survival(chain: &PosteriorChain, n_rows: usize, grid: &[f64]) -> Vec<f64> {
    let rows: Vec<usize> = (0..n_rows).collect();
    let draws = survival_draws(chain, &rows, grid);
    (0..grid.len()).map(|k| draws.iter().map(|d| d[k]).sum::<f64>() / draws.len() as f64).collect()
}

fn thinned(chain: &PosteriorChain, stride: usize) -> PosteriorChain {
    PosteriorChain { draws: chain.draws.iter().step_by(stride).cloned().collect(), ..chain.clone() }
}

/// τ RMSE per ρ on the usable truth points.
fn tau_rmses(
    chains: &[PosteriorChain; 2],
    ds: &crate::data::Dataset,
    truth: &TauTruth,
    settings: &BenchmarkSettings,
) -> Result<Vec<f64>> {
    let usable = truth.usable();
    let idx: Vec<usize> = (0..usable.len()).filter(|&k| usable[k]).collect();
    if idx.is_empty() {
        return Err(Error::Domain("τ truth has no usable grid points".into()));
    }
    let u: Vec<f64> = idx.iter().map(|&k| truth.log_grid[k].exp()).collect();
    let target: Vec<f64> = idx.iter().map(|&k| truth.tau[k].unwrap_or(f64::NAN)).collect();
    let c0 = thinned(&chains[0], settings.tau_draw_stride);
    let c1 = thinned(&chains[1], settings.tau_draw_stride);
    let curves = tau_curves(&c0, &c1, ds, &u, &settings.rhos, &settings.tau)?;
    Ok(curves.iter().map(|c| rmse(&c.point, &target, None)).collect())
}

/// Fit and score one repetition.
pub fn run_one(settings: &BenchmarkSettings, scenario: u8, rep: usize, truth: &TauTruth) -> Result<RepetitionOutcome> {
    let start = Instant::now();
    let seed = settings.rep_seed(scenario, rep);
    let mut spec = ScenarioSpec::new(scenario, settings.n, seed)?;
    spec.rho_true = settings.rho_true;
    let data = generate_scenario(&spec, &mut rng_for(seed, &[0]))?;
    let ds = &data.dataset;
    let grid = log_grid();
    let sc = spec.scenario;

    let mut bnp = Vec::with_capacity(2);
    let mut naive = Vec::with_capacity(2);
    for arm in Arm::BOTH {
        let hp = empirical_bayes_init(ds, arm)?;
        bnp.push(run_chain(ds, arm, &hp, &settings.chain_config(derive_seed(seed, &[1])), ModelKind::Bnp)?);
        naive.push(fit_naive(ds, arm, &settings.chain_config(derive_seed(seed, &[2])), None)?);
    }
    let bnp: [PosteriorChain; 2] = bnp.try_into().expect("two arms");
    let naive: [PosteriorChain; 2] = naive.try_into().expect("two arms");

    let surv = |chains: &[PosteriorChain; 2]| -> PerArm {
        let mut out = [0.0; 2];
        for arm in Arm::BOTH {
            let fitted = posterior_mean_survival(&chains[arm.index()], ds.len(), &grid);
            let truth: Vec<f64> = grid.iter().map(|&t| true_death_survival(sc, arm, t)).collect();
            out[arm.index()] = rmse(&fitted, &truth, None);
        }
        out
    };
    let outcome = RepetitionOutcome {
        scenario,
        rep,
        seed,
        survival_rmse_bnp: surv(&bnp),
        survival_rmse_naive: surv(&naive),
        tau_rmse_bnp: tau_rmses(&bnp, ds, truth, settings)?,
        tau_rmse_naive: tau_rmses(&naive, ds, truth, settings)?,
        seconds: start.elapsed().as_secs_f64(),
    };
    log::info!(
        "scenario {scenario} rep {rep}: survival bnp {:?} naive {:?}, tau bnp {:?} ({:.0}s)",
        outcome.survival_rmse_bnp,
        outcome.survival_rmse_naive,
        outcome.tau_rmse_bnp,
        outcome.seconds
    );
    Ok(outcome)
}

/// Truth curves for each requested scenario at the generating ρ.
pub fn scenario_truths(settings: &BenchmarkSettings, cache_dir: Option<&Path>) -> Result<Vec<TauTruth>> {
    settings
        .scenarios
        .iter()
        .map(|&s| {
            let seed = derive_seed(settings.master_seed, &[u64::from(s), u64::MAX]);
            tau_truth_cached(cache_dir, Scenario::from_id(s)?, settings.rho_true, settings.truth_draws, seed, &log_grid())
        })
        .collect()
}

/// Run every (scenario, repetition) pair. A failed repetition is recorded and
/// the rest continue. Results do not depend on the worker count.
pub fn run_repetitions(settings: &BenchmarkSettings, cache_dir: Option<&Path>) -> Result<RepetitionReport> {
    settings.validate()?;
    let truths = scenario_truths(settings, cache_dir)?;
    let jobs: Vec<(usize, u8, usize)> = settings
        .scenarios
        .iter()
        .enumerate()
        .flat_map(|(si, &s)| (0..settings.reps).map(move |r| (si, s, r)))
        .collect();
    let results: Vec<std::result::Result<RepetitionOutcome, RepetitionFailure>> = jobs
        .par_iter()
        .map(|&(si, s, r)| {
            run_one(settings, s, r, &truths[si]).map_err(|e| {
                log::warn!("scenario {s} rep {r} failed: {e}");
                RepetitionFailure { scenario: s, rep: r, seed: settings.rep_seed(s, r), message: e.to_string() }
            })
        })
        .collect();
    let mut outcomes = vec![];
    let mut failures = vec![];
    for r in results {
        match r {
            Ok(o) => outcomes.push(o),
            Err(f) => failures.push(f),
        }
    }
    Ok(assemble(settings.clone(), outcomes, failures))
}

/// Cache key for a report: a digest of the settings and the library version.
pub fn report_key(settings: &BenchmarkSettings) -> Result<String> {
    use sha2::{Digest, Sha256};
    let text = serde_json::to_string(settings)?;
    let digest = Sha256::digest(format!("{}\n{text}", env!("CARGO_PKG_VERSION")).as_bytes());
    Ok(hex::encode(digest)[..16].to_string())
}

/// [`run_repetitions`] with the report and truth curves cached under `dir`.
/// A cached report is returned as-is when its settings match.
pub fn run_repetitions_cached(settings: &BenchmarkSettings, dir: &Path) -> Result<RepetitionReport> {
    let path = dir.join(format!("benchmark-{}.json", report_key(settings)?));
    if let Ok(text) = std::fs::read_to_string(&path) {
        if let Ok(r) = serde_json::from_str::<RepetitionReport>(&text) {
            if &r.settings == settings {
                log::info!("using cached benchmark report {}", path.display());
                return Ok(r);
            }
        }
    }
    let report = run_repetitions(settings, Some(dir))?;
    std::fs::create_dir_all(dir)?;
    report.write_json(&path)?;
    Ok(report)
}

/// Aggregate outcomes into the two tables.
pub fn assemble(settings: BenchmarkSettings, outcomes: Vec<RepetitionOutcome>, failures: Vec<RepetitionFailure>) -> RepetitionReport {
    let mut survival_table = vec![];
    let mut tau_table = vec![];
    for &s in &settings.scenarios {
        let rows: Vec<&RepetitionOutcome> = outcomes.iter().filter(|o| o.scenario == s).collect();
        let cell = |f: &dyn Fn(&RepetitionOutcome) -> f64| MeanSd::of(rows.iter().map(|o| f(o)));
        survival_table.push(SurvivalRow {
            scenario: s,
            bnp: [cell(&|o| o.survival_rmse_bnp[0]), cell(&|o| o.survival_rmse_bnp[1])],
            naive: [cell(&|o| o.survival_rmse_naive[0]), cell(&|o| o.survival_rmse_naive[1])],
        });
        tau_table.push(TauRow {
            scenario: s,
            rhos: settings.rhos.clone(),
            bnp: (0..settings.rhos.len()).map(|r| cell(&|o| o.tau_rmse_bnp[r])).collect(),
            naive: (0..settings.rhos.len()).map(|r| cell(&|o| o.tau_rmse_naive[r])).collect(),
        });
    }
    RepetitionReport { settings, outcomes, failures, survival_table, tau_table }
}

fn fmt_cell(c: &MeanSd) -> [String; 2] {
    [format!("{:.4}", c.mean), format!("{:.4}", c.sd)]
}

impl RepetitionReport {
    pub fn write_survival_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["scenario".to_string()];
        for arm in ["z0", "z1"] {
            for m in ["bnp", "naive"] {
                header.push(format!("{m}_{arm}_mean"));
                header.push(format!("{m}_{arm}_sd"));
            }
        }
        header.push("reps".into());
        w.write_record(&header)?;
        for row in &self.survival_table {
            let mut rec = vec![row.scenario.to_string()];
            for a in 0..2 {
                rec.extend(fmt_cell(&row.bnp[a]));
                rec.extend(fmt_cell(&row.naive[a]));
            }
            rec.push(row.bnp[0].n.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_tau_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["scenario".to_string()];
        for r in &self.settings.rhos {
            for m in ["bnp", "naive"] {
                header.push(format!("{m}_rho{r}_mean"));
                header.push(format!("{m}_rho{r}_sd"));
            }
        }
        header.push("reps".into());
        w.write_record(&header)?;
        for row in &self.tau_table {
            let mut rec = vec![row.scenario.to_string()];
            for k in 0..row.rhos.len() {
                rec.extend(fmt_cell(&row.bnp[k]));
                rec.extend(fmt_cell(&row.naive[k]));
            }
            rec.push(row.bnp.first().map_or(0, |c| c.n).to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Writes `survival_rmse.csv`, `tau_rmse.csv` and `report.json` under `dir`.
    pub fn write_all(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let paths = vec![dir.join("survival_rmse.csv"), dir.join("tau_rmse.csv"), dir.join("report.json")];
        self.write_survival_csv(&paths[0])?;
        self.write_tau_csv(&paths[1])?;
        self.write_json(&paths[2])?;
        Ok(paths)
    }

    pub fn survival_row(&self, scenario: u8) -> Option<&SurvivalRow> {
        self.survival_table.iter().find(|r| r.scenario == scenario)
    }

    pub fn tau_row(&self, scenario: u8) -> Option<&TauRow> {
        self.tau_table.iter().find(|r| r.scenario == scenario)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_sd_skips_non_finite() {
        let m = MeanSd::of([1.0, 3.0, f64::NAN]);
        assert_eq!(m.n, 2);
        assert_eq!(m.mean, 2.0);
        assert!((m.sd - 2f64.sqrt()).abs() < 1e-15);
        assert!(MeanSd::of([]).mean.is_nan());
    }

    #[test]
    fn settings_validation() {
        let mut s = BenchmarkSettings::desk(1);
        assert!(s.validate().is_ok());
        s.scenarios = vec![4];
        assert!(s.validate().is_err());
        let mut s = BenchmarkSettings::desk(1);
        s.reps = 0;
        assert!(s.validate().is_err());
        assert_eq!(BenchmarkSettings::paper_scale(1).reps, 500);
    }

    #[test]
    fn rep_seeds_are_distinct() {
        let s = BenchmarkSettings::desk(9);
        assert_ne!(s.rep_seed(1, 0), s.rep_seed(1, 1));
        assert_ne!(s.rep_seed(1, 0), s.rep_seed(2, 0));
    }

    #[test]
    fn report_key_tracks_settings() {
        let a = BenchmarkSettings::desk(1);
        let mut b = a.clone();
        assert_eq!(report_key(&a).unwrap(), report_key(&b).unwrap());
        b.reps = 3;
        assert_ne!(report_key(&a).unwrap(), report_key(&b).unwrap());
    }

    #[test]
    fn assemble_tables() {
        let s = BenchmarkSettings { scenarios: vec![1], rhos: vec![0.5], ..BenchmarkSettings::desk(1) };
        let o = |r: usize, v: f64| RepetitionOutcome {
            scenario: 1,
            rep: r,
            seed: 0,
            survival_rmse_bnp: [v, v],
            survival_rmse_naive: [2.0 * v, 2.0 * v],
            tau_rmse_bnp: vec![v],
            tau_rmse_naive: vec![v],
            seconds: 0.0,
        };
        let rep = assemble(s, vec![o(0, 0.01), o(1, 0.03)], vec![]);
        let row = rep.survival_row(1).unwrap();
        assert!((row.bnp[0].mean - 0.02).abs() < 1e-15);
        assert!((row.naive[1].mean - 0.04).abs() < 1e-15);
        assert_eq!(rep.tau_row(1).unwrap().bnp[0].n, 2);
        let dir = tempfile::tempdir().unwrap();
        let paths = rep.write_all(dir.path()).unwrap();
        let text = std::fs::read_to_string(&paths[0]).unwrap();
        assert!(text.starts_with("scenario,bnp_z0_mean,bnp_z0_sd,naive_z0_mean"));
        assert_eq!(text.lines().count(), 2);
    }
}
