//! Command-line front end: simulate, fit, estimand, report, benchmark.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use ddpgp::baselines::{fit_naive, kaplan_meier_arm, lpml, LpmlScope};
use ddpgp::config::KvConfig;
use ddpgp::data::{ingest_csv, Arm, CsvSchema, Dataset, TimeScale, DEFAULT_TIE_JITTER};
use ddpgp::estimands::{marginal_survival, tau_components_mc, tau_curves, tau_ratios, tau_rows, TauSettings};
use ddpgp::gibbs::{run_chain, ChainConfig, ModelKind, PosteriorChain};
use ddpgp::harness::{run_repetitions_cached, BenchmarkSettings, DEFAULT_RHOS};
use ddpgp::model::empirical_bayes_init;
use ddpgp::rng::rng_for;
use ddpgp::sim::{self, generate_scenario, true_death_survival, ScenarioSpec};
use ddpgp::Error;

#[derive(Parser, Debug)]
#[command(name = "ddpgp", version, about = "DDP-GP mixtures for semi-competing risks")]
struct Cli {
    /// Flat `key = value` file; flags override its entries.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Full-scale benchmark: 500 repetitions of 5000/2000/10 chains.
    #[arg(long, global = true)]
    paper_scale: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a simulated dataset and its ground truth.
    Simulate(SimulateArgs),
    /// Fit per-arm chains to a dataset.
    Fit(FitArgs),
    /// τ(u) curves for a list of copula correlations.
    Estimand(EstimandArgs),
    /// Survival curves, Kaplan–Meier overlays and LPML.
    Report(ReportArgs),
    /// Repeated-simulation comparison of the BNP and naive models.
    Benchmark(BenchmarkArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    scenario: Option<u8>,
    #[arg(long)]
    n: Option<usize>,
    /// Copula correlation used to generate the data.
    #[arg(long)]
    rho_true: Option<f64>,
    /// Monte Carlo draws for the τ truth.
    #[arg(long)]
    truth_draws: Option<u64>,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset CSV with columns t1, t2, delta, xi, z and covariates.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_parser = ["days", "log"])]
    time_scale: Option<String>,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_parser = ["bnp", "naive"])]
    model: Option<String>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    burn_in: Option<usize>,
    #[arg(long)]
    thin: Option<usize>,
    /// Independent chains per arm, pooled after burn-in.
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    k_trunc: Option<usize>,
}

#[derive(Args, Debug)]
struct EstimandArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Directory holding the chain files (defaults to the output directory).
    #[arg(long)]
    chains: Option<PathBuf>,
    /// Comma-separated copula correlations.
    #[arg(long)]
    rho: Option<String>,
    /// Comma-separated evaluation times in days.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    nodes: Option<usize>,
    /// Also estimate τ by Monte Carlo with this many death-time draws per row
    /// and report the largest difference.
    #[arg(long)]
    mc_check: Option<usize>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    chains: Option<PathBuf>,
    #[arg(long)]
    grid: Option<String>,
}

#[derive(Args, Debug)]
struct BenchmarkArgs {
    /// Comma-separated scenario ids.
    #[arg(long)]
    scenarios: Option<String>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    burn_in: Option<usize>,
    #[arg(long)]
    truth_draws: Option<u64>,
}

/// File values merged with flag values; every key read is recorded with the
/// value actually used.
struct Resolver {
    cfg: KvConfig,
    snapshot: KvConfig,
}

impl Resolver {
    fn new(file: KvConfig, flags: KvConfig) -> Self {
        Self { cfg: file.merged(&flags), snapshot: KvConfig::default() }
    }

    fn get<T: FromStr + Display>(&mut self, key: &str, default: T) -> ddpgp::Result<T> {
        let v = self.cfg.get(key)?.unwrap_or(default);
        self.snapshot.set(key, &v);
        Ok(v)
    }

    fn opt<T: FromStr + Display>(&mut self, key: &str) -> ddpgp::Result<Option<T>> {
        let v = self.cfg.get::<T>(key)?;
        if let Some(v) = &v {
            self.snapshot.set(key, v);
        }
        Ok(v)
    }

    fn list<T: FromStr + Display>(&mut self, key: &str, default: Vec<T>) -> ddpgp::Result<Vec<T>> {
        let v = self.cfg.get_list(key)?.unwrap_or(default);
        let text = v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        self.snapshot.set(key, text);
        Ok(v)
    }

    fn path(&mut self, key: &str) -> ddpgp::Result<PathBuf> {
        let p = self
            .cfg
            .raw(key)
            .ok_or_else(|| Error::Config(format!("'{key}' is required (flag --{key} or config key)")))?
            .to_string();
        self.snapshot.set(key, &p);
        Ok(PathBuf::from(p))
    }

    /// Keys from the file that no command reads (hyperparameter overrides) are
    /// carried into the snapshot unchanged.
    fn passthrough(&mut self, keys: &[&str]) {
        for &k in keys {
            if let Some(v) = self.cfg.raw(k) {
                self.snapshot.set(k, v);
            }
        }
    }

    fn write(&self, out: &Path, command: &str) -> anyhow::Result<()> {
        let path = out.join(format!("{command}-config.txt"));
        let text = format!("# resolved settings for `ddpgp {command}`\n{}", self.snapshot.to_text());
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}

const HYPER_KEYS: [&str; 9] =
    ["epsilon", "lambda0", "lambda1", "lambda2", "psi", "beta0.1", "beta0.2", "lambda0_diag", "naive_prior_var"];

fn chain_path(dir: &Path, arm: Arm) -> PathBuf {
    dir.join(format!("chain-{}.jsonl", arm_name(arm)))
}

fn arm_name(arm: Arm) -> &'static str {
    match arm {
        Arm::Control => "control",
        Arm::Treated => "treated",
    }
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn load_data(r: &mut Resolver) -> anyhow::Result<Dataset> {
    let path = r.path("data")?;
    let scale: TimeScale = r.get::<String>("time_scale", "days".into())?.parse()?;
    let schema = CsvSchema { time_scale: scale, ..CsvSchema::default() };
    if !path.exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("data file {} not found", path.display()),
        ))
        .into());
    }
    Ok(ingest_csv(&path, &schema)?)
}

fn load_chains(r: &mut Resolver, out: &Path) -> anyhow::Result<[PosteriorChain; 2]> {
    let dir = r.opt::<String>("chains")?.map(PathBuf::from).unwrap_or_else(|| out.to_path_buf());
    r.snapshot.set("chains", dir.display());
    let load = |arm| -> anyhow::Result<PosteriorChain> {
        let p = chain_path(&dir, arm);
        if !p.exists() {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("chain file {} not found; run `ddpgp fit` first", p.display()),
            ))
            .into());
        }
        let c = PosteriorChain::load(&p).with_context(|| format!("reading {}", p.display()))?;
        if c.arm != arm {
            return Err(Error::Config(format!("{} holds arm {}, expected {arm}", p.display(), c.arm)).into());
        }
        Ok(c)
    };
    Ok([load(Arm::Control)?, load(Arm::Treated)?])
}

fn cmd_simulate(r: &mut Resolver, out: &Path, seed: u64) -> anyhow::Result<()> {
    let scenario = r.get::<u8>("scenario", 1)?;
    let n = r.get::<usize>("n", 500)?;
    let rho_true = r.get::<f64>("rho_true", 0.5)?;
    let truth_draws = r.get::<u64>("truth_draws", 1_000_000)?;
    let mut spec = ScenarioSpec::new(scenario, n, seed)?;
    spec.rho_true = rho_true;
    spec.validate()?;
    let data = generate_scenario(&spec, &mut rng_for(seed, &[0]))?;
    data.dataset.export_csv(out.join("data.csv"))?;

    let grid = sim::log_grid();
    let days = sim::day_grid();
    let surv = |arm| grid.iter().map(|&t| true_death_survival(spec.scenario, arm, t)).collect::<Vec<_>>();
    let tau = sim::tau_truth_mc(spec.scenario, rho_true, truth_draws, seed, &grid);
    let truth = json!({
        "scenario": scenario,
        "n": n,
        "seed": seed,
        "rho_true": rho_true,
        "t_days": days,
        "survival_control": surv(Arm::Control),
        "survival_treated": surv(Arm::Treated),
        "tau": tau,
        "tau_usable": tau.usable(),
    });
    fs::write(out.join("truth.json"), serde_json::to_string_pretty(&truth)?)?;
    println!("wrote {} subjects to {}", n, out.join("data.csv").display());
    Ok(())
}

fn cmd_fit(r: &mut Resolver, out: &Path, seed: u64) -> anyhow::Result<()> {
    let ds = load_data(r)?;
    let kind: ModelKind = r.get::<String>("model", "bnp".into())?.parse()?;
    // 5000 iterations, 2000 burn-in, thin 10: 300 draws per arm.
    let base = ChainConfig::default();
    let cfg = ChainConfig {
        iterations: r.get("iterations", base.iterations)?,
        burn_in: r.get("burn_in", base.burn_in)?,
        thin: r.get("thin", base.thin)?,
        chains: r.get("chains", base.chains)?,
        k_trunc: r.opt("k_trunc")?,
        tie_jitter: r.get("tie_jitter", DEFAULT_TIE_JITTER)?,
        seed,
    };
    cfg.validate()?;
    r.passthrough(&HYPER_KEYS);
    for arm in Arm::BOTH {
        let chain = match kind {
            ModelKind::Bnp => {
                let mut hp = empirical_bayes_init(&ds, arm)?;
                hp.apply_config(&r.cfg)?;
                run_chain(&ds, arm, &hp, &cfg, kind)?
            }
            ModelKind::Naive => fit_naive(&ds, arm, &cfg, Some(&r.cfg))?,
        };
        chain.save(chain_path(out, arm))?;
        chain.write_trace_csv(out.join(format!("trace-{}.csv", arm_name(arm))))?;
        log::info!("arm {arm}: {} draws, {:.1}s", chain.len(), chain.stats.seconds);
        println!("{} arm: {} draws saved to {}", arm_name(arm), chain.len(), chain_path(out, arm).display());
    }
    Ok(())
}

fn cmd_estimand(r: &mut Resolver, out: &Path, seed: u64) -> anyhow::Result<()> {
    let ds = load_data(r)?;
    let [c0, c1] = load_chains(r, out)?;
    let rhos = r.list::<f64>("rho", DEFAULT_RHOS.to_vec())?;
    let grid = r.list::<f64>("grid", sim::day_grid())?;
    let defaults = TauSettings::default();
    let settings = TauSettings {
        nodes: r.get("nodes", defaults.nodes)?,
        upper_sds: r.get("upper_sds", defaults.upper_sds)?,
        min_weight: r.get("min_weight", defaults.min_weight)?,
        ..defaults
    };
    if rhos.iter().any(|v| !(v.abs() <= 1.0)) {
        return Err(Error::Config("rho values must lie in [-1, 1]".into()).into());
    }
    let curves = tau_curves(&c0, &c1, &ds, &grid, &rhos, &settings)?;
    for c in &curves {
        let stem = format!("tau-rho{}", c.rho);
        c.write_csv(out.join(format!("{stem}.csv")))?;
        c.write_json(out.join(format!("{stem}.json")))?;
        println!("rho = {}: wrote {stem}.csv", c.rho);
    }
    if let Some(samples) = r.opt::<usize>("mc_check")? {
        let log_grid: Vec<f64> = grid.iter().map(|u| u.ln()).collect();
        let rows = tau_rows(&ds, &settings);
        let comps = tau_components_mc(&c0, &c1, &rows, &log_grid, &rhos, samples, seed)?;
        let mut worst = Vec::new();
        for (ri, c) in curves.iter().enumerate() {
            let (ratios, _) = tau_ratios(&comps, ri);
            let mut diff = 0.0f64;
            for (k, &p) in c.point.iter().enumerate() {
                let v: Vec<f64> = ratios.iter().map(|d| d[k]).filter(|x| x.is_finite()).collect();
                if !v.is_empty() && p.is_finite() {
                    diff = diff.max((v.iter().sum::<f64>() / v.len() as f64 - p).abs());
                }
            }
            println!("rho = {}: largest |quadrature - Monte Carlo| = {diff:.3e}", c.rho);
            worst.push(json!({ "rho": c.rho, "max_abs_diff": diff }));
        }
        fs::write(
            out.join("tau-mc-check.json"),
            serde_json::to_string_pretty(&json!({ "samples": samples, "results": worst }))?,
        )?;
    }
    Ok(())
}

fn cmd_report(r: &mut Resolver, out: &Path) -> anyhow::Result<()> {
    let ds = load_data(r)?;
    let chains = load_chains(r, out)?;
    let grid = r.list::<f64>("grid", sim::day_grid())?;
    let mut lpml_out = Vec::new();
    for chain in &chains {
        let name = arm_name(chain.arm);
        marginal_survival(chain, &ds, &grid)?.write_csv(out.join(format!("survival-{name}.csv")))?;
        kaplan_meier_arm(&ds, chain.arm)?.write_csv(out.join(format!("km-{name}.csv")))?;
        for scope in [LpmlScope::SurvivalOnly, LpmlScope::Joint] {
            let l = lpml(chain, &ds, scope)?;
            println!("{name} arm, {scope}: LPML = {:.3}", l.lpml);
            if !l.zero_cpo.is_empty() {
                log::warn!("{name} arm, {scope}: {} subject(s) with zero CPO", l.zero_cpo.len());
            }
            lpml_out.push(json!({
                "arm": name,
                "model": chain.model.to_string(),
                "scope": scope,
                "lpml": l.lpml,
                "zero_cpo": l.zero_cpo,
            }));
        }
    }
    fs::write(out.join("lpml.json"), serde_json::to_string_pretty(&lpml_out)?)?;
    Ok(())
}

fn benchmark_settings(r: &mut Resolver, seed: u64, paper_scale: bool) -> ddpgp::Result<BenchmarkSettings> {
    let base = if paper_scale { BenchmarkSettings::paper_scale(seed) } else { BenchmarkSettings::desk(seed) };
    let settings = BenchmarkSettings {
        scenarios: r.list("scenarios", base.scenarios.clone())?,
        reps: r.get("reps", base.reps)?,
        n: r.get("n", base.n)?,
        iterations: r.get("iterations", base.iterations)?,
        burn_in: r.get("burn_in", base.burn_in)?,
        truth_draws: r.get("truth_draws", base.truth_draws)?,
        ..base
    };
    settings.validate()?;
    Ok(settings)
}

fn cmd_benchmark(r: &mut Resolver, out: &Path, seed: u64, paper_scale: bool) -> anyhow::Result<()> {
    let settings = benchmark_settings(r, seed, paper_scale)?;
    let report = run_repetitions_cached(&settings, &out.join("cache"))?;
    for f in &report.failures {
        log::warn!("scenario {} rep {} failed: {}", f.scenario, f.rep, f.message);
    }
    for p in report.write_all(out)? {
        println!("wrote {}", p.display());
    }
    for row in &report.survival_table {
        println!(
            "scenario {}: survival RMSE bnp {:.4}/{:.4} naive {:.4}/{:.4}",
            row.scenario, row.bnp[0].mean, row.bnp[1].mean, row.naive[0].mean, row.naive[1].mean
        );
    }
    for row in &report.tau_table {
        let show = |v: &[ddpgp::harness::MeanSd]| fmt_list(&v.iter().map(|m| (m.mean * 1e4).round() / 1e4).collect::<Vec<_>>());
        println!("scenario {}: tau RMSE bnp [{}] naive [{}]", row.scenario, show(&row.bnp), show(&row.naive));
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let file = match &cli.config {
        Some(p) => KvConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => KvConfig::default(),
    };
    let mut flags = KvConfig::default();
    let mut put = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            flags.set(k, v);
        }
    };
    put("seed", cli.seed.map(|v| v.to_string()));
    put("out", cli.out.as_ref().map(|p| p.display().to_string()));
    put("workers", cli.workers.map(|v| v.to_string()));
    if cli.paper_scale {
        put("paper_scale", Some("true".into()));
    }
    let data_flags = |put: &mut dyn FnMut(&str, Option<String>), d: &DataArgs| {
        put("data", d.data.as_ref().map(|p| p.display().to_string()));
        put("time_scale", d.time_scale.clone());
    };
    let name = match &cli.command {
        Command::Simulate(a) => {
            put("scenario", a.scenario.map(|v| v.to_string()));
            put("n", a.n.map(|v| v.to_string()));
            put("rho_true", a.rho_true.map(|v| v.to_string()));
            put("truth_draws", a.truth_draws.map(|v| v.to_string()));
            "simulate"
        }
        Command::Fit(a) => {
            data_flags(&mut put, &a.data);
            put("model", a.model.clone());
            put("iterations", a.iterations.map(|v| v.to_string()));
            put("burn_in", a.burn_in.map(|v| v.to_string()));
            put("thin", a.thin.map(|v| v.to_string()));
            put("chains", a.chains.map(|v| v.to_string()));
            put("k_trunc", a.k_trunc.map(|v| v.to_string()));
            "fit"
        }
        Command::Estimand(a) => {
            data_flags(&mut put, &a.data);
            put("chains", a.chains.as_ref().map(|p| p.display().to_string()));
            put("rho", a.rho.clone());
            put("grid", a.grid.clone());
            put("nodes", a.nodes.map(|v| v.to_string()));
            put("mc_check", a.mc_check.map(|v| v.to_string()));
            "estimand"
        }
        Command::Report(a) => {
            data_flags(&mut put, &a.data);
            put("chains", a.chains.as_ref().map(|p| p.display().to_string()));
            put("grid", a.grid.clone());
            "report"
        }
        Command::Benchmark(a) => {
            put("scenarios", a.scenarios.clone());
            put("reps", a.reps.map(|v| v.to_string()));
            put("n", a.n.map(|v| v.to_string()));
            put("iterations", a.iterations.map(|v| v.to_string()));
            put("burn_in", a.burn_in.map(|v| v.to_string()));
            put("truth_draws", a.truth_draws.map(|v| v.to_string()));
            "benchmark"
        }
    };

    let mut r = Resolver::new(file, flags);
    let seed = r.get::<u64>("seed", 0)?;
    let out = PathBuf::from(r.get::<String>("out", "out".into())?);
    let paper_scale = r.get::<bool>("paper_scale", false)?;
    if let Some(w) = r.opt::<usize>("workers")? {
        if w == 0 {
            return Err(Error::Config("workers must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(w).build_global().context("starting worker pool")?;
    }
    fs::create_dir_all(&out).map_err(Error::Io).with_context(|| format!("creating {}", out.display()))?;

    match cli.command {
        Command::Simulate(_) => cmd_simulate(&mut r, &out, seed)?,
        Command::Fit(_) => cmd_fit(&mut r, &out, seed)?,
        Command::Estimand(_) => cmd_estimand(&mut r, &out, seed)?,
        Command::Report(_) => cmd_report(&mut r, &out)?,
        Command::Benchmark(_) => cmd_benchmark(&mut r, &out, seed, paper_scale)?,
    }
    r.write(&out, name)
}

/// 2 for bad input or settings, 3 for numerical failure, 4 for I/O.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Io(_) => 4,
                Error::Json(_) => 2,
                e if e.is_numerical() => 3,
                Error::Iteration { source, .. } if matches!(**source, Error::Io(_)) => 4,
                _ => 2,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 4;
        }
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
