//! Experiment orchestration: JSON configs, per-run CSV persistence, seed
//! replication across modes, and the diagnostic commands (spectrum,
//! projection decay, coverage, Riccati verification).
//!
//! CSV contract: header exactly
//! `episode,optimal_cost,policy_cost,regret,cum_regret,proj_err,G,beta,truth_in_region,delta_pp,seed,mode`,
//! floats with 17 significant digits so rows re-parse bit-identically,
//! UTF-8, LF line endings.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::control::{optimal_cost, riccati_solve, CostSpec, NoiseModel};
use crate::env::{
    make_lowrank_system, run_episode_from, sample_initial_state, InitialDistribution,
    LowRankSystem, SystemJson,
};
use crate::error::{Error, Result};
use crate::estimator::{confidence_radii, learn_projection, DataBuffer};
use crate::learner::{self, LearnerConfig, Mode, RegretRecord, RegretRow};
use crate::util::{derive_seed, spectral_norm};

pub const CSV_HEADER: &str =
    "episode,optimal_cost,policy_cost,regret,cum_regret,proj_err,G,beta,truth_in_region,delta_pp,seed,mode";

/// Environment specification: an inline system or generator parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum EnvSpec {
    System(SystemJson),
    Generator { d: usize, d_u: usize, m: usize },
}

fn default_norm_cap() -> f64 {
    1.0
}

fn default_warmup_bound() -> f64 {
    0.3
}

/// Top-level experiment config. Unknown keys are a hard error: silent typos
/// in experiment files destroy reproducibility.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub h: usize,
    pub k: u64,
    pub delta: f64,
    pub c: f64,
    pub c_w: f64,
    pub r: f64,
    #[serde(default = "default_radius_scale")]
    pub radius_scale: f64,
    #[serde(default)]
    pub warmup_override: Option<u64>,
    pub search_budget: usize,
    #[serde(default = "default_warmup_bound")]
    pub warmup_control_bound: f64,
    pub seed: u64,
    pub n_seeds: u64,
    pub out_dir: PathBuf,
    /// Subspace dimensions to run the low-rank learner with.
    #[serde(default)]
    pub lowrank_m: Vec<usize>,
    /// Also run the unprojected baseline.
    #[serde(default)]
    pub fulldim: bool,
    /// Smallest covariance eigenvalue of the initial distribution; defaults
    /// to 1/(2 m_star) for the built-in sphere distribution.
    #[serde(default)]
    pub lambda_minus: Option<f64>,
    #[serde(default = "default_norm_cap")]
    pub norm_cap: f64,
    pub env: EnvSpec,
}

fn default_radius_scale() -> f64 {
    1.0
}

impl ExperimentConfig {
    pub fn d(&self) -> usize {
        match &self.env {
            EnvSpec::System(s) => s.d,
            EnvSpec::Generator { d, .. } => *d,
        }
    }

    pub fn d_u(&self) -> usize {
        match &self.env {
            EnvSpec::System(s) => s.d_u,
            EnvSpec::Generator { d_u, .. } => *d_u,
        }
    }

    /// True subspace dimension of the environment.
    pub fn m_star(&self) -> usize {
        match &self.env {
            EnvSpec::System(s) => s.m,
            EnvSpec::Generator { m, .. } => *m,
        }
    }

    pub fn lambda_minus(&self) -> f64 {
        self.lambda_minus
            .unwrap_or(1.0 / (2.0 * self.m_star() as f64))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_seeds < 1 {
            return Err(Error::Config("n_seeds must be >= 1".into()));
        }
        if self.lowrank_m.is_empty() && !self.fulldim {
            return Err(Error::Config(
                "no modes requested: set lowrank_m and/or fulldim".into(),
            ));
        }
        let d = self.d();
        for &m in &self.lowrank_m {
            if m < 1 || m > d {
                return Err(Error::Config(format!(
                    "lowrank_m entry {} outside [1, {}]",
                    m, d
                )));
            }
        }
        if self.m_star() < 1 || self.m_star() > d {
            return Err(Error::Config("environment m outside [1, d]".into()));
        }
        // Remaining constraints are shared with the learner; check them on a
        // representative mode so errors surface before any run starts.
        self.learner_config(self.mode_m(&self.modes()[0]), self.seed)
            .validate()
    }

    /// Build the true system for this experiment. Deterministic in the
    /// config seed; all modes and seeds share it.
    pub fn build_system(&self, cost: &CostSpec) -> Result<LowRankSystem> {
        match &self.env {
            EnvSpec::System(doc) => {
                let sys = LowRankSystem::from_json(doc)?;
                if (sys.r - self.r).abs() > 1e-9 || (sys.c - self.c).abs() > 1e-9 {
                    return Err(Error::Config(
                        "inline system r/C disagree with config r/c".into(),
                    ));
                }
                sys.check_invariants(cost)?;
                Ok(sys)
            }
            EnvSpec::Generator { d, d_u, m } => {
                make_lowrank_system(*d, *d_u, *m, self.r, self.c, cost, self.seed)
            }
        }
    }

    pub fn cost(&self) -> Result<CostSpec> {
        CostSpec::identity(self.d(), self.d_u(), self.h)
    }

    /// All requested (mode, label) pairs, low-rank sweeps first.
    pub fn modes(&self) -> Vec<ModeSpec> {
        let mut v: Vec<ModeSpec> = self
            .lowrank_m
            .iter()
            .map(|&m| ModeSpec::LowRank(m))
            .collect();
        if self.fulldim {
            v.push(ModeSpec::FullDim);
        }
        v
    }

    fn mode_m(&self, spec: &ModeSpec) -> usize {
        match spec {
            ModeSpec::LowRank(m) => *m,
            ModeSpec::FullDim => self.d(),
        }
    }

    pub fn learner_config(&self, m: usize, seed: u64) -> LearnerConfig {
        LearnerConfig {
            h: self.h,
            k: self.k,
            delta: self.delta,
            d: self.d(),
            d_u: self.d_u(),
            m,
            c: self.c,
            c_w: self.c_w,
            lambda_minus: self.lambda_minus(),
            r: self.r,
            radius_scale: self.radius_scale,
            warmup_override: self.warmup_override,
            search_budget: self.search_budget,
            warmup_control_bound: self.warmup_control_bound,
            seed,
            norm_cap: self.norm_cap,
        }
    }
}

/// A single learner variant within an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeSpec {
    LowRank(usize),
    FullDim,
}

impl ModeSpec {
    pub fn label(&self) -> String {
        match self {
            ModeSpec::LowRank(m) => format!("lowrank_m{}", m),
            ModeSpec::FullDim => "fulldim".to_string(),
        }
    }

    pub fn mode(&self) -> Mode {
        match self {
            ModeSpec::LowRank(_) => Mode::LowRank,
            ModeSpec::FullDim => Mode::FullDim,
        }
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)?;
    let config: ExperimentConfig = serde_json::from_str(&text)?;
    config.validate()?;
    Ok(config)
}

/// 17 significant digits: enough for f64 round-trips, stable across runs.
pub fn fmt_float(v: f64) -> String {
    format!("{:.16e}", v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub episode: u64,
    pub optimal_cost: f64,
    pub policy_cost: f64,
    pub regret: f64,
    pub cum_regret: f64,
    pub proj_err: f64,
    pub g: f64,
    pub beta: f64,
    pub truth_in_region: bool,
    pub delta_pp: f64,
    pub seed: u64,
    pub mode: String,
}

impl CsvRow {
    pub fn from_regret(row: &RegretRow, seed: u64, mode: &str) -> Self {
        CsvRow {
            episode: row.k,
            optimal_cost: row.j_opt,
            policy_cost: row.j_policy,
            regret: row.regret,
            cum_regret: row.cum_regret,
            proj_err: row.proj_err,
            g: row.g,
            beta: row.beta,
            truth_in_region: row.truth_in_region,
            delta_pp: row.delta_pp,
            seed,
            mode: mode.to_string(),
        }
    }
}

pub fn serialize_rows(rows: &[CsvRow]) -> String {
    let mut out = String::with_capacity(rows.len() * 128 + CSV_HEADER.len() + 1);
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.episode,
            fmt_float(r.optimal_cost),
            fmt_float(r.policy_cost),
            fmt_float(r.regret),
            fmt_float(r.cum_regret),
            fmt_float(r.proj_err),
            fmt_float(r.g),
            fmt_float(r.beta),
            r.truth_in_region,
            fmt_float(r.delta_pp),
            r.seed,
            r.mode
        );
    }
    out
}

pub fn parse_rows(text: &str) -> Result<Vec<CsvRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => {
            return Err(Error::CsvParse(format!(
                "bad header: {:?}",
                other.unwrap_or("")
            )))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 12 {
            return Err(Error::CsvParse(format!(
                "line {}: expected 12 fields, got {}",
                i + 2,
                parts.len()
            )));
        }
        let f = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::CsvParse(format!("line {}: bad float {:?}", i + 2, s)))
        };
        let u = |s: &str| -> Result<u64> {
            s.parse()
                .map_err(|_| Error::CsvParse(format!("line {}: bad integer {:?}", i + 2, s)))
        };
        rows.push(CsvRow {
            episode: u(parts[0])?,
            optimal_cost: f(parts[1])?,
            policy_cost: f(parts[2])?,
            regret: f(parts[3])?,
            cum_regret: f(parts[4])?,
            proj_err: f(parts[5])?,
            g: f(parts[6])?,
            beta: f(parts[7])?,
            truth_in_region: match parts[8] {
                "true" => true,
                "false" => false,
                other => {
                    return Err(Error::CsvParse(format!(
                        "line {}: bad bool {:?}",
                        i + 2,
                        other
                    )))
                }
            },
            delta_pp: f(parts[9])?,
            seed: u(parts[10])?,
            mode: parts[11].to_string(),
        });
    }
    Ok(rows)
}

/// Thread budget for parallel orchestration: `LOWRANK_LQR_THREADS`, else
/// the rayon default.
pub fn thread_budget() -> Option<usize> {
    std::env::var("LOWRANK_LQR_THREADS")
        .ok()
        .and_then(|s| s.parse().ok())
        .filter(|&n| n > 0)
}

#[cfg(feature = "parallel")]
fn for_each_run<T: Send, F: Fn(&(ModeSpec, u64)) -> Result<T> + Sync>(
    jobs: &[(ModeSpec, u64)],
    f: F,
) -> Result<Vec<T>> {
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_budget().unwrap_or(0))
        .build()
        .map_err(|e| Error::Numerical(format!("thread pool: {}", e)))?;
    pool.install(|| jobs.par_iter().map(|j| f(j)).collect())
}

#[cfg(not(feature = "parallel"))]
fn for_each_run<T: Send, F: Fn(&(ModeSpec, u64)) -> Result<T> + Sync>(
    jobs: &[(ModeSpec, u64)],
    f: F,
) -> Result<Vec<T>> {
    jobs.iter().map(|j| f(j)).collect()
}

#[derive(Debug)]
pub struct RunOutputs {
    pub run_paths: Vec<PathBuf>,
    pub aggregate_path: PathBuf,
}

/// Run every (mode, seed) combination, write one CSV per run and an
/// aggregate of mean cumulative regret per episode with one column per mode.
pub fn cmd_run(config: &ExperimentConfig) -> Result<RunOutputs> {
    config.validate()?;
    let cost = config.cost()?;
    let sys = config.build_system(&cost)?;
    fs::create_dir_all(&config.out_dir)?;

    let modes = config.modes();
    // All modes share the per-seed stream so mode comparisons are paired.
    let mut jobs = Vec::new();
    for spec in &modes {
        for si in 0..config.n_seeds {
            jobs.push((*spec, derive_seed(config.seed, &[0x52u64, si])));
        }
    }

    let records: Vec<(ModeSpec, u64, RegretRecord)> = for_each_run(&jobs, |(spec, seed)| {
        let lc = config.learner_config(config.mode_m(spec), *seed);
        let record = learner::run(&lc, &sys, &cost, spec.mode())?;
        Ok((*spec, *seed, record))
    })?;

    let mut run_paths = Vec::new();
    for (spec, seed, record) in &records {
        let label = spec.label();
        let rows: Vec<CsvRow> = record
            .iter()
            .map(|r| CsvRow::from_regret(r, *seed, &label))
            .collect();
        let path = config
            .out_dir
            .join(format!("run_{}_seed{}.csv", label, seed));
        fs::write(&path, serialize_rows(&rows))?;
        run_paths.push(path);
    }

    // Aggregate: episode column plus mean cum_regret per mode, so any pair
    // (episode, mode column) is directly plottable.
    let mut agg = String::new();
    agg.push_str("episode");
    for spec in &modes {
        agg.push(',');
        agg.push_str(&spec.label());
    }
    agg.push('\n');
    let kk = config.k as usize;
    let mut means = vec![vec![0.0f64; kk]; modes.len()];
    for (spec, _, record) in &records {
        let mi = modes.iter().position(|s| s == spec).unwrap();
        for (i, row) in record.iter().enumerate() {
            means[mi][i] += row.cum_regret;
        }
    }
    let n = config.n_seeds as f64;
    for col in &mut means {
        for v in col.iter_mut() {
            *v /= n;
        }
    }
    for i in 0..kk {
        let _ = write!(agg, "{}", i + 1);
        for col in &means {
            let _ = write!(agg, ",{}", fmt_float(col[i]));
        }
        agg.push('\n');
    }
    let aggregate_path = config.out_dir.join("aggregate.csv");
    fs::write(&aggregate_path, agg)?;

    Ok(RunOutputs {
        run_paths,
        aggregate_path,
    })
}

/// Eigenvalues (descending) of the unnormalized sample covariance of
/// `n_samples` initial states. Written as a single CSV line.
pub fn cmd_spectrum(config: &ExperimentConfig, n_samples: usize) -> Result<Vec<f64>> {
    let cost = config.cost()?;
    let sys = config.build_system(&cost)?;
    let dist = InitialDistribution {
        l_star: sys.l_star.clone(),
        lambda_minus: config.lambda_minus(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[0x5Eu64]));
    let d = sys.d();
    let mut s = DMatrix::<f64>::zeros(d, d);
    for _ in 0..n_samples {
        let x = sample_initial_state(&dist, &mut rng);
        s.syger(1.0, &x, &x, 1.0);
    }
    // syger fills the lower triangle; mirror it.
    for i in 0..d {
        for j in (i + 1)..d {
            s[(i, j)] = s[(j, i)];
        }
    }
    let mut eigs: Vec<f64> = s.symmetric_eigenvalues().iter().copied().collect();
    eigs.sort_by(|a, b| b.partial_cmp(a).unwrap());

    fs::create_dir_all(&config.out_dir)?;
    let line = eigs
        .iter()
        .map(|v| fmt_float(*v))
        .collect::<Vec<_>>()
        .join(",");
    fs::write(config.out_dir.join("spectrum.csv"), format!("{}\n", line))?;
    Ok(eigs)
}

#[derive(Debug, Clone)]
pub struct ProjectionPoint {
    pub k: u64,
    pub proj_err: f64,
    pub g: f64,
}

/// Run K random-control episodes, logging the projection error and the
/// radius G after each. G is NaN while the radius formula is undefined
/// (episode count below its validity threshold); the `proj_err <= G` check
/// is logged, never fatal.
pub fn cmd_diagnose_projection(config: &ExperimentConfig) -> Result<Vec<ProjectionPoint>> {
    let cost = config.cost()?;
    let sys = config.build_system(&cost)?;
    let m = *config
        .lowrank_m
        .first()
        .ok_or_else(|| Error::Config("diagnose-projection needs a lowrank_m entry".into()))?;
    let dist = InitialDistribution {
        l_star: sys.l_star.clone(),
        lambda_minus: config.lambda_minus(),
    };
    let noise = NoiseModel::new(config.c_w, sys.d())?;
    let p_star = sys.p_star();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[0xD1u64]));
    let mut buf = DataBuffer::new(sys.d(), sys.d_u());
    let mut points = Vec::with_capacity(config.k as usize);

    for k in 1..=config.k {
        let x1 = sample_initial_state(&dist, &mut rng);
        let trace = random_control_episode(&sys, &cost, &noise, config, x1, &mut rng, k)?;
        buf.append_episode(&trace)?;
        let proj = learn_projection(&buf, m, sys.d_u())?;
        let proj_err = spectral_norm(&(&proj.p - &p_star));
        let g = match confidence_radii(
            k,
            config.h,
            config.delta,
            sys.d(),
            m,
            config.c,
            config.c_w,
            config.lambda_minus(),
            config.radius_scale,
        ) {
            Ok((g, _)) => g,
            Err(Error::RadiiUndefined { .. }) => f64::NAN,
            Err(e) => return Err(e),
        };
        points.push(ProjectionPoint { k, proj_err, g });
    }

    fs::create_dir_all(&config.out_dir)?;
    let mut out = String::from("k,proj_err,G\n");
    for p in &points {
        let _ = writeln!(out, "{},{},{}", p.k, fmt_float(p.proj_err), fmt_float(p.g));
    }
    fs::write(config.out_dir.join("projection.csv"), out)?;
    Ok(points)
}

fn random_control_episode(
    sys: &LowRankSystem,
    cost: &CostSpec,
    noise: &NoiseModel,
    config: &ExperimentConfig,
    x1: DVector<f64>,
    rng: &mut impl Rng,
    k: u64,
) -> Result<crate::env::EpisodeTrace> {
    let hh = cost.horizon();
    let mut states = Vec::with_capacity(hh);
    let mut controls = Vec::with_capacity(hh - 1);
    let mut step_costs = Vec::with_capacity(hh);
    let mut x = x1;
    for h in 1..hh {
        let u = learner::warmup_control(config.warmup_control_bound, sys.d_u(), rng);
        step_costs.push(crate::control::step_cost(&x, &u, cost.q(h), cost.r(h))?);
        let next = crate::env::step(sys, &x, &u, noise, rng)?;
        states.push(x);
        controls.push(u);
        x = next;
    }
    step_costs.push(crate::util::quad_form(&x, cost.q(hh)));
    states.push(x);
    Ok(crate::env::EpisodeTrace {
        states,
        controls,
        step_costs,
        k,
    })
}

/// Run `n_trials` independent seeded experiments and report how many had
/// the truth inside the confidence region at the final episode.
pub fn cmd_coverage(config: &ExperimentConfig, n_trials: u64) -> Result<(u64, u64)> {
    config.validate()?;
    let cost = config.cost()?;
    let sys = config.build_system(&cost)?;
    let m = *config
        .lowrank_m
        .first()
        .ok_or_else(|| Error::Config("coverage needs a lowrank_m entry".into()))?;

    let jobs: Vec<(ModeSpec, u64)> = (0..n_trials)
        .map(|t| {
            (
                ModeSpec::LowRank(m),
                derive_seed(config.seed, &[0xC0u64, t]),
            )
        })
        .collect();
    let results: Vec<bool> = for_each_run(&jobs, |(_, seed)| {
        let lc = config.learner_config(m, *seed);
        let record = learner::run(&lc, &sys, &cost, Mode::LowRank)?;
        Ok(record.last().map(|r| r.truth_in_region).unwrap_or(false))
    })?;
    let covered = results.iter().filter(|&&b| b).count() as u64;
    Ok((covered, n_trials))
}

#[derive(Debug, Clone)]
pub struct RiccatiCase {
    pub index: usize,
    pub analytic: f64,
    pub mc_mean: f64,
    pub mc_se: f64,
    pub pass: bool,
    pub system_json: String,
}

/// Monte Carlo cross-check of the Riccati cost formula on random systems:
/// each case simulates 10^4 trajectories under the optimal gains and
/// compares the sample mean against `optimal_cost` at 4 standard errors.
pub fn cmd_verify_riccati(seed: u64, n_cases: usize) -> Result<Vec<RiccatiCase>> {
    const TRAJECTORIES: usize = 10_000;
    let mut cases = Vec::with_capacity(n_cases);
    for i in 0..n_cases {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xF1u64, i as u64]));
        let d = rng.gen_range(2..=6usize);
        let d_u = rng.gen_range(1..=3usize);
        let m = rng.gen_range(1..=d);
        let h = rng.gen_range(3..=8usize);
        // Every third case is noiseless: the comparison is then exact.
        let c_w = if i % 3 == 0 {
            0.0
        } else {
            0.02 + 0.03 * rng.gen::<f64>()
        };
        let cost = CostSpec::identity(d, d_u, h)?;
        let sys = make_lowrank_system(
            d,
            d_u,
            m,
            0.9,
            1.0,
            &cost,
            derive_seed(seed, &[0xF2, i as u64]),
        )?;
        let noise = NoiseModel::new(c_w, d)?;
        let sol = riccati_solve(&sys.dynamics, &cost, &noise)?;
        let dist = InitialDistribution::for_system(&sys);
        let x1 = sample_initial_state(&dist, &mut rng);
        let analytic = optimal_cost(&sol, &x1, 1)?;

        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for t in 0..TRAJECTORIES {
            let trace = run_episode_from(
                &sys,
                x1.clone(),
                &sol.gains,
                &cost,
                &noise,
                &mut rng,
                t as u64,
            )?;
            let total: f64 = trace.step_costs.iter().sum();
            sum += total;
            sumsq += total * total;
        }
        let n = TRAJECTORIES as f64;
        let mean = sum / n;
        let var = (sumsq / n - mean * mean).max(0.0);
        let se = (var / n).sqrt();
        let tol = (4.0 * se).max(1e-9);
        let pass = (mean - analytic).abs() <= tol;
        let system_json = if pass {
            String::new()
        } else {
            serde_json::to_string(&sys.to_json())?
        };
        cases.push(RiccatiCase {
            index: i,
            analytic,
            mc_mean: mean,
            mc_se: se,
            pass,
            system_json,
        });
    }
    Ok(cases)
}
