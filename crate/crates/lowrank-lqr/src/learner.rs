//! The OFU episode loop: warm-up exploration, optimistic model selection by
//! random search inside the confidence region, policy synthesis, episode
//! execution, and regret accounting. Also hosts the full-dimension baseline
//! (projection forced to the identity).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::control::{
    optimal_cost, policy_cost, riccati_solve, CostSpec, NoiseModel, SystemDynamics,
};
use crate::env::{
    run_episode_from, sample_initial_state, step, EpisodeTrace, InitialDistribution, LowRankSystem,
};
use crate::error::{Error, Result};
use crate::estimator::{
    c_max, confidence_radii_split, estimate_dynamics, in_confidence, k_min, learn_projection,
    projected_gram, ConfidenceRegion, DataBuffer, ProjectionPair,
};
use crate::util::{ols_slope, quad_form, spectral_norm};

#[derive(Debug, Clone)]
pub struct LearnerConfig {
    pub h: usize,
    pub k: u64,
    pub delta: f64,
    pub d: usize,
    pub d_u: usize,
    pub m: usize,
    pub c: f64,
    pub c_w: f64,
    pub lambda_minus: f64,
    pub r: f64,
    pub radius_scale: f64,
    /// Practical warm-up length replacing the (astronomically conservative)
    /// K_min formula when set.
    pub warmup_override: Option<u64>,
    /// Candidate count per episode for the optimistic random search.
    pub search_budget: usize,
    pub warmup_control_bound: f64,
    pub seed: u64,
    /// Cap for the C* membership constraint `||M||_2 <= norm_cap`.
    pub norm_cap: f64,
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        if 2.0 * self.c_w + self.r > 1.0 + 1e-12 {
            return Err(Error::Config(format!(
                "need 2 C_w + r <= 1, got {}",
                2.0 * self.c_w + self.r
            )));
        }
        if !(0.0..1.0).contains(&self.delta) || self.delta == 0.0 {
            return Err(Error::Config(format!("delta={} outside (0,1)", self.delta)));
        }
        if self.search_budget < 1 {
            return Err(Error::Config("search_budget must be >= 1".into()));
        }
        if self.m > self.d {
            return Err(Error::Config(format!("m={} exceeds d={}", self.m, self.d)));
        }
        if self.h < 2 {
            return Err(Error::Config("horizon must be >= 2".into()));
        }
        if self.lambda_minus <= 0.0 {
            return Err(Error::Config("lambda_minus must be positive".into()));
        }
        Ok(())
    }

    pub fn warmup_episodes(&self) -> u64 {
        self.warmup_override.unwrap_or_else(|| {
            k_min(
                self.h,
                self.delta,
                self.m,
                self.d,
                c_max(self.c_w),
                self.lambda_minus,
            )
        })
    }
}

/// Which learner variant to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// PCA-projected rank-m estimation with both confidence constraints.
    LowRank,
    /// OFU without the projection: P = I, the perpendicular constraint is
    /// vacuous, and the self-normalized noise term uses d instead of m.
    FullDim,
}

/// One per-episode accounting row.
#[derive(Debug, Clone)]
pub struct RegretRow {
    pub k: u64,
    pub j_opt: f64,
    pub j_policy: f64,
    pub regret: f64,
    pub cum_regret: f64,
    pub proj_err: f64,
    pub g: f64,
    pub beta: f64,
    pub truth_in_region: bool,
    pub delta_pp: f64,
}

pub type RegretRecord = Vec<RegretRow>;

/// Uniform draw from the ball of radius `bound`.
pub fn warmup_control(bound: f64, d_u: usize, rng: &mut impl Rng) -> DVector<f64> {
    if bound == 0.0 {
        return DVector::zeros(d_u);
    }
    let mut g = DVector::from_fn(d_u, |_, _| standard_normal(rng));
    let mut n = g.norm();
    while n == 0.0 {
        g = DVector::from_fn(d_u, |_, _| standard_normal(rng));
        n = g.norm();
    }
    let radius = bound * rng.gen::<f64>().powf(1.0 / d_u as f64);
    g * (radius / n)
}

fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Exact expected episode cost of the warm-up policy (controls drawn
/// independently, uniform in the ball): forward propagation of the state
/// second moment with `E[u u^T] = b^2/(d_u + 2) I`.
pub fn warmup_policy_cost(
    dynamics: &SystemDynamics,
    cost: &CostSpec,
    noise: &NoiseModel,
    bound: f64,
    x1: &DVector<f64>,
) -> f64 {
    let hh = cost.horizon();
    let d = dynamics.d();
    let du = dynamics.d_u();
    let sigma2_u = bound * bound / (du as f64 + 2.0);
    let sigma2_w = noise.sigma2();
    let bbt = &dynamics.b * dynamics.b.transpose();
    let mut second = x1 * x1.transpose();
    let mut total = 0.0;
    for h in 1..=hh {
        total += (cost.q(h) * &second).trace();
        if h < hh {
            total += sigma2_u * cost.r(h).trace();
            let a_s = &dynamics.a * &second;
            second = &a_s * dynamics.a.transpose()
                + &bbt * sigma2_u
                + DMatrix::identity(d, d) * sigma2_w;
        }
    }
    total
}

/// Score a candidate: its optimal cost-to-go from `x1` if it were the truth.
fn score_candidate(
    cand: &DMatrix<f64>,
    d_u: usize,
    cost: &CostSpec,
    noise: &NoiseModel,
    x1: &DVector<f64>,
) -> Option<f64> {
    let dynamics = SystemDynamics::from_concat(cand, d_u).ok()?;
    let sol = riccati_solve(&dynamics, cost, noise).ok()?;
    optimal_cost(&sol, x1, 1).ok()
}

/// Sequential candidate scoring (always available; benchmark baseline).
pub fn score_candidates_seq(
    cands: &[DMatrix<f64>],
    d_u: usize,
    cost: &CostSpec,
    noise: &NoiseModel,
    x1: &DVector<f64>,
) -> Vec<Option<f64>> {
    cands
        .iter()
        .map(|c| score_candidate(c, d_u, cost, noise, x1))
        .collect()
}

/// Candidate scoring: a pure map, parallelized when the `parallel` feature
/// is enabled. Results are independent of evaluation order.
#[cfg(feature = "parallel")]
pub fn score_candidates(
    cands: &[DMatrix<f64>],
    d_u: usize,
    cost: &CostSpec,
    noise: &NoiseModel,
    x1: &DVector<f64>,
) -> Vec<Option<f64>> {
    use rayon::prelude::*;
    cands
        .par_iter()
        .map(|c| score_candidate(c, d_u, cost, noise, x1))
        .collect()
}

#[cfg(not(feature = "parallel"))]
pub fn score_candidates(
    cands: &[DMatrix<f64>],
    d_u: usize,
    cost: &CostSpec,
    noise: &NoiseModel,
    x1: &DVector<f64>,
) -> Vec<Option<f64>> {
    score_candidates_seq(cands, d_u, cost, noise, x1)
}

/// Rescale `m_k` into the norm cap.
fn clip_to_cap(m_k: &DMatrix<f64>, norm_cap: f64) -> DMatrix<f64> {
    let n = spectral_norm(m_k);
    if n > norm_cap && n > 0.0 {
        m_k * (norm_cap / n)
    } else {
        m_k.clone()
    }
}

/// Generate the candidate set for the optimistic search: the clipped center
/// plus `n_s` perturbations split into a Gram-weighted parallel part and a
/// spectral-norm-bounded perpendicular part. When a radius is infinite (the
/// formula regime has not kicked in) sampling falls back to a finite scale
/// tied to the norm cap so candidates stay inside C*.
fn generate_candidates(
    region: &ConfidenceRegion,
    n_s: usize,
    rng: &mut impl Rng,
) -> Vec<DMatrix<f64>> {
    let d = region.m_k.nrows();
    let p = region.m_k.ncols();
    let mut cands = Vec::with_capacity(n_s + 1);
    cands.push(clip_to_cap(&region.m_k, region.norm_cap));

    let beta_cap = if region.beta.is_finite() {
        region.beta
    } else {
        let vs = spectral_norm(&region.v_sqrt);
        (2.0 * region.norm_cap * vs).powi(2)
    };

    // Deviations stay parallel to the learned subspace: perpendicular
    // perturbations cost regret and carry no information the projected
    // estimator can use.
    for _ in 0..n_s {
        let e1 = DMatrix::from_fn(d, p, |_, _| standard_normal(rng));
        let rho: f64 = rng.gen();

        let mut cand = cands[0].clone();
        cand.copy_from(&region.m_k);

        let e_par_raw = &e1 * &region.proj.p_aug;
        let s = spectral_norm(&(&e_par_raw * &region.v_sqrt));
        if s > 0.0 {
            cand += e_par_raw * ((rho * beta_cap).sqrt() / s);
        }
        cands.push(cand);
    }
    cands
}

/// Optimistic model selection: among surviving candidates, the one with the
/// smallest optimal cost-to-go from `x1`, ties broken by lowest index. The
/// clipped center always survives, so the result is defined.
#[allow(clippy::too_many_arguments)]
pub fn optimistic_search(
    region: &ConfidenceRegion,
    x1: &DVector<f64>,
    cost: &CostSpec,
    noise: &NoiseModel,
    n_s: usize,
    rng: &mut impl Rng,
    inject_truth: Option<&DMatrix<f64>>,
) -> Result<(DMatrix<f64>, f64)> {
    let d = region.m_k.nrows();
    let p = region.m_k.ncols();
    let d_u = p - d;
    let mut cands = generate_candidates(region, n_s, rng);
    if let Some(truth) = inject_truth {
        cands.push(truth.clone());
    }
    let survivors: Vec<DMatrix<f64>> = cands
        .into_iter()
        .filter(|c| in_confidence(c, region))
        .collect();
    let scores = score_candidates(&survivors, d_u, cost, noise, x1);

    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.iter().enumerate() {
        if let Some(v) = s {
            match best {
                Some((_, bv)) if *v >= bv => {}
                _ => best = Some((i, *v)),
            }
        }
    }
    let (idx, val) = best
        .ok_or_else(|| Error::Numerical("no scorable candidate in the confidence region".into()))?;
    Ok((survivors[idx].clone(), val))
}

/// Full Algorithm-1 run: warm-up with random bounded controls, then per
/// episode learn the projection, estimate the dynamics, build the confidence
/// region, pick an optimistic model, and play its Riccati policy.
///
/// Regret rows are exact expectations: `J_opt` and `J_policy` are evaluated
/// analytically against the true system.
pub fn run(
    config: &LearnerConfig,
    sys: &LowRankSystem,
    cost: &CostSpec,
    mode: Mode,
) -> Result<RegretRecord> {
    config.validate()?;
    if sys.d() != config.d || sys.d_u() != config.d_u {
        return Err(Error::DimensionMismatch(format!(
            "system is ({}, {}), config says ({}, {})",
            sys.d(),
            sys.d_u(),
            config.d,
            config.d_u
        )));
    }
    if cost.horizon() != config.h {
        return Err(Error::DimensionMismatch("cost horizon != config.h".into()));
    }
    let d = config.d;
    let d_u = config.d_u;
    let noise = NoiseModel::new(config.c_w, d)?;
    let dist = InitialDistribution {
        l_star: sys.l_star.clone(),
        lambda_minus: config.lambda_minus,
    };
    let p_star = sys.p_star();
    let m_star = sys.dynamics.concat();
    let true_sol = riccati_solve(&sys.dynamics, cost, &noise)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut buf = DataBuffer::new(d, d_u);
    let mut rows = Vec::with_capacity(config.k as usize);
    let mut cum_regret = 0.0;
    let mut cum_delta_pp = 0.0;
    let k_warm = config.warmup_episodes();

    for k in 1..=config.k {
        let x1 = sample_initial_state(&dist, &mut rng);
        let j_opt = optimal_cost(&true_sol, &x1, 1)?;

        let (trace, j_policy, proj_err, g, beta, truth_in) = if k <= k_warm {
            let trace = warmup_episode(sys, cost, &noise, config, x1.clone(), &mut rng, k)?;
            let j_policy = warmup_policy_cost(
                &sys.dynamics,
                cost,
                &noise,
                config.warmup_control_bound,
                &x1,
            );
            let proj_err = warmup_proj_err(&buf, config, mode, &p_star, d_u);
            (trace, j_policy, proj_err, f64::NAN, f64::NAN, false)
        } else {
            let proj = match mode {
                Mode::FullDim => ProjectionPair::identity(d, d_u),
                Mode::LowRank => learn_projection(&buf, config.m, d_u)?,
            };
            let proj_err = spectral_norm(&(&proj.p - &p_star));
            let gram = projected_gram(&buf, &proj)?;
            let m_k = estimate_dynamics(&buf, &proj, &gram);
            let m_gprime = match mode {
                Mode::LowRank => config.m,
                Mode::FullDim => d,
            };
            let (g, beta) = match confidence_radii_split(
                k,
                config.h,
                config.delta,
                d,
                config.m,
                m_gprime,
                config.c,
                config.c_w,
                config.lambda_minus,
                config.radius_scale,
            ) {
                Ok((g, beta)) => (g, beta),
                // Below the formula's validity threshold, fall back to the
                // simplified denominator that keeps the 1/sqrt(k) rate.
                Err(Error::RadiiUndefined { .. }) => crate::estimator::fallback_radii(
                    k,
                    config.h,
                    config.delta,
                    d,
                    m_gprime,
                    config.c,
                    config.c_w,
                    config.lambda_minus,
                    config.radius_scale,
                ),
                Err(e) => return Err(e),
            };
            let g = match mode {
                Mode::FullDim => f64::INFINITY,
                Mode::LowRank => g,
            };
            let region = ConfidenceRegion::new(m_k, proj, gram.v.clone(), g, beta, config.norm_cap);
            let (m_tilde, _j_tilde) = optimistic_search(
                &region,
                &x1,
                cost,
                &noise,
                config.search_budget,
                &mut rng,
                None,
            )?;
            let tilde_dyn = SystemDynamics::from_concat(&m_tilde, d_u)?;
            let tilde_sol = riccati_solve(&tilde_dyn, cost, &noise)?;
            let trace =
                run_episode_from(sys, x1.clone(), &tilde_sol.gains, cost, &noise, &mut rng, k)?;
            cum_delta_pp += delta_pp_increment(&trace, &m_star, &m_tilde, &tilde_sol.psi);
            let j_policy = policy_cost(&sys.dynamics, &tilde_sol.gains, cost, &noise, &x1)?;
            let truth_in = in_confidence(&m_star, &region);
            (trace, j_policy, proj_err, region.g, region.beta, truth_in)
        };

        buf.append_episode(&trace)?;
        let regret = j_policy - j_opt;
        cum_regret += regret;
        rows.push(RegretRow {
            k,
            j_opt,
            j_policy,
            regret,
            cum_regret,
            proj_err,
            g,
            beta,
            truth_in_region: truth_in,
            delta_pp: cum_delta_pp,
        });
    }
    Ok(rows)
}

fn warmup_episode(
    sys: &LowRankSystem,
    cost: &CostSpec,
    noise: &NoiseModel,
    config: &LearnerConfig,
    x1: DVector<f64>,
    rng: &mut impl Rng,
    k: u64,
) -> Result<EpisodeTrace> {
    let hh = cost.horizon();
    let mut states = Vec::with_capacity(hh);
    let mut controls = Vec::with_capacity(hh - 1);
    let mut step_costs = Vec::with_capacity(hh);
    let mut x = x1;
    for h in 1..hh {
        let u = warmup_control(config.warmup_control_bound, config.d_u, rng);
        step_costs.push(crate::control::step_cost(&x, &u, cost.q(h), cost.r(h))?);
        let next = step(sys, &x, &u, noise, rng)?;
        states.push(x);
        controls.push(u);
        x = next;
    }
    step_costs.push(quad_form(&x, cost.q(hh)));
    states.push(x);
    Ok(EpisodeTrace {
        states,
        controls,
        step_costs,
        k,
    })
}

fn warmup_proj_err(
    buf: &DataBuffer,
    config: &LearnerConfig,
    mode: Mode,
    p_star: &DMatrix<f64>,
    d_u: usize,
) -> f64 {
    match mode {
        Mode::FullDim => spectral_norm(&(DMatrix::identity(config.d, config.d) - p_star)),
        Mode::LowRank => {
            if buf.n() == 0 {
                f64::NAN
            } else {
                match learn_projection(buf, config.m, d_u) {
                    Ok(proj) => spectral_norm(&(&proj.p - p_star)),
                    Err(_) => f64::NAN,
                }
            }
        }
    }
}

/// Cumulative optimism diagnostic: sum over steps of
/// `(M* z)^T Psi~_{h+1} (M* z) - (M~ z)^T Psi~_{h+1} (M~ z)`.
fn delta_pp_increment(
    trace: &EpisodeTrace,
    m_star: &DMatrix<f64>,
    m_tilde: &DMatrix<f64>,
    psi_tilde: &[DMatrix<f64>],
) -> f64 {
    let mut total = 0.0;
    for h in 0..trace.controls.len() {
        let mut z = DVector::zeros(m_star.ncols());
        z.rows_mut(0, trace.states[h].len())
            .copy_from(&trace.states[h]);
        z.rows_mut(trace.states[h].len(), trace.controls[h].len())
            .copy_from(&trace.controls[h]);
        let psi = &psi_tilde[h + 1];
        let vs = m_star * &z;
        let vt = m_tilde * &z;
        total += quad_form(&vs, psi) - quad_form(&vt, psi);
    }
    total
}

/// Least-squares slope of `log(cum_regret)` against `log(k)` over the
/// episode window `[k_lo, k_hi]`.
pub fn regret_slope(record: &[RegretRow], k_lo: u64, k_hi: u64) -> Result<f64> {
    if k_lo < 1 || k_lo >= k_hi {
        return Err(Error::Config(format!("bad window [{}, {}]", k_lo, k_hi)));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for row in record {
        if row.k >= k_lo && row.k <= k_hi {
            if row.cum_regret <= 0.0 {
                return Err(Error::Numerical(format!(
                    "nonpositive cumulative regret at k={}",
                    row.k
                )));
            }
            xs.push((row.k as f64).ln());
            ys.push(row.cum_regret.ln());
        }
    }
    if xs.len() < 2 {
        return Err(Error::Config("window covers fewer than 2 episodes".into()));
    }
    Ok(ols_slope(&xs, &ys))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::make_lowrank_system;

    fn test_config(d: usize, d_u: usize, m: usize, h: usize, k: u64, seed: u64) -> LearnerConfig {
        LearnerConfig {
            h,
            k,
            delta: 0.05,
            d,
            d_u,
            m,
            c: 1.0,
            c_w: 0.05,
            lambda_minus: 1.0 / (2.0 * m as f64),
            r: 0.9,
            radius_scale: 0.001,
            warmup_override: Some(5),
            search_budget: 4,
            warmup_control_bound: 0.3,
            seed,
            norm_cap: 1.0,
        }
    }

    #[test]
    fn warmup_control_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(warmup_control(0.0, 3, &mut rng), DVector::zeros(3));
        let mut mean = DVector::zeros(3);
        let n = 10_000;
        for _ in 0..n {
            let u = warmup_control(0.7, 3, &mut rng);
            assert!(u.norm() <= 0.7 + 1e-12);
            mean += u;
        }
        mean /= n as f64;
        // E||u||^2 = b^2 * 3/5; per-coordinate sigma ~ b/sqrt(5).
        let se = 3.0 * 0.7 / (5.0f64 * n as f64).sqrt();
        for v in mean.iter() {
            assert!(v.abs() < se, "mean coord {}", v);
        }
    }

    #[test]
    fn warmup_policy_cost_matches_monte_carlo() {
        let cost = CostSpec::identity(3, 2, 5).unwrap();
        let sys = make_lowrank_system(3, 2, 2, 0.8, 1.0, &cost, 3).unwrap();
        let noise = NoiseModel::new(0.1, 3).unwrap();
        let bound = 0.4;
        let x1 = crate::env::sample_initial_state(
            &InitialDistribution::for_system(&sys),
            &mut ChaCha8Rng::seed_from_u64(9),
        );
        let analytic = warmup_policy_cost(&sys.dynamics, &cost, &noise, bound, &x1);

        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let n = 200_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let mut x = x1.clone();
            let mut total = 0.0;
            for h in 1..5 {
                let u = warmup_control(bound, 2, &mut rng);
                total += crate::control::step_cost(&x, &u, cost.q(h), cost.r(h)).unwrap();
                x = step(&sys, &x, &u, &noise, &mut rng).unwrap();
            }
            total += quad_form(&x, cost.q(5));
            sum += total;
            sumsq += total * total;
        }
        let mean = sum / n as f64;
        let var = (sumsq / n as f64 - mean * mean).max(0.0);
        let se = (var / n as f64).sqrt();
        assert!(
            (mean - analytic).abs() < 4.0 * se,
            "MC {} vs analytic {} (se {})",
            mean,
            analytic,
            se
        );
    }

    fn toy_region(d: usize, d_u: usize, seed: u64) -> (ConfidenceRegion, LowRankSystem, CostSpec) {
        let cost = CostSpec::identity(d, d_u, 4).unwrap();
        let sys = make_lowrank_system(d, d_u, d.min(2), 0.9, 1.0, &cost, seed).unwrap();
        let noise = NoiseModel::new(0.05, d).unwrap();
        let config = test_config(d, d_u, d.min(2), 4, 8, seed);
        let dist = InitialDistribution::for_system(&sys);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut buf = DataBuffer::new(d, d_u);
        let sol = riccati_solve(&sys.dynamics, &cost, &noise).unwrap();
        for k in 0..6 {
            let trace =
                crate::env::run_episode(&sys, &sol.gains, &dist, &cost, &noise, &mut rng, k)
                    .unwrap();
            buf.append_episode(&trace).unwrap();
        }
        let proj = learn_projection(&buf, config.m, d_u).unwrap();
        let gram = projected_gram(&buf, &proj).unwrap();
        let m_k = estimate_dynamics(&buf, &proj, &gram);
        let region = ConfidenceRegion::new(m_k, proj, gram.v.clone(), 0.5, 5.0, 1.0);
        (region, sys, cost)
    }

    #[test]
    fn search_returns_clip_when_budget_zero() {
        let (region, _sys, cost) = toy_region(3, 1, 5);
        let noise = NoiseModel::new(0.05, 3).unwrap();
        let x1 = DVector::from_element(3, 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (m, _) = optimistic_search(&region, &x1, &cost, &noise, 0, &mut rng, None).unwrap();
        assert_eq!(m, clip_to_cap(&region.m_k, region.norm_cap));
    }

    #[test]
    fn search_degenerate_radius_returns_clip() {
        let (mut region, _sys, cost) = toy_region(3, 1, 6);
        region.g = 0.0;
        region.beta = 0.0;
        let noise = NoiseModel::new(0.05, 3).unwrap();
        let x1 = DVector::from_element(3, 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (m, _) = optimistic_search(&region, &x1, &cost, &noise, 8, &mut rng, None).unwrap();
        assert_eq!(m, clip_to_cap(&region.m_k, region.norm_cap));
    }

    #[test]
    fn search_with_injected_truth_is_optimistic() {
        let (region, sys, cost) = toy_region(3, 1, 7);
        let noise = NoiseModel::new(0.05, 3).unwrap();
        let x1 = DVector::from_element(3, 0.1);
        let truth = sys.dynamics.concat();
        if !in_confidence(&truth, &region) {
            // Enlarge until the truth is inside so the argmin argument holds.
            let mut region = region.clone();
            region.g = f64::INFINITY;
            region.beta = f64::INFINITY;
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let (_, j_tilde) =
                optimistic_search(&region, &x1, &cost, &noise, 16, &mut rng, Some(&truth)).unwrap();
            let j_truth = score_candidate(&truth, 1, &cost, &noise, &x1).unwrap();
            assert!(j_tilde <= j_truth + 1e-12);
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let (_, j_tilde) =
                optimistic_search(&region, &x1, &cost, &noise, 16, &mut rng, Some(&truth)).unwrap();
            let j_truth = score_candidate(&truth, 1, &cost, &noise, &x1).unwrap();
            assert!(j_tilde <= j_truth + 1e-12);
        }
    }

    #[test]
    fn run_warmup_only() {
        let cost = CostSpec::identity(4, 2, 4).unwrap();
        let sys = make_lowrank_system(4, 2, 2, 0.9, 1.0, &cost, 8).unwrap();
        let mut config = test_config(4, 2, 2, 4, 5, 8);
        config.warmup_override = Some(5);
        let record = run(&config, &sys, &cost, Mode::LowRank).unwrap();
        assert_eq!(record.len(), 5);
        assert!(record.iter().all(|r| r.g.is_nan() && r.beta.is_nan()));
    }

    #[test]
    fn run_regret_nonnegative_and_deterministic() {
        let cost = CostSpec::identity(4, 2, 4).unwrap();
        let sys = make_lowrank_system(4, 2, 2, 0.9, 1.0, &cost, 12).unwrap();
        let config = test_config(4, 2, 2, 4, 30, 12);
        let r1 = run(&config, &sys, &cost, Mode::LowRank).unwrap();
        let r2 = run(&config, &sys, &cost, Mode::LowRank).unwrap();
        for (a, b) in r1.iter().zip(&r2) {
            assert_eq!(a.j_policy.to_bits(), b.j_policy.to_bits());
            assert_eq!(a.cum_regret.to_bits(), b.cum_regret.to_bits());
        }
        for row in &r1 {
            assert!(row.regret >= -1e-8, "regret {} at k={}", row.regret, row.k);
        }
        let mut prev = 0.0;
        for row in &r1 {
            assert!(row.cum_regret >= prev - 1e-8);
            prev = row.cum_regret;
        }
    }

    #[test]
    fn fulldim_reduction_matches_lowrank_at_m_eq_d() {
        // With m = d the learned projection is the identity, so both modes
        // produce the same estimate on the same data.
        let cost = CostSpec::identity(3, 3, 4).unwrap();
        let sys = make_lowrank_system(3, 3, 3, 0.9, 1.0, &cost, 14).unwrap();
        let noise = NoiseModel::new(0.05, 3).unwrap();
        let dist = InitialDistribution::for_system(&sys);
        let sol = riccati_solve(&sys.dynamics, &cost, &noise).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut buf = DataBuffer::new(3, 3);
        for k in 0..8 {
            let trace =
                crate::env::run_episode(&sys, &sol.gains, &dist, &cost, &noise, &mut rng, k)
                    .unwrap();
            buf.append_episode(&trace).unwrap();
        }
        let proj_lr = learn_projection(&buf, 3, 3).unwrap();
        let proj_fd = ProjectionPair::identity(3, 3);
        let g_lr = projected_gram(&buf, &proj_lr).unwrap();
        let g_fd = projected_gram(&buf, &proj_fd).unwrap();
        let m_lr = estimate_dynamics(&buf, &proj_lr, &g_lr);
        let m_fd = estimate_dynamics(&buf, &proj_fd, &g_fd);
        assert!((m_lr - m_fd).norm() < 1e-9);
    }

    #[test]
    fn regret_slope_synthetic() {
        let make = |f: &dyn Fn(f64) -> f64| -> RegretRecord {
            (1..=100)
                .map(|k| RegretRow {
                    k,
                    j_opt: 0.0,
                    j_policy: 0.0,
                    regret: 0.0,
                    cum_regret: f(k as f64),
                    proj_err: 0.0,
                    g: 0.0,
                    beta: 0.0,
                    truth_in_region: true,
                    delta_pp: 0.0,
                })
                .collect()
        };
        let sqrt = make(&|k| 3.0 * k.sqrt());
        assert!((regret_slope(&sqrt, 10, 100).unwrap() - 0.5).abs() < 1e-9);
        let lin = make(&|k| 2.0 * k);
        assert!((regret_slope(&lin, 10, 100).unwrap() - 1.0).abs() < 1e-9);
        let konst = make(&|_| 5.0);
        assert!(regret_slope(&konst, 10, 100).unwrap().abs() < 1e-9);
        let zero = make(&|_| 0.0);
        assert!(regret_slope(&zero, 10, 100).is_err());
    }
}
