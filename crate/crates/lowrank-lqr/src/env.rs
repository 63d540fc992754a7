//! Synthetic rank-m-controllable systems and seeded episode simulation.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::control::{
    gain_stability_margin, riccati_solve, step_cost, CostSpec, NoiseModel, SystemDynamics,
};
use crate::error::{Error, Result};
use crate::util::{derive_seed, spectral_norm};

const MAX_GENERATION_ATTEMPTS: usize = 100;
const RANK_TOLERANCE: f64 = 1e-8;

/// A rank-m-controllable system: dynamics plus the true subspace basis.
#[derive(Debug, Clone)]
pub struct LowRankSystem {
    pub dynamics: SystemDynamics,
    /// d x m orthonormal basis of the true subspace.
    pub l_star: DMatrix<f64>,
    /// Contraction bound on the optimal closed loop.
    pub r: f64,
    /// Norm cap on `M = [A B]`.
    pub c: f64,
}

impl LowRankSystem {
    pub fn d(&self) -> usize {
        self.dynamics.d()
    }

    pub fn d_u(&self) -> usize {
        self.dynamics.d_u()
    }

    pub fn m(&self) -> usize {
        self.l_star.ncols()
    }

    /// True projector `P* = L L^T`.
    pub fn p_star(&self) -> DMatrix<f64> {
        &self.l_star * self.l_star.transpose()
    }

    /// Augmented projector `[[P*, 0], [0, I_{d_u}]]`.
    pub fn p_star_aug(&self) -> DMatrix<f64> {
        let d = self.d();
        let du = self.d_u();
        let mut p = DMatrix::zeros(d + du, d + du);
        p.view_mut((0, 0), (d, d)).copy_from(&self.p_star());
        p.view_mut((d, d), (du, du))
            .copy_from(&DMatrix::identity(du, du));
        p
    }

    /// Re-check the construction postconditions as assertions.
    pub fn check_invariants(&self, cost: &CostSpec) -> Result<()> {
        let p = self.p_star();
        let idem = (&p * &p - &p).norm();
        if idem > 1e-10 {
            return Err(Error::Numerical(format!("P* not idempotent: {}", idem)));
        }
        let a = &self.dynamics.a;
        let b = &self.dynamics.b;
        if (&p * a * &p - a).norm() > 1e-9 || (&p * b - b).norm() > 1e-9 {
            return Err(Error::Numerical("fixed-point identity violated".into()));
        }
        let m = self.dynamics.concat();
        if spectral_norm(&m) > self.c.min(1.0) + 1e-9 {
            return Err(Error::Numerical("||M|| exceeds the cap".into()));
        }
        let noise = NoiseModel::new(0.0, self.d())?;
        let sol = riccati_solve(&self.dynamics, cost, &noise)?;
        if gain_stability_margin(&self.dynamics, &sol.gains) > self.r + 1e-9 {
            return Err(Error::Numerical(
                "closed loop exceeds contraction bound".into(),
            ));
        }
        let a_bar = self.l_star.transpose() * a * &self.l_star;
        let b_bar = self.l_star.transpose() * b;
        if controllability_rank(&a_bar, &b_bar) != self.m() {
            return Err(Error::Numerical(
                "restricted controllability violated".into(),
            ));
        }
        Ok(())
    }
}

/// Numerical rank of `[B, AB, ..., A^{m-1}B]` via singular values.
fn controllability_rank(a_bar: &DMatrix<f64>, b_bar: &DMatrix<f64>) -> usize {
    let m = a_bar.nrows();
    let du = b_bar.ncols();
    let mut ctrl = DMatrix::zeros(m, m * du);
    let mut block = b_bar.clone();
    for i in 0..m {
        ctrl.view_mut((0, i * du), (m, du)).copy_from(&block);
        block = a_bar * block;
    }
    let sv = ctrl.svd(false, false).singular_values;
    let smax = sv[0];
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_TOLERANCE * smax).count()
}

/// JSON document for system round-trips. Matrices are row-major arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemJson {
    pub d: usize,
    pub d_u: usize,
    pub m: usize,
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    #[serde(rename = "L")]
    pub l: Vec<Vec<f64>>,
    pub r: f64,
    #[serde(rename = "C")]
    pub c: f64,
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn rows_to_matrix(
    rows: &[Vec<f64>],
    nrows: usize,
    ncols: usize,
    name: &str,
) -> Result<DMatrix<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Config(format!(
            "{} must be {}x{} row-major",
            name, nrows, ncols
        )));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

impl LowRankSystem {
    pub fn to_json(&self) -> SystemJson {
        SystemJson {
            d: self.d(),
            d_u: self.d_u(),
            m: self.m(),
            a: matrix_to_rows(&self.dynamics.a),
            b: matrix_to_rows(&self.dynamics.b),
            l: matrix_to_rows(&self.l_star),
            r: self.r,
            c: self.c,
        }
    }

    pub fn from_json(doc: &SystemJson) -> Result<Self> {
        let a = rows_to_matrix(&doc.a, doc.d, doc.d, "A")?;
        let b = rows_to_matrix(&doc.b, doc.d, doc.d_u, "B")?;
        let l = rows_to_matrix(&doc.l, doc.d, doc.m, "L")?;
        Ok(Self {
            dynamics: SystemDynamics::new(a, b)?,
            l_star: l,
            r: doc.r,
            c: doc.c,
        })
    }
}

/// Initial-state distribution: uniform on the unit sphere of the true
/// subspace, so `E[x x^T] = (1/m) P*` and `lambda_m = 1/m`.
#[derive(Debug, Clone)]
pub struct InitialDistribution {
    pub l_star: DMatrix<f64>,
    pub lambda_minus: f64,
}

impl InitialDistribution {
    /// Default margin: `lambda_- = 1/(2m)`, half the analytic eigenvalue.
    pub fn for_system(sys: &LowRankSystem) -> Self {
        Self {
            l_star: sys.l_star.clone(),
            lambda_minus: 1.0 / (2.0 * sys.m() as f64),
        }
    }
}

/// One simulated episode.
#[derive(Debug, Clone)]
pub struct EpisodeTrace {
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
    pub step_costs: Vec<f64>,
    pub k: u64,
}

fn gaussian_vector(n: usize, rng: &mut impl Rng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| standard_normal(rng))
}

fn standard_normal(rng: &mut impl Rng) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream layout simple.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Draw `x = L v` with `v` uniform on the unit sphere in R^m.
pub fn sample_initial_state(dist: &InitialDistribution, rng: &mut impl Rng) -> DVector<f64> {
    let m = dist.l_star.ncols();
    let mut v = gaussian_vector(m, rng);
    let mut n = v.norm();
    while n == 0.0 {
        v = gaussian_vector(m, rng);
        n = v.norm();
    }
    &dist.l_star * (v / n)
}

/// Draw `w = C_w * g/||g||`, a point on the radius-`C_w` sphere.
pub fn sample_noise(noise: &NoiseModel, rng: &mut impl Rng) -> DVector<f64> {
    if noise.bound == 0.0 {
        return DVector::zeros(noise.d);
    }
    let mut g = gaussian_vector(noise.d, rng);
    let mut n = g.norm();
    while n == 0.0 {
        g = gaussian_vector(noise.d, rng);
        n = g.norm();
    }
    g * (noise.bound / n)
}

/// One transition `x' = A x + B u + w`.
pub fn step(
    sys: &LowRankSystem,
    x: &DVector<f64>,
    u: &DVector<f64>,
    noise: &NoiseModel,
    rng: &mut impl Rng,
) -> Result<DVector<f64>> {
    if x.len() != sys.d() || u.len() != sys.d_u() {
        return Err(Error::DimensionMismatch(format!(
            "step: x has {}, u has {}, system is ({}, {})",
            x.len(),
            u.len(),
            sys.d(),
            sys.d_u()
        )));
    }
    Ok(&sys.dynamics.a * x + &sys.dynamics.b * u + sample_noise(noise, rng))
}

/// Run one episode from a given starting state under linear gains.
pub fn run_episode_from(
    sys: &LowRankSystem,
    x1: DVector<f64>,
    gains: &[DMatrix<f64>],
    cost: &CostSpec,
    noise: &NoiseModel,
    rng: &mut impl Rng,
    k: u64,
) -> Result<EpisodeTrace> {
    let hh = cost.horizon();
    if gains.len() != hh - 1 {
        return Err(Error::DimensionMismatch(format!(
            "expected {} gains, got {}",
            hh - 1,
            gains.len()
        )));
    }
    let mut states = Vec::with_capacity(hh);
    let mut controls = Vec::with_capacity(hh - 1);
    let mut step_costs = Vec::with_capacity(hh);
    let mut x = x1;
    for h in 1..hh {
        let u = &gains[h - 1] * &x;
        step_costs.push(step_cost(&x, &u, cost.q(h), cost.r(h))?);
        let next = step(sys, &x, &u, noise, rng)?;
        states.push(x);
        controls.push(u);
        x = next;
    }
    step_costs.push(crate::util::quad_form(&x, cost.q(hh)));
    states.push(x);
    Ok(EpisodeTrace {
        states,
        controls,
        step_costs,
        k,
    })
}

/// Sample the starting state and run one episode under linear gains.
pub fn run_episode(
    sys: &LowRankSystem,
    gains: &[DMatrix<f64>],
    dist: &InitialDistribution,
    cost: &CostSpec,
    noise: &NoiseModel,
    rng: &mut impl Rng,
    k: u64,
) -> Result<EpisodeTrace> {
    let x1 = sample_initial_state(dist, rng);
    run_episode_from(sys, x1, gains, cost, noise, rng, k)
}

/// Generate a rank-m-controllable system satisfying the contraction and norm
/// caps: draw `(A_bar, B_bar)` Gaussian on the subspace, embed through a
/// random orthonormal `L`, then halve the scale until the optimal closed loop
/// contracts below `r` and `||M|| <= min(C, 1)`.
pub fn make_lowrank_system(
    d: usize,
    d_u: usize,
    m: usize,
    r: f64,
    c: f64,
    cost: &CostSpec,
    seed: u64,
) -> Result<LowRankSystem> {
    if m < 1 || m > d || d_u < 1 {
        return Err(Error::Config(format!(
            "need 1 <= m <= d and d_u >= 1, got d={}, d_u={}, m={}",
            d, d_u, m
        )));
    }
    if !(0.0..1.0).contains(&r) || r == 0.0 {
        return Err(Error::Config(format!("need 0 < r < 1, got {}", r)));
    }
    if cost.d() != d || cost.d_u() != d_u {
        return Err(Error::DimensionMismatch("cost dims do not match".into()));
    }
    let noise = NoiseModel::new(0.0, d)?;
    let cap = c.min(1.0);

    for attempt in 0..MAX_GENERATION_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xE17, attempt as u64]));
        let raw = DMatrix::from_fn(d, m, |_, _| standard_normal(&mut rng));
        let l = raw.qr().q().columns(0, m).into_owned();
        let mut a_bar = DMatrix::from_fn(m, m, |_, _| standard_normal(&mut rng));
        let mut b_bar = DMatrix::from_fn(m, d_u, |_, _| standard_normal(&mut rng));

        let mut ok = false;
        let mut dynamics = None;
        for _ in 0..200 {
            let a = symmetrize_embed(&l, &a_bar);
            let b = &l * &b_bar;
            let dyn_try = SystemDynamics::new(a, b)?;
            let sol = riccati_solve(&dyn_try, cost, &noise)?;
            let margin = gain_stability_margin(&dyn_try, &sol.gains);
            let mnorm = spectral_norm(&dyn_try.concat());
            if margin <= r && mnorm <= cap {
                ok = true;
                dynamics = Some(dyn_try);
                break;
            }
            a_bar *= 0.5;
            b_bar *= 0.5;
        }
        if !ok {
            continue;
        }
        if controllability_rank(&a_bar, &b_bar) != m {
            continue;
        }
        let sys = LowRankSystem {
            dynamics: dynamics.unwrap(),
            l_star: l,
            r,
            c,
        };
        sys.check_invariants(cost)?;
        return Ok(sys);
    }
    Err(Error::Generation {
        attempts: MAX_GENERATION_ATTEMPTS,
    })
}

fn symmetrize_embed(l: &DMatrix<f64>, a_bar: &DMatrix<f64>) -> DMatrix<f64> {
    l * a_bar * l.transpose()
}
