//! Exact finite-horizon LQR mathematics: Riccati backward recursion, gain
//! synthesis, and closed-form expected-cost evaluation for the optimal policy
//! and for arbitrary linear policies.
//!
//! Indexing convention: `Psi_h` uses `Q_h` on-step and `Psi_{h+1}` as the
//! look-ahead, so the cost-to-go at step `h` is `x^T Psi_h x + psi_h` and the
//! terminal value is `Psi_H = Q_H`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::util::{quad_form, spectral_norm, symmetrize};

/// Maximum condition number tolerated for the control-cost solve
/// `(R_h + B^T Psi B)`.
const COND_LIMIT: f64 = 1e12;

/// The matrix pair `M = [A B]` defining state transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemDynamics {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl SystemDynamics {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "A must be square, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if b.nrows() != a.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "B has {} rows, expected {}",
                b.nrows(),
                a.nrows()
            )));
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite entry in dynamics".into()));
        }
        Ok(Self { a, b })
    }

    pub fn d(&self) -> usize {
        self.a.nrows()
    }

    pub fn d_u(&self) -> usize {
        self.b.ncols()
    }

    /// Concatenation `M = [A B]`, a `d x (d + d_u)` matrix.
    pub fn concat(&self) -> DMatrix<f64> {
        let d = self.d();
        let du = self.d_u();
        let mut m = DMatrix::zeros(d, d + du);
        m.view_mut((0, 0), (d, d)).copy_from(&self.a);
        m.view_mut((0, d), (d, du)).copy_from(&self.b);
        m
    }

    /// Split a `d x (d + d_u)` concatenation back into `[A B]`.
    pub fn from_concat(m: &DMatrix<f64>, d_u: usize) -> Result<Self> {
        let d = m.nrows();
        if m.ncols() != d + d_u {
            return Err(Error::DimensionMismatch(format!(
                "expected {} columns, got {}",
                d + d_u,
                m.ncols()
            )));
        }
        Self::new(
            m.view((0, 0), (d, d)).into_owned(),
            m.view((0, d), (d, d_u)).into_owned(),
        )
    }
}

/// Per-step quadratic cost matrices over a horizon `H`.
///
/// `Q_1..Q_H` are positive definite; `R_1..R_{H-1}` are positive definite and
/// `R_H` is identically zero.
#[derive(Debug, Clone)]
pub struct CostSpec {
    q: Vec<DMatrix<f64>>,
    r: Vec<DMatrix<f64>>,
}

impl CostSpec {
    pub fn new(q: Vec<DMatrix<f64>>, r: Vec<DMatrix<f64>>) -> Result<Self> {
        if q.len() < 2 {
            return Err(Error::Config("horizon must be >= 2".into()));
        }
        if q.len() != r.len() {
            return Err(Error::DimensionMismatch(format!(
                "Q has {} entries, R has {}",
                q.len(),
                r.len()
            )));
        }
        let hh = q.len();
        for (h, qh) in q.iter().enumerate() {
            if min_eigenvalue(qh) <= 0.0 {
                return Err(Error::Config(format!(
                    "Q_{} is not positive definite",
                    h + 1
                )));
            }
        }
        for (h, rh) in r.iter().enumerate().take(hh - 1) {
            if min_eigenvalue(rh) <= 0.0 {
                return Err(Error::Config(format!(
                    "R_{} is not positive definite",
                    h + 1
                )));
            }
        }
        if r[hh - 1].iter().any(|&v| v != 0.0) {
            return Err(Error::Config("R_H must be the zero matrix".into()));
        }
        Ok(Self { q, r })
    }

    /// Identity state costs and identity control costs over horizon `h`
    /// (with the mandatory `R_H = 0`).
    pub fn identity(d: usize, d_u: usize, h: usize) -> Result<Self> {
        let mut q = vec![DMatrix::identity(d, d); h];
        let mut r = vec![DMatrix::identity(d_u, d_u); h];
        if let Some(last) = r.last_mut() {
            *last = DMatrix::zeros(d_u, d_u);
        }
        q.truncate(h);
        Self::new(q, r)
    }

    pub fn horizon(&self) -> usize {
        self.q.len()
    }

    pub fn q(&self, h: usize) -> &DMatrix<f64> {
        &self.q[h - 1]
    }

    pub fn r(&self, h: usize) -> &DMatrix<f64> {
        &self.r[h - 1]
    }

    pub fn d(&self) -> usize {
        self.q[0].nrows()
    }

    pub fn d_u(&self) -> usize {
        self.r[0].nrows()
    }

    /// Check the spectral-norm cap `||Q_h||, ||R_h|| <= c`.
    pub fn check_norm_bound(&self, c: f64) -> Result<()> {
        for (h, m) in self.q.iter().chain(self.r.iter()).enumerate() {
            if spectral_norm(m) > c * (1.0 + 1e-12) {
                return Err(Error::Config(format!(
                    "cost matrix {} exceeds the norm bound {}",
                    h, c
                )));
            }
        }
        Ok(())
    }
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetrize(m)
        .symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Isotropic noise on a sphere: `w = C_w * g/||g||`, so the per-coordinate
/// variance is `sigma^2 = C_w^2 / d`.
#[derive(Debug, Clone, Copy)]
pub struct NoiseModel {
    pub bound: f64,
    pub d: usize,
}

impl NoiseModel {
    pub fn new(bound: f64, d: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&bound) {
            return Err(Error::Config(format!(
                "noise bound {} outside [0, 1)",
                bound
            )));
        }
        Ok(Self { bound, d })
    }

    pub fn sigma2(&self) -> f64 {
        self.bound * self.bound / self.d as f64
    }
}

/// Backward-pass value matrices, gains, and noise offsets.
///
/// `psi[h-1]` holds `Psi_h`, `gains[h-1]` holds `K_h`, `offsets[h-1]` holds
/// `psi_h` (1-based step indices).
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub psi: Vec<DMatrix<f64>>,
    pub gains: Vec<DMatrix<f64>>,
    pub offsets: Vec<f64>,
}

impl RiccatiSolution {
    pub fn horizon(&self) -> usize {
        self.psi.len()
    }
}

/// Riccati backward recursion.
///
/// `Psi_H = Q_H`; for `h < H`:
/// `Psi_h = Q_h + A^T Psi' A - A^T Psi' B (R_h + B^T Psi' B)^{-1} B^T Psi' A`
/// with `Psi' = Psi_{h+1}`, `K_h = -(R_h + B^T Psi' B)^{-1} B^T Psi' A`, and
/// `psi_h = psi_{h+1} + sigma^2 tr(Psi_{h+1})`.
pub fn riccati_solve(
    dynamics: &SystemDynamics,
    cost: &CostSpec,
    noise: &NoiseModel,
) -> Result<RiccatiSolution> {
    let d = dynamics.d();
    let du = dynamics.d_u();
    if cost.d() != d || cost.d_u() != du {
        return Err(Error::DimensionMismatch(format!(
            "cost dims ({}, {}) vs dynamics ({}, {})",
            cost.d(),
            cost.d_u(),
            d,
            du
        )));
    }
    let hh = cost.horizon();
    let sigma2 = noise.sigma2();
    let a = &dynamics.a;
    let b = &dynamics.b;

    let mut psi = vec![DMatrix::zeros(d, d); hh];
    let mut gains = vec![DMatrix::zeros(du, d); hh - 1];
    let mut offsets = vec![0.0; hh];
    psi[hh - 1] = symmetrize(cost.q(hh));

    for h in (1..hh).rev() {
        // h is the 1-based index of the step being filled; psi[h] = Psi_{h+1}.
        let psi_next = psi[h].clone();
        let pb = &psi_next * b; // d x du
        let s = cost.r(h) + b.transpose() * &pb; // du x du
        let s_eigs = symmetrize(&s).symmetric_eigenvalues();
        let smax = s_eigs.iter().cloned().fold(0.0f64, f64::max);
        let smin = s_eigs.iter().cloned().fold(f64::INFINITY, f64::min);
        if smin <= 0.0 || smax / smin > COND_LIMIT {
            return Err(Error::Numerical(format!(
                "R_{} + B^T Psi B is singular (cond > {:e})",
                h, COND_LIMIT
            )));
        }
        let chol = nalgebra::Cholesky::new(symmetrize(&s))
            .ok_or_else(|| Error::Numerical(format!("Cholesky failed for R_{} + B^T Psi B", h)))?;
        let bt_pa = pb.transpose() * a; // B^T Psi A, du x d
        let k = -chol.solve(&bt_pa);
        let value = cost.q(h) + a.transpose() * (&psi_next * a) + bt_pa.transpose() * &k;
        psi[h - 1] = symmetrize(&value);
        gains[h - 1] = k;
        offsets[h - 1] = offsets[h] + sigma2 * psi_next.trace();
    }

    Ok(RiccatiSolution {
        psi,
        gains,
        offsets,
    })
}

/// `J_h^*(x) = x^T Psi_h x + psi_h` for a 1-based step index `h`.
pub fn optimal_cost(sol: &RiccatiSolution, x: &DVector<f64>, h: usize) -> Result<f64> {
    if h < 1 || h > sol.horizon() {
        return Err(Error::IndexOutOfRange(format!(
            "h={} outside [1, {}]",
            h,
            sol.horizon()
        )));
    }
    Ok(quad_form(x, &sol.psi[h - 1]) + sol.offsets[h - 1])
}

/// Exact expected cost of a fixed linear policy `u_h = K_h x` on the true
/// system: backward recursion
/// `P_H = Q_H`, `P_h = Q_h + K_h^T R_h K_h + (A + B K_h)^T P_{h+1} (A + B K_h)`
/// with noise offsets `phi_h = phi_{h+1} + sigma^2 tr(P_{h+1})`.
pub fn policy_cost(
    dynamics: &SystemDynamics,
    gains: &[DMatrix<f64>],
    cost: &CostSpec,
    noise: &NoiseModel,
    x: &DVector<f64>,
) -> Result<f64> {
    let hh = cost.horizon();
    let d = dynamics.d();
    let du = dynamics.d_u();
    if gains.len() != hh - 1 {
        return Err(Error::DimensionMismatch(format!(
            "expected {} gains, got {}",
            hh - 1,
            gains.len()
        )));
    }
    for k in gains {
        if k.nrows() != du || k.ncols() != d {
            return Err(Error::DimensionMismatch(format!(
                "gain is {}x{}, expected {}x{}",
                k.nrows(),
                k.ncols(),
                du,
                d
            )));
        }
    }
    let sigma2 = noise.sigma2();
    let mut p = symmetrize(cost.q(hh));
    let mut phi = 0.0;
    for h in (1..hh).rev() {
        let k = &gains[h - 1];
        let a_cl = &dynamics.a + &dynamics.b * k;
        phi += sigma2 * p.trace();
        let value = cost.q(h) + k.transpose() * cost.r(h) * k + a_cl.transpose() * (&p * a_cl);
        p = symmetrize(&value);
    }
    Ok(quad_form(x, &p) + phi)
}

/// Immediate cost `x^T Q_h x + u^T R_h u`.
pub fn step_cost(
    x: &DVector<f64>,
    u: &DVector<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<f64> {
    if q.nrows() != x.len() || r.nrows() != u.len() {
        return Err(Error::DimensionMismatch(format!(
            "step_cost: x has {}, Q is {}x{}; u has {}, R is {}x{}",
            x.len(),
            q.nrows(),
            q.ncols(),
            u.len(),
            r.nrows(),
            r.ncols()
        )));
    }
    Ok(quad_form(x, q) + quad_form(u, r))
}

/// `max_h ||A + B K_h||_2`, the worst closed-loop spectral norm across steps.
pub fn gain_stability_margin(dynamics: &SystemDynamics, gains: &[DMatrix<f64>]) -> f64 {
    gains
        .iter()
        .map(|k| spectral_norm(&(&dynamics.a + &dynamics.b * k)))
        .fold(0.0, f64::max)
}
