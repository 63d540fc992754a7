//! Data buffers, PCA projection learning, projected ridge estimation, the
//! rank-deficient Gram algebra, and confidence-region radii.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::env::EpisodeTrace;
use crate::error::{Error, Result};
use crate::util::{spectral_norm, symmetrize};

/// Accumulated observations across episodes.
///
/// Columns are stored in step order; the Gram products `X X^T`, `Z Z^T`, and
/// `Z X_next^T` are maintained incrementally so per-episode work stays
/// independent of the episode count.
#[derive(Debug, Clone)]
pub struct DataBuffer {
    d: usize,
    d_u: usize,
    x_cols: Vec<DVector<f64>>,
    x_next_cols: Vec<DVector<f64>>,
    u_cols: Vec<DVector<f64>>,
    /// X X^T, d x d.
    s_state: DMatrix<f64>,
    /// Z Z^T, (d+d_u) x (d+d_u).
    zz: DMatrix<f64>,
    /// Z X_next^T, (d+d_u) x d.
    zx: DMatrix<f64>,
    episodes: usize,
}

impl DataBuffer {
    pub fn new(d: usize, d_u: usize) -> Self {
        let p = d + d_u;
        Self {
            d,
            d_u,
            x_cols: Vec::new(),
            x_next_cols: Vec::new(),
            u_cols: Vec::new(),
            s_state: DMatrix::zeros(d, d),
            zz: DMatrix::zeros(p, p),
            zx: DMatrix::zeros(p, d),
            episodes: 0,
        }
    }

    pub fn n(&self) -> usize {
        self.x_cols.len()
    }

    pub fn episodes(&self) -> usize {
        self.episodes
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn d_u(&self) -> usize {
        self.d_u
    }

    pub fn append_episode(&mut self, trace: &EpisodeTrace) -> Result<()> {
        let hh = trace.states.len();
        if trace.controls.len() + 1 != hh {
            return Err(Error::DimensionMismatch(
                "trace must hold H states and H-1 controls".into(),
            ));
        }
        for h in 0..hh - 1 {
            let x = &trace.states[h];
            let xn = &trace.states[h + 1];
            let u = &trace.controls[h];
            if x.len() != self.d || u.len() != self.d_u {
                return Err(Error::DimensionMismatch(format!(
                    "trace dims ({}, {}) vs buffer ({}, {})",
                    x.len(),
                    u.len(),
                    self.d,
                    self.d_u
                )));
            }
            let z = stack(x, u);
            self.s_state += x * x.transpose();
            self.zz += &z * z.transpose();
            self.zx += &z * xn.transpose();
            self.x_cols.push(x.clone());
            self.x_next_cols.push(xn.clone());
            self.u_cols.push(u.clone());
        }
        self.episodes += 1;
        Ok(())
    }

    /// d x n matrix of observed states.
    pub fn x_hat(&self) -> DMatrix<f64> {
        cols_to_matrix(self.d, &self.x_cols)
    }

    /// d x n matrix of successor states.
    pub fn x_next(&self) -> DMatrix<f64> {
        cols_to_matrix(self.d, &self.x_next_cols)
    }

    /// d_u x n matrix of controls.
    pub fn u(&self) -> DMatrix<f64> {
        cols_to_matrix(self.d_u, &self.u_cols)
    }

    /// (d+d_u) x n matrix of stacked state-control columns.
    pub fn z_hat(&self) -> DMatrix<f64> {
        let p = self.d + self.d_u;
        let mut m = DMatrix::zeros(p, self.n());
        for (j, (x, u)) in self.x_cols.iter().zip(&self.u_cols).enumerate() {
            m.column_mut(j).copy_from(&stack(x, u));
        }
        m
    }

    pub fn s_state(&self) -> &DMatrix<f64> {
        &self.s_state
    }

    pub fn to_checkpoint(&self) -> BufferCheckpoint {
        BufferCheckpoint {
            d: self.d,
            d_u: self.d_u,
            n: self.n(),
            episodes: self.episodes,
            x_hat: flatten(&self.x_cols),
            x_next: flatten(&self.x_next_cols),
            u: flatten(&self.u_cols),
        }
    }

    pub fn from_checkpoint(cp: &BufferCheckpoint) -> Result<Self> {
        let mut buf = Self::new(cp.d, cp.d_u);
        let x = unflatten(&cp.x_hat, cp.d, cp.n, "x_hat")?;
        let xn = unflatten(&cp.x_next, cp.d, cp.n, "x_next")?;
        let u = unflatten(&cp.u, cp.d_u, cp.n, "u")?;
        for j in 0..cp.n {
            let z = stack(&x[j], &u[j]);
            buf.s_state += &x[j] * x[j].transpose();
            buf.zz += &z * z.transpose();
            buf.zx += &z * xn[j].transpose();
        }
        buf.x_cols = x;
        buf.x_next_cols = xn;
        buf.u_cols = u;
        buf.episodes = cp.episodes;
        Ok(buf)
    }
}

fn stack(x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    let mut z = DVector::zeros(x.len() + u.len());
    z.rows_mut(0, x.len()).copy_from(x);
    z.rows_mut(x.len(), u.len()).copy_from(u);
    z
}

fn cols_to_matrix(rows: usize, cols: &[DVector<f64>]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows, cols.len());
    for (j, c) in cols.iter().enumerate() {
        m.column_mut(j).copy_from(c);
    }
    m
}

fn flatten(cols: &[DVector<f64>]) -> Vec<Vec<f64>> {
    cols.iter().map(|c| c.iter().cloned().collect()).collect()
}

fn unflatten(cols: &[Vec<f64>], rows: usize, n: usize, name: &str) -> Result<Vec<DVector<f64>>> {
    if cols.len() != n || cols.iter().any(|c| c.len() != rows) {
        return Err(Error::Config(format!(
            "{}: expected {} columns of {}",
            name, n, rows
        )));
    }
    Ok(cols.iter().map(|c| DVector::from_column_slice(c)).collect())
}

/// Buffer checkpoint: column-major lists of columns, 64-bit floats, with
/// shape headers.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BufferCheckpoint {
    pub d: usize,
    pub d_u: usize,
    pub n: usize,
    pub episodes: usize,
    pub x_hat: Vec<Vec<f64>>,
    pub x_next: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
}

/// Learned projector pair: `P` on states, block `P_aug` on state-control
/// stacks (identity on the control block).
#[derive(Debug, Clone)]
pub struct ProjectionPair {
    pub p: DMatrix<f64>,
    pub p_aug: DMatrix<f64>,
    pub m: usize,
}

impl ProjectionPair {
    pub fn identity(d: usize, d_u: usize) -> Self {
        Self {
            p: DMatrix::identity(d, d),
            p_aug: DMatrix::identity(d + d_u, d + d_u),
            m: d,
        }
    }

    fn from_basis(l_bar: &DMatrix<f64>, d_u: usize) -> Self {
        let d = l_bar.nrows();
        let m = l_bar.ncols();
        let p = l_bar * l_bar.transpose();
        let mut p_aug = DMatrix::zeros(d + d_u, d + d_u);
        p_aug.view_mut((0, 0), (d, d)).copy_from(&p);
        p_aug
            .view_mut((d, d), (d_u, d_u))
            .copy_from(&DMatrix::identity(d_u, d_u));
        Self { p, p_aug, m }
    }
}

/// Top-m PCA of the observed states: eigenvectors of `X X^T` for the m
/// largest eigenvalues (equivalently the top left singular vectors of X).
/// Ties at the m-th eigenvalue are broken by the eigensolver's deterministic
/// descending order, first m taken.
pub fn learn_projection(buf: &DataBuffer, m: usize, d_u: usize) -> Result<ProjectionPair> {
    if buf.n() == 0 {
        return Err(Error::EmptyBuffer);
    }
    let d = buf.d();
    if m > d {
        return Err(Error::Config(format!("m={} exceeds d={}", m, d)));
    }
    let eig = symmetrize(buf.s_state()).symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .partial_cmp(&eig.eigenvalues[i])
            .unwrap()
            .then(i.cmp(&j))
    });
    let mut l_bar = DMatrix::zeros(d, m);
    for (c, &i) in order.iter().take(m).enumerate() {
        l_bar.column_mut(c).copy_from(&eig.eigenvectors.column(i));
    }
    Ok(ProjectionPair::from_basis(&l_bar, d_u))
}

/// Regularized Gram quantities for the projected ridge problem.
#[derive(Debug, Clone)]
pub struct Gram {
    /// `Zbar Zbar^T + I` with `Zbar = P_aug Z` (subspace-regularized Gram).
    pub v_tilde: DMatrix<f64>,
    /// `P_aug V_tilde P_aug`, rank-deficient.
    pub v: DMatrix<f64>,
    /// Pseudo-inverse of `V`, computed as `P_aug V_tilde^{-1} P_aug`.
    pub v_dagger: DMatrix<f64>,
}

/// Gram products under a projection. The pseudo-inverse is formed through
/// the identity `V^+ = P_aug V_tilde^{-1} P_aug`, not a generic SVD route.
pub fn projected_gram(buf: &DataBuffer, proj: &ProjectionPair) -> Result<Gram> {
    let p = buf.d() + buf.d_u();
    if proj.p_aug.nrows() != p {
        return Err(Error::DimensionMismatch(format!(
            "projection is {}x{}, buffer needs {}",
            proj.p_aug.nrows(),
            proj.p_aug.ncols(),
            p
        )));
    }
    // Regularize on the projected subspace: V_tilde = Zbar Zbar^T + I with
    // Zbar = P_aug Z. Then V_tilde commutes with P_aug, V is unchanged
    // (P_aug Z Z^T P_aug + P_aug either way), and P_aug V_tilde^{-1} P_aug
    // is exactly the Moore-Penrose pseudo-inverse of V.
    let zbar_gram = symmetrize(&(&proj.p_aug * &buf.zz * &proj.p_aug));
    let v_tilde = &zbar_gram + DMatrix::identity(p, p);
    let chol = nalgebra::Cholesky::new(symmetrize(&v_tilde))
        .ok_or_else(|| Error::Numerical("V_tilde factorization failed".into()))?;
    let v_tilde_inv = chol.inverse();
    let v = symmetrize(&(zbar_gram + &proj.p_aug));
    let v_dagger = symmetrize(&(&proj.p_aug * v_tilde_inv * &proj.p_aug));
    Ok(Gram {
        v_tilde,
        v,
        v_dagger,
    })
}

/// Rank-restricted ridge estimate `M_k = P X_next Z^T P_aug V^+`.
pub fn estimate_dynamics(buf: &DataBuffer, proj: &ProjectionPair, gram: &Gram) -> DMatrix<f64> {
    // zx = Z X_next^T, so M_k^T = V^+ (P_aug Z)(P X_next)^T = V^+ P_aug zx P.
    let mt = &gram.v_dagger * &proj.p_aug * &buf.zx * &proj.p;
    mt.transpose()
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// `C_max = 4 C_w + 2 sqrt(2) C_w^2`.
pub fn c_max(c_w: f64) -> f64 {
    4.0 * c_w + 2.0 * SQRT_2 * c_w * c_w
}

/// Warm-up period:
/// `K_min = 2 max{ (H log(m/delta))^4 / lambda_-^4,
///                 C_max^2 H log(d/delta) / lambda_-^2 }`.
pub fn k_min(h: usize, delta: f64, m: usize, d: usize, c_max: f64, lambda_minus: f64) -> u64 {
    let hh = h as f64;
    let first = (hh * (m as f64 / delta).ln()).powi(4) / lambda_minus.powi(4);
    let second = c_max * c_max * hh * (d as f64 / delta).ln() / (lambda_minus * lambda_minus);
    (2.0 * first.max(second)).ceil() as u64
}

/// Radii with separate rank parameters: `m_denom` feeds the projection-decay
/// denominator, `m_gprime` the self-normalized noise term (the full-dimension
/// baseline substitutes d there).
pub fn confidence_radii_split(
    k: u64,
    h: usize,
    delta: f64,
    d: usize,
    m_denom: usize,
    m_gprime: usize,
    c: f64,
    c_w: f64,
    lambda_minus: f64,
    radius_scale: f64,
) -> Result<(f64, f64)> {
    if !(0.0..1.0).contains(&delta) || delta == 0.0 {
        return Err(Error::Config(format!("delta={} outside (0,1)", delta)));
    }
    // Zero scale collapses the region to the center regardless of k.
    if radius_scale == 0.0 {
        return Ok((0.0, 0.0));
    }
    let kf = k as f64;
    let hf = h as f64;
    let cm = c_max(c_w);
    let nu = cm * (hf * kf * (d as f64 / delta).ln()).sqrt();
    let denom = (kf - 1.0) * lambda_minus - kf.powf(0.75) * hf * (m_denom as f64 / delta).ln() - nu;
    if denom <= 0.0 {
        return Err(Error::RadiiUndefined { k, denom });
    }
    let g = radius_scale * nu / denom;
    let mg = m_gprime as f64;
    let g_prime =
        2.0 * mg * mg * c_w * c_w * ((1.0 / delta) * (1.0 + hf * kf * c * c / mg).sqrt()).ln();
    let beta = radius_scale * (1.0 + 4.0 * c * c * g * g * hf * kf + g_prime);
    Ok((g, beta))
}

/// Radii for the regime below the formula's validity threshold: same closed
/// forms with the two subtracted terms dropped from the denominator, so
/// `G = radius_scale * nu / ((k-1) lambda_-)` keeps the Theta(1/sqrt(k))
/// rate and stays positive for every k >= 2. Upper-bounds the exact radii
/// wherever both are defined (smaller denominator there).
#[allow(clippy::too_many_arguments)]
pub fn fallback_radii(
    k: u64,
    h: usize,
    delta: f64,
    d: usize,
    m_gprime: usize,
    c: f64,
    c_w: f64,
    lambda_minus: f64,
    radius_scale: f64,
) -> (f64, f64) {
    if radius_scale == 0.0 || k < 2 {
        return (0.0, 0.0);
    }
    let kf = k as f64;
    let hf = h as f64;
    let nu = c_max(c_w) * (hf * kf * (d as f64 / delta).ln()).sqrt();
    let g = radius_scale * nu / ((kf - 1.0) * lambda_minus);
    let mg = m_gprime as f64;
    let g_prime =
        2.0 * mg * mg * c_w * c_w * ((1.0 / delta) * (1.0 + hf * kf * c * c / mg).sqrt()).ln();
    let beta = radius_scale * (1.0 + 4.0 * c * c * g * g * hf * kf + g_prime);
    (g, beta)
}

/// Confidence radii `(G_{k,delta}, beta_{k,delta})` from the closed forms.
/// Errors with `RadiiUndefined` when `k` is small enough that the
/// projection-decay denominator is nonpositive (`k <= K_min` regime).
#[allow(clippy::too_many_arguments)]
pub fn confidence_radii(
    k: u64,
    h: usize,
    delta: f64,
    d: usize,
    m: usize,
    c: f64,
    c_w: f64,
    lambda_minus: f64,
    radius_scale: f64,
) -> Result<(f64, f64)> {
    confidence_radii_split(k, h, delta, d, m, m, c, c_w, lambda_minus, radius_scale)
}

/// Confidence region around the estimate `M_k`.
#[derive(Debug, Clone)]
pub struct ConfidenceRegion {
    pub m_k: DMatrix<f64>,
    pub proj: ProjectionPair,
    pub v: DMatrix<f64>,
    /// PSD square root of `V` (eigenvalues clamped at zero).
    pub v_sqrt: DMatrix<f64>,
    /// Pseudo-inverse square root of `V`: whitens deviations so candidate
    /// sampling spreads the beta budget evenly across the Gram's directions.
    pub v_inv_sqrt: DMatrix<f64>,
    pub g: f64,
    pub beta: f64,
    pub norm_cap: f64,
}

impl ConfidenceRegion {
    pub fn new(
        m_k: DMatrix<f64>,
        proj: ProjectionPair,
        v: DMatrix<f64>,
        g: f64,
        beta: f64,
        norm_cap: f64,
    ) -> Self {
        let eig = nalgebra::SymmetricEigen::new(v.clone());
        let lam_max = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
        let cut = lam_max.max(1.0) * 1e-12;
        let mut sq = eig.eigenvalues.clone();
        let mut isq = eig.eigenvalues.clone();
        for (s, i) in sq.iter_mut().zip(isq.iter_mut()) {
            if *s > cut {
                let r = s.sqrt();
                *s = r;
                *i = 1.0 / r;
            } else {
                *s = 0.0;
                *i = 0.0;
            }
        }
        let v_sqrt = &eig.eigenvectors * DMatrix::from_diagonal(&sq) * eig.eigenvectors.transpose();
        let v_inv_sqrt =
            &eig.eigenvectors * DMatrix::from_diagonal(&isq) * eig.eigenvectors.transpose();
        Self {
            m_k,
            proj,
            v,
            v_sqrt,
            v_inv_sqrt,
            g,
            beta,
            norm_cap,
        }
    }
}

/// Membership test: the norm cap, the perpendicular radius `G`, and the
/// Gram-weighted parallel radius `beta`. Infinite radii make the
/// corresponding constraint vacuous.
pub fn in_confidence(candidate: &DMatrix<f64>, region: &ConfidenceRegion) -> bool {
    const SLACK: f64 = 1.0 + 1e-9;
    if spectral_norm(candidate) > region.norm_cap * SLACK {
        return false;
    }
    let dev = candidate - &region.m_k;
    if region.g.is_finite() {
        let p = region.proj.p_aug.nrows();
        let perp = &dev * (DMatrix::identity(p, p) - &region.proj.p_aug);
        if spectral_norm(&perp) > region.g * SLACK {
            return false;
        }
    }
    if region.beta.is_finite() {
        let par = &dev * &region.v_sqrt;
        let norm = spectral_norm(&par);
        if norm * norm > region.beta * SLACK {
            return false;
        }
    }
    true
}
