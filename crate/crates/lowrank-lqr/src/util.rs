//! Small numeric helpers shared across modules.

use nalgebra::DMatrix;

/// Spectral norm (largest singular value) via a symmetric eigensolve on the
/// smaller Gram matrix. Much cheaper than a full SVD for the wide matrices
/// handled here.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    let gram = if m.nrows() <= m.ncols() {
        m * m.transpose()
    } else {
        m.transpose() * m
    };
    let sym = symmetrize(&gram);
    let eig = sym.symmetric_eigenvalues();
    eig.iter().cloned().fold(0.0f64, f64::max).max(0.0).sqrt()
}

/// (S + S^T)/2.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// x^T S x.
pub fn quad_form(x: &nalgebra::DVector<f64>, s: &DMatrix<f64>) -> f64 {
    (x.transpose() * s * x)[(0, 0)]
}

/// PSD square root by eigendecomposition; negative eigenvalues (round-off)
/// are clamped at zero.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrize(m).symmetric_eigen();
    let n = m.nrows();
    let mut out = DMatrix::zeros(n, n);
    for (i, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam > 0.0 {
            let v = eig.eigenvectors.column(i);
            out += v * v.transpose() * lam.sqrt();
        }
    }
    out
}

/// Seed mixing for derived RNG substreams (splitmix64 finalizer).
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a substream seed from a master seed and a sequence of tags.
/// Mixing each tag through splitmix64 keeps substreams independent: adding
/// a tag value never perturbs streams derived with different tags.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    let mut s = splitmix64(master);
    for &t in tags {
        s = splitmix64(s ^ splitmix64(t));
    }
    s
}

/// Ordinary least-squares slope of y against x.
pub fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (xi, yi) in x.iter().zip(y) {
        sxy += (xi - mx) * (yi - my);
        sxx += (xi - mx) * (xi - mx);
    }
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    #[test]
    fn spectral_norm_matches_svd() {
        let m = dmatrix![1.0, 2.0, 0.5; -0.3, 0.7, 1.1];
        let svd = m.clone().svd(false, false);
        let expect = svd.singular_values[0];
        assert!((spectral_norm(&m) - expect).abs() < 1e-12);
    }

    #[test]
    fn psd_sqrt_squares_back() {
        let a = dmatrix![2.0, 1.0; 1.0, 2.0];
        let s = psd_sqrt(&a);
        assert!(((&s * &s) - a).norm() < 1e-12);
    }

    #[test]
    fn slope_of_line() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v + 1.0).collect();
        assert!((ols_slope(&x, &y) - 3.0).abs() < 1e-12);
    }
}
