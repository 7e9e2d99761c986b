//! Attention as Bayesian query denoising, evaluated by brute-force
//! enumeration of mixture components.
//!
//! These routines are deliberately slow and literal: every posterior
//! responsibility is a per-dimension sum of Gaussian log-densities, with all
//! normalising constants kept. The fast paths in `denoising` are checked
//! against them.

use std::f64::consts::PI;

use crate::error::{NvError, Result};
use crate::numeric::{log_normalize, Matrix};

/// Discrete mixture `Σ wᵢ δ(zᵢ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureOfImpulses {
    pub locations: Matrix,
    pub weights: Vec<f64>,
}

/// Weighted diagonal Gaussians `Σ wᵢ N(μᵢ, diag(σᵢ²))`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixtureRepr {
    pub mu: Matrix,
    /// Per-dimension standard deviations.
    pub sigma: Matrix,
    pub weights: Vec<f64>,
}

impl GaussianMixtureRepr {
    pub fn new(mu: Matrix, sigma: Matrix, weights: Vec<f64>) -> Result<Self> {
        if mu.shape() != sigma.shape() || weights.len() != mu.rows() {
            return Err(NvError::Dimension(format!(
                "mixture mu {:?}, sigma {:?}, {} weights",
                mu.shape(),
                sigma.shape(),
                weights.len()
            )));
        }
        if sigma.data().iter().any(|&s| !(s >= 0.0)) {
            return Err(NvError::Domain("mixture standard deviations must be >= 0".into()));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(NvError::Domain("mixture weights must lie on the simplex".into()));
        }
        Ok(Self { mu, sigma, weights })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Impulse mixture equivalent to a set of attention keys: locations `z`,
/// weights `∝ exp(‖zᵢ‖² / (2·scale))`.
pub fn build_f_z(z: &Matrix, scale: f64) -> MixtureOfImpulses {
    let logits: Vec<f64> = z.row_sq_norms().iter().map(|n| n / (2.0 * scale)).collect();
    let weights = log_normalize(&logits).into_iter().map(f64::exp).collect();
    MixtureOfImpulses {
        locations: z.clone(),
        weights,
    }
}

/// `log N(u; mean, variance·I)` summed over dimensions, variance per dimension.
fn diag_gaussian_log_density(u: &[f64], mean: &[f64], variance: impl Fn(usize) -> f64) -> f64 {
    u.iter()
        .zip(mean)
        .enumerate()
        .map(|(k, (x, m))| {
            let v = variance(k);
            -0.5 * (x - m) * (x - m) / v - 0.5 * (2.0 * PI * v).ln()
        })
        .sum()
}

/// Posterior responsibilities `p(i | u)` of an impulse mixture under query
/// noise `N(0, scale·I)`. One row per query.
pub fn impulse_responsibilities(u: &Matrix, f: &MixtureOfImpulses, scale: f64) -> Result<Matrix> {
    check_dims(u, &f.locations)?;
    let k = f.weights.len();
    let mut out = Matrix::zeros(u.rows(), k);
    for q in 0..u.rows() {
        let logp: Vec<f64> = (0..k)
            .map(|i| f.weights[i].ln() + diag_gaussian_log_density(u.row(q), f.locations.row(i), |_| scale))
            .collect();
        for (o, lp) in out.row_mut(q).iter_mut().zip(log_normalize(&logp)) {
            *o = lp.exp();
        }
    }
    Ok(out)
}

/// Denoising attention over an impulse mixture: the posterior mean of the
/// clean query given the noisy observation `u`.
pub fn dattn_impulses(u: &Matrix, f: &MixtureOfImpulses, scale: f64) -> Result<Matrix> {
    impulse_responsibilities(u, f, scale)?.matmul(&f.locations)
}

/// Posterior responsibilities of a Gaussian mixture: component `i` scores
/// `wᵢ · N(u; μᵢ, (scale + σᵢ²)·I)` with per-dimension variances.
pub fn gaussian_responsibilities(u: &Matrix, g: &GaussianMixtureRepr, scale: f64) -> Result<Matrix> {
    check_dims(u, &g.mu)?;
    let k = g.len();
    let mut out = Matrix::zeros(u.rows(), k);
    for q in 0..u.rows() {
        let logp: Vec<f64> = (0..k)
            .map(|i| {
                let sig = g.sigma.row(i);
                g.weights[i].ln()
                    + diag_gaussian_log_density(u.row(q), g.mu.row(i), |d| scale + sig[d] * sig[d])
            })
            .collect();
        for (o, lp) in out.row_mut(q).iter_mut().zip(log_normalize(&logp)) {
            *o = lp.exp();
        }
    }
    Ok(out)
}

/// Denoising attention over a Gaussian mixture by explicit enumeration.
///
/// Each component contributes its conjugate posterior mean
/// `(σᵢ²·u + scale·μᵢ) / (scale + σᵢ²)`, weighted by its responsibility.
pub fn dattn_gaussians_oracle(u: &Matrix, g: &GaussianMixtureRepr, scale: f64) -> Result<Matrix> {
    let resp = gaussian_responsibilities(u, g, scale)?;
    let d = u.cols();
    let mut out = Matrix::zeros(u.rows(), d);
    for q in 0..u.rows() {
        for i in 0..g.len() {
            let r = resp[(q, i)];
            if r == 0.0 {
                continue;
            }
            for k in 0..d {
                let s2 = g.sigma[(i, k)] * g.sigma[(i, k)];
                let interp = (s2 * u[(q, k)] + scale * g.mu[(i, k)]) / (scale + s2);
                out[(q, k)] += r * interp;
            }
        }
    }
    Ok(out)
}

fn check_dims(u: &Matrix, locations: &Matrix) -> Result<()> {
    if u.cols() != locations.cols() {
        return Err(NvError::Dimension(format!(
            "queries of width {} against components of width {}",
            u.cols(),
            locations.cols()
        )));
    }
    if locations.rows() == 0 {
        return Err(NvError::Contract("mixture with no components".into()));
    }
    Ok(())
}
