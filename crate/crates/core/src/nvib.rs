//! NVIB projection: a set of latent vectors becomes the parameters of a
//! Dirichlet-process posterior, one Gaussian component per vector plus a
//! final component carrying the empirical prior.
//!
//! Pseudo-counts stay in log space throughout. `α₀` is the log-sum-exp over
//! all rows including the prior, so the mixture weights `α/α₀` always sum to
//! one over the `n + 1` components.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{NvError, Result};
use crate::mixture::GaussianMixtureRepr;
use crate::numeric::{log_normalize, log_sum_exp, Matrix};

/// Smallest admissible `τ_σ`: the float32 floor used for the equivalence
/// setting.
pub const TAU_SIGMA_FLOOR: f64 = 1e-38;

/// Floor on token variances produced by the projection (`TAU_SIGMA_FLOOR²`).
pub const VARIANCE_FLOOR: f64 = 1e-76;

/// Log pseudo-counts are clamped to `±LOG_ALPHA_CLAMP`.
pub const LOG_ALPHA_CLAMP: f64 = 700.0;

/// The three groups of attention sites, each with its own `τ` pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerGroup {
    /// Encoder self-attention.
    Encoder,
    /// Decoder cross-attention.
    Cross,
    /// Decoder causal self-attention.
    Decoder,
}

impl LayerGroup {
    pub const ALL: [LayerGroup; 3] = [LayerGroup::Encoder, LayerGroup::Cross, LayerGroup::Decoder];

    pub fn as_str(self) -> &'static str {
        match self {
            LayerGroup::Encoder => "encoder",
            LayerGroup::Cross => "cross",
            LayerGroup::Decoder => "decoder",
        }
    }
}

impl fmt::Display for LayerGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LayerGroup {
    type Err = NvError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder" | "e" | "enc" => Ok(LayerGroup::Encoder),
            "cross" | "c" => Ok(LayerGroup::Cross),
            "decoder" | "d" | "dec" => Ok(LayerGroup::Decoder),
            other => Err(NvError::Config(format!("unknown layer group {other:?}"))),
        }
    }
}

/// Group-level initialisation hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauConfig {
    pub tau_alpha_e: f64,
    pub tau_alpha_c: f64,
    pub tau_alpha_d: f64,
    pub tau_sigma_e: f64,
    pub tau_sigma_c: f64,
    pub tau_sigma_d: f64,
}

impl TauConfig {
    /// Same `(τ_α, τ_σ)` for every group.
    pub fn uniform(tau_alpha: f64, tau_sigma: f64) -> Self {
        Self {
            tau_alpha_e: tau_alpha,
            tau_alpha_c: tau_alpha,
            tau_alpha_d: tau_alpha,
            tau_sigma_e: tau_sigma,
            tau_sigma_c: tau_sigma,
            tau_sigma_d: tau_sigma,
        }
    }

    /// The equivalence setting: prior suppressed, no query–value interpolation.
    pub fn identity() -> Self {
        Self::uniform(10.0, TAU_SIGMA_FLOOR)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.named() {
            if !v.is_finite() {
                return Err(NvError::Config(format!("{name} must be finite, got {v}")));
            }
        }
        for s in [self.tau_sigma_e, self.tau_sigma_c, self.tau_sigma_d] {
            if s < TAU_SIGMA_FLOOR {
                return Err(NvError::Config(format!(
                    "tau_sigma {s:e} below the floor {TAU_SIGMA_FLOOR:e}"
                )));
            }
        }
        Ok(())
    }

    /// `(τ_α, τ_σ)` for a group.
    pub fn for_group(&self, group: LayerGroup) -> (f64, f64) {
        match group {
            LayerGroup::Encoder => (self.tau_alpha_e, self.tau_sigma_e),
            LayerGroup::Cross => (self.tau_alpha_c, self.tau_sigma_c),
            LayerGroup::Decoder => (self.tau_alpha_d, self.tau_sigma_d),
        }
    }

    pub fn set_group(&mut self, group: LayerGroup, tau_alpha: f64, tau_sigma: f64) {
        match group {
            LayerGroup::Encoder => (self.tau_alpha_e, self.tau_sigma_e) = (tau_alpha, tau_sigma),
            LayerGroup::Cross => (self.tau_alpha_c, self.tau_sigma_c) = (tau_alpha, tau_sigma),
            LayerGroup::Decoder => (self.tau_alpha_d, self.tau_sigma_d) = (tau_alpha, tau_sigma),
        }
    }

    /// Componentwise `(1 - t)·self + t·other`.
    pub fn lerp(&self, other: &TauConfig, t: f64) -> TauConfig {
        let l = |a: f64, b: f64| (1.0 - t) * a + t * b;
        TauConfig {
            tau_alpha_e: l(self.tau_alpha_e, other.tau_alpha_e),
            tau_alpha_c: l(self.tau_alpha_c, other.tau_alpha_c),
            tau_alpha_d: l(self.tau_alpha_d, other.tau_alpha_d),
            tau_sigma_e: l(self.tau_sigma_e, other.tau_sigma_e),
            tau_sigma_c: l(self.tau_sigma_c, other.tau_sigma_c),
            tau_sigma_d: l(self.tau_sigma_d, other.tau_sigma_d),
        }
    }

    /// Field names and values in canonical order.
    pub fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("tau_alpha_e", self.tau_alpha_e),
            ("tau_alpha_c", self.tau_alpha_c),
            ("tau_alpha_d", self.tau_alpha_d),
            ("tau_sigma_e", self.tau_sigma_e),
            ("tau_sigma_c", self.tau_sigma_c),
            ("tau_sigma_d", self.tau_sigma_d),
        ]
    }
}

impl Default for TauConfig {
    fn default() -> Self {
        Self::identity()
    }
}

/// Per-site prior statistics gathered from forward passes over a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalPrior {
    /// Prior mean `μ^p`.
    pub mu_p: Vec<f64>,
    /// Per-dimension prior standard deviation `σ^p`.
    pub sigma_p: Vec<f64>,
    /// `log α₀^p`, the mean scaled squared norm of the latents.
    pub log_alpha0_p: f64,
    /// `ε^α`, the standard deviation of the per-token scaled squared norms.
    pub epsilon_alpha: f64,
    pub layer_group: LayerGroup,
    pub layer_id: usize,
}

impl EmpiricalPrior {
    pub fn dim(&self) -> usize {
        self.mu_p.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma_p.len() != self.mu_p.len() {
            return Err(NvError::Dimension(format!(
                "prior mean of length {} with std of length {}",
                self.mu_p.len(),
                self.sigma_p.len()
            )));
        }
        if self.sigma_p.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(NvError::Domain("prior std must be positive and finite".into()));
        }
        if !(self.epsilon_alpha >= 0.0) || !self.log_alpha0_p.is_finite() {
            return Err(NvError::Domain(format!(
                "prior pseudo-count statistics invalid: log α₀ {}, ε^α {}",
                self.log_alpha0_p, self.epsilon_alpha
            )));
        }
        Ok(())
    }
}

/// Weights of the map from latent vectors to DP posterior parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NvibProjection {
    pub w_mu: Matrix,
    pub b_mu: Vec<f64>,
    pub w_sigma: Matrix,
    /// Bias of the log-variance.
    pub b_sigma: Vec<f64>,
    /// Acts on the elementwise square `Z∘Z`.
    pub w_alpha1: Vec<f64>,
    pub w_alpha2: Vec<f64>,
    pub b_alpha: f64,
}

/// Projection that reproduces standard attention as `τ_σ → 0` and `τ_α` grows:
/// `W^μ = I`, `W^σ = 0`, `b^σ = log((σ^p·τ_σ)²)`, `w^α₁ = 1/(2√(d/h))`,
/// `w^α₂ = 0`, `b^α = ε^α·τ_α`.
pub fn identity_init(
    prior: &EmpiricalPrior,
    tau_alpha: f64,
    tau_sigma: f64,
    d: usize,
    h: usize,
) -> Result<NvibProjection> {
    if !(tau_sigma >= TAU_SIGMA_FLOOR) || !tau_sigma.is_finite() {
        return Err(NvError::Config(format!(
            "tau_sigma {tau_sigma:e} below the floor {TAU_SIGMA_FLOOR:e}"
        )));
    }
    if !tau_alpha.is_finite() {
        return Err(NvError::Config(format!("tau_alpha must be finite, got {tau_alpha}")));
    }
    if h == 0 || !d.is_multiple_of(h) {
        return Err(NvError::Config(format!("model dim {d} not divisible by {h} heads")));
    }
    if prior.dim() != d {
        return Err(NvError::Dimension(format!("prior of dim {} for model dim {d}", prior.dim())));
    }
    prior.validate()?;
    let head_scale = ((d / h) as f64).sqrt();
    // log((σ^p τ_σ)²) in log form so the 1e-38 floor cannot underflow.
    let b_sigma = prior
        .sigma_p
        .iter()
        .map(|s| 2.0 * (s.ln() + tau_sigma.ln()))
        .collect();
    Ok(NvibProjection {
        w_mu: Matrix::identity(d),
        b_mu: vec![0.0; d],
        w_sigma: Matrix::zeros(d, d),
        b_sigma,
        w_alpha1: vec![1.0 / (2.0 * head_scale); d],
        w_alpha2: vec![0.0; d],
        b_alpha: prior.epsilon_alpha * tau_alpha,
    })
}

/// DP posterior parameters. Rows `0..n` are tokens, row `n` is the prior.
#[derive(Debug, Clone, PartialEq)]
pub struct DpPosterior {
    pub mu: Matrix,
    /// Per-dimension standard deviations.
    pub sigma: Matrix,
    pub log_alpha: Vec<f64>,
    /// How many token log pseudo-counts hit the `±700` clamp.
    pub clamped: usize,
}

impl DpPosterior {
    pub fn new(mu: Matrix, sigma: Matrix, log_alpha: Vec<f64>) -> Result<Self> {
        if mu.shape() != sigma.shape() || log_alpha.len() != mu.rows() || mu.rows() == 0 {
            return Err(NvError::Dimension(format!(
                "posterior mu {:?}, sigma {:?}, {} pseudo-counts",
                mu.shape(),
                sigma.shape(),
                log_alpha.len()
            )));
        }
        if sigma.data().iter().any(|&s| !(s >= 0.0)) {
            return Err(NvError::Domain("posterior std must be >= 0".into()));
        }
        if log_alpha.iter().any(|a| a.is_nan() || *a == f64::INFINITY) {
            return Err(NvError::Domain("log pseudo-counts must be < +inf".into()));
        }
        Ok(Self {
            mu,
            sigma,
            log_alpha,
            clamped: 0,
        })
    }

    /// Total number of components, prior included.
    pub fn components(&self) -> usize {
        self.log_alpha.len()
    }

    /// Number of token components (`n`).
    pub fn tokens(&self) -> usize {
        self.components() - 1
    }

    pub fn prior_index(&self) -> usize {
        self.tokens()
    }

    pub fn dim(&self) -> usize {
        self.mu.cols()
    }

    /// `log α₀` over all components.
    pub fn log_alpha0(&self) -> f64 {
        log_sum_exp(&self.log_alpha)
    }

    /// `log(α/α₀)` per component.
    pub fn log_weights(&self) -> Vec<f64> {
        log_normalize(&self.log_alpha)
    }

    pub fn alpha(&self) -> Vec<f64> {
        self.log_alpha.iter().map(|a| a.exp()).collect()
    }
}

/// Maps `z` (n×d) to the posterior parameters, appending the prior row.
pub fn project(z: &Matrix, proj: &NvibProjection, prior: &EmpiricalPrior) -> Result<DpPosterior> {
    let d = proj.w_mu.rows();
    if z.cols() != d || prior.dim() != d {
        return Err(NvError::Dimension(format!(
            "project input {:?} with projection dim {d} and prior dim {}",
            z.shape(),
            prior.dim()
        )));
    }
    if !z.all_finite() {
        return Err(NvError::Domain("non-finite latent vectors".into()));
    }
    let n = z.rows();
    let mut mu = z.matmul(&proj.w_mu)?.add_row_vector(&proj.b_mu)?;
    let mut sigma = z
        .matmul(&proj.w_sigma)?
        .add_row_vector(&proj.b_sigma)?
        .map(|log_var| log_var.exp().max(VARIANCE_FLOOR).sqrt());

    let mut clamped = 0;
    let mut log_alpha = Vec::with_capacity(n + 1);
    for row in z.iter_rows() {
        let mut la = proj.b_alpha
            + row
                .iter()
                .zip(&proj.w_alpha1)
                .zip(&proj.w_alpha2)
                .map(|((x, w1), w2)| x * x * w1 + x * w2)
                .sum::<f64>();
        if la.abs() > LOG_ALPHA_CLAMP {
            la = la.clamp(-LOG_ALPHA_CLAMP, LOG_ALPHA_CLAMP);
            clamped += 1;
        }
        log_alpha.push(la);
    }

    mu.push_row(&prior.mu_p)?;
    sigma.push_row(&prior.sigma_p)?;
    log_alpha.push(prior.log_alpha0_p);

    let mut dp = DpPosterior::new(mu, sigma, log_alpha)?;
    dp.clamped = clamped;
    Ok(dp)
}

/// Base distribution `G₀ = Σ (αᵢ/α₀) N(μᵢ, σᵢ²)` of the posterior.
pub fn to_gaussian_mixture(dp: &DpPosterior) -> GaussianMixtureRepr {
    let weights = dp.log_weights().into_iter().map(f64::exp).collect();
    GaussianMixtureRepr {
        mu: dp.mu.clone(),
        sigma: dp.sigma.clone(),
        weights,
    }
}
