//! Denoising multi-head attention over a DP posterior.
//!
//! Each head projects its query back into the latent space,
//! `U_i = Q_i (W^K_i)ᵀ`, and performs Bayesian query denoising against the
//! Gaussian mixture `Σ_j (α_j/α₀) N(μ_j, σ_j²)` with query noise variance
//! `s = √(d/h)`. With `σ_r² = s + σ²` (per component and dimension) the
//! score of component `j` for query `u` is the exact log-density
//!
//! ```text
//! u·(μ_j/σ_r²) − ½ (u∘u)·(1/σ_r²) + c_j
//! c_j = log(α_j/α₀) − ½ Σ μ_j²/σ_r² − Σ log σ_r
//! ```
//!
//! and each component returns the query–value interpolation
//! `(σ²∘u + s·μ_j)/σ_r²`. The `(u∘u)` term is constant across components
//! whenever `σ_r` is, which is the case at the equivalence setting, and
//! drops out of the softmax there.
//!
//! The last posterior row is the prior component. Masks address the `n`
//! token columns only; the prior column is always visible.

use crate::attention::{AttentionMask, AttentionParams};
use crate::error::{NvError, Result};
use crate::numeric::{sample_dirichlet, sample_gaussian, softmax_in_place, Matrix, Rng};
use crate::nvib::{project, DpPosterior, EmpiricalPrior, LayerGroup, NvibProjection};

/// Arguments of one denoising attention call.
#[derive(Debug, Clone, Copy)]
pub struct DenoisingAttentionInputs<'a> {
    /// Pre-projection queries `U′` (m×d).
    pub queries_pre: &'a Matrix,
    pub dp: &'a DpPosterior,
    pub params: &'a AttentionParams,
    /// Mask over the token columns; the prior column is appended visible.
    pub mask: &'a AttentionMask,
}

/// Attention weights of one site, one `m × (n+1)` matrix per head with the
/// prior in the last column.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub layer_id: usize,
    pub group: LayerGroup,
    pub heads: Vec<Matrix>,
}

impl AttentionMap {
    /// Mean over heads.
    pub fn head_average(&self) -> Matrix {
        let mut acc = self.heads[0].clone();
        for h in &self.heads[1..] {
            acc = acc.add(h).expect("head maps share a shape");
        }
        acc.scale(1.0 / self.heads.len() as f64)
    }

    /// Head-averaged weight on the prior column, one entry per query.
    pub fn prior_weights(&self) -> Vec<f64> {
        let avg = self.head_average();
        let p = avg.cols() - 1;
        (0..avg.rows()).map(|q| avg[(q, p)]).collect()
    }
}

/// Receives attention maps as a forward pass runs.
pub trait AttentionObserver {
    fn observe(&mut self, map: AttentionMap);
}

impl<F: FnMut(AttentionMap)> AttentionObserver for F {
    fn observe(&mut self, map: AttentionMap) {
        self(map)
    }
}

/// Collects every map it sees.
#[derive(Debug, Default)]
pub struct MapCollector {
    pub maps: Vec<AttentionMap>,
}

impl AttentionObserver for MapCollector {
    fn observe(&mut self, map: AttentionMap) {
        self.maps.push(map);
    }
}

fn check_inputs(inp: &DenoisingAttentionInputs<'_>) -> Result<(usize, usize)> {
    let d = inp.params.model_dim();
    if inp.queries_pre.cols() != d || inp.dp.dim() != d {
        return Err(NvError::Dimension(format!(
            "queries {:?} and posterior dim {} for model dim {d}",
            inp.queries_pre.shape(),
            inp.dp.dim()
        )));
    }
    let m = inp.queries_pre.rows();
    let n = inp.dp.tokens();
    match inp.mask {
        AttentionMask::Custom(v) if v.iter().any(|r| r.len() == n + 1) => {
            if v.len() != m || v.iter().any(|r| r.len() != n + 1) {
                return Err(NvError::Dimension(format!("custom mask does not cover {m}x{}", n + 1)));
            }
            if v.iter().any(|r| !r[n]) {
                return Err(NvError::Contract("the prior component may not be masked".into()));
            }
        }
        mask => mask.check(m, n)?,
    }
    Ok((m, n))
}

/// Visibility of column `k` for query `q`, the prior column `n` always visible.
#[inline]
fn visible(mask: &AttentionMask, q: usize, k: usize, n: usize) -> bool {
    k == n || mask.visible(q, k)
}

/// Masks and normalises every row of `scores`.
fn normalise_scores(scores: &mut Matrix, mask: &AttentionMask, n: usize) -> Result<()> {
    for q in 0..scores.rows() {
        let row = scores.row_mut(q);
        for (k, s) in row.iter_mut().enumerate() {
            if !visible(mask, q, k, n) {
                *s = f64::NEG_INFINITY;
            }
        }
        if !row.iter().any(|s| s.is_finite()) {
            return Err(NvError::Contract(format!("query {q} has no component with finite score")));
        }
        softmax_in_place(row);
    }
    Ok(())
}

/// Evaluation-time denoising multi-head attention.
pub fn eval_dattn_multihead(inp: &DenoisingAttentionInputs<'_>) -> Result<Matrix> {
    eval_dattn_multihead_with_weights(inp).map(|(out, _)| out)
}

/// As [`eval_dattn_multihead`], also returning per-head weights over the
/// `n + 1` components.
pub fn eval_dattn_multihead_with_weights(inp: &DenoisingAttentionInputs<'_>) -> Result<(Matrix, Vec<Matrix>)> {
    let (m, n) = check_inputs(inp)?;
    let params = inp.params;
    let dp = inp.dp;
    let d = params.model_dim();
    let s = params.head_scale();

    let var = dp.sigma.map(|x| x * x);
    let var_r = var.map(|v| s + v);
    let inv_var_r = var_r.map(|v| 1.0 / v);
    let mu_over = dp.mu.hadamard(&inv_var_r)?;
    let interp_query = var.hadamard(&inv_var_r)?;
    let interp_value = mu_over.scale(s);
    // `log α₀` is shared by every component, so it is left out; that keeps
    // masked (future) tokens from touching visible scores even by rounding.
    let bias: Vec<f64> = (0..=n)
        .map(|j| {
            let quad: f64 = dp.mu.row(j).iter().zip(mu_over.row(j)).map(|(a, b)| a * b).sum();
            let log_det: f64 = var_r.row(j).iter().map(|v| v.ln()).sum();
            dp.log_alpha[j] - 0.5 * quad - 0.5 * log_det
        })
        .collect();

    let mut out = Matrix::zeros(m, d);
    let mut maps = Vec::with_capacity(params.heads);
    for head in 0..params.heads {
        let q = params.head_queries(inp.queries_pre, head)?;
        let u = params.head_denoising_queries(&q, head)?;
        let u_sq = u.map(|x| x * x);
        let mut scores = u.matmul_transposed(&mu_over)?;
        let quad = u_sq.matmul_transposed(&inv_var_r)?;
        let r = params.head_cols(head);
        let bk = &params.bk[r.clone()];
        for qi in 0..m {
            // Constant across components; cancels in the softmax.
            let key_bias: f64 = q.row(qi).iter().zip(bk).map(|(a, b)| a * b).sum::<f64>() / s;
            for j in 0..=n {
                scores[(qi, j)] += -0.5 * quad[(qi, j)] + bias[j] + key_bias;
            }
        }
        normalise_scores(&mut scores, inp.mask, n)?;

        let mixed = scores.matmul(&interp_query)?.hadamard(&u)?.add(&scores.matmul(&interp_value)?)?;
        let head_out = mixed
            .matmul(&params.wv.col_slice(r.start, r.end))?
            .add_row_vector(&params.bv[r.clone()])?;
        out.set_col_block(r.start, &head_out);
        maps.push(scores);
    }
    Ok((out, maps))
}

/// Training-time denoising multi-head attention: one draw of
/// `π ~ Dir(α)` and `Z̃ ~ N(μ, σ)` over all `n + 1` components, then standard
/// attention over `Z̃` with key bias `log π − ‖Z̃‖²/(2s)`.
pub fn train_dattn_multihead(inp: &DenoisingAttentionInputs<'_>, rng: &mut Rng) -> Result<Matrix> {
    let (m, n) = check_inputs(inp)?;
    let params = inp.params;
    let d = params.model_dim();
    let s = params.head_scale();

    let pi = sample_dirichlet(rng, &inp.dp.alpha())?;
    let z = sample_gaussian(rng, &inp.dp.mu, &inp.dp.sigma)?;
    let bias: Vec<f64> = pi
        .iter()
        .zip(z.row_sq_norms())
        .map(|(p, norm)| p.ln() - norm / (2.0 * s))
        .collect();

    let mut out = Matrix::zeros(m, d);
    for head in 0..params.heads {
        let q = params.head_queries(inp.queries_pre, head)?;
        let k = params.head_keys(&z, head)?;
        let v = params.head_values(&z, head)?;
        let mut scores = q.matmul_transposed(&k)?.scale(1.0 / s);
        for qi in 0..m {
            for (j, b) in bias.iter().enumerate() {
                scores[(qi, j)] += b;
            }
        }
        normalise_scores(&mut scores, inp.mask, n)?;
        out.set_col_block(params.head_cols(head).start, &scores.matmul(&v)?);
    }
    Ok(out)
}

/// Denoising self-attention: keys and values come from the NVIB projection of
/// `z_prev`, queries from `z_prev` itself.
pub fn nv_self_attention(
    z_prev: &Matrix,
    proj: &NvibProjection,
    prior: &EmpiricalPrior,
    params: &AttentionParams,
    mask: &AttentionMask,
) -> Result<Matrix> {
    nv_self_attention_with_weights(z_prev, proj, prior, params, mask).map(|(o, _)| o)
}

pub fn nv_self_attention_with_weights(
    z_prev: &Matrix,
    proj: &NvibProjection,
    prior: &EmpiricalPrior,
    params: &AttentionParams,
    mask: &AttentionMask,
) -> Result<(Matrix, Vec<Matrix>)> {
    let dp = project(z_prev, proj, prior)?;
    eval_dattn_multihead_with_weights(&DenoisingAttentionInputs {
        queries_pre: z_prev,
        dp: &dp,
        params,
        mask,
    })
}

/// Denoising causal self-attention. Token keys are causally masked; the prior
/// key is visible from every position.
pub fn nv_causal_attention(
    z_prev: &Matrix,
    proj: &NvibProjection,
    prior: &EmpiricalPrior,
    params: &AttentionParams,
) -> Result<Matrix> {
    nv_self_attention(z_prev, proj, prior, params, &AttentionMask::Causal)
}
