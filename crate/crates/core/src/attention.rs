//! Standard scaled dot-product attention.
//!
//! Multi-head attention here follows the per-head formulation: head `i` uses
//! the column slices `W_i` of width `d/h`, its scores are scaled by
//! `1/√(d/h)`, and its value output lands in column block `i` of the result.
//! Summing zero-padded per-head outputs and concatenating them are the same
//! thing, so no output projection lives in this module.

use serde::{Deserialize, Serialize};

use crate::error::{NvError, Result};
use crate::numeric::{random_normal_matrix, softmax_in_place, softmax_rows, Matrix, Rng};

/// Query/key/value projections of one attention site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub bq: Vec<f64>,
    pub bk: Vec<f64>,
    pub bv: Vec<f64>,
    pub heads: usize,
}

impl AttentionParams {
    pub fn new(
        wq: Matrix,
        wk: Matrix,
        wv: Matrix,
        bq: Vec<f64>,
        bk: Vec<f64>,
        bv: Vec<f64>,
        heads: usize,
    ) -> Result<Self> {
        let p = Self {
            wq,
            wk,
            wv,
            bq,
            bk,
            bv,
            heads,
        };
        p.validate()?;
        Ok(p)
    }

    /// Identity projections with zero biases.
    pub fn identity(d: usize, heads: usize) -> Result<Self> {
        Self::new(
            Matrix::identity(d),
            Matrix::identity(d),
            Matrix::identity(d),
            vec![0.0; d],
            vec![0.0; d],
            vec![0.0; d],
            heads,
        )
    }

    /// Gaussian projections with std `1/√d` and biases with std `bias_std`.
    pub fn random(rng: &mut Rng, d: usize, heads: usize, bias_std: f64) -> Result<Self> {
        let s = 1.0 / (d as f64).sqrt();
        let wq = random_normal_matrix(rng, d, d, s);
        let wk = random_normal_matrix(rng, d, d, s);
        let wv = random_normal_matrix(rng, d, d, s);
        let mut bias = || (0..d).map(|_| bias_std * rng.standard_normal()).collect::<Vec<_>>();
        let (bq, bk, bv) = (bias(), bias(), bias());
        Self::new(wq, wk, wv, bq, bk, bv, heads)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.wq.rows();
        if self.heads == 0 || d == 0 || !d.is_multiple_of(self.heads) {
            return Err(NvError::Config(format!(
                "model dim {d} not divisible by {} heads",
                self.heads
            )));
        }
        for (name, w) in [("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv)] {
            if w.shape() != (d, d) {
                return Err(NvError::Dimension(format!("{name} is {:?}, expected {d}x{d}", w.shape())));
            }
        }
        for (name, b) in [("bq", &self.bq), ("bk", &self.bk), ("bv", &self.bv)] {
            if b.len() != d {
                return Err(NvError::Dimension(format!("{name} has length {}, expected {d}", b.len())));
            }
        }
        Ok(())
    }

    pub fn model_dim(&self) -> usize {
        self.wq.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim() / self.heads
    }

    /// `√(d/h)`, the per-head score scale and query-noise variance.
    pub fn head_scale(&self) -> f64 {
        (self.head_dim() as f64).sqrt()
    }

    pub fn head_cols(&self, head: usize) -> std::ops::Range<usize> {
        let dh = self.head_dim();
        head * dh..(head + 1) * dh
    }

    /// `Q_i = U′ W^Q_i + b^Q_i`.
    pub fn head_queries(&self, u_prime: &Matrix, head: usize) -> Result<Matrix> {
        project_head(u_prime, &self.wq, &self.bq, self.head_cols(head))
    }

    /// `K_i = Z W^K_i + b^K_i`.
    pub fn head_keys(&self, z: &Matrix, head: usize) -> Result<Matrix> {
        project_head(z, &self.wk, &self.bk, self.head_cols(head))
    }

    /// `V_i = Z W^V_i + b^V_i`.
    pub fn head_values(&self, z: &Matrix, head: usize) -> Result<Matrix> {
        project_head(z, &self.wv, &self.bv, self.head_cols(head))
    }

    /// `U_i = Q_i (W^K_i)ᵀ`: head queries mapped back into the space of `Z`.
    pub fn head_denoising_queries(&self, q_head: &Matrix, head: usize) -> Result<Matrix> {
        let r = self.head_cols(head);
        q_head.matmul_transposed(&self.wk.col_slice(r.start, r.end))
    }
}

fn project_head(x: &Matrix, w: &Matrix, b: &[f64], cols: std::ops::Range<usize>) -> Result<Matrix> {
    x.matmul(&w.col_slice(cols.start, cols.end))?
        .add_row_vector(&b[cols])
}

/// Which keys each query may see.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum AttentionMask {
    #[default]
    None,
    /// Query `t` sees keys `0..=t`; requires a square score matrix.
    Causal,
    /// `visible[q][k]`, true = visible.
    Custom(Vec<Vec<bool>>),
}

impl AttentionMask {
    pub fn check(&self, m: usize, n: usize) -> Result<()> {
        match self {
            AttentionMask::None => Ok(()),
            AttentionMask::Causal if m == n => Ok(()),
            AttentionMask::Causal => Err(NvError::Dimension(format!(
                "causal mask needs a square score matrix, got {m}x{n}"
            ))),
            AttentionMask::Custom(v) => {
                if v.len() == m && v.iter().all(|r| r.len() == n) {
                    Ok(())
                } else {
                    Err(NvError::Dimension(format!("custom mask does not cover {m}x{n}")))
                }
            }
        }
    }

    #[inline]
    pub fn visible(&self, q: usize, k: usize) -> bool {
        match self {
            AttentionMask::None => true,
            AttentionMask::Causal => k <= q,
            AttentionMask::Custom(v) => v[q][k],
        }
    }
}

/// Softmax over the visible entries of each row; hidden entries get exactly 0.
pub(crate) fn masked_softmax(scores: &mut Matrix, mask: &AttentionMask) -> Result<()> {
    for q in 0..scores.rows() {
        let row = scores.row_mut(q);
        let mut any = false;
        for (k, s) in row.iter_mut().enumerate() {
            if mask.visible(q, k) {
                any = true;
            } else {
                *s = f64::NEG_INFINITY;
            }
        }
        if !any {
            return Err(NvError::Contract(format!("query {q} has no visible key")));
        }
        softmax_in_place(row);
    }
    Ok(())
}

/// Multi-head scaled dot-product attention of queries `u_prime` (m×d) over
/// `z` (n×d).
pub fn attention(
    u_prime: &Matrix,
    z: &Matrix,
    params: &AttentionParams,
    mask: &AttentionMask,
) -> Result<Matrix> {
    attention_with_weights(u_prime, z, params, mask).map(|(out, _)| out)
}

/// As [`attention`], also returning the per-head softmax matrices.
pub fn attention_with_weights(
    u_prime: &Matrix,
    z: &Matrix,
    params: &AttentionParams,
    mask: &AttentionMask,
) -> Result<(Matrix, Vec<Matrix>)> {
    let d = params.model_dim();
    if u_prime.cols() != d || z.cols() != d {
        return Err(NvError::Dimension(format!(
            "queries {:?} and keys {:?} for model dim {d}",
            u_prime.shape(),
            z.shape()
        )));
    }
    if z.rows() == 0 {
        return Err(NvError::Contract("attention over an empty key set".into()));
    }
    mask.check(u_prime.rows(), z.rows())?;

    let scale = params.head_scale();
    let mut out = Matrix::zeros(u_prime.rows(), d);
    let mut maps = Vec::with_capacity(params.heads);
    for head in 0..params.heads {
        let q = params.head_queries(u_prime, head)?;
        let k = params.head_keys(z, head)?;
        let v = params.head_values(z, head)?;
        let mut scores = q.matmul_transposed(&k)?.scale(1.0 / scale);
        masked_softmax(&mut scores, mask)?;
        out.set_col_block(params.head_cols(head).start, &scores.matmul(&v)?);
        maps.push(scores);
    }
    Ok((out, maps))
}

/// Core attention `softmax(u zᵀ / scale) z`, everything in the space of `z`.
pub fn attn_core(u: &Matrix, z: &Matrix, scale: f64) -> Result<Matrix> {
    if u.cols() != z.cols() {
        return Err(NvError::Dimension(format!(
            "attn_core queries {:?} vs keys {:?}",
            u.shape(),
            z.shape()
        )));
    }
    softmax_rows(&u.matmul_transposed(z)?.scale(1.0 / scale)).matmul(z)
}
