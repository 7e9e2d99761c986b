//! Seeded inputs shared by the benchmarks.

use nvtrans::numeric::random_normal_matrix;
use nvtrans::nvib::LayerGroup;
use nvtrans::{identity_init, project, AttentionParams, DpPosterior, EmpiricalPrior, Matrix, Rng};

/// One attention site: queries, keys, parameters and the identity-initialised
/// posterior of the keys.
pub struct AttentionCase {
    pub queries: Matrix,
    pub keys: Matrix,
    pub params: AttentionParams,
    pub posterior: DpPosterior,
}

impl AttentionCase {
    /// `len` queries and keys of width `d` split over `h` heads.
    pub fn new(len: usize, d: usize, h: usize, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let scale = 1.0 / (d as f64).sqrt();
        let queries = random_normal_matrix(&mut rng, len, d, 1.0);
        let keys = random_normal_matrix(&mut rng, len, d, 1.0);
        let wq = random_normal_matrix(&mut rng, d, d, scale);
        let wk = random_normal_matrix(&mut rng, d, d, scale);
        let wv = random_normal_matrix(&mut rng, d, d, scale);
        let params = AttentionParams::new(wq, wk, wv, vec![0.0; d], vec![0.0; d], vec![0.0; d], h).expect("valid params");
        let prior = EmpiricalPrior {
            mu_p: vec![0.0; d],
            sigma_p: vec![1.0; d],
            log_alpha0_p: 1.0,
            epsilon_alpha: 1.0,
            layer_group: LayerGroup::Encoder,
            layer_id: 0,
        };
        let proj = identity_init(&prior, 10.0, 1e-38, d, h).expect("valid projection");
        let posterior = project(&keys, &proj, &prior).expect("valid posterior");
        Self {
            queries,
            keys,
            params,
            posterior,
        }
    }
}
