//! Equivalence certification, `τ` sweeps and attention dumps.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::denoising::{AttentionMap, MapCollector};
use crate::error::{NvError, Result};
use crate::model::{forward_nv, forward_standard, greedy_decode, token_overlap, ModelConfig, ModelWeights, NvModel, Site, TokenSeq, BOS};
use crate::numeric::{Matrix, Rng};
use crate::nvib::{LayerGroup, TauConfig, TAU_SIGMA_FLOOR};

/// Bounds of the `τ` search space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TauBounds {
    pub alpha: (f64, f64),
    pub sigma: (f64, f64),
}

impl Default for TauBounds {
    fn default() -> Self {
        Self {
            alpha: (-15.0, 10.0),
            sigma: (TAU_SIGMA_FLOOR, 0.5),
        }
    }
}

impl TauBounds {
    /// The corner where every group is maximally regularised.
    pub fn over_regularised(&self) -> TauConfig {
        TauConfig::uniform(self.alpha.0, self.sigma.1)
    }
}

/// A random token sequence of length `len` over the non-special ids.
pub fn random_tokens(config: &ModelConfig, rng: &mut Rng, len: usize) -> TokenSeq {
    let first = BOS as usize + 2;
    let span = config.vocab.saturating_sub(first).max(1);
    (0..len).map(|_| (first + rng.below(span)) as u32).collect()
}

/// A random source and teacher-forced target (starting with `BOS`).
pub fn random_pair(config: &ModelConfig, rng: &mut Rng) -> (TokenSeq, TokenSeq) {
    let src_len = 1 + rng.below(config.max_len);
    let tgt_len = rng.below(config.max_len);
    let src = random_tokens(config, rng, src_len);
    let mut tgt = vec![BOS];
    tgt.extend(random_tokens(config, rng, tgt_len));
    (src, tgt)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CertifyOptions {
    pub trials: usize,
    pub tol: f64,
    pub seed: u64,
    pub max_steps: usize,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        Self {
            trials: 20,
            tol: 1e-5,
            seed: 0,
            max_steps: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CertifyReport {
    pub trials: usize,
    pub max_logit_diff: f64,
    /// Mean greedy-decode overlap with the standard model, in percent.
    pub overlap: f64,
    /// Trials whose decodes matched exactly.
    pub identical_decodes: usize,
    pub pass: bool,
}

/// Compares the NV model against its base on `trials` random inputs.
pub fn certify(m: &NvModel, opts: &CertifyOptions) -> Result<CertifyReport> {
    if opts.trials == 0 {
        return Err(NvError::Config("certification needs at least one trial".into()));
    }
    let w = &m.base;
    let mut rng = Rng::new(opts.seed);
    let pairs: Vec<_> = (0..opts.trials).map(|_| random_pair(&w.config, &mut rng)).collect();
    let per_trial = pairs
        .par_iter()
        .map(|(src, tgt)| {
            let diff = forward_standard(w, src, tgt)?.max_abs_diff(&forward_nv(m, src, tgt)?);
            let a = greedy_decode(w, src, opts.max_steps)?;
            let b = greedy_decode(m, src, opts.max_steps)?;
            Ok((diff, token_overlap(&a, &b), a == b))
        })
        .collect::<Result<Vec<_>>>()?;
    let max_logit_diff = per_trial.iter().map(|t| t.0).fold(0.0, f64::max);
    let overlap = per_trial.iter().map(|t| t.1).sum::<f64>() / opts.trials as f64;
    let identical_decodes = per_trial.iter().filter(|t| t.2).count();
    Ok(CertifyReport {
        trials: opts.trials,
        max_logit_diff,
        overlap,
        identical_decodes,
        pass: max_logit_diff <= opts.tol && identical_decodes == opts.trials,
    })
}

/// Parses a sweep spec into `τ` points.
///
/// * `identity`: the single equivalence point
/// * `interp:N`: `N` evenly spaced points from identity to the
///   over-regularised corner
/// * `random:N`: `N` seeded draws, `τ_α` uniform and `τ_σ` log-uniform within
///   the bounds, independently per group
/// * `grid:A1,A2,..@S1,S2,..`: Cartesian product, same values for all groups
/// * `points:a_e,a_c,a_d,s_e,s_c,s_d;...`: explicit six-value points
pub fn parse_grid(spec: &str, bounds: &TauBounds, seed: u64) -> Result<Vec<TauConfig>> {
    let bad = |msg: &str| NvError::Config(format!("grid spec {spec:?}: {msg}"));
    let floats = |s: &str| -> Result<Vec<f64>> {
        s.split(',')
            .map(|x| x.trim().parse::<f64>().map_err(|_| bad(&format!("{x:?} is not a number"))))
            .collect()
    };
    let count = |s: &str| -> Result<usize> {
        match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(bad("expected a positive count")),
        }
    };
    let (kind, rest) = spec.split_once(':').unwrap_or((spec, ""));
    let points = match kind.trim() {
        "identity" if rest.is_empty() => vec![TauConfig::identity()],
        "interp" => {
            let n = count(rest)?;
            let far = bounds.over_regularised();
            (0..n)
                .map(|i| {
                    let t = if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
                    TauConfig::identity().lerp(&far, t)
                })
                .collect()
        }
        "random" => {
            let n = count(rest)?;
            let mut rng = Rng::new(seed);
            let (ls0, ls1) = (bounds.sigma.0.ln(), bounds.sigma.1.ln());
            (0..n)
                .map(|_| {
                    let mut t = TauConfig::identity();
                    for g in LayerGroup::ALL {
                        let a = rng.uniform_range(bounds.alpha.0, bounds.alpha.1);
                        let s = rng.uniform_range(ls0, ls1).exp().clamp(bounds.sigma.0, bounds.sigma.1);
                        t.set_group(g, a, s);
                    }
                    t
                })
                .collect()
        }
        "grid" => {
            let (a, s) = rest.split_once('@').ok_or_else(|| bad("expected ALPHAS@SIGMAS"))?;
            let (alphas, sigmas) = (floats(a)?, floats(s)?);
            alphas
                .iter()
                .flat_map(|&a| sigmas.iter().map(move |&s| TauConfig::uniform(a, s)))
                .collect()
        }
        "points" => rest
            .split(';')
            .map(|p| {
                let v = floats(p)?;
                if v.len() != 6 {
                    return Err(bad("each point needs six values"));
                }
                Ok(TauConfig {
                    tau_alpha_e: v[0],
                    tau_alpha_c: v[1],
                    tau_alpha_d: v[2],
                    tau_sigma_e: v[3],
                    tau_sigma_c: v[4],
                    tau_sigma_d: v[5],
                })
            })
            .collect::<Result<_>>()?,
        _ => return Err(bad("unknown kind; use identity, interp:N, random:N, grid:..@.. or points:..")),
    };
    for p in &points {
        p.validate().map_err(|e| bad(&e.to_string()))?;
    }
    Ok(points)
}

/// Metrics of one sweep point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub taus: TauConfig,
    pub max_logit_diff: f64,
    pub overlap: f64,
    /// Mean head-averaged attention on the prior, per group
    /// (encoder, cross, decoder).
    pub prior_mass: [f64; 3],
    pub mean_decode_len: f64,
}

impl SweepRow {
    pub fn is_finite(&self) -> bool {
        self.max_logit_diff.is_finite()
            && self.overlap.is_finite()
            && self.prior_mass.iter().all(|x| x.is_finite())
            && self.mean_decode_len.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepOptions {
    /// Number of random evaluation sources.
    pub inputs: usize,
    pub seed: u64,
    pub max_steps: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            inputs: 20,
            seed: 0,
            max_steps: 16,
        }
    }
}

fn group_slot(g: LayerGroup) -> usize {
    match g {
        LayerGroup::Encoder => 0,
        LayerGroup::Cross => 1,
        LayerGroup::Decoder => 2,
    }
}

/// Evaluates each point against the standard model. Points run in parallel;
/// rows come back in input order.
pub fn sweep(m: &NvModel, points: &[TauConfig], opts: &SweepOptions) -> Result<Vec<SweepRow>> {
    if opts.inputs == 0 {
        return Err(NvError::Config("sweep needs at least one evaluation input".into()));
    }
    let w = &m.base;
    let mut rng = Rng::new(opts.seed);
    let pairs: Vec<_> = (0..opts.inputs).map(|_| random_pair(&w.config, &mut rng)).collect();
    let baseline = pairs
        .iter()
        .map(|(src, tgt)| Ok((forward_standard(w, src, tgt)?, greedy_decode(w, src, opts.max_steps)?)))
        .collect::<Result<Vec<_>>>()?;

    points
        .par_iter()
        .map(|&taus| {
            let nv = m.with_taus(taus)?;
            let mut diff: f64 = 0.0;
            let mut overlap = 0.0;
            let mut len = 0.0;
            let mut mass = [0.0; 3];
            let mut counts = [0usize; 3];
            for ((src, tgt), (logits, decoded)) in pairs.iter().zip(&baseline) {
                let mut maps = MapCollector::default();
                let out = nv.forward_observed(src, tgt, &mut maps)?;
                diff = diff.max(logits.max_abs_diff(&out));
                if !out.all_finite() {
                    diff = f64::NAN;
                }
                for map in &maps.maps {
                    let k = group_slot(map.group);
                    for p in map.prior_weights() {
                        mass[k] += p;
                        counts[k] += 1;
                    }
                }
                let ours = greedy_decode(&nv, src, opts.max_steps)?;
                overlap += token_overlap(decoded, &ours);
                len += ours.len() as f64;
            }
            let n = pairs.len() as f64;
            for k in 0..3 {
                mass[k] /= counts[k].max(1) as f64;
            }
            Ok(SweepRow {
                taus,
                max_logit_diff: diff,
                overlap: overlap / n,
                prior_mass: mass,
                mean_decode_len: len / n,
            })
        })
        .collect()
}

pub const SWEEP_HEADER: &str = "tau_alpha_e,tau_alpha_c,tau_alpha_d,tau_sigma_e,tau_sigma_c,tau_sigma_d,\
logit_max_diff,overlap_pct,prior_mass_encoder,prior_mass_cross,prior_mass_decoder,mean_decode_len";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        let taus: Vec<String> = r.taus.named().iter().map(|(_, v)| format!("{v:e}")).collect();
        let _ = writeln!(
            out,
            "{},{:e},{},{:e},{:e},{:e},{}",
            taus.join(","),
            r.max_logit_diff,
            r.overlap,
            r.prior_mass[0],
            r.prior_mass[1],
            r.prior_mass[2],
            r.mean_decode_len
        );
    }
    out
}

/// Head-averaged attention map of one site, `m × (n+1)` with the prior in
/// the last column. Decoder and cross sites run on the teacher-forced
/// target `tgt`.
pub fn attention_dump(m: &NvModel, src: &[u32], tgt: &[u32], site: Site) -> Result<Matrix> {
    let cfg = &m.base.config;
    let layers = cfg.layers_in(site.group);
    if site.layer >= layers {
        return Err(NvError::Config(format!(
            "layer {} out of range: the {} group has {layers} layers",
            site.layer, site.group
        )));
    }
    let mut found: Option<AttentionMap> = None;
    let mut grab = |map: AttentionMap| {
        if map.group == site.group && map.layer_id == site.layer {
            found = Some(map);
        }
    };
    m.forward_observed(src, tgt, &mut grab)?;
    let map = found.ok_or_else(|| NvError::Contract(format!("site {site} produced no attention map")))?;
    Ok(map.head_average())
}

/// CSV of an attention dump: header `k0,..,k{n-1},[P]`, one row per query.
pub fn attention_csv(map: &Matrix) -> String {
    let n = map.cols() - 1;
    let mut header: Vec<String> = (0..n).map(|j| format!("k{j}")).collect();
    header.push("[P]".into());
    let mut out = header.join(",");
    out.push('\n');
    for row in map.iter_rows() {
        let cells: Vec<String> = row.iter().map(|x| format!("{x:e}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties. `None` when either
/// side is constant or the lengths differ.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Convenience for tests and tools: base model, priors from a synthetic
/// corpus, reinterpreted at `taus`.
pub fn toy_nv_model(config: ModelConfig, seed: u64, corpus_len: usize, taus: TauConfig) -> Result<NvModel> {
    let w = ModelWeights::init(config, seed)?;
    let corpus = crate::prior::synthetic_corpus(&config, corpus_len, seed.wrapping_add(1));
    let priors = crate::prior::estimate_priors(&w, &corpus, 1.0, seed)?;
    crate::model::reinterpret(w, priors, taus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::numeric::Rng;

    fn small() -> ModelConfig {
        ModelConfig {
            vocab: 24,
            d: 8,
            h: 2,
            layers_enc: 2,
            layers_dec: 2,
            ffn_dim: 16,
            max_len: 10,
        }
    }

    #[test]
    fn spearman_known_values() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]), None);
        // Ties: ranks (1, 2.5, 2.5, 4) against (1, 2, 3, 4).
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[0.0, 7.0, 7.0, 9.0]).unwrap();
        let expected = 4.5 / (5.0f64 * 4.5).sqrt();
        assert!((r - expected).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn spearman_is_bounded(xs in prop::collection::vec(-5.0f64..5.0, 3..20), seed in 0u64..100) {
            let mut rng = Rng::new(seed);
            let ys: Vec<f64> = xs.iter().map(|_| rng.standard_normal()).collect();
            if let Some(r) = spearman(&xs, &ys) {
                prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
            }
        }
    }

    #[test]
    fn grid_specs() {
        let b = TauBounds::default();
        assert_eq!(parse_grid("identity", &b, 0).unwrap(), vec![TauConfig::identity()]);
        let interp = parse_grid("interp:10", &b, 0).unwrap();
        assert_eq!(interp.len(), 10);
        assert_eq!(interp[0], TauConfig::identity());
        assert_eq!(interp[9], TauConfig::uniform(-15.0, 0.5));
        let r = parse_grid("random:5", &b, 3).unwrap();
        assert_eq!(r, parse_grid("random:5", &b, 3).unwrap());
        assert_ne!(r, parse_grid("random:5", &b, 4).unwrap());
        for t in &r {
            for (name, v) in t.named() {
                let (lo, hi) = if name.starts_with("tau_alpha") { b.alpha } else { b.sigma };
                assert!(v >= lo && v <= hi, "{name} = {v}");
            }
        }
        assert_eq!(parse_grid("grid:1,2@0.1,0.2,0.3", &b, 0).unwrap().len(), 6);
        let p = parse_grid("points:1,2,3,0.1,0.2,0.3", &b, 0).unwrap();
        assert_eq!(p[0].tau_alpha_d, 3.0);
        assert_eq!(p[0].tau_sigma_c, 0.2);
        for bad in ["", "random:0", "random:x", "grid:1,2", "points:1,2", "nope:3", "grid:1@0", "identity:2"] {
            assert!(matches!(parse_grid(bad, &b, 0), Err(NvError::Config(_))), "{bad}");
        }
    }

    #[test]
    fn certify_identity_and_regularised() {
        let m = toy_nv_model(small(), 1, 60, TauConfig::identity()).unwrap();
        let opts = CertifyOptions {
            trials: 5,
            ..Default::default()
        };
        let r = certify(&m, &opts).unwrap();
        assert!(r.pass, "{r:?}");
        assert_eq!(r.overlap, 100.0);
        let reg = m.with_taus(TauConfig::uniform(10.0, 0.5)).unwrap();
        assert!(!certify(&reg, &opts).unwrap().pass);
        assert!(certify(&m, &CertifyOptions { trials: 0, ..opts }).is_err());
    }

    #[test]
    fn sweep_rows_in_order_and_reproducible() {
        let m = toy_nv_model(small(), 2, 60, TauConfig::identity()).unwrap();
        let points = parse_grid("random:4", &TauBounds::default(), 7).unwrap();
        let opts = SweepOptions {
            inputs: 4,
            ..Default::default()
        };
        let rows = sweep(&m, &points, &opts).unwrap();
        assert_eq!(rows.iter().map(|r| r.taus).collect::<Vec<_>>(), points);
        assert_eq!(sweep_csv(&rows), sweep_csv(&sweep(&m, &points, &opts).unwrap()));
        let csv = sweep_csv(&rows);
        assert_eq!(csv.lines().next().unwrap(), SWEEP_HEADER);
        assert!(csv.lines().all(|l| l.split(',').count() == 12));

        let id = sweep(&m, &[TauConfig::identity()], &opts).unwrap()[0];
        assert_eq!(id.overlap, 100.0);
        assert!(id.max_logit_diff <= 1e-5);
        assert!(id.prior_mass.iter().all(|&p| p < 1e-6));
    }

    #[test]
    fn attention_dump_shape_and_range() {
        let m = toy_nv_model(small(), 3, 60, TauConfig::identity()).unwrap();
        let src = [5, 6, 7, 8];
        let tgt = [BOS, 9, 10];
        let cross = attention_dump(&m, &src, &tgt, Site::new(LayerGroup::Cross, 1)).unwrap();
        assert_eq!(cross.shape(), (3, 5));
        let enc = attention_dump(&m, &src, &tgt, Site::new(LayerGroup::Encoder, 0)).unwrap();
        assert_eq!(enc.shape(), (4, 5));
        for row in cross.iter_rows().chain(enc.iter_rows()) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row[row.len() - 1] < 1e-6);
        }
        let csv = attention_csv(&cross);
        assert_eq!(csv.lines().next().unwrap(), "k0,k1,k2,k3,[P]");
        assert!(matches!(
            attention_dump(&m, &src, &tgt, Site::new(LayerGroup::Decoder, 2)),
            Err(NvError::Config(_))
        ));
    }
}
