//! Acceptance suite. Each test checks one criterion and prints a single
//! `PASS`/`FAIL` line to stdout (bypassing the test harness capture).

use std::io::Write;
use std::time::Instant;

use nvtrans::attention::attn_core;
use nvtrans::denoising::{eval_dattn_multihead, train_dattn_multihead, DenoisingAttentionInputs, MapCollector};
use nvtrans::experiments::{parse_grid, random_tokens, spearman, sweep, SweepOptions, TauBounds};
use nvtrans::mixture::{build_f_z, dattn_gaussians_oracle, dattn_impulses};
use nvtrans::model::{forward_nv, forward_standard, greedy_decode, reinterpret, ModelConfig, ModelWeights, NvModel, BOS};
use nvtrans::numeric::{random_normal_matrix, Matrix, Rng};
use nvtrans::nvib::{to_gaussian_mixture, DpPosterior, LayerGroup, TauConfig};
use nvtrans::prior::{accumulate, estimate_priors, synthetic_corpus, Example, Welford};
use nvtrans::{AttentionMask, AttentionParams, Site};

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let line = format!(
        "criterion {id} [{}] {name}: {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(pass, "criterion {id} failed: {detail}");
}

fn toy(seed: u64, corpus_len: usize) -> NvModel {
    let cfg = ModelConfig::default();
    let w = ModelWeights::init(cfg, seed).unwrap();
    let corpus = synthetic_corpus(&cfg, corpus_len, 1000 + seed);
    let priors = estimate_priors(&w, &corpus, 1.0, seed).unwrap();
    reinterpret(w, priors, TauConfig::identity()).unwrap()
}

#[test]
fn criterion_1_impulse_mixture_equals_attention() {
    let start = Instant::now();
    let mut rng = Rng::new(1);
    let mut worst: f64 = 0.0;
    for i in 0..200 {
        let d = [2, 4, 16][i % 3];
        let n = 1 + rng.below(8);
        let m = 1 + rng.below(4);
        let z = random_normal_matrix(&mut rng, n, d, 1.5);
        let u = random_normal_matrix(&mut rng, m, d, 1.5);
        let scale = (d as f64).sqrt();
        let a = dattn_impulses(&u, &build_f_z(&z, scale), scale).unwrap();
        let b = attn_core(&u, &z, scale).unwrap();
        worst = worst.max(a.max_abs_diff(&b));
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        1,
        "impulse-mixture denoising equals attention",
        worst <= 1e-9 && secs < 5.0,
        &format!("max |diff| {worst:.2e} over 200 instances (tol 1e-9), {secs:.2}s (limit 5s)"),
    );
}

#[test]
fn criterion_2_identity_initialisation_equivalence() {
    let start = Instant::now();
    let cfg = ModelConfig::default();
    let mut worst: f64 = 0.0;
    let mut decodes = 0;
    let mut identical = 0;
    let mut sites_seen = true;
    for seed in 0..20u64 {
        let m = toy(seed, 100);
        let mut rng = Rng::new(500 + seed);
        for len in [3, 12, cfg.max_len - 1] {
            let src = random_tokens(&cfg, &mut rng, len);
            let mut tgt = vec![BOS];
            tgt.extend(random_tokens(&cfg, &mut rng, len));
            let std = forward_standard(&m.base, &src, &tgt).unwrap();
            let mut maps = MapCollector::default();
            let nv = m.forward_observed(&src, &tgt, &mut maps).unwrap();
            worst = worst.max(std.max_abs_diff(&nv));
            for g in LayerGroup::ALL {
                sites_seen &= maps.maps.iter().filter(|x| x.group == g).count() == cfg.layers_in(g);
            }
            decodes += 1;
            if greedy_decode(&m.base, &src, 16).unwrap() == greedy_decode(&m, &src, 16).unwrap() {
                identical += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        2,
        "identity initialisation reproduces the standard model",
        worst <= 1e-5 && identical == decodes && sites_seen && secs < 30.0,
        &format!(
            "max |logit diff| {worst:.2e} (tol 1e-5), decodes identical {identical}/{decodes}, \
             all groups denoising {sites_seen}, {secs:.2}s (limit 30s)"
        ),
    );
}

#[test]
fn criterion_3_single_head_matches_mixture_oracle() {
    let mut rng = Rng::new(3);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let d = 2 + rng.below(6);
        let n = 1 + rng.below(6);
        let params = AttentionParams::random(&mut rng, d, 1, 0.3).unwrap();
        // Per-component, per-dimension σ spanning zero to well above √d.
        let mu = random_normal_matrix(&mut rng, n + 1, d, 1.0);
        let sigma = Matrix::from_fn(n + 1, d, |_, _| 2.0 * rng.uniform());
        let log_alpha = (0..=n).map(|_| 2.0 * rng.standard_normal()).collect();
        let dp = DpPosterior::new(mu, sigma, log_alpha).unwrap();
        let m = 1 + rng.below(3);
        let u_pre = random_normal_matrix(&mut rng, m, d, 1.0);
        let fast = eval_dattn_multihead(&DenoisingAttentionInputs {
            queries_pre: &u_pre,
            dp: &dp,
            params: &params,
            mask: &AttentionMask::None,
        })
        .unwrap();
        let q = params.head_queries(&u_pre, 0).unwrap();
        let u = params.head_denoising_queries(&q, 0).unwrap();
        let oracle = dattn_gaussians_oracle(&u, &to_gaussian_mixture(&dp), params.head_scale())
            .unwrap()
            .matmul(&params.wv)
            .unwrap()
            .add_row_vector(&params.bv)
            .unwrap();
        worst = worst.max(fast.max_abs_diff(&oracle));
    }
    report(
        3,
        "evaluation path equals Gaussian-mixture oracle (h=1, mixed σ)",
        worst <= 1e-9,
        &format!("max |diff| {worst:.2e} over 100 posteriors (tol 1e-9)"),
    );
}

#[test]
fn criterion_4_prior_collapse() {
    let cfg = ModelConfig::default();
    let mut lowest: f64 = 1.0;
    let mut rows = 0;
    let mut maps_seen = 0;
    for seed in 0..3u64 {
        let m = toy(seed, 100).with_taus(TauConfig::uniform(-30.0, 1e-38)).unwrap();
        let mut rng = Rng::new(40 + seed);
        for len in [2, 9, 20] {
            let src = random_tokens(&cfg, &mut rng, len);
            let mut tgt = vec![BOS];
            tgt.extend(random_tokens(&cfg, &mut rng, len));
            let mut maps = MapCollector::default();
            m.forward_observed(&src, &tgt, &mut maps).unwrap();
            maps_seen += maps.maps.len();
            for map in &maps.maps {
                for p in map.prior_weights() {
                    lowest = lowest.min(p);
                    rows += 1;
                }
            }
        }
    }
    report(
        4,
        "τ_α = −30 sends attention to the prior",
        lowest > 0.99 && maps_seen == 9 * cfg.sites(),
        &format!("min prior weight {lowest:.6} over {rows} query rows in {maps_seen} maps (need > 0.99)"),
    );
}

#[test]
fn criterion_5_smooth_regularisation() {
    let points = parse_grid("interp:10", &TauBounds::default(), 0).unwrap();
    let grid: Vec<f64> = (0..points.len()).map(|i| i as f64).collect();
    let mut details = Vec::new();
    let mut pass = true;
    for seed in 0..3u64 {
        let m = toy(seed, 100);
        let rows = sweep(&m, &points, &SweepOptions { inputs: 20, seed, max_steps: 16 }).unwrap();
        let finite = rows.iter().all(|r| r.is_finite());
        let overlaps: Vec<f64> = rows.iter().map(|r| r.overlap).collect();
        let rho = spearman(&grid, &overlaps);
        let ok = finite && matches!(rho, Some(r) if r < 0.0);
        pass &= ok;
        let curve: Vec<String> = overlaps.iter().map(|o| format!("{o:.0}")).collect();
        details.push(format!(
            "model {seed}: ρ {} finite {finite} overlap [{}]",
            rho.map_or("undefined".into(), |r| format!("{r:.3}")),
            curve.join(" ")
        ));
    }
    report(5, "decode overlap falls along identity → over-regularised", pass, &details.join("; "));
}

#[test]
fn criterion_6_prior_data_efficiency() {
    let cfg = ModelConfig::default();
    let w = ModelWeights::init(cfg, 0).unwrap();
    let corpus = synthetic_corpus(&cfg, 10_000, 6);
    let full = estimate_priors(&w, &corpus, 1.0, 1).unwrap();
    let sub = estimate_priors(&w, &corpus, 0.001, 1).unwrap();
    let tol = 1e-5;
    let points = [TauConfig::identity(), TauConfig::uniform(-30.0, 1e-38)];
    let opts = SweepOptions { inputs: 20, seed: 6, max_steps: 16 };
    let metrics = |priors: Vec<_>| {
        let m = reinterpret(w.clone(), priors, TauConfig::identity()).unwrap();
        let rows = sweep(&m, &points, &opts).unwrap();
        let mass = rows[1].prior_mass.iter().sum::<f64>() / 3.0;
        (rows[0].max_logit_diff, mass)
    };
    let (diff_full, mass_full) = metrics(full);
    let (diff_sub, mass_sub) = metrics(sub);
    // Identity-τ logit differences sit at rounding level, so the relative
    // comparison carries an absolute allowance of 5% of the certification
    // tolerance.
    let close = |a: f64, b: f64, floor: f64| (a - b).abs() <= 0.05 * a.abs().max(b.abs()) + floor;
    let pass = close(diff_full, diff_sub, 0.05 * tol) && close(mass_full, mass_sub, 0.0);
    report(
        6,
        "priors from a 0.1% subsample certify like full-corpus priors",
        pass,
        &format!(
            "identity logit diff full {diff_full:.2e} vs subsample {diff_sub:.2e}; \
             collapse prior mass full {mass_full:.6} vs subsample {mass_sub:.6}"
        ),
    );
}

#[test]
fn criterion_7_training_path_consistency() {
    let mut rng = Rng::new(7);
    let (d, n, m) = (8, 5, 3);
    let params = AttentionParams::random(&mut rng, d, 2, 0.2).unwrap();
    let mu = random_normal_matrix(&mut rng, n + 1, d, 1.0);
    let sigma = Matrix::filled(n + 1, d, 1e-3);
    let log_alpha = (0..=n).map(|_| 12.0 + 0.5 * rng.standard_normal()).collect();
    let dp = DpPosterior::new(mu, sigma, log_alpha).unwrap();
    let u = random_normal_matrix(&mut rng, m, d, 1.0);
    let inp = DenoisingAttentionInputs {
        queries_pre: &u,
        dp: &dp,
        params: &params,
        mask: &AttentionMask::None,
    };
    let eval = eval_dattn_multihead(&inp).unwrap();
    let draws = 1000;
    let mut sum = Matrix::zeros(m, d);
    let mut sum_sq = Matrix::zeros(m, d);
    let mut sampler = Rng::new(77);
    for _ in 0..draws {
        let s = train_dattn_multihead(&inp, &mut sampler).unwrap();
        sum = sum.add(&s).unwrap();
        sum_sq = sum_sq.add(&s.hadamard(&s).unwrap()).unwrap();
    }
    let k = draws as f64;
    let mut worst_z: f64 = 0.0;
    let mut violations = 0;
    for r in 0..m {
        for c in 0..d {
            let mean = sum[(r, c)] / k;
            let var = ((sum_sq[(r, c)] - k * mean * mean) / (k - 1.0)).max(0.0);
            let se = (var / k).sqrt();
            let gap = (mean - eval[(r, c)]).abs();
            if gap > 3.0 * se + 1e-12 {
                violations += 1;
            }
            if se > 0.0 {
                worst_z = worst_z.max(gap / se);
            }
        }
    }
    report(
        7,
        "Monte-Carlo mean of the training path matches the evaluation path",
        violations == 0,
        &format!("{draws} draws, largest |mean − eval| / SE {worst_z:.2} (limit 3), {violations} coordinates outside"),
    );
}

fn two_pass(vs: &[Vec<f64>], scale: f64) -> (Vec<f64>, Vec<f64>, f64, f64) {
    let n = vs.len() as f64;
    let d = vs[0].len();
    let mean: Vec<f64> = (0..d).map(|i| vs.iter().map(|v| v[i]).sum::<f64>() / n).collect();
    let var: Vec<f64> = (0..d)
        .map(|i| vs.iter().map(|v| (v[i] - mean[i]).powi(2)).sum::<f64>() / (n - 1.0))
        .collect();
    let q: Vec<f64> = vs.iter().map(|v| v.iter().map(|x| x * x).sum::<f64>() / scale).collect();
    let qm = q.iter().sum::<f64>() / n;
    let qs = (q.iter().map(|x| (x - qm).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    (mean, var, qm, qs)
}

#[test]
fn criterion_8_estimator_correctness() {
    let cfg = ModelConfig {
        max_len: 12,
        ..ModelConfig::default()
    };
    let w = ModelWeights::init(cfg, 8).unwrap();
    let corpus = synthetic_corpus(&cfg, 60, 80);
    let refs: Vec<&Example> = corpus.iter().collect();

    let mut store: Vec<Vec<Vec<f64>>> = vec![Vec::new(); cfg.sites()];
    for ex in &corpus {
        let mut sink = |s: Site, z: &Matrix| store[cfg.site_index(s)].extend(z.iter_rows().map(<[f64]>::to_vec));
        let mut tap = nvtrans::model::LatentTap { sink: &mut sink };
        let enc = w.encode_with(&ex.src, &mut tap).unwrap();
        let mut tgt = vec![BOS];
        tgt.extend(&ex.tgt);
        w.decode_with(&enc, &tgt, &mut tap).unwrap();
    }
    let tokens = store.iter().map(Vec::len).max().unwrap();
    let scale = 2.0 * ((cfg.d / cfg.h) as f64).sqrt();

    let streamed = estimate_priors(&w, &corpus, 1.0, 0).unwrap();
    let mut oracle_gap: f64 = 0.0;
    for (p, vs) in streamed.iter().zip(&store) {
        let (mean, var, qm, qs) = two_pass(vs, scale);
        for i in 0..cfg.d {
            oracle_gap = oracle_gap.max((p.mu_p[i] - mean[i]).abs());
            oracle_gap = oracle_gap.max((p.sigma_p[i].powi(2) - var[i]).abs());
        }
        oracle_gap = oracle_gap.max((p.log_alpha0_p - qm).abs()).max((p.epsilon_alpha - qs).abs());
    }

    // Plain one-vector-at-a-time Welford on the stored latents, no sharding.
    let mut plain_gap: f64 = 0.0;
    for (p, vs) in streamed.iter().zip(&store) {
        let mut acc = Welford::new(cfg.d, cfg.h);
        vs.iter().for_each(|v| acc.push(v));
        let q = acc.finish(Site::new(p.layer_group, p.layer_id)).unwrap();
        plain_gap = plain_gap.max((q.log_alpha0_p - p.log_alpha0_p).abs());
        for i in 0..cfg.d {
            plain_gap = plain_gap.max((q.mu_p[i] - p.mu_p[i]).abs());
        }
    }

    let single = accumulate(&w, &refs, usize::MAX).unwrap().finish().unwrap();
    let mut shard_gap: f64 = 0.0;
    for shard in [1, 2, 5, 17] {
        let many = accumulate(&w, &refs, shard).unwrap().finish().unwrap();
        for (a, b) in single.iter().zip(&many) {
            for i in 0..cfg.d {
                shard_gap = shard_gap.max((a.mu_p[i] - b.mu_p[i]).abs());
                shard_gap = shard_gap.max((a.sigma_p[i] - b.sigma_p[i]).abs());
            }
            shard_gap = shard_gap.max((a.log_alpha0_p - b.log_alpha0_p).abs());
            shard_gap = shard_gap.max((a.epsilon_alpha - b.epsilon_alpha).abs());
        }
    }
    report(
        8,
        "streaming prior statistics match two-pass oracle and ignore sharding",
        oracle_gap <= 1e-9 && plain_gap <= 1e-9 && shard_gap <= 1e-9 && tokens <= 1000,
        &format!(
            "oracle gap {oracle_gap:.2e}, unsharded gap {plain_gap:.2e}, shard-merge gap {shard_gap:.2e} \
             (tol 1e-9), up to {tokens} vectors per site"
        ),
    );
}

#[test]
fn criterion_9_causality_and_prior_visibility() {
    let cfg = ModelConfig::default();
    let base = toy(9, 100);
    let mut rng = Rng::new(90);
    let mut worst: f64 = 0.0;
    for taus in [TauConfig::identity(), TauConfig::uniform(0.0, 0.2), TauConfig::uniform(-5.0, 0.5)] {
        let m = base.with_taus(taus).unwrap();
        for _ in 0..5 {
            let src = random_tokens(&cfg, &mut rng, 7);
            let mut tgt = vec![BOS];
            tgt.extend(random_tokens(&cfg, &mut rng, 9));
            let full = forward_nv(&m, &src, &tgt).unwrap();
            for t in 0..tgt.len() - 1 {
                let mut changed = tgt.clone();
                for tok in &mut changed[t + 1..] {
                    *tok = random_tokens(&cfg, &mut rng, 1)[0];
                }
                let other = forward_nv(&m, &src, &changed).unwrap();
                for r in 0..=t {
                    for (a, b) in full.row(r).iter().zip(other.row(r)) {
                        worst = worst.max((a - b).abs());
                    }
                }
            }
        }
    }
    // The prior column stays visible to the very first decoder position.
    let open = base.with_taus(TauConfig::uniform(0.0, 0.2)).unwrap();
    let mut maps = MapCollector::default();
    open.forward_observed(&[5, 6, 7], &[BOS, 8, 9], &mut maps).unwrap();
    let first: Vec<f64> = maps
        .maps
        .iter()
        .filter(|m| m.group == LayerGroup::Decoder)
        .map(|m| m.prior_weights()[0])
        .collect();
    let visible = first.iter().all(|&p| p > 1e-3);
    report(
        9,
        "decoder is causal and the prior is visible at position 1",
        worst == 0.0 && visible,
        &format!(
            "max change of earlier logits {worst:.2e} (must be 0), prior weight at position 1 per decoder layer {first:.4?}"
        ),
    );
}
