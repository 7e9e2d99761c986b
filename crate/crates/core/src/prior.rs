//! Empirical prior estimation from forward passes over a token corpus.
//!
//! Every attention site of the standard model hands its key latents to a
//! streaming accumulator. Cross-attention sites therefore see the final
//! encoder states, and decoder sites see teacher-forced target prefixes.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{NvError, Result};
use crate::model::{LatentTap, ModelConfig, ModelWeights, Site, TokenSeq, BOS};
use crate::numeric::{Matrix, Rng};
use crate::nvib::EmpiricalPrior;

/// Floor on each per-dimension prior variance.
pub const PRIOR_VARIANCE_FLOOR: f64 = 1e-12;

/// Sequences per shard when accumulating in parallel. Fixed so results do
/// not depend on the thread count.
const SHARD_LEN: usize = 64;

/// One corpus line: a source sequence and the target the decoder is
/// teacher-forced on (`BOS` is prepended at run time).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub src: TokenSeq,
    pub tgt: TokenSeq,
}

/// Parses a corpus: one sequence per line, whitespace-separated token ids.
/// A line `a b c | x y` gives separate source and target; without `|` the
/// target equals the source. Blank lines and `#` comments are skipped.
pub fn parse_corpus(text: &str) -> Result<Vec<Example>> {
    let ids = |part: &str, lineno: usize| -> Result<TokenSeq> {
        part.split_whitespace()
            .map(|tok| {
                tok.parse::<u32>()
                    .map_err(|_| NvError::Input(format!("line {lineno}: {tok:?} is not a token id")))
            })
            .collect()
    };
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (src, tgt) = match line.split_once('|') {
            Some((s, t)) => (ids(s, i + 1)?, ids(t, i + 1)?),
            None => {
                let s = ids(line, i + 1)?;
                (s.clone(), s)
            }
        };
        if src.is_empty() {
            return Err(NvError::Input(format!("line {}: empty source", i + 1)));
        }
        out.push(Example { src, tgt });
    }
    Ok(out)
}

pub fn format_corpus(corpus: &[Example]) -> String {
    let join = |s: &[u32]| s.iter().map(u32::to_string).collect::<Vec<_>>().join(" ");
    let mut out = String::new();
    for ex in corpus {
        if ex.src == ex.tgt {
            let _ = writeln!(out, "{}", join(&ex.src));
        } else {
            let _ = writeln!(out, "{} | {}", join(&ex.src), join(&ex.tgt));
        }
    }
    out
}

/// Seeded synthetic corpus: sequence lengths uniform in `[4, max_len − 1]`,
/// tokens uniform over the non-special ids.
pub fn synthetic_corpus(config: &ModelConfig, sequences: usize, seed: u64) -> Vec<Example> {
    let mut rng = Rng::new(seed);
    let lo = 4.min(config.max_len - 1).max(1);
    let hi = (config.max_len - 1).max(lo);
    let first = BOS as usize + 2;
    let span = config.vocab.saturating_sub(first).max(1);
    (0..sequences)
        .map(|_| {
            let len = lo + rng.below(hi - lo + 1);
            let seq: TokenSeq = (0..len).map(|_| (first + rng.below(span)) as u32).collect();
            Example { src: seq.clone(), tgt: seq }
        })
        .collect()
}

/// Seeded reservoir sample of `⌈fraction·n⌉` sequence indices, returned in
/// ascending order.
pub fn reservoir_indices(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(NvError::Config(format!("fraction must lie in (0, 1], got {fraction}")));
    }
    let k = ((fraction * n as f64).ceil() as usize).min(n);
    let mut rng = Rng::new(seed);
    let mut reservoir: Vec<usize> = (0..k).collect();
    for i in k..n {
        let j = rng.below(i + 1);
        if j < k {
            reservoir[j] = i;
        }
    }
    reservoir.sort_unstable();
    Ok(reservoir)
}

/// Streaming mean and variance of latent vectors plus their scaled squared
/// norms `‖z‖²/(2√(d/h))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Welford {
    pub count: usize,
    pub mean: Vec<f64>,
    pub m2: Vec<f64>,
    pub norm_mean: f64,
    pub norm_m2: f64,
    norm_scale: f64,
}

impl Welford {
    pub fn new(d: usize, h: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; d],
            m2: vec![0.0; d],
            norm_mean: 0.0,
            norm_m2: 0.0,
            norm_scale: 1.0 / (2.0 * ((d / h) as f64).sqrt()),
        }
    }

    pub fn push(&mut self, z: &[f64]) {
        self.count += 1;
        let n = self.count as f64;
        for ((m, s), &x) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(z) {
            let delta = x - *m;
            *m += delta / n;
            *s += delta * (x - *m);
        }
        let q = z.iter().map(|x| x * x).sum::<f64>() * self.norm_scale;
        let delta = q - self.norm_mean;
        self.norm_mean += delta / n;
        self.norm_m2 += delta * (q - self.norm_mean);
    }

    pub fn push_rows(&mut self, z: &Matrix) {
        for row in z.iter_rows() {
            self.push(row);
        }
    }

    /// Pairwise merge of two accumulators.
    pub fn merge(&mut self, other: &Welford) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        for i in 0..self.mean.len() {
            let delta = other.mean[i] - self.mean[i];
            self.mean[i] += delta * nb / n;
            self.m2[i] += other.m2[i] + delta * delta * na * nb / n;
        }
        let delta = other.norm_mean - self.norm_mean;
        self.norm_mean += delta * nb / n;
        self.norm_m2 += other.norm_m2 + delta * delta * na * nb / n;
        self.count += other.count;
    }

    pub fn finish(&self, site: Site) -> Result<EmpiricalPrior> {
        if self.count < 2 {
            return Err(NvError::Statistics(format!(
                "site {site} saw {} latent vectors, need at least 2",
                self.count
            )));
        }
        let denom = (self.count - 1) as f64;
        Ok(EmpiricalPrior {
            mu_p: self.mean.clone(),
            sigma_p: self
                .m2
                .iter()
                .map(|s| (s / denom).max(PRIOR_VARIANCE_FLOOR).sqrt())
                .collect(),
            log_alpha0_p: self.norm_mean,
            epsilon_alpha: (self.norm_m2 / denom).max(0.0).sqrt(),
            layer_group: site.group,
            layer_id: site.layer,
        })
    }
}

/// Per-site accumulators for a model.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorAccumulator {
    config: ModelConfig,
    pub sites: Vec<Welford>,
}

impl PriorAccumulator {
    pub fn new(config: ModelConfig) -> Self {
        Self {
            config,
            sites: vec![Welford::new(config.d, config.h); config.sites()],
        }
    }

    /// Teacher-forced standard forward pass, tapping every site's latents.
    pub fn observe(&mut self, w: &ModelWeights, ex: &Example) -> Result<()> {
        let cfg = self.config;
        let sites = &mut self.sites;
        let mut sink = |site: Site, z: &Matrix| sites[cfg.site_index(site)].push_rows(z);
        let mut tap = LatentTap { sink: &mut sink };
        let enc = w.encode_with(&ex.src, &mut tap)?;
        let mut tgt = Vec::with_capacity(ex.tgt.len() + 1);
        tgt.push(BOS);
        tgt.extend(ex.tgt.iter().take(cfg.max_len - 1));
        w.decode_with(&enc, &tgt, &mut tap)?;
        Ok(())
    }

    pub fn merge(&mut self, other: &PriorAccumulator) {
        for (a, b) in self.sites.iter_mut().zip(&other.sites) {
            a.merge(b);
        }
    }

    pub fn finish(&self) -> Result<Vec<EmpiricalPrior>> {
        self.config
            .all_sites()
            .into_iter()
            .zip(&self.sites)
            .map(|(site, acc)| acc.finish(site))
            .collect()
    }
}

/// Accumulates the given examples in fixed-size shards (in parallel) and
/// merges the shards in order.
pub fn accumulate(w: &ModelWeights, examples: &[&Example], shard_len: usize) -> Result<PriorAccumulator> {
    let shard_len = shard_len.max(1);
    let shards = examples
        .par_chunks(shard_len)
        .map(|chunk| {
            let mut acc = PriorAccumulator::new(w.config);
            for ex in chunk {
                acc.observe(w, ex)?;
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = PriorAccumulator::new(w.config);
    for s in &shards {
        total.merge(s);
    }
    Ok(total)
}

/// Estimates one prior per attention site from a seeded sequence-level
/// subsample of `corpus`.
pub fn estimate_priors(w: &ModelWeights, corpus: &[Example], fraction: f64, seed: u64) -> Result<Vec<EmpiricalPrior>> {
    let picked = reservoir_indices(corpus.len(), fraction, seed)?;
    if picked.is_empty() {
        return Err(NvError::Statistics("corpus is empty after subsampling".into()));
    }
    let examples: Vec<&Example> = picked.iter().map(|&i| &corpus[i]).collect();
    accumulate(w, &examples, SHARD_LEN)?.finish()
}

pub const REPORT_HEADER: &str = "layer,group,mean_mu,mean_sigma2,log_alpha0,epsilon_alpha";

/// Per-site CSV summary, one row per prior in list order.
pub fn prior_report(priors: &[EmpiricalPrior]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for p in priors {
        let d = p.dim().max(1) as f64;
        let mean_mu = p.mu_p.iter().sum::<f64>() / d;
        let mean_var = p.sigma_p.iter().map(|s| s * s).sum::<f64>() / d;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            p.layer_id, p.layer_group, mean_mu, mean_var, p.log_alpha0_p, p.epsilon_alpha
        );
    }
    out
}
