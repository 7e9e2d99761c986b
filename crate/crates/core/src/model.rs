//! A toy pre-norm encoder-decoder Transformer that runs either with standard
//! attention or with every attention site replaced by its denoising variant.
//!
//! Attention sites are indexed in a fixed order: the `layers_enc` encoder
//! self-attention sites, then the `layers_dec` cross-attention sites, then the
//! `layers_dec` decoder causal sites. Each NVIB projection reads the
//! post-norm input of its sublayer; cross-attention sites read the final
//! (normed) encoder states.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::attention::{attention_with_weights, AttentionMask, AttentionParams};
use crate::denoising::{eval_dattn_multihead_with_weights, AttentionMap, AttentionObserver, DenoisingAttentionInputs};
use crate::error::{NvError, Result};
use crate::numeric::{random_normal_matrix, Matrix, Rng};
use crate::nvib::{identity_init, project, EmpiricalPrior, LayerGroup, NvibProjection, TauConfig};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;

const LN_EPS: f64 = 1e-5;

/// Multiplier on the random query projection at init.
const QUERY_SCALE: f64 = 0.1;

pub type TokenSeq = Vec<u32>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d: usize,
    pub h: usize,
    pub layers_enc: usize,
    pub layers_dec: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab: 64,
            d: 16,
            h: 2,
            layers_enc: 2,
            layers_dec: 2,
            ffn_dim: 32,
            max_len: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab", self.vocab),
            ("d", self.d),
            ("h", self.h),
            ("layers_enc", self.layers_enc),
            ("layers_dec", self.layers_dec),
            ("ffn_dim", self.ffn_dim),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(NvError::Config(format!("{name} must be at least 1")));
        }
        if !self.d.is_multiple_of(self.h) {
            return Err(NvError::Config(format!(
                "d = {} is not divisible by h = {}",
                self.d, self.h
            )));
        }
        if self.vocab <= EOS as usize {
            return Err(NvError::Config(format!(
                "vocab must exceed the special ids (PAD, BOS, EOS), got {}",
                self.vocab
            )));
        }
        Ok(())
    }

    /// Number of attention sites, `layers_enc + 2·layers_dec`.
    pub fn sites(&self) -> usize {
        self.layers_enc + 2 * self.layers_dec
    }

    /// Flat index of a site in the prior list.
    pub fn site_index(&self, site: Site) -> usize {
        match site.group {
            LayerGroup::Encoder => site.layer,
            LayerGroup::Cross => self.layers_enc + site.layer,
            LayerGroup::Decoder => self.layers_enc + self.layers_dec + site.layer,
        }
    }

    /// Sites in prior-list order.
    pub fn all_sites(&self) -> Vec<Site> {
        let mut v = Vec::with_capacity(self.sites());
        v.extend((0..self.layers_enc).map(|l| Site::new(LayerGroup::Encoder, l)));
        v.extend((0..self.layers_dec).map(|l| Site::new(LayerGroup::Cross, l)));
        v.extend((0..self.layers_dec).map(|l| Site::new(LayerGroup::Decoder, l)));
        v
    }

    pub fn layers_in(&self, group: LayerGroup) -> usize {
        match group {
            LayerGroup::Encoder => self.layers_enc,
            LayerGroup::Cross | LayerGroup::Decoder => self.layers_dec,
        }
    }

    /// Parses `key=value` lines; `#` starts a comment. Unset keys keep their
    /// default.
    pub fn parse_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| NvError::Config(format!("line {}: expected key=value", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v: usize = value
            .parse()
            .map_err(|_| NvError::Config(format!("{key}: {value:?} is not a non-negative integer")))?;
        match key {
            "vocab" => self.vocab = v,
            "d" => self.d = v,
            "h" => self.h = v,
            "layers_enc" => self.layers_enc = v,
            "layers_dec" => self.layers_dec = v,
            "ffn_dim" => self.ffn_dim = v,
            "max_len" => self.max_len = v,
            other => return Err(NvError::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }
}

/// One attention site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Site {
    pub group: LayerGroup,
    pub layer: usize,
}

impl Site {
    pub fn new(group: LayerGroup, layer: usize) -> Self {
        Self { group, layer }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.group, self.layer)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Vec<f64>,
    pub offset: Vec<f64>,
}

impl LayerNorm {
    pub fn apply(&self, x: &Matrix) -> Matrix {
        let d = x.cols();
        let mut out = x.clone();
        for r in 0..x.rows() {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for ((v, g), b) in row.iter_mut().zip(&self.gain).zip(&self.offset) {
                *v = (*v - mean) * inv * g + b;
            }
        }
        out
    }
}

/// Attention projections plus the output projection applied after heads are
/// concatenated.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlock {
    pub params: AttentionParams,
    pub wo: Matrix,
    pub bo: Vec<f64>,
}

impl AttentionBlock {
    fn output(&self, heads: &Matrix) -> Result<Matrix> {
        heads.matmul(&self.wo)?.add_row_vector(&self.bo)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // √(2/π)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

impl FeedForward {
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        x.matmul(&self.w1)?
            .add_row_vector(&self.b1)?
            .map(gelu)
            .matmul(&self.w2)?
            .add_row_vector(&self.b2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub self_attn: AttentionBlock,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub ln1: LayerNorm,
    pub self_attn: AttentionBlock,
    pub ln2: LayerNorm,
    pub cross_attn: AttentionBlock,
    pub ln3: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub token_embedding: Matrix,
    pub positional: Matrix,
    pub encoder: Vec<EncoderLayer>,
    pub encoder_norm: LayerNorm,
    pub decoder: Vec<DecoderLayer>,
    pub decoder_norm: LayerNorm,
    pub output: Matrix,
    pub output_bias: Vec<f64>,
}

/// Standard sinusoidal position table.
pub fn sinusoidal_positions(max_len: usize, d: usize) -> Matrix {
    Matrix::from_fn(max_len, d, |pos, i| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10_000f64.powf(2.0 * pair / d as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

impl ModelWeights {
    /// Seeded random weights.
    ///
    /// Layer-norm gains are log-uniform on `[1/4, 8]` and offsets are
    /// nonzero, so a few dimensions dominate each latent's norm and norms
    /// vary across tokens the way pretrained embeddings do. Query
    /// projections are shrunk so queries stay short next to the keys.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let d = config.d;
        let w_std = 1.0 / (d as f64).sqrt();

        let norm = |rng: &mut Rng| LayerNorm {
            gain: (0..d).map(|_| rng.uniform_range(0.25f64.ln(), 8f64.ln()).exp()).collect(),
            offset: (0..d).map(|_| 0.5 * rng.standard_normal()).collect(),
        };
        let block = |rng: &mut Rng| -> Result<AttentionBlock> {
            let mut params = AttentionParams::random(rng, d, config.h, 0.1)?;
            params.wq = params.wq.scale(QUERY_SCALE);
            params.bq.iter_mut().for_each(|b| *b *= QUERY_SCALE);
            Ok(AttentionBlock {
                params,
                wo: random_normal_matrix(rng, d, d, w_std),
                bo: (0..d).map(|_| 0.1 * rng.standard_normal()).collect(),
            })
        };
        let ffn = |rng: &mut Rng| FeedForward {
            w1: random_normal_matrix(rng, d, config.ffn_dim, w_std),
            b1: (0..config.ffn_dim).map(|_| 0.1 * rng.standard_normal()).collect(),
            w2: random_normal_matrix(rng, config.ffn_dim, d, 1.0 / (config.ffn_dim as f64).sqrt()),
            b2: (0..d).map(|_| 0.1 * rng.standard_normal()).collect(),
        };

        let token_embedding = random_normal_matrix(&mut rng, config.vocab, d, 1.0);
        let mut encoder = Vec::with_capacity(config.layers_enc);
        for _ in 0..config.layers_enc {
            encoder.push(EncoderLayer {
                ln1: norm(&mut rng),
                self_attn: block(&mut rng)?,
                ln2: norm(&mut rng),
                ffn: ffn(&mut rng),
            });
        }
        let encoder_norm = norm(&mut rng);
        let mut decoder = Vec::with_capacity(config.layers_dec);
        for _ in 0..config.layers_dec {
            decoder.push(DecoderLayer {
                ln1: norm(&mut rng),
                self_attn: block(&mut rng)?,
                ln2: norm(&mut rng),
                cross_attn: block(&mut rng)?,
                ln3: norm(&mut rng),
                ffn: ffn(&mut rng),
            });
        }
        let decoder_norm = norm(&mut rng);
        let output = random_normal_matrix(&mut rng, d, config.vocab, w_std);
        let output_bias = (0..config.vocab).map(|_| 0.1 * rng.standard_normal()).collect();

        Ok(Self {
            config,
            token_embedding,
            positional: sinusoidal_positions(config.max_len, d),
            encoder,
            encoder_norm,
            decoder,
            decoder_norm,
            output,
            output_bias,
        })
    }

    pub fn parameter_count(&self) -> usize {
        crate::format::weight_tensors(self)
            .iter()
            .map(|(_, t)| t.data.len())
            .sum()
    }

    pub fn block(&self, site: Site) -> &AttentionBlock {
        match site.group {
            LayerGroup::Encoder => &self.encoder[site.layer].self_attn,
            LayerGroup::Cross => &self.decoder[site.layer].cross_attn,
            LayerGroup::Decoder => &self.decoder[site.layer].self_attn,
        }
    }

    fn check_tokens(&self, seq: &[u32], what: &str) -> Result<()> {
        if seq.is_empty() {
            return Err(NvError::Input(format!("{what} sequence is empty")));
        }
        if seq.len() > self.config.max_len {
            return Err(NvError::Input(format!(
                "{what} sequence of length {} exceeds max_len {}",
                seq.len(),
                self.config.max_len
            )));
        }
        if let Some(t) = seq.iter().find(|&&t| t as usize >= self.config.vocab) {
            return Err(NvError::Input(format!(
                "{what} token {t} outside vocabulary of {}",
                self.config.vocab
            )));
        }
        Ok(())
    }

    fn embed(&self, seq: &[u32]) -> Matrix {
        Matrix::from_fn(seq.len(), self.config.d, |t, c| {
            self.token_embedding[(seq[t] as usize, c)] + self.positional[(t, c)]
        })
    }

    /// Encoder pass with a pluggable attention backend. Returns the final
    /// normed encoder states.
    pub fn encode_with(&self, src: &[u32], attn: &mut dyn SiteAttention) -> Result<Matrix> {
        self.check_tokens(src, "source")?;
        let mut x = self.embed(src);
        for (l, layer) in self.encoder.iter().enumerate() {
            let z = layer.ln1.apply(&x);
            let heads = attn.attend(Site::new(LayerGroup::Encoder, l), &z, &z, &layer.self_attn.params, &AttentionMask::None)?;
            x = x.add(&layer.self_attn.output(&heads)?)?;
            x = x.add(&layer.ffn.apply(&layer.ln2.apply(&x))?)?;
        }
        Ok(self.encoder_norm.apply(&x))
    }

    /// Decoder pass over a teacher-forced target prefix; returns logits
    /// (`|tgt| × vocab`).
    pub fn decode_with(&self, enc: &Matrix, tgt: &[u32], attn: &mut dyn SiteAttention) -> Result<Matrix> {
        self.check_tokens(tgt, "target")?;
        let mut y = self.embed(tgt);
        for (l, layer) in self.decoder.iter().enumerate() {
            let z = layer.ln1.apply(&y);
            let heads = attn.attend(Site::new(LayerGroup::Decoder, l), &z, &z, &layer.self_attn.params, &AttentionMask::Causal)?;
            y = y.add(&layer.self_attn.output(&heads)?)?;
            let q = layer.ln2.apply(&y);
            let heads = attn.attend(Site::new(LayerGroup::Cross, l), &q, enc, &layer.cross_attn.params, &AttentionMask::None)?;
            y = y.add(&layer.cross_attn.output(&heads)?)?;
            y = y.add(&layer.ffn.apply(&layer.ln3.apply(&y))?)?;
        }
        self.decoder_norm
            .apply(&y)
            .matmul(&self.output)?
            .add_row_vector(&self.output_bias)
    }
}

/// Computes the (pre-output-projection) attention of one site.
pub trait SiteAttention {
    fn attend(
        &mut self,
        site: Site,
        queries: &Matrix,
        keys: &Matrix,
        params: &AttentionParams,
        mask: &AttentionMask,
    ) -> Result<Matrix>;
}

/// Standard attention; optionally reports maps (without a prior column).
pub struct StandardAttention<'a> {
    pub observer: Option<&'a mut dyn AttentionObserver>,
}

impl SiteAttention for StandardAttention<'_> {
    fn attend(
        &mut self,
        site: Site,
        queries: &Matrix,
        keys: &Matrix,
        params: &AttentionParams,
        mask: &AttentionMask,
    ) -> Result<Matrix> {
        let (out, heads) = attention_with_weights(queries, keys, params, mask)?;
        if let Some(obs) = self.observer.as_mut() {
            obs.observe(AttentionMap {
                layer_id: site.layer,
                group: site.group,
                heads,
            });
        }
        Ok(out)
    }
}

/// Standard attention that also hands each site's key latents to a sink.
pub struct LatentTap<'a> {
    pub sink: &'a mut dyn FnMut(Site, &Matrix),
}

impl SiteAttention for LatentTap<'_> {
    fn attend(
        &mut self,
        site: Site,
        queries: &Matrix,
        keys: &Matrix,
        params: &AttentionParams,
        mask: &AttentionMask,
    ) -> Result<Matrix> {
        (self.sink)(site, keys);
        attention_with_weights(queries, keys, params, mask).map(|(o, _)| o)
    }
}

/// Denoising attention at every site.
pub struct DenoisingSites<'a> {
    pub model: &'a NvModel,
    pub observer: Option<&'a mut dyn AttentionObserver>,
}

impl SiteAttention for DenoisingSites<'_> {
    fn attend(
        &mut self,
        site: Site,
        queries: &Matrix,
        keys: &Matrix,
        params: &AttentionParams,
        mask: &AttentionMask,
    ) -> Result<Matrix> {
        let idx = self.model.base.config.site_index(site);
        let dp = project(keys, &self.model.projections[idx], &self.model.priors[idx])?;
        let (out, heads) = eval_dattn_multihead_with_weights(&DenoisingAttentionInputs {
            queries_pre: queries,
            dp: &dp,
            params,
            mask,
        })?;
        if let Some(obs) = self.observer.as_mut() {
            obs.observe(AttentionMap {
                layer_id: site.layer,
                group: site.group,
                heads,
            });
        }
        Ok(out)
    }
}

/// A model that can encode a source and score a target prefix.
pub trait Seq2Seq {
    fn config(&self) -> &ModelConfig;
    fn encode(&self, src: &[u32]) -> Result<Matrix>;
    fn decode(&self, enc: &Matrix, tgt: &[u32]) -> Result<Matrix>;

    fn forward(&self, src: &[u32], tgt: &[u32]) -> Result<Matrix> {
        let enc = self.encode(src)?;
        self.decode(&enc, tgt)
    }
}

impl Seq2Seq for ModelWeights {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn encode(&self, src: &[u32]) -> Result<Matrix> {
        self.encode_with(src, &mut StandardAttention { observer: None })
    }

    fn decode(&self, enc: &Matrix, tgt: &[u32]) -> Result<Matrix> {
        self.decode_with(enc, tgt, &mut StandardAttention { observer: None })
    }
}

/// Logits of the standard model.
pub fn forward_standard(w: &ModelWeights, src: &[u32], tgt: &[u32]) -> Result<Matrix> {
    w.forward(src, tgt)
}

/// A base model reinterpreted with NVIB projections at every attention site.
#[derive(Debug, Clone, PartialEq)]
pub struct NvModel {
    pub base: ModelWeights,
    pub priors: Vec<EmpiricalPrior>,
    pub taus: TauConfig,
    /// Identity-initialised projection per site, in prior-list order.
    pub projections: Vec<NvibProjection>,
}

/// Builds identity-initialised NVIB projections for every site, sharing the
/// base weights unchanged.
pub fn reinterpret(w: ModelWeights, priors: Vec<EmpiricalPrior>, taus: TauConfig) -> Result<NvModel> {
    taus.validate()?;
    let cfg = w.config;
    if priors.len() != cfg.sites() {
        return Err(NvError::Config(format!(
            "{} priors for {} attention sites",
            priors.len(),
            cfg.sites()
        )));
    }
    let mut projections = Vec::with_capacity(priors.len());
    for (site, prior) in cfg.all_sites().into_iter().zip(&priors) {
        if prior.layer_group != site.group || prior.layer_id != site.layer {
            return Err(NvError::Config(format!(
                "prior for {}:{} found at site {site}",
                prior.layer_group, prior.layer_id
            )));
        }
        let (tau_alpha, tau_sigma) = taus.for_group(site.group);
        projections.push(identity_init(prior, tau_alpha, tau_sigma, cfg.d, cfg.h)?);
    }
    Ok(NvModel {
        base: w,
        priors,
        taus,
        projections,
    })
}

impl NvModel {
    /// Same base weights and priors under different `τ`.
    pub fn with_taus(&self, taus: TauConfig) -> Result<NvModel> {
        reinterpret(self.base.clone(), self.priors.clone(), taus)
    }

    pub fn prior(&self, site: Site) -> &EmpiricalPrior {
        &self.priors[self.base.config.site_index(site)]
    }

    pub fn projection(&self, site: Site) -> &NvibProjection {
        &self.projections[self.base.config.site_index(site)]
    }

    /// Forward pass reporting every site's attention map to `observer`.
    pub fn forward_observed(&self, src: &[u32], tgt: &[u32], observer: &mut dyn AttentionObserver) -> Result<Matrix> {
        let mut sites = DenoisingSites {
            model: self,
            observer: Some(observer),
        };
        let enc = self.base.encode_with(src, &mut sites)?;
        self.base.decode_with(&enc, tgt, &mut sites)
    }
}

impl Seq2Seq for NvModel {
    fn config(&self) -> &ModelConfig {
        &self.base.config
    }

    fn encode(&self, src: &[u32]) -> Result<Matrix> {
        self.base.encode_with(src, &mut DenoisingSites { model: self, observer: None })
    }

    fn decode(&self, enc: &Matrix, tgt: &[u32]) -> Result<Matrix> {
        self.base.decode_with(enc, tgt, &mut DenoisingSites { model: self, observer: None })
    }
}

/// Logits of the reinterpreted model.
pub fn forward_nv(m: &NvModel, src: &[u32], tgt: &[u32]) -> Result<Matrix> {
    m.forward(src, tgt)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding from `BOS`. Stops after `max_steps` tokens, when `EOS` is
/// produced, or when the target would exceed `max_len`. The returned sequence
/// excludes `BOS` and `EOS`.
pub fn greedy_decode<M: Seq2Seq + ?Sized>(m: &M, src: &[u32], max_steps: usize) -> Result<TokenSeq> {
    let enc = m.encode(src)?;
    let mut tgt = vec![BOS];
    let limit = m.config().max_len;
    for _ in 0..max_steps {
        if tgt.len() >= limit {
            break;
        }
        let logits = m.decode(&enc, &tgt)?;
        let next = argmax(logits.row(logits.rows() - 1)) as u32;
        if next == EOS {
            break;
        }
        tgt.push(next);
    }
    tgt.remove(0);
    Ok(tgt)
}

/// Position-wise agreement of two token sequences, as a percentage of the
/// longer one (100 when both are empty).
pub fn token_overlap(a: &[u32], b: &[u32]) -> f64 {
    let len = a.len().max(b.len());
    if len == 0 {
        return 100.0;
    }
    let same = a.iter().zip(b).filter(|(x, y)| x == y).count();
    100.0 * same as f64 / len as f64
}
