use std::fs;
use std::path::Path;
use std::process::ExitCode;

use anyhow::{Context, Result};

use nvtrans::experiments::{self, CertifyOptions, SweepOptions, TauBounds};
use nvtrans::format;
use nvtrans::model::{reinterpret, ModelConfig, ModelWeights, NvModel, BOS};
use nvtrans::nvib::{EmpiricalPrior, LayerGroup, TauConfig};
use nvtrans::prior::{self, Example};
use nvtrans::{NvError, Site};

use crate::{AttnDump, Certify, ConfigArgs, EstimatePrior, InitModel, ModelArgs, Sweep, SynthCorpus, TauArgs, UsageError};

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path)
        .map_err(NvError::from)
        .with_context(|| format!("reading {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)
        .map_err(NvError::from)
        .with_context(|| format!("writing {}", path.display()))
}

fn build_config(args: &ConfigArgs) -> Result<ModelConfig> {
    let mut cfg = match &args.config {
        Some(path) => ModelConfig::parse_kv(&read_text(path)?)?,
        None => ModelConfig::default(),
    };
    let overrides = [
        ("vocab", args.vocab),
        ("d", args.d),
        ("h", args.h),
        ("layers_enc", args.layers_enc),
        ("layers_dec", args.layers_dec),
        ("ffn_dim", args.ffn_dim),
        ("max_len", args.max_len),
    ];
    for (key, value) in overrides {
        if let Some(v) = value {
            cfg.set(key, &v.to_string())?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn init_model(a: InitModel) -> Result<ExitCode> {
    let cfg = build_config(&a.config)?;
    let w = ModelWeights::init(cfg, a.seed)?;
    format::save_weights(&w, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!("parameters: {}", w.parameter_count());
    println!("wrote {}", a.out.display());
    Ok(ExitCode::SUCCESS)
}

pub fn synth_corpus(a: SynthCorpus) -> Result<ExitCode> {
    let cfg = build_config(&a.config)?;
    if a.sequences == 0 {
        return Err(usage("--sequences must be at least 1"));
    }
    let corpus = prior::synthetic_corpus(&cfg, a.sequences, a.seed);
    write_text(&a.out, &prior::format_corpus(&corpus))?;
    println!("wrote {} sequences to {}", corpus.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

pub fn estimate_prior(a: EstimatePrior) -> Result<ExitCode> {
    if !(a.fraction > 0.0 && a.fraction <= 1.0) {
        return Err(usage(format!("--fraction must lie in (0, 1], got {}", a.fraction)));
    }
    let w = format::load_weights(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let corpus: Vec<Example> = prior::parse_corpus(&read_text(&a.corpus)?)?;
    if corpus.is_empty() {
        return Err(NvError::Input(format!("corpus {} has no sequences", a.corpus.display())).into());
    }
    let priors = prior::estimate_priors(&w, &corpus, a.fraction, a.seed)?;
    format::save_priors(&priors, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let report = prior::prior_report(&priors);
    match &a.report {
        Some(path) => write_text(path, &report)?,
        None => print!("{report}"),
    }
    eprintln!("wrote {} priors to {}", priors.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn tau_config(t: &TauArgs) -> Result<TauConfig> {
    let mut taus = TauConfig::uniform(t.tau_alpha, t.tau_sigma);
    let per_group = [
        (LayerGroup::Encoder, t.tau_alpha_e, t.tau_sigma_e),
        (LayerGroup::Cross, t.tau_alpha_c, t.tau_sigma_c),
        (LayerGroup::Decoder, t.tau_alpha_d, t.tau_sigma_d),
    ];
    for (g, alpha, sigma) in per_group {
        let (a0, s0) = taus.for_group(g);
        taus.set_group(g, alpha.unwrap_or(a0), sigma.unwrap_or(s0));
    }
    taus.validate()?;
    Ok(taus)
}

fn load_model(args: &ModelArgs, taus: TauConfig) -> Result<NvModel> {
    let file = format::load_model_file(&args.model).with_context(|| format!("loading {}", args.model.display()))?;
    let priors: Vec<EmpiricalPrior> = match &args.priors {
        Some(path) => format::load_priors(path).with_context(|| format!("loading {}", path.display()))?,
        None => file.extra.priors.ok_or_else(|| {
            NvError::Format(format!("{} carries no priors; pass --priors", args.model.display()))
        })?,
    };
    Ok(reinterpret(file.weights, priors, taus)?)
}

pub fn certify(a: Certify) -> Result<ExitCode> {
    if a.trials == 0 {
        return Err(usage("--trials must be at least 1"));
    }
    let m = load_model(&a.model, tau_config(&a.tau)?)?;
    let r = experiments::certify(
        &m,
        &CertifyOptions {
            trials: a.trials,
            tol: a.tol,
            seed: a.seed,
            max_steps: a.max_steps,
        },
    )?;
    println!("trials: {}", r.trials);
    println!("max logit diff: {:e} (tol {:e})", r.max_logit_diff, a.tol);
    println!("decode overlap: {:.2}%", r.overlap);
    println!("identical decodes: {}/{}", r.identical_decodes, r.trials);
    if r.pass {
        println!("PASS");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("FAIL");
        Ok(ExitCode::from(1))
    }
}

pub fn sweep(a: Sweep) -> Result<ExitCode> {
    let bounds = TauBounds {
        alpha: (a.tau_alpha_min, a.tau_alpha_max),
        sigma: (a.tau_sigma_min, a.tau_sigma_max),
    };
    let ordered = bounds.alpha.0 <= bounds.alpha.1 && bounds.sigma.0 <= bounds.sigma.1 && bounds.sigma.0 > 0.0;
    if !ordered {
        return Err(usage("τ bounds must satisfy min <= max and tau_sigma_min > 0"));
    }
    if a.inputs == 0 {
        return Err(usage("--inputs must be at least 1"));
    }
    let points = experiments::parse_grid(&a.grid, &bounds, a.seed)?;
    let m = load_model(&a.model, TauConfig::identity())?;
    let rows = experiments::sweep(
        &m,
        &points,
        &SweepOptions {
            inputs: a.inputs,
            seed: a.seed,
            max_steps: a.max_steps,
        },
    )?;
    write_text(&a.out, &experiments::sweep_csv(&rows))?;
    println!("wrote {} sweep points to {}", rows.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn parse_tokens(flag: &str, text: &str) -> Result<Vec<u32>> {
    let ids = text
        .split_whitespace()
        .map(|t| t.parse::<u32>().map_err(|_| usage(format!("{flag}: {t:?} is not a token id"))))
        .collect::<Result<Vec<_>>>()?;
    if ids.is_empty() {
        return Err(usage(format!("{flag} is empty")));
    }
    Ok(ids)
}

pub fn attn_dump(a: AttnDump) -> Result<ExitCode> {
    let group: LayerGroup = a.group.parse().map_err(|e: NvError| usage(e.to_string()))?;
    let src = parse_tokens("--input", &a.input)?;
    let body = match &a.target {
        Some(t) => parse_tokens("--target", t)?,
        None => src.clone(),
    };
    let m = load_model(&a.model, tau_config(&a.tau)?)?;
    let layers = m.base.config.layers_in(group);
    if a.layer >= layers {
        return Err(usage(format!("--layer {} out of range: {group} has {layers} layers", a.layer)));
    }
    let mut tgt = vec![BOS];
    tgt.extend(body.iter().take(m.base.config.max_len - 1));
    let map = experiments::attention_dump(&m, &src, &tgt, Site::new(group, a.layer))?;
    write_text(&a.out, &experiments::attention_csv(&map))?;
    println!("wrote {}x{} attention map to {}", map.rows(), map.cols(), a.out.display());
    Ok(ExitCode::SUCCESS)
}
