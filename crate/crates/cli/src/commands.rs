//! Subcommand implementations. Each command resolves its configuration
//! (flag > config file > built-in default), echoes it into the run manifest,
//! and writes fixed-named artifacts into `--out-dir`.

use std::fs;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Args;
use serde::Deserialize;

use longwave::data;
use longwave::error::{Error, Result};
use longwave::eval::{
    estimate_ppl, eval_niah, niah_csv, ppl_csv, ModelGenerator, NIAH_ANSWER_LEN,
};
use longwave::model::{
    load_checkpoint, save_checkpoint, LossWeighting, ModelConfig, Parameters, RemaskPolicy,
};
use longwave::packing::{pack, Document, PackStrategy};
use longwave::rope::{report_csv, report_json, scaling_factor, NtkMode, RopeConfig, RotaryTable};
use longwave::trainer::{train, OptimState, TrainConfig};

use crate::manifest::Run;

fn write_text(run: &mut Run, name: &str, text: &str) -> Result<PathBuf> {
    let path = run.out_path(name);
    run.output(&path);
    fs::write(&path, text)?;
    Ok(path)
}

fn write_json_pretty<T: serde::Serialize>(run: &mut Run, name: &str, value: &T) -> Result<PathBuf> {
    let path = run.out_path(name);
    run.output(&path);
    fs::write(&path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(path)
}

fn parse_weighting(s: &str) -> Result<LossWeighting> {
    match s {
        "uniform" => Ok(LossWeighting::Uniform),
        "inverse-noise" => Ok(LossWeighting::InverseNoise),
        other => Err(Error::config(format!(
            "unknown loss weighting {other:?} (expected uniform or inverse-noise)"
        ))),
    }
}

// ---------------------------------------------------------------------------
// rope-report
// ---------------------------------------------------------------------------

/// Derive the frequency-scaling factor for a context extension and write the
/// per-pair period table (CSV) plus a JSON summary.
#[derive(Debug, Args)]
pub struct RopeReportArgs {
    /// Rotary base the model was trained with.
    #[arg(long)]
    pub base: f64,
    /// Per-head dimension (even).
    #[arg(long)]
    pub head_dim: usize,
    /// Context length the weights were trained at.
    #[arg(long = "train-ctx")]
    pub train_ctx: usize,
    /// Context length the scaled table should support.
    #[arg(long = "target-ctx")]
    pub target_ctx: usize,
    /// Scaling rule: vanilla, baseline, or diffusion.
    #[arg(long)]
    pub mode: String,
    /// Directory the report and manifest are written into.
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

pub fn cmd_rope_report(a: &RopeReportArgs, run: &mut Run) -> Result<()> {
    let cfg = RopeConfig {
        base: a.base,
        head_dim: a.head_dim,
        train_context: a.train_ctx,
        target_context: a.target_ctx,
        mode: NtkMode::from_str(&a.mode)?,
    };
    run.config(serde_json::to_value(&cfg)?);
    let report = scaling_factor(&cfg)?;
    write_text(run, "rope-report.csv", &report_csv(&cfg, &report))?;
    write_text(run, "rope-report.json", &report_json(&cfg, &report))?;
    println!(
        "mode={} lambda={:.6} critical_dim={} effective_base={:.3}",
        report.mode, report.lambda, report.critical_dim, report.effective_base
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// pack
// ---------------------------------------------------------------------------

fn resolve_format(path: &Path, format: &str) -> Result<&'static str> {
    let resolved = match format {
        "auto" => match path.extension().and_then(|e| e.to_str()) {
            Some("bin") => "corpus",
            Some("jsonl") => "jsonl",
            _ => "text",
        },
        "corpus" => "corpus",
        "jsonl" => "jsonl",
        "text" => "text",
        other => {
            return Err(Error::config(format!(
                "unknown data format {other:?} (expected auto, corpus, jsonl, or text)"
            )))
        }
    };
    Ok(resolved)
}

fn load_documents(run: &mut Run, path: &Path, format: &str) -> Result<(Vec<Document>, &'static str)> {
    let resolved = resolve_format(path, format)?;
    run.input(path)?;
    let docs = match resolved {
        "corpus" => {
            run.input(&data::sidecar_path(path))?;
            data::read_corpus(path)?
        }
        "jsonl" => data::read_jsonl_corpus(path)?,
        _ => vec![data::read_text_document(path)?],
    };
    Ok((docs, resolved))
}

/// Pack a document corpus into fixed-length training sequences with
/// provenance and segment ids.
#[derive(Debug, Args)]
pub struct PackArgs {
    /// Corpus to pack: token corpus (.bin + sidecar), JSON-lines, or raw text.
    #[arg(long)]
    pub data: PathBuf,
    /// Input interpretation: auto (by extension), corpus, jsonl, or text.
    #[arg(long, default_value = "auto")]
    pub data_format: String,
    /// Length of every packed sequence.
    #[arg(long)]
    pub target_len: usize,
    /// Packing strategy: direct, eod, or adaptive.
    #[arg(long, default_value = "adaptive")]
    pub strategy: String,
    /// Directory the packed corpus and manifest are written into.
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

pub fn cmd_pack(a: &PackArgs, run: &mut Run) -> Result<()> {
    let strategy = PackStrategy::from_str(&a.strategy)?;
    let (docs, resolved) = load_documents(run, &a.data, &a.data_format)?;
    run.config(serde_json::json!({
        "data": a.data.display().to_string(),
        "data_format": resolved,
        "target_len": a.target_len,
        "strategy": strategy,
    }));
    let seqs = pack(&docs, a.target_len, strategy)?;
    if seqs.is_empty() {
        return Err(Error::input(format!(
            "corpus is shorter than one {}-token sequence; nothing to write",
            a.target_len
        )));
    }
    let packed_path = run.out_path("packed.bin");
    run.output(&packed_path);
    run.output(&data::sidecar_path(&packed_path));
    data::write_packed(&packed_path, &seqs)?;

    let source_tokens: usize = docs.iter().map(|d| d.tokens.len()).sum();
    let separators = if strategy == PackStrategy::Eod { docs.len() } else { 0 };
    let emitted = seqs.len() * a.target_len;
    println!(
        "packed {} documents ({} tokens + {} separators) into {} sequences of {} \
         ({} tokens emitted, {} trailing tokens dropped)",
        docs.len(),
        source_tokens,
        separators,
        seqs.len(),
        a.target_len,
        emitted,
        source_tokens + separators - emitted,
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

/// Optional config file: `{"model": {...}, "train": {...}}`, either section
/// omissible. Flags override individual fields.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    #[serde(default)]
    model: Option<ModelConfig>,
    #[serde(default)]
    train: Option<TrainConfig>,
}

/// Train (or post-train) a denoising model on a packed corpus.
#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Packed training corpus (from `pack`).
    #[arg(long)]
    pub data: PathBuf,
    /// JSON config file with optional "model" and "train" sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue an interrupted run: weights, optimizer moments, and step
    /// counter come from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Start a fresh run from this checkpoint's weights (step 0, fresh
    /// optimizer) — the post-training entry point after `extend`.
    #[arg(long)]
    pub init_from: Option<PathBuf>,

    /// Model width (fresh models only).
    #[arg(long)]
    pub d_model: Option<usize>,
    /// Transformer layer count (fresh models only).
    #[arg(long)]
    pub n_layers: Option<usize>,
    /// Attention head count (fresh models only).
    #[arg(long)]
    pub n_heads: Option<usize>,
    /// Training context length (fresh models only).
    #[arg(long)]
    pub context: Option<usize>,
    /// Rotary base (fresh models only).
    #[arg(long)]
    pub rope_base: Option<f64>,

    /// Peak learning rate after warmup.
    #[arg(long)]
    pub peak_lr: Option<f64>,
    /// Floor the cosine decay settles at.
    #[arg(long)]
    pub min_lr: Option<f64>,
    /// Warmup length as a fraction of decay_iters.
    #[arg(long)]
    pub warmup_frac: Option<f64>,
    /// Step at which the cosine decay bottoms out.
    #[arg(long)]
    pub decay_iters: Option<u64>,
    /// Step the run stops at.
    #[arg(long)]
    pub total_iters: Option<u64>,
    /// Decoupled weight-decay coefficient.
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// First-moment decay rate.
    #[arg(long)]
    pub beta1: Option<f64>,
    /// Second-moment decay rate.
    #[arg(long)]
    pub beta2: Option<f64>,
    /// Adam denominator epsilon.
    #[arg(long)]
    pub eps: Option<f64>,
    /// Global gradient-norm clip threshold.
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// Approximate tokens per optimizer step.
    #[arg(long)]
    pub batch_tokens: Option<usize>,
    /// Master seed for shuffling and noise draws.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Masked-loss weighting: uniform or inverse-noise.
    #[arg(long)]
    pub weighting: Option<String>,

    /// Skip optimizer moments in the saved checkpoint (smaller file; the run
    /// cannot be resumed).
    #[arg(long)]
    pub no_optimizer_state: bool,
    /// Directory the checkpoint, log, and manifest are written into.
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

pub fn cmd_train(a: &TrainArgs, run: &mut Run) -> Result<()> {
    let file_cfg: FileConfig = match &a.config {
        Some(p) => {
            run.input(p)?;
            serde_json::from_str(&fs::read_to_string(p)?)?
        }
        None => FileConfig::default(),
    };

    let mut tcfg = file_cfg.train.unwrap_or_default();
    macro_rules! override_field {
        ($($name:ident),*) => {
            $(if let Some(v) = a.$name { tcfg.$name = v; })*
        };
    }
    override_field!(
        peak_lr, min_lr, warmup_frac, decay_iters, total_iters, weight_decay, beta1, beta2,
        eps, clip_norm, batch_tokens, seed
    );
    if let Some(w) = &a.weighting {
        tcfg.weighting = parse_weighting(w)?;
    }

    let shape_flags = a.d_model.is_some()
        || a.n_layers.is_some()
        || a.n_heads.is_some()
        || a.context.is_some()
        || a.rope_base.is_some();
    if a.resume.is_some() && a.init_from.is_some() {
        return Err(Error::config("--resume and --init-from are mutually exclusive"));
    }

    let from_ckpt = a.resume.as_ref().or(a.init_from.as_ref());
    let (model_cfg, mut params, mut opt, start_step) = match from_ckpt {
        Some(path) => {
            if shape_flags {
                return Err(Error::config(
                    "the checkpoint carries the model shape; drop the model flags",
                ));
            }
            run.input(path)?;
            let loaded = load_checkpoint(path)?;
            if a.resume.is_some() {
                let (m, v) = loaded.optim.ok_or_else(|| {
                    Error::config(
                        "checkpoint was saved without optimizer state and cannot be resumed; \
                         use --init-from to start a fresh run from its weights",
                    )
                })?;
                // A resumed run must keep drawing from the original noise
                // streams, so the checkpoint seed wins unless overridden.
                if a.seed.is_none() {
                    tcfg.seed = loaded.seed;
                }
                (loaded.config, loaded.params, OptimState { m, v }, loaded.step)
            } else {
                let opt = OptimState::zeros(&loaded.config)?;
                (loaded.config, loaded.params, opt, 0)
            }
        }
        None => {
            let base = file_cfg.model;
            let d_model = a.d_model.or(base.as_ref().map(|m| m.d_model)).unwrap_or(128);
            let n_layers = a.n_layers.or(base.as_ref().map(|m| m.n_layers)).unwrap_or(2);
            let n_heads = a.n_heads.or(base.as_ref().map(|m| m.n_heads)).unwrap_or(4);
            let context = a
                .context
                .or(base.as_ref().map(|m| m.rope.train_context))
                .unwrap_or(256);
            let rope_base = a.rope_base.or(base.as_ref().map(|m| m.rope.base)).unwrap_or(10_000.0);
            let cfg = if shape_flags || base.is_none() {
                ModelConfig::byte_level(d_model, n_layers, n_heads, context, rope_base)
            } else {
                base.expect("present")
            };
            let params = Parameters::<f32>::init(&cfg, tcfg.seed)?;
            let opt = OptimState::zeros(&cfg)?;
            (cfg, params, opt, 0)
        }
    };

    let seqs = data::read_packed(&a.data)?;
    run.input(&a.data)?;
    run.input(&data::sidecar_path(&a.data))?;
    if let Some(s) = seqs.first() {
        tcfg.strategy = s.strategy;
    }
    run.seed(tcfg.seed);
    run.config(serde_json::json!({
        "model": model_cfg,
        "train": tcfg,
        "data": a.data.display().to_string(),
        "resume": a.resume.as_ref().map(|p| p.display().to_string()),
        "init_from": a.init_from.as_ref().map(|p| p.display().to_string()),
        "start_step": start_step,
    }));

    let log_path = run.out_path("train-log.jsonl");
    run.output(&log_path);
    let mut log = BufWriter::new(File::create(&log_path)?);
    let outcome = train(
        &model_cfg,
        &tcfg,
        &mut params,
        &mut opt,
        start_step,
        &seqs,
        Some(&mut log),
    );
    log.flush()?;
    let summary = outcome?;

    let ckpt_path = run.out_path("model.ckpt");
    run.output(&ckpt_path);
    let optim_refs = (!a.no_optimizer_state).then_some((&opt.m, &opt.v));
    save_checkpoint(
        &ckpt_path,
        &model_cfg,
        &params,
        optim_refs,
        summary.final_step,
        tcfg.seed,
    )?;
    println!(
        "trained {} steps to step {} (final loss {:.4}, {} tokens, {:.1} s)",
        summary.steps_run,
        summary.final_step,
        summary.final_loss,
        summary.tokens_seen,
        summary.wall_ms as f64 / 1000.0
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// extend
// ---------------------------------------------------------------------------

/// Rewrite a checkpoint's rotary configuration for a longer context. Weights
/// are copied verbatim; only the scaling rule and target length change.
#[derive(Debug, Args)]
pub struct ExtendArgs {
    /// Checkpoint to extend.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// New context length (must not shrink the trained context).
    #[arg(long = "target-ctx")]
    pub target_ctx: usize,
    /// Scaling rule: vanilla, baseline, or diffusion.
    #[arg(long, default_value = "diffusion")]
    pub mode: String,
    /// Directory the extended checkpoint and manifest are written into.
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

pub fn cmd_extend(a: &ExtendArgs, run: &mut Run) -> Result<()> {
    let mode = NtkMode::from_str(&a.mode)?;
    run.input(&a.checkpoint)?;
    run.config(serde_json::json!({
        "checkpoint": a.checkpoint.display().to_string(),
        "target_ctx": a.target_ctx,
        "mode": mode,
    }));
    let dst = run.out_path("extended.ckpt");
    run.output(&dst);
    let (before, after) = longwave::model::extend_checkpoint(&a.checkpoint, &dst, a.target_ctx, mode)?;
    println!(
        "extended to {} ({}): lambda {:.6} -> {:.6}, effective base {:.3} -> {:.3}, \
         critical_dim {}",
        a.target_ctx,
        mode,
        before.lambda,
        after.lambda,
        before.effective_base,
        after.effective_base,
        after.critical_dim
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval-ppl
// ---------------------------------------------------------------------------

/// Estimate Monte-Carlo denoising perplexity over growing context windows.
#[derive(Debug, Args)]
pub struct EvalPplArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Evaluation text: token corpus, JSON-lines, or raw text. Documents are
    /// concatenated into one stream; each window is its leading tokens.
    #[arg(long)]
    pub data: PathBuf,
    /// Input interpretation: auto (by extension), corpus, jsonl, or text.
    #[arg(long, default_value = "auto")]
    pub data_format: String,
    /// Comma-separated window lengths, strictly increasing.
    #[arg(long, value_delimiter = ',', required = true)]
    pub lengths: Vec<usize>,
    /// Monte-Carlo draws per length.
    #[arg(long, default_value_t = 16)]
    pub draws: usize,
    /// Master seed for the noise draws.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory the report and manifest are written into.
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

pub fn cmd_eval_ppl(a: &EvalPplArgs, run: &mut Run) -> Result<()> {
    run.seed(a.seed);
    run.input(&a.checkpoint)?;
    let loaded = load_checkpoint(&a.checkpoint)?;
    let (docs, resolved) = load_documents(run, &a.data, &a.data_format)?;
    let stream: Vec<u32> = docs.iter().flat_map(|d| d.tokens.iter().copied()).collect();
    run.config(serde_json::json!({
        "checkpoint": a.checkpoint.display().to_string(),
        "model": loaded.config,
        "data": a.data.display().to_string(),
        "data_format": resolved,
        "lengths": a.lengths,
        "draws": a.draws,
        "seed": a.seed,
    }));
    let report = estimate_ppl(
        &loaded.config,
        &loaded.params,
        &stream,
        &a.lengths,
        a.draws,
        a.seed,
    )?;
    write_text(run, "ppl.csv", &ppl_csv(&report))?;
    write_json_pretty(run, "ppl.json", &report)?;
    for (len, p) in report.lengths.iter().zip(&report.ppl) {
        println!("ppl[{len}] = {p:.4}");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// eval-niah
// ---------------------------------------------------------------------------

/// Run the needle-in-a-haystack retrieval grid against a checkpoint.
#[derive(Debug, Args)]
pub struct EvalNiahArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Comma-separated probe lengths (prompt plus answer), strictly
    /// increasing.
    #[arg(long, value_delimiter = ',', required = true)]
    pub lengths: Vec<usize>,
    /// Comma-separated needle depths in [0, 1], strictly increasing.
    #[arg(long, value_delimiter = ',', default_value = "0.0,0.25,0.5,0.75,1.0")]
    pub depths: Vec<f64>,
    /// Probes per (length, depth) cell.
    #[arg(long, default_value_t = 8)]
    pub trials: usize,
    /// Master seed for instance and decode randomness.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Decoding block length.
    #[arg(long, default_value_t = NIAH_ANSWER_LEN)]
    pub block_size: usize,
    /// Denoising steps per block.
    #[arg(long, default_value_t = NIAH_ANSWER_LEN)]
    pub steps: usize,
    /// Remasking policy: low-confidence or random.
    #[arg(long, default_value = "low-confidence")]
    pub policy: String,
    /// Directory the grid and manifest are written into.
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

pub fn cmd_eval_niah(a: &EvalNiahArgs, run: &mut Run) -> Result<()> {
    run.seed(a.seed);
    let policy = RemaskPolicy::from_str(&a.policy)?;
    run.input(&a.checkpoint)?;
    let loaded = load_checkpoint(&a.checkpoint)?;
    run.config(serde_json::json!({
        "checkpoint": a.checkpoint.display().to_string(),
        "model": loaded.config,
        "lengths": a.lengths,
        "depths": a.depths,
        "trials": a.trials,
        "seed": a.seed,
        "block_size": a.block_size,
        "steps": a.steps,
        "policy": policy.as_str(),
    }));
    let max_len = *a
        .lengths
        .last()
        .ok_or_else(|| Error::input("need at least one probe length"))?;
    let table = RotaryTable::<f32>::for_config(&loaded.config.rope, max_len)?;
    let generator = ModelGenerator {
        cfg: &loaded.config,
        params: &loaded.params,
        table: &table,
        block_size: a.block_size,
        steps: a.steps,
        policy,
    };
    let grid = eval_niah(&generator, &a.lengths, &a.depths, a.trials, a.seed)?;
    write_text(run, "niah.csv", &niah_csv(&grid))?;
    write_json_pretty(run, "niah.json", &grid)?;
    println!("mean accuracy = {:.4} over {} cells", grid.mean_accuracy(), grid.lengths.len() * grid.depths.len());
    Ok(())
}
