//! Command-line workbench for the hybrid attention/state-space diffusion
//! pipeline: dataset generation, the five training stages, sampling,
//! complexity benchmarks, and the invariant batteries.
//!
//! Conventions shared by every subcommand:
//! - all paths live under `--out-dir`;
//! - each run writes its resolved configuration next to its artifacts;
//! - each checkpoint gets a `.chain` file: a content hash folding in the
//!   producing checkpoint's hash and its parent chain, so any artifact's
//!   full provenance can be re-verified from bytes alone;
//! - exit codes: 0 success, 1 runtime failure, 2 usage or missing
//!   prerequisite.

mod config;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use t2md_core::bench::{probe_to_csv, rows_to_csv, run_bench, run_layer_probe, summary, BenchSpec};
use t2md_core::diffusion::{sample as draw_sample, Denoiser};
use t2md_core::distill::dataset::{
    classify_quadrant, parse_caption, single_caption, DatasetSpec, LatentSample, NUM_COLORS,
    NUM_QUADRANTS, VAL_INDEX_OFFSET,
};
use t2md_core::distill::{
    run_adaptation, run_highres_finetune, run_knowledge_distill, run_teacher_forcing,
    stage_metadata, train_teacher, FinetuneOpts, KdOpts, MetricsLog, StageOpts, StageTag,
    TRAIN_POOL,
};
use t2md_core::model::checkpoint::{load_checkpoint, load_into, save_checkpoint, RawCheckpoint};
use t2md_core::model::{build_pattern, BlockKind, HybridModel, ModelConfig};
use t2md_core::nn::PosEncVariant;
use t2md_core::ssm::{scan_chunked, scan_sequential};
use t2md_core::tensor::std_normal;
use t2md_core::verify::{layer_grad_suite, op_grad_suite, CheckReport};

use config::{ConfigError, RunConfig};

// ---------------------------------------------------------------------------
// Command-line surface
// ---------------------------------------------------------------------------

#[derive(Parser)]
#[command(
    name = "t2md",
    version,
    about = "Hybrid attention/state-space diffusion distillation workbench"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// `key = value` run configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inline `key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Directory for checkpoints, metrics, and reports.
    #[arg(long, default_value = "runs/toy")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Materialize the synthetic dataset manifest and preview statistics.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain the all-attention teacher.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
    },
    /// Stage 1: fit the student's state-space mixers to the teacher's
    /// per-block mixer taps.
    Force {
        #[command(flatten)]
        common: Common,
    },
    /// Stage 2: train the student's token mixers under the combined
    /// noise-prediction / soft-label / mixer-gap loss.
    Distill {
        #[command(flatten)]
        common: Common,
    },
    /// Stage 3: swap to centered, normalized positions and re-stabilize at
    /// the base resolution.
    Adapt {
        #[command(flatten)]
        common: Common,
    },
    /// Stage 4: mixed- then high-resolution fine-tuning.
    Finetune {
        #[command(flatten)]
        common: Common,
    },
    /// Draw conditional samples from the newest (or a chosen) checkpoint.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to sample from; defaults to the latest stage present.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Integer upscaling of the latent grid (needs an adapted model).
        #[arg(long, default_value_t = 1)]
        scale: usize,
    },
    /// Time the hybrid against the all-attention variant across token
    /// counts and fit log-log cost slopes.
    Bench {
        #[command(flatten)]
        common: Common,
    },
    /// Run the invariant batteries (gradients, scan agreement, block
    /// layout, checkpoint round-trip) and report counts.
    Verify {
        #[command(flatten)]
        common: Common,
    },
}

// ---------------------------------------------------------------------------
// Error discipline
// ---------------------------------------------------------------------------

enum CliError {
    /// Operator mistake: bad flag, bad config, missing prerequisite. Exit 2.
    Usage(String),
    /// The run itself failed. Exit 1.
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::GenData { common } => cmd_gen_data(&common),
        Cmd::TrainTeacher { common } => cmd_train_teacher(&common),
        Cmd::Force { common } => cmd_force(&common),
        Cmd::Distill { common } => cmd_distill(&common),
        Cmd::Adapt { common } => cmd_adapt(&common),
        Cmd::Finetune { common } => cmd_finetune(&common),
        Cmd::Sample { common, ckpt, scale } => cmd_sample(&common, ckpt.as_deref(), scale),
        Cmd::Bench { common } => cmd_bench(&common),
        Cmd::Verify { common } => cmd_verify(&common),
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

fn resolve_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    for pair in &common.set {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| usage(format!("--set needs KEY=VALUE, got `{pair}`")))?;
        cfg.apply(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

/// Worker cap: `T2MD_THREADS` bounds the machine's available parallelism.
fn worker_count() -> Result<usize, CliError> {
    let avail = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    match std::env::var("T2MD_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n.min(avail)),
            _ => Err(usage(format!(
                "invalid T2MD_THREADS value `{v}`: expected a positive integer"
            ))),
        },
        Err(_) => Ok(avail),
    }
}

fn ensure_out_dir(common: &Common) -> Result<(), CliError> {
    fs::create_dir_all(&common.out_dir)?;
    Ok(())
}

/// Writes the resolved configuration next to the command's artifacts.
fn write_resolved_config(common: &Common, cmd: &str, cfg: &RunConfig) -> Result<(), CliError> {
    let path = common.out_dir.join(format!("config.{cmd}.cfg"));
    fs::write(path, cfg.to_canonical_string())?;
    Ok(())
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        let _ = write!(out, "{b:02x}");
    }
    out
}

const UNRECORDED_CHAIN: &str =
    "0000000000000000000000000000000000000000000000000000000000000000";

fn ckpt_name(stage: StageTag) -> &'static str {
    match stage {
        StageTag::TeacherPretrain => "teacher.ckpt",
        StageTag::TeacherForcing => "forced.ckpt",
        StageTag::KnowledgeDistill => "distilled.ckpt",
        StageTag::Adaptation => "adapted.ckpt",
        StageTag::HighResFinetune => "finetuned.ckpt",
    }
}

fn producing_command(stage: StageTag) -> &'static str {
    match stage {
        StageTag::TeacherPretrain => "train-teacher",
        StageTag::TeacherForcing => "force",
        StageTag::KnowledgeDistill => "distill",
        StageTag::Adaptation => "adapt",
        StageTag::HighResFinetune => "finetune",
    }
}

fn chain_path(out_dir: &Path, stage: StageTag) -> PathBuf {
    out_dir.join(format!("{}.chain", ckpt_name(stage)))
}

fn read_chain(out_dir: &Path, stage: StageTag) -> String {
    fs::read_to_string(chain_path(out_dir, stage))
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|_| UNRECORDED_CHAIN.to_string())
}

/// Folds the freshly written checkpoint's hash into its parent's chain and
/// records the result beside the checkpoint.
fn write_chain(out_dir: &Path, stage: StageTag, parent_hex: &str) -> Result<String, CliError> {
    let bytes = fs::read(out_dir.join(ckpt_name(stage)))?;
    let link = format!("{parent_hex}\n{}\n", sha256_hex(&bytes));
    let hex = sha256_hex(link.as_bytes());
    fs::write(chain_path(out_dir, stage), format!("{hex}\n"))?;
    Ok(hex)
}

/// Loads a stage checkpoint, or explains which command must run first.
fn require_checkpoint(out_dir: &Path, stage: StageTag) -> Result<RawCheckpoint, CliError> {
    let path = out_dir.join(ckpt_name(stage));
    if !path.exists() {
        return Err(usage(format!(
            "{} not found: this command requires the {} checkpoint; run `t2md {}` first",
            path.display(),
            stage.name(),
            producing_command(stage),
        )));
    }
    let raw = load_checkpoint(&path)
        .map_err(|e| CliError::Runtime(anyhow::anyhow!("reading {}: {e}", path.display())))?;
    let got = raw.metadata.get("stage").cloned().unwrap_or_default();
    if got != stage.name() {
        return Err(usage(format!(
            "{} was produced by stage `{got}`, expected `{}`; regenerate it with `t2md {}`",
            path.display(),
            stage.name(),
            producing_command(stage),
        )));
    }
    Ok(raw)
}

/// Rebuilds the architecture a checkpoint describes and loads its weights.
fn model_from_checkpoint(raw: &RawCheckpoint) -> Result<HybridModel<f32>, CliError> {
    let cfg = ModelConfig::from_metadata(&raw.metadata)
        .map_err(|e| CliError::Runtime(anyhow::anyhow!("checkpoint metadata: {e}")))?;
    let all_attention = raw.metadata.get("arch").map(|a| a == "teacher").unwrap_or(false);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = if all_attention {
        HybridModel::new_teacher(cfg, &mut rng)
    } else {
        HybridModel::new(cfg, &mut rng)
    }
    .map_err(|e| CliError::Runtime(anyhow::anyhow!("rebuilding model: {e}")))?;
    load_into(raw, &mut model)
        .map_err(|e| CliError::Runtime(anyhow::anyhow!("loading weights: {e}")))?;
    Ok(model)
}

/// The run config must describe the same architecture as the checkpoint
/// (the positional-encoding variant is owned by the pipeline, not the
/// config, so it is exempt).
fn check_model_agreement(cfg: &RunConfig, ckpt_cfg: &ModelConfig) -> Result<(), CliError> {
    let mut want = cfg.model_config();
    want.pe = ckpt_cfg.pe;
    if &want != ckpt_cfg {
        return Err(usage(
            "config model.* keys disagree with the checkpoint's architecture; \
             pass the config the pipeline was started with",
        ));
    }
    Ok(())
}

fn stage_opts(cfg: &RunConfig, steps: usize, batch: usize, lr: f64) -> StageOpts {
    StageOpts {
        steps,
        batch,
        lr,
        seed: cfg.seed,
        val_every: cfg.val_every,
        val_count: cfg.val_count,
        ema_decay: cfg.ema_decay,
        // Every stage ships its averaged weights; checkpoints never hold a
        // raw last iterate.
        adopt_ema: true,
    }
}

fn write_metrics(common: &Common, cmd: &str, log: &MetricsLog) -> Result<(), CliError> {
    fs::write(common.out_dir.join(format!("metrics.{cmd}.csv")), log.to_csv())?;
    Ok(())
}

fn save_stage_checkpoint(
    common: &Common,
    model: &HybridModel<f32>,
    stage: StageTag,
    steps: usize,
    seed: u64,
    parent_hex: &str,
) -> Result<(), CliError> {
    let meta = stage_metadata(&model.config, model.all_attention, stage, steps, seed);
    let path = common.out_dir.join(ckpt_name(stage));
    save_checkpoint(&path, model, &meta)
        .map_err(|e| CliError::Runtime(anyhow::anyhow!("writing {}: {e}", path.display())))?;
    let chain = write_chain(&common.out_dir, stage, parent_hex)?;
    println!("wrote {} (chain {})", path.display(), &chain[..12]);
    Ok(())
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

const MANIFEST_NAME: &str = "dataset-manifest.txt";
const PREVIEW_COUNT: u64 = 64;

fn cmd_gen_data(common: &Common) -> Result<(), CliError> {
    let cfg = resolve_config(common)?;
    ensure_out_dir(common)?;
    write_resolved_config(common, "gen-data", &cfg)?;
    let spec = cfg.dataset_spec();
    let workers = worker_count()?;

    // Per-sample sums collected by index, then reduced in index order, so
    // the statistics are bit-identical for any worker count.
    let c = spec.channels;
    let mut per_sample: Vec<(Vec<f64>, Vec<f64>, usize)> =
        vec![(vec![0.0; c], vec![0.0; c], 0); PREVIEW_COUNT as usize];
    let chunk = per_sample.len().div_ceil(workers);
    std::thread::scope(|scope| {
        for (wi, slot) in per_sample.chunks_mut(chunk).enumerate() {
            let spec = &spec;
            scope.spawn(move || {
                for (off, entry) in slot.iter_mut().enumerate() {
                    let idx = (wi * chunk + off) as u64;
                    let s: LatentSample<f32> = spec.sample(idx);
                    let hw = spec.h * spec.w;
                    for ch in 0..c {
                        let plane = &s.z0[ch * hw..(ch + 1) * hw];
                        entry.0[ch] = plane.iter().map(|&v| v as f64).sum();
                        entry.1[ch] = plane.iter().map(|&v| (v as f64) * (v as f64)).sum();
                    }
                    entry.2 = s.caption.len() / 3;
                }
            });
        }
    });

    let hw = (spec.h * spec.w) as f64;
    let n = PREVIEW_COUNT as f64;
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    let mut two_shape = 0usize;
    for (sums, sqs, shapes) in &per_sample {
        for ch in 0..c {
            mean[ch] += sums[ch];
            var[ch] += sqs[ch];
        }
        two_shape += usize::from(*shapes == 2);
    }
    for ch in 0..c {
        mean[ch] /= n * hw;
        var[ch] = (var[ch] / (n * hw) - mean[ch] * mean[ch]).max(0.0);
    }

    let mut out = String::new();
    out.push_str("# synthetic latent dataset manifest\n");
    let _ = writeln!(out, "channels = {}", spec.channels);
    let _ = writeln!(out, "h = {}", spec.h);
    let _ = writeln!(out, "w = {}", spec.w);
    let _ = writeln!(out, "seed = {}", spec.seed);
    let _ = writeln!(out, "two_shape_percent = {}", spec.two_shape_percent);
    let _ = writeln!(out, "train_pool = {TRAIN_POOL}");
    let _ = writeln!(out, "val_index_offset = {VAL_INDEX_OFFSET}");
    let _ = writeln!(out, "preview_count = {PREVIEW_COUNT}");
    let _ = writeln!(out, "preview_two_shape = {two_shape}");
    for ch in 0..c {
        let _ = writeln!(out, "channel{ch}.mean = {:.6}", mean[ch]);
        let _ = writeln!(out, "channel{ch}.std = {:.6}", var[ch].sqrt());
    }
    out.push('\n');
    for idx in 0..8u64 {
        let s: LatentSample<f32> = spec.sample(idx);
        let desc: Vec<String> = parse_caption(&s.caption)
            .into_iter()
            .map(|(sh, col, q)| {
                format!(
                    "{} color{col} quadrant{q}",
                    if sh == 0 { "square" } else { "disc" }
                )
            })
            .collect();
        let _ = writeln!(out, "# preview {idx}: tokens {:?} -> {}", s.caption, desc.join(" + "));
    }
    fs::write(common.out_dir.join(MANIFEST_NAME), &out)?;
    println!(
        "dataset manifest written for {}x{}x{} (seed {}, {} workers)",
        spec.channels, spec.h, spec.w, spec.seed, workers
    );
    Ok(())
}

/// The manifest's `key = value` head, checked against the current config.
fn require_manifest(common: &Common, spec: &DatasetSpec) -> Result<(), CliError> {
    let path = common.out_dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path).map_err(|_| {
        usage(format!(
            "{} not found: training requires the dataset manifest; run `t2md gen-data` first",
            path.display()
        ))
    })?;
    let mut have: BTreeMap<String, String> = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some((k, v)) = line.split_once('=') {
            have.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    let want = [
        ("channels", spec.channels.to_string()),
        ("h", spec.h.to_string()),
        ("w", spec.w.to_string()),
        ("seed", spec.seed.to_string()),
        ("two_shape_percent", spec.two_shape_percent.to_string()),
        ("train_pool", TRAIN_POOL.to_string()),
    ];
    for (k, v) in want {
        if have.get(k) != Some(&v) {
            return Err(usage(format!(
                "dataset manifest key `{k}` disagrees with the config ({:?} vs {v}); \
                 rerun `t2md gen-data` with this config",
                have.get(k)
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Training stages
// ---------------------------------------------------------------------------

fn cmd_train_teacher(common: &Common) -> Result<(), CliError> {
    let cfg = resolve_config(common)?;
    ensure_out_dir(common)?;
    let spec = cfg.dataset_spec();
    require_manifest(common, &spec)?;
    write_resolved_config(common, "train-teacher", &cfg)?;
    let schedule = cfg.schedule().map_err(usage)?;
    let model_cfg = cfg.model_config();
    model_cfg.validate().map_err(|e| usage(e.to_string()))?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut teacher: HybridModel<f32> =
        HybridModel::new_teacher(model_cfg, &mut rng).map_err(|e| usage(e.to_string()))?;
    let opts = stage_opts(&cfg, cfg.teacher_steps, cfg.teacher_batch, cfg.teacher_lr);
    let mut log = MetricsLog::new();
    let t0 = Instant::now();
    let report = train_teacher(&mut teacher, &schedule, &spec, &opts, &mut log)
        .map_err(|e| CliError::Runtime(e.into()))?;
    write_metrics(common, "train-teacher", &log)?;

    let parent = sha256_hex(cfg.to_canonical_string().as_bytes());
    save_stage_checkpoint(common, &teacher, StageTag::TeacherPretrain, opts.steps, cfg.seed, &parent)?;
    println!(
        "teacher-pretrain: {} steps in {:.0}s | loss {:.4} val {:.4} ema-val {:.4}",
        opts.steps,
        t0.elapsed().as_secs_f64(),
        report.final_loss,
        report.final_val_mse,
        report.final_ema_val_mse
    );
    Ok(())
}

fn cmd_force(common: &Common) -> Result<(), CliError> {
    let cfg = resolve_config(common)?;
    ensure_out_dir(common)?;
    write_resolved_config(common, "force", &cfg)?;
    let raw = require_checkpoint(&common.out_dir, StageTag::TeacherPretrain)?;
    let teacher = model_from_checkpoint(&raw)?;
    check_model_agreement(&cfg, &teacher.config)?;
    let schedule = cfg.schedule().map_err(usage)?;
    let spec = cfg.dataset_spec();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut student = HybridModel::student_from_teacher(&teacher, &mut rng);
    let opts = stage_opts(&cfg, cfg.force_steps, cfg.force_batch, cfg.force_lr);
    let mut log = MetricsLog::new();
    let t0 = Instant::now();
    let report = run_teacher_forcing(&teacher, &mut student, &schedule, &spec, &opts, &mut log)
        .map_err(|e| CliError::Runtime(e.into()))?;
    write_metrics(common, "force", &log)?;

    let parent = read_chain(&common.out_dir, StageTag::TeacherPretrain);
    save_stage_checkpoint(common, &student, StageTag::TeacherForcing, opts.steps, cfg.seed, &parent)?;
    println!(
        "teacher-forcing: {} steps in {:.0}s | per-block mixer mse {:.5}",
        opts.steps,
        t0.elapsed().as_secs_f64(),
        report.final_forcing_mse
    );
    Ok(())
}

fn cmd_distill(common: &Common) -> Result<(), CliError> {
    let cfg = resolve_config(common)?;
    ensure_out_dir(common)?;
    write_resolved_config(common, "distill", &cfg)?;
    let teacher = model_from_checkpoint(&require_checkpoint(&common.out_dir, StageTag::TeacherPretrain)?)?;
    let raw_student = require_checkpoint(&common.out_dir, StageTag::TeacherForcing)?;
    let mut student = model_from_checkpoint(&raw_student)?;
    check_model_agreement(&cfg, &student.config)?;
    let schedule = cfg.schedule().map_err(usage)?;
    let spec = cfg.dataset_spec();

    let opts = KdOpts {
        stage: stage_opts(&cfg, cfg.kd_steps, cfg.kd_batch, cfg.kd_lr),
        lambda_pseudo: cfg.kd_lambda_pseudo,
        lambda_mixer: cfg.kd_lambda_mixer,
    };
    let mut log = MetricsLog::new();
    let t0 = Instant::now();
    let report = run_knowledge_distill(&teacher, &mut student, &schedule, &spec, &opts, &mut log)
        .map_err(|e| CliError::Runtime(e.into()))?;
    write_metrics(common, "distill", &log)?;

    let parent = read_chain(&common.out_dir, StageTag::TeacherForcing);
    save_stage_checkpoint(common, &student, StageTag::KnowledgeDistill, opts.stage.steps, cfg.seed, &parent)?;
    println!(
        "knowledge-distill: {} steps in {:.0}s | val {:.4} ema-val {:.4} teacher-gap {:.5}",
        opts.stage.steps,
        t0.elapsed().as_secs_f64(),
        report.final_val_mse,
        report.final_ema_val_mse,
        report.final_divergence
    );
    Ok(())
}

fn cmd_adapt(common: &Common) -> Result<(), CliError> {
    let cfg = resolve_config(common)?;
    ensure_out_dir(common)?;
    write_resolved_config(common, "adapt", &cfg)?;
    let raw = require_checkpoint(&common.out_dir, StageTag::KnowledgeDistill)?;
    let mut student = model_from_checkpoint(&raw)?;
    check_model_agreement(&cfg, &student.config)?;
    let schedule = cfg.schedule().map_err(usage)?;
    let spec = cfg.dataset_spec();

    let opts = stage_opts(&cfg, cfg.adapt_steps, cfg.adapt_batch, cfg.adapt_lr);
    let mut log = MetricsLog::new();
    let t0 = Instant::now();
    let report = run_adaptation(&mut student, &schedule, &spec, &opts, &mut log)
        .map_err(|e| CliError::Runtime(e.into()))?;
    write_metrics(common, "adapt", &log)?;

    let parent = read_chain(&common.out_dir, StageTag::KnowledgeDistill);
    save_stage_checkpoint(common, &student, StageTag::Adaptation, opts.steps, cfg.seed, &parent)?;
    println!(
        "adaptation: {} steps in {:.0}s | val before swap {:.4}, after swap {:.4}, after tuning {:.4}",
        opts.steps,
        t0.elapsed().as_secs_f64(),
        report.pre_swap_val,
        report.post_swap_val,
        report.final_val
    );
    Ok(())
}

fn cmd_finetune(common: &Common) -> Result<(), CliError> {
    let cfg = resolve_config(common)?;
    ensure_out_dir(common)?;
    write_resolved_config(common, "finetune", &cfg)?;
    let raw = require_checkpoint(&common.out_dir, StageTag::Adaptation)?;
    let mut student = model_from_checkpoint(&raw)?;
    check_model_agreement(&cfg, &student.config)?;
    let schedule = cfg.schedule().map_err(usage)?;
    let spec = cfg.dataset_spec();

    let opts = FinetuneOpts {
        steps_mixed: cfg.finetune_mixed_steps,
        steps_high: cfg.finetune_high_steps,
        batch: cfg.finetune_batch,
        lr: cfg.finetune_lr,
        seed: cfg.seed,
        highres_share: cfg.finetune_mixed_share,
        val_count: cfg.val_count,
        ema_decay: cfg.ema_decay,
        adopt_ema: true,
    };
    let mut log = MetricsLog::new();
    let t0 = Instant::now();
    let report = run_highres_finetune(&mut student, &schedule, &spec, &opts, &mut log)
        .map_err(|e| CliError::Runtime(e.into()))?;
    write_metrics(common, "finetune", &log)?;

    let parent = read_chain(&common.out_dir, StageTag::Adaptation);
    let steps = opts.steps_mixed + opts.steps_high;
    save_stage_checkpoint(common, &student, StageTag::HighResFinetune, steps, cfg.seed, &parent)?;
    println!(
        "highres-finetune: {} steps in {:.0}s | mixed share {:.2}, 4x val {:.4} -> {:.4}",
        steps,
        t0.elapsed().as_secs_f64(),
        report.mixed_share,
        report.high_val_before,
        report.high_val_after
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// sample
// ---------------------------------------------------------------------------

/// Denoiser view of a model pinned to one latent grid.
struct GridDenoiser<'a> {
    model: &'a HybridModel<f32>,
    h: usize,
    w: usize,
}

impl Denoiser<f32> for GridDenoiser<'_> {
    fn predict_noise(&self, z_t: &[f32], t: usize, caption: &[usize]) -> Vec<f32> {
        self.model
            .infer(z_t, self.h, self.w, t, caption)
            .expect("admission checked before sampling")
    }
}

fn cmd_sample(common: &Common, ckpt: Option<&Path>, scale: usize) -> Result<(), CliError> {
    let cfg = resolve_config(common)?;
    ensure_out_dir(common)?;
    write_resolved_config(common, "sample", &cfg)?;
    if scale == 0 {
        return Err(usage("--scale must be at least 1"));
    }

    let (raw, source) = match ckpt {
        Some(path) => {
            let raw = load_checkpoint(path)
                .map_err(|e| CliError::Runtime(anyhow::anyhow!("reading {}: {e}", path.display())))?;
            (raw, path.to_path_buf())
        }
        None => {
            let order = [
                StageTag::HighResFinetune,
                StageTag::Adaptation,
                StageTag::KnowledgeDistill,
                StageTag::TeacherForcing,
                StageTag::TeacherPretrain,
            ];
            let found = order
                .into_iter()
                .find(|&s| common.out_dir.join(ckpt_name(s)).exists())
                .ok_or_else(|| {
                    usage(format!(
                        "no checkpoint under {}; run `t2md train-teacher` (or later stages) \
                         first, or pass --ckpt",
                        common.out_dir.display()
                    ))
                })?;
            let path = common.out_dir.join(ckpt_name(found));
            let raw = load_checkpoint(&path)
                .map_err(|e| CliError::Runtime(anyhow::anyhow!("reading {}: {e}", path.display())))?;
            (raw, path)
        }
    };
    let model = model_from_checkpoint(&raw)?;
    let schedule = cfg.schedule().map_err(usage)?;
    let mc = &model.config;
    let (h, w) = (mc.latent_h * scale, mc.latent_w * scale);

    // Pre-flight admission: a grid the positions cannot address is an
    // operator error (sample from an adapted checkpoint instead).
    let probe = vec![0.0f32; mc.channels * h * w];
    if let Err(e) = model.infer(&probe, h, w, 1, &[0]) {
        return Err(usage(format!(
            "cannot sample at {h}x{w} from {}: {e}",
            source.display()
        )));
    }

    let denoiser = GridDenoiser { model: &model, h, w };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let count = cfg.sample_count;
    let mut bin: Vec<u8> = Vec::with_capacity(count * probe.len() * 4);
    let mut text = String::new();
    let _ = writeln!(text, "checkpoint: {}", source.display());
    let _ = writeln!(
        text,
        "stage: {}  grid: {}x{}x{}  draws: {count}  schedule: {} steps",
        raw.metadata.get("stage").map(String::as_str).unwrap_or("?"),
        mc.channels,
        h,
        w,
        schedule.steps(),
    );
    let mut hits = 0usize;
    for i in 0..count {
        let quad = i % NUM_QUADRANTS;
        let color = (i / NUM_QUADRANTS) % NUM_COLORS;
        let shape = (i / (NUM_QUADRANTS * NUM_COLORS)) % 2;
        let caption = single_caption(shape, color, quad);
        let z = draw_sample(&denoiser, &schedule, probe.len(), &caption, &mut rng);
        let got = classify_quadrant(&z, mc.channels, h, w, color);
        let hit = got == quad;
        hits += usize::from(hit);
        for v in &z {
            bin.extend_from_slice(&v.to_le_bytes());
        }
        let _ = writeln!(
            text,
            "sample {i}: caption {:?} ({} color{color} quadrant{quad}) -> mass peaks in quadrant{got} [{}]",
            caption,
            if shape == 0 { "square" } else { "disc" },
            if hit { "hit" } else { "miss" },
        );
    }
    let _ = writeln!(text, "quadrant accuracy: {hits}/{count}");
    fs::write(common.out_dir.join("samples.bin"), &bin)?;
    fs::write(common.out_dir.join("samples.txt"), &text)?;
    println!(
        "{count} draws at {}x{h}x{w} -> samples.bin / samples.txt | quadrant accuracy {hits}/{count}",
        mc.channels
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

fn cmd_bench(common: &Common) -> Result<(), CliError> {
    let cfg = resolve_config(common)?;
    ensure_out_dir(common)?;
    write_resolved_config(common, "bench", &cfg)?;
    let mut spec = BenchSpec::desk_default();
    spec.reps = cfg.bench_reps;
    spec.validate().map_err(|e| usage(e.to_string()))?;

    let t0 = Instant::now();
    let report = run_bench(&spec).map_err(|e| CliError::Runtime(anyhow::anyhow!("{e}")))?;
    let probe = run_layer_probe(&spec).map_err(|e| CliError::Runtime(anyhow::anyhow!("{e}")))?;
    fs::write(common.out_dir.join("bench.csv"), rows_to_csv(&report.rows))?;
    fs::write(common.out_dir.join("bench-layers.csv"), probe_to_csv(&probe))?;
    let text = summary(&report);
    fs::write(common.out_dir.join("bench-summary.txt"), &text)?;
    print!("{text}");
    println!("bench finished in {:.0}s", t0.elapsed().as_secs_f64());
    Ok(())
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

/// Randomized agreement check between the stepwise scan and the chunked
/// work-efficient scan, in both precisions.
fn scan_agreement(cases: usize) -> (usize, f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5CAA64);
    let mut worst64 = 0.0f64;
    let mut worst32 = 0.0f64;
    for _ in 0..cases {
        let l = 1 + (std_normal(&mut rng).abs() * 20.0) as usize;
        let n = 1 + (std_normal(&mut rng).abs() * 4.0) as usize;
        let p = 1 + (std_normal(&mut rng).abs() * 4.0) as usize;
        let chunk = 1 + (std_normal(&mut rng).abs() * 8.0) as usize;
        let gen = |len: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..len).map(|_| std_normal(rng)).collect()
        };
        let x = gen(l * p, &mut rng);
        let abar: Vec<f64> = (0..l).map(|_| std_normal(&mut rng).abs().tanh() * 0.98 + 0.01).collect();
        let bbar = gen(l * n, &mut rng);
        let c = gen(l * n, &mut rng);
        let ref64 = scan_sequential(&x, &abar, &bbar, &c, l, n, p);
        let got64 = scan_chunked(&x, &abar, &bbar, &c, l, n, p, chunk);
        for (a, b) in ref64.iter().zip(&got64) {
            worst64 = worst64.max((a - b).abs());
        }
        let to32 = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
        let (x32, a32, b32, c32) = (to32(&x), to32(&abar), to32(&bbar), to32(&c));
        let ref32 = scan_sequential(&x32, &a32, &b32, &c32, l, n, p);
        let got32 = scan_chunked(&x32, &a32, &b32, &c32, l, n, p, chunk);
        for (a, b) in ref32.iter().zip(&got32) {
            worst32 = worst32.max((a - b).abs() as f64);
        }
    }
    (cases, worst64, worst32)
}

fn print_report(r: &CheckReport) -> bool {
    let ok = r.pass();
    println!(
        "{}  {:<28} cases {:>3}  max err {:.2e}  (tol {:.0e})",
        if ok { "ok  " } else { "FAIL" },
        r.name,
        r.cases,
        r.max_err,
        r.tol
    );
    ok
}

fn cmd_verify(common: &Common) -> Result<(), CliError> {
    let cfg = resolve_config(common)?;
    ensure_out_dir(common)?;
    write_resolved_config(common, "verify", &cfg)?;
    let t0 = Instant::now();
    let mut failures = 0usize;
    let mut checks = 0usize;
    let mut cases = 0usize;

    println!("gradient batteries (64-bit, central differences):");
    for r in op_grad_suite(3).iter().chain(layer_grad_suite(1).iter()) {
        checks += 1;
        cases += r.cases;
        if !print_report(r) {
            failures += 1;
        }
    }

    let (n, worst64, worst32) = scan_agreement(100);
    checks += 2;
    cases += 2 * n;
    let ok64 = worst64 < 1e-10;
    let ok32 = worst32 < 1e-4;
    println!(
        "{}  scan agreement (64-bit)      cases {n:>3}  max err {worst64:.2e}  (tol 1e-10)",
        if ok64 { "ok  " } else { "FAIL" }
    );
    println!(
        "{}  scan agreement (32-bit)      cases {n:>3}  max err {worst32:.2e}  (tol 1e-04)",
        if ok32 { "ok  " } else { "FAIL" }
    );
    failures += usize::from(!ok64) + usize::from(!ok32);

    // Block-layout invariants at the published depth.
    checks += 1;
    cases += 1;
    let pattern = build_pattern(4, 3);
    let attn_at: Vec<usize> = pattern
        .iter()
        .enumerate()
        .filter(|(_, k)| **k == BlockKind::SelfAttn)
        .map(|(i, _)| i)
        .collect();
    let layout_ok = pattern.len() == 28 && attn_at == vec![0, 7, 14, 21];
    println!(
        "{}  block layout 4x(1+2*3)       cases   1  depth {} attention at {:?}",
        if layout_ok { "ok  " } else { "FAIL" },
        pattern.len(),
        attn_at
    );
    failures += usize::from(!layout_ok);

    // Checkpoint round-trip through bytes.
    checks += 1;
    cases += 1;
    let rt_ok = (|| -> Result<bool, CliError> {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = ModelConfig {
            groups: 1,
            mambas_per_group: 1,
            d: 8,
            heads: 2,
            patch: 2,
            n_state: 2,
            expand: 2,
            channels: 2,
            latent_h: 4,
            latent_w: 4,
            text_vocab: 4,
            text_dim: 4,
            pe: PosEncVariant::Standard,
        };
        let model = HybridModel::<f32>::new(cfg, &mut rng)
            .map_err(|e| CliError::Runtime(anyhow::anyhow!("{e}")))?;
        ensure_out_dir(common)?;
        let path = common.out_dir.join(".verify-roundtrip.ckpt");
        let meta = BTreeMap::from([("purpose".to_string(), "roundtrip".to_string())]);
        save_checkpoint(&path, &model, &meta)
            .map_err(|e| CliError::Runtime(anyhow::anyhow!("{e}")))?;
        let bytes = fs::read(&path)?;
        let raw = RawCheckpoint::from_bytes(&bytes)
            .map_err(|e| CliError::Runtime(anyhow::anyhow!("{e}")))?;
        let again = raw.to_bytes();
        let _ = fs::remove_file(&path);
        Ok(bytes == again)
    })()?;
    println!(
        "{}  checkpoint byte round-trip   cases   1",
        if rt_ok { "ok  " } else { "FAIL" }
    );
    failures += usize::from(!rt_ok);

    println!(
        "{checks} checks, {cases} cases, {failures} failures in {:.1}s",
        t0.elapsed().as_secs_f64()
    );
    if failures > 0 {
        return Err(CliError::Runtime(anyhow::anyhow!(
            "{failures} of {checks} invariant checks failed"
        )));
    }
    Ok(())
}
