//! Staged training: teacher pretraining, per-layer mixer forcing, combined
//! distillation, positional adaptation, and multi-resolution fine-tuning,
//! plus the optimizer, weight averaging, and metrics plumbing they share.
//!
//! Freezing is structural: each stage builds its optimizer over exactly the
//! parameter names its policy allows, so frozen weights cannot move. All
//! losses are element means; the layer-wise forcing loss sums those means
//! over the state-space blocks, and the mixer-alignment term of the
//! distillation loss averages them over every block.

pub mod dataset;

use std::collections::BTreeMap;
use std::io;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::diffusion::{mse, NoiseSchedule};
use crate::model::{BlockKind, HybridModel, ModelConfig, ModelError};
use crate::nn::PosEncVariant;
use crate::params::ParamSet;
use crate::stats::least_squares_slope;
use crate::tensor::{std_normal, Element, Id, Tape, Tensor};
use dataset::DatasetSpec;

/// Default weight of the teacher-output (soft-label) term.
pub const LAMBDA_PSEUDO: f64 = 0.5;
/// Default weight of the per-block mixer-alignment term.
pub const LAMBDA_MIXER: f64 = 0.2;
/// Default shadow-average decay.
pub const EMA_DECAY: f64 = 0.9999;
/// Training draws indices from this pool; held-out samples live past it.
pub const TRAIN_POOL: u64 = 8192;
/// Seed of the shared probe set used to compare runs against each other.
pub const PROBE_SEED: u64 = 0xAB1A710;

// ---------------------------------------------------------------------------
// Stages and freeze policy
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageTag {
    TeacherPretrain,
    TeacherForcing,
    KnowledgeDistill,
    Adaptation,
    HighResFinetune,
}

impl StageTag {
    pub fn name(self) -> &'static str {
        match self {
            StageTag::TeacherPretrain => "teacher-pretrain",
            StageTag::TeacherForcing => "teacher-forcing",
            StageTag::KnowledgeDistill => "knowledge-distill",
            StageTag::Adaptation => "adaptation",
            StageTag::HighResFinetune => "highres-finetune",
        }
    }

    pub fn parse(s: &str) -> Option<StageTag> {
        [
            StageTag::TeacherPretrain,
            StageTag::TeacherForcing,
            StageTag::KnowledgeDistill,
            StageTag::Adaptation,
            StageTag::HighResFinetune,
        ]
        .into_iter()
        .find(|t| t.name() == s)
    }

    /// Stage whose checkpoint this stage consumes.
    pub fn prerequisite(self) -> Option<StageTag> {
        match self {
            StageTag::TeacherPretrain => None,
            StageTag::TeacherForcing => Some(StageTag::TeacherPretrain),
            StageTag::KnowledgeDistill => Some(StageTag::TeacherForcing),
            StageTag::Adaptation => Some(StageTag::KnowledgeDistill),
            StageTag::HighResFinetune => Some(StageTag::Adaptation),
        }
    }
}

/// Whether a parameter may move during the given stage.
pub fn stage_trainable(stage: StageTag, name: &str) -> bool {
    match stage {
        StageTag::TeacherPretrain | StageTag::Adaptation | StageTag::HighResFinetune => true,
        StageTag::TeacherForcing => name.contains(".mixer."),
        StageTag::KnowledgeDistill => name.contains(".mixer.") || name.contains(".attn."),
    }
}

/// Checkpoint metadata for a stage output.
pub fn stage_metadata(
    cfg: &ModelConfig,
    all_attention: bool,
    stage: StageTag,
    step: usize,
    seed: u64,
) -> BTreeMap<String, String> {
    let mut m = cfg.to_metadata();
    m.insert("arch".into(), if all_attention { "teacher" } else { "hybrid" }.into());
    m.insert("stage".into(), stage.name().into());
    m.insert("step".into(), step.to_string());
    m.insert("seed".into(), seed.to_string());
    m
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{stage} diverged: loss became non-finite at step {step}")]
    Diverged { stage: &'static str, step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adaptive-moment optimizer with decoupled weight decay. Moments are kept
/// in f64 regardless of the parameter element type; updates are elementwise
/// and deterministic.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    steps: usize,
    names: Vec<String>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            steps: 0,
            names: Vec::new(),
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update to the given parameters and clears their
    /// gradients. The slice must list the same names in the same order on
    /// every call; parameters without an accumulated gradient are skipped.
    pub fn step<E: Element>(&mut self, params: &mut [(String, &mut Tensor<E>)]) {
        if self.names.is_empty() {
            self.names = params.iter().map(|(n, _)| n.clone()).collect();
            self.m = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
            self.v = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        }
        assert_eq!(
            self.names.len(),
            params.len(),
            "optimizer was built over a different parameter set"
        );
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
        for (i, (name, tensor)) in params.iter_mut().enumerate() {
            assert_eq!(&self.names[i], name, "parameter order changed between steps");
            let Some(grad) = tensor.grad.take() else { continue };
            let data = tensor.data_mut();
            for j in 0..data.len() {
                let g = grad[j].to_f64();
                self.m[i][j] = self.beta1 * self.m[i][j] + (1.0 - self.beta1) * g;
                self.v[i][j] = self.beta2 * self.v[i][j] + (1.0 - self.beta2) * g * g;
                let m_hat = self.m[i][j] / bc1;
                let v_hat = self.v[i][j] / bc2;
                let mut p = data[j].to_f64();
                p -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * p);
                data[j] = E::from_f64(p);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Shadow averaging
// ---------------------------------------------------------------------------

/// Exponential moving average of every parameter, with the initialization
/// bias divided out. After `k` updates the raw shadow is
/// `d^k w_0 + (1-d) sum d^(k-j) w_j`; the corrected average removes the
/// `d^k w_0` term and rescales, so short stages are not dragged toward
/// their starting weights. Constructed fresh at the start of each stage;
/// the shadow itself is never persisted, but a stage may adopt the
/// corrected average as its output weights.
#[derive(Clone, Debug)]
pub struct Ema<E: Element> {
    pub decay: f64,
    names: Vec<String>,
    shadow: Vec<Vec<E>>,
    init: Vec<Vec<E>>,
    updates: u32,
}

impl<E: Element> Ema<E> {
    pub fn new<M: ParamSet<E>>(model: &M, decay: f64) -> Self {
        let params = model.params();
        let values: Vec<Vec<E>> = params.iter().map(|(_, t)| t.data().to_vec()).collect();
        Ema {
            decay,
            names: params.iter().map(|(n, _)| n.clone()).collect(),
            shadow: values.clone(),
            init: values,
            updates: 0,
        }
    }

    /// `shadow <- d * shadow + (1 - d) * current`.
    pub fn update<M: ParamSet<E>>(&mut self, model: &M) {
        let d = E::from_f64(self.decay);
        let omd = E::from_f64(1.0 - self.decay);
        for (i, (name, t)) in model.params().iter().enumerate() {
            assert_eq!(&self.names[i], name, "model shape changed under the shadow average");
            for (s, &p) in self.shadow[i].iter_mut().zip(t.data()) {
                *s = d * *s + omd * p;
            }
        }
        self.updates += 1;
    }

    /// Writes the bias-corrected average into `model`. With no updates yet
    /// (or a degenerate decay of exactly 1) this is the plain shadow, i.e.
    /// the starting weights.
    pub fn apply_to<M: ParamSet<E>>(&self, model: &mut M) {
        let dk = self.decay.powi(self.updates as i32);
        let corrected = self.updates > 0 && 1.0 - dk > 1e-12;
        for (i, (name, t)) in model.params_mut().into_iter().enumerate() {
            assert_eq!(self.names[i], name, "model shape changed under the shadow average");
            let dst = t.data_mut();
            if corrected {
                for ((o, &s), &w0) in dst.iter_mut().zip(&self.shadow[i]).zip(&self.init[i]) {
                    let v = (s.to_f64() - dk * w0.to_f64()) / (1.0 - dk);
                    *o = E::from_f64(v);
                }
            } else {
                dst.copy_from_slice(&self.shadow[i]);
            }
        }
    }

    /// A copy of `model` carrying the bias-corrected average.
    pub fn evaluated(&self, model: &HybridModel<E>) -> HybridModel<E> {
        let mut copy = model.clone();
        self.apply_to(&mut copy);
        copy
    }
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct MetricsRow {
    pub stage: String,
    pub step: usize,
    pub loss_total: Option<f64>,
    pub loss_mse: Option<f64>,
    pub loss_pseudo: Option<f64>,
    pub loss_mixer: Option<f64>,
    pub forcing_mse: Option<f64>,
    pub val_mse: Option<f64>,
    pub ema_val_mse: Option<f64>,
    pub wall_ms: u128,
}

impl MetricsRow {
    fn blank(stage: &str, step: usize) -> Self {
        MetricsRow {
            stage: stage.to_string(),
            step,
            loss_total: None,
            loss_mse: None,
            loss_pseudo: None,
            loss_mixer: None,
            forcing_mse: None,
            val_mse: None,
            ema_val_mse: None,
            wall_ms: 0,
        }
    }
}

pub const METRICS_HEADER: &str =
    "stage,step,loss_total,loss_mse,loss_pseudo,loss_mixer,forcing_mse,val_mse,ema_val_mse,wall_ms";

#[derive(Clone, Debug, Default)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsLog {
    pub fn new() -> Self {
        MetricsLog { rows: Vec::new() }
    }

    pub fn push(&mut self, row: MetricsRow) {
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.stage,
                r.step,
                opt_cell(r.loss_total),
                opt_cell(r.loss_mse),
                opt_cell(r.loss_pseudo),
                opt_cell(r.loss_mixer),
                opt_cell(r.forcing_mse),
                opt_cell(r.val_mse),
                opt_cell(r.ema_val_mse),
                r.wall_ms,
            ));
        }
        out
    }

    /// CSV with the timing column removed; this is the representation two
    /// same-seed runs must agree on byte for byte.
    pub fn to_csv_without_wall(&self) -> String {
        self.to_csv()
            .lines()
            .map(|l| {
                let cut = l.rfind(',').expect("metrics rows always hold a timing column");
                &l[..cut]
            })
            .collect::<Vec<_>>()
            .join("\n")
            + "\n"
    }

    pub fn write_csv(&self, path: &Path) -> io::Result<()> {
        std::fs::write(path, self.to_csv())
    }
}

// ---------------------------------------------------------------------------
// Example drawing and validation
// ---------------------------------------------------------------------------

/// One noised training or validation example.
#[derive(Clone, Debug)]
pub struct DrawnExample<E: Element> {
    pub z_t: Vec<E>,
    pub eps: Vec<E>,
    pub t: usize,
    pub caption: Vec<usize>,
    pub h: usize,
    pub w: usize,
}

/// Draws a random training example: random pool index, uniform step,
/// unit-normal noise.
pub fn draw_example<E: Element>(
    spec: &DatasetSpec,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> DrawnExample<E> {
    let index = rng.gen_range(0..TRAIN_POOL);
    let sample = spec.sample::<E>(index);
    draw_from(sample, spec, schedule, rng)
}

fn draw_from<E: Element>(
    sample: dataset::LatentSample<E>,
    spec: &DatasetSpec,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> DrawnExample<E> {
    let t = rng.gen_range(1..=schedule.steps());
    let eps: Vec<E> = (0..sample.z0.len())
        .map(|_| E::from_f64(std_normal(rng)))
        .collect();
    let z_t = schedule.add_noise(&sample.z0, t, &eps);
    DrawnExample { z_t, eps, t, caption: sample.caption, h: spec.h, w: spec.w }
}

/// Fixed held-out prediction targets.
#[derive(Clone, Debug)]
pub struct ValSet<E: Element> {
    pub examples: Vec<DrawnExample<E>>,
}

/// Deterministic validation set drawn from the held-out index range.
pub fn build_val_set<E: Element>(
    spec: &DatasetSpec,
    schedule: &NoiseSchedule,
    count: usize,
    seed: u64,
) -> ValSet<E> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples = (0..count)
        .map(|i| draw_from(spec.val_sample::<E>(i as u64), spec, schedule, &mut rng))
        .collect();
    ValSet { examples }
}

/// Mean noise-prediction error over the validation set.
pub fn val_mse<E: Element>(model: &HybridModel<E>, val: &ValSet<E>) -> Result<f64, ModelError> {
    let mut total = 0.0;
    for ex in &val.examples {
        let pred = model.infer(&ex.z_t, ex.h, ex.w, ex.t, &ex.caption)?;
        total += mse(&pred, &ex.eps);
    }
    Ok(total / val.examples.len() as f64)
}

/// Mean squared gap between two models' predictions on the same inputs.
pub fn val_divergence<E: Element>(
    a: &HybridModel<E>,
    b: &HybridModel<E>,
    val: &ValSet<E>,
) -> Result<f64, ModelError> {
    let mut total = 0.0;
    for ex in &val.examples {
        let pa = a.infer(&ex.z_t, ex.h, ex.w, ex.t, &ex.caption)?;
        let pb = b.infer(&ex.z_t, ex.h, ex.w, ex.t, &ex.caption)?;
        total += mse(&pa, &pb);
    }
    Ok(total / val.examples.len() as f64)
}

// ---------------------------------------------------------------------------
// Shared step plumbing
// ---------------------------------------------------------------------------

/// Copies tape gradients into the matching model parameters, scaled by
/// `1/batch`, honoring the stage's trainability filter.
fn accumulate_filtered<E: Element, F: Fn(&str) -> bool>(
    tape: &Tape<E>,
    model: &mut HybridModel<E>,
    filter: &F,
    scale: f64,
) {
    let s = E::from_f64(scale);
    for (name, tensor) in model.params_mut() {
        if !filter(&name) {
            continue;
        }
        if let Some(g) = tape.grad_of(&*tensor) {
            let scaled: Vec<E> = g.iter().map(|&v| v * s).collect();
            tensor.accumulate_grad(&scaled);
        }
    }
}

fn optimizer_step<E: Element, F: Fn(&str) -> bool>(
    opt: &mut AdamW,
    model: &mut HybridModel<E>,
    filter: &F,
) {
    let mut params: Vec<(String, &mut Tensor<E>)> = model
        .params_mut()
        .into_iter()
        .filter(|(n, _)| filter(n))
        .collect();
    opt.step(&mut params);
}

/// Runs one example through the model, backpropagates the plain
/// noise-prediction loss, and accumulates `scale`-weighted gradients.
/// Returns the example's loss.
fn grad_accumulate_example<E: Element, F: Fn(&str) -> bool>(
    model: &mut HybridModel<E>,
    ex: &DrawnExample<E>,
    filter: &F,
    scale: f64,
) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let shape = [model.config.channels, ex.h, ex.w];
    let z_id = tape.leaf_vec(&shape, ex.z_t.clone(), false);
    let rec = model.forward(&mut tape, z_id, ex.t, &ex.caption)?;
    let target = tape.leaf_vec(&shape, ex.eps.clone(), false);
    let loss = tape.mse(rec.out, target);
    let value = tape.val(loss)[0].to_f64();
    tape.backward(loss);
    accumulate_filtered(&tape, model, filter, scale);
    Ok(value)
}

#[derive(Clone, Copy, Debug)]
pub struct StageOpts {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Validation cadence in steps; validation always also runs on the
    /// final step.
    pub val_every: usize,
    pub val_count: usize,
    pub ema_decay: f64,
    /// When set, the stage's output weights are the bias-corrected
    /// parameter average rather than the last iterate.
    pub adopt_ema: bool,
}

impl StageOpts {
    fn val_due(&self, step: usize) -> bool {
        step == self.steps || (self.val_every > 0 && step % self.val_every == 0)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TrainReport {
    pub final_loss: f64,
    pub final_val_mse: f64,
    pub final_ema_val_mse: f64,
}

/// Plain noise-prediction training under the given stage's freeze policy.
/// This is both the teacher trainer and the baseline the distillation
/// runner degenerates to when both auxiliary weights are zero.
pub fn train_diffusion<E: Element>(
    model: &mut HybridModel<E>,
    schedule: &NoiseSchedule,
    data: &DatasetSpec,
    stage: StageTag,
    opts: &StageOpts,
    log: &mut MetricsLog,
) -> Result<TrainReport, TrainError> {
    let filter = |n: &str| stage_trainable(stage, n);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let val = build_val_set::<E>(data, schedule, opts.val_count, opts.seed ^ 0x5EED);
    let mut opt = AdamW::new(opts.lr);
    let mut ema = Ema::new(model, opts.ema_decay);
    let mut report = TrainReport { final_loss: f64::NAN, final_val_mse: f64::NAN, final_ema_val_mse: f64::NAN };

    for step in 1..=opts.steps {
        let t0 = Instant::now();
        let scale = 1.0 / opts.batch as f64;
        let mut loss_sum = 0.0;
        for _ in 0..opts.batch {
            let ex = draw_example::<E>(data, schedule, &mut rng);
            loss_sum += grad_accumulate_example(model, &ex, &filter, scale)?;
        }
        let loss = loss_sum * scale;
        if !loss.is_finite() {
            return Err(TrainError::Diverged { stage: stage.name(), step });
        }
        optimizer_step(&mut opt, model, &filter);
        ema.update(model);

        let mut row = MetricsRow::blank(stage.name(), step);
        row.loss_total = Some(loss);
        row.loss_mse = Some(loss);
        if opts.val_due(step) {
            let v = val_mse(model, &val)?;
            let ev = val_mse(&ema.evaluated(model), &val)?;
            row.val_mse = Some(v);
            row.ema_val_mse = Some(ev);
            report.final_val_mse = v;
            report.final_ema_val_mse = ev;
        }
        report.final_loss = loss;
        row.wall_ms = t0.elapsed().as_millis();
        log.push(row);
    }
    if opts.adopt_ema && opts.steps > 0 {
        ema.apply_to(model);
        // The averaged weights are what leaves the stage, so they are the
        // final validation number too.
        report.final_val_mse = report.final_ema_val_mse;
    }
    Ok(report)
}

/// Teacher pretraining: plain training of the all-attention model.
pub fn train_teacher<E: Element>(
    teacher: &mut HybridModel<E>,
    schedule: &NoiseSchedule,
    data: &DatasetSpec,
    opts: &StageOpts,
    log: &mut MetricsLog,
) -> Result<TrainReport, TrainError> {
    assert!(teacher.all_attention, "the teacher is the all-attention variant");
    train_diffusion(teacher, schedule, data, StageTag::TeacherPretrain, opts, log)
}

// ---------------------------------------------------------------------------
// Stage 1: layer-level mixer forcing
// ---------------------------------------------------------------------------

/// Indices of the student's state-space blocks.
fn mamba_positions<E: Element>(student: &HybridModel<E>) -> Vec<usize> {
    student
        .blocks
        .iter()
        .enumerate()
        .filter(|(_, b)| b.kind != BlockKind::SelfAttn)
        .map(|(i, _)| i)
        .collect()
}

/// Builds the forcing loss for one example on the tape: for each
/// state-space block, the student mixer consumes the teacher's recorded
/// mixer input and is regressed onto the teacher's mixer output. Per-block
/// element means are summed over blocks.
fn forcing_example_loss<E: Element>(
    student: &HybridModel<E>,
    positions: &[usize],
    taps: &[(Vec<E>, Vec<E>)],
    tape: &mut Tape<E>,
    ht: usize,
    wt: usize,
) -> Id {
    let d = student.config.d;
    let l = ht * wt;
    let mut total: Option<Id> = None;
    for &n in positions {
        let tap_in = tape.leaf_vec(&[l, d], taps[n].0.clone(), false);
        let out = student.blocks[n].mix(tape, tap_in, ht, wt);
        let target = tape.leaf_vec(&[l, d], taps[n].1.clone(), false);
        let term = tape.mse(out, target);
        total = Some(match total {
            Some(acc) => tape.add(acc, term),
            None => term,
        });
    }
    total.expect("a hybrid student always has state-space blocks")
}

#[derive(Clone, Debug)]
pub struct ForcingReport {
    /// Forcing loss per step (sum over state-space blocks of element-mean
    /// errors), in step order.
    pub curve: Vec<f64>,
    /// Mean per-block error at the final step.
    pub final_forcing_mse: f64,
}

/// Trains the student's state-space mixers to reproduce the teacher's
/// mixer outputs on the teacher's own mixer inputs. Only `.mixer.`
/// parameters are optimized.
pub fn run_teacher_forcing<E: Element>(
    teacher: &HybridModel<E>,
    student: &mut HybridModel<E>,
    schedule: &NoiseSchedule,
    data: &DatasetSpec,
    opts: &StageOpts,
    log: &mut MetricsLog,
) -> Result<ForcingReport, TrainError> {
    assert!(teacher.all_attention, "mixer targets come from the all-attention variant");
    assert_eq!(teacher.depth(), student.depth(), "teacher and student depth must match");
    let stage = StageTag::TeacherForcing;
    let filter = |n: &str| stage_trainable(stage, n);
    let positions = mamba_positions(student);
    let (ht, wt) = student.config.token_grid();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let val = build_val_set::<E>(data, schedule, opts.val_count, opts.seed ^ 0x5EED);
    let mut opt = AdamW::new(opts.lr);
    let mut ema = Ema::new(student, opts.ema_decay);
    let mut curve = Vec::with_capacity(opts.steps);

    for step in 1..=opts.steps {
        let t0 = Instant::now();
        let scale = 1.0 / opts.batch as f64;
        let mut loss_sum = 0.0;
        for _ in 0..opts.batch {
            let ex = draw_example::<E>(data, schedule, &mut rng);
            let (_, taps) = teacher.infer_with_taps(&ex.z_t, ex.h, ex.w, ex.t, &ex.caption)?;
            let mut tape = Tape::new();
            let loss = forcing_example_loss(student, &positions, &taps, &mut tape, ht, wt);
            loss_sum += tape.val(loss)[0].to_f64();
            tape.backward(loss);
            accumulate_filtered(&tape, student, &filter, scale);
        }
        let loss = loss_sum * scale;
        if !loss.is_finite() {
            return Err(TrainError::Diverged { stage: stage.name(), step });
        }
        optimizer_step(&mut opt, student, &filter);
        ema.update(student);
        curve.push(loss);

        let mut row = MetricsRow::blank(stage.name(), step);
        row.loss_total = Some(loss);
        row.forcing_mse = Some(loss / positions.len() as f64);
        if opts.val_due(step) {
            row.val_mse = Some(val_mse(student, &val)?);
            row.ema_val_mse = Some(val_mse(&ema.evaluated(student), &val)?);
        }
        row.wall_ms = t0.elapsed().as_millis();
        log.push(row);
    }
    if opts.adopt_ema && opts.steps > 0 {
        ema.apply_to(student);
    }
    let final_forcing_mse = curve.last().copied().unwrap_or(f64::NAN) / positions.len() as f64;
    Ok(ForcingReport { curve, final_forcing_mse })
}

// ---------------------------------------------------------------------------
// Stage 2: knowledge distillation
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct KdOpts {
    pub stage: StageOpts,
    pub lambda_pseudo: f64,
    pub lambda_mixer: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct KdReport {
    pub final_val_mse: f64,
    pub final_ema_val_mse: f64,
    /// Mean squared gap to the teacher's predictions on the validation set.
    pub final_divergence: f64,
}

/// Trains the student's token mixers (both kinds) under the combined loss:
/// noise-prediction error, plus `lambda_pseudo` times the gap to the
/// frozen teacher's prediction, plus `lambda_mixer` times the per-block
/// mixer gap averaged over all blocks. Teacher targets are recomputed
/// every step; with both weights zero this reduces exactly to
/// [`train_diffusion`] under the same freeze policy.
pub fn run_knowledge_distill<E: Element>(
    teacher: &HybridModel<E>,
    student: &mut HybridModel<E>,
    schedule: &NoiseSchedule,
    data: &DatasetSpec,
    opts: &KdOpts,
    log: &mut MetricsLog,
) -> Result<KdReport, TrainError> {
    assert!(teacher.all_attention, "soft labels come from the all-attention variant");
    assert_eq!(teacher.depth(), student.depth(), "teacher and student depth must match");
    assert!(opts.lambda_pseudo >= 0.0 && opts.lambda_mixer >= 0.0);
    let stage = StageTag::KnowledgeDistill;
    let filter = |n: &str| stage_trainable(stage, n);
    let so = &opts.stage;
    let depth = student.depth();
    let (lt, dd) = (student.config.tokens(), student.config.d);
    let needs_teacher = opts.lambda_pseudo > 0.0 || opts.lambda_mixer > 0.0;

    let mut rng = ChaCha8Rng::seed_from_u64(so.seed);
    let val = build_val_set::<E>(data, schedule, so.val_count, so.seed ^ 0x5EED);
    let mut opt = AdamW::new(so.lr);
    let mut ema = Ema::new(student, so.ema_decay);
    let mut report = KdReport {
        final_val_mse: f64::NAN,
        final_ema_val_mse: f64::NAN,
        final_divergence: f64::NAN,
    };

    for step in 1..=so.steps {
        let t0 = Instant::now();
        let scale = 1.0 / so.batch as f64;
        let (mut sum_mse, mut sum_pseudo, mut sum_mixer) = (0.0, 0.0, 0.0);
        for _ in 0..so.batch {
            let ex = draw_example::<E>(data, schedule, &mut rng);
            let teacher_view = if needs_teacher {
                Some(teacher.infer_with_taps(&ex.z_t, ex.h, ex.w, ex.t, &ex.caption)?)
            } else {
                None
            };

            let mut tape = Tape::new();
            let shape = [student.config.channels, ex.h, ex.w];
            let z_id = tape.leaf_vec(&shape, ex.z_t.clone(), false);
            let rec = student.forward(&mut tape, z_id, ex.t, &ex.caption)?;
            let eps_id = tape.leaf_vec(&shape, ex.eps.clone(), false);
            let l_mse = tape.mse(rec.out, eps_id);
            sum_mse += tape.val(l_mse)[0].to_f64();
            let mut total = l_mse;

            if let Some((t_out, t_taps)) = &teacher_view {
                if opts.lambda_pseudo > 0.0 {
                    let soft = tape.leaf_vec(&shape, t_out.clone(), false);
                    let l_pseudo = tape.mse(rec.out, soft);
                    sum_pseudo += tape.val(l_pseudo)[0].to_f64();
                    let weighted = tape.mul_scalar(l_pseudo, opts.lambda_pseudo);
                    total = tape.add(total, weighted);
                }
                if opts.lambda_mixer > 0.0 {
                    let mut acc: Option<Id> = None;
                    for n in 0..depth {
                        let target = tape.leaf_vec(&[lt, dd], t_taps[n].1.clone(), false);
                        let term = tape.mse(rec.taps[n].1, target);
                        acc = Some(match acc {
                            Some(a) => tape.add(a, term),
                            None => term,
                        });
                    }
                    let l_mixer = tape.mul_scalar(acc.expect("depth >= 1"), 1.0 / depth as f64);
                    sum_mixer += tape.val(l_mixer)[0].to_f64();
                    let weighted = tape.mul_scalar(l_mixer, opts.lambda_mixer);
                    total = tape.add(total, weighted);
                }
            }
            tape.backward(total);
            accumulate_filtered(&tape, student, &filter, scale);
        }
        let (l_total, l_mse_v, l_pseudo_v, l_mixer_v) = (
            (sum_mse + opts.lambda_pseudo * sum_pseudo + opts.lambda_mixer * sum_mixer) * scale,
            sum_mse * scale,
            sum_pseudo * scale,
            sum_mixer * scale,
        );
        if !l_total.is_finite() {
            return Err(TrainError::Diverged { stage: stage.name(), step });
        }
        optimizer_step(&mut opt, student, &filter);
        ema.update(student);

        let mut row = MetricsRow::blank(stage.name(), step);
        row.loss_total = Some(l_total);
        row.loss_mse = Some(l_mse_v);
        if needs_teacher {
            row.loss_pseudo = Some(l_pseudo_v);
            row.loss_mixer = Some(l_mixer_v);
        }
        if so.val_due(step) {
            let v = val_mse(student, &val)?;
            let ev = val_mse(&ema.evaluated(student), &val)?;
            let dv = val_divergence(student, teacher, &val)?;
            row.val_mse = Some(v);
            row.ema_val_mse = Some(ev);
            report.final_val_mse = v;
            report.final_ema_val_mse = ev;
            report.final_divergence = dv;
        }
        row.wall_ms = t0.elapsed().as_millis();
        log.push(row);
    }
    if so.adopt_ema && so.steps > 0 {
        ema.apply_to(student);
        report.final_val_mse = report.final_ema_val_mse;
        report.final_divergence = val_divergence(student, teacher, &val)?;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Stage 3: positional adaptation
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct AdaptReport {
    pub pre_swap_val: f64,
    pub post_swap_val: f64,
    pub final_val: f64,
}

/// Swaps the positional encoding to the centered, long-edge-normalized
/// variant, then briefly fine-tunes every parameter at the base resolution
/// to recover from the representation shift.
pub fn run_adaptation<E: Element>(
    student: &mut HybridModel<E>,
    schedule: &NoiseSchedule,
    data: &DatasetSpec,
    opts: &StageOpts,
    log: &mut MetricsLog,
) -> Result<AdaptReport, TrainError> {
    let val = build_val_set::<E>(data, schedule, opts.val_count, opts.seed ^ 0x5EED);
    let pre_swap_val = val_mse(student, &val)?;
    student.config.pe = PosEncVariant::CenteredNormalized;
    let post_swap_val = val_mse(student, &val)?;
    let report = train_diffusion(student, schedule, data, StageTag::Adaptation, opts, log)?;
    Ok(AdaptReport { pre_swap_val, post_swap_val, final_val: report.final_val_mse })
}

// ---------------------------------------------------------------------------
// Stage 4: multi-resolution fine-tuning
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct FinetuneOpts {
    pub steps_mixed: usize,
    pub steps_high: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Share of double-resolution samples in the mixed phase.
    pub highres_share: f64,
    pub val_count: usize,
    pub ema_decay: f64,
    /// When set, the stage's output weights are the bias-corrected
    /// parameter average over both phases.
    pub adopt_ema: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct FinetuneReport {
    /// Realized double-resolution share over the mixed phase.
    pub mixed_share: f64,
    pub high_val_before: f64,
    pub high_val_after: f64,
}

/// Per-sample resolution choices for the mixed phase.
pub fn draw_highres_flags(rng: &mut ChaCha8Rng, n: usize, share: f64) -> Vec<bool> {
    (0..n).map(|_| rng.gen::<f64>() < share).collect()
}

/// Mixed base/double-resolution fine-tuning followed by a
/// quadruple-resolution-only phase. Requires the centered positional
/// variant; the integer-coordinate variant cannot leave the base grid.
pub fn run_highres_finetune<E: Element>(
    student: &mut HybridModel<E>,
    schedule: &NoiseSchedule,
    data: &DatasetSpec,
    opts: &FinetuneOpts,
    log: &mut MetricsLog,
) -> Result<FinetuneReport, TrainError> {
    assert_eq!(
        student.config.pe,
        PosEncVariant::CenteredNormalized,
        "fine-tuning above the base grid requires the adapted positional variant"
    );
    let stage = StageTag::HighResFinetune;
    let filter = |n: &str| stage_trainable(stage, n);
    let spec2 = data.scaled(2);
    let spec4 = data.scaled(4);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let val4 = build_val_set::<E>(&spec4, schedule, opts.val_count, opts.seed ^ 0x5EED);
    let mut opt = AdamW::new(opts.lr);
    let mut ema = Ema::new(student, opts.ema_decay);

    let mut high_draws = 0usize;
    let mut total_draws = 0usize;

    for step in 1..=opts.steps_mixed {
        let t0 = Instant::now();
        let scale = 1.0 / opts.batch as f64;
        let mut loss_sum = 0.0;
        for &high in &draw_highres_flags(&mut rng, opts.batch, opts.highres_share) {
            let spec = if high { &spec2 } else { data };
            total_draws += 1;
            high_draws += usize::from(high);
            let ex = draw_example::<E>(spec, schedule, &mut rng);
            loss_sum += grad_accumulate_example(student, &ex, &filter, scale)?;
        }
        let loss = loss_sum * scale;
        if !loss.is_finite() {
            return Err(TrainError::Diverged { stage: stage.name(), step });
        }
        optimizer_step(&mut opt, student, &filter);
        ema.update(student);
        let mut row = MetricsRow::blank(stage.name(), step);
        row.loss_total = Some(loss);
        row.loss_mse = Some(loss);
        row.wall_ms = t0.elapsed().as_millis();
        log.push(row);
    }

    let high_val_before = val_mse(student, &val4)?;

    for step in 1..=opts.steps_high {
        let t0 = Instant::now();
        let scale = 1.0 / opts.batch as f64;
        let mut loss_sum = 0.0;
        for _ in 0..opts.batch {
            let ex = draw_example::<E>(&spec4, schedule, &mut rng);
            loss_sum += grad_accumulate_example(student, &ex, &filter, scale)?;
        }
        let loss = loss_sum * scale;
        if !loss.is_finite() {
            return Err(TrainError::Diverged { stage: stage.name(), step: opts.steps_mixed + step });
        }
        optimizer_step(&mut opt, student, &filter);
        ema.update(student);
        let mut row = MetricsRow::blank(stage.name(), opts.steps_mixed + step);
        row.loss_total = Some(loss);
        row.loss_mse = Some(loss);
        row.wall_ms = t0.elapsed().as_millis();
        log.push(row);
    }

    if opts.adopt_ema && opts.steps_mixed + opts.steps_high > 0 {
        ema.apply_to(student);
    }
    let high_val_after = val_mse(student, &val4)?;
    let mixed_share = if total_draws == 0 {
        0.0
    } else {
        high_draws as f64 / total_draws as f64
    };
    Ok(FinetuneReport { mixed_share, high_val_before, high_val_after })
}

// ---------------------------------------------------------------------------
// Probes and ablation arms
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct PropagationProbe {
    /// Mean squared mixer-output gap to the teacher per block, in block
    /// order, when the student consumes its own chained stream.
    pub per_block_mse: Vec<f64>,
    /// Least-squares slope of that profile against block index.
    pub slope: f64,
}

/// Measures how mixer-output deviations accumulate through the student's
/// own forward pass relative to the teacher's.
pub fn error_propagation_probe<E: Element>(
    teacher: &HybridModel<E>,
    student: &HybridModel<E>,
    schedule: &NoiseSchedule,
    data: &DatasetSpec,
    cases: usize,
    seed: u64,
) -> Result<PropagationProbe, TrainError> {
    assert_eq!(teacher.depth(), student.depth());
    let depth = student.depth();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_block = vec![0.0; depth];
    for _ in 0..cases {
        let ex = draw_example::<E>(data, schedule, &mut rng);
        let (_, taps_t) = teacher.infer_with_taps(&ex.z_t, ex.h, ex.w, ex.t, &ex.caption)?;
        let (_, taps_s) = student.infer_with_taps(&ex.z_t, ex.h, ex.w, ex.t, &ex.caption)?;
        for n in 0..depth {
            per_block[n] += mse(&taps_s[n].1, &taps_t[n].1);
        }
    }
    for v in &mut per_block {
        *v /= cases as f64;
    }
    let xs: Vec<f64> = (0..depth).map(|i| i as f64).collect();
    let slope = least_squares_slope(&xs, &per_block);
    Ok(PropagationProbe { per_block_mse: per_block, slope })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationArm {
    /// Fresh hybrid trained on data alone.
    Scratch,
    /// Teacher-initialized, data loss only.
    InitOnly,
    /// Teacher-initialized, data + soft-label loss.
    Pseudo,
    /// Teacher-initialized, data + soft-label + mixer-alignment loss.
    Mixer,
    /// Mixer forcing first, then the full combined loss, within the same
    /// total step budget as the other arms.
    Forcing,
}

impl AblationArm {
    pub fn all() -> [AblationArm; 5] {
        [
            AblationArm::Scratch,
            AblationArm::InitOnly,
            AblationArm::Pseudo,
            AblationArm::Mixer,
            AblationArm::Forcing,
        ]
    }

    pub fn label(self) -> &'static str {
        match self {
            AblationArm::Scratch => "scratch",
            AblationArm::InitOnly => "init-only",
            AblationArm::Pseudo => "+pseudo",
            AblationArm::Mixer => "+mixer",
            AblationArm::Forcing => "+forcing",
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AblationOpts {
    /// Total optimizer steps per arm; the forcing arm spends
    /// `forcing_steps` of these on mixer forcing before distilling.
    pub kd_steps: usize,
    pub forcing_steps: usize,
    pub batch: usize,
    pub kd_lr: f64,
    pub forcing_lr: f64,
    pub val_count: usize,
    pub ema_decay: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct AblationOutcome {
    pub arm: AblationArm,
    pub seed: u64,
    /// Mean squared gap to the teacher on the shared probe set.
    pub divergence: f64,
    pub val_mse: f64,
}

/// Runs one arm for one seed and measures it on the shared probe set.
pub fn run_ablation_arm<E: Element>(
    teacher: &HybridModel<E>,
    schedule: &NoiseSchedule,
    data: &DatasetSpec,
    arm: AblationArm,
    seed: u64,
    opts: &AblationOpts,
) -> Result<AblationOutcome, TrainError> {
    let mut log = MetricsLog::new();
    let stage_opts = StageOpts {
        steps: opts.kd_steps,
        batch: opts.batch,
        lr: opts.kd_lr,
        seed,
        val_every: 0,
        val_count: opts.val_count,
        ema_decay: opts.ema_decay,
        adopt_ema: true,
    };
    let kd = |lp: f64, lm: f64| KdOpts { stage: stage_opts, lambda_pseudo: lp, lambda_mixer: lm };

    let mut arm_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA51);
    let mut student = match arm {
        AblationArm::Scratch => HybridModel::new(teacher.config.clone(), &mut arm_rng)
            .expect("teacher carried a valid config"),
        _ => HybridModel::student_from_teacher(teacher, &mut arm_rng),
    };

    match arm {
        AblationArm::Scratch => {
            train_diffusion(
                &mut student,
                schedule,
                data,
                StageTag::TeacherPretrain,
                &stage_opts,
                &mut log,
            )?;
        }
        AblationArm::InitOnly => {
            run_knowledge_distill(teacher, &mut student, schedule, data, &kd(0.0, 0.0), &mut log)?;
        }
        AblationArm::Pseudo => {
            run_knowledge_distill(
                teacher,
                &mut student,
                schedule,
                data,
                &kd(LAMBDA_PSEUDO, 0.0),
                &mut log,
            )?;
        }
        AblationArm::Mixer => {
            run_knowledge_distill(
                teacher,
                &mut student,
                schedule,
                data,
                &kd(LAMBDA_PSEUDO, LAMBDA_MIXER),
                &mut log,
            )?;
        }
        AblationArm::Forcing => {
            // The forcing phase spends part of the shared step budget, so
            // every arm performs the same total number of optimizer steps.
            assert!(
                opts.forcing_steps < opts.kd_steps,
                "forcing phase must fit inside the shared step budget"
            );
            let forcing_opts = StageOpts {
                steps: opts.forcing_steps,
                lr: opts.forcing_lr,
                ..stage_opts
            };
            run_teacher_forcing(teacher, &mut student, schedule, data, &forcing_opts, &mut log)?;
            let remainder = StageOpts { steps: opts.kd_steps - opts.forcing_steps, ..stage_opts };
            let kd_opts =
                KdOpts { stage: remainder, lambda_pseudo: LAMBDA_PSEUDO, lambda_mixer: LAMBDA_MIXER };
            run_knowledge_distill(teacher, &mut student, schedule, data, &kd_opts, &mut log)?;
        }
    }

    let probe = build_val_set::<E>(data, schedule, opts.val_count, PROBE_SEED);
    Ok(AblationOutcome {
        arm,
        seed,
        divergence: val_divergence(&student, teacher, &probe)?,
        val_mse: val_mse(&student, &probe)?,
    })
}

/// All five arms over all seeds.
pub fn run_ablation<E: Element>(
    teacher: &HybridModel<E>,
    schedule: &NoiseSchedule,
    data: &DatasetSpec,
    seeds: &[u64],
    opts: &AblationOpts,
) -> Result<Vec<AblationOutcome>, TrainError> {
    let mut out = Vec::with_capacity(5 * seeds.len());
    for &seed in seeds {
        for arm in AblationArm::all() {
            out.push(run_ablation_arm(teacher, schedule, data, arm, seed, opts)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            groups: 1,
            mambas_per_group: 1,
            d: 16,
            heads: 2,
            patch: 2,
            n_state: 4,
            expand: 2,
            channels: 4,
            latent_h: 4,
            latent_w: 4,
            text_vocab: 10,
            text_dim: 8,
            pe: PosEncVariant::Standard,
        }
    }

    fn tiny_data() -> DatasetSpec {
        DatasetSpec { channels: 4, h: 4, w: 4, seed: 1, two_shape_percent: 25 }
    }

    fn tiny_schedule() -> NoiseSchedule {
        NoiseSchedule::build(20, 1e-4, 0.2).unwrap()
    }

    #[test]
    fn stage_prerequisites_chain_back_to_pretraining() {
        let mut tag = StageTag::HighResFinetune;
        let mut seen = vec![tag];
        while let Some(prev) = tag.prerequisite() {
            seen.push(prev);
            tag = prev;
        }
        assert_eq!(seen.len(), 5);
        assert_eq!(*seen.last().unwrap(), StageTag::TeacherPretrain);
        assert_eq!(StageTag::parse("knowledge-distill"), Some(StageTag::KnowledgeDistill));
        assert_eq!(StageTag::parse("nonsense"), None);
    }

    #[test]
    fn freeze_policy_masks_the_right_parameters() {
        let mixer = "block3.mixer.w_in";
        let attn = "block0.attn.w_q";
        let ffn = "block2.ffn.lin1.w";
        for &(stage, m, a, f) in &[
            (StageTag::TeacherPretrain, true, true, true),
            (StageTag::TeacherForcing, true, false, false),
            (StageTag::KnowledgeDistill, true, true, false),
            (StageTag::Adaptation, true, true, true),
            (StageTag::HighResFinetune, true, true, true),
        ] {
            assert_eq!(stage_trainable(stage, mixer), m, "{stage:?} mixer");
            assert_eq!(stage_trainable(stage, attn), a, "{stage:?} attention");
            assert_eq!(stage_trainable(stage, ffn), f, "{stage:?} ffn");
        }
    }

    #[test]
    fn adamw_first_step_moves_by_learning_rate() {
        // With bias correction, the first update is lr * g/|g| (+eps fuzz).
        let mut opt = AdamW::new(0.01);
        let mut t = Tensor::<f64>::from_f64s(&[2], &[1.0, -2.0]);
        t.accumulate_grad(&[0.3, -0.7]);
        let mut params = vec![("w".to_string(), &mut t)];
        opt.step(&mut params);
        assert!((t.data()[0] - (1.0 - 0.01)).abs() < 1e-6);
        assert!((t.data()[1] - (-2.0 + 0.01)).abs() < 1e-6);
        assert!(t.grad.is_none(), "step must clear gradients");
    }

    #[test]
    fn adamw_decoupled_decay_shrinks_weights_on_zero_gradient() {
        let mut opt = AdamW::new(0.1);
        opt.weight_decay = 0.5;
        let mut t = Tensor::<f64>::from_f64s(&[1], &[2.0]);
        t.accumulate_grad(&[0.0]);
        let mut params = vec![("w".to_string(), &mut t)];
        opt.step(&mut params);
        // Pure decay: p -= lr * wd * p -> 2.0 * (1 - 0.05).
        assert!((t.data()[0] - 1.9).abs() < 1e-12);
    }

    #[test]
    fn ema_corrects_away_the_initialization_bias() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut model: HybridModel<f64> = HybridModel::new(cfg, &mut rng).unwrap();

        // Starting weights 0 must not leak into the average: after the
        // first update the corrected average IS the observed value, even
        // at a decay of 0.9999 where the raw shadow would still be ~0.
        for (_, t) in model.params_mut() {
            t.data_mut().fill(0.0);
        }
        let d: f64 = 0.9999;
        let mut ema = Ema::new(&model, d);
        for (_, t) in model.params_mut() {
            t.data_mut().fill(1.0);
        }
        ema.update(&model);
        let v = ema.evaluated(&model).params()[0].1.data()[0];
        assert!((v - 1.0).abs() < 1e-9, "one observation of 1.0 must average to 1.0, got {v}");

        // Two observations of 1.0, then one of 0.0: closed-form weighted
        // average d(1+d)/(1+d+d^2) with the init term divided out.
        ema.update(&model);
        for (_, t) in model.params_mut() {
            t.data_mut().fill(0.0);
        }
        ema.update(&model);
        let v3 = ema.evaluated(&model).params()[0].1.data()[0];
        let expect = d * (1.0 + d) / (1.0 + d + d * d);
        assert!((v3 - expect).abs() < 1e-9, "got {v3}, expected {expect}");
    }

    #[test]
    fn ema_with_alternating_params_stays_bounded_by_the_observations() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut model: HybridModel<f64> = HybridModel::new(cfg, &mut rng).unwrap();
        for (_, t) in model.params_mut() {
            t.data_mut().fill(1.0);
        }
        let mut ema = Ema::new(&model, 0.5);
        for step in 0..20 {
            let v = if step % 2 == 0 { -1.0 } else { 1.0 };
            for (_, t) in model.params_mut() {
                t.data_mut().fill(v);
            }
            ema.update(&model);
            let s = ema.evaluated(&model).params()[0].1.data()[0];
            assert!((-1.0..=1.0).contains(&s), "step {step}: average {s} escaped [-1, 1]");
            if step > 0 {
                // Once both signs have been observed the average is a
                // strict mix.
                assert!(s > -1.0 && s < 1.0, "step {step}: average {s} not strictly interior");
            }
        }
    }

    #[test]
    fn metrics_csv_has_the_documented_header_and_strips_timing() {
        let mut log = MetricsLog::new();
        let mut row = MetricsRow::blank("teacher-pretrain", 1);
        row.loss_total = Some(0.5);
        row.loss_mse = Some(0.5);
        row.wall_ms = 123;
        log.push(row);
        let csv = log.to_csv();
        assert!(csv.starts_with(METRICS_HEADER));
        assert!(csv.contains(",123\n"));
        let stripped = log.to_csv_without_wall();
        assert!(!stripped.contains("123"));
        assert!(stripped.contains("teacher-pretrain,1,0.5,0.5,,,,,"));
    }

    #[test]
    fn untrained_model_validation_error_is_near_unit() {
        // A fresh model predicts exactly zero, so its error against
        // unit-normal noise concentrates near 1.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model: HybridModel<f32> = HybridModel::new(tiny_config(), &mut rng).unwrap();
        let val = build_val_set::<f32>(&tiny_data(), &tiny_schedule(), 32, 9);
        let v = val_mse(&model, &val).unwrap();
        assert!((v - 1.0).abs() < 0.15, "untrained validation error {v}");
    }

    #[test]
    fn forcing_loss_is_zero_when_targets_are_the_students_own_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let student: HybridModel<f64> = HybridModel::new(tiny_config(), &mut rng).unwrap();
        let positions = mamba_positions(&student);
        let (ht, wt) = student.config.token_grid();
        let (l, d) = (ht * wt, student.config.d);

        let mut taps = Vec::new();
        let mut case_rng = ChaCha8Rng::seed_from_u64(6);
        for n in 0..student.depth() {
            let tap_in: Vec<f64> = (0..l * d).map(|_| std_normal(&mut case_rng)).collect();
            let tap_out = if positions.contains(&n) {
                student.blocks[n].mix_infer(&tap_in, l, ht, wt)
            } else {
                vec![0.0; l * d]
            };
            taps.push((tap_in, tap_out));
        }
        let mut tape = Tape::new();
        let loss = forcing_example_loss(&student, &positions, &taps, &mut tape, ht, wt);
        assert_eq!(tape.val(loss)[0], 0.0);
    }

    #[test]
    fn forcing_loss_offset_on_one_block_contributes_its_square() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let student: HybridModel<f64> = HybridModel::new(tiny_config(), &mut rng).unwrap();
        let positions = mamba_positions(&student);
        let (ht, wt) = student.config.token_grid();
        let (l, d) = (ht * wt, student.config.d);
        let offset = 0.3;

        let mut taps = Vec::new();
        let mut case_rng = ChaCha8Rng::seed_from_u64(8);
        for n in 0..student.depth() {
            let tap_in: Vec<f64> = (0..l * d).map(|_| std_normal(&mut case_rng)).collect();
            let mut tap_out = if positions.contains(&n) {
                student.blocks[n].mix_infer(&tap_in, l, ht, wt)
            } else {
                vec![0.0; l * d]
            };
            if n == positions[0] {
                for v in &mut tap_out {
                    *v += offset;
                }
            }
            taps.push((tap_in, tap_out));
        }
        let mut tape = Tape::new();
        let loss = forcing_example_loss(&student, &positions, &taps, &mut tape, ht, wt);
        assert!((tape.val(loss)[0] - offset * offset).abs() < 1e-12);
    }

    #[test]
    fn forcing_step_touches_only_mixer_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let teacher: HybridModel<f32> = HybridModel::new_teacher(tiny_config(), &mut rng).unwrap();
        let mut student = HybridModel::student_from_teacher(&teacher, &mut rng);
        let before: Vec<(String, Vec<f32>)> = student
            .params()
            .into_iter()
            .map(|(n, t)| (n, t.data().to_vec()))
            .collect();

        let opts = StageOpts {
            steps: 2,
            batch: 1,
            lr: 1e-3,
            seed: 3,
            val_every: 0,
            val_count: 2,
            ema_decay: 0.99,
            adopt_ema: false,
        };
        let mut log = MetricsLog::new();
        run_teacher_forcing(&teacher, &mut student, &tiny_schedule(), &tiny_data(), &opts, &mut log)
            .unwrap();

        for ((name, old), (name2, now)) in before.iter().zip(student.params()) {
            assert_eq!(name, &name2);
            if name.contains(".mixer.") {
                assert_ne!(old, now.data(), "{name} should have moved");
            } else {
                assert_eq!(old.as_slice(), now.data(), "{name} must stay frozen");
            }
        }
        assert_eq!(log.rows.len(), 2);
        assert!(log.rows[0].forcing_mse.unwrap() > 0.0);
    }

    #[test]
    fn zero_weight_distillation_equals_the_plain_trainer_bit_for_bit() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let teacher: HybridModel<f32> = HybridModel::new_teacher(tiny_config(), &mut rng).unwrap();
        let mut kd_student = HybridModel::student_from_teacher(&teacher, &mut rng);
        let mut plain_student = kd_student.clone();

        let stage = StageOpts {
            steps: 5,
            batch: 2,
            lr: 1e-3,
            seed: 77,
            val_every: 0,
            val_count: 2,
            ema_decay: 0.9,
            adopt_ema: true,
        };
        let mut kd_log = MetricsLog::new();
        run_knowledge_distill(
            &teacher,
            &mut kd_student,
            &tiny_schedule(),
            &tiny_data(),
            &KdOpts { stage, lambda_pseudo: 0.0, lambda_mixer: 0.0 },
            &mut kd_log,
        )
        .unwrap();

        let mut plain_log = MetricsLog::new();
        train_diffusion(
            &mut plain_student,
            &tiny_schedule(),
            &tiny_data(),
            StageTag::KnowledgeDistill,
            &stage,
            &mut plain_log,
        )
        .unwrap();

        for (a, b) in kd_log.rows.iter().zip(&plain_log.rows) {
            assert_eq!(a.loss_total, b.loss_total, "loss curves must match exactly");
        }
        for ((na, ta), (nb, tb)) in kd_student.params().iter().zip(plain_student.params().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data(), "{na} weights must match bit for bit");
        }
    }

    #[test]
    fn highres_flag_share_stays_near_the_requested_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let flags = draw_highres_flags(&mut rng, 1000, 0.8);
        let share = flags.iter().filter(|&&f| f).count() as f64 / 1000.0;
        assert!((0.77..=0.83).contains(&share), "share {share}");
    }

    #[test]
    fn stage_metadata_records_arch_and_stage() {
        let cfg = tiny_config();
        let m = stage_metadata(&cfg, true, StageTag::TeacherPretrain, 42, 7);
        assert_eq!(m.get("arch").map(String::as_str), Some("teacher"));
        assert_eq!(m.get("stage").map(String::as_str), Some("teacher-pretrain"));
        assert_eq!(m.get("step").map(String::as_str), Some("42"));
        let back = ModelConfig::from_metadata(&m).unwrap();
        assert_eq!(back, cfg);
    }
}
