//! Scaling benchmark: wall-time of the hybrid backbone versus an equal
//! depth/width all-attention backbone across a token-count ladder, plus a
//! single-layer probe of the two mixer kinds.
//!
//! Inputs are pre-generated outside the timed region, one warmup pass runs
//! before measurement, and repetitions are enlarged automatically when a
//! row is too fast for the timer. Rows report median-of-means times to
//! resist outliers; fitted log-log slopes summarize the growth law.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{HybridModel, ModelConfig, ModelError};
use crate::nn::{AttentionLayer, PosEncVariant};
use crate::ssm::{MambaLayer, ScanAxis};
use crate::stats::{log_log_slope, mean, median, std_dev};
use crate::tensor::Tensor;

/// Rows whose spread exceeds this fraction of their center are flagged.
pub const UNSTABLE_SPREAD: f64 = 0.25;
/// A row must accumulate at least this much measured time, or its
/// repetition count is doubled (up to [`MAX_REPS`]).
pub const MIN_TOTAL_MS: f64 = 50.0;
pub const MAX_REPS: usize = 512;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("token ladder is empty")]
    EmptyLadder,
    #[error("token ladder must be strictly increasing")]
    NonMonotoneLadder,
    #[error("need at least 5 repetitions, got {0}")]
    TooFewReps(usize),
    #[error("token count {0} must be a perfect square to form a grid")]
    BadTokenCount(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Hybrid,
    AllAttention,
}

impl ModelKind {
    pub fn label(self) -> &'static str {
        match self {
            ModelKind::Hybrid => "hybrid",
            ModelKind::AllAttention => "all-attention",
        }
    }
}

/// What to measure.
#[derive(Clone, Debug)]
pub struct BenchSpec {
    /// Token counts; each must be a perfect square.
    pub ladder: Vec<usize>,
    pub d: usize,
    pub heads: usize,
    pub groups: usize,
    pub mambas_per_group: usize,
    pub n_state: usize,
    pub reps: usize,
    pub warmup: usize,
}

impl BenchSpec {
    /// Desk-scale default: depth 11 (one attention block among ten
    /// state-space blocks) at width 32, ladder 256..16384.
    pub fn desk_default() -> Self {
        BenchSpec {
            ladder: vec![256, 1024, 4096, 16384],
            d: 32,
            heads: 4,
            groups: 1,
            mambas_per_group: 5,
            n_state: 16,
            reps: 5,
            warmup: 1,
        }
    }

    pub fn depth(&self) -> usize {
        self.groups * (1 + 2 * self.mambas_per_group)
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        if self.ladder.is_empty() {
            return Err(BenchError::EmptyLadder);
        }
        if !self.ladder.windows(2).all(|w| w[0] < w[1]) {
            return Err(BenchError::NonMonotoneLadder);
        }
        if self.reps < 5 {
            return Err(BenchError::TooFewReps(self.reps));
        }
        for &l in &self.ladder {
            grid_side(l).ok_or(BenchError::BadTokenCount(l))?;
        }
        Ok(())
    }

    fn config_for(&self, tokens: usize) -> ModelConfig {
        let side = grid_side(tokens).expect("ladder validated");
        ModelConfig {
            groups: self.groups,
            mambas_per_group: self.mambas_per_group,
            d: self.d,
            heads: self.heads,
            patch: 2,
            n_state: self.n_state,
            expand: 2,
            channels: 4,
            latent_h: side * 2,
            latent_w: side * 2,
            text_vocab: 4,
            text_dim: 8,
            pe: PosEncVariant::Standard,
        }
    }
}

/// Integer square root if `tokens` is a perfect square.
fn grid_side(tokens: usize) -> Option<usize> {
    let s = (tokens as f64).sqrt().round() as usize;
    (s * s == tokens && s > 0).then_some(s)
}

#[derive(Clone, Copy, Debug)]
pub struct BenchRow {
    pub kind: ModelKind,
    pub tokens: usize,
    pub d: usize,
    pub depth: usize,
    pub reps: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub throughput_sps: f64,
    pub unstable: bool,
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Fitted log-log slope per kind; absent for single-point ladders.
    pub hybrid_slope: Option<f64>,
    pub attention_slope: Option<f64>,
    /// all-attention time divided by hybrid time at the largest ladder
    /// point.
    pub top_ratio: f64,
    /// Smallest ladder point where the hybrid is strictly faster.
    pub crossover: Option<usize>,
}

/// Center/spread of `times` as median-of-means: times are split into up to
/// five groups, each group is averaged, and the median of those group
/// means is the center.
fn median_of_means(times: &[f64]) -> f64 {
    let groups = times.len().min(5);
    let per = times.len() / groups;
    let means: Vec<f64> = (0..groups)
        .map(|g| mean(&times[g * per..(g + 1) * per]))
        .collect();
    median(&means)
}

/// Times one closure with warmup and automatic repetition enlargement.
fn time_calls<F: FnMut()>(reps0: usize, warmup: usize, mut call: F) -> (usize, f64, f64) {
    for _ in 0..warmup {
        call();
    }
    let mut reps = reps0;
    loop {
        let mut times = Vec::with_capacity(reps);
        for _ in 0..reps {
            let t0 = Instant::now();
            call();
            times.push(t0.elapsed().as_secs_f64() * 1e3);
        }
        let total: f64 = times.iter().sum();
        if total >= MIN_TOTAL_MS || reps >= MAX_REPS {
            return (reps, median_of_means(&times), std_dev(&times));
        }
        reps = (reps * 2).min(MAX_REPS);
    }
}

fn bench_model(spec: &BenchSpec, kind: ModelKind, tokens: usize) -> Result<BenchRow, BenchError> {
    let cfg = spec.config_for(tokens);
    let mut rng = ChaCha8Rng::seed_from_u64(0xBE7C4);
    let model: HybridModel<f32> = match kind {
        ModelKind::Hybrid => HybridModel::new(cfg.clone(), &mut rng)?,
        ModelKind::AllAttention => HybridModel::new_teacher(cfg.clone(), &mut rng)?,
    };
    let (h, w) = (cfg.latent_h, cfg.latent_w);
    let z = Tensor::<f32>::randn(&[cfg.channels, h, w], 1.0, &mut rng);
    let caption = [0usize];

    let (reps, mean_ms, std_ms) = time_calls(spec.reps, spec.warmup, || {
        let out = model.infer(z.data(), h, w, 1, &caption).expect("base grid accepted");
        std::hint::black_box(&out);
    });
    Ok(BenchRow {
        kind,
        tokens,
        d: spec.d,
        depth: spec.depth(),
        reps,
        mean_ms,
        std_ms,
        throughput_sps: 1e3 / mean_ms,
        unstable: std_ms / mean_ms >= UNSTABLE_SPREAD,
    })
}

/// Full-model scaling measurement over both kinds and the whole ladder.
pub fn run_bench(spec: &BenchSpec) -> Result<BenchReport, BenchError> {
    spec.validate()?;
    let mut rows = Vec::with_capacity(2 * spec.ladder.len());
    for kind in [ModelKind::Hybrid, ModelKind::AllAttention] {
        for &tokens in &spec.ladder {
            rows.push(bench_model(spec, kind, tokens)?);
        }
    }
    Ok(summarize(spec, rows))
}

fn summarize(spec: &BenchSpec, rows: Vec<BenchRow>) -> BenchReport {
    let series = |kind: ModelKind| -> (Vec<f64>, Vec<f64>) {
        rows.iter()
            .filter(|r| r.kind == kind)
            .map(|r| (r.tokens as f64, r.mean_ms))
            .unzip()
    };
    let fit = |kind: ModelKind| -> Option<f64> {
        let (xs, ys) = series(kind);
        (xs.len() >= 2).then(|| log_log_slope(&xs, &ys))
    };
    let top = *spec.ladder.last().expect("validated non-empty");
    let at = |kind: ModelKind, tokens: usize| -> f64 {
        rows.iter()
            .find(|r| r.kind == kind && r.tokens == tokens)
            .expect("row exists for every (kind, tokens)")
            .mean_ms
    };
    let crossover = spec
        .ladder
        .iter()
        .copied()
        .find(|&l| at(ModelKind::Hybrid, l) < at(ModelKind::AllAttention, l));
    BenchReport {
        hybrid_slope: fit(ModelKind::Hybrid),
        attention_slope: fit(ModelKind::AllAttention),
        top_ratio: at(ModelKind::AllAttention, top) / at(ModelKind::Hybrid, top),
        crossover,
        rows,
    }
}

// ---------------------------------------------------------------------------
// Single-layer probe
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct LayerProbeRow {
    pub layer_kind: &'static str,
    pub tokens: usize,
    pub d: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub reps: usize,
}

/// Times one self-attention layer against one state-space mixer layer on
/// raw `(tokens, d)` activations across the ladder.
pub fn run_layer_probe(spec: &BenchSpec) -> Result<Vec<LayerProbeRow>, BenchError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x960BE);
    let attn: AttentionLayer<f32> = AttentionLayer::new(spec.d, spec.heads, &mut rng);
    let mamba: MambaLayer<f32> =
        MambaLayer::new(spec.d, spec.heads, spec.n_state, 2, ScanAxis::WidthFirst, &mut rng);
    let mut out = Vec::new();
    for &tokens in &spec.ladder {
        let side = grid_side(tokens).expect("validated");
        let x = Tensor::<f32>::randn(&[tokens, spec.d], 1.0, &mut rng);
        let (reps, mean_ms, std_ms) = time_calls(spec.reps, spec.warmup, || {
            let y = attn.infer(x.data(), tokens);
            std::hint::black_box(&y);
        });
        out.push(LayerProbeRow {
            layer_kind: "self-attention",
            tokens,
            d: spec.d,
            mean_ms,
            std_ms,
            reps,
        });
        let (reps, mean_ms, std_ms) = time_calls(spec.reps, spec.warmup, || {
            let y = mamba.infer(x.data(), side, side);
            std::hint::black_box(&y);
        });
        out.push(LayerProbeRow {
            layer_kind: "ssm-mixer",
            tokens,
            d: spec.d,
            mean_ms,
            std_ms,
            reps,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Reporting
// ---------------------------------------------------------------------------

pub const BENCH_CSV_HEADER: &str = "kind,L,d,depth,reps,mean_ms,std_ms,throughput_sps";
pub const PROBE_CSV_HEADER: &str = "layer_kind,L,d,mean_ms,std_ms,reps";

pub fn rows_to_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(BENCH_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{:.4},{:.4},{:.4}\n",
            r.kind.label(),
            r.tokens,
            r.d,
            r.depth,
            r.reps,
            r.mean_ms,
            r.std_ms,
            r.throughput_sps,
        ));
    }
    out
}

pub fn probe_to_csv(rows: &[LayerProbeRow]) -> String {
    let mut out = String::from(PROBE_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.4},{:.4},{}\n",
            r.layer_kind, r.tokens, r.d, r.mean_ms, r.std_ms, r.reps,
        ));
    }
    out
}

/// Human-readable table plus slope fits, crossover, and stability flags.
pub fn summary(report: &BenchReport) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "{:<14} {:>7} {:>6} {:>10} {:>10} {:>12}\n",
        "kind", "tokens", "reps", "mean_ms", "std_ms", "samples/s"
    ));
    for r in &report.rows {
        s.push_str(&format!(
            "{:<14} {:>7} {:>6} {:>10.3} {:>10.3} {:>12.3}{}\n",
            r.kind.label(),
            r.tokens,
            r.reps,
            r.mean_ms,
            r.std_ms,
            r.throughput_sps,
            if r.unstable { "  [unstable]" } else { "" },
        ));
    }
    match (report.hybrid_slope, report.attention_slope) {
        (Some(h), Some(a)) => {
            s.push_str(&format!(
                "log-log slope: hybrid {h:.3}, all-attention {a:.3}\n"
            ));
        }
        _ => s.push_str("log-log slopes omitted: ladder has a single point\n"),
    }
    s.push_str(&format!(
        "largest-point speedup (all-attention / hybrid): {:.2}x\n",
        report.top_ratio
    ));
    match report.crossover {
        Some(l) => s.push_str(&format!("hybrid faster from {l} tokens\n")),
        None => s.push_str("hybrid never faster on this ladder\n"),
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> BenchSpec {
        BenchSpec {
            ladder: vec![16, 64],
            d: 16,
            heads: 2,
            groups: 1,
            mambas_per_group: 1,
            n_state: 4,
            reps: 5,
            warmup: 1,
        }
    }

    #[test]
    fn validation_rejects_bad_specs() {
        let mut s = tiny_spec();
        s.ladder.clear();
        assert!(matches!(s.validate(), Err(BenchError::EmptyLadder)));

        let mut s = tiny_spec();
        s.ladder = vec![64, 16];
        assert!(matches!(s.validate(), Err(BenchError::NonMonotoneLadder)));

        let mut s = tiny_spec();
        s.reps = 3;
        assert!(matches!(s.validate(), Err(BenchError::TooFewReps(3))));

        let mut s = tiny_spec();
        s.ladder = vec![17];
        assert!(matches!(s.validate(), Err(BenchError::BadTokenCount(17))));
    }

    #[test]
    fn tiny_ladder_produces_complete_finite_rows() {
        let report = run_bench(&tiny_spec()).unwrap();
        assert_eq!(report.rows.len(), 4);
        for r in &report.rows {
            assert!(r.mean_ms.is_finite() && r.mean_ms > 0.0);
            assert!(r.throughput_sps > 0.0);
            assert!(r.reps >= 5);
        }
        assert!(report.hybrid_slope.is_some());
        assert!(report.attention_slope.is_some());
        assert!(report.top_ratio.is_finite());
    }

    #[test]
    fn single_point_ladder_omits_slopes_and_says_so() {
        let mut s = tiny_spec();
        s.ladder = vec![16];
        let report = run_bench(&s).unwrap();
        assert!(report.hybrid_slope.is_none());
        assert!(report.attention_slope.is_none());
        assert!(summary(&report).contains("slopes omitted"));
    }

    #[test]
    fn csv_schemas_are_stable() {
        let report = run_bench(&tiny_spec()).unwrap();
        let csv = rows_to_csv(&report.rows);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(BENCH_CSV_HEADER));
        for line in lines {
            assert_eq!(line.split(',').count(), 8, "row: {line}");
        }

        let probe = run_layer_probe(&tiny_spec()).unwrap();
        assert_eq!(probe.len(), 4);
        let csv = probe_to_csv(&probe);
        assert_eq!(csv.lines().next(), Some(PROBE_CSV_HEADER));
    }

    #[test]
    fn median_of_means_resists_one_outlier() {
        let times = [1.0, 1.1, 0.9, 1.05, 50.0];
        let center = median_of_means(&times);
        assert!(center < 2.0, "center {center} should ignore the outlier");
    }
}
