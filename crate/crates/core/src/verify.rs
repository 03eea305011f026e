//! Self-check batteries: central-difference gradient verification for every
//! differentiable op and composite layer, run in 64-bit precision.
//!
//! The finite-difference side never touches the tape's backward code: it
//! re-evaluates the forward closure at perturbed inputs, so the two answers
//! are independent routes to the same quantity.

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{BlockKind, HybridModel, ModelConfig};
use crate::nn::{AttentionLayer, CrossAttentionLayer, Ffn, PosEncVariant, TimestepEmbedder};
use crate::params::ParamSet;
use crate::ssm::{MambaLayer, ScanAxis};
use crate::tensor::{std_normal, Id, Tape, Tensor};

/// Central-difference step. Small enough to keep truncation error near
/// 1e-10 on unit-scale functions, large enough to stay clear of rounding.
pub const FD_STEP: f64 = 1e-5;
/// Relative-error bound for single ops.
pub const OP_TOL: f64 = 1e-6;
/// Relative-error bound for composite layers (longer chains accumulate a
/// little more truncation error).
pub const LAYER_TOL: f64 = 1e-5;

/// Outcome of one named check battery.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub cases: usize,
    pub max_err: f64,
    pub tol: f64,
}

impl CheckReport {
    pub fn pass(&self) -> bool {
        self.max_err < self.tol
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    let diff = (a - b).abs();
    let scale = a.abs().max(b.abs());
    if scale < 1e-6 {
        diff
    } else {
        diff / scale
    }
}

/// Compares tape gradients against central differences for one case.
/// Returns the worst relative error over every coordinate of every input.
pub fn fd_case(inputs: &[Tensor<f64>], build: &dyn Fn(&mut Tape<f64>, &[Id]) -> Id) -> f64 {
    let mut tape = Tape::new();
    let ids: Vec<Id> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let loss = build(&mut tape, &ids);
    tape.backward(loss);
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| {
            tape.grad(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut t = Tape::new();
        let ids: Vec<Id> = xs.iter().map(|x| t.leaf(x)).collect();
        let loss = build(&mut t, &ids);
        t.scalar(loss)
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let fp = eval(&work);
            work[i].data_mut()[j] = orig - FD_STEP;
            let fm = eval(&work);
            work[i].data_mut()[j] = orig;
            let fd = (fp - fm) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i][j], fd));
        }
    }
    worst
}

/// Runs `cases` random instances of a named check and reports the worst error.
pub fn run_battery(
    name: &str,
    cases: usize,
    tol: f64,
    mut make: impl FnMut(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<dyn Fn(&mut Tape<f64>, &[Id]) -> Id>),
) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed_from_name(name));
    let mut max_err = 0.0f64;
    for _ in 0..cases {
        let (inputs, build) = make(&mut rng);
        max_err = max_err.max(fd_case(&inputs, build.as_ref()));
    }
    CheckReport {
        name: name.to_string(),
        cases,
        max_err,
        tol,
    }
}

fn seed_from_name(name: &str) -> u64 {
    // FNV-1a: stable, endian-free battery seeds from the battery name.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn randn_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng).param()
}

/// Strictly positive random tensor, bounded away from zero (for `log`, `div`).
fn randn_pos(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = Tensor::<f64>::randn(shape, 1.0, rng);
    for v in t.data_mut() {
        *v = v.abs() + 0.5;
    }
    t.param()
}

fn rand_dim(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(1..=5)
}

/// Random constant weights so the scalar loss exercises the full Jacobian.
fn weighted_mean(tape: &mut Tape<f64>, out: Id, w: &Tensor<f64>) -> Id {
    let wid = tape.constant(w);
    let prod = tape.mul(out, wid);
    tape.mean_all(prod)
}

type CaseBuilder = Box<dyn Fn(&mut Tape<f64>, &[Id]) -> Id>;

fn unary_case(
    rng: &mut ChaCha8Rng,
    positive_input: bool,
    apply: fn(&mut Tape<f64>, Id) -> Id,
) -> (Vec<Tensor<f64>>, CaseBuilder) {
    let shape = [rand_dim(rng), rand_dim(rng)];
    let x = if positive_input {
        randn_pos(&shape, rng)
    } else {
        randn_t(&shape, rng)
    };
    let w = Tensor::randn(&shape, 1.0, rng);
    (
        vec![x],
        Box::new(move |t: &mut Tape<f64>, ids: &[Id]| {
            let y = apply(t, ids[0]);
            weighted_mean(t, y, &w)
        }),
    )
}

/// Gradient checks for every differentiable tape op.
pub fn op_grad_suite(cases: usize) -> Vec<CheckReport> {
    let mut reports = Vec::new();

    let binary_ops: [(&str, fn(&mut Tape<f64>, Id, Id) -> Id, bool); 4] = [
        ("grad/add", |t, a, b| t.add(a, b), false),
        ("grad/sub", |t, a, b| t.sub(a, b), false),
        ("grad/mul", |t, a, b| t.mul(a, b), false),
        ("grad/div", |t, a, b| t.div(a, b), true),
    ];
    for (name, op, pos_rhs) in binary_ops {
        reports.push(run_battery(name, cases, OP_TOL, |rng| {
            let r = rand_dim(rng);
            let c = rand_dim(rng);
            // Alternate between equal shapes and a trailing-singleton rhs.
            let bshape = if rng.gen_bool(0.5) { vec![r, c] } else { vec![r, 1] };
            let a = randn_t(&[r, c], rng);
            let b = if pos_rhs {
                randn_pos(&bshape, rng)
            } else {
                randn_t(&bshape, rng)
            };
            let w = Tensor::randn(&[r, c], 1.0, rng);
            (
                vec![a, b],
                Box::new(move |t: &mut Tape<f64>, ids: &[Id]| {
                    let y = op(t, ids[0], ids[1]);
                    weighted_mean(t, y, &w)
                }) as CaseBuilder,
            )
        }));
    }

    let unary_ops: [(&str, bool, fn(&mut Tape<f64>, Id) -> Id); 7] = [
        ("grad/exp", false, |t, a| t.exp(a)),
        ("grad/log", true, |t, a| t.log(a)),
        ("grad/softplus", false, |t, a| t.softplus(a)),
        ("grad/sigmoid", false, |t, a| t.sigmoid(a)),
        ("grad/silu", false, |t, a| t.silu(a)),
        ("grad/gelu", false, |t, a| t.gelu(a)),
        ("grad/discretize_coef", false, |t, a| t.discretize_coef(a)),
    ];
    for (name, positive, op) in unary_ops {
        reports.push(run_battery(name, cases, OP_TOL, |rng| {
            unary_case(rng, positive, op)
        }));
    }

    reports.push(run_battery("grad/add_scalar", cases, OP_TOL, |rng| {
        let shape = [rand_dim(rng), rand_dim(rng)];
        let x = randn_t(&shape, rng);
        let c: f64 = rng.gen_range(-2.0..2.0);
        let w = Tensor::randn(&shape, 1.0, rng);
        (
            vec![x],
            Box::new(move |t: &mut Tape<f64>, ids: &[Id]| {
                let y = t.add_scalar(ids[0], c);
                weighted_mean(t, y, &w)
            }) as CaseBuilder,
        )
    }));

    reports.push(run_battery("grad/mul_scalar", cases, OP_TOL, |rng| {
        let shape = [rand_dim(rng), rand_dim(rng)];
        let x = randn_t(&shape, rng);
        let c: f64 = rng.gen_range(-2.0..2.0);
        let w = Tensor::randn(&shape, 1.0, rng);
        (
            vec![x],
            Box::new(move |t: &mut Tape<f64>, ids: &[Id]| {
                let y = t.mul_scalar(ids[0], c);
                weighted_mean(t, y, &w)
            }) as CaseBuilder,
        )
    }));

    for (name, is_mul) in [("grad/add_row", false), ("grad/mul_row", true)] {
        reports.push(run_battery(name, cases, OP_TOL, move |rng| {
            let r = rand_dim(rng);
            let c = rand_dim(rng);
            let a = randn_t(&[r, c], rng);
            let v = randn_t(&[c], rng);
            let w = Tensor::randn(&[r, c], 1.0, rng);
            (
                vec![a, v],
                Box::new(move |t: &mut Tape<f64>, ids: &[Id]| {
                    let y = if is_mul {
                        t.mul_row(ids[0], ids[1])
                    } else {
                        t.add_row(ids[0], ids[1])
                    };
                    weighted_mean(t, y, &w)
                }) as CaseBuilder,
            )
        }));
    }

    reports.push(run_battery("grad/matmul", cases, OP_TOL, |rng| {
        let (m, k, n) = (rand_dim(rng), rand_dim(rng), rand_dim(rng));
        let a = randn_t(&[m, k], rng);
        let b = randn_t(&[k, n], rng);
        let w = Tensor::randn(&[m, n], 1.0, rng);
        (
            vec![a, b],
            Box::new(move |t: &mut Tape<f64>, ids: &[Id]| {
                let y = t.matmul(ids[0], ids[1]);
                weighted_mean(t, y, &w)
            }) as CaseBuilder,
        )
    }));

    reports.push(run_battery("grad/matmul_batched", cases, OP_TOL, |rng| {
        let (bt, m, k, n) = (rand_dim(rng), rand_dim(rng), rand_dim(rng), rand_dim(rng));
        let a = randn_t(&[bt, m, k], rng);
        let b = randn_t(&[bt, k, n], rng);
        let w = Tensor::randn(&[bt, m, n], 1.0, rng);
        (
            vec![a, b],
            Box::new(move |t: &mut Tape<f64>, ids: &[Id]| {
                let y = t.matmul(ids[0], ids[1]);
                weighted_mean(t, y, &w)
            }) as CaseBuilder,
        )
    }));

    reports.push(run_battery("grad/softmax_last", cases, OP_TOL, |rng| {
        unary_case(rng, false, |t, a| t.softmax_last(a))
    }));

    reports.push(run_battery("grad/layer_norm", cases, OP_TOL, |rng| {
        let r = rand_dim(rng);
        let c = rand_dim(rng) + 1; // at least 2 so variance is generic
        let x = randn_t(&[r, c], rng);
        let w = Tensor::randn(&[r, c], 1.0, rng);
        (
            vec![x],
            Box::new(move |t: &mut Tape<f64>, ids: &[Id]| {
                let y = t.layer_norm(ids[0], None, 1e-6);
                weighted_mean(t, y, &w)
            }) as CaseBuilder,
        )
    }));

    reports.push(run_battery("grad/layer_norm_affine", cases, OP_TOL, |rng| {
        let r = rand_dim(rng);
        let c = rand_dim(rng) + 1;
        let x = randn_t(&[r, c], rng);
        let gamma = randn_t(&[c], rng);
        let beta = randn_t(&[c], rng);
        let w = Tensor::randn(&[r, c], 1.0, rng);
        (
            vec![x, gamma, beta],
            Box::new(move |t: &mut Tape<f64>, ids: &[Id]| {
                let y = t.layer_norm(ids[0], Some((ids[1], ids[2])), 1e-6);
                weighted_mean(t, y, &w)
            }) as CaseBuilder,
        )
    }));

    reports.push(run_battery("grad/reshape_transpose", cases, OP_TOL, |rng| {
        let (a, b, c) = (rand_dim(rng), rand_dim(rng), rand_dim(rng));
        let x = randn_t(&[a, b, c], rng);
        let w = Tensor::randn(&[b, a * c], 1.0, rng);
        (
            vec![x],
            Box::new(move |t: &mut Tape<f64>, ids: &[Id]| {
                let tr = t.transpose(ids[0], 0, 1);
                let rs = t.reshape(tr, &[t.shape_of(tr)[0], t.shape_of(tr)[1] * t.shape_of(tr)[2]]);
                weighted_mean(t, rs, &w)
            }) as CaseBuilder,
        )
    }));

    reports.push(run_battery("grad/concat_slice", cases, OP_TOL, |rng| {
        let r = rand_dim(rng);
        let c1 = rand_dim(rng);
        let c2 = rand_dim(rng);
        let a = randn_t(&[r, c1], rng);
        let b = randn_t(&[r, c2], rng);
        let keep = rng.gen_range(1..=c1 + c2);
        let w = Tensor::randn(&[r, keep], 1.0, rng);
        (
            vec![a, b],
            Box::new(move |t: &mut Tape<f64>, ids: &[Id]| {
                let cat = t.concat(&[ids[0], ids[1]], 1);
                let sl = t.slice(cat, 1, 0, keep);
                weighted_mean(t, sl, &w)
            }) as CaseBuilder,
        )
    }));

    reports.push(run_battery("grad/cumsum", cases, OP_TOL, |rng| {
        let r = rand_dim(rng);
        let c = rand_dim(rng);
        let axis = rng.gen_range(0..2usize);
        let x = randn_t(&[r, c], rng);
        let w = Tensor::randn(&[r, c], 1.0, rng);
        (
            vec![x],
            Box::new(move |t: &mut Tape<f64>, ids: &[Id]| {
                let y = t.cumsum(ids[0], axis);
                weighted_mean(t, y, &w)
            }) as CaseBuilder,
        )
    }));

    reports.push(run_battery("grad/gather_rows", cases, OP_TOL, |rng| {
        let rows = rand_dim(rng) + 1;
        let cols = rand_dim(rng);
        let picks = rand_dim(rng) + 1;
        let idx: Vec<usize> = (0..picks).map(|_| rng.gen_range(0..rows)).collect();
        let table = randn_t(&[rows, cols], rng);
        let w = Tensor::randn(&[picks, cols], 1.0, rng);
        (
            vec![table],
            Box::new(move |t: &mut Tape<f64>, ids: &[Id]| {
                let y = t.gather_rows(ids[0], &idx);
                weighted_mean(t, y, &w)
            }) as CaseBuilder,
        )
    }));

    reports.push(run_battery("grad/patchify_roundtrip", cases, OP_TOL, |rng| {
        let c = rng.gen_range(1..=3usize);
        let p = rng.gen_range(1..=2usize);
        let h = p * rng.gen_range(1..=3usize);
        let w_dim = p * rng.gen_range(1..=3usize);
        let x = randn_t(&[c, h, w_dim], rng);
        let w = Tensor::randn(&[(h / p) * (w_dim / p), c * p * p], 1.0, rng);
        (
            vec![x],
            Box::new(move |t: &mut Tape<f64>, ids: &[Id]| {
                let tok = t.patchify(ids[0], p);
                weighted_mean(t, tok, &w)
            }) as CaseBuilder,
        )
    }));

    reports.push(run_battery("grad/ssm_scan", cases, OP_TOL, |rng| {
        let l = rng.gen_range(1..=6usize);
        let n = rng.gen_range(1..=4usize);
        let p = rng.gen_range(1..=4usize);
        let chunks = [1usize, 2, 3, l];
        let chunk = chunks[rng.gen_range(0..chunks.len())];
        let x = randn_t(&[l, p], rng);
        let mut la = Tensor::<f64>::randn(&[l], 0.5, rng);
        for v in la.data_mut() {
            *v = -v.abs() - 0.05; // keep decay in (0,1)
        }
        let la = la.param();
        let b = randn_t(&[l, n], rng);
        let c = randn_t(&[l, n], rng);
        let w = Tensor::randn(&[l, p], 1.0, rng);
        (
            vec![x, la, b, c],
            Box::new(move |t: &mut Tape<f64>, ids: &[Id]| {
                let y = t.ssm_scan(ids[0], ids[1], ids[2], ids[3], chunk);
                weighted_mean(t, y, &w)
            }) as CaseBuilder,
        )
    }));

    reports.push(run_battery("grad/mlp3", cases, LAYER_TOL, |rng| {
        // Three-layer MLP: the canonical composite sanity case.
        let (d0, d1, d2, d3) = (rand_dim(rng), rand_dim(rng), rand_dim(rng), rand_dim(rng));
        let rows = rand_dim(rng);
        let x = randn_t(&[rows, d0], rng);
        let w1 = randn_t(&[d0, d1], rng);
        let b1 = randn_t(&[d1], rng);
        let w2 = randn_t(&[d1, d2], rng);
        let b2 = randn_t(&[d2], rng);
        let w3 = randn_t(&[d2, d3], rng);
        let b3 = randn_t(&[d3], rng);
        let w = Tensor::randn(&[rows, d3], 1.0, rng);
        (
            vec![x, w1, b1, w2, b2, w3, b3],
            Box::new(move |t: &mut Tape<f64>, ids: &[Id]| {
                let h1 = t.matmul(ids[0], ids[1]);
                let h1 = t.add_row(h1, ids[2]);
                let h1 = t.silu(h1);
                let h2 = t.matmul(h1, ids[3]);
                let h2 = t.add_row(h2, ids[4]);
                let h2 = t.gelu(h2);
                let h3 = t.matmul(h2, ids[5]);
                let h3 = t.add_row(h3, ids[6]);
                weighted_mean(t, h3, &w)
            }) as CaseBuilder,
        )
    }));

    reports
}

/// Central-difference check for a component that binds its own parameters.
///
/// `forward` records the scalar loss on a fresh tape. `visit` walks every
/// tensor the check should differentiate, in a stable order. The two
/// closures usually share a component through a `RefCell`; they are never
/// invoked while the other is active, so borrows cannot collide.
pub fn fd_component_case(
    forward: &dyn Fn(&mut Tape<f64>) -> Id,
    visit: &dyn Fn(&mut dyn FnMut(&mut Tensor<f64>)),
) -> f64 {
    let mut tape = Tape::new();
    let loss = forward(&mut tape);
    tape.backward(loss);
    let mut analytic: Vec<Vec<f64>> = Vec::new();
    visit(&mut |p: &mut Tensor<f64>| {
        analytic.push(match tape.grad_of(p) {
            Some(g) => g.to_vec(),
            None => vec![0.0; p.numel()],
        });
    });
    drop(tape);

    let eval = || {
        let mut t = Tape::new();
        let loss = forward(&mut t);
        t.scalar(loss)
    };
    // Nudges one coordinate of the `slot`-th visited tensor in place. With no
    // tape alive the storage is unshared, so the write lands on the buffer the
    // next forward pass will bind.
    let poke = |slot: usize, j: usize, delta: f64| {
        let mut k = 0usize;
        visit(&mut |p: &mut Tensor<f64>| {
            if k == slot {
                p.data_mut()[j] += delta;
            }
            k += 1;
        });
    };

    // Error metric: per tensor, the worst |analytic - fd| gap normalized by
    // the larger of the two vectors' peak magnitudes. Central differences on
    // a deep O(1)-valued loss carry an absolute noise floor near 1e-10 from
    // cancellation in fp - fm, so coordinates far below the tensor's gradient
    // scale cannot be resolved by a pointwise quotient; wiring mistakes still
    // show up at full scale.
    let mut worst = 0.0f64;
    for (slot, grad) in analytic.iter().enumerate() {
        let mut fd = vec![0.0f64; grad.len()];
        for (j, slot_fd) in fd.iter_mut().enumerate() {
            poke(slot, j, FD_STEP);
            let fp = eval();
            poke(slot, j, -2.0 * FD_STEP);
            let fm = eval();
            poke(slot, j, FD_STEP);
            *slot_fd = (fp - fm) / (2.0 * FD_STEP);
        }
        // Tensors whose whole gradient sits below the floor are checked
        // absolutely at floor * tol = 3e-10, just above the cancellation
        // noise of (fp - fm) for an O(1) loss.
        const GRAD_SCALE_FLOOR: f64 = 3e-5;
        let peak = |v: &[f64]| v.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
        let scale = peak(grad).max(peak(&fd)).max(GRAD_SCALE_FLOOR);
        for (&a, &b) in grad.iter().zip(&fd) {
            worst = worst.max((a - b).abs() / scale);
        }
    }
    worst
}

/// Runs `cases` random instances of a self-binding-component check.
pub fn run_component_battery(
    name: &str,
    cases: usize,
    tol: f64,
    mut case: impl FnMut(&mut ChaCha8Rng) -> f64,
) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed_from_name(name));
    let mut max_err = 0.0f64;
    for _ in 0..cases {
        max_err = max_err.max(case(&mut rng));
    }
    CheckReport {
        name: name.to_string(),
        cases,
        max_err,
        tol,
    }
}

/// Adds zero-mean noise to every parameter so zero-initialized gates and
/// heads stop masking downstream gradients.
fn jitter_params<M: ParamSet<f64>>(m: &mut M, scale: f64, rng: &mut ChaCha8Rng) {
    for (_, p) in m.params_mut() {
        for v in p.data_mut() {
            *v += scale * std_normal(rng);
        }
    }
}

/// Two-block-deep model small enough for exhaustive finite differences.
fn probe_config() -> ModelConfig {
    ModelConfig {
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
        text_vocab: 6,
        text_dim: 4,
        pe: PosEncVariant::Standard,
    }
}

fn random_latent(rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(&[2, 4, 4], 1.0, rng).param()
}

fn random_caption(rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..3).map(|_| rng.gen_range(0..6)).collect()
}

/// Gradient checks for the trained building blocks and the assembled
/// training losses, differentiating the components' own parameters.
pub fn layer_grad_suite(cases: usize) -> Vec<CheckReport> {
    let mut reports = Vec::new();
    let d = 8usize;
    let l = 4usize; // 2x2 token grid

    reports.push(run_component_battery("grad/ffn_layer", cases, LAYER_TOL, |rng| {
        let cell = RefCell::new((Ffn::<f64>::new(d, rng), Tensor::randn(&[l, d], 1.0, rng).param()));
        let w = Tensor::randn(&[l, d], 1.0, rng);
        let forward = |t: &mut Tape<f64>| {
            let c = cell.borrow();
            let x = t.leaf(&c.1);
            let y = c.0.forward(t, x);
            weighted_mean(t, y, &w)
        };
        let visit = |f: &mut dyn FnMut(&mut Tensor<f64>)| {
            let mut c = cell.borrow_mut();
            f(&mut c.1);
            for (_, p) in c.0.params_mut() {
                f(p);
            }
        };
        fd_component_case(&forward, &visit)
    }));

    reports.push(run_component_battery("grad/timestep_embedder", cases, LAYER_TOL, |rng| {
        let cell = RefCell::new(TimestepEmbedder::<f64>::new(d, rng));
        let step = rng.gen_range(1..=50usize) as f64;
        let w = Tensor::randn(&[1, d], 1.0, rng);
        let forward = |t: &mut Tape<f64>| {
            let e = cell.borrow();
            let y = e.forward(t, step);
            weighted_mean(t, y, &w)
        };
        let visit = |f: &mut dyn FnMut(&mut Tensor<f64>)| {
            for (_, p) in cell.borrow_mut().params_mut() {
                f(p);
            }
        };
        fd_component_case(&forward, &visit)
    }));

    reports.push(run_component_battery("grad/attention_layer", cases, LAYER_TOL, |rng| {
        let cell = RefCell::new((
            AttentionLayer::<f64>::new(d, 2, rng),
            Tensor::randn(&[l, d], 1.0, rng).param(),
        ));
        let w = Tensor::randn(&[l, d], 1.0, rng);
        let forward = |t: &mut Tape<f64>| {
            let c = cell.borrow();
            let x = t.leaf(&c.1);
            let y = c.0.forward(t, x);
            weighted_mean(t, y, &w)
        };
        let visit = |f: &mut dyn FnMut(&mut Tensor<f64>)| {
            let mut c = cell.borrow_mut();
            f(&mut c.1);
            for (_, p) in c.0.params_mut() {
                f(p);
            }
        };
        fd_component_case(&forward, &visit)
    }));

    reports.push(run_component_battery("grad/cross_attention_layer", cases, LAYER_TOL, |rng| {
        let d_ctx = 4usize;
        let lc = 3usize;
        let cell = RefCell::new((
            CrossAttentionLayer::<f64>::new(d, d_ctx, 2, rng),
            Tensor::randn(&[l, d], 1.0, rng).param(),
            Tensor::randn(&[lc, d_ctx], 1.0, rng).param(),
        ));
        let w = Tensor::randn(&[l, d], 1.0, rng);
        let forward = |t: &mut Tape<f64>| {
            let c = cell.borrow();
            let x = t.leaf(&c.1);
            let ctx = t.leaf(&c.2);
            let y = c.0.forward(t, x, ctx);
            weighted_mean(t, y, &w)
        };
        let visit = |f: &mut dyn FnMut(&mut Tensor<f64>)| {
            let mut c = cell.borrow_mut();
            f(&mut c.1);
            f(&mut c.2);
            for (_, p) in c.0.params_mut() {
                f(p);
            }
        };
        fd_component_case(&forward, &visit)
    }));

    for (name, axis) in [
        ("grad/mixer_width_layer", ScanAxis::WidthFirst),
        ("grad/mixer_height_layer", ScanAxis::HeightFirst),
    ] {
        reports.push(run_component_battery(name, cases, LAYER_TOL, move |rng| {
            let cell = RefCell::new((
                MambaLayer::<f64>::new(d, 2, 2, 2, axis, rng),
                Tensor::randn(&[l, d], 1.0, rng).param(),
            ));
            let w = Tensor::randn(&[l, d], 1.0, rng);
            let forward = |t: &mut Tape<f64>| {
                let c = cell.borrow();
                let x = t.leaf(&c.1);
                let y = c.0.forward(t, x, 2, 2);
                weighted_mean(t, y, &w)
            };
            let visit = |f: &mut dyn FnMut(&mut Tensor<f64>)| {
                let mut c = cell.borrow_mut();
                f(&mut c.1);
                for (_, p) in c.0.params_mut() {
                    f(p);
                }
            };
            fd_component_case(&forward, &visit)
        }));
    }

    let model_cases = cases.clamp(1, 2);

    reports.push(run_component_battery(
        "grad/noise_prediction_loss",
        model_cases,
        LAYER_TOL,
        |rng| {
            let mut model = HybridModel::<f64>::new(probe_config(), rng).expect("valid probe config");
            jitter_params(&mut model, 0.2, rng);
            let cell = RefCell::new((model, random_latent(rng)));
            let caption = random_caption(rng);
            let step = rng.gen_range(1..=20usize);
            let target: Vec<f64> = (0..32).map(|_| std_normal(rng)).collect();
            let forward = |t: &mut Tape<f64>| {
                let c = cell.borrow();
                let z = t.leaf(&c.1);
                let rec = c.0.forward(t, z, step, &caption).expect("base grid admits");
                let tgt = t.leaf_vec(&[2, 4, 4], target.clone(), false);
                t.mse(rec.out, tgt)
            };
            let visit = |f: &mut dyn FnMut(&mut Tensor<f64>)| {
                let mut c = cell.borrow_mut();
                f(&mut c.1);
                for (_, p) in c.0.params_mut() {
                    f(p);
                }
            };
            fd_component_case(&forward, &visit)
        },
    ));

    reports.push(run_component_battery(
        "grad/mixer_forcing_loss",
        model_cases,
        LAYER_TOL,
        |rng| {
            let mut teacher =
                HybridModel::<f64>::new_teacher(probe_config(), rng).expect("valid probe config");
            jitter_params(&mut teacher, 0.2, rng);
            let mut student = HybridModel::student_from_teacher(&teacher, rng);
            jitter_params(&mut student, 0.05, rng);
            let z: Vec<f64> = (0..32).map(|_| std_normal(rng)).collect();
            let caption = random_caption(rng);
            let step = rng.gen_range(1..=20usize);
            let (_, taps) = teacher
                .infer_with_taps(&z, 4, 4, step, &caption)
                .expect("base grid admits");
            let positions: Vec<usize> = student
                .blocks
                .iter()
                .enumerate()
                .filter(|(_, b)| b.kind != BlockKind::SelfAttn)
                .map(|(i, _)| i)
                .collect();
            let cell = RefCell::new(student);
            let forward = |t: &mut Tape<f64>| {
                let s = cell.borrow();
                let mut total: Option<Id> = None;
                for &n in &positions {
                    let tap_in = t.leaf_vec(&[l, d], taps[n].0.clone(), false);
                    let out = s.blocks[n].mix(t, tap_in, 2, 2);
                    let tgt = t.leaf_vec(&[l, d], taps[n].1.clone(), false);
                    let term = t.mse(out, tgt);
                    total = Some(match total {
                        Some(acc) => t.add(acc, term),
                        None => term,
                    });
                }
                total.expect("hybrid student has state-space blocks")
            };
            let visit = |f: &mut dyn FnMut(&mut Tensor<f64>)| {
                for (name, p) in cell.borrow_mut().params_mut() {
                    if name.contains(".mixer.") {
                        f(p);
                    }
                }
            };
            fd_component_case(&forward, &visit)
        },
    ));

    reports.push(run_component_battery(
        "grad/distill_assembly_loss",
        model_cases,
        LAYER_TOL,
        |rng| {
            let mut teacher =
                HybridModel::<f64>::new_teacher(probe_config(), rng).expect("valid probe config");
            jitter_params(&mut teacher, 0.2, rng);
            let mut student = HybridModel::student_from_teacher(&teacher, rng);
            jitter_params(&mut student, 0.05, rng);
            let z = random_latent(rng);
            let caption = random_caption(rng);
            let step = rng.gen_range(1..=20usize);
            let eps: Vec<f64> = (0..32).map(|_| std_normal(rng)).collect();
            let (t_out, t_taps) = teacher
                .infer_with_taps(z.data(), 4, 4, step, &caption)
                .expect("base grid admits");
            let depth = student.depth();
            let cell = RefCell::new((student, z));
            let forward = |t: &mut Tape<f64>| {
                let c = cell.borrow();
                let z_id = t.leaf(&c.1);
                let rec = c.0.forward(t, z_id, step, &caption).expect("base grid admits");
                let eps_id = t.leaf_vec(&[2, 4, 4], eps.clone(), false);
                let l_mse = t.mse(rec.out, eps_id);
                let soft = t.leaf_vec(&[2, 4, 4], t_out.clone(), false);
                let l_pseudo = t.mse(rec.out, soft);
                let weighted_pseudo = t.mul_scalar(l_pseudo, 0.5);
                let mut total = t.add(l_mse, weighted_pseudo);
                let mut acc: Option<Id> = None;
                for n in 0..depth {
                    let tgt = t.leaf_vec(&[l, d], t_taps[n].1.clone(), false);
                    let term = t.mse(rec.taps[n].1, tgt);
                    acc = Some(match acc {
                        Some(a) => t.add(a, term),
                        None => term,
                    });
                }
                let l_mixer = t.mul_scalar(acc.expect("depth >= 1"), 1.0 / depth as f64);
                let weighted_mixer = t.mul_scalar(l_mixer, 0.2);
                total = t.add(total, weighted_mixer);
                total
            };
            let visit = |f: &mut dyn FnMut(&mut Tensor<f64>)| {
                let mut c = cell.borrow_mut();
                f(&mut c.1);
                for (_, p) in c.0.params_mut() {
                    f(p);
                }
            };
            fd_component_case(&forward, &visit)
        },
    ));

    reports
}
