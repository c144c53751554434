//! Helpers shared by the integration test targets.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dsamgn_core::autograd::{NormStats, Tape, Var};
use dsamgn_core::graph::{dsamgn_block, graph_propagate, stack_blocks, BlockParams};
use dsamgn_core::losses::{total_loss, triplet_loss, LossConfig, Mining};
use dsamgn_core::model::{Backbone, Model, ModelConfig};
use dsamgn_core::sasamg::{sasamg_forward, similarity, Percentile, SasamgParams};
use dsamgn_core::tensor::Tensor;

pub const FD_STEP: f64 = 1e-6;
pub const ATOMIC_TOL: f64 = 1e-5;
pub const COMPOSED_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn pct(v: f64) -> Percentile {
    Percentile::new(v).unwrap()
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::normal(shape, 0.0, 1.0, &mut rng(seed))
}

/// `|a - n| / max(|a|, |n|, 1e-3)`.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Scalar loss `Σ out ⊙ R` for a fixed random `R` when `out` is not a scalar.
fn reduce(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let v = tape.value(out);
    if v.numel() == 1 {
        return tape.sum(out);
    }
    let w = Tensor::uniform(v.shape(), -1.0, 1.0, &mut rng(seed ^ 0x5eed));
    let w = tape.constant(w);
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod)
}

/// Largest relative error between tape gradients and central differences of
/// `f` with respect to every entry of every input.
pub fn fd_max_error<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |xs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars);
        let loss = reduce(&mut tape, out, 1);
        tape.value(loss).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars);
    let loss = reduce(&mut tape, out, 1);
    tape.backward(loss).unwrap();
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad_tensor(v)).collect();

    let mut worst = 0.0f64;
    let mut xs = inputs.to_vec();
    for t in 0..xs.len() {
        for i in 0..xs[t].numel() {
            let orig = xs[t].data()[i];
            xs[t].data_mut()[i] = orig + FD_STEP;
            let up = eval(&xs);
            xs[t].data_mut()[i] = orig - FD_STEP;
            let down = eval(&xs);
            xs[t].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[t].data()[i], numeric));
        }
    }
    worst
}

pub struct GradCheck {
    pub name: &'static str,
    pub error: f64,
    pub tol: f64,
}

fn check<F>(name: &'static str, tol: f64, inputs: &[Tensor], f: F) -> GradCheck
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    GradCheck {
        name,
        error: fd_max_error(inputs, f),
        tol,
    }
}

/// Keeps values at least `gap` away from zero so ReLU kinks stay out of reach
/// of the finite-difference step.
fn away_from_zero(mut t: Tensor, gap: f64) -> Tensor {
    for v in t.data_mut() {
        if v.abs() < gap {
            *v = if *v < 0.0 { -gap } else { gap };
        }
    }
    t
}

fn model_grad_check(name: &'static str, config: ModelConfig, seed: u64) -> GradCheck {
    let mut model = Model::new(config.clone()).unwrap();
    // Zero-initialised biases put ReLU inputs exactly on the kink.
    let mut r = rng(seed + 1);
    for (name, t) in model.params.named_mut() {
        if name.ends_with(".b") || name.ends_with(".b1") || name.ends_with(".b2") {
            *t = Tensor::uniform(t.shape(), -0.5, 0.5, &mut r);
        }
    }
    let mut shape = vec![4];
    shape.extend(config.sample_shape());
    let batch = randn(&shape, seed);
    let labels = [0, 0, 2, 2];
    let loss_cfg = LossConfig::default();
    let loss_of = |m: &Model| -> f64 {
        let mut tape = Tape::new();
        let vars = m.params.bind(&mut tape);
        let out = m.forward(&mut tape, &vars, &batch, true).unwrap();
        let terms = total_loss(&mut tape, &out, &labels, &loss_cfg).unwrap();
        tape.value(terms.total).item()
    };
    let mut tape = Tape::new();
    let vars = model.params.bind(&mut tape);
    let out = model.forward(&mut tape, &vars, &batch, true).unwrap();
    let terms = total_loss(&mut tape, &out, &labels, &loss_cfg).unwrap();
    tape.backward(terms.total).unwrap();
    let grads: Vec<Tensor> = vars.vars().into_iter().map(|v| tape.grad_tensor(v)).collect();
    let mut worst = 0.0f64;
    let n_params = grads.len();
    for p in 0..n_params {
        for i in 0..grads[p].numel() {
            let orig = model.params.named_mut()[p].1.data()[i];
            model.params.named_mut()[p].1.data_mut()[i] = orig + FD_STEP;
            let up = loss_of(&model);
            model.params.named_mut()[p].1.data_mut()[i] = orig - FD_STEP;
            let down = loss_of(&model);
            model.params.named_mut()[p].1.data_mut()[i] = orig;
            worst = worst.max(rel_err(grads[p].data()[i], (up - down) / (2.0 * FD_STEP)));
        }
    }
    GradCheck {
        name,
        error: worst,
        tol: COMPOSED_TOL,
    }
}

/// Finite-difference checks over every differentiable operation, the block, a
/// two-block stack, the convolutional stem and the full model.
pub fn gradient_suite() -> Vec<GradCheck> {
    let a = randn(&[3, 4], 1);
    let b = randn(&[4, 5], 2);
    let c = randn(&[3, 4], 3);
    let row = randn(&[4], 4);
    let sq = randn(&[5, 5], 5);
    let relu_in = away_from_zero(randn(&[4, 5], 6), 1e-3);
    let keep: Vec<bool> = (0..20).map(|i| i % 3 != 0).collect();
    let emb = randn(&[6, 3], 7);
    let logits = randn(&[4, 3], 8);
    let gamma = Tensor::uniform(&[3], 0.5, 1.5, &mut rng(9));
    let beta_bn = randn(&[3], 10);
    let img = randn(&[2, 5, 5], 11);
    let kernel = randn(&[3, 2, 3, 3], 12);
    let bias = randn(&[3], 13);

    let mut out = vec![
        check("matmul", ATOMIC_TOL, &[a.clone(), b.clone()], |t, v| {
            t.matmul(v[0], v[1]).unwrap()
        }),
        check("transpose", ATOMIC_TOL, &[a.clone()], |t, v| t.transpose(v[0]).unwrap()),
        check("add", ATOMIC_TOL, &[a.clone(), c.clone()], |t, v| t.add(v[0], v[1]).unwrap()),
        check("sub", ATOMIC_TOL, &[a.clone(), c.clone()], |t, v| t.sub(v[0], v[1]).unwrap()),
        check("mul", ATOMIC_TOL, &[a.clone(), c.clone()], |t, v| t.mul(v[0], v[1]).unwrap()),
        check("scale", ATOMIC_TOL, &[a.clone()], |t, v| t.scale(v[0], -1.7)),
        check("add_scalar", ATOMIC_TOL, &[a.clone()], |t, v| t.add_scalar(v[0], 0.4)),
        check("add_row_vector", ATOMIC_TOL, &[a.clone(), row.clone()], |t, v| {
            t.add_row_vector(v[0], v[1]).unwrap()
        }),
        check("sum", ATOMIC_TOL, &[a.clone()], |t, v| t.sum(v[0])),
        check("mean", ATOMIC_TOL, &[a.clone()], |t, v| t.mean(v[0])),
        check("mean_over_axis(0)", ATOMIC_TOL, &[a.clone()], |t, v| {
            t.mean_over_axis(v[0], 0).unwrap()
        }),
        check("mean_over_axis(1)", ATOMIC_TOL, &[a.clone()], |t, v| {
            t.mean_over_axis(v[0], 1).unwrap()
        }),
        check("reshape", ATOMIC_TOL, &[a.clone()], |t, v| t.reshape(v[0], &[2, 6]).unwrap()),
        check("concat_cols", ATOMIC_TOL, &[a.clone(), c.clone()], |t, v| {
            t.concat_cols(&[v[0], v[1]]).unwrap()
        }),
        check("slice_cols", ATOMIC_TOL, &[a.clone()], |t, v| t.slice_cols(v[0], 1, 2).unwrap()),
        check("split_channels", ATOMIC_TOL, &[a.clone()], |t, v| {
            let parts = t.split_channels(v[0], 2).unwrap();
            let s = t.scale(parts[1], 3.0);
            t.concat_rows(&[parts[0], s]).unwrap()
        }),
        check("concat_rows", ATOMIC_TOL, &[a.clone(), c.clone()], |t, v| {
            t.concat_rows(&[v[0], v[1]]).unwrap()
        }),
        check("slice_rows", ATOMIC_TOL, &[a.clone()], |t, v| t.slice_rows(v[0], 1, 2).unwrap()),
        check("softmax_rows", ATOMIC_TOL, &[sq.clone()], |t, v| t.softmax_rows(v[0]).unwrap()),
        check("relu", ATOMIC_TOL, &[relu_in.clone()], |t, v| t.relu(v[0])),
        check("mask", ATOMIC_TOL, &[relu_in.clone()], |t, v| t.mask(v[0], keep.clone()).unwrap()),
        check("pairwise_distance", ATOMIC_TOL, &[emb.clone()], |t, v| {
            t.pairwise_distance(v[0]).unwrap()
        }),
        check("gather", ATOMIC_TOL, &[a.clone()], |t, v| t.gather(v[0], vec![0, 5, 5, 11]).unwrap()),
        check("cross_entropy", ATOMIC_TOL, &[logits.clone()], |t, v| {
            t.cross_entropy(v[0], &[0, 2, 1, 2]).unwrap()
        }),
        check("conv2d stride 1", ATOMIC_TOL, &[img.clone(), kernel.clone(), bias.clone()], |t, v| {
            t.conv2d(v[0], v[1], v[2], 1, 1).unwrap()
        }),
        check("conv2d stride 2", ATOMIC_TOL, &[img.clone(), kernel.clone(), bias.clone()], |t, v| {
            t.conv2d(v[0], v[1], v[2], 2, 1).unwrap()
        }),
        check(
            "batch_norm_1d (batch)",
            COMPOSED_TOL,
            &[emb.clone(), gamma.clone(), beta_bn.clone()],
            |t, v| t.batch_norm_1d(v[0], v[1], v[2], NormStats::Batch).unwrap().0,
        ),
        check(
            "batch_norm_1d (running)",
            COMPOSED_TOL,
            &[emb.clone(), gamma.clone(), beta_bn.clone()],
            |t, v| {
                let stats = NormStats::Running {
                    mean: &[0.1, -0.2, 0.3],
                    var: &[0.5, 1.5, 2.0],
                };
                t.batch_norm_1d(v[0], v[1], v[2], stats).unwrap().0
            },
        ),
    ];

    let x = randn(&[6, 4], 20);
    let sp = SasamgParams::init(4, &mut rng(21));
    let h = away_from_zero(randn(&[6, 4], 22), 0.05);
    let w_gn = randn(&[4, 4], 23);
    out.push(check(
        "similarity",
        COMPOSED_TOL,
        &[x.clone(), sp.w_q.clone(), sp.w_k.clone()],
        |t, v| {
            let vars = dsamgn_core::sasamg::SasamgVars { w_q: v[1], w_k: v[2] };
            similarity(t, v[0], &vars).unwrap()
        },
    ));
    for beta in [0.0, 75.0, 95.0] {
        out.push(check(
            match beta as u32 {
                0 => "sasamg beta=0",
                75 => "sasamg beta=75",
                _ => "sasamg beta=95",
            },
            COMPOSED_TOL,
            &[x.clone(), sp.w_q.clone(), sp.w_k.clone()],
            move |t, v| {
                let vars = dsamgn_core::sasamg::SasamgVars { w_q: v[1], w_k: v[2] };
                sasamg_forward(t, v[0], &vars, pct(beta)).unwrap().a
            },
        ));
    }
    let adj = Tensor::uniform(&[6, 6], 0.0, 1.0, &mut rng(24));
    out.push(check(
        "graph_propagate",
        COMPOSED_TOL,
        &[h.clone(), adj, w_gn],
        |t, v| graph_propagate(t, v[0], v[1], v[2]).unwrap(),
    ));

    let block_x = randn(&[4, 4], 30);
    let bp = BlockParams::init(4, 4, 8, &mut rng(31)).unwrap();
    let block_inputs: Vec<Tensor> = std::iter::once(block_x.clone())
        .chain(bp.named().into_iter().map(|(_, t)| t.clone()))
        .collect();
    let block_vars = |v: &[Var]| dsamgn_core::graph::BlockVars {
        p_pos: v[0],
        branch_a: dsamgn_core::sasamg::SasamgVars { w_q: v[1], w_k: v[2] },
        branch_b: dsamgn_core::sasamg::SasamgVars { w_q: v[3], w_k: v[4] },
        w_gn_a: v[5],
        w_gn_b: v[6],
        ffd: dsamgn_core::graph::FfdVars {
            w1: v[7],
            b1: v[8],
            w2: v[9],
            b2: v[10],
        },
    };
    out.push(check("block beta=75", COMPOSED_TOL, &block_inputs, |t, v| {
        dsamgn_block(t, v[0], &block_vars(&v[1..]), pct(75.0), false)
            .unwrap()
            .output
    }));
    out.push(check("block beta=0 residual", COMPOSED_TOL, &block_inputs, |t, v| {
        dsamgn_block(t, v[0], &block_vars(&v[1..]), pct(0.0), true)
            .unwrap()
            .output
    }));
    let bp2 = BlockParams::init(4, 4, 8, &mut rng(32)).unwrap();
    let stack_inputs: Vec<Tensor> = block_inputs
        .iter()
        .cloned()
        .chain(bp2.named().into_iter().map(|(_, t)| t.clone()))
        .collect();
    out.push(check("two-block stack beta=75", COMPOSED_TOL, &stack_inputs, |t, v| {
        let blocks = [block_vars(&v[1..12]), block_vars(&v[12..23])];
        stack_blocks(t, v[0], &blocks, pct(75.0), false)
            .unwrap()
            .last()
            .unwrap()
            .output
    }));
    out.push(check(
        "triplet batch-hard",
        COMPOSED_TOL,
        &[emb.clone()],
        |t, v| triplet_loss(t, v[0], &[0, 0, 1, 1, 2, 2], 0.3, Mining::BatchHard).unwrap(),
    ));
    out.push(check(
        "triplet all-pairs",
        COMPOSED_TOL,
        &[emb.clone()],
        |t, v| triplet_loss(t, v[0], &[0, 0, 1, 1, 2, 2], 5.0, Mining::AllPairs).unwrap(),
    ));

    let cfg = ModelConfig {
        n_blocks: 2,
        beta: pct(75.0),
        ffd_hidden: 8,
        seed: 40,
        ..ModelConfig::new(2, 2, 4, 3)
    };
    out.push(model_grad_check("model passthrough", cfg.clone(), 41));
    out.push(model_grad_check(
        "model toy_conv",
        ModelConfig {
            backbone: Backbone::ToyConv,
            ..cfg
        },
        42,
    ));
    out
}

/// A random `n×n` matrix with pairwise distinct entries.
pub fn distinct_matrix<R: Rng>(n: usize, rng: &mut R) -> Tensor {
    loop {
        let t = Tensor::uniform(&[n, n], 0.0, 1.0, rng);
        let mut v = t.data().to_vec();
        v.sort_by(f64::total_cmp);
        if v.windows(2).all(|w| w[0] < w[1]) {
            return t;
        }
    }
}
