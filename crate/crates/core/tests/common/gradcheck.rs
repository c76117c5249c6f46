//! Central finite-difference checks of tape gradients in double precision.

use msad_core::kernels::conv::{self, Padding};
use msad_core::{ConvGeometry, Mode, Result, Tape, Tensor, Var};
use rand::Rng;

use super::{rel_error, rng, uniform};

const STEP: f64 = 1e-6;

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// Largest relative error over all `inputs` between the tape gradient of
/// `Σ w ⊙ f(inputs)` (random fixed `w`, or `f` itself when scalar) and its
/// central difference.
pub fn check(inputs: &[Tensor<f64>], seed: u64, f: &Build) -> f64 {
    let eval = |vals: &[Tensor<f64>], weights: Option<&Tensor<f64>>| -> (f64, Tape<f64>, Vec<Var>, Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars).expect("forward");
        let loss = match weights {
            Some(w) => tape.dot(out, w.clone()).expect("dot"),
            None => out,
        };
        (tape.value(loss).item(), tape, vars, loss)
    };
    let probe = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars).expect("forward");
        tape.value(out).shape().to_vec()
    };
    let weights = (probe.iter().product::<usize>() != 1).then(|| uniform(&probe, -1.0, 1.0, seed ^ 0x5eed));
    let (_, tape, vars, loss) = eval(inputs, weights.as_ref());
    let grads = tape.backward(loss).expect("backward");
    let mut worst: f64 = 0.0;
    for (i, var) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(*var) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; inputs[i].numel()],
        };
        let mut numeric = vec![0.0; inputs[i].numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut vals = inputs.to_vec();
            vals[i].data_mut()[j] += STEP;
            let plus = eval(&vals, weights.as_ref()).0;
            vals[i].data_mut()[j] -= 2.0 * STEP;
            let minus = eval(&vals, weights.as_ref()).0;
            *slot = (plus - minus) / (2.0 * STEP);
        }
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    worst
}

/// Values whose magnitude stays at least `gap` away from zero, so ReLU kinks
/// are never straddled by a probe.
fn away_from_zero(shape: &[usize], gap: f64, seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = r.gen_range(gap..1.0);
            if r.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Distinct values spaced at least `1e-3` apart, so max-pool winners are
/// stable under a probe.
fn distinct(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, r.gen_range(0..=i));
    }
    let data = order.iter().map(|&k| k as f64 * 1e-3 + r.gen_range(0.0..1e-4)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn onehot(n: usize, k: usize, seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..k)).collect();
    msad_core::ops::one_hot(&labels, k).unwrap()
}

fn geometry(r: &mut impl Rng) -> ConvGeometry {
    let padding = if r.gen_bool(0.5) { Padding::Same } else { Padding::Valid };
    ConvGeometry::new(r.gen_range(1..=2), padding, r.gen_range(1..=2))
}

pub struct OpCase {
    pub name: &'static str,
    /// Relative error for one seed; the shapes are drawn from the seed.
    pub run: fn(u64) -> f64,
}

fn conv2d_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, c, f, k) = (r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(1..=3), r.gen_range(1..=3));
    let geom = geometry(&mut r);
    let size = conv::effective_extent(k, geom.dilation) + r.gen_range(0..=3);
    let inputs = [
        uniform(&[n, c, size, size], -1.0, 1.0, seed),
        uniform(&[f, c, k, k], -1.0, 1.0, seed + 1),
        uniform(&[f], -1.0, 1.0, seed + 2),
    ];
    check(&inputs, seed, &move |t, v| t.conv2d(v[0], v[1], Some(v[2]), geom))
}

fn depthwise_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, c, k) = (r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(1..=5));
    let geom = geometry(&mut r);
    let size = conv::effective_extent(k, geom.dilation) + r.gen_range(0..=3);
    let inputs = [uniform(&[n, c, size, size], -1.0, 1.0, seed), uniform(&[c, k, k], -1.0, 1.0, seed + 1)];
    check(&inputs, seed, &move |t, v| t.depthwise(v[0], v[1], geom))
}

fn separable_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, c, f, k) = (r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(1..=3), r.gen_range(1..=5));
    let padding = if r.gen_bool(0.5) { Padding::Same } else { Padding::Valid };
    let size = k + r.gen_range(0..=3);
    let inputs = [
        uniform(&[n, c, size, size], -1.0, 1.0, seed),
        uniform(&[c, k, k], -1.0, 1.0, seed + 1),
        uniform(&[f, c, 1, 1], -1.0, 1.0, seed + 2),
        uniform(&[f], -1.0, 1.0, seed + 3),
    ];
    check(&inputs, seed, &move |t, v| {
        t.separable_conv2d(v[0], v[1], v[2], v[3], ConvGeometry::new(1, padding, 1))
    })
}

fn relu_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let shape = [r.gen_range(1..=3), r.gen_range(1..=3), r.gen_range(1..=4), r.gen_range(1..=4)];
    check(&[away_from_zero(&shape, 1e-3, seed)], seed, &|t, v| t.relu(v[0]))
}

fn max_pool_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let shape = [r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(2..=7), r.gen_range(2..=7)];
    check(&[distinct(&shape, seed)], seed, &|t, v| t.max_pool2d(v[0]))
}

fn gap_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let shape = [r.gen_range(1..=3), r.gen_range(1..=4), r.gen_range(1..=5), r.gen_range(1..=5)];
    check(&[uniform(&shape, -1.0, 1.0, seed)], seed, &|t, v| t.global_avg_pool(v[0]))
}

fn batch_norm_case(seed: u64, mode: Mode) -> f64 {
    let mut r = rng(seed);
    let (n, c, h, w) = (r.gen_range(2..=3), r.gen_range(1..=3), r.gen_range(1..=3), r.gen_range(2..=3));
    let running_mean = uniform(&[c], -0.5, 0.5, seed + 3);
    let running_var = uniform(&[c], 0.5, 1.5, seed + 4);
    let inputs = [
        uniform(&[n, c, h, w], -1.0, 1.0, seed),
        uniform(&[c], 0.5, 1.5, seed + 1),
        uniform(&[c], -0.5, 0.5, seed + 2),
    ];
    check(&inputs, seed, &move |t, v| {
        t.batch_norm(v[0], v[1], v[2], &running_mean, &running_var, mode).map(|(y, _)| y)
    })
}

fn concat_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, h, w) = (r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(1..=3));
    let inputs = [
        uniform(&[n, r.gen_range(1..=3), h, w], -1.0, 1.0, seed),
        uniform(&[n, r.gen_range(1..=3), h, w], -1.0, 1.0, seed + 1),
    ];
    check(&inputs, seed, &|t, v| t.concat_channels(v))
}

fn add_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let shape = [r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(1..=4), r.gen_range(1..=4)];
    let inputs = [uniform(&shape, -1.0, 1.0, seed), uniform(&shape, -1.0, 1.0, seed + 1)];
    check(&inputs, seed, &|t, v| t.add(v[0], v[1]))
}

fn linear_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, d, k) = (r.gen_range(1..=4), r.gen_range(1..=6), r.gen_range(1..=5));
    let inputs = [
        uniform(&[n, d], -1.0, 1.0, seed),
        uniform(&[k, d], -1.0, 1.0, seed + 1),
        uniform(&[k], -1.0, 1.0, seed + 2),
    ];
    check(&inputs, seed, &|t, v| t.linear(v[0], v[1], v[2]))
}

fn softmax_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let shape = [r.gen_range(1..=4), r.gen_range(2..=6)];
    check(&[uniform(&shape, -3.0, 3.0, seed)], seed, &|t, v| t.softmax(v[0]))
}

fn cce_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, k) = (r.gen_range(1..=4), r.gen_range(2..=6));
    let labels = onehot(n, k, seed + 1);
    check(&[uniform(&[n, k], -3.0, 3.0, seed)], seed, &move |t, v| {
        let p = t.softmax(v[0])?;
        t.cce_loss(p, labels.clone())
    })
}

fn dense_softmax_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, d, k) = (r.gen_range(1..=4), r.gen_range(1..=6), r.gen_range(2..=5));
    let labels = onehot(n, k, seed + 3);
    let inputs = [
        uniform(&[n, d], -1.0, 1.0, seed),
        uniform(&[k, d], -1.0, 1.0, seed + 1),
        uniform(&[k], -1.0, 1.0, seed + 2),
    ];
    check(&inputs, seed, &move |t, v| {
        let (_, p) = t.dense_softmax(v[0], v[1], v[2])?;
        t.cce_loss(p, labels.clone())
    })
}

fn sum_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let shape = [r.gen_range(1..=3), r.gen_range(1..=5)];
    check(&[uniform(&shape, -1.0, 1.0, seed)], seed, &|t, v| t.sum(v[0]))
}

pub const OP_CASES: &[OpCase] = &[
    OpCase { name: "conv2d", run: conv2d_case },
    OpCase { name: "depthwise", run: depthwise_case },
    OpCase { name: "separable_conv2d", run: separable_case },
    OpCase { name: "relu", run: relu_case },
    OpCase { name: "max_pool2d", run: max_pool_case },
    OpCase { name: "global_avg_pool", run: gap_case },
    OpCase { name: "batch_norm/train", run: |s| batch_norm_case(s, Mode::Train) },
    OpCase { name: "batch_norm/infer", run: |s| batch_norm_case(s, Mode::Infer) },
    OpCase { name: "concat_channels", run: concat_case },
    OpCase { name: "add", run: add_case },
    OpCase { name: "linear", run: linear_case },
    OpCase { name: "softmax", run: softmax_case },
    OpCase { name: "softmax+cce", run: cce_case },
    OpCase { name: "dense_softmax+cce", run: dense_softmax_case },
    OpCase { name: "sum", run: sum_case },
];

pub const SEEDS_PER_OP: u64 = 20;

/// Worst relative error of `case` over its seeds.
pub fn worst_over_seeds(case: &OpCase) -> f64 {
    (0..SEEDS_PER_OP).map(|s| (case.run)(1000 + s)).fold(0.0, f64::max)
}

/// Tiny end-to-end network: 8×8 input, 2 classes, pooling only in the first
/// two blocks and a same-padded attention branch.
pub fn tiny_config(seed: u64) -> msad_core::ModelConfig {
    msad_core::ModelConfig {
        input_size: 8,
        num_classes: 2,
        block_pooling: [true, true, false, false, false],
        sam_stage_padding: Padding::Same,
        seed,
        ..msad_core::ModelConfig::width_reduced(16)
    }
}

/// Relative error of the training-mode CCE gradient over every parameter of
/// the tiny network, for a batch of three images, at random biases.
pub fn full_model(seed: u64) -> f64 {
    let mut model = msad_core::build_msadnet::<f64>(&tiny_config(seed)).unwrap();
    // Zero biases leave outputs whose taps all fall in padding exactly on the
    // ReLU kink, where a central difference sees half the slope.
    for (k, p) in model.params_mut().iter_mut().enumerate() {
        if p.name.ends_with("bias") || p.name.ends_with("beta") {
            let shape = p.tensor.shape().to_vec();
            p.tensor = uniform(&shape, -0.1, 0.1, seed * 1000 + k as u64);
        }
    }
    let images = uniform(&[3, 1, 8, 8], 0.0, 1.0, seed + 7);
    let labels = msad_core::ops::one_hot(&[0, 1, 1], 2).unwrap();
    let loss_of = |m: &mut msad_core::ModelGraph<f64>| {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let pass = m.forward(&mut tape, x, Mode::Train).unwrap();
        let loss = tape.cce_loss(pass.probs, labels.clone()).unwrap();
        (tape, pass, loss)
    };
    let (tape, pass, loss) = loss_of(&mut model);
    let grads = tape.backward(loss).unwrap();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (i, var) in pass.params.iter().enumerate() {
        let n = model.params()[i].tensor.numel();
        match grads.get(*var) {
            Some(g) => analytic.extend_from_slice(g.data()),
            None => analytic.extend(std::iter::repeat_n(0.0, n)),
        }
        for j in 0..n {
            let original = model.params()[i].tensor.data()[j];
            model.params_mut()[i].tensor.data_mut()[j] = original + STEP;
            let (t, _, l) = loss_of(&mut model);
            let plus = t.value(l).item();
            model.params_mut()[i].tensor.data_mut()[j] = original - STEP;
            let (t, _, l) = loss_of(&mut model);
            let minus = t.value(l).item();
            model.params_mut()[i].tensor.data_mut()[j] = original;
            numeric.push((plus - minus) / (2.0 * STEP));
        }
    }
    rel_error(&analytic, &numeric)
}
