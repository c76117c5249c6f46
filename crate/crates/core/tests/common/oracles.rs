//! Independent reference computations for the convolution and loss kernels.

use msad_core::kernels::conv;
use msad_core::{ops, ConvGeometry, Padding, Tape, Tensor};
use rand::Rng;

use super::{rng, uniform};

/// Direct-loop convolution with explicit leading pads.
#[allow(clippy::too_many_arguments)]
pub fn direct_conv(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    bias: Option<&Tensor<f64>>,
    stride: usize,
    dilation: usize,
    pad: (usize, usize),
    out: (usize, usize),
) -> Tensor<f64> {
    let (n, c, h, wd) = x.dims4("oracle").unwrap();
    let (f, _, k, _) = w.dims4("oracle").unwrap();
    let mut y = vec![0.0; n * f * out.0 * out.1];
    for b in 0..n {
        for o in 0..f {
            for oy in 0..out.0 {
                for ox in 0..out.1 {
                    let mut acc = bias.map_or(0.0, |t| t.data()[o]);
                    for ch in 0..c {
                        for i in 0..k {
                            for j in 0..k {
                                let iy = (oy * stride + i * dilation) as isize - pad.0 as isize;
                                let ix = (ox * stride + j * dilation) as isize - pad.1 as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += w.data()[((o * c + ch) * k + i) * k + j]
                                    * x.data()[((b * c + ch) * h + iy as usize) * wd + ix as usize];
                            }
                        }
                    }
                    y[((b * f + o) * out.0 + oy) * out.1 + ox] = acc;
                }
            }
        }
    }
    Tensor::from_vec(&[n, f, out.0, out.1], y).unwrap()
}

/// `[F,C,3,3]` spread onto a `[F,C,5,5]` grid with zero rows and columns
/// between the taps.
pub fn interleave(w: &Tensor<f64>) -> Tensor<f64> {
    let (f, c, _, _) = w.dims4("oracle").unwrap();
    let mut out = Tensor::zeros(&[f, c, 5, 5]);
    for plane in 0..f * c {
        for i in 0..3 {
            for j in 0..3 {
                out.data_mut()[plane * 25 + 2 * i * 5 + 2 * j] = w.data()[plane * 9 + i * 3 + j];
            }
        }
    }
    out
}

/// Max abs difference between a dilation-2 3×3 conv and the plain conv with
/// the zero-interleaved 5×5 kernel, on random data and geometry.
pub fn dilated_vs_interleaved(seed: u64) -> f64 {
    let mut r = rng(seed);
    let padding = if r.gen_bool(0.5) { Padding::Same } else { Padding::Valid };
    let (n, c, f, size) = (r.gen_range(1..=2), r.gen_range(1..=4), r.gen_range(1..=4), r.gen_range(5..=12));
    let x = uniform(&[n, c, size, size], -1.0, 1.0, seed);
    let w = uniform(&[f, c, 3, 3], -1.0, 1.0, seed + 1);
    let b = uniform(&[f], -1.0, 1.0, seed + 2);
    let dilated = conv::conv2d(&x, &w, Some(&b), ConvGeometry::new(1, padding, 2)).unwrap();
    let wide = conv::conv2d(&x, &interleave(&w), Some(&b), ConvGeometry::new(1, padding, 1)).unwrap();
    assert_eq!(dilated.shape(), wide.shape());
    dilated.max_abs_diff(&wide)
}

/// Max abs difference between the separable kernel and per-channel conv2d
/// calls followed by an explicit 1×1 channel mix.
pub fn separable_vs_composition(seed: u64) -> f64 {
    let mut r = rng(seed);
    let padding = if r.gen_bool(0.5) { Padding::Same } else { Padding::Valid };
    let (n, c, f, k) = (r.gen_range(1..=2), r.gen_range(1..=5), r.gen_range(1..=6), [3, 5][r.gen_range(0..2)]);
    let size = k + r.gen_range(0..=5);
    let x = uniform(&[n, c, size, size], -1.0, 1.0, seed);
    let dk = uniform(&[c, k, k], -1.0, 1.0, seed + 1);
    let pk = uniform(&[f, c, 1, 1], -1.0, 1.0, seed + 2);
    let b = uniform(&[f], -1.0, 1.0, seed + 3);
    let got = ops::depthwise_separable_conv2d(&x, &dk, &pk, &b, padding).unwrap();

    let geom = ConvGeometry::new(1, padding, 1);
    let mut planes = Vec::with_capacity(c);
    for ch in 0..c {
        let mut xs = Vec::new();
        for bi in 0..n {
            let start = (bi * c + ch) * size * size;
            xs.extend_from_slice(&x.data()[start..start + size * size]);
        }
        let xc = Tensor::from_vec(&[n, 1, size, size], xs).unwrap();
        let kc = Tensor::from_vec(&[1, 1, k, k], dk.data()[ch * k * k..(ch + 1) * k * k].to_vec()).unwrap();
        planes.push(conv::conv2d(&xc, &kc, None, geom).unwrap());
    }
    let (_, _, oh, ow) = planes[0].dims4("oracle").unwrap();
    let area = oh * ow;
    let mut want = vec![0.0; n * f * area];
    for bi in 0..n {
        for o in 0..f {
            for p in 0..area {
                let mut acc = b.data()[o];
                for (ch, plane) in planes.iter().enumerate() {
                    acc += pk.data()[o * c + ch] * plane.data()[bi * area + p];
                }
                want[(bi * f + o) * area + p] = acc;
            }
        }
    }
    got.max_abs_diff(&Tensor::from_vec(&[n, f, oh, ow], want).unwrap())
}

/// Max abs difference between the im2col conv2d and [`direct_conv`].
pub fn conv2d_vs_direct(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, c, f, k) = (r.gen_range(1..=2), r.gen_range(1..=4), r.gen_range(1..=4), r.gen_range(1..=4));
    let stride = r.gen_range(1..=2);
    let dilation = r.gen_range(1..=2);
    let padding = if r.gen_bool(0.5) { Padding::Same } else { Padding::Valid };
    let size = conv::effective_extent(k, dilation) + r.gen_range(0..=5);
    let x = uniform(&[n, c, size, size], -1.0, 1.0, seed);
    let w = uniform(&[f, c, k, k], -1.0, 1.0, seed + 1);
    let b = uniform(&[f], -1.0, 1.0, seed + 2);
    let geom = ConvGeometry::new(stride, padding, dilation);
    let got = conv::conv2d(&x, &w, Some(&b), geom).unwrap();
    let extent = conv::effective_extent(k, dilation);
    let (out, pad) = match padding {
        Padding::Valid => ((size - extent) / stride + 1, 0),
        Padding::Same => {
            let out = size.div_ceil(stride);
            let total = ((out - 1) * stride + extent).saturating_sub(size);
            (out, total / 2)
        }
    };
    got.max_abs_diff(&direct_conv(&x, &w, Some(&b), stride, dilation, (pad, pad), (out, out)))
}

pub struct LossIdentities {
    /// Largest `|p − 1/K|` for equal logits.
    pub uniform_softmax: f64,
    /// `|CCE(uniform 4-class) − ln 4|`.
    pub cce_ln4: f64,
    /// Largest `|autodiff − (p − y)/N|` over the logits.
    pub logit_gradient: f64,
}

pub fn loss_identities(seed: u64) -> LossIdentities {
    let mut uniform_softmax: f64 = 0.0;
    for k in 2..=8 {
        let logits = Tensor::full(&[3, k], 0.37);
        let p = msad_core::kernels::dense::softmax(&logits).unwrap();
        for &v in p.data() {
            uniform_softmax = uniform_softmax.max((v - 1.0 / k as f64).abs());
        }
    }
    let probs = Tensor::full(&[4, 4], 0.25);
    let labels = ops::one_hot(&[0, 1, 2, 3], 4).unwrap();
    let cce: f64 = ops::cce_loss(&probs, &labels).unwrap();
    let cce_ln4 = (cce - 4f64.ln()).abs();

    let mut r = rng(seed);
    let (n, k) = (r.gen_range(1..=6), r.gen_range(2..=6));
    let logits = uniform(&[n, k], -4.0, 4.0, seed);
    let ls: Vec<usize> = (0..n).map(|_| r.gen_range(0..k)).collect();
    let y: Tensor<f64> = ops::one_hot(&ls, k).unwrap();
    let mut tape = Tape::new();
    let z = tape.param(logits.clone());
    let p = tape.softmax(z).unwrap();
    let loss = tape.cce_loss(p, y.clone()).unwrap();
    let grads = tape.backward(loss).unwrap();
    let probs = tape.value(p);
    let mut logit_gradient: f64 = 0.0;
    for ((g, &pv), &yv) in grads.get(z).unwrap().data().iter().zip(probs.data()).zip(y.data()) {
        logit_gradient = logit_gradient.max((g - (pv - yv) / n as f64).abs());
    }
    LossIdentities {
        uniform_softmax,
        cce_ln4,
        logit_gradient,
    }
}
