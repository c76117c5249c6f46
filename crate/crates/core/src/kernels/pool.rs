use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Max pooling with a square `window` and `stride`; trailing rows and columns
/// that do not fill a window are dropped.
///
/// Returns the pooled tensor and, for every output element, the flat input
/// index of its maximum (the first one in row-major order on ties).
pub fn max_pool2d<T: Element>(
    x: &Tensor<T>,
    window: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = x.dims4("max_pool2d")?;
    if window == 0 || stride == 0 {
        return Err(Error::InvalidArgument("max_pool2d: zero window or stride".into()));
    }
    if h < window || w < window {
        return Err(Error::dim(
            "max_pool2d",
            format!("spatial extent {h}×{w} is smaller than the {window}×{window} window"),
        ));
    }
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let data = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for i in 0..window {
                    for j in 0..window {
                        let idx = base + (oy * stride + i) * w + ox * stride + j;
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::from_vec(&[n, c, oh, ow], out)?, argmax))
}

/// Routes each output gradient to the input element that won the max.
pub fn max_pool2d_backward<T: Element>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        d[idx] += g;
    }
    dx
}

/// Spatial mean per channel: `[N,C,H,W] -> [N,C]`.
pub fn global_avg_pool<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("global_avg_pool")?;
    if h == 0 || w == 0 {
        return Err(Error::dim("global_avg_pool", "empty spatial extent"));
    }
    let area = h * w;
    let denom = T::from_f64(area as f64);
    let out = x
        .data()
        .chunks(area)
        .map(|plane| plane.iter().copied().sum::<T>() / denom)
        .collect();
    Tensor::from_vec(&[n, c], out)
}

pub fn global_avg_pool_backward<T: Element>(input_shape: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let area: usize = input_shape[2..].iter().product();
    let scale = T::from_f64(1.0 / area as f64);
    let mut data = Vec::with_capacity(grad_out.numel() * area);
    for &g in grad_out.data() {
        data.extend(std::iter::repeat_n(g * scale, area));
    }
    Tensor::from_vec(input_shape, data).expect("gap backward shape")
}
