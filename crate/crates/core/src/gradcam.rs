//! Gradient-weighted class activation maps over named taps of the model.

use std::path::Path;

use crate::autodiff::Tape;
use crate::data::{resize_plane_f64, save_pnm, ImageBuffer};
use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::tensor::{Element, Tensor};

/// Tap visualized when none is named: the last convolutional stage of block 5.
pub const DEFAULT_TAP: &str = "block5_out";

/// Attention map at input resolution, normalized to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub tap: String,
    pub class: usize,
}

impl Heatmap {
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Row and column of the maximum (first in row-major order).
    pub fn peak(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        (best / self.width, best % self.width)
    }

    /// Quadrant of the peak: 0 top-left, 1 top-right, 2 bottom-left,
    /// 3 bottom-right.
    pub fn peak_quadrant(&self) -> usize {
        let (y, x) = self.peak();
        let row = usize::from(2 * y >= self.height);
        let col = usize::from(2 * x >= self.width);
        2 * row + col
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    /// Grayscale rendering, `round(255 · value)`.
    pub fn to_image(&self) -> ImageBuffer {
        let samples = self.values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        ImageBuffer::new(self.height, self.width, 1, samples).expect("heatmap size")
    }
}

/// Grad-CAM for one image `[1, C, S, S]`.
///
/// Channel weights are the spatial means of the gradient of the target
/// class logit with respect to the tap activations; the map is the ReLU of
/// the weighted channel sum, bilinearly upsampled to the input size and
/// divided by its maximum. `class` defaults to the predicted class.
pub fn gradcam<T: Element>(
    model: &ModelGraph<T>,
    image: &Tensor<T>,
    class: Option<usize>,
    tap: &str,
) -> Result<Heatmap> {
    let tap_id = model.tap(tap)?;
    let k = model.num_classes();
    if image.shape().first() != Some(&1) {
        return Err(Error::shape("gradcam", format!("expected a single image, got {:?}", image.shape())));
    }
    let mut tape = Tape::new();
    let x = tape.constant(image.clone());
    let pass = model.forward_infer(&mut tape, x)?;
    let logits = tape.value(pass.logits);
    let class = match class {
        Some(c) if c >= k => {
            return Err(Error::InvalidArgument(format!("class index {c} is out of range for {k} classes")))
        }
        Some(c) => c,
        None => {
            let row: Vec<f64> = logits.data().iter().map(|v| v.as_f64()).collect();
            crate::train::argmax(&row)
        }
    };
    let mut seed = Tensor::zeros(&[1, k]);
    seed.data_mut()[class] = T::one();
    let grads = tape.backward_with(pass.logits, seed)?;
    let act_var = pass.node(tap_id);
    let act = tape.value(act_var);
    let (_, c, h, w) = act
        .dims4("gradcam")
        .map_err(|_| Error::InvalidArgument(format!("tap `{tap}` is not a feature map")))?;
    let zeros = Tensor::zeros(act.shape());
    let grad = grads.get(act_var).unwrap_or(&zeros);
    let area = h * w;
    let mut cam = vec![0.0f64; area];
    for ch in 0..c {
        let g = &grad.data()[ch * area..(ch + 1) * area];
        let a = &act.data()[ch * area..(ch + 1) * area];
        let weight = g.iter().map(|v| v.as_f64()).sum::<f64>() / area as f64;
        if weight == 0.0 {
            continue;
        }
        for (m, &v) in cam.iter_mut().zip(a) {
            *m += weight * v.as_f64();
        }
    }
    for v in &mut cam {
        *v = v.max(0.0);
    }
    let size = model.config().input_size;
    let mut values = resize_plane_f64(&cam, 1, h, w, size, size);
    let max = values.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        for v in &mut values {
            *v /= max;
        }
    } else {
        values.iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(Heatmap {
        height: size,
        width: size,
        values,
        tap: tap.to_string(),
        class,
    })
}

/// Blue-to-red lookup: `c(t) = clamp(1.5 − |4t − k|)` with `k` = 3, 2, 1 for
/// red, green and blue, in integer arithmetic.
const fn colormap_table() -> [[u8; 3]; 256] {
    let mut lut = [[0u8; 3]; 256];
    let mut i = 0;
    while i < 256 {
        let mut ch = 0;
        while ch < 3 {
            let k = 3 - ch as i32;
            let d = 8 * i as i32 - 510 * k;
            let v = (765 - if d < 0 { -d } else { d }) / 2;
            lut[i][ch] = if v < 0 {
                0
            } else if v > 255 {
                255
            } else {
                v as u8
            };
            ch += 1;
        }
        i += 1;
    }
    lut
}

pub static COLORMAP: [[u8; 3]; 256] = colormap_table();

pub fn colorize(value: f64) -> [u8; 3] {
    COLORMAP[(value.clamp(0.0, 1.0) * 255.0).round() as usize]
}

/// `(1 − alpha) · source + alpha · colormap(heatmap)`, rounded, as RGB.
pub fn overlay(image: &ImageBuffer, heatmap: &Heatmap, alpha: f64) -> Result<ImageBuffer> {
    if image.height() != heatmap.height || image.width() != heatmap.width {
        return Err(Error::shape(
            "overlay",
            format!(
                "image is {}×{}, heatmap is {}×{}",
                image.height(),
                image.width(),
                heatmap.height,
                heatmap.width
            ),
        ));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let rgb = image.to_rgb();
    let mut out = Vec::with_capacity(rgb.samples().len());
    for (i, px) in rgb.samples().chunks(3).enumerate() {
        let color = colorize(heatmap.values[i]);
        for ch in 0..3 {
            let v = (1.0 - alpha) * px[ch] as f64 + alpha * color[ch] as f64;
            out.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    ImageBuffer::new(image.height(), image.width(), 3, out)
}

/// Writes `<stem>_map.pgm` and `<stem>_overlay.ppm` into `dir`.
pub fn export(image: &ImageBuffer, heatmap: &Heatmap, alpha: f64, dir: &Path, stem: &str) -> Result<()> {
    save_pnm(&heatmap.to_image(), &dir.join(format!("{stem}_map.pgm")))?;
    save_pnm(&overlay(image, heatmap, alpha)?, &dir.join(format!("{stem}_overlay.ppm")))
}
