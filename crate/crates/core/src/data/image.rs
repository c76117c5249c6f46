use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// 8-bit image, row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    channels: usize,
    samples: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, channels: usize, samples: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "images have 1 or 3 channels, got {channels}"
            )));
        }
        if samples.len() != height * width * channels {
            return Err(Error::InvalidArgument(format!(
                "{height}×{width}×{channels} image needs {} samples, got {}",
                height * width * channels,
                samples.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            samples,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: u8) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn samples(&self) -> &[u8] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [u8] {
        &mut self.samples
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> u8 {
        self.samples[(y * self.width + x) * self.channels + c]
    }

    /// Replicates a grayscale image into three channels; color images are
    /// returned unchanged.
    pub fn to_rgb(&self) -> ImageBuffer {
        if self.channels == 3 {
            return self.clone();
        }
        let samples = self.samples.iter().flat_map(|&v| [v, v, v]).collect();
        ImageBuffer {
            channels: 3,
            samples,
            ..*self
        }
    }
}

fn parse_err(offset: usize, detail: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        detail: detail.into(),
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<(usize, usize)> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            let detail = if start >= self.bytes.len() {
                format!("header ends before the {what}")
            } else {
                format!("expected the {what}, found byte 0x{:02x}", self.bytes[start])
            };
            return Err(parse_err(start, detail));
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii digits");
        let value = text
            .parse()
            .map_err(|_| parse_err(start, format!("{what} `{text}` is out of range")))?;
        Ok((value, start))
    }
}

/// Decodes a binary PGM (`P5`) or PPM (`P6`) image with maxval 255.
pub fn decode_pnm(bytes: &[u8]) -> Result<ImageBuffer> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(parse_err(0, "expected magic `P5` or `P6`")),
    };
    let mut h = Header { bytes, pos: 2 };
    if !bytes.get(2).is_some_and(|b| b.is_ascii_whitespace() || *b == b'#') {
        return Err(parse_err(2, "magic must be followed by whitespace"));
    }
    let (width, _) = h.number("width")?;
    let (height, _) = h.number("height")?;
    let (maxval, at) = h.number("maxval")?;
    if maxval != 255 {
        return Err(parse_err(at, format!("maxval {maxval} is not supported, only 255")));
    }
    if width == 0 || height == 0 {
        return Err(parse_err(at, format!("empty {width}×{height} image")));
    }
    match bytes.get(h.pos) {
        Some(b) if b.is_ascii_whitespace() => h.pos += 1,
        _ => return Err(parse_err(h.pos, "expected one whitespace byte before the raster")),
    }
    let need = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| parse_err(h.pos, "image dimensions overflow"))?;
    let have = bytes.len() - h.pos;
    if have < need {
        return Err(parse_err(
            bytes.len(),
            format!("truncated raster: {need} bytes expected, {have} present"),
        ));
    }
    if have > need {
        return Err(parse_err(h.pos + need, format!("{} trailing bytes after the raster", have - need)));
    }
    ImageBuffer::new(height, width, channels, bytes[h.pos..].to_vec())
}

/// Encodes as `P5` (one channel) or `P6` (three channels) with maxval 255.
pub fn encode_pnm(img: &ImageBuffer) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.samples);
    out
}

pub fn load_pnm(path: &Path) -> Result<ImageBuffer> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes).map_err(|e| match e {
        Error::Parse { offset, detail } => Error::Parse {
            offset,
            detail: format!("{}: {detail}", path.display()),
        },
        other => other,
    })
}

pub fn save_pnm(img: &ImageBuffer, path: &Path) -> Result<()> {
    fs::write(path, encode_pnm(img)).map_err(|e| Error::io(path, e))
}

/// Source coordinate and blend weight along one axis, half-pixel aligned.
fn taps(out: usize, size: usize) -> Vec<(usize, usize, f64)> {
    let scale = size as f64 / out as f64;
    (0..out)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (size - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(size - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Bilinear resize with half-pixel centers and edge clamping, rounded to
/// the nearest integer.
pub fn resize_bilinear(img: &ImageBuffer, height: usize, width: usize) -> Result<ImageBuffer> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument("resize target must be non-empty".into()));
    }
    let plane = resize_plane_f64(
        &img.samples.iter().map(|&v| v as f64).collect::<Vec<_>>(),
        img.channels,
        img.height,
        img.width,
        height,
        width,
    );
    let samples = plane.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect();
    ImageBuffer::new(height, width, img.channels, samples)
}

/// Bilinear resize of interleaved `[H, W, C]` values.
pub(crate) fn resize_plane_f64(
    src: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let ys = taps(oh, h);
    let xs = taps(ow, w);
    let mut out = Vec::with_capacity(oh * ow * channels);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for c in 0..channels {
                let at = |y: usize, x: usize| src[(y * w + x) * channels + c];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    out
}

/// `[1, channels, H, W]` tensor with samples scaled to `[0, 1]`.
///
/// Grayscale is replicated when three channels are requested; color reduces
/// to the channel mean when one is requested.
pub fn to_tensor<T: Element>(img: &ImageBuffer, channels: usize) -> Result<Tensor<T>> {
    if channels != 1 && channels != 3 {
        return Err(Error::InvalidArgument(format!(
            "model input must have 1 or 3 channels, got {channels}"
        )));
    }
    let (h, w) = (img.height, img.width);
    let mut data = Vec::with_capacity(channels * h * w);
    for c in 0..channels {
        for y in 0..h {
            for x in 0..w {
                let v = match (img.channels, channels) {
                    (1, _) => img.get(y, x, 0) as f64,
                    (3, 3) => img.get(y, x, c) as f64,
                    _ => (0..3).map(|k| img.get(y, x, k) as f64).sum::<f64>() / 3.0,
                };
                data.push(T::from_f64(v / 255.0));
            }
        }
    }
    Tensor::from_vec(&[1, channels, h, w], data)
}

/// Inverse of [`to_tensor`] for a `[1, C, H, W]` or `[C, H, W]` tensor,
/// clamping to `[0, 1]` and rounding.
pub fn from_tensor<T: Element>(t: &Tensor<T>) -> Result<ImageBuffer> {
    let shape = t.shape();
    let (c, h, w) = match *shape {
        [1, c, h, w] | [c, h, w] => (c, h, w),
        _ => return Err(Error::shape("from_tensor", format!("expected [1,C,H,W], got {shape:?}"))),
    };
    let data = t.data();
    let mut samples = vec![0u8; c * h * w];
    for ch in 0..c {
        for i in 0..h * w {
            let v = data[ch * h * w + i].as_f64().clamp(0.0, 1.0);
            samples[i * c + ch] = (v * 255.0).round() as u8;
        }
    }
    ImageBuffer::new(h, w, c, samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decodes_minimal_pgm() {
        let mut bytes = b"P5\n2 2\n255\n".to_vec();
        bytes.extend([0, 64, 128, 255]);
        let img = decode_pnm(&bytes).unwrap();
        assert_eq!((img.height(), img.width(), img.channels()), (2, 2, 1));
        assert_eq!(img.samples(), &[0, 64, 128, 255]);
        assert_eq!(encode_pnm(&img), bytes);
    }

    #[test]
    fn comments_parse_identically() {
        let mut plain = b"P6\n3 1\n255\n".to_vec();
        let mut commented = b"P6 # color\n# made by hand\n3 # width\n1\n# max\n255\n".to_vec();
        let raster = [1, 2, 3, 4, 5, 6, 7, 8, 9];
        plain.extend(raster);
        commented.extend(raster);
        assert_eq!(decode_pnm(&plain).unwrap(), decode_pnm(&commented).unwrap());
    }

    #[test]
    fn errors_carry_byte_offsets() {
        let e = decode_pnm(b"P5\n2 2\n65535\n").unwrap_err();
        assert!(matches!(e, Error::Parse { offset: 7, .. }), "{e}");
        let e = decode_pnm(b"P5\n2 2\n255\n\x01\x02").unwrap_err();
        assert!(matches!(e, Error::Parse { offset: 13, .. }), "{e}");
        let e = decode_pnm(b"P3\n").unwrap_err();
        assert!(matches!(e, Error::Parse { offset: 0, .. }));
        let e = decode_pnm(b"P5\n2 x\n").unwrap_err();
        assert!(matches!(e, Error::Parse { offset: 5, .. }), "{e}");
    }

    #[test]
    fn constant_images_stay_constant() {
        let img = ImageBuffer::filled(5, 9, 1, 77).unwrap();
        let out = resize_bilinear(&img, 13, 4).unwrap();
        assert!(out.samples().iter().all(|&v| v == 77));
    }

    #[test]
    fn same_size_resize_is_identity() {
        let samples: Vec<u8> = (0..224 * 224).map(|i| (i * 7 % 256) as u8).collect();
        let img = ImageBuffer::new(224, 224, 1, samples).unwrap();
        assert_eq!(resize_bilinear(&img, 224, 224).unwrap(), img);
    }

    #[test]
    fn checkerboard_upsample_matches_hand_oracle() {
        let img = ImageBuffer::new(2, 2, 1, vec![0, 255, 255, 0]).unwrap();
        let out = resize_bilinear(&img, 4, 4).unwrap();
        // source positions: clamp(-0.25)=0, 0.25, 0.75, clamp(1.25)=1
        let weights = [0.0, 0.25, 0.75, 1.0];
        for (y, &fy) in weights.iter().enumerate() {
            for (x, &fx) in weights.iter().enumerate() {
                let v: f64 = 255.0 * (fx * (1.0 - fy) + fy * (1.0 - fx));
                assert_eq!(out.get(y, x, 0), v.round() as u8, "({y},{x})");
            }
        }
    }

    #[test]
    fn tensor_scaling_and_replication() {
        let img = ImageBuffer::new(1, 2, 1, vec![0, 255]).unwrap();
        let t = to_tensor::<f64>(&img, 3).unwrap();
        assert_eq!(t.shape(), &[1, 3, 1, 2]);
        assert_eq!(t.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let back = from_tensor(&to_tensor::<f32>(&img, 1).unwrap()).unwrap();
        assert_eq!(back, img);
    }
}
