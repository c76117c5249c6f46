//! Desk-scale stand-in for the CT datasets: each class draws a distinct
//! structure inside one randomly chosen quadrant of a noisy background.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::dataset::{Dataset, DatasetManifest, ManifestSource, SampleRecord};
use super::image::{save_pnm, ImageBuffer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    /// Filled disks.
    Disk,
    /// Disk outlines.
    Ring,
    /// Bars elongated along the x axis.
    HorizontalStreaks,
    /// Bars elongated along the y axis.
    VerticalStreaks,
}

/// Drawing parameters of one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassTexture {
    pub name: String,
    pub structure: Structure,
    /// Inclusive range of structures drawn per image.
    pub count: [usize; 2],
    /// Radius (disks, rings) or half-length (streaks) as a fraction of the
    /// quadrant side.
    pub extent: [f64; 2],
    /// Gray levels added on top of the background.
    pub contrast: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub images_per_class: usize,
    pub image_size: usize,
    /// Background gray level.
    pub background: f64,
    /// Amplitude of uniform per-pixel noise, in gray levels.
    pub noise: f64,
    pub seed: u64,
    /// Per-class textures; derived from `num_classes` when empty.
    pub classes: Vec<ClassTexture>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            images_per_class: 40,
            image_size: 128,
            background: 60.0,
            noise: 20.0,
            seed: 0,
            classes: Vec::new(),
        }
    }
}

const STRUCTURES: [Structure; 4] = [
    Structure::Disk,
    Structure::Ring,
    Structure::HorizontalStreaks,
    Structure::VerticalStreaks,
];

impl SyntheticSpec {
    /// The explicit textures, or the default set: structures cycle through
    /// disk, ring, horizontal and vertical streaks, and every further cycle
    /// lowers the contrast.
    pub fn textures(&self) -> Vec<ClassTexture> {
        if !self.classes.is_empty() {
            return self.classes.clone();
        }
        (0..self.num_classes)
            .map(|k| {
                let structure = STRUCTURES[k % 4];
                let round = k / 4;
                let (name, count, extent) = match structure {
                    Structure::Disk => ("disk", [1, 2], [0.18, 0.3]),
                    Structure::Ring => ("ring", [1, 1], [0.3, 0.42]),
                    Structure::HorizontalStreaks => ("hstreak", [2, 3], [0.3, 0.42]),
                    Structure::VerticalStreaks => ("vstreak", [2, 3], [0.3, 0.42]),
                };
                ClassTexture {
                    name: if round == 0 { name.to_string() } else { format!("{name}{}", round + 1) },
                    structure,
                    count,
                    extent,
                    contrast: 150.0 / (1.0 + round as f64),
                }
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes == 0 {
            return bad("synthetic dataset needs at least one class".into());
        }
        if self.images_per_class == 0 {
            return bad("images_per_class must be positive".into());
        }
        if self.image_size < 16 {
            return bad(format!("image_size {} is below the 16 px minimum", self.image_size));
        }
        if !self.classes.is_empty() && self.classes.len() != self.num_classes {
            return bad(format!(
                "{} class textures given for {} classes",
                self.classes.len(),
                self.num_classes
            ));
        }
        for t in self.textures() {
            if t.count[0] == 0 || t.count[0] > t.count[1] {
                return bad(format!("class `{}` has an empty count range", t.name));
            }
            if !(t.extent[0] > 0.0 && t.extent[0] <= t.extent[1] && t.extent[1] <= 0.5) {
                return bad(format!("class `{}` extent must satisfy 0 < lo ≤ hi ≤ 0.5", t.name));
            }
        }
        Ok(())
    }
}

/// One rendered sample.
pub struct Rendered {
    pub image: ImageBuffer,
    pub quadrant: usize,
}

/// Deterministically renders the image identified by `sample_seed`.
pub fn render(spec: &SyntheticSpec, texture: &ClassTexture, sample_seed: u64) -> Rendered {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let size = spec.image_size;
    let half = size / 2;
    let quadrant = rng.gen_range(0..4);
    let (qy, qx) = ((quadrant / 2) * half, (quadrant % 2) * half);
    let mut mask = vec![0.0f64; size * size];
    let count = rng.gen_range(texture.count[0]..=texture.count[1]);
    let thick = (size as f64 / 64.0).max(1.0);
    for _ in 0..count {
        let ext = rng.gen_range(texture.extent[0]..=texture.extent[1]) * half as f64;
        let margin = match texture.structure {
            Structure::Disk | Structure::Ring => ext + 1.0,
            _ => ext.max(thick) + 1.0,
        };
        let lo = margin.min(half as f64 / 2.0);
        let hi = (half as f64 - margin).max(lo + 1e-9);
        let cy = qy as f64 + rng.gen_range(lo..hi);
        let cx = qx as f64 + rng.gen_range(lo..hi);
        for y in qy..qy + half {
            for x in qx..qx + half {
                let dy = y as f64 + 0.5 - cy;
                let dx = x as f64 + 0.5 - cx;
                let inside = match texture.structure {
                    Structure::Disk => dx * dx + dy * dy <= ext * ext,
                    Structure::Ring => ((dx * dx + dy * dy).sqrt() - ext).abs() <= thick,
                    Structure::HorizontalStreaks => dx.abs() <= ext && dy.abs() <= thick,
                    Structure::VerticalStreaks => dy.abs() <= ext && dx.abs() <= thick,
                };
                if inside {
                    mask[y * size + x] = 1.0;
                }
            }
        }
    }
    let samples = mask
        .iter()
        .map(|&m| {
            let noise = if spec.noise > 0.0 {
                rng.gen_range(-spec.noise..=spec.noise)
            } else {
                0.0
            };
            (spec.background + texture.contrast * m + noise).round().clamp(0.0, 255.0) as u8
        })
        .collect();
    Rendered {
        image: ImageBuffer::new(size, size, 1, samples).expect("rendered size"),
        quadrant,
    }
}

/// Manifest and in-memory images of a generated set.
pub struct SyntheticSet {
    pub manifest: DatasetManifest,
    pub dataset: Dataset,
    /// Resubstitution accuracy of the nearest-centroid self-test.
    pub baseline_accuracy: f64,
}

/// Generates `images_per_class` images per class, class-major, and checks
/// that a nearest-centroid classifier on pixel statistics beats chance by at
/// least a factor of two.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticSet> {
    spec.validate()?;
    let textures = spec.textures();
    let mut seeds = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut records = Vec::new();
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut quadrants = Vec::new();
    for (label, tex) in textures.iter().enumerate() {
        for i in 0..spec.images_per_class {
            let seed: u64 = seeds.gen();
            let r = render(spec, tex, seed);
            records.push(SampleRecord {
                path: Some(PathBuf::from(&tex.name).join(format!("{}_{i:04}.pgm", tex.name))),
                generator_seed: Some(seed),
                label,
                partition: None,
                quadrant: Some(r.quadrant),
            });
            images.push(r.image);
            labels.push(label);
            quadrants.push(Some(r.quadrant));
        }
    }
    let class_names: Vec<String> = textures.iter().map(|t| t.name.clone()).collect();
    let manifest = DatasetManifest {
        source: ManifestSource::Synthetic,
        class_names: class_names.clone(),
        samples: records,
    };
    manifest.validate()?;
    let mut dataset = Dataset::new(class_names, images, labels)?;
    dataset.quadrants = quadrants;
    let baseline_accuracy = nearest_centroid_accuracy(&dataset);
    let chance = 1.0 / spec.num_classes as f64;
    if spec.num_classes > 1 && baseline_accuracy < (2.0 * chance).min(1.0) {
        return Err(Error::Dataset(format!(
            "generator self-test failed: nearest-centroid accuracy {baseline_accuracy:.3} is below twice chance ({:.3})",
            2.0 * chance
        )));
    }
    Ok(SyntheticSet {
        manifest,
        dataset,
        baseline_accuracy,
    })
}

/// Mean, standard deviation and mean absolute x / y differences.
pub fn pixel_statistics(img: &ImageBuffer) -> [f64; 4] {
    let (h, w) = (img.height(), img.width());
    let v = |y: usize, x: usize| img.get(y, x, 0) as f64;
    let n = (h * w) as f64;
    let mean = img.samples().iter().step_by(img.channels()).map(|&s| s as f64).sum::<f64>() / n;
    let var = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .map(|(y, x)| (v(y, x) - mean).powi(2))
        .sum::<f64>()
        / n;
    let mut gx = 0.0;
    let mut gy = 0.0;
    for y in 0..h {
        for x in 0..w {
            if x + 1 < w {
                gx += (v(y, x + 1) - v(y, x)).abs();
            }
            if y + 1 < h {
                gy += (v(y + 1, x) - v(y, x)).abs();
            }
        }
    }
    [mean, var.sqrt(), gx / n, gy / n]
}

/// Resubstitution accuracy of a nearest-centroid classifier over
/// standardized [`pixel_statistics`].
pub fn nearest_centroid_accuracy(data: &Dataset) -> f64 {
    let feats: Vec<[f64; 4]> = data.images.iter().map(pixel_statistics).collect();
    let n = feats.len() as f64;
    let mut scale = [0.0; 4];
    for (j, s) in scale.iter_mut().enumerate() {
        let mean = feats.iter().map(|f| f[j]).sum::<f64>() / n;
        let var = feats.iter().map(|f| (f[j] - mean).powi(2)).sum::<f64>() / n;
        *s = if var > 0.0 { var.sqrt() } else { 1.0 };
    }
    let k = data.num_classes();
    let mut centroids = vec![[0.0; 4]; k];
    let mut counts = vec![0usize; k];
    for (f, &l) in feats.iter().zip(&data.labels) {
        counts[l] += 1;
        for j in 0..4 {
            centroids[l][j] += f[j] / scale[j];
        }
    }
    for (c, &m) in centroids.iter_mut().zip(&counts) {
        for v in c.iter_mut() {
            *v /= m.max(1) as f64;
        }
    }
    let correct = feats
        .iter()
        .zip(&data.labels)
        .filter(|(f, &l)| {
            let dist = |c: &[f64; 4]| (0..4).map(|j| (f[j] / scale[j] - c[j]).powi(2)).sum::<f64>();
            let best = (0..k)
                .filter(|&c| counts[c] > 0)
                .min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])))
                .unwrap_or(0);
            best == l
        })
        .count();
    correct as f64 / n
}

/// Writes every image as PGM under `root/<class>/` plus `root/manifest.json`.
pub fn materialize(set: &SyntheticSet, root: &Path) -> Result<()> {
    for name in &set.manifest.class_names {
        let dir = root.join(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for (rec, img) in set.manifest.samples.iter().zip(&set.dataset.images) {
        let rel = rec.path.as_ref().expect("synthetic records carry paths");
        save_pnm(img, &root.join(rel))?;
    }
    set.manifest.save(&root.join("manifest.json"))
}
