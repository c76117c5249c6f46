use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

use super::image::{load_pnm, resize_bilinear, to_tensor, ImageBuffer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Valid,
    Test,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Train, Partition::Valid, Partition::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Valid => "valid",
            Partition::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown split `{s}`; use train, valid or test")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManifestSource {
    DirectoryTree,
    PreSplitTree,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    /// Relative to the manifest root.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub generator_seed: Option<u64>,
    pub label: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub partition: Option<Partition>,
    /// Quadrant (0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right)
    /// holding the class structure of a synthetic image.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub quadrant: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub source: ManifestSource,
    pub class_names: Vec<String>,
    pub samples: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.class_names.len();
        if k == 0 {
            return Err(Error::Dataset("manifest lists no classes".into()));
        }
        let mut seen = vec![false; k];
        let mut paths = BTreeSet::new();
        for (i, s) in self.samples.iter().enumerate() {
            if s.label >= k {
                return Err(Error::Dataset(format!("sample {i} has label {} but only {k} classes", s.label)));
            }
            seen[s.label] = true;
            if let Some(p) = &s.path {
                if !paths.insert(p.clone()) {
                    return Err(Error::Dataset(format!("duplicate path {}", p.display())));
                }
            }
        }
        if let Some(c) = seen.iter().position(|&s| !s) {
            return Err(Error::Dataset(format!("class `{}` has no samples", self.class_names[c])));
        }
        if self.source == ManifestSource::PreSplitTree {
            let tags: BTreeSet<_> = self.samples.iter().filter_map(|s| s.partition).collect();
            if tags.len() != 3 || self.samples.iter().any(|s| s.partition.is_none()) {
                return Err(Error::Dataset("pre-split manifest must tag every sample with train, valid or test".into()));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }
}

const IMAGE_EXTENSIONS: [&str; 3] = ["pgm", "ppm", "pnm"];

fn sorted_entries(dir: &Path) -> Result<(Vec<String>, Vec<String>)> {
    let mut dirs = Vec::new();
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with('.') {
            continue;
        }
        let ty = entry.file_type().map_err(|e| Error::io(entry.path(), e))?;
        if ty.is_dir() {
            dirs.push(name);
        } else {
            files.push(name);
        }
    }
    dirs.sort();
    files.sort();
    Ok((dirs, files))
}

fn image_files(dir: &Path) -> Result<Vec<String>> {
    let (_, files) = sorted_entries(dir)?;
    Ok(files
        .into_iter()
        .filter(|f| {
            Path::new(f)
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect())
}

/// Builds a manifest from either `root/<class>/*.pgm` or
/// `root/{train,valid,test}/<class>/*.pgm`. Classes are sorted by name.
pub fn scan_dataset(root: &Path) -> Result<DatasetManifest> {
    let (dirs, _) = sorted_entries(root)?;
    let split_names: Vec<&str> = Partition::ALL.iter().map(|p| p.as_str()).collect();
    let split_dirs = dirs.iter().filter(|d| split_names.contains(&d.as_str())).count();
    if dirs.is_empty() {
        return Err(Error::Dataset(format!(
            "{}: unknown layout, expected class subdirectories or train/valid/test",
            root.display()
        )));
    }
    if split_dirs == 3 {
        let mut classes = BTreeSet::new();
        for p in Partition::ALL {
            let (sub, _) = sorted_entries(&root.join(p.as_str()))?;
            classes.extend(sub);
        }
        let class_names: Vec<String> = classes.into_iter().collect();
        if class_names.is_empty() {
            return Err(Error::Dataset(format!("{}: split directories hold no classes", root.display())));
        }
        let mut samples = Vec::new();
        for p in Partition::ALL {
            for (label, class) in class_names.iter().enumerate() {
                let dir = root.join(p.as_str()).join(class);
                if !dir.is_dir() {
                    continue;
                }
                let files = image_files(&dir)?;
                if files.is_empty() {
                    return Err(Error::Dataset(format!("empty class directory {}", dir.display())));
                }
                samples.extend(files.into_iter().map(|f| SampleRecord {
                    path: Some(PathBuf::from(p.as_str()).join(class).join(f)),
                    generator_seed: None,
                    label,
                    partition: Some(p),
                    quadrant: None,
                }));
            }
        }
        let m = DatasetManifest {
            source: ManifestSource::PreSplitTree,
            class_names,
            samples,
        };
        m.validate()?;
        return Ok(m);
    }
    if split_dirs > 0 {
        return Err(Error::Dataset(format!(
            "{}: unknown layout, found only some of train/valid/test",
            root.display()
        )));
    }
    let mut samples = Vec::new();
    for (label, class) in dirs.iter().enumerate() {
        let dir = root.join(class);
        let files = image_files(&dir)?;
        if files.is_empty() {
            return Err(Error::Dataset(format!("empty class directory {}", dir.display())));
        }
        samples.extend(files.into_iter().map(|f| SampleRecord {
            path: Some(PathBuf::from(class).join(f)),
            generator_seed: None,
            label,
            partition: None,
            quadrant: None,
        }));
    }
    let m = DatasetManifest {
        source: ManifestSource::DirectoryTree,
        class_names: dirs,
        samples,
    };
    m.validate()?;
    Ok(m)
}

/// Decoded images with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub images: Vec<ImageBuffer>,
    pub labels: Vec<usize>,
    pub partitions: Vec<Option<Partition>>,
    pub quadrants: Vec<Option<usize>>,
}

impl Dataset {
    pub fn new(class_names: Vec<String>, images: Vec<ImageBuffer>, labels: Vec<usize>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Dataset(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::Dataset(format!("label {l} outside {} classes", class_names.len())));
        }
        let n = images.len();
        Ok(Self {
            class_names,
            images,
            labels,
            partitions: vec![None; n],
            quadrants: vec![None; n],
        })
    }

    /// Decodes every file listed in `manifest` relative to `root`.
    pub fn load(manifest: &DatasetManifest, root: &Path) -> Result<Self> {
        manifest.validate()?;
        let images = manifest
            .samples
            .par_iter()
            .map(|s| {
                let rel = s
                    .path
                    .as_ref()
                    .ok_or_else(|| Error::Dataset("manifest record has no file path".into()))?;
                load_pnm(&root.join(rel))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            class_names: manifest.class_names.clone(),
            images,
            labels: manifest.samples.iter().map(|s| s.label).collect(),
            partitions: manifest.samples.iter().map(|s| s.partition).collect(),
            quadrants: manifest.samples.iter().map(|s| s.quadrant).collect(),
        })
    }

    /// Scans `root` (or reads `root/manifest.json` when present) and loads it.
    pub fn open(root: &Path) -> Result<Self> {
        let manifest_path = root.join("manifest.json");
        let manifest = if manifest_path.is_file() {
            DatasetManifest::load(&manifest_path)?
        } else {
            scan_dataset(root)?
        };
        Self::load(&manifest, root)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Indices of a fixed partition, when every sample carries a tag.
    pub fn presplit(&self, p: Partition) -> Option<Vec<usize>> {
        if self.partitions.iter().any(|t| t.is_none()) {
            return None;
        }
        Some((0..self.len()).filter(|&i| self.partitions[i] == Some(p)).collect())
    }

    /// One `[1, channels, size, size]` tensor per sample.
    pub fn tensors<T: Element>(&self, size: usize, channels: usize) -> Result<Vec<Tensor<T>>> {
        self.images
            .par_iter()
            .map(|img| {
                let img = if img.height() == size && img.width() == size {
                    img.clone()
                } else {
                    resize_bilinear(img, size, size)?
                };
                to_tensor(&img, channels)
            })
            .collect()
    }
}
