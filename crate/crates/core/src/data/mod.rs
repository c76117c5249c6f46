//! Image ingestion, dataset manifests and the synthetic dataset generator.

mod dataset;
mod image;
mod synthetic;

pub use dataset::{scan_dataset, Dataset, DatasetManifest, ManifestSource, Partition, SampleRecord};
pub use image::{decode_pnm, encode_pnm, from_tensor, load_pnm, resize_bilinear, save_pnm, to_tensor, ImageBuffer};
pub(crate) use image::resize_plane_f64;
pub use synthetic::{
    generate_synthetic, materialize, nearest_centroid_accuracy, pixel_statistics, render, ClassTexture, Rendered,
    Structure, SyntheticSet, SyntheticSpec,
};
