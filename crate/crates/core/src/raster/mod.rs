//! Raster tensor files, dataset manifests, image pairs and the synthetic
//! scene generator.

mod format;
mod manifest;
mod pair;
mod synthetic;

pub use format::{decode_raster, encode_raster, read_raster, write_raster};
pub use manifest::{split_counts, DatasetManifest, ManifestEntry, Split};
pub use pair::{change_contrast, normalize_pair, BandStats, Normalization, RasterPair};
pub use synthetic::{generate_synthetic_pair, SyntheticSceneSpec};
