//! Dataset ingestion: manifests, image stores, preprocessing, and synthetic data.

pub mod augment;
pub mod manifest;
pub mod synthetic;

use std::borrow::Cow;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use augment::{preprocess, sample_crop_offset, AugmentationPolicy};
pub use manifest::{load_manifest, parse_manifest, write_manifest, Manifest, SampleRecord};
pub use synthetic::{generate_synthetic, SyntheticDataset, SyntheticSpec};

use crate::episode::{derive_seed, validate_split, SampleId, ValidatedSplit};
use crate::error::{Error, Result};
use crate::nn::Tensor;

#[derive(Debug, Clone)]
enum ImageStore {
    Memory(Vec<RgbImage>),
    Disk { root: PathBuf },
}

/// Images plus their manifest, and the preprocessing applied when batching.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub policy: AugmentationPolicy,
    /// When false, training batches use the evaluation transform.
    pub augment: bool,
    store: ImageStore,
}

impl Dataset {
    pub fn from_synthetic(ds: SyntheticDataset, policy: AugmentationPolicy) -> Self {
        Self {
            manifest: ds.manifest,
            policy,
            augment: true,
            store: ImageStore::Memory(ds.images),
        }
    }

    /// Opens a manifest; image paths resolve against `root`, or the manifest's directory.
    pub fn open(manifest_path: &Path, root: Option<&Path>, policy: AugmentationPolicy) -> Result<Self> {
        let manifest = load_manifest(manifest_path)?;
        let root = match root {
            Some(r) => r.to_path_buf(),
            None => manifest_path.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        Ok(Self {
            manifest,
            policy,
            augment: true,
            store: ImageStore::Disk { root },
        })
    }

    pub fn validated(&self) -> Result<ValidatedSplit> {
        validate_split(&self.manifest.splits, &self.manifest.index)
    }

    pub fn image(&self, id: SampleId) -> Result<Cow<'_, RgbImage>> {
        match &self.store {
            ImageStore::Memory(images) => Ok(Cow::Borrowed(&images[id.0 as usize])),
            ImageStore::Disk { root } => {
                let path = root.join(&self.manifest.record(id).key);
                let img = image::open(&path).map_err(|e| Error::Decode {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })?;
                Ok(Cow::Owned(img.to_rgb8()))
            }
        }
    }

    /// Preprocesses `ids` into `[B, 3, S, S]`. Image `i` draws its augmentation from
    /// a stream derived from `(seed, i)`, so the result does not depend on threading.
    pub fn batch(&self, ids: &[SampleId], train_mode: bool, seed: u64) -> Result<Tensor<f32>> {
        let train = train_mode && self.augment;
        let items: Vec<Tensor<f32>> = ids
            .par_iter()
            .enumerate()
            .map(|(i, &id)| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[i as u64]));
                let img = self.image(id)?;
                preprocess(&img, &self.policy, train, &mut rng)
            })
            .collect::<Result<_>>()?;
        Ok(Tensor::stack(&items))
    }

    /// Side length of preprocessed images.
    pub fn image_size(&self) -> usize {
        self.policy.crop_to
    }
}

/// Writes a synthetic dataset as PNG files plus `manifest.csv`; returns the manifest path.
pub fn materialize(ds: &SyntheticDataset, dir: &Path) -> Result<PathBuf> {
    for (record, img) in ds.manifest.records.iter().zip(&ds.images) {
        let path = dir.join(&record.key);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        img.save(&path).map_err(|e| Error::Decode {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
    }
    let manifest = dir.join("manifest.csv");
    write_manifest(&manifest, &ds.manifest.records)?;
    Ok(manifest)
}
