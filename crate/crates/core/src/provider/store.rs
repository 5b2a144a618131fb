use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{check_prompts, MaskProvider, ViewRequest};
use crate::error::{ensure, Error, Result};
use crate::grid::ProbMask;
use crate::pgm;

/// One image in a mask store index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreEntry {
    pub id: String,
    pub rows: usize,
    pub cols: usize,
    pub augs: Vec<usize>,
}

/// Contents of `<store_dir>/manifest.json`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreManifest {
    pub images: Vec<StoreEntry>,
}

fn mask_path(store_dir: &Path, image_id: &str, aug_index: usize) -> PathBuf {
    store_dir.join(image_id).join(format!("aug_{aug_index}.pgm"))
}

/// Reads `<store_dir>/<image_id>/aug_<k>.pgm`.
pub fn file_lookup(image_id: &str, aug_index: usize, store_dir: &Path) -> Result<ProbMask> {
    let path = mask_path(store_dir, image_id, aug_index);
    match pgm::read(&path) {
        Ok(g) => ProbMask::new(g),
        Err(Error::NotFound(_)) => Err(Error::NotFound(format!("no stored mask for ({image_id}, {aug_index})"))),
        Err(e) => Err(e),
    }
}

/// Masks precomputed offline, one PGM per (image, view).
#[derive(Debug, Clone)]
pub struct MaskStore {
    dir: PathBuf,
    manifest: StoreManifest,
}

impl MaskStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        let path = dir.join("manifest.json");
        let manifest = match fs::read_to_string(&path) {
            Ok(s) => serde_json::from_str(&s).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::NotFound(format!("mask store index {}", path.display())))
            }
            Err(e) => return Err(e.into()),
        };
        Ok(MaskStore { dir, manifest })
    }

    pub fn manifest(&self) -> &StoreManifest {
        &self.manifest
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Writes one mask and records it in the in-memory index.
    pub fn put(&mut self, image_id: &str, original: (usize, usize), aug_index: usize, mask: &ProbMask) -> Result<()> {
        pgm::write(&mask_path(&self.dir, image_id, aug_index), mask.grid())?;
        let entry = match self.manifest.images.iter_mut().find(|e| e.id == image_id) {
            Some(e) => e,
            None => {
                self.manifest.images.push(StoreEntry {
                    id: image_id.to_string(),
                    rows: original.0,
                    cols: original.1,
                    augs: Vec::new(),
                });
                self.manifest.images.last_mut().expect("just pushed")
            }
        };
        if !entry.augs.contains(&aug_index) {
            entry.augs.push(aug_index);
            entry.augs.sort_unstable();
        }
        Ok(())
    }

    pub fn create(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(MaskStore { dir, manifest: StoreManifest::default() })
    }

    pub fn save_manifest(&self) -> Result<()> {
        let mut images: BTreeMap<&str, &StoreEntry> = BTreeMap::new();
        for e in &self.manifest.images {
            images.insert(&e.id, e);
        }
        let sorted = StoreManifest { images: images.into_values().cloned().collect() };
        fs::write(self.dir.join("manifest.json"), serde_json::to_string_pretty(&sorted)?)?;
        Ok(())
    }
}

impl MaskProvider for MaskStore {
    fn segment(&self, req: &ViewRequest<'_>) -> Result<ProbMask> {
        check_prompts(req.image.dims(), req.prompts)?;
        let mask = file_lookup(req.image_id, req.view_index, &self.dir)?;
        ensure(mask.dims() == req.image.dims(), || {
            format!(
                "stored mask ({}, {}) is {:?}, view is {:?}",
                req.image_id,
                req.view_index,
                mask.dims(),
                req.image.dims()
            )
        })
        .map_err(|e| Error::Format(e.to_string()))?;
        Ok(mask)
    }
}
