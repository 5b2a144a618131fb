use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetConfig, Sample, Split};
use crate::augment::LabeledPoint;
use crate::error::{Error, Result};
use crate::grid::ProbMask;
use crate::pgm;
use crate::pseudolabel::{ScribbleGrid, SparseAnnotation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
}

/// Contents of `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub config: DatasetConfig,
    pub samples: Vec<ManifestEntry>,
}

/// Contents of `ann/<id>.json`. The scribble, if any, is a PGM next to it
/// with foreground 255, background 0 and unknown 128.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationFile {
    pub points: Vec<LabeledPoint>,
    pub scribble: Option<String>,
}

const MANIFEST_VERSION: u32 = 1;

fn paths(dir: &Path, id: &str) -> (PathBuf, PathBuf, PathBuf) {
    (
        dir.join("images").join(format!("{id}.pgm")),
        dir.join("gt").join(format!("{id}.pgm")),
        dir.join("ann").join(format!("{id}.json")),
    )
}

/// Writes the dataset layout under `dir`: `images/`, `gt/`, `ann/` and
/// `manifest.json`.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir.join("ann"))?;
    for s in &ds.samples {
        let (img, gt, ann) = paths(dir, &s.id);
        pgm::write(&img, &s.image)?;
        pgm::write(&gt, s.gt.grid())?;
        let scribble = match &s.annotation.scribble {
            Some(sc) => {
                let name = format!("{}_scribble.pgm", s.id);
                pgm::write(&dir.join("ann").join(&name), &sc.to_grid())?;
                Some(name)
            }
            None => None,
        };
        let file = AnnotationFile { points: s.annotation.points.clone(), scribble };
        fs::write(ann, serde_json::to_string_pretty(&file)?)?;
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        config: ds.config,
        samples: ds.samples.iter().map(|s| ManifestEntry { id: s.id.clone(), split: s.split }).collect(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn read_sample_file<T>(id: &str, path: &Path, f: impl FnOnce(&Path) -> Result<T>) -> Result<T> {
    f(path).map_err(|e| match e {
        Error::NotFound(_) => Error::NotFound(format!("sample {id}: missing {}", path.display())),
        Error::Format(m) => Error::Format(format!("sample {id}: {m}")),
        other => other,
    })
}

/// Reads a dataset written by [`write_dataset`]. A missing or malformed file
/// fails with an error naming the sample.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(format!("dataset manifest {}", mpath.display())),
        _ => e.into(),
    })?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", mpath.display())))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {}", manifest.version)));
    }
    let mut seen = std::collections::HashSet::new();
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let id = entry.id.as_str();
        if !seen.insert(id) {
            return Err(Error::Format(format!("sample {id} listed twice in the manifest")));
        }
        let (img, gt, ann) = paths(dir, id);
        let image = read_sample_file(id, &img, pgm::read)?;
        let gt = read_sample_file(id, &gt, |p| ProbMask::new(pgm::read(p)?))?;
        let file: AnnotationFile = read_sample_file(id, &ann, |p| {
            let text = fs::read_to_string(p).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Error::NotFound(p.display().to_string()),
                _ => e.into(),
            })?;
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", p.display())))
        })?;
        let scribble = match &file.scribble {
            Some(name) => {
                let g = read_sample_file(id, &dir.join("ann").join(name), pgm::read)?;
                Some(ScribbleGrid::from_grid(&g))
            }
            None => None,
        };
        if image.dims() != gt.dims() {
            return Err(Error::Format(format!("sample {id}: image {:?} vs gt {:?}", image.dims(), gt.dims())));
        }
        let annotation = SparseAnnotation { points: file.points, scribble };
        annotation.validate(image.dims()).map_err(|e| Error::Format(format!("sample {id}: {e}")))?;
        samples.push(Sample { id: id.to_string(), split: entry.split, image, gt, annotation });
    }
    Ok(Dataset { config: manifest.config, samples })
}

#[cfg(test)]
mod tests {
    use super::super::{generate_dataset, AnnotationKind};
    use super::*;

    fn small(kind: AnnotationKind) -> DatasetConfig {
        DatasetConfig {
            rows: 32,
            cols: 32,
            train: 3,
            test: 2,
            annotation: kind,
            scribble_length: 6,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn round_trip() {
        for kind in [AnnotationKind::Points, AnnotationKind::Scribble] {
            let dir = tempfile::tempdir().unwrap();
            let ds = generate_dataset(&small(kind)).unwrap();
            write_dataset(dir.path(), &ds).unwrap();
            let back = read_dataset(dir.path()).unwrap();
            assert_eq!(back, ds);
            let m: Manifest =
                serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
            let ids: std::collections::BTreeSet<_> = m.samples.iter().map(|e| e.id.clone()).collect();
            assert_eq!(ids.len(), 5);
        }
    }

    #[test]
    fn missing_mask_names_the_sample() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(&small(AnnotationKind::Points)).unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        fs::remove_file(dir.path().join("gt").join("test_0001.pgm")).unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::NotFound(_)));
        assert!(err.to_string().contains("test_0001"));
    }

    #[test]
    fn malformed_file_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(&small(AnnotationKind::Points)).unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        fs::write(dir.path().join("images").join("train_0000.pgm"), b"P5\n2 2\n").unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
        assert!(err.to_string().contains("train_0000"));
    }
}
