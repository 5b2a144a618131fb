//! Synthetic concealed-object scenes.
//!
//! Every image is a smooth procedural texture. Objects are smooth blobs made
//! by thresholding a radial falloff perturbed by low-pass noise; inside an
//! object the texture is shifted in mean by an amount proportional to the
//! scene's `contrast`, so low contrast means well-concealed objects. Pixel
//! values are quantised to multiples of 1/255 so images survive the 8-bit
//! on-disk format exactly.

mod io;

pub use io::{read_dataset, write_dataset, AnnotationFile, Manifest};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{LabeledPoint, PointLabel};
use crate::error::{ensure, Error, Result};
use crate::grid::{Grid, ProbMask};
use crate::morph;
use crate::pgm;
use crate::pseudolabel::{Scribble, ScribbleGrid, SparseAnnotation};
use crate::rng::{self, Rng};

pub const MIN_AREA_FRACTION: f64 = 0.03;
pub const MAX_AREA_FRACTION: f64 = 0.20;
/// Minimum background gap, in pixels, between two objects.
pub const OBJECT_GAP: usize = 2;
const PLACEMENT_TRIES: usize = 200;
/// Mean shift of the foreground per unit of contrast.
const CONTRAST_GAIN: f64 = 0.6;
const TEXTURE_AMPLITUDE: f64 = 0.08;
const PIXEL_NOISE: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub rows: usize,
    pub cols: usize,
    pub n_objects: usize,
    /// Foreground/background mean gap parameter in `[0, 0.5]`.
    pub contrast: f64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        ensure(self.rows >= 8 && self.cols >= 8 && self.rows.is_multiple_of(8) && self.cols.is_multiple_of(8), || {
            format!("scene dims {}x{} must be multiples of 8", self.rows, self.cols)
        })?;
        ensure((1..=3).contains(&self.n_objects), || format!("n_objects {} outside 1..=3", self.n_objects))?;
        ensure((0.0..=0.5).contains(&self.contrast), || format!("contrast {} outside [0, 0.5]", self.contrast))
    }
}

/// Zero-mean, unit-variance noise low-passed by three box blurs.
pub fn smooth_noise(rows: usize, cols: usize, radius: usize, rng: &mut Rng) -> Grid {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut g = Grid::from_fn(rows, cols, |_, _| normal.sample(rng));
    for _ in 0..3 {
        g = box_blur(&g, radius);
    }
    let mean = g.mean();
    let var = g.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / g.len() as f64;
    let sd = var.sqrt().max(1e-12);
    g.map(|v| (v - mean) / sd)
}

fn box_blur(g: &Grid, radius: usize) -> Grid {
    let (rows, cols) = g.dims();
    let ri = radius as isize;
    let at = |r: isize, c: isize| g.get(r.clamp(0, rows as isize - 1) as usize, c.clamp(0, cols as isize - 1) as usize);
    let horiz = Grid::from_fn(rows, cols, |r, c| {
        (-ri..=ri).map(|d| at(r as isize, c as isize + d)).sum::<f64>() / (2 * radius + 1) as f64
    });
    let at =
        |r: isize, c: isize| horiz.get(r.clamp(0, rows as isize - 1) as usize, c.clamp(0, cols as isize - 1) as usize);
    Grid::from_fn(rows, cols, |r, c| {
        (-ri..=ri).map(|d| at(r as isize + d, c as isize)).sum::<f64>() / (2 * radius + 1) as f64
    })
}

/// One blob of roughly `area` pixels centred near `(cr, cc)`: the connected
/// component around the centre of `{radial + 0.35 * noise > t}` where `t`
/// selects `area` pixels.
/// The centre is drawn away from the border and from `forbidden`; `None`
/// when no pixel qualifies.
fn make_blob(rows: usize, cols: usize, area: usize, forbidden: &Grid, rng: &mut Rng) -> Option<Grid> {
    let radius = (area as f64 / std::f64::consts::PI).sqrt();
    let margin = (0.8 * radius).ceil() as usize;
    let blocked = morph::dilate(forbidden, (0.5 * radius).ceil() as usize);
    let centres: Vec<(usize, usize)> = (margin..rows.saturating_sub(margin))
        .flat_map(|r| (margin..cols.saturating_sub(margin)).map(move |c| (r, c)))
        .filter(|&(r, c)| blocked.get(r, c) < 0.5)
        .collect();
    if centres.is_empty() {
        return None;
    }
    let (cr, cc) = centres[rng.random_range(0..centres.len())];
    let noise = smooth_noise(rows, cols, (radius / 2.0).ceil() as usize + 1, rng);
    let aspect = rng.random_range(0.7..1.4);
    let score = Grid::from_fn(rows, cols, |r, c| {
        let dr = (r as f64 - cr as f64) * aspect;
        let dc = (c as f64 - cc as f64) / aspect;
        1.0 - (dr * dr + dc * dc).sqrt() / radius + 0.35 * noise.get(r, c)
    });
    let mut sorted: Vec<f64> = score.data().to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let t = sorted[area.min(sorted.len()) - 1];
    let mask = score.map(|v| if v >= t { 1.0 } else { 0.0 });
    let (labels, _) = morph::label_components(&mask);
    let keep = labels[cr * cols + cc];
    let mut blob = Grid::from_fn(rows, cols, |r, c| {
        let l = labels[r * cols + c];
        if keep != 0 && l == keep {
            1.0
        } else {
            0.0
        }
    });
    fill_holes(&mut blob);
    Some(blob)
}

/// Sets every background pixel not 4-connected to the border to foreground.
fn fill_holes(g: &mut Grid) {
    let inverse = g.map(|v| if v > 0.5 { 0.0 } else { 1.0 });
    let (labels, _) = morph::label_components(&inverse);
    let (rows, cols) = g.dims();
    let mut outside = std::collections::HashSet::new();
    for r in 0..rows {
        for c in 0..cols {
            if r == 0 || c == 0 || r == rows - 1 || c == cols - 1 {
                outside.insert(labels[r * cols + c]);
            }
        }
    }
    for (v, l) in g.data_mut().iter_mut().zip(&labels) {
        if *l != 0 && !outside.contains(l) {
            *v = 1.0;
        }
    }
}

fn upsample_blocks(g: &Grid) -> Grid {
    Grid::from_fn(g.rows() * 2, g.cols() * 2, |r, c| g.get(r / 2, c / 2))
}

fn touches_border(g: &Grid) -> bool {
    let (rows, cols) = g.dims();
    (0..rows).any(|r| g.get(r, 0) > 0.5 || g.get(r, cols - 1) > 0.5)
        || (0..cols).any(|c| g.get(0, c) > 0.5 || g.get(rows - 1, c) > 0.5)
}

/// Generates one scene and its binary ground truth.
pub fn generate_sample(spec: &SceneSpec, rng: &mut Rng) -> Result<(Grid, ProbMask)> {
    spec.validate()?;
    // Shapes live on a half-resolution lattice so every mask is constant on
    // 2x2 blocks and survives a half-scale view exactly.
    let (rows, cols) = (spec.rows / 2, spec.cols / 2);
    let total = rows * cols;
    let min_area = (MIN_AREA_FRACTION * total as f64).ceil() as usize;
    // leave room for every object
    let max_frac = MAX_AREA_FRACTION.min(0.45 / spec.n_objects as f64);
    let max_area = (max_frac * total as f64).floor() as usize;

    let mut gt = Grid::zeros(rows, cols);
    let mut objects = Vec::with_capacity(spec.n_objects);
    for k in 0..spec.n_objects {
        let forbidden = morph::dilate(&gt, OBJECT_GAP / 2); // lattice units
        let mut placed = None;
        for _ in 0..PLACEMENT_TRIES {
            let target = rng.random_range(min_area..=max_area);
            let Some(blob) = make_blob(rows, cols, target, &forbidden, rng) else {
                continue;
            };
            let area = blob.data().iter().filter(|v| **v > 0.5).count();
            if area < min_area || area > (MAX_AREA_FRACTION * total as f64) as usize || touches_border(&blob) {
                continue;
            }
            if blob.data().iter().zip(forbidden.data()).any(|(b, f)| *b > 0.5 && *f > 0.5) {
                continue;
            }
            placed = Some(blob);
            break;
        }
        let blob = placed.ok_or_else(|| {
            Error::Generation(format!(
                "could not place object {} of {} in {PLACEMENT_TRIES} tries",
                k + 1,
                spec.n_objects
            ))
        })?;
        gt = gt.zip_map(&blob, f64::max)?;
        objects.push(upsample_blocks(&blob));
    }

    let gt = upsample_blocks(&gt);
    let (rows, cols) = (spec.rows, spec.cols);
    let texture = smooth_noise(rows, cols, 2, rng);
    let normal = Normal::new(0.0, PIXEL_NOISE).expect("valid std");
    let mut image = Grid::from_fn(rows, cols, |r, c| 0.5 + TEXTURE_AMPLITUDE * texture.get(r, c) + normal.sample(rng));
    for blob in &objects {
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let shift = sign * CONTRAST_GAIN * spec.contrast;
        for (v, b) in image.data_mut().iter_mut().zip(blob.data()) {
            if *b > 0.5 {
                *v += shift;
            }
        }
    }
    let image = image.map(|v| pgm::dequantize(pgm::quantize(v.clamp(0.0, 1.0))));
    Ok((image, ProbMask::new(gt)?))
}

fn region(gt: &ProbMask, label: PointLabel) -> Vec<(usize, usize)> {
    let fg = label == PointLabel::Foreground;
    let cols = gt.cols();
    gt.data().iter().enumerate().filter(|(_, v)| (**v > 0.5) == fg).map(|(i, _)| (i / cols, i % cols)).collect()
}

/// One uniformly drawn foreground point and one background point.
pub fn sample_point_annotation(gt: &ProbMask, rng: &mut Rng) -> Result<SparseAnnotation> {
    let mut points = Vec::with_capacity(2);
    for label in [PointLabel::Foreground, PointLabel::Background] {
        let pixels = region(gt, label);
        ensure(!pixels.is_empty(), || format!("ground truth has no {label:?} pixels"))?;
        let (r, c) = pixels[rng.random_range(0..pixels.len())];
        points.push(LabeledPoint::new(r, c, label));
    }
    Ok(SparseAnnotation::from_points(points))
}

const WALK_RESTARTS: usize = 200;

fn self_avoiding_walk(gt: &ProbMask, label: PointLabel, length: usize, rng: &mut Rng) -> Option<Vec<(usize, usize)>> {
    let pixels = region(gt, label);
    if pixels.is_empty() || length == 0 {
        return None;
    }
    let (rows, cols) = gt.dims();
    let inside = |r: usize, c: usize| (gt.get(r, c) > 0.5) == (label == PointLabel::Foreground);
    for _ in 0..WALK_RESTARTS {
        let start = pixels[rng.random_range(0..pixels.len())];
        let mut path = vec![start];
        let mut seen = std::collections::HashSet::from([start]);
        while path.len() < length {
            let (r, c) = *path.last().expect("path is non-empty");
            let mut next = Vec::with_capacity(4);
            if r > 0 {
                next.push((r - 1, c));
            }
            if r + 1 < rows {
                next.push((r + 1, c));
            }
            if c > 0 {
                next.push((r, c - 1));
            }
            if c + 1 < cols {
                next.push((r, c + 1));
            }
            next.retain(|&(y, x)| inside(y, x) && !seen.contains(&(y, x)));
            if next.is_empty() {
                break;
            }
            let step = next[rng.random_range(0..next.len())];
            seen.insert(step);
            path.push(step);
        }
        if path.len() == length {
            return Some(path);
        }
    }
    None
}

/// One self-avoiding random walk of `length` pixels inside the foreground
/// and one inside the background, stored as a scribble.
pub fn sample_scribble(gt: &ProbMask, rng: &mut Rng, length: usize) -> Result<SparseAnnotation> {
    let (rows, cols) = gt.dims();
    let mut s = ScribbleGrid::unknown(rows, cols);
    for (label, cell) in
        [(PointLabel::Foreground, Scribble::Foreground), (PointLabel::Background, Scribble::Background)]
    {
        let path = self_avoiding_walk(gt, label, length, rng).ok_or_else(|| {
            Error::Contract(format!("a {length}-pixel {label:?} scribble does not fit after {WALK_RESTARTS} tries"))
        })?;
        for (r, c) in path {
            s.set(r, c, cell);
        }
    }
    Ok(SparseAnnotation { points: Vec::new(), scribble: Some(s) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotationKind {
    Points,
    Scribble,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub rows: usize,
    pub cols: usize,
    pub train: usize,
    pub test: usize,
    /// Fixed object count; when absent each scene draws 1 to 3 objects.
    pub objects: Option<usize>,
    pub contrast_min: f64,
    pub contrast_max: f64,
    pub annotation: AnnotationKind,
    pub scribble_length: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            rows: 64,
            cols: 64,
            train: 200,
            test: 50,
            objects: None,
            contrast_min: 0.1,
            contrast_max: 0.3,
            annotation: AnnotationKind::Points,
            scribble_length: 12,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.train + self.test > 0, || "dataset has no samples".to_string())?;
        ensure(self.contrast_min <= self.contrast_max, || "contrast_min exceeds contrast_max".to_string())?;
        if let Some(n) = self.objects {
            ensure((1..=3).contains(&n), || format!("objects {n} outside 1..=3"))?;
        }
        SceneSpec { rows: self.rows, cols: self.cols, n_objects: 1, contrast: self.contrast_min }.validate()?;
        SceneSpec { rows: self.rows, cols: self.cols, n_objects: 1, contrast: self.contrast_max }.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub split: Split,
    pub image: Grid,
    pub gt: ProbMask,
    pub annotation: SparseAnnotation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }
}

pub fn sample_id(split: Split, index: usize) -> String {
    match split {
        Split::Train => format!("train_{index:04}"),
        Split::Test => format!("test_{index:04}"),
    }
}

/// Draws the sparse annotation of one sample. `annotation_seed` is separate
/// from the scene seed so annotations can be redrawn for the same scenes.
pub fn sample_annotation(
    gt: &ProbMask,
    id: &str,
    kind: AnnotationKind,
    scribble_length: usize,
    annotation_seed: u64,
) -> Result<SparseAnnotation> {
    let mut rng = rng::seeded(rng::derive(annotation_seed, rng::hash_str(id) ^ 0xa11));
    match kind {
        AnnotationKind::Points => sample_point_annotation(gt, &mut rng),
        AnnotationKind::Scribble => sample_scribble(gt, &mut rng, scribble_length),
    }
}

/// Generates the whole dataset. Samples are independent and generated in
/// parallel; the result depends only on the config.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let ids: Vec<(Split, String)> = (0..cfg.train)
        .map(|i| (Split::Train, sample_id(Split::Train, i)))
        .chain((0..cfg.test).map(|i| (Split::Test, sample_id(Split::Test, i))))
        .collect();
    let samples = ids
        .par_iter()
        .map(|(split, id)| {
            let mut rng = rng::seeded(rng::derive(cfg.seed, rng::hash_str(id)));
            let n_objects = cfg.objects.unwrap_or_else(|| rng.random_range(1..=3));
            let contrast = if cfg.contrast_max > cfg.contrast_min {
                rng.random_range(cfg.contrast_min..=cfg.contrast_max)
            } else {
                cfg.contrast_min
            };
            let spec = SceneSpec { rows: cfg.rows, cols: cfg.cols, n_objects, contrast };
            let (image, gt) = generate_sample(&spec, &mut rng)?;
            let annotation = sample_annotation(&gt, id, cfg.annotation, cfg.scribble_length, cfg.seed)?;
            Ok(Sample { id: id.clone(), split: *split, image, gt, annotation })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { config: *cfg, samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn spec(n: usize, contrast: f64) -> SceneSpec {
        SceneSpec { rows: 64, cols: 64, n_objects: n, contrast }
    }

    fn region_means(img: &Grid, gt: &ProbMask) -> (f64, f64) {
        let (mut fs, mut fn_, mut bs, mut bn) = (0.0, 0.0, 0.0, 0.0);
        for (v, g) in img.data().iter().zip(gt.data()) {
            if *g > 0.5 {
                fs += v;
                fn_ += 1.0;
            } else {
                bs += v;
                bn += 1.0;
            }
        }
        (fs / fn_, bs / bn)
    }

    #[test]
    fn objects_are_counted_sized_and_separated() {
        for n in 1..=3 {
            for seed in 0..10 {
                let (img, gt) = generate_sample(&spec(n, 0.3), &mut seeded(seed)).unwrap();
                assert!(gt.is_binary());
                assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
                let (labels, count) = morph::label_components(gt.grid());
                assert_eq!(count, n, "seed {seed}");
                for k in 1..=count as u32 {
                    let area = labels.iter().filter(|l| **l == k).count() as f64 / 4096.0;
                    assert!((MIN_AREA_FRACTION..=MAX_AREA_FRACTION).contains(&area), "area {area}");
                }
                // pixels of different objects are at least OBJECT_GAP + 1 apart (chessboard)
                let pix: Vec<(usize, usize, u32)> =
                    labels.iter().enumerate().filter(|(_, l)| **l != 0).map(|(i, l)| (i / 64, i % 64, *l)).collect();
                for a in &pix {
                    for b in pix.iter().filter(|b| b.2 > a.2) {
                        assert!(a.0.abs_diff(b.0).max(a.1.abs_diff(b.1)) > OBJECT_GAP, "seed {seed}");
                    }
                }
            }
        }
    }

    #[test]
    fn contrast_controls_the_mean_gap() {
        let (mut hi, mut lo) = (0.0, 0.0);
        for seed in 0..100 {
            let (img, gt) = generate_sample(&spec(1, 0.5), &mut seeded(seed)).unwrap();
            let (f, b) = region_means(&img, &gt);
            hi += (f - b).abs();
            let (img, gt) = generate_sample(&spec(1, 0.0), &mut seeded(seed)).unwrap();
            let (f, b) = region_means(&img, &gt);
            lo += f - b;
        }
        assert!(hi / 100.0 >= 0.2);
        assert!((lo / 100.0).abs() < 0.02);
    }

    #[test]
    fn determinism_and_quantisation() {
        let a = generate_sample(&spec(2, 0.2), &mut seeded(4)).unwrap();
        let b = generate_sample(&spec(2, 0.2), &mut seeded(4)).unwrap();
        assert_eq!(a, b);
        assert!(a.0.data().iter().all(|v| pgm::dequantize(pgm::quantize(*v)) == *v));
    }

    #[test]
    fn point_annotations_are_valid() {
        let (_, gt) = generate_sample(&spec(2, 0.2), &mut seeded(1)).unwrap();
        let mut seen = std::collections::HashSet::new();
        for seed in 0..5 {
            let ann = sample_point_annotation(&gt, &mut seeded(seed)).unwrap();
            assert_eq!(ann.points.len(), 2);
            assert_eq!(gt.get(ann.points[0].row, ann.points[0].col), 1.0);
            assert_eq!(gt.get(ann.points[1].row, ann.points[1].col), 0.0);
            seen.insert(ann.points.clone());
        }
        assert!(seen.len() > 1);
        let all_bg = ProbMask::filled(8, 8, 0.0).unwrap();
        assert!(sample_point_annotation(&all_bg, &mut seeded(0)).unwrap_err().is_contract());
    }

    #[test]
    fn scribbles_stay_in_their_regions() {
        let (_, gt) = generate_sample(&spec(1, 0.2), &mut seeded(2)).unwrap();
        let ann = sample_scribble(&gt, &mut seeded(3), 15).unwrap();
        let s = ann.scribble.as_ref().unwrap();
        assert_eq!(s.count(PointLabel::Foreground), 15);
        assert_eq!(s.count(PointLabel::Background), 15);
        for r in 0..64 {
            for c in 0..64 {
                match s.get(r, c) {
                    Scribble::Foreground => assert_eq!(gt.get(r, c), 1.0),
                    Scribble::Background => assert_eq!(gt.get(r, c), 0.0),
                    Scribble::Unknown => {}
                }
            }
        }
        let pts = crate::pseudolabel::nine_box_points(s, PointLabel::Foreground, &mut seeded(0)).unwrap();
        assert!((1..=9).contains(&pts.len()));
        assert!(pts.iter().all(|p| s.get(p.row, p.col) == Scribble::Foreground));
        let tiny = ProbMask::from_vec(8, 8, (0..64).map(|i| if i == 27 { 1.0 } else { 0.0 }).collect()).unwrap();
        assert!(sample_scribble(&tiny, &mut seeded(0), 5).unwrap_err().is_contract());
    }

    #[test]
    fn invalid_specs() {
        assert!(generate_sample(&SceneSpec { rows: 60, ..spec(1, 0.1) }, &mut seeded(0)).unwrap_err().is_contract());
        assert!(generate_sample(&spec(4, 0.1), &mut seeded(0)).unwrap_err().is_contract());
        assert!(generate_sample(&spec(1, 0.7), &mut seeded(0)).unwrap_err().is_contract());
    }
}
