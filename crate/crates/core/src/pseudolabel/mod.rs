//! Pseudo-label refinement: fuse provider masks over augmented views, weight
//! pixels by their binary entropy, and decide per image whether the mask is
//! trustworthy enough to supervise dense losses.

mod ninebox;
mod pipeline;

pub use ninebox::nine_box_points;
pub use pipeline::{
    export_views, generate_all, generate_pseudo_label, plan_views, read_label, write_label, LabelMeta, PipelineOutput,
    ViewPlan,
};

use serde::{Deserialize, Serialize};

use crate::augment::{LabeledPoint, PointLabel};
use crate::error::{ensure, Result};
use crate::grid::{Grid, ProbMask};

/// One cell of a scribble annotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scribble {
    Unknown,
    Foreground,
    Background,
}

impl Scribble {
    pub fn label(self) -> Option<PointLabel> {
        match self {
            Scribble::Unknown => None,
            Scribble::Foreground => Some(PointLabel::Foreground),
            Scribble::Background => Some(PointLabel::Background),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScribbleGrid {
    rows: usize,
    cols: usize,
    cells: Vec<Scribble>,
}

impl ScribbleGrid {
    pub fn unknown(rows: usize, cols: usize) -> Self {
        ScribbleGrid { rows, cols, cells: vec![Scribble::Unknown; rows * cols] }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, r: usize, c: usize) -> Scribble {
        self.cells[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: Scribble) {
        self.cells[r * self.cols + c] = v;
    }

    pub fn cells(&self) -> &[Scribble] {
        &self.cells
    }

    pub fn count(&self, label: PointLabel) -> usize {
        self.cells.iter().filter(|s| s.label() == Some(label)).count()
    }

    /// Encodes as a grid: foreground 1, background 0, unknown 0.5.
    pub fn to_grid(&self) -> Grid {
        Grid::new(
            self.rows,
            self.cols,
            self.cells
                .iter()
                .map(|s| match s {
                    Scribble::Foreground => 1.0,
                    Scribble::Background => 0.0,
                    Scribble::Unknown => 0.5,
                })
                .collect(),
        )
        .expect("dims are consistent")
    }

    pub fn from_grid(g: &Grid) -> Self {
        let cells = g
            .data()
            .iter()
            .map(|v| {
                if *v > 0.75 {
                    Scribble::Foreground
                } else if *v < 0.25 {
                    Scribble::Background
                } else {
                    Scribble::Unknown
                }
            })
            .collect();
        ScribbleGrid { rows: g.rows(), cols: g.cols(), cells }
    }
}

/// Sparse supervision for one image: labelled points and/or a scribble.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseAnnotation {
    pub points: Vec<LabeledPoint>,
    pub scribble: Option<ScribbleGrid>,
}

impl SparseAnnotation {
    pub fn from_points(points: Vec<LabeledPoint>) -> Self {
        SparseAnnotation { points, scribble: None }
    }

    pub fn validate(&self, dims: (usize, usize)) -> Result<()> {
        for p in &self.points {
            ensure(p.row < dims.0 && p.col < dims.1, || {
                format!("annotation point ({}, {}) outside {}x{}", p.row, p.col, dims.0, dims.1)
            })?;
        }
        if let Some(s) = &self.scribble {
            ensure(s.dims() == dims, || format!("scribble dims {:?} != image dims {:?}", s.dims(), dims))?;
        }
        let has_fg = self.points.iter().any(LabeledPoint::is_foreground)
            || self.scribble.as_ref().is_some_and(|s| s.count(PointLabel::Foreground) > 0);
        ensure(has_fg, || "annotation has no foreground cue".to_string())
    }

    /// Per-pixel target and weight for the partial cross-entropy: labelled
    /// pixels get weight 1 and their label as target.
    pub fn dense_targets(&self, dims: (usize, usize)) -> (Vec<f64>, Vec<f64>) {
        let n = dims.0 * dims.1;
        let mut target = vec![0.0; n];
        let mut weight = vec![0.0; n];
        if let Some(s) = &self.scribble {
            for (i, cell) in s.cells().iter().enumerate() {
                if let Some(l) = cell.label() {
                    weight[i] = 1.0;
                    target[i] = if l == PointLabel::Foreground { 1.0 } else { 0.0 };
                }
            }
        }
        for p in &self.points {
            let i = p.row * dims.1 + p.col;
            weight[i] = 1.0;
            target[i] = if p.is_foreground() { 1.0 } else { 0.0 };
        }
        (target, weight)
    }
}

/// Which refinement stages run; all on by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stages {
    /// Multi-view fusion; when off a single un-augmented view is used.
    pub fusion: bool,
    /// Entropy down-weighting of the fused mask.
    pub pixel_weighting: bool,
    /// Image-level keep/reject decision.
    pub image_selection: bool,
}

impl Default for Stages {
    fn default() -> Self {
        Stages { fusion: true, pixel_weighting: true, image_selection: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Number of augmented views.
    pub k: usize,
    pub tau_a: f64,
    pub tau_r: f64,
    /// Entropy above which a pixel counts as high-uncertainty.
    pub theta_h: f64,
    pub seed: u64,
    pub stages: Stages,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig { k: 12, tau_a: 0.1, tau_r: 0.5, theta_h: 0.9, seed: 0, stages: Stages::default() }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.k >= 1, || "pipeline k must be at least 1".to_string())?;
        for (name, v) in [("tau_a", self.tau_a), ("tau_r", self.tau_r), ("theta_h", self.theta_h)] {
            ensure(v > 0.0 && v <= 1.0, || format!("{name} = {v} outside (0, 1]"))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyStats {
    /// Fraction of high-uncertainty pixels over all pixels.
    pub u_a: f64,
    /// High-uncertainty pixels over high-uncertainty plus confident foreground.
    pub u_r: f64,
    pub high_count: usize,
    pub conf_fg_count: usize,
}

/// The refined label of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub weighted_mask: ProbMask,
    pub fused: ProbMask,
    pub entropy: Grid,
    pub kept: bool,
}

impl PseudoLabel {
    /// The dense target, if the image passed selection.
    pub fn target(&self) -> Option<&ProbMask> {
        self.kept.then_some(&self.weighted_mask)
    }
}

/// Per-pixel mean of equally sized masks.
pub fn fuse(masks: &[ProbMask]) -> Result<ProbMask> {
    ensure(!masks.is_empty(), || "fuse needs at least one mask".to_string())?;
    let dims = masks[0].dims();
    for m in masks {
        ensure(m.dims() == dims, || format!("fuse: mask dims {:?} vs {:?}", m.dims(), dims))?;
    }
    let n = masks.len() as f64;
    let mut acc = vec![0.0; dims.0 * dims.1];
    for m in masks {
        acc.iter_mut().zip(m.data()).for_each(|(a, v)| *a += v);
    }
    // guard the [0, 1] invariant against rounding in the sum
    ProbMask::from_vec(dims.0, dims.1, acc.into_iter().map(|v| (v / n).clamp(0.0, 1.0)).collect())
}

/// Binary entropy in bits, with `0 log 0 = 0`.
pub fn binary_entropy(p: f64) -> f64 {
    let term = |q: f64| if q <= 0.0 { 0.0 } else { -q * q.log2() };
    (term(p) + term(1.0 - p)).clamp(0.0, 1.0)
}

pub fn entropy_map(fused: &ProbMask) -> Grid {
    fused.grid().map(binary_entropy)
}

pub fn uncertainty_stats(entropy: &Grid, fused: &ProbMask, theta_h: f64) -> Result<UncertaintyStats> {
    ensure(entropy.dims() == fused.dims(), || format!("entropy {:?} vs fused {:?}", entropy.dims(), fused.dims()))?;
    let mut high = 0;
    let mut conf_fg = 0;
    for (e, p) in entropy.data().iter().zip(fused.data()) {
        if *e > theta_h {
            high += 1;
        } else if *p > 0.5 {
            conf_fg += 1;
        }
    }
    let total = entropy.len();
    Ok(UncertaintyStats {
        u_a: high as f64 / total as f64,
        u_r: high as f64 / (high + conf_fg).max(1) as f64,
        high_count: high,
        conf_fg_count: conf_fg,
    })
}

/// Keep the image iff both uncertainties are strictly below their thresholds.
pub fn select_image(stats: &UncertaintyStats, cfg: &PipelineConfig) -> bool {
    stats.u_a < cfg.tau_a && stats.u_r < cfg.tau_r
}

/// `(1 - entropy) * fused`, with the keep decision attached.
pub fn refine(fused: &ProbMask, entropy: &Grid, kept: bool) -> Result<PseudoLabel> {
    let weighted = fused.grid().zip_map(entropy, |p, e| ((1.0 - e) * p).clamp(0.0, 1.0))?;
    Ok(PseudoLabel { weighted_mask: ProbMask::new(weighted)?, fused: fused.clone(), entropy: entropy.clone(), kept })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(rows: usize, cols: usize, v: &[f64]) -> ProbMask {
        ProbMask::from_vec(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn fuse_examples() {
        let m = mask(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(fuse(&vec![m.clone(); 12]).unwrap(), m);
        let a = mask(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let b = mask(2, 2, &[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(fuse(&[a, b]).unwrap().data(), &[0.0, 1.0, 0.5, 0.5]);
        assert!(fuse(&[]).unwrap_err().is_contract());
        assert!(fuse(&[mask(1, 2, &[0.0, 0.0]), mask(2, 1, &[0.0, 0.0])]).unwrap_err().is_contract());
    }

    #[test]
    fn entropy_examples() {
        assert!((binary_entropy(0.5) - 1.0).abs() < 1e-12);
        assert_eq!(binary_entropy(0.0), 0.0);
        assert_eq!(binary_entropy(1.0), 0.0);
        assert!((binary_entropy(0.11) - 0.4999).abs() < 1e-3);
    }

    #[test]
    fn stats_examples() {
        let fused = mask(1, 4, &[0.0, 1.0, 1.0, 0.0]);
        let s = uncertainty_stats(&entropy_map(&fused), &fused, 0.9).unwrap();
        assert_eq!((s.u_a, s.u_r), (0.0, 0.0));

        let fused = ProbMask::filled(4, 4, 0.5).unwrap();
        let s = uncertainty_stats(&entropy_map(&fused), &fused, 0.9).unwrap();
        assert_eq!((s.u_a, s.u_r), (1.0, 1.0));

        // 100 pixels: 8 at p = 0.5, 24 confident foreground, rest background
        let mut v = vec![0.0; 100];
        v[..8].iter_mut().for_each(|x| *x = 0.5);
        v[8..32].iter_mut().for_each(|x| *x = 1.0);
        let fused = mask(10, 10, &v);
        let s = uncertainty_stats(&entropy_map(&fused), &fused, 0.9).unwrap();
        assert_eq!((s.high_count, s.conf_fg_count), (8, 24));
        assert!((s.u_a - 0.08).abs() < 1e-15);
        assert!((s.u_r - 0.25).abs() < 1e-15);
    }

    #[test]
    fn threshold_is_strict() {
        let fused = mask(1, 1, &[0.3]);
        let e = Grid::new(1, 1, vec![0.9]).unwrap();
        assert_eq!(uncertainty_stats(&e, &fused, 0.9).unwrap().high_count, 0);
    }

    #[test]
    fn selection_examples() {
        let cfg = PipelineConfig::default();
        let st = |u_a, u_r| UncertaintyStats { u_a, u_r, high_count: 0, conf_fg_count: 0 };
        assert!(select_image(&st(0.05, 0.3), &cfg));
        assert!(!select_image(&st(0.15, 0.3), &cfg));
        assert!(!select_image(&st(0.05, 0.6), &cfg));
    }

    #[test]
    fn refine_examples() {
        let fused = mask(1, 3, &[1.0, 0.5, 0.75]);
        let e = entropy_map(&fused);
        let l = refine(&fused, &e, true).unwrap();
        assert_eq!(l.weighted_mask.data()[0], 1.0);
        assert!(l.weighted_mask.data()[1].abs() < 1e-12);
        assert!((e.data()[2] - 0.8113).abs() < 1e-4);
        assert!((l.weighted_mask.data()[2] - 0.1415).abs() < 1e-4);
        assert!(l.target().is_some());
        assert!(refine(&fused, &e, false).unwrap().target().is_none());
    }

    #[test]
    fn high_uncertainty_vote_counts_for_twelve_views() {
        // brute-force: a pixel with k positive votes out of 12 has p = k / 12
        let high: Vec<usize> = (0..=12).filter(|k| binary_entropy(*k as f64 / 12.0) > 0.9).collect();
        assert_eq!(high, vec![4, 5, 6, 7, 8]);
    }

    #[test]
    fn annotation_validation() {
        let fg = LabeledPoint::new(0, 0, PointLabel::Foreground);
        let bg = LabeledPoint::new(1, 1, PointLabel::Background);
        assert!(SparseAnnotation::from_points(vec![fg, bg]).validate((2, 2)).is_ok());
        assert!(SparseAnnotation::from_points(vec![bg]).validate((2, 2)).is_err());
        assert!(SparseAnnotation::from_points(vec![fg]).validate((1, 1)).is_ok());
        let ann = SparseAnnotation { points: vec![], scribble: Some(ScribbleGrid::unknown(3, 3)) };
        assert!(ann.validate((2, 2)).is_err());
    }

    proptest! {
        #[test]
        fn entropy_is_symmetric_and_bounded(p in 0.0f64..=1.0) {
            let h = binary_entropy(p);
            prop_assert!((0.0..=1.0).contains(&h));
            prop_assert!((h - binary_entropy(1.0 - p)).abs() < 1e-12);
        }

        #[test]
        fn fuse_is_permutation_invariant(seed in any::<u64>(), n in 1usize..6) {
            let masks: Vec<ProbMask> = (0..n)
                .map(|k| {
                    let v = (0..6).map(|i| (crate::rng::derive(seed, (k * 6 + i) as u64) % 1000) as f64 / 999.0).collect::<Vec<f64>>();
                    mask(2, 3, &v)
                })
                .collect();
            let mut rev = masks.clone();
            rev.reverse();
            let a = fuse(&masks).unwrap();
            let b = fuse(&rev).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() < 1e-15);
            }
        }

        #[test]
        fn lowering_thresholds_never_keeps_a_rejected_image(
            u_a in 0.0f64..1.0, u_r in 0.0f64..1.0, ta in 0.01f64..1.0, tr in 0.01f64..1.0, f in 0.0f64..1.0,
        ) {
            let st = UncertaintyStats { u_a, u_r, high_count: 0, conf_fg_count: 0 };
            let hi = PipelineConfig { tau_a: ta, tau_r: tr, ..PipelineConfig::default() };
            let lo = PipelineConfig { tau_a: ta * f, tau_r: tr * f, ..PipelineConfig::default() };
            if !select_image(&st, &hi) {
                prop_assert!(!select_image(&st, &lo));
            }
        }
    }
}
