//! Segmentation metrics: mean absolute error, adaptive F-measure and IoU.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::grid::ProbMask;

/// Weight of precision in the F-measure.
pub const BETA_SQ: f64 = 0.3;

fn same_dims(pred: &ProbMask, gt: &ProbMask) -> Result<()> {
    ensure(pred.dims() == gt.dims(), || format!("prediction {:?} vs ground truth {:?}", pred.dims(), gt.dims()))
}

pub fn mae(pred: &ProbMask, gt: &ProbMask) -> Result<f64> {
    same_dims(pred, gt)?;
    let n = pred.data().len() as f64;
    Ok(pred.data().iter().zip(gt.data()).map(|(p, g)| (p - g).abs()).sum::<f64>() / n)
}

/// F-measure after binarising `pred` at `min(1, 2 * mean(pred))`. A pixel is
/// positive when it reaches the threshold and is non-zero, so an all-zero
/// prediction has no positives.
pub fn adaptive_fbeta(pred: &ProbMask, gt: &ProbMask) -> Result<f64> {
    same_dims(pred, gt)?;
    let fg = gt.data().iter().filter(|g| **g > 0.5).count();
    ensure(fg > 0, || "adaptive F-measure needs at least one foreground pixel".to_string())?;
    let mean = pred.data().iter().sum::<f64>() / pred.data().len() as f64;
    let threshold = (2.0 * mean).min(1.0);
    let (mut tp, mut pos) = (0usize, 0usize);
    for (p, g) in pred.data().iter().zip(gt.data()) {
        if *p >= threshold && *p > 0.0 {
            pos += 1;
            if *g > 0.5 {
                tp += 1;
            }
        }
    }
    if tp == 0 {
        return Ok(0.0);
    }
    let precision = tp as f64 / pos as f64;
    let recall = tp as f64 / fg as f64;
    Ok((1.0 + BETA_SQ) * precision * recall / (BETA_SQ * precision + recall))
}

/// `|pred > t AND gt| / |pred > t OR gt|`, 1 when both are empty.
pub fn iou_score(pred: &ProbMask, gt: &ProbMask, threshold: f64) -> Result<f64> {
    same_dims(pred, gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (p, g) in pred.data().iter().zip(gt.data()) {
        let a = *p > threshold;
        let b = *g > 0.5;
        inter += usize::from(a && b);
        union += usize::from(a || b);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub mae: f64,
    pub f_beta: f64,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mae: f64,
    pub f_beta: f64,
    pub iou: f64,
    pub per_image: Vec<(String, ImageMetrics)>,
}

pub fn image_metrics(pred: &ProbMask, gt: &ProbMask) -> Result<ImageMetrics> {
    Ok(ImageMetrics { mae: mae(pred, gt)?, f_beta: adaptive_fbeta(pred, gt)?, iou: iou_score(pred, gt, 0.5)? })
}

impl MetricReport {
    /// Aggregates per-image metrics by their mean.
    pub fn from_images(per_image: Vec<(String, ImageMetrics)>) -> Result<Self> {
        ensure(!per_image.is_empty(), || "metric report over zero images".to_string())?;
        let n = per_image.len() as f64;
        let sum = |f: fn(&ImageMetrics) -> f64| per_image.iter().map(|(_, m)| f(m)).sum::<f64>() / n;
        Ok(MetricReport { mae: sum(|m| m.mae), f_beta: sum(|m| m.f_beta), iou: sum(|m| m.iou), per_image })
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<16} {:>8} {:>8} {:>8}", "image", "MAE", "F_beta", "IoU");
        for (id, m) in &self.per_image {
            let _ = writeln!(s, "{:<16} {:>8.4} {:>8.4} {:>8.4}", id, m.mae, m.f_beta, m.iou);
        }
        let _ = writeln!(s, "{:<16} {:>8.4} {:>8.4} {:>8.4}", "mean", self.mae, self.f_beta, self.iou);
        s
    }

    /// Writes `metrics.json` and `metrics.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(self)?)?;
        std::fs::write(dir.join("metrics.txt"), self.table())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(rows: usize, cols: usize, v: &[f64]) -> ProbMask {
        ProbMask::from_vec(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn mae_cases() {
        let gt = mask(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(mae(&gt, &gt).unwrap(), 0.0);
        assert_eq!(mae(&ProbMask::filled(2, 2, 0.5).unwrap(), &gt).unwrap(), 0.5);
        assert!(mae(&ProbMask::filled(2, 3, 0.5).unwrap(), &gt).unwrap_err().is_contract());
    }

    #[test]
    fn fbeta_cases() {
        let gt = mask(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(adaptive_fbeta(&gt, &gt).unwrap(), 1.0);
        assert_eq!(adaptive_fbeta(&ProbMask::filled(2, 2, 0.0).unwrap(), &gt).unwrap(), 0.0);
        let empty = ProbMask::filled(2, 2, 0.0).unwrap();
        assert!(adaptive_fbeta(&gt, &empty).unwrap_err().is_contract());
    }

    #[test]
    fn fbeta_for_large_foreground() {
        // foreground covers more than half the image: threshold clamps to 1
        let gt = mask(2, 2, &[1.0, 1.0, 1.0, 0.0]);
        assert_eq!(adaptive_fbeta(&gt, &gt).unwrap(), 1.0);
    }

    #[test]
    fn fbeta_closed_form() {
        // 10x10: gt has 5 foreground pixels; prediction marks 8 pixels, 4 of
        // them on the foreground, so P = 0.5 and R = 0.8.
        let mut gt = vec![0.0; 100];
        let mut pred = vec![0.0; 100];
        for v in gt.iter_mut().take(5) {
            *v = 1.0;
        }
        for v in pred.iter_mut().take(4) {
            *v = 1.0;
        }
        for v in pred.iter_mut().skip(10).take(4) {
            *v = 1.0;
        }
        let f = adaptive_fbeta(&mask(10, 10, &pred), &mask(10, 10, &gt)).unwrap();
        let expected = 1.3 * 0.5 * 0.8 / (0.3 * 0.5 + 0.8);
        assert!((f - expected).abs() < 1e-12);
        assert!((f - 0.5474).abs() < 1e-4);
    }

    #[test]
    fn iou_cases() {
        let a = mask(1, 4, &[1.0, 1.0, 0.0, 0.0]);
        let b = mask(1, 4, &[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(iou_score(&a, &a, 0.5).unwrap(), 1.0);
        assert_eq!(iou_score(&a, &b, 0.5).unwrap(), 0.0);
        let z = ProbMask::filled(1, 4, 0.0).unwrap();
        assert_eq!(iou_score(&z, &z, 0.5).unwrap(), 1.0);
        // 4x4 squares offset by half their width: overlap 8, union 24
        let sq = |off: usize| {
            ProbMask::new(crate::grid::Grid::from_fn(8, 8, |r, c| {
                if r < 4 && (off..off + 4).contains(&c) {
                    1.0
                } else {
                    0.0
                }
            }))
            .unwrap()
        };
        let iou = iou_score(&sq(0), &sq(2), 0.5).unwrap();
        assert!((iou - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn report_aggregates_means() {
        let m = |v: f64| ImageMetrics { mae: v, f_beta: v, iou: v };
        let r = MetricReport::from_images(vec![("a".into(), m(0.2)), ("b".into(), m(0.4))]).unwrap();
        assert!((r.mae - 0.3).abs() < 1e-15);
        assert!(r.table().contains("mean"));
    }
}
