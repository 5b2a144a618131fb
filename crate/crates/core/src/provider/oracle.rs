use std::collections::HashMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{check_prompts, MaskProvider, ViewRequest};
use crate::augment::{apply_grid, Interpolation, LabeledPoint};
use crate::error::{ensure, Error, Result};
use crate::grid::{Grid, ProbMask};
use crate::morph;
use crate::rng::{self, Fnv64};

/// Noise model of the synthetic segmenter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    /// Maximum radius of the random dilation or erosion applied per call.
    pub boundary_jitter: usize,
    /// Probability that the jitter shrinks the mask instead of growing it.
    /// Segmenters on low-contrast objects mostly leak into look-alike
    /// background, so shrinking is the rarer failure by default.
    pub erode_rate: f64,
    /// Probability that an unprompted object is missed.
    pub dropout_rate: f64,
    /// Probability that one spurious blob is added.
    pub fp_rate: f64,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig { boundary_jitter: 2, erode_rate: 0.1, dropout_rate: 0.3, fp_rate: 0.1, seed: 0 }
    }
}

impl OracleConfig {
    pub fn noiseless(seed: u64) -> Self {
        OracleConfig { boundary_jitter: 0, erode_rate: 0.0, dropout_rate: 0.0, fp_rate: 0.0, seed }
    }

    pub fn validate(&self) -> Result<()> {
        ensure((0.0..=1.0).contains(&self.erode_rate), || format!("erode_rate {} outside [0, 1]", self.erode_rate))?;
        ensure((0.0..=1.0).contains(&self.dropout_rate), || {
            format!("dropout_rate {} outside [0, 1]", self.dropout_rate)
        })?;
        ensure((0.0..=1.0).contains(&self.fp_rate), || format!("fp_rate {} outside [0, 1]", self.fp_rate))
    }
}

fn call_seed(gt: &Grid, prompts: &[LabeledPoint], seed: u64) -> u64 {
    let mut h = Fnv64::default();
    h.write_u64(gt.rows() as u64);
    h.write_u64(gt.cols() as u64);
    for v in gt.data() {
        h.write_u64(v.to_bits());
    }
    for p in prompts {
        h.write_u64(p.row as u64);
        h.write_u64(p.col as u64);
        h.write_u64(u64::from(p.is_foreground()));
    }
    rng::derive(seed, h.finish())
}

/// Perturbs a binary ground-truth mask the way an unreliable promptable
/// segmenter would:
///
/// 1. every object not touched by a foreground prompt is dropped with
///    probability `dropout_rate`;
/// 2. the result is grown or shrunk by a radius drawn uniformly from
///    `0..=jitter`, shrinking with probability `erode_rate`;
/// 3. with probability `fp_rate` a disk disjoint from the ground truth is
///    added.
///
/// The output is binary and a pure function of `(gt, prompts, cfg)`.
pub fn oracle_segment(gt: &ProbMask, prompts: &[LabeledPoint], cfg: &OracleConfig) -> Result<ProbMask> {
    cfg.validate()?;
    ensure(gt.is_binary(), || "oracle ground truth must be binary".to_string())?;
    check_prompts(gt.dims(), prompts)?;
    let mut rng = rng::seeded(call_seed(gt.grid(), prompts, cfg.seed));
    let (rows, cols) = gt.dims();

    let (labels, n) = morph::label_components(gt.grid());
    let mut protected = vec![false; n + 1];
    for p in prompts.iter().filter(|p| p.is_foreground()) {
        protected[labels[p.row * cols + p.col] as usize] = true;
    }
    let mut keep = vec![false; n + 1];
    for (id, k) in keep.iter_mut().enumerate().skip(1) {
        // always draw so the stream does not depend on which blobs are protected
        let dropped = rng.random_bool(cfg.dropout_rate);
        *k = protected[id] || !dropped;
    }
    let mut out = Grid::from_fn(rows, cols, |r, c| {
        let l = labels[r * cols + c] as usize;
        if l != 0 && keep[l] {
            1.0
        } else {
            0.0
        }
    });

    let radius = rng.random_range(0..=cfg.boundary_jitter);
    if rng.random_bool(cfg.erode_rate) {
        out = morph::erode(&out, radius);
    } else {
        out = morph::dilate(&out, radius);
    }

    if rng.random_bool(cfg.fp_rate) {
        let forbidden = morph::dilate(gt.grid(), 1);
        let min_dim = rows.min(cols);
        let r_lo = (min_dim / 16).max(1);
        let r_hi = (min_dim / 8).max(r_lo + 1);
        for _ in 0..64 {
            let rad = rng.random_range(r_lo..=r_hi) as f64;
            let cy = rng.random_range(0..rows) as f64;
            let cx = rng.random_range(0..cols) as f64;
            let disk: Vec<usize> = (0..rows * cols)
                .filter(|i| {
                    let (y, x) = ((i / cols) as f64, (i % cols) as f64);
                    (y - cy).powi(2) + (x - cx).powi(2) <= rad * rad
                })
                .collect();
            if !disk.is_empty() && disk.iter().all(|&i| forbidden.data()[i] <= 0.5) {
                for i in disk {
                    out.data_mut()[i] = 1.0;
                }
                break;
            }
        }
    }
    ProbMask::new(out)
}

/// Serves perturbed ground truth for known images. The ground truth is
/// carried into each view's frame with the view's augmentation.
#[derive(Debug, Clone)]
pub struct OracleProvider {
    gts: HashMap<String, ProbMask>,
    cfg: OracleConfig,
}

impl OracleProvider {
    pub fn new(cfg: OracleConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(OracleProvider { gts: HashMap::new(), cfg })
    }

    pub fn with_ground_truth(mut self, id: impl Into<String>, gt: ProbMask) -> Self {
        self.gts.insert(id.into(), gt);
        self
    }

    pub fn insert(&mut self, id: impl Into<String>, gt: ProbMask) {
        self.gts.insert(id.into(), gt);
    }

    pub fn config(&self) -> &OracleConfig {
        &self.cfg
    }
}

impl MaskProvider for OracleProvider {
    fn segment(&self, req: &ViewRequest<'_>) -> Result<ProbMask> {
        check_prompts(req.image.dims(), req.prompts)?;
        let gt = self
            .gts
            .get(req.image_id)
            .ok_or_else(|| Error::Provider(format!("oracle has no ground truth for {:?}", req.image_id)))?;
        let aug = ProbMask::new(apply_grid(gt.grid(), &req.spec, Interpolation::Nearest)?)?;
        ensure(aug.dims() == req.image.dims(), || {
            format!("view dims {:?} do not match augmented ground truth {:?}", req.image.dims(), aug.dims())
        })?;
        let mut h = Fnv64::default();
        for v in req.image.data() {
            h.write_u64(v.to_bits());
        }
        let cfg = OracleConfig { seed: rng::derive(self.cfg.seed, h.finish()), ..self.cfg };
        oracle_segment(&aug, req.prompts, &cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::PointLabel;

    fn two_blobs() -> ProbMask {
        ProbMask::new(Grid::from_fn(16, 16, |r, c| {
            let a = (2..6).contains(&r) && (2..6).contains(&c);
            let b = (10..14).contains(&r) && (10..14).contains(&c);
            if a || b {
                1.0
            } else {
                0.0
            }
        }))
        .unwrap()
    }

    fn prompts() -> Vec<LabeledPoint> {
        vec![LabeledPoint::new(3, 3, PointLabel::Foreground), LabeledPoint::new(8, 0, PointLabel::Background)]
    }

    #[test]
    fn noiseless_returns_ground_truth() {
        let gt = two_blobs();
        assert_eq!(oracle_segment(&gt, &prompts(), &OracleConfig::noiseless(5)).unwrap(), gt);
    }

    #[test]
    fn full_dropout_keeps_only_prompted_blob() {
        let gt = two_blobs();
        let cfg = OracleConfig { dropout_rate: 1.0, ..OracleConfig::noiseless(1) };
        let out = oracle_segment(&gt, &prompts(), &cfg).unwrap();
        for r in 0..16 {
            for c in 0..16 {
                let in_a = (2..6).contains(&r) && (2..6).contains(&c);
                assert_eq!(out.get(r, c), if in_a { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn jitter_one_on_square_stays_within_morphology_bounds() {
        let gt =
            ProbMask::new(Grid::from_fn(
                12,
                12,
                |r, c| {
                    if (3..9).contains(&r) && (3..9).contains(&c) {
                        1.0
                    } else {
                        0.0
                    }
                },
            ))
            .unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for seed in 0..40 {
            let cfg = OracleConfig { boundary_jitter: 1, erode_rate: 0.5, ..OracleConfig::noiseless(seed) };
            let p = vec![LabeledPoint::new(5, 5, PointLabel::Foreground)];
            let area = oracle_segment(&gt, &p, &cfg).unwrap().foreground_count();
            assert!((16..=64).contains(&area), "area {area}");
            seen.insert(area);
        }
        // erosion, identity and dilation all occur
        assert_eq!(seen.into_iter().collect::<Vec<_>>(), vec![16, 36, 64]);
    }

    #[test]
    fn forced_false_positive_is_disjoint_from_ground_truth() {
        let gt = two_blobs();
        let cfg = OracleConfig { fp_rate: 1.0, ..OracleConfig::noiseless(2) };
        let out = oracle_segment(&gt, &prompts(), &cfg).unwrap();
        let (labels, n) = morph::label_components(out.grid());
        let disjoint = (1..=n as u32).any(|l| labels.iter().zip(gt.data()).all(|(lab, g)| *lab != l || *g == 0.0));
        assert!(disjoint);
        assert!(out.is_binary());
    }

    #[test]
    fn deterministic_and_binary() {
        let gt = two_blobs();
        let cfg = OracleConfig { boundary_jitter: 2, erode_rate: 0.5, dropout_rate: 0.5, fp_rate: 0.5, seed: 9 };
        let a = oracle_segment(&gt, &prompts(), &cfg).unwrap();
        let b = oracle_segment(&gt, &prompts(), &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.is_binary());
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = OracleConfig { dropout_rate: 1.5, ..OracleConfig::default() };
        assert!(oracle_segment(&two_blobs(), &prompts(), &cfg).is_err());
    }
}
