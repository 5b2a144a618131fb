//! The micro encoder, grouping bottleneck and decoder segmenter, its losses,
//! training loop and checkpoint format.

mod checkpoint;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, ArchFile, CHECKPOINT_FILE, CHECKPOINT_VERSION};
pub use train::{lr_at, train, train_from, Adam, TrainConfig, TrainHistory, TrainItem};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::grid::{Grid, ProbMask};
use crate::mfg::{mfg_forward, MFGParams, MfgConfig, MfgVars};
use crate::pseudolabel::{PseudoLabel, SparseAnnotation};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var, IOU_SMOOTH, PROB_EPS};

const ENC_CHANNELS: [usize; 3] = [1, 16, 32];
const DEC_CHANNELS: [usize; 3] = [16, 8, 1];

/// Architecture of the segmenter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmenterConfig {
    pub rows: usize,
    pub cols: usize,
    /// Bottleneck width `C`.
    pub channels: usize,
    /// When false the bottleneck features go straight to the decoder.
    pub mfg: bool,
    pub n1: usize,
    pub n2: usize,
    pub iterations: usize,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        SegmenterConfig { rows: 64, cols: 64, channels: 32, mfg: true, n1: 2, n2: 4, iterations: 3 }
    }
}

impl SegmenterConfig {
    pub fn mfg_config(&self) -> MfgConfig {
        MfgConfig {
            channels: self.channels,
            height: self.rows / 8,
            width: self.cols / 8,
            n1: self.n1,
            n2: self.n2,
            iterations: self.iterations,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.rows > 0 && self.cols > 0 && self.rows.is_multiple_of(8) && self.cols.is_multiple_of(8), || {
            format!("image dims {}x{} must be positive multiples of 8", self.rows, self.cols)
        })?;
        if self.mfg {
            self.mfg_config().validate()?;
        }
        ensure(self.channels > 0, || "channels must be positive".to_string())
    }
}

/// One 3x3 convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub w: Tensor,
    pub b: Tensor,
}

impl ConvLayer {
    fn he(c_in: usize, c_out: usize, rng: &mut Rng) -> Self {
        let std = (2.0 / (c_in * 9) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let data = (0..c_out * c_in * 9).map(|_| normal.sample(rng)).collect();
        ConvLayer {
            w: Tensor::new(&[c_out, c_in, 3, 3], data).expect("shape matches").with_grad(),
            b: Tensor::zeros(&[c_out]).with_grad(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmenterParams {
    pub config: SegmenterConfig,
    pub encoder: Vec<ConvLayer>,
    pub mfg: Option<MFGParams>,
    pub decoder: Vec<ConvLayer>,
}

impl SegmenterParams {
    /// He-normal convolutions with zero biases; the grouping block uses its
    /// own initialisation.
    pub fn init(config: SegmenterConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let enc_out = [ENC_CHANNELS[1], ENC_CHANNELS[2], config.channels];
        let encoder = ENC_CHANNELS.iter().zip(enc_out).map(|(&i, o)| ConvLayer::he(i, o, rng)).collect();
        let mfg = if config.mfg { Some(MFGParams::init(rng, &config.mfg_config())?) } else { None };
        let dec_in = [config.channels, DEC_CHANNELS[0], DEC_CHANNELS[1]];
        let decoder = dec_in.iter().zip(DEC_CHANNELS).map(|(&i, o)| ConvLayer::he(i, o, rng)).collect();
        Ok(SegmenterParams { config, encoder, mfg, decoder })
    }

    /// Parameters in checkpoint order: encoder, grouping block, decoder.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self.encoder.iter().flat_map(|l| [&l.w, &l.b]).collect();
        if let Some(m) = &self.mfg {
            v.extend(m.tensors());
        }
        v.extend(self.decoder.iter().flat_map(|l| [&l.w, &l.b]));
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self.encoder.iter_mut().flat_map(|l| [&mut l.w, &mut l.b]).collect();
        if let Some(m) = &mut self.mfg {
            v.extend(m.tensors_mut());
        }
        v.extend(self.decoder.iter_mut().flat_map(|l| [&mut l.w, &mut l.b]));
        v
    }

    /// Names matching [`Self::tensors`], used by the checkpoint sidecar.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (prefix, n) in [("enc", self.encoder.len())] {
            for i in 0..n {
                names.push(format!("{prefix}{i}.w"));
                names.push(format!("{prefix}{i}.b"));
            }
        }
        if let Some(m) = &self.mfg {
            for (g, p) in [("g1", &m.g1), ("g2", &m.g2)] {
                for base in ["prototypes", "pos_emb", "w_q", "w_k", "w_v"] {
                    names.push(format!("mfg.{g}.{base}"));
                }
                for gate in ["w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h"] {
                    names.push(format!("mfg.{g}.gru.{gate}"));
                }
                for i in 0..p.prototype_count() {
                    names.push(format!("mfg.{g}.proj{i}.w"));
                    names.push(format!("mfg.{g}.proj{i}.b"));
                }
            }
            names.push("mfg.sigma".into());
            names.push("mfg.mu".into());
        }
        for i in 0..self.decoder.len() {
            names.push(format!("dec{i}.w"));
            names.push(format!("dec{i}.b"));
        }
        names
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

/// Parameters bound onto a tape.
#[derive(Debug, Clone)]
pub struct SegmenterVars {
    pub encoder: Vec<(Var, Var)>,
    pub mfg: Option<MfgVars>,
    pub decoder: Vec<(Var, Var)>,
}

impl SegmenterVars {
    /// Rebuilds from variables in [`SegmenterParams::tensors`] order.
    pub fn from_slice(config: &SegmenterConfig, v: &[Var]) -> Result<Self> {
        let mfg_len = if config.mfg { MfgVars::len_for(config.n1, config.n2) } else { 0 };
        ensure(v.len() == 12 + mfg_len, || format!("segmenter needs {} vars, got {}", 12 + mfg_len, v.len()))?;
        let pairs = |s: &[Var]| s.chunks(2).map(|p| (p[0], p[1])).collect::<Vec<_>>();
        Ok(SegmenterVars {
            encoder: pairs(&v[..6]),
            mfg: if config.mfg { Some(MfgVars::from_slice(config.n1, config.n2, &v[6..6 + mfg_len])?) } else { None },
            decoder: pairs(&v[6 + mfg_len..]),
        })
    }

    pub fn bind(tape: &mut Tape, p: &SegmenterParams) -> Result<(Self, Vec<Var>)> {
        let vars: Vec<Var> = p.tensors().into_iter().map(|t| tape.leaf(t)).collect();
        Ok((Self::from_slice(&p.config, &vars)?, vars))
    }
}

/// Logits `[1, rows, cols]` for one image.
pub fn forward_logits(tape: &mut Tape, image: &Grid, cfg: &SegmenterConfig, p: &SegmenterVars) -> Result<Var> {
    ensure(image.dims() == (cfg.rows, cfg.cols), || {
        format!("image {:?} does not match the model's {}x{}", image.dims(), cfg.rows, cfg.cols)
    })?;
    let mut x = tape.constant(&[1, cfg.rows, cfg.cols], image.data().to_vec())?;
    for &(w, b) in &p.encoder {
        let y = tape.conv2d(x, w, b, 2)?;
        x = tape.silu(y);
    }
    if let Some(m) = &p.mfg {
        let (c, h, w) = (cfg.channels, cfg.rows / 8, cfg.cols / 8);
        let flat = tape.reshape(x, &[c, h * w])?;
        let rows = tape.transpose(flat)?;
        let out = mfg_forward(tape, rows, m, cfg.iterations)?;
        let back = tape.transpose(out.out)?;
        x = tape.reshape(back, &[c, h, w])?;
    }
    let last = p.decoder.len() - 1;
    for (i, &(w, b)) in p.decoder.iter().enumerate() {
        let up = tape.upsample2x(x)?;
        x = tape.conv2d(up, w, b, 1)?;
        if i < last {
            x = tape.silu(x);
        }
    }
    Ok(x)
}

/// Foreground probabilities `[1, rows, cols]`.
pub fn forward(tape: &mut Tape, image: &Grid, cfg: &SegmenterConfig, p: &SegmenterVars) -> Result<Var> {
    let logits = forward_logits(tape, image, cfg, p)?;
    Ok(tape.sigmoid(logits))
}

/// Runs the segmenter without recording gradients.
pub fn predict(params: &SegmenterParams, image: &Grid) -> Result<ProbMask> {
    params.config.validate()?;
    let mut tape = Tape::new();
    let vars: Vec<Var> =
        params.tensors().into_iter().map(|t| tape.constant(t.shape(), t.data().to_vec())).collect::<Result<_>>()?;
    let sv = SegmenterVars::from_slice(&params.config, &vars)?;
    let p = forward(&mut tape, image, &params.config, &sv)?;
    ProbMask::from_vec(params.config.rows, params.config.cols, tape.value(p).to_vec())
}

fn clip(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

fn bce(p: f64, t: f64) -> f64 {
    let p = clip(p);
    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

/// Mean cross-entropy over the annotated pixels only.
pub fn partial_ce(pred: &ProbMask, ann: &SparseAnnotation) -> Result<f64> {
    ann.validate(pred.dims())?;
    let (target, weight) = ann.dense_targets(pred.dims());
    let n = weight.iter().sum::<f64>();
    ensure(n > 0.0, || "partial cross-entropy needs at least one labelled pixel".to_string())?;
    let total: f64 = pred
        .data()
        .iter()
        .zip(&target)
        .zip(&weight)
        .filter(|(_, w)| **w > 0.0)
        .map(|((p, t), w)| w * bce(*p, *t))
        .sum();
    Ok(total / n)
}

/// Mean soft-label cross-entropy over all pixels.
pub fn dense_ce(pred: &ProbMask, target: &ProbMask) -> Result<f64> {
    ensure(pred.dims() == target.dims(), || format!("pred {:?} vs target {:?}", pred.dims(), target.dims()))?;
    Ok(pred.data().iter().zip(target.data()).map(|(p, t)| bce(*p, *t)).sum::<f64>() / pred.data().len() as f64)
}

pub fn soft_iou_loss(pred: &ProbMask, target: &ProbMask) -> Result<f64> {
    ensure(pred.dims() == target.dims(), || format!("pred {:?} vs target {:?}", pred.dims(), target.dims()))?;
    let inter: f64 = pred.data().iter().zip(target.data()).map(|(p, t)| p * t).sum();
    let sp: f64 = pred.data().iter().sum();
    let st: f64 = target.data().iter().sum();
    Ok(1.0 - (inter + IOU_SMOOTH) / (sp + st - inter + IOU_SMOOTH))
}

/// Partial cross-entropy, plus the dense cross-entropy and soft IoU against
/// the weighted pseudo-label when the label was kept.
pub fn total_loss(pred: &ProbMask, ann: &SparseAnnotation, label: &PseudoLabel) -> Result<f64> {
    let pce = partial_ce(pred, ann)?;
    match label.target() {
        Some(t) => Ok(pce + dense_ce(pred, t)? + soft_iou_loss(pred, t)?),
        None => Ok(pce),
    }
}

/// Tape version of [`total_loss`] for a probability map `p`; `target` is the
/// pseudo-label when kept.
pub fn loss_on_tape(tape: &mut Tape, p: Var, ann: &SparseAnnotation, target: Option<&ProbMask>) -> Result<Var> {
    let shape = tape.shape(p).to_vec();
    let dims = (shape[shape.len() - 2], shape[shape.len() - 1]);
    ann.validate(dims)?;
    let (t, w) = ann.dense_targets(dims);
    let pce = tape.bce(p, &t, &w)?;
    let Some(target) = target else { return Ok(pce) };
    ensure(target.dims() == dims, || format!("pseudo-label {:?} vs prediction {:?}", target.dims(), dims))?;
    let ones = vec![1.0; target.data().len()];
    let ce = tape.bce(p, target.data(), &ones)?;
    let iou = tape.soft_iou(p, target.data())?;
    let dense = tape.add(ce, iou)?;
    tape.add(pce, dense)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{LabeledPoint, PointLabel};
    use crate::rng::seeded;
    use crate::tensor::grad_check;
    use rand::Rng as _;

    fn ann(dims: (usize, usize)) -> SparseAnnotation {
        SparseAnnotation::from_points(vec![
            LabeledPoint::new(dims.0 / 2, dims.1 / 2, PointLabel::Foreground),
            LabeledPoint::new(0, 0, PointLabel::Background),
        ])
    }

    fn random_mask(rng: &mut Rng, rows: usize, cols: usize) -> ProbMask {
        ProbMask::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn shapes_and_zero_final_layer() {
        let mut rng = seeded(1);
        let mut p = SegmenterParams::init(SegmenterConfig::default(), &mut rng).unwrap();
        let img = Grid::from_fn(64, 64, |r, c| ((r * c) % 7) as f64 / 7.0);
        let out = predict(&p, &img).unwrap();
        assert_eq!(out.dims(), (64, 64));
        assert_eq!(predict(&p, &img).unwrap(), out);
        let last = p.decoder.last_mut().unwrap();
        last.w.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let out = predict(&p, &img).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.5));
        assert!(predict(&p, &Grid::zeros(32, 32)).unwrap_err().is_contract());
        let bad = SegmenterConfig { rows: 60, ..SegmenterConfig::default() };
        assert!(SegmenterParams::init(bad, &mut rng).unwrap_err().is_contract());
    }

    #[test]
    fn names_align_with_tensors() {
        for mfg in [true, false] {
            let cfg = SegmenterConfig { mfg, ..SegmenterConfig::default() };
            let p = SegmenterParams::init(cfg, &mut seeded(0)).unwrap();
            assert_eq!(p.tensor_names().len(), p.tensors().len());
        }
    }

    #[test]
    fn partial_ce_examples() {
        let a = ann((4, 4));
        let mut v = vec![0.5; 16];
        v[2 * 4 + 2] = 1.0;
        v[0] = 0.0;
        let perfect = ProbMask::from_vec(4, 4, v).unwrap();
        assert!(partial_ce(&perfect, &a).unwrap() < 1e-6);
        let half = ProbMask::filled(4, 4, 0.5).unwrap();
        assert!((partial_ce(&half, &a).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn partial_ce_matches_scalar_loop() {
        let mut rng = seeded(9);
        let pred = random_mask(&mut rng, 6, 6);
        let pts: Vec<LabeledPoint> = (0..5)
            .map(|i| {
                let label = if i % 2 == 0 { PointLabel::Foreground } else { PointLabel::Background };
                LabeledPoint::new(i, (i * 2) % 6, label)
            })
            .collect();
        let mut oracle = 0.0;
        for p in &pts {
            let q = pred.get(p.row, p.col).clamp(1e-7, 1.0 - 1e-7);
            oracle += if p.is_foreground() { -q.ln() } else { -(1.0 - q).ln() };
        }
        oracle /= pts.len() as f64;
        let got = partial_ce(&pred, &SparseAnnotation::from_points(pts)).unwrap();
        assert!((got - oracle).abs() < 1e-10);
    }

    #[test]
    fn soft_iou_examples() {
        let t = ProbMask::from_vec(2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!(soft_iou_loss(&t, &t).unwrap().abs() < 1e-9);
        let ones = ProbMask::filled(3, 3, 1.0).unwrap();
        let zeros = ProbMask::filled(3, 3, 0.0).unwrap();
        assert!((soft_iou_loss(&ones, &zeros).unwrap() - (1.0 - 1.0 / 10.0)).abs() < 1e-12);
        let mut rng = seeded(2);
        let (a, b) = (random_mask(&mut rng, 4, 4), random_mask(&mut rng, 4, 4));
        assert_eq!(soft_iou_loss(&a, &b).unwrap(), soft_iou_loss(&b, &a).unwrap());
    }

    #[test]
    fn total_loss_gating_and_terms() {
        let mut rng = seeded(3);
        let pred = random_mask(&mut rng, 8, 8);
        let fused = random_mask(&mut rng, 8, 8);
        let entropy = fused.grid().map(crate::pseudolabel::binary_entropy);
        let a = ann((8, 8));
        let kept = crate::pseudolabel::refine(&fused, &entropy, true).unwrap();
        let rejected = crate::pseudolabel::refine(&fused, &entropy, false).unwrap();
        assert_eq!(total_loss(&pred, &a, &rejected).unwrap(), partial_ce(&pred, &a).unwrap());

        // term-wise oracle
        let t = &kept.weighted_mask;
        let mut ce = 0.0;
        let (mut i, mut sp, mut st) = (0.0, 0.0, 0.0);
        for k in 0..64 {
            let p = pred.data()[k].clamp(1e-7, 1.0 - 1e-7);
            let y = t.data()[k];
            ce += -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
            i += pred.data()[k] * y;
            sp += pred.data()[k];
            st += y;
        }
        let oracle = partial_ce(&pred, &a).unwrap() + ce / 64.0 + 1.0 - (i + 1.0) / (sp + st - i + 1.0);
        assert!((total_loss(&pred, &a, &kept).unwrap() - oracle).abs() < 1e-10);

        // the tape agrees with the value-level loss
        let mut tape = Tape::new();
        let pv = tape.constant(&[1, 8, 8], pred.data().to_vec()).unwrap();
        let l = loss_on_tape(&mut tape, pv, &a, Some(t)).unwrap();
        assert!((tape.scalar(l) - oracle).abs() < 1e-10);
    }

    #[test]
    fn soft_ce_is_minimised_at_the_target() {
        for y in [0.1, 0.3, 0.5, 0.8] {
            let best = (1..1000)
                .map(|k| k as f64 / 1000.0)
                .min_by(|a, b| bce(*a, y).partial_cmp(&bce(*b, y)).unwrap())
                .unwrap();
            assert!((best - y).abs() < 1e-3);
        }
    }

    #[test]
    fn rejected_labels_only_reach_annotated_pixels() {
        // with the pce-only loss, the prediction gradient is zero off the
        // annotated pixels
        let mut rng = seeded(4);
        let pred = random_mask(&mut rng, 8, 8);
        let a = ann((8, 8));
        let mut tape = Tape::new();
        let pv = tape.param(&Tensor::new(&[1, 8, 8], pred.data().to_vec()).unwrap());
        let l = loss_on_tape(&mut tape, pv, &a, None).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(pv).unwrap();
        let nonzero: Vec<usize> = (0..64).filter(|&k| g[k] != 0.0).collect();
        assert_eq!(nonzero, vec![0, 4 * 8 + 4]);
    }

    #[test]
    fn full_loss_gradients_match_finite_differences() {
        let cfg = SegmenterConfig { rows: 16, cols: 16, channels: 8, n1: 2, n2: 4, ..SegmenterConfig::default() };
        let mut rng = seeded(5);
        let p = SegmenterParams::init(cfg, &mut rng).unwrap();
        let img = Grid::from_fn(16, 16, |_, _| rng.random_range(0.0..1.0));
        let target = random_mask(&mut rng, 16, 16);
        let a = ann((16, 16));
        let params: Vec<Tensor> = p.tensors().into_iter().cloned().collect();
        let err = grad_check(
            |tape, vars| {
                let sv = SegmenterVars::from_slice(&cfg, vars)?;
                let prob = forward(tape, &img, &cfg, &sv)?;
                loss_on_tape(tape, prob, &a, Some(&target))
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }
}
