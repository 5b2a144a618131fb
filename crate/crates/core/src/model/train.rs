use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{forward, loss_on_tape, SegmenterConfig, SegmenterParams, SegmenterVars};
use crate::error::{ensure, Error, Result};
use crate::grid::{Grid, ProbMask};
use crate::pseudolabel::SparseAnnotation;
use crate::rng;
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Multiplier applied to the learning rate every `lr_decay_every` epochs.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { batch_size: 4, learning_rate: 1e-3, epochs: 40, lr_decay: 0.1, lr_decay_every: 80, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.batch_size >= 1, || "batch_size must be positive".to_string())?;
        ensure(self.learning_rate > 0.0 && self.learning_rate.is_finite(), || {
            format!("learning_rate {} must be positive", self.learning_rate)
        })?;
        ensure(self.lr_decay > 0.0 && self.lr_decay <= 1.0, || format!("lr_decay {} outside (0, 1]", self.lr_decay))?;
        ensure(self.lr_decay_every >= 1, || "lr_decay_every must be positive".to_string())
    }
}

/// Step-decayed learning rate for `epoch` (0-based).
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.learning_rate * cfg.lr_decay.powi((epoch / cfg.lr_decay_every) as i32)
}

/// One training image. `target` is the weighted pseudo-label when the image
/// passed selection; otherwise only the sparse annotation supervises it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub id: String,
    pub image: Grid,
    pub annotation: SparseAnnotation,
    pub target: Option<ProbMask>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean per-image loss of each epoch.
    pub epoch_loss: Vec<f64>,
    pub learning_rate: Vec<f64>,
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(shapes: &[usize]) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|n| vec![0.0; *n]).collect(),
            v: shapes.iter().map(|n| vec![0.0; *n]).collect(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        ensure(params.len() == self.m.len() && grads.len() == self.m.len(), || {
            format!("adam tracks {} tensors, got {} params and {} grads", self.m.len(), params.len(), grads.len())
        })?;
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            ensure(p.len() == g.len() && g.len() == m.len(), || "adam: gradient length mismatch".to_string())?;
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                *w -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Initialises a segmenter from `cfg.seed` and trains it.
pub fn train(items: &[TrainItem], arch: SegmenterConfig, cfg: &TrainConfig) -> Result<(SegmenterParams, TrainHistory)> {
    let mut init_rng = rng::seeded(rng::derive(cfg.seed, 1));
    let params = SegmenterParams::init(arch, &mut init_rng)?;
    train_from(params, items, cfg)
}

/// Trains `params` in place. The loss of a batch is the mean over its images
/// of the per-image total loss.
pub fn train_from(
    mut params: SegmenterParams,
    items: &[TrainItem],
    cfg: &TrainConfig,
) -> Result<(SegmenterParams, TrainHistory)> {
    cfg.validate()?;
    ensure(!items.is_empty(), || "training set is empty".to_string())?;
    let arch = params.config;
    let mut adam = Adam::new(&params.tensors().iter().map(|t| t.len()).collect::<Vec<_>>());
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut shuffle_rng = rng::seeded(rng::derive(cfg.seed, 2));
    let mut history = TrainHistory::default();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let lr = lr_at(cfg, epoch);
        let mut sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let (sv, vars) = SegmenterVars::bind(&mut tape, &params)?;
            let mut total = None;
            for &i in batch {
                let item = &items[i];
                let p = forward(&mut tape, &item.image, &arch, &sv)?;
                let l = loss_on_tape(&mut tape, p, &item.annotation, item.target.as_ref())?;
                total = Some(match total {
                    None => l,
                    Some(t) => tape.add(t, l)?,
                });
            }
            let total = total.expect("chunks are non-empty");
            let loss = tape.affine(total, 1.0 / batch.len() as f64, 0.0)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Training { epoch, reason: format!("batch loss is {value}") });
            }
            tape.backward(loss)?;
            let grads: Vec<Vec<f64>> = vars
                .iter()
                .zip(params.tensors())
                .map(|(v, t)| tape.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
                .collect();
            if grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Training { epoch, reason: "non-finite gradient".into() });
            }
            adam.step(params.tensors_mut(), &grads, lr)?;
            sum += value * batch.len() as f64;
        }
        history.epoch_loss.push(sum / items.len() as f64);
        history.learning_rate.push(lr);
    }
    Ok((params, history))
}
