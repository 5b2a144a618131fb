//! Multi-scale feature grouping.
//!
//! A grouping block `Phi_N` clusters the `HW x C` feature rows around `N`
//! learnable prototypes with prototype-normalised attention, refines the
//! prototypes with a GRU for `T` iterations, then broadcasts each prototype
//! back onto the grid, projects it to `C / N` channels and concatenates the
//! results. Two blocks at different `N` are chained and mixed by a spatial
//! sigmoid gate:
//!
//! ```text
//! G1 = Phi_N1(F)
//! G2 = Phi_N2(F + G1)
//! a  = sigmoid([G1, G2] s + mu)          (HW x 1)
//! F^ = F + a * G1 + (1 - a) * G2
//! ```

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::rng::Rng;
use crate::tensor::{gru_cell, GruVars, GruWeights, Tape, Tensor, Var};

/// Standard deviation of every random initialisation in this module.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MfgConfig {
    pub channels: usize,
    /// Spatial size of the feature map the positional embedding covers.
    pub height: usize,
    pub width: usize,
    pub n1: usize,
    pub n2: usize,
    /// Grouping iterations `T`.
    pub iterations: usize,
}

impl Default for MfgConfig {
    fn default() -> Self {
        MfgConfig { channels: 32, height: 8, width: 8, n1: 2, n2: 4, iterations: 3 }
    }
}

impl MfgConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.channels > 0 && self.height > 0 && self.width > 0, || "mfg dims must be positive".to_string())?;
        ensure(self.iterations >= 1, || "mfg iterations must be at least 1".to_string())?;
        ensure(self.n1 != self.n2, || format!("mfg scales must differ, both are {}", self.n1))?;
        for n in [self.n1, self.n2] {
            ensure(n >= 1 && self.channels.is_multiple_of(n), || {
                format!("prototype count {n} does not divide {} channels", self.channels)
            })?;
        }
        Ok(())
    }
}

fn gaussian(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("valid std");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| normal.sample(rng)).collect()).expect("shape matches").with_grad()
}

fn zeros(shape: &[usize]) -> Tensor {
    Tensor::zeros(shape).with_grad()
}

/// Learnable state of one grouping block.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupingParams {
    /// `N x C`.
    pub prototypes: Tensor,
    /// `HW x C`, added to the features.
    pub pos_emb: Tensor,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub gru: GruWeights,
    /// One `C x C/N` projection per prototype.
    pub proj_w: Vec<Tensor>,
    /// One `1 x C/N` bias per prototype.
    pub proj_b: Vec<Tensor>,
}

impl GroupingParams {
    pub fn prototype_count(&self) -> usize {
        self.prototypes.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.prototypes.shape()[1]
    }

    /// Parameters in checkpoint order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.prototypes, &self.pos_emb, &self.w_q, &self.w_k, &self.w_v];
        v.extend(self.gru.tensors());
        for (w, b) in self.proj_w.iter().zip(&self.proj_b) {
            v.push(w);
            v.push(b);
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.prototypes, &mut self.pos_emb, &mut self.w_q, &mut self.w_k, &mut self.w_v];
        v.extend(self.gru.tensors_mut());
        for (w, b) in self.proj_w.iter_mut().zip(self.proj_b.iter_mut()) {
            v.push(w);
            v.push(b);
        }
        v
    }
}

/// Gaussian initialisation of one grouping block; biases start at zero.
pub fn init_grouping_params(rng: &mut Rng, h: usize, w: usize, c: usize, n: usize) -> Result<GroupingParams> {
    ensure(h > 0 && w > 0 && c > 0, || format!("grouping dims must be positive, got {h}x{w}x{c}"))?;
    ensure(n >= 1 && c.is_multiple_of(n), || format!("prototype count {n} does not divide {c} channels"))?;
    let prototypes = gaussian(&[n, c], INIT_STD, rng);
    let pos_emb = gaussian(&[h * w, c], INIT_STD, rng);
    let w_q = gaussian(&[c, c], INIT_STD, rng);
    let w_k = gaussian(&[c, c], INIT_STD, rng);
    let w_v = gaussian(&[c, c], INIT_STD, rng);
    let mut gru = GruWeights::random(c, INIT_STD, rng);
    for b in [&mut gru.b_z, &mut gru.b_r, &mut gru.b_h] {
        *b = zeros(&[1, c]);
    }
    let proj_w = (0..n).map(|_| gaussian(&[c, c / n], INIT_STD, rng)).collect();
    let proj_b = (0..n).map(|_| zeros(&[1, c / n])).collect();
    Ok(GroupingParams { prototypes, pos_emb, w_q, w_k, w_v, gru, proj_w, proj_b })
}

/// [`GroupingParams`] bound onto a tape.
#[derive(Debug, Clone)]
pub struct GroupingVars {
    pub prototypes: Var,
    pub pos_emb: Var,
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub gru: GruVars,
    pub proj: Vec<(Var, Var)>,
}

impl GroupingVars {
    /// Number of tape variables for a block with `n` prototypes.
    pub fn len_for(n: usize) -> usize {
        14 + 2 * n
    }

    /// Rebuilds the bound block from variables in [`GroupingParams::tensors`]
    /// order.
    pub fn from_slice(n: usize, v: &[Var]) -> Result<Self> {
        ensure(v.len() == Self::len_for(n), || {
            format!("grouping block with {n} prototypes needs {} vars, got {}", Self::len_for(n), v.len())
        })?;
        Ok(GroupingVars {
            prototypes: v[0],
            pos_emb: v[1],
            w_q: v[2],
            w_k: v[3],
            w_v: v[4],
            gru: GruVars::from_slice(&v[5..14]),
            proj: v[14..].chunks(2).map(|p| (p[0], p[1])).collect(),
        })
    }

    pub fn bind(tape: &mut Tape, p: &GroupingParams) -> Result<Self> {
        let vars: Vec<Var> = p.tensors().into_iter().map(|t| tape.leaf(t)).collect();
        Self::from_slice(p.prototype_count(), &vars)
    }
}

/// Attention maps of one grouping iteration: `attn` is the softmax over
/// prototypes (`HW x N`), `dist` is `attn` normalised over positions.
#[derive(Debug, Clone, Copy)]
pub struct IterTrace {
    pub attn: Var,
    pub dist: Var,
}

#[derive(Debug, Clone)]
pub struct GroupingOutput {
    /// `HW x C`.
    pub out: Var,
    /// Prototypes after the last GRU update.
    pub prototypes: Var,
    pub trace: Vec<IterTrace>,
}

/// One grouping block `Phi_N` over features `f: HW x C`.
pub fn feature_grouping(tape: &mut Tape, f: Var, g: &GroupingVars, iterations: usize) -> Result<GroupingOutput> {
    ensure(iterations >= 1, || "grouping needs at least one iteration".to_string())?;
    let fs = tape.shape(f).to_vec();
    ensure(fs.len() == 2, || format!("grouping input must be HW x C, got {fs:?}"))?;
    let (hw, c) = (fs[0], fs[1]);
    let ps = tape.shape(g.prototypes).to_vec();
    ensure(ps.len() == 2 && ps[1] == c, || format!("prototypes {ps:?} do not match C={c}"))?;
    let n = ps[0];
    ensure(n >= 1 && c % n == 0, || format!("prototype count {n} does not divide {c} channels"))?;
    ensure(tape.shape(g.pos_emb) == [hw, c], || {
        format!("positional embedding {:?} does not match {hw}x{c}", tape.shape(g.pos_emb))
    })?;
    ensure(g.proj.len() == n, || format!("{} projections for {n} prototypes", g.proj.len()))?;

    let fp = tape.add(f, g.pos_emb)?;
    let k = tape.matmul(fp, g.w_k)?;
    let v = tape.matmul(fp, g.w_v)?;
    let scale = 1.0 / (c as f64).sqrt();
    let mut p = g.prototypes;
    let mut trace = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let q = tape.matmul(p, g.w_q)?;
        let qt = tape.transpose(q)?;
        let logits = tape.matmul(k, qt)?;
        let logits = tape.affine(logits, scale, 0.0)?;
        let attn = tape.softmax_axis(logits, 1)?;
        let dist = tape.normalize_axis(attn, 0)?;
        let dt = tape.transpose(dist)?;
        let u = tape.matmul(dt, v)?;
        p = gru_cell(tape, u, p, &g.gru)?;
        trace.push(IterTrace { attn, dist });
    }

    let mut parts = Vec::with_capacity(n);
    for (i, &(w, b)) in g.proj.iter().enumerate() {
        ensure(tape.shape(w) == [c, c / n], || format!("projection {i} has shape {:?}", tape.shape(w)))?;
        let pi = tape.row(p, i)?;
        let grid = tape.add_row(g.pos_emb, pi)?;
        let proj = tape.matmul(grid, w)?;
        parts.push(tape.add_row(proj, b)?);
    }
    let out = tape.concat(&parts, 1)?;
    Ok(GroupingOutput { out, prototypes: p, trace })
}

/// Two grouping scales and the gate that mixes them.
#[derive(Debug, Clone, PartialEq)]
pub struct MFGParams {
    pub g1: GroupingParams,
    pub g2: GroupingParams,
    /// `2C x 1` gate weights.
    pub sigma: Tensor,
    /// `1 x 1` gate bias.
    pub mu: Tensor,
}

impl MFGParams {
    pub fn init(rng: &mut Rng, cfg: &MfgConfig) -> Result<Self> {
        cfg.validate()?;
        let (h, w, c) = (cfg.height, cfg.width, cfg.channels);
        Ok(MFGParams {
            g1: init_grouping_params(rng, h, w, c, cfg.n1)?,
            g2: init_grouping_params(rng, h, w, c, cfg.n2)?,
            sigma: gaussian(&[2 * c, 1], INIT_STD, rng),
            mu: zeros(&[1, 1]),
        })
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.g1.tensors();
        v.extend(self.g2.tensors());
        v.push(&self.sigma);
        v.push(&self.mu);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.g1.tensors_mut();
        v.extend(self.g2.tensors_mut());
        v.push(&mut self.sigma);
        v.push(&mut self.mu);
        v
    }
}

#[derive(Debug, Clone)]
pub struct MfgVars {
    pub g1: GroupingVars,
    pub g2: GroupingVars,
    pub sigma: Var,
    pub mu: Var,
}

impl MfgVars {
    pub fn len_for(n1: usize, n2: usize) -> usize {
        GroupingVars::len_for(n1) + GroupingVars::len_for(n2) + 2
    }

    /// Rebuilds from variables in [`MFGParams::tensors`] order.
    pub fn from_slice(n1: usize, n2: usize, v: &[Var]) -> Result<Self> {
        ensure(v.len() == Self::len_for(n1, n2), || {
            format!("mfg with scales ({n1}, {n2}) needs {} vars, got {}", Self::len_for(n1, n2), v.len())
        })?;
        let a = GroupingVars::len_for(n1);
        let b = a + GroupingVars::len_for(n2);
        Ok(MfgVars {
            g1: GroupingVars::from_slice(n1, &v[..a])?,
            g2: GroupingVars::from_slice(n2, &v[a..b])?,
            sigma: v[b],
            mu: v[b + 1],
        })
    }

    pub fn bind(tape: &mut Tape, p: &MFGParams) -> Result<Self> {
        let vars: Vec<Var> = p.tensors().into_iter().map(|t| tape.leaf(t)).collect();
        Self::from_slice(p.g1.prototype_count(), p.g2.prototype_count(), &vars)
    }
}

#[derive(Debug, Clone)]
pub struct MfgOutput {
    /// `HW x C`.
    pub out: Var,
    /// `HW x 1` gate map.
    pub alpha: Var,
    pub g1: GroupingOutput,
    pub g2: GroupingOutput,
}

pub fn mfg_forward(tape: &mut Tape, f: Var, p: &MfgVars, iterations: usize) -> Result<MfgOutput> {
    let c = *tape.shape(f).last().unwrap_or(&0);
    ensure(tape.shape(p.sigma) == [2 * c, 1], || {
        format!("gate weights {:?} do not match 2C={}", tape.shape(p.sigma), 2 * c)
    })?;
    ensure(tape.value(p.mu).len() == 1, || "gate bias must be a scalar".to_string())?;
    let g1 = feature_grouping(tape, f, &p.g1, iterations)?;
    let f2 = tape.add(f, g1.out)?;
    let g2 = feature_grouping(tape, f2, &p.g2, iterations)?;
    let both = tape.concat(&[g1.out, g2.out], 1)?;
    let gate = tape.matmul(both, p.sigma)?;
    let gate = tape.add_row(gate, p.mu)?;
    let alpha = tape.sigmoid(gate);
    let diff = tape.sub(g1.out, g2.out)?;
    let mixed = tape.mul_col(diff, alpha)?;
    let base = tape.add(f, g2.out)?;
    let out = tape.add(base, mixed)?;
    Ok(MfgOutput { out, alpha, g1, g2 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::tensor::grad_check;

    fn features(rng: &mut Rng, hw: usize, c: usize) -> Tensor {
        gaussian(&[hw, c], 1.0, rng)
    }

    fn small_cfg() -> MfgConfig {
        MfgConfig { channels: 8, height: 4, width: 4, n1: 2, n2: 4, iterations: 3 }
    }

    #[test]
    fn shape_law_and_normalisation() {
        let mut rng = seeded(1);
        let g = init_grouping_params(&mut rng, 8, 8, 32, 4).unwrap();
        let f = features(&mut rng, 64, 32);
        let mut tape = Tape::new();
        let fv = tape.leaf(&f);
        let gv = GroupingVars::bind(&mut tape, &g).unwrap();
        let out = feature_grouping(&mut tape, fv, &gv, 3).unwrap();
        assert_eq!(tape.shape(out.out), [64, 32]);
        assert_eq!(out.trace.len(), 3);
        for it in &out.trace {
            let a = tape.value(it.attn);
            for r in 0..64 {
                assert!((a[r * 4..r * 4 + 4].iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            let d = tape.value(it.dist);
            for j in 0..4 {
                assert!(((0..64).map(|r| d[r * 4 + j]).sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn init_is_deterministic_and_centred() {
        let a = init_grouping_params(&mut seeded(7), 8, 8, 32, 4).unwrap();
        let b = init_grouping_params(&mut seeded(7), 8, 8, 32, 4).unwrap();
        assert_eq!(a, b);
        assert!(a.proj_w.iter().all(|w| w.shape() == [32, 8]));
        let big = gaussian(&[100, 100], INIT_STD, &mut seeded(2));
        let mean = big.data().iter().sum::<f64>() / big.len() as f64;
        assert!(mean.abs() < 1e-3);
        assert!(init_grouping_params(&mut seeded(0), 4, 4, 30, 4).unwrap_err().is_contract());
    }

    #[test]
    fn config_validation() {
        assert!(MfgConfig::default().validate().is_ok());
        assert!(MfgConfig { n2: 2, ..MfgConfig::default() }.validate().is_err());
        assert!(MfgConfig { n2: 3, ..MfgConfig::default() }.validate().is_err());
    }

    fn run(p: &MFGParams, f: &Tensor, t: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut tape = Tape::new();
        let fv = tape.leaf(f);
        let pv = MfgVars::bind(&mut tape, p).unwrap();
        let o = mfg_forward(&mut tape, fv, &pv, t).unwrap();
        (
            tape.value(o.out).to_vec(),
            tape.value(o.alpha).to_vec(),
            tape.value(o.g1.out).to_vec(),
            tape.value(o.g2.out).to_vec(),
        )
    }

    #[test]
    fn gate_range_and_saturation() {
        let cfg = small_cfg();
        let mut rng = seeded(3);
        let mut p = MFGParams::init(&mut rng, &cfg).unwrap();
        let f = features(&mut rng, 16, 8);
        let (_, alpha, _, _) = run(&p, &f, 3);
        assert!(alpha.iter().all(|a| *a > 0.0 && *a < 1.0));

        p.sigma = zeros(&[16, 1]);
        for (mu, pick_g1) in [(60.0, true), (-60.0, false)] {
            p.mu = Tensor::filled(&[1, 1], mu).with_grad();
            let (out, _, g1, g2) = run(&p, &f, 3);
            for i in 0..out.len() {
                let g = if pick_g1 { g1[i] } else { g2[i] };
                assert!((out[i] - (f.data()[i] + g)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_projections_reduce_to_residual() {
        let mut rng = seeded(4);
        let mut p = MFGParams::init(&mut rng, &small_cfg()).unwrap();
        for w in p.g1.proj_w.iter_mut().chain(p.g2.proj_w.iter_mut()) {
            w.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let f = features(&mut rng, 16, 8);
        let (out, _, _, _) = run(&p, &f, 3);
        assert_eq!(out, f.data());
    }

    #[test]
    fn iterations_change_the_output() {
        let mut rng = seeded(5);
        let mut p = MFGParams::init(&mut rng, &small_cfg()).unwrap();
        // larger weights so the GRU update is clearly visible
        for t in p.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= 20.0);
        }
        let f = features(&mut rng, 16, 8);
        let (a, _, _, _) = run(&p, &f, 1);
        let (b, _, _, _) = run(&p, &f, 3);
        let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff > 1e-8);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = small_cfg();
        let mut rng = seeded(6);
        let mut p = MFGParams::init(&mut rng, &cfg).unwrap();
        for t in p.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= 10.0);
        }
        let f = features(&mut rng, 16, 8);
        let weights = features(&mut rng, 16, 8);
        let params: Vec<Tensor> = p.tensors().into_iter().cloned().collect();
        let err = grad_check(
            |tape, vars| {
                let fv = tape.leaf(&f);
                let pv = MfgVars::from_slice(cfg.n1, cfg.n2, vars)?;
                let o = mfg_forward(tape, fv, &pv, cfg.iterations)?;
                let w = tape.leaf(&weights);
                let y = tape.mul(o.out, w)?;
                Ok(tape.mean(y))
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }
}
