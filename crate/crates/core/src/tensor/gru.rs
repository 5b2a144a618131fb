use rand_distr::{Distribution, Normal};

use super::{Tape, Tensor, Var};
use crate::error::{ensure, Result};
use crate::rng::Rng;

/// Weights of a gated recurrent unit over width `C`. Input and recurrent
/// matrices are `C x C` (applied as `x W`), biases are `1 x C`.
#[derive(Debug, Clone, PartialEq)]
pub struct GruWeights {
    pub w_z: Tensor,
    pub u_z: Tensor,
    pub b_z: Tensor,
    pub w_r: Tensor,
    pub u_r: Tensor,
    pub b_r: Tensor,
    pub w_h: Tensor,
    pub u_h: Tensor,
    pub b_h: Tensor,
}

impl GruWeights {
    pub fn zeros(width: usize) -> Self {
        let m = || Tensor::zeros(&[width, width]).with_grad();
        let b = || Tensor::zeros(&[1, width]).with_grad();
        GruWeights { w_z: m(), u_z: m(), b_z: b(), w_r: m(), u_r: m(), b_r: b(), w_h: m(), u_h: m(), b_h: b() }
    }

    /// Gaussian init for matrices and biases.
    pub fn random(width: usize, std: f64, rng: &mut Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("valid std");
        let mut draw = |shape: &[usize]| {
            let n = shape.iter().product();
            let data = (0..n).map(|_| normal.sample(rng)).collect();
            Tensor::new(shape, data).expect("shape matches").with_grad()
        };
        GruWeights {
            w_z: draw(&[width, width]),
            u_z: draw(&[width, width]),
            b_z: draw(&[1, width]),
            w_r: draw(&[width, width]),
            u_r: draw(&[width, width]),
            b_r: draw(&[1, width]),
            w_h: draw(&[width, width]),
            u_h: draw(&[width, width]),
            b_h: draw(&[1, width]),
        }
    }

    pub fn width(&self) -> usize {
        self.w_z.shape()[0]
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.w_z, &self.u_z, &self.b_z, &self.w_r, &self.u_r, &self.b_r, &self.w_h, &self.u_h, &self.b_h]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w_z,
            &mut self.u_z,
            &mut self.b_z,
            &mut self.w_r,
            &mut self.u_r,
            &mut self.b_r,
            &mut self.w_h,
            &mut self.u_h,
            &mut self.b_h,
        ]
    }

    pub fn bind(&self, tape: &mut Tape) -> GruVars {
        let v = self.tensors().into_iter().map(|t| tape.leaf(t)).collect::<Vec<_>>();
        GruVars::from_slice(&v)
    }
}

/// [`GruWeights`] bound onto a tape, in `tensors()` order.
#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    pub w_z: Var,
    pub u_z: Var,
    pub b_z: Var,
    pub w_r: Var,
    pub u_r: Var,
    pub b_r: Var,
    pub w_h: Var,
    pub u_h: Var,
    pub b_h: Var,
}

impl GruVars {
    pub fn from_slice(v: &[Var]) -> Self {
        GruVars { w_z: v[0], u_z: v[1], b_z: v[2], w_r: v[3], u_r: v[4], b_r: v[5], w_h: v[6], u_h: v[7], b_h: v[8] }
    }

    pub fn vars(&self) -> Vec<Var> {
        vec![self.w_z, self.u_z, self.b_z, self.w_r, self.u_r, self.b_r, self.w_h, self.u_h, self.b_h]
    }
}

fn gate(tape: &mut Tape, x: Var, w: Var, h: Var, u: Var, b: Var) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    let hu = tape.matmul(h, u)?;
    let s = tape.add(xw, hu)?;
    tape.add_row(s, b)
}

/// One GRU step over `N x C` inputs and states:
///
/// ```text
/// z  = sigmoid(x W_z + h U_z + b_z)
/// r  = sigmoid(x W_r + h U_r + b_r)
/// h~ = tanh(x W_h + (r * h) U_h + b_h)
/// h' = (1 - z) * h + z * h~
/// ```
pub fn gru_cell(tape: &mut Tape, inputs: Var, states: Var, w: &GruVars) -> Result<Var> {
    ensure(tape.shape(inputs) == tape.shape(states), || {
        format!("gru_cell: inputs {:?} vs states {:?}", tape.shape(inputs), tape.shape(states))
    })?;
    ensure(tape.shape(inputs).len() == 2, || "gru_cell: inputs must be N x C".to_string())?;
    let c = tape.shape(inputs)[1];
    for m in [w.w_z, w.u_z, w.w_r, w.u_r, w.w_h, w.u_h] {
        ensure(tape.shape(m) == [c, c], || format!("gru_cell: weight shape {:?} does not match C={c}", tape.shape(m)))?;
    }
    for b in [w.b_z, w.b_r, w.b_h] {
        ensure(tape.value(b).len() == c, || format!("gru_cell: bias length must be C={c}"))?;
    }
    let z_pre = gate(tape, inputs, w.w_z, states, w.u_z, w.b_z)?;
    let z = tape.sigmoid(z_pre);
    let r_pre = gate(tape, inputs, w.w_r, states, w.u_r, w.b_r)?;
    let r = tape.sigmoid(r_pre);
    let rh = tape.mul(r, states)?;
    let cand_pre = gate(tape, inputs, w.w_h, rh, w.u_h, w.b_h)?;
    let cand = tape.tanh(cand_pre);
    let keep = tape.affine(z, -1.0, 1.0)?;
    let old = tape.mul(keep, states)?;
    let new = tape.mul(z, cand)?;
    tape.add(old, new)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng as _;

    fn random_tensor(shape: &[usize], rng: &mut Rng, scale: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
    }

    #[test]
    fn saturated_update_gate_keeps_state() {
        let mut rng = seeded(3);
        let x = random_tensor(&[2, 4], &mut rng, 1.0);
        let h = random_tensor(&[2, 4], &mut rng, 1.0);
        let mut w = GruWeights::random(4, 0.3, &mut rng);
        w.b_z = Tensor::filled(&[1, 4], -60.0);
        let mut tape = Tape::new();
        let (xv, hv) = (tape.leaf(&x), tape.leaf(&h));
        let wv = w.bind(&mut tape);
        let out = gru_cell(&mut tape, xv, hv, &wv).unwrap();
        for (o, s) in tape.value(out).iter().zip(h.data()) {
            assert!((o - s).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_update_gate_takes_candidate() {
        let mut rng = seeded(4);
        let x = random_tensor(&[2, 4], &mut rng, 1.0);
        let h = random_tensor(&[2, 4], &mut rng, 1.0);
        let mut w = GruWeights::random(4, 0.3, &mut rng);
        w.b_z = Tensor::filled(&[1, 4], 60.0);
        let mut tape = Tape::new();
        let (xv, hv) = (tape.leaf(&x), tape.leaf(&h));
        let wv = w.bind(&mut tape);
        let out = gru_cell(&mut tape, xv, hv, &wv).unwrap();
        // candidate computed directly
        let r_pre = gate(&mut tape, xv, wv.w_r, hv, wv.u_r, wv.b_r).unwrap();
        let r = tape.sigmoid(r_pre);
        let rh = tape.mul(r, hv).unwrap();
        let c_pre = gate(&mut tape, xv, wv.w_h, rh, wv.u_h, wv.b_h).unwrap();
        let cand = tape.tanh(c_pre);
        for (o, c) in tape.value(out).iter().zip(tape.value(cand)) {
            assert!((o - c).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(&[2, 4]));
        let h = tape.leaf(&Tensor::zeros(&[3, 4]));
        let w = GruWeights::zeros(4).bind(&mut tape);
        assert!(gru_cell(&mut tape, x, h, &w).unwrap_err().is_contract());
        let h = tape.leaf(&Tensor::zeros(&[2, 4]));
        let w = GruWeights::zeros(3).bind(&mut tape);
        assert!(gru_cell(&mut tape, x, h, &w).unwrap_err().is_contract());
    }
}
