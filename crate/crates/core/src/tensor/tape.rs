use super::conv::{self, ConvGeom};
use super::Tensor;
use crate::error::{ensure, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Lower bound used when clipping probabilities inside logarithms.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine(Var, f64),
    AddRow(Var, Var),
    MulCol(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Sigmoid(Var),
    Tanh(Var),
    Silu(Var),
    Softmax { x: Var, axis: AxisSplit },
    Normalize { x: Var, axis: AxisSplit },
    Sum(Var),
    Mean(Var),
    Concat { parts: Vec<(Var, usize)>, outer: usize, inner: usize },
    Row { x: Var, index: usize },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    Upsample2(Var),
    Bce { p: Var, target: Vec<f64>, weight: Vec<f64>, denom: f64 },
    SoftIou { p: Var, target: Vec<f64> },
}

/// A tensor viewed as `[outer, len, inner]` around one axis.
#[derive(Debug, Clone, Copy)]
struct AxisSplit {
    outer: usize,
    len: usize,
    inner: usize,
}

impl AxisSplit {
    fn new(shape: &[usize], axis: usize) -> Self {
        AxisSplit { outer: shape[..axis].iter().product(), len: shape[axis], inner: shape[axis + 1..].iter().product() }
    }

    /// Calls `f` with the flat indices of every slice along the axis.
    fn for_each_slice(&self, mut f: impl FnMut(&mut dyn Iterator<Item = usize>)) {
        for o in 0..self.outer {
            for i in 0..self.inner {
                let base = o * self.len * self.inner + i;
                let stride = self.inner;
                let mut it = (0..self.len).map(move |j| base + j * stride);
                f(&mut it);
            }
        }
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed ops. Nodes are appended in execution order, so
/// every node appears after the nodes producing its inputs.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn bce_term(p: f64, t: f64) -> f64 {
    let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(t * pc.ln() + (1.0 - t) * (1.0 - pc).ln())
}

fn bce_slope(p: f64, t: f64) -> f64 {
    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
        return 0.0;
    }
    -t / p + (1.0 - t) / (1.0 - p)
}

fn soft_iou_parts(p: &[f64], t: &[f64]) -> (f64, f64, f64) {
    let inter: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
    let sp: f64 = p.iter().sum();
    let st: f64 = t.iter().sum();
    (inter, sp, st)
}

/// Smoothing term of the soft IoU loss.
pub const IOU_SMOOTH: f64 = 1.0;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Binds a tensor as a leaf; it participates in backward iff
    /// `requires_grad` is set on the tensor.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Binds a tensor as a leaf that always receives a gradient.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(&n.shape, n.value.clone()).expect("node shape is consistent")
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        ensure(self.shape(a) == self.shape(b), || {
            format!("{op}: shape mismatch {:?} vs {:?}", self.shape(a), self.shape(b))
        })
    }

    fn rank2(&self, v: Var, op: &str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        ensure(s.len() == 2, || format!("{op}: expected a rank-2 operand, got shape {s:?}"))?;
        Ok((s[0], s[1]))
    }

    fn zip_op(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| f(*x, *y)).collect();
        let needs = self.needs(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), value, op, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let value = self.value(x).iter().map(|v| scale * v + shift).collect();
        let needs = self.needs(&[x]);
        Ok(self.push(self.shape(x).to_vec(), value, Op::Affine(x, scale), needs))
    }

    /// `x[i, j] + row[j]` for a rank-2 `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.rank2(x, "add_row")?;
        ensure(self.value(row).len() == n, || {
            format!("add_row: row has {} entries, expected {n}", self.value(row).len())
        })?;
        let r = self.value(row);
        let mut value = self.value(x).to_vec();
        for i in 0..m {
            for (v, b) in value[i * n..(i + 1) * n].iter_mut().zip(r) {
                *v += b;
            }
        }
        let needs = self.needs(&[x, row]);
        Ok(self.push(vec![m, n], value, Op::AddRow(x, row), needs))
    }

    /// `x[i, j] * col[i]` for a rank-2 `x`.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let (m, n) = self.rank2(x, "mul_col")?;
        ensure(self.value(col).len() == m, || {
            format!("mul_col: column has {} entries, expected {m}", self.value(col).len())
        })?;
        let c = self.value(col);
        let mut value = self.value(x).to_vec();
        for i in 0..m {
            value[i * n..(i + 1) * n].iter_mut().for_each(|v| *v *= c[i]);
        }
        let needs = self.needs(&[x, col]);
        Ok(self.push(vec![m, n], value, Op::MulCol(x, col), needs))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rank2(a, "matmul")?;
        let (k2, n) = self.rank2(b, "matmul")?;
        ensure(k == k2, || format!("matmul: inner dims {k} vs {k2}"))?;
        let value = matmul_nn(self.value(a), self.value(b), m, k, n);
        let needs = self.needs(&[a, b]);
        Ok(self.push(vec![m, n], value, Op::MatMul(a, b), needs))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.rank2(x, "transpose")?;
        let src = self.value(x);
        let mut value = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                value[j * m + i] = src[i * n + j];
            }
        }
        let needs = self.needs(&[x]);
        Ok(self.push(vec![n, m], value, Op::Transpose(x), needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        ensure(n == self.value(x).len(), || {
            format!("reshape: {:?} -> {:?} changes the element count", self.shape(x), shape)
        })?;
        let value = self.value(x).to_vec();
        let needs = self.needs(&[x]);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x), needs))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).iter().map(|v| f(*v)).collect();
        let needs = self.needs(&[x]);
        self.push(self.shape(x).to_vec(), value, op, needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * sigmoid(v), Op::Silu(x))
    }

    fn axis(&self, x: Var, axis: usize, op: &str) -> Result<AxisSplit> {
        let s = self.shape(x);
        ensure(axis < s.len(), || format!("{op}: axis {axis} out of range for rank {}", s.len()))?;
        Ok(AxisSplit::new(s, axis))
    }

    /// Softmax along `axis`, stabilised by subtracting the slice maximum.
    pub fn softmax_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let split = self.axis(x, axis, "softmax_axis")?;
        let src = self.value(x);
        let mut value = vec![0.0; src.len()];
        split.for_each_slice(|idx| {
            let idx: Vec<usize> = idx.collect();
            let max = idx.iter().map(|&i| src[i]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for &i in &idx {
                let e = (src[i] - max).exp();
                value[i] = e;
                total += e;
            }
            for &i in &idx {
                value[i] /= total;
            }
        });
        let needs = self.needs(&[x]);
        Ok(self.push(self.shape(x).to_vec(), value, Op::Softmax { x, axis: split }, needs))
    }

    /// Divides every slice along `axis` by its sum.
    pub fn normalize_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let split = self.axis(x, axis, "normalize_axis")?;
        let src = self.value(x);
        let mut value = vec![0.0; src.len()];
        let mut degenerate = false;
        split.for_each_slice(|idx| {
            let idx: Vec<usize> = idx.collect();
            let total: f64 = idx.iter().map(|&i| src[i]).sum();
            if total == 0.0 || !total.is_finite() {
                degenerate = true;
            }
            for &i in &idx {
                value[i] = src[i] / total;
            }
        });
        ensure(!degenerate, || "normalize_axis: a slice sums to zero".to_string())?;
        let needs = self.needs(&[x]);
        Ok(self.push(self.shape(x).to_vec(), value, Op::Normalize { x, axis: split }, needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let needs = self.needs(&[x]);
        self.push(vec![1], vec![s], Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let needs = self.needs(&[x]);
        self.push(vec![1], vec![s], Op::Mean(x), needs)
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        ensure(!parts.is_empty(), || "concat: no operands".to_string())?;
        let first = self.shape(parts[0]).to_vec();
        ensure(axis < first.len(), || format!("concat: axis {axis} out of range"))?;
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            ensure(ok, || format!("concat: shape {s:?} incompatible with {first:?}"))?;
            sizes.push(s[axis]);
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total: usize = sizes.iter().sum();
        let mut value = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &len) in parts.iter().zip(&sizes) {
                let v = self.value(p);
                value.extend_from_slice(&v[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let needs = self.needs(parts);
        let parts = parts.iter().copied().zip(sizes).collect();
        Ok(self.push(shape, value, Op::Concat { parts, outer, inner }, needs))
    }

    /// Row `index` of a rank-2 tensor, as a `[1, n]` tensor.
    pub fn row(&mut self, x: Var, index: usize) -> Result<Var> {
        let (m, n) = self.rank2(x, "row")?;
        ensure(index < m, || format!("row: index {index} out of range for {m} rows"))?;
        let value = self.value(x)[index * n..(index + 1) * n].to_vec();
        let needs = self.needs(&[x]);
        Ok(self.push(vec![1, n], value, Op::Row { x, index }, needs))
    }

    /// 2-D convolution of `x: [c_in, h, w]` with `w: [c_out, c_in, k, k]`
    /// and bias `b: [c_out]`, zero padding `k / 2`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        ensure(xs.len() == 3, || format!("conv2d: input must be [c, h, w], got {xs:?}"))?;
        ensure(ws.len() == 4 && ws[2] == ws[3] && ws[2] % 2 == 1, || {
            format!("conv2d: weight must be [c_out, c_in, k, k] with odd k, got {ws:?}")
        })?;
        ensure(ws[1] == xs[0], || format!("conv2d: weight expects {} input channels, got {}", ws[1], xs[0]))?;
        ensure(self.value(b).len() == ws[0], || "conv2d: bias length must equal c_out".to_string())?;
        ensure(stride >= 1, || "conv2d: stride must be positive".to_string())?;
        let geom = ConvGeom { c_in: xs[0], c_out: ws[0], h: xs[1], w: xs[2], k: ws[2], stride };
        let value = conv::forward(&geom, self.value(x), self.value(w), self.value(b));
        let needs = self.needs(&[x, w, b]);
        Ok(self.push(vec![geom.c_out, geom.out_h(), geom.out_w()], value, Op::Conv2d { x, w, b, geom }, needs))
    }

    /// Nearest-neighbour ×2 upsampling of `[c, h, w]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        ensure(s.len() == 3, || format!("upsample2x: input must be [c, h, w], got {s:?}"))?;
        let (c, h, w) = (s[0], s[1], s[2]);
        let src = self.value(x);
        let mut value = vec![0.0; c * 4 * h * w];
        for ch in 0..c {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    value[(ch * 2 * h + i) * 2 * w + j] = src[(ch * h + i / 2) * w + j / 2];
                }
            }
        }
        let needs = self.needs(&[x]);
        Ok(self.push(vec![c, 2 * h, 2 * w], value, Op::Upsample2(x), needs))
    }

    /// Weighted binary cross-entropy `sum(w * bce(p, t)) / sum(w)` with
    /// probabilities clipped to `[PROB_EPS, 1 - PROB_EPS]`.
    pub fn bce(&mut self, p: Var, target: &[f64], weight: &[f64]) -> Result<Var> {
        let n = self.value(p).len();
        ensure(target.len() == n && weight.len() == n, || {
            format!("bce: target/weight lengths {}/{} != {n}", target.len(), weight.len())
        })?;
        let denom: f64 = weight.iter().sum();
        ensure(denom > 0.0, || "bce: no weighted pixels".to_string())?;
        let total: f64 = self
            .value(p)
            .iter()
            .zip(target)
            .zip(weight)
            .filter(|(_, w)| **w != 0.0)
            .map(|((pv, t), w)| w * bce_term(*pv, *t))
            .sum();
        let needs = self.needs(&[p]);
        let op = Op::Bce { p, target: target.to_vec(), weight: weight.to_vec(), denom };
        Ok(self.push(vec![1], vec![total / denom], op, needs))
    }

    /// `1 - (sum(p t) + 1) / (sum(p) + sum(t) - sum(p t) + 1)`.
    pub fn soft_iou(&mut self, p: Var, target: &[f64]) -> Result<Var> {
        ensure(target.len() == self.value(p).len(), || "soft_iou: length mismatch".to_string())?;
        let (i, sp, st) = soft_iou_parts(self.value(p), target);
        let loss = 1.0 - (i + IOU_SMOOTH) / (sp + st - i + IOU_SMOOTH);
        let needs = self.needs(&[p]);
        Ok(self.push(vec![1], vec![loss], Op::SoftIou { p, target: target.to_vec() }, needs))
    }

    /// Reverse pass from a single-element `loss`. Gradients are available via
    /// [`Tape::grad`] until the next call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        ensure(self.value(loss).len() == 1, || {
            format!("backward: loss must be a single value, got shape {:?}", self.shape(loss))
        })?;
        if !self.value(loss)[0].is_finite() {
            return Err(Error::Contract("backward: loss is not finite".into()));
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            backprop(nodes, &node.op, &node.value, &g, &mut grads[..i]);
            grads[i] = Some(g);
        }
        for (slot, node) in grads.iter_mut().zip(nodes) {
            if !node.needs_grad {
                *slot = None;
            }
        }
        self.grads = grads;
        Ok(())
    }
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let n = &nodes[v.0];
    if !n.needs_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]))
}

fn backprop(nodes: &[Node], op: &Op, out: &[f64], g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| nodes[v.0].value.as_slice();
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if let Some(ga) = slot(nodes, grads, v) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if let Some(ga) = slot(nodes, grads, *a) {
                for k in 0..g.len() {
                    ga[k] += g[k] * bv[k];
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for k in 0..g.len() {
                    gb[k] += g[k] * av[k];
                }
            }
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if let Some(ga) = slot(nodes, grads, *a) {
                for k in 0..g.len() {
                    ga[k] += g[k] / bv[k];
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for k in 0..g.len() {
                    gb[k] -= g[k] * av[k] / (bv[k] * bv[k]);
                }
            }
        }
        Op::Affine(x, scale) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += scale * b);
            }
        }
        Op::AddRow(x, row) => {
            let n = nodes[x.0].shape[1];
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            if let Some(gr) = slot(nodes, grads, *row) {
                for chunk in g.chunks(n) {
                    gr.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                }
            }
        }
        Op::MulCol(x, col) => {
            let n = nodes[x.0].shape[1];
            let (xv, cv) = (val(*x), val(*col));
            if let Some(gx) = slot(nodes, grads, *x) {
                for (k, gk) in g.iter().enumerate() {
                    gx[k] += gk * cv[k / n];
                }
            }
            if let Some(gc) = slot(nodes, grads, *col) {
                for (i, chunk) in g.chunks(n).enumerate() {
                    gc[i] += chunk.iter().zip(&xv[i * n..(i + 1) * n]).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
            let n = nodes[b.0].shape[1];
            let (av, bv) = (val(*a), val(*b));
            if let Some(ga) = slot(nodes, grads, *a) {
                // ga[m,k] += g[m,n] * b[k,n]^T
                for i in 0..m {
                    let gi = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let bp = &bv[p * n..(p + 1) * n];
                        ga[i * k + p] += gi.iter().zip(bp).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                // gb[k,n] += a[m,k]^T * g[m,n]
                for i in 0..m {
                    let gi = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let aip = av[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        for (dst, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(gi) {
                            *dst += aip * gv;
                        }
                    }
                }
            }
        }
        Op::Transpose(x) => {
            let (m, n) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
            if let Some(gx) = slot(nodes, grads, *x) {
                for i in 0..m {
                    for j in 0..n {
                        gx[i * n + j] += g[j * m + i];
                    }
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        Op::Sigmoid(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for k in 0..g.len() {
                    gx[k] += g[k] * out[k] * (1.0 - out[k]);
                }
            }
        }
        Op::Tanh(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for k in 0..g.len() {
                    gx[k] += g[k] * (1.0 - out[k] * out[k]);
                }
            }
        }
        Op::Silu(x) => {
            let xv = val(*x);
            if let Some(gx) = slot(nodes, grads, *x) {
                for k in 0..g.len() {
                    let s = sigmoid(xv[k]);
                    gx[k] += g[k] * (s + xv[k] * s * (1.0 - s));
                }
            }
        }
        Op::Softmax { x, axis } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                axis.for_each_slice(|idx| {
                    let idx: Vec<usize> = idx.collect();
                    let dot: f64 = idx.iter().map(|&i| g[i] * out[i]).sum();
                    for &i in &idx {
                        gx[i] += out[i] * (g[i] - dot);
                    }
                });
            }
        }
        Op::Normalize { x, axis } => {
            let xv = val(*x);
            if let Some(gx) = slot(nodes, grads, *x) {
                axis.for_each_slice(|idx| {
                    let idx: Vec<usize> = idx.collect();
                    let total: f64 = idx.iter().map(|&i| xv[i]).sum();
                    let dot: f64 = idx.iter().map(|&i| g[i] * out[i]).sum();
                    for &i in &idx {
                        gx[i] += (g[i] - dot) / total;
                    }
                });
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().for_each(|a| *a += g[0]);
            }
        }
        Op::Mean(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let s = g[0] / gx.len() as f64;
                gx.iter_mut().for_each(|a| *a += s);
            }
        }
        Op::Concat { parts, outer, inner } => {
            let total: usize = parts.iter().map(|(_, len)| len).sum();
            let mut offset = 0;
            for &(p, len) in parts {
                if let Some(gp) = slot(nodes, grads, p) {
                    for o in 0..*outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                        gp[o * len * inner..(o + 1) * len * inner].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                    }
                }
                offset += len;
            }
        }
        Op::Row { x, index } => {
            let n = g.len();
            if let Some(gx) = slot(nodes, grads, *x) {
                gx[index * n..(index + 1) * n].iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        Op::Conv2d { x, w, b, geom } => {
            let (xv, wv) = (val(*x), val(*w));
            // Inputs are distinct nodes; temporarily take their buffers so the
            // kernel can hold all three mutably.
            let mut gx = slot(nodes, grads, *x).map(std::mem::take);
            let mut gw = slot(nodes, grads, *w).map(std::mem::take);
            let mut gb = slot(nodes, grads, *b).map(std::mem::take);
            conv::backward(geom, xv, wv, g, gx.as_deref_mut(), gw.as_deref_mut(), gb.as_deref_mut());
            for (v, buf) in [(*x, gx), (*w, gw), (*b, gb)] {
                if let Some(buf) = buf {
                    grads[v.0] = Some(buf);
                }
            }
        }
        Op::Upsample2(x) => {
            let s = &nodes[x.0].shape;
            let (c, h, w) = (s[0], s[1], s[2]);
            if let Some(gx) = slot(nodes, grads, *x) {
                for ch in 0..c {
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            gx[(ch * h + i / 2) * w + j / 2] += g[(ch * 2 * h + i) * 2 * w + j];
                        }
                    }
                }
            }
        }
        Op::Bce { p, target, weight, denom } => {
            let pv = val(*p);
            if let Some(gp) = slot(nodes, grads, *p) {
                let s = g[0] / denom;
                for k in 0..pv.len() {
                    if weight[k] != 0.0 {
                        gp[k] += s * weight[k] * bce_slope(pv[k], target[k]);
                    }
                }
            }
        }
        Op::SoftIou { p, target } => {
            let pv = val(*p);
            if let Some(gp) = slot(nodes, grads, *p) {
                let (i, sp, st) = soft_iou_parts(pv, target);
                let num = i + IOU_SMOOTH;
                let den = sp + st - i + IOU_SMOOTH;
                for k in 0..pv.len() {
                    let t = target[k];
                    // d(num/den)/dp_k = (t den - num (1 - t)) / den^2
                    gp[k] -= g[0] * (t * den - num * (1.0 - t)) / (den * den);
                }
            }
        }
    }
}

pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
    out
}
