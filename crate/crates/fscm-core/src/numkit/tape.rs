//! Eager evaluation tape with reverse-mode gradient accumulation.
//!
//! Each primitive computes its forward value when recorded; `backward`
//! replays the record in exact reverse order and pushes adjoints to the
//! operands. Parameter leaves reference tensors owned by a [`ParamSet`], so
//! tapes stay cheap to build per session and gradients accumulate into an
//! external [`GradBuf`].
//!
//! Shape mismatches are programming errors and abort via panic with a
//! descriptive message.

use super::params::{GradBuf, ParamSet};
use super::tensor::Tensor;

/// Handle to a tape variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(u32);

/// Probabilities are clamped to this range inside binary cross-entropy.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Row { table: VarId, row: usize },
    Concat { parts: Vec<VarId> },
    MatVec { w: VarId, x: VarId },
    Add { a: VarId, b: VarId },
    Sub { a: VarId, b: VarId },
    Mul { a: VarId, b: VarId },
    Sigmoid { x: VarId },
    Tanh { x: VarId },
    Softmax { x: VarId },
    Dot { a: VarId, b: VarId },
    Sum { x: VarId },
    StackScalars { parts: Vec<VarId> },
    WeightedSum { weights: VarId, vectors: Vec<VarId> },
    Bce { p: VarId, label: f64 },
}

#[derive(Debug)]
enum Node {
    Const(Tensor),
    Param(usize),
    Op { op: Op, value: Tensor },
}

pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    param_vars: Vec<Option<VarId>>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Tape { params, nodes: Vec::new(), param_vars: vec![None; params.len()] }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: VarId) -> &[f64] {
        match &self.nodes[v.0 as usize] {
            Node::Const(t) => t.data(),
            Node::Param(i) => self.params.value(*i).data(),
            Node::Op { value, .. } => value.data(),
        }
    }

    pub fn shape(&self, v: VarId) -> &[usize] {
        match &self.nodes[v.0 as usize] {
            Node::Const(t) => t.shape(),
            Node::Param(i) => self.params.value(*i).shape(),
            Node::Op { value, .. } => value.shape(),
        }
    }

    pub fn scalar_value(&self, v: VarId) -> f64 {
        let data = self.value(v);
        assert_eq!(data.len(), 1, "expected scalar, got {} elements", data.len());
        data[0]
    }

    pub fn constant(&mut self, t: Tensor) -> VarId {
        self.push(Node::Const(t))
    }

    pub fn zeros(&mut self, n: usize) -> VarId {
        self.constant(Tensor::zeros(&[n]))
    }

    /// Leaf for parameter `index` of the bound `ParamSet`; registered once
    /// per tape and reused afterwards.
    pub fn param(&mut self, index: usize) -> VarId {
        if let Some(v) = self.param_vars[index] {
            return v;
        }
        let v = self.push(Node::Param(index));
        self.param_vars[index] = Some(v);
        v
    }

    fn push(&mut self, node: Node) -> VarId {
        if let Node::Op { value, op } = &node {
            debug_assert!(value.is_finite(), "non-finite forward value from {op:?}");
        }
        let id = VarId(u32::try_from(self.nodes.len()).expect("tape overflow"));
        self.nodes.push(node);
        id
    }

    fn push_op(&mut self, op: Op, value: Tensor) -> VarId {
        self.push(Node::Op { op, value })
    }

    /// Embedding lookup: row `row` of a rank-2 parameter.
    pub fn row(&mut self, table: VarId, row: usize) -> VarId {
        let shape = self.shape(table);
        assert_eq!(shape.len(), 2, "row() needs a matrix, got shape {shape:?}");
        let (rows, cols) = (shape[0], shape[1]);
        assert!(row < rows, "row {row} out of range for table with {rows} rows");
        let data = self.value(table)[row * cols..(row + 1) * cols].to_vec();
        self.push_op(Op::Row { table, row }, Tensor::vector(data))
    }

    pub fn concat(&mut self, parts: &[VarId]) -> VarId {
        assert!(!parts.is_empty(), "concat of zero vectors");
        let mut data = Vec::new();
        for &p in parts {
            assert_eq!(self.shape(p).len(), 1, "concat expects vectors");
            data.extend_from_slice(self.value(p));
        }
        self.push_op(Op::Concat { parts: parts.to_vec() }, Tensor::vector(data))
    }

    pub fn matvec(&mut self, w: VarId, x: VarId) -> VarId {
        let ws = self.shape(w);
        let xs = self.shape(x);
        assert!(
            ws.len() == 2 && xs.len() == 1 && ws[1] == xs[0],
            "matvec shape mismatch: {ws:?} x {xs:?}"
        );
        let (m, n) = (ws[0], ws[1]);
        let wd = self.value(w);
        let xd = self.value(x);
        let mut out = vec![0.0; m];
        for r in 0..m {
            let rowd = &wd[r * n..(r + 1) * n];
            let mut acc = 0.0;
            for c in 0..n {
                acc += rowd[c] * xd[c];
            }
            out[r] = acc;
        }
        self.push_op(Op::MatVec { w, x }, Tensor::vector(out))
    }

    fn zip_elementwise(&mut self, a: VarId, b: VarId, f: impl Fn(f64, f64) -> f64, op: Op) -> VarId {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "elementwise shape mismatch: {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let data: Vec<f64> =
            self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        self.push_op(op, Tensor::new(shape, data))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        self.zip_elementwise(a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        self.zip_elementwise(a, b, |x, y| x - y, Op::Sub { a, b })
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        self.zip_elementwise(a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn sigmoid(&mut self, x: VarId) -> VarId {
        let data: Vec<f64> = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push_op(Op::Sigmoid { x }, Tensor::new(shape, data))
    }

    pub fn tanh(&mut self, x: VarId) -> VarId {
        let data: Vec<f64> = self.value(x).iter().map(|&v| v.tanh()).collect();
        let shape = self.shape(x).to_vec();
        self.push_op(Op::Tanh { x }, Tensor::new(shape, data))
    }

    /// Numerically stable softmax over a vector of logits.
    pub fn softmax(&mut self, x: VarId) -> VarId {
        assert_eq!(self.shape(x).len(), 1, "softmax expects a vector");
        let data = softmax_values(self.value(x));
        self.push_op(Op::Softmax { x }, Tensor::vector(data))
    }

    pub fn dot(&mut self, a: VarId, b: VarId) -> VarId {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "dot shape mismatch: {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let s: f64 = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).sum();
        self.push_op(Op::Dot { a, b }, Tensor::scalar(s))
    }

    pub fn sum(&mut self, x: VarId) -> VarId {
        let s: f64 = self.value(x).iter().sum();
        self.push_op(Op::Sum { x }, Tensor::scalar(s))
    }

    /// Pack scalar variables into one vector.
    pub fn stack_scalars(&mut self, parts: &[VarId]) -> VarId {
        let mut data = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.len(), 1, "stack_scalars expects scalars");
            data.push(v[0]);
        }
        self.push_op(Op::StackScalars { parts: parts.to_vec() }, Tensor::vector(data))
    }

    /// `sum_k weights[k] * vectors[k]`, all vectors of one dimension.
    pub fn weighted_sum(&mut self, weights: VarId, vectors: &[VarId]) -> VarId {
        assert_eq!(
            self.shape(weights),
            &[vectors.len()],
            "weighted_sum: {} weights for {} vectors",
            self.shape(weights)[0],
            vectors.len()
        );
        assert!(!vectors.is_empty(), "weighted_sum of zero vectors");
        let dim = self.shape(vectors[0])[0];
        let mut out = vec![0.0; dim];
        for (k, &v) in vectors.iter().enumerate() {
            assert_eq!(self.shape(v), &[dim], "weighted_sum vector {k} has wrong dimension");
            let w = self.value(weights)[k];
            for (o, &x) in out.iter_mut().zip(self.value(v)) {
                *o += w * x;
            }
        }
        self.push_op(
            Op::WeightedSum { weights, vectors: vectors.to_vec() },
            Tensor::vector(out),
        )
    }

    /// Binary cross-entropy of a scalar probability against a 0/1 label,
    /// with the probability clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`.
    pub fn bce(&mut self, p: VarId, label: f64) -> VarId {
        assert!(label == 0.0 || label == 1.0, "bce label must be 0 or 1, got {label}");
        let praw = self.scalar_value(p);
        let pc = praw.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let loss = -(label * pc.ln() + (1.0 - label) * (1.0 - pc).ln());
        self.push_op(Op::Bce { p, label }, Tensor::scalar(loss))
    }

    /// Reverse sweep from a scalar loss; gradients of parameter leaves are
    /// accumulated into `grads`.
    pub fn backward(&mut self, loss: VarId, grads: &mut GradBuf) {
        assert_eq!(grads.num_slots(), self.params.len(), "grad buffer does not match params");
        let loss_val = self.value(loss);
        assert_eq!(loss_val.len(), 1, "backward needs a scalar loss, got {} elements", loss_val.len());
        assert!(loss_val[0].is_finite(), "backward on non-finite loss {}", loss_val[0]);

        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[loss.0 as usize] = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = adj[i].take() else { continue };
            match &self.nodes[i] {
                Node::Const(_) => {}
                Node::Param(p) => {
                    for (slot, gi) in grads.slot_mut(*p).iter_mut().zip(&g) {
                        *slot += gi;
                    }
                }
                Node::Op { op, value } => {
                    // Clone the op descriptor so `self` can be read while
                    // adjoints are updated.
                    let op = op.clone();
                    let out = value.data().to_vec();
                    self.backprop_op(&op, &out, &g, &mut adj);
                }
            }
        }
    }

    fn accumulate(&self, adj: &mut [Option<Vec<f64>>], v: VarId, push: impl FnOnce(&mut [f64])) {
        let slot = &mut adj[v.0 as usize];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.value(v).len()]);
        }
        push(slot.as_mut().unwrap());
    }

    fn backprop_op(&self, op: &Op, out: &[f64], g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        match *op {
            Op::Row { table, row } => {
                let cols = self.shape(table)[1];
                self.accumulate(adj, table, |a| {
                    for (c, gi) in g.iter().enumerate() {
                        a[row * cols + c] += gi;
                    }
                });
            }
            Op::Concat { ref parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.accumulate(adj, p, |a| {
                        for (ai, gi) in a.iter_mut().zip(&g[offset..offset + len]) {
                            *ai += gi;
                        }
                    });
                    offset += len;
                }
            }
            Op::MatVec { w, x } => {
                let (m, n) = (self.shape(w)[0], self.shape(w)[1]);
                let xd = self.value(x);
                let wd = self.value(w);
                self.accumulate(adj, w, |a| {
                    for r in 0..m {
                        let gr = g[r];
                        for c in 0..n {
                            a[r * n + c] += gr * xd[c];
                        }
                    }
                });
                self.accumulate(adj, x, |a| {
                    for r in 0..m {
                        let gr = g[r];
                        let rowd = &wd[r * n..(r + 1) * n];
                        for c in 0..n {
                            a[c] += gr * rowd[c];
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                self.accumulate(adj, a, |v| add_into(v, g));
                self.accumulate(adj, b, |v| add_into(v, g));
            }
            Op::Sub { a, b } => {
                self.accumulate(adj, a, |v| add_into(v, g));
                self.accumulate(adj, b, |v| {
                    for (vi, gi) in v.iter_mut().zip(g) {
                        *vi -= gi;
                    }
                });
            }
            Op::Mul { a, b } => {
                let ad = self.value(a);
                let bd = self.value(b);
                self.accumulate(adj, a, |v| {
                    for ((vi, gi), bi) in v.iter_mut().zip(g).zip(bd) {
                        *vi += gi * bi;
                    }
                });
                self.accumulate(adj, b, |v| {
                    for ((vi, gi), ai) in v.iter_mut().zip(g).zip(ad) {
                        *vi += gi * ai;
                    }
                });
            }
            Op::Sigmoid { x } => {
                self.accumulate(adj, x, |v| {
                    for ((vi, gi), s) in v.iter_mut().zip(g).zip(out) {
                        *vi += gi * s * (1.0 - s);
                    }
                });
            }
            Op::Tanh { x } => {
                self.accumulate(adj, x, |v| {
                    for ((vi, gi), y) in v.iter_mut().zip(g).zip(out) {
                        *vi += gi * (1.0 - y * y);
                    }
                });
            }
            Op::Softmax { x } => {
                let sg: f64 = out.iter().zip(g).map(|(&s, &gi)| s * gi).sum();
                self.accumulate(adj, x, |v| {
                    for ((vi, gi), s) in v.iter_mut().zip(g).zip(out) {
                        *vi += s * (gi - sg);
                    }
                });
            }
            Op::Dot { a, b } => {
                let ad = self.value(a);
                let bd = self.value(b);
                let gs = g[0];
                self.accumulate(adj, a, |v| {
                    for (vi, bi) in v.iter_mut().zip(bd) {
                        *vi += gs * bi;
                    }
                });
                self.accumulate(adj, b, |v| {
                    for (vi, ai) in v.iter_mut().zip(ad) {
                        *vi += gs * ai;
                    }
                });
            }
            Op::Sum { x } => {
                let gs = g[0];
                self.accumulate(adj, x, |v| {
                    for vi in v.iter_mut() {
                        *vi += gs;
                    }
                });
            }
            Op::StackScalars { ref parts } => {
                for (k, &p) in parts.iter().enumerate() {
                    let gk = g[k];
                    self.accumulate(adj, p, |v| v[0] += gk);
                }
            }
            Op::WeightedSum { weights, ref vectors } => {
                let wd = self.value(weights).to_vec();
                for (k, &vec_id) in vectors.iter().enumerate() {
                    let vd = self.value(vec_id);
                    let dw: f64 = g.iter().zip(vd).map(|(&gi, &xi)| gi * xi).sum();
                    self.accumulate(adj, weights, |v| v[k] += dw);
                    let wk = wd[k];
                    self.accumulate(adj, vec_id, |v| {
                        for (vi, gi) in v.iter_mut().zip(g) {
                            *vi += wk * gi;
                        }
                    });
                }
            }
            Op::Bce { p, label } => {
                let praw = self.value(p)[0];
                // The clamp is flat outside its range, so no gradient flows
                // from saturated probabilities.
                let dp = if (PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&praw) {
                    (praw - label) / (praw * (1.0 - praw))
                } else {
                    0.0
                };
                let gs = g[0];
                self.accumulate(adj, p, |v| v[0] += gs * dp);
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_values(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Weight handles for one GRU cell.
#[derive(Debug, Clone, Copy)]
pub struct GruWeights {
    pub w_z: VarId,
    pub u_z: VarId,
    pub b_z: VarId,
    pub w_r: VarId,
    pub u_r: VarId,
    pub b_r: VarId,
    pub w_h: VarId,
    pub u_h: VarId,
    pub b_h: VarId,
}

/// Standard GRU cell: update gate z, reset gate r, candidate state with the
/// reset applied inside the recurrent term.
///
/// z = sigmoid(Wz x + Uz h + bz)
/// r = sigmoid(Wr x + Ur h + br)
/// c = tanh(Wh x + Uh (r * h) + bh)
/// h' = (1 - z) * h + z * c
pub fn gru_cell(tape: &mut Tape, w: &GruWeights, x: VarId, h: VarId) -> VarId {
    let gate = |tape: &mut Tape, wi: VarId, ui: VarId, bi: VarId, hin: VarId| {
        let a = tape.matvec(wi, x);
        let b = tape.matvec(ui, hin);
        let ab = tape.add(a, b);
        tape.add(ab, bi)
    };
    let z_pre = gate(tape, w.w_z, w.u_z, w.b_z, h);
    let z = tape.sigmoid(z_pre);
    let r_pre = gate(tape, w.w_r, w.u_r, w.b_r, h);
    let r = tape.sigmoid(r_pre);
    let rh = tape.mul(r, h);
    let c_pre = gate(tape, w.w_h, w.u_h, w.b_h, rh);
    let c = tape.tanh(c_pre);
    // h' = h - z*h + z*c
    let zh = tape.mul(z, h);
    let zc = tape.mul(z, c);
    let keep = tape.sub(h, zh);
    tape.add(keep, zc)
}

/// Central finite difference of `loss` with respect to one parameter
/// element. Used by the gradient-check tests as the independent oracle.
pub fn central_difference(
    params: &mut ParamSet,
    param_index: usize,
    elem: usize,
    step: f64,
    mut loss: impl FnMut(&ParamSet) -> f64,
) -> f64 {
    let original = params.value(param_index).data()[elem];
    params.value_mut(param_index).data_mut()[elem] = original + step;
    let up = loss(params);
    params.value_mut(param_index).data_mut()[elem] = original - step;
    let down = loss(params);
    params.value_mut(param_index).data_mut()[elem] = original;
    (up - down) / (2.0 * step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::params::ParamKind;

    fn param_set(tensors: &[(&str, Tensor)]) -> ParamSet {
        let mut p = ParamSet::new();
        for (name, t) in tensors {
            p.add(*name, ParamKind::Matrix, t.clone());
        }
        p
    }

    #[test]
    fn softmax_equal_logits() {
        let p = ParamSet::new();
        let mut tape = Tape::new(&p);
        let x = tape.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let s = tape.softmax(x);
        for v in tape.value(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let total: f64 = tape.value(s).iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_at_zero() {
        let p = ParamSet::new();
        let mut tape = Tape::new(&p);
        let x = tape.constant(Tensor::scalar(0.0));
        let s = tape.sigmoid(x);
        assert_eq!(tape.scalar_value(s), 0.5);
    }

    #[test]
    fn matvec_identity() {
        let p = ParamSet::new();
        let mut tape = Tape::new(&p);
        let w = tape.constant(Tensor::identity(3));
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = tape.matvec(w, x);
        assert_eq!(tape.value(y), &[1.0, 2.0, 3.0]);
    }

    #[test]
    #[should_panic(expected = "matvec shape mismatch")]
    fn matvec_shape_mismatch_panics() {
        let p = ParamSet::new();
        let mut tape = Tape::new(&p);
        let w = tape.constant(Tensor::identity(3));
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        tape.matvec(w, x);
    }

    #[test]
    fn quadratic_gradient() {
        let mut p = param_set(&[("x", Tensor::vector(vec![1.0, 2.0]))]);
        let mut grads = GradBuf::zeros_like(&p);
        let mut tape = Tape::new(&p);
        let x = tape.param(0);
        let xx = tape.mul(x, x);
        let loss = tape.sum(xx);
        assert_eq!(tape.scalar_value(loss), 5.0);
        tape.backward(loss, &mut grads);
        assert_eq!(grads.slot(0), &[2.0, 4.0]);

        // Matches the finite-difference oracle as well.
        for elem in 0..2 {
            let fd = central_difference(&mut p, 0, elem, 1e-5, |ps| {
                let mut t = Tape::new(ps);
                let x = t.param(0);
                let xx = t.mul(x, x);
                let l = t.sum(xx);
                t.scalar_value(l)
            });
            assert!((fd - grads.slot(0)[elem]).abs() < 1e-8);
        }
    }

    #[test]
    fn sigmoid_dot_gradient() {
        // loss = sigmoid(w . x) with w = 0 gives grad w = 0.25 * x.
        let p = param_set(&[("w", Tensor::vector(vec![0.0, 0.0, 0.0]))]);
        let mut grads = GradBuf::zeros_like(&p);
        let mut tape = Tape::new(&p);
        let w = tape.param(0);
        let x = tape.constant(Tensor::vector(vec![1.0, -2.0, 3.0]));
        let d = tape.dot(w, x);
        let loss = tape.sigmoid(d);
        tape.backward(loss, &mut grads);
        assert_eq!(grads.slot(0), &[0.25, -0.5, 0.75]);
    }

    #[test]
    #[should_panic(expected = "scalar loss")]
    fn backward_rejects_non_scalar() {
        let p = param_set(&[("x", Tensor::vector(vec![1.0, 2.0]))]);
        let mut grads = GradBuf::zeros_like(&p);
        let mut tape = Tape::new(&p);
        let x = tape.param(0);
        let y = tape.mul(x, x);
        tape.backward(y, &mut grads);
    }

    #[test]
    fn gru_zero_weights_zero_state() {
        // With all weights zero and h = 0: z = 0.5, r = 0.5, candidate = 0,
        // so the next state stays exactly zero regardless of x.
        let hidden = 3;
        let input = 2;
        let p = param_set(&[
            ("w_z", Tensor::zeros(&[hidden, input])),
            ("u_z", Tensor::zeros(&[hidden, hidden])),
            ("b_z", Tensor::zeros(&[hidden])),
            ("w_r", Tensor::zeros(&[hidden, input])),
            ("u_r", Tensor::zeros(&[hidden, hidden])),
            ("b_r", Tensor::zeros(&[hidden])),
            ("w_h", Tensor::zeros(&[hidden, input])),
            ("u_h", Tensor::zeros(&[hidden, hidden])),
            ("b_h", Tensor::zeros(&[hidden])),
        ]);
        let mut tape = Tape::new(&p);
        let w = GruWeights {
            w_z: tape.param(0),
            u_z: tape.param(1),
            b_z: tape.param(2),
            w_r: tape.param(3),
            u_r: tape.param(4),
            b_r: tape.param(5),
            w_h: tape.param(6),
            u_h: tape.param(7),
            b_h: tape.param(8),
        };
        let x = tape.constant(Tensor::vector(vec![4.2, -1.3]));
        let h = tape.zeros(hidden);
        let out = gru_cell(&mut tape, &w, x, h);
        assert_eq!(tape.value(out), &[0.0, 0.0, 0.0]);
    }

    /// Independent straight-line evaluation of the GRU gate equations,
    /// deliberately not sharing any code with the tape path.
    fn gru_reference(
        w_z: &Tensor,
        u_z: &Tensor,
        b_z: &Tensor,
        w_r: &Tensor,
        u_r: &Tensor,
        b_r: &Tensor,
        w_h: &Tensor,
        u_h: &Tensor,
        b_h: &Tensor,
        x: &[f64],
        h: &[f64],
    ) -> Vec<f64> {
        let hidden = h.len();
        let mv = |m: &Tensor, v: &[f64]| -> Vec<f64> {
            (0..m.shape()[0])
                .map(|r| m.row(r).iter().zip(v).map(|(&a, &b)| a * b).sum())
                .collect()
        };
        let wzx = mv(w_z, x);
        let uzh = mv(u_z, h);
        let wrx = mv(w_r, x);
        let urh = mv(u_r, h);
        let mut out = vec![0.0; hidden];
        let mut r = vec![0.0; hidden];
        let mut z = vec![0.0; hidden];
        for i in 0..hidden {
            z[i] = 1.0 / (1.0 + (-(wzx[i] + uzh[i] + b_z.data()[i])).exp());
            r[i] = 1.0 / (1.0 + (-(wrx[i] + urh[i] + b_r.data()[i])).exp());
        }
        let rh: Vec<f64> = r.iter().zip(h).map(|(&ri, &hi)| ri * hi).collect();
        let whx = mv(w_h, x);
        let uhrh = mv(u_h, &rh);
        for i in 0..hidden {
            let cand = (whx[i] + uhrh[i] + b_h.data()[i]).tanh();
            out[i] = (1.0 - z[i]) * h[i] + z[i] * cand;
        }
        out
    }

    #[test]
    fn gru_matches_reference() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(7);
        let hidden = 4;
        let input = 3;
        let mut rnd = |shape: &[usize]| {
            let numel: usize = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect())
        };
        let tensors = [
            ("w_z", rnd(&[hidden, input])),
            ("u_z", rnd(&[hidden, hidden])),
            ("b_z", rnd(&[hidden])),
            ("w_r", rnd(&[hidden, input])),
            ("u_r", rnd(&[hidden, hidden])),
            ("b_r", rnd(&[hidden])),
            ("w_h", rnd(&[hidden, input])),
            ("u_h", rnd(&[hidden, hidden])),
            ("b_h", rnd(&[hidden])),
        ];
        let x: Vec<f64> = (0..input).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h: Vec<f64> = (0..hidden).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let expected = gru_reference(
            &tensors[0].1,
            &tensors[1].1,
            &tensors[2].1,
            &tensors[3].1,
            &tensors[4].1,
            &tensors[5].1,
            &tensors[6].1,
            &tensors[7].1,
            &tensors[8].1,
            &x,
            &h,
        );

        let refs: Vec<(&str, Tensor)> = tensors.iter().map(|(n, t)| (*n, t.clone())).collect();
        let p = param_set(&refs);
        let mut tape = Tape::new(&p);
        let w = GruWeights {
            w_z: tape.param(0),
            u_z: tape.param(1),
            b_z: tape.param(2),
            w_r: tape.param(3),
            u_r: tape.param(4),
            b_r: tape.param(5),
            w_h: tape.param(6),
            u_h: tape.param(7),
            b_h: tape.param(8),
        };
        let xv = tape.constant(Tensor::vector(x));
        let hv = tape.constant(Tensor::vector(h));
        let out = gru_cell(&mut tape, &w, xv, hv);
        for (got, want) in tape.value(out).iter().zip(&expected) {
            assert!((got - want).abs() < 1e-12, "got {got}, want {want}");
        }
    }

    #[test]
    fn bce_known_value_and_clamp() {
        let p = ParamSet::new();
        let mut tape = Tape::new(&p);
        let half = tape.constant(Tensor::scalar(0.5));
        let l = tape.bce(half, 1.0);
        assert!((tape.scalar_value(l) - 0.5f64.ln().abs()).abs() < 1e-15);

        // A probability of exactly 0 against label 0 clamps instead of
        // producing infinity.
        let zero = tape.constant(Tensor::scalar(0.0));
        let l0 = tape.bce(zero, 1.0);
        assert!(tape.scalar_value(l0).is_finite());
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(99);
        let dim = 4;
        let mut rnd_vec =
            |n: usize| Tensor::vector((0..n).map(|_| rng.gen_range(-0.9..0.9)).collect());
        let mut p = ParamSet::new();
        p.add("a", ParamKind::Matrix, rnd_vec(dim));
        p.add("b", ParamKind::Matrix, rnd_vec(dim));
        p.add("w", ParamKind::Matrix, {
            let data = (0..dim * dim).map(|_| rng.gen_range(-0.9..0.9)).collect();
            Tensor::new(vec![dim, dim], data)
        });

        // One composite loss touching every primitive op.
        let eval = |ps: &ParamSet| -> (f64, Option<GradBuf>) {
            let mut tape = Tape::new(ps);
            let a = tape.param(0);
            let b = tape.param(1);
            let w = tape.param(2);
            let wa = tape.matvec(w, a);
            let s = tape.add(wa, b);
            let d = tape.sub(s, a);
            let m = tape.mul(d, b);
            let sg = tape.sigmoid(m);
            let th = tape.tanh(sg);
            let sm = tape.softmax(th);
            let row0 = tape.row(w, 2);
            let cat = tape.concat(&[sm, row0]);
            let dot = tape.dot(cat, cat);
            let total = tape.sum(cat);
            let stacked = tape.stack_scalars(&[dot, total]);
            let weights = tape.softmax(stacked);
            let ws = tape.weighted_sum(weights, &[sm, row0]);
            let sig = tape.sum(ws);
            let prob = tape.sigmoid(sig);
            let loss = tape.bce(prob, 1.0);
            let val = tape.scalar_value(loss);
            let mut grads = GradBuf::zeros_like(ps);
            tape.backward(loss, &mut grads);
            (val, Some(grads))
        };

        let (_, grads) = eval(&p);
        let grads = grads.unwrap();
        for idx in 0..p.len() {
            for elem in 0..p.value(idx).numel() {
                let analytic = grads.slot(idx)[elem];
                if analytic.abs() < 1e-8 {
                    // Below the resolution of central differences at this step.
                    continue;
                }
                let fd = central_difference(&mut p, idx, elem, 1e-5, |ps| eval(ps).0);
                let denom = analytic.abs().max(fd.abs());
                assert!(
                    (analytic - fd).abs() / denom < 1e-4,
                    "param {idx} elem {elem}: analytic {analytic} vs fd {fd}"
                );
            }
        }
    }
}
