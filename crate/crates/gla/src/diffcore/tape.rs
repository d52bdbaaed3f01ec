//! Define-by-run reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every primitive as it is evaluated; [`Tape::backward`]
//! replays the record in reverse, composing vector-Jacobian products by the
//! chain rule. One tape corresponds to one forward pass over one image pair;
//! the tape is rebuilt from scratch for the next pair (instance count N
//! varies pair to pair).
//!
//! All primitives are permutation-equivariant over rows, except the
//! reductions ([`Tape::sum_rows`], [`Tape::sum_all`]) and
//! [`Tape::softmax_instances`]'s normalizer, which are permutation-invariant.

use crate::error::{Error, Result};

use super::matrix::Matrix;

/// Handle to a node on a [`Tape`]. Only valid for the tape that created it.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    /// out = a (N×K) · b (K×M)
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    /// out[i, c] = x[i, c] + row[0, c]
    AddRow {
        x: NodeId,
        row: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Div {
        a: NodeId,
        b: NodeId,
    },
    /// out = scale·x + shift; only the scale matters going backward
    Affine {
        x: NodeId,
        scale: f64,
    },
    Relu {
        x: NodeId,
    },
    Sigmoid {
        x: NodeId,
    },
    Sqrt {
        x: NodeId,
    },
    Ln {
        x: NodeId,
    },
    /// out = x^exponent, exponent constant
    PowConst {
        x: NodeId,
        exponent: f64,
    },
    /// Constant clamp; gradient passes only strictly inside (lo, hi).
    Clamp {
        x: NodeId,
        lo: f64,
        hi: f64,
    },
    /// Softmax over the N entries of an N×1 column.
    SoftmaxInstances {
        x: NodeId,
    },
    /// N×C -> 1×C column sums.
    SumRows {
        x: NodeId,
    },
    /// N×C -> 1×1 total.
    SumAll {
        x: NodeId,
    },
    /// 1×C -> N×C by repeating the row.
    RepeatRows {
        row: NodeId,
    },
    /// out[i, c] = x[i, c] · s[i, 0]
    ScaleRows {
        x: NodeId,
        s: NodeId,
    },
}

struct Node {
    op: Op,
    value: Matrix,
    grad: Option<Matrix>,
    trainable: bool,
}

/// Recorded computation graph of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

/// Numerically stable logistic sigmoid (branch split on sign).
pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax of a slice; output is positive and sums to 1.
pub fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / total).collect()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Matrix, trainable: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            value,
            grad: None,
            trainable,
        });
        id
    }

    /// Register a constant input. No gradient is accumulated for it.
    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    /// Register a trainable parameter leaf; backward fills its gradient.
    pub fn trainable(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// The value of a 1×1 node.
    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        let v = self.value(id);
        if v.shape() != (1, 1) {
            return Err(Error::contract(format!(
                "expected scalar node, got {}x{}",
                v.rows(),
                v.cols()
            )));
        }
        Ok(v[(0, 0)])
    }

    /// Gradient accumulated by the last [`Tape::backward`], if any reached
    /// this node.
    pub fn grad(&self, id: NodeId) -> Option<&Matrix> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Gradient for a leaf, densified to zeros when no path reached it.
    pub fn grad_or_zeros(&self, id: NodeId) -> Matrix {
        let node = &self.nodes[id.0];
        match &node.grad {
            Some(g) => g.clone(),
            None => Matrix::zeros(node.value.rows(), node.value.cols()),
        }
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        self.value(id).shape()
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::contract(format!(
                "{what}: shape {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    // ── Primitives ──────────────────────────────────────────────────────

    /// Shared per-instance linear map: x (N×Cin) · w (Cin×Cout) + b (1×Cout).
    pub fn pointwise_linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let h = self.matmul(x, w)?;
        self.add_row(h, b)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a).1 != self.shape(b).0 {
            return Err(Error::contract(format!(
                "matmul: {:?} · {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let value = self.value(a).matmul(self.value(b));
        Ok(self.push(Op::MatMul { a, b }, value, false))
    }

    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (_, c) = self.shape(x);
        if self.shape(row) != (1, c) {
            return Err(Error::contract(format!(
                "add_row: {:?} + {:?}",
                self.shape(x),
                self.shape(row)
            )));
        }
        let r = self.value(row).data().to_vec();
        let mut value = self.value(x).clone();
        for i in 0..value.rows() {
            for (j, rv) in r.iter().enumerate() {
                value[(i, j)] += rv;
            }
        }
        Ok(self.push(Op::AddRow { x, row }, value, false))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(Op::Add { a, b }, value, false))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(Op::Sub { a, b }, value, false))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(Op::Mul { a, b }, value, false))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "div")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x / y);
        Ok(self.push(Op::Div { a, b }, value, false))
    }

    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> NodeId {
        let value = self.value(x).map(|v| scale * v + shift);
        self.push(Op::Affine { x, scale }, value, false)
    }

    /// Elementwise max(v, 0). Subgradient at 0 is 0.
    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(Op::Relu { x }, value, false)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(stable_sigmoid);
        self.push(Op::Sigmoid { x }, value, false)
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(f64::sqrt);
        self.push(Op::Sqrt { x }, value, false)
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(f64::ln);
        self.push(Op::Ln { x }, value, false)
    }

    pub fn pow_const(&mut self, x: NodeId, exponent: f64) -> NodeId {
        let value = self.value(x).map(|v| v.powf(exponent));
        self.push(Op::PowConst { x, exponent }, value, false)
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let value = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(Op::Clamp { x, lo, hi }, value, false)
    }

    /// Softmax over the N instances of an N×1 column, max-subtracted for
    /// stability. Output entries are positive and sum to 1 (within 1e-12);
    /// adding a constant to all logits leaves the output unchanged.
    pub fn softmax_instances(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c) = self.shape(x);
        if c != 1 {
            return Err(Error::contract(format!(
                "softmax_instances expects N×1, got {n}x{c}"
            )));
        }
        let value = Matrix::column_vector(&softmax_slice(self.value(x).data()));
        Ok(self.push(Op::SoftmaxInstances { x }, value, false))
    }

    /// Per-channel sum over instances: N×C -> 1×C.
    pub fn sum_rows(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).col_sums();
        self.push(Op::SumRows { x }, value, false)
    }

    /// Total over all entries: N×C -> 1×1.
    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let value = Matrix::from_vec(1, 1, vec![self.value(x).sum()]).expect("scalar");
        self.push(Op::SumAll { x }, value, false)
    }

    /// Broadcast a 1×C row to N×C.
    pub fn repeat_rows(&mut self, row: NodeId, n: usize) -> Result<NodeId> {
        let (r, c) = self.shape(row);
        if r != 1 {
            return Err(Error::contract(format!(
                "repeat_rows expects 1×C, got {r}x{c}"
            )));
        }
        let src = self.value(row).data().to_vec();
        let mut value = Matrix::zeros(n, c);
        for i in 0..n {
            value.data_mut()[i * c..(i + 1) * c].copy_from_slice(&src);
        }
        Ok(self.push(Op::RepeatRows { row }, value, false))
    }

    /// Scale row `i` of x (N×C) by `s[i]` (N×1).
    pub fn scale_rows(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let (n, _) = self.shape(x);
        if self.shape(s) != (n, 1) {
            return Err(Error::contract(format!(
                "scale_rows: x {:?}, s {:?}",
                self.shape(x),
                self.shape(s)
            )));
        }
        let sv = self.value(s).data().to_vec();
        let mut value = self.value(x).clone();
        let cols = value.cols();
        for (i, &si) in sv.iter().enumerate() {
            for v in &mut value.data_mut()[i * cols..(i + 1) * cols] {
                *v *= si;
            }
        }
        Ok(self.push(Op::ScaleRows { x, s }, value, false))
    }

    // ── Backward ────────────────────────────────────────────────────────

    fn accumulate(&mut self, id: NodeId, contribution: Matrix) {
        let node = &mut self.nodes[id.0];
        // Constant leaves never need their gradient materialized.
        if matches!(node.op, Op::Leaf) && !node.trainable {
            return;
        }
        match &mut node.grad {
            Some(g) => g.add_assign(&contribution),
            None => node.grad = Some(contribution),
        }
    }

    /// Reverse sweep from a scalar loss node. Populates the gradient of every
    /// node the loss depends on; fetch them with [`Tape::grad`].
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.backward_done {
            return Err(Error::contract(
                "backward already ran on this tape; record a fresh forward pass first",
            ));
        }
        if self.shape(loss) != (1, 1) {
            return Err(Error::contract(format!(
                "backward needs a scalar loss node, got {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(Matrix::filled(1, 1, 1.0));

        // Creation order is a topological order: every input precedes its use.
        for idx in (0..=loss.0).rev() {
            let Some(g) = self.nodes[idx].grad.clone() else {
                continue;
            };
            match self.nodes[idx].op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let da = g.matmul_nt(self.value(b));
                    let db = self.value(a).matmul_tn(&g);
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::AddRow { x, row } => {
                    self.accumulate(row, g.col_sums());
                    self.accumulate(x, g);
                }
                Op::Add { a, b } => {
                    self.accumulate(a, g.clone());
                    self.accumulate(b, g);
                }
                Op::Sub { a, b } => {
                    self.accumulate(a, g.clone());
                    self.accumulate(b, g.scale(-1.0));
                }
                Op::Mul { a, b } => {
                    let da = g.zip_map(self.value(b), |gv, bv| gv * bv);
                    let db = g.zip_map(self.value(a), |gv, av| gv * av);
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::Div { a, b } => {
                    let bv = self.value(b);
                    let da = g.zip_map(bv, |gv, b| gv / b);
                    let av = self.value(a);
                    let mut db = g.zip_map(av, |gv, a| gv * a);
                    db = db.zip_map(bv, |v, b| -v / (b * b));
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::Affine { x, scale } => {
                    self.accumulate(x, g.scale(scale));
                }
                Op::Relu { x } => {
                    let dx = g.zip_map(self.value(x), |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                    self.accumulate(x, dx);
                }
                Op::Sigmoid { x } => {
                    let out = &self.nodes[idx].value;
                    let dx = g.zip_map(out, |gv, o| gv * o * (1.0 - o));
                    self.accumulate(x, dx);
                }
                Op::Sqrt { x } => {
                    let out = &self.nodes[idx].value;
                    let dx = g.zip_map(out, |gv, o| gv / (2.0 * o));
                    self.accumulate(x, dx);
                }
                Op::Ln { x } => {
                    let dx = g.zip_map(self.value(x), |gv, xv| gv / xv);
                    self.accumulate(x, dx);
                }
                Op::PowConst { x, exponent } => {
                    let dx = g.zip_map(self.value(x), |gv, xv| {
                        gv * exponent * xv.powf(exponent - 1.0)
                    });
                    self.accumulate(x, dx);
                }
                Op::Clamp { x, lo, hi } => {
                    let dx = g.zip_map(
                        self.value(x),
                        |gv, xv| {
                            if xv > lo && xv < hi {
                                gv
                            } else {
                                0.0
                            }
                        },
                    );
                    self.accumulate(x, dx);
                }
                Op::SoftmaxInstances { x } => {
                    let s = &self.nodes[idx].value;
                    let dot: f64 = g
                        .data()
                        .iter()
                        .zip(s.data().iter())
                        .map(|(&gv, &sv)| gv * sv)
                        .sum();
                    let dx = g.zip_map(s, |gv, sv| sv * (gv - dot));
                    self.accumulate(x, dx);
                }
                Op::SumRows { x } => {
                    let (n, c) = self.shape(x);
                    let row = g.data().to_vec();
                    let mut dx = Matrix::zeros(n, c);
                    for i in 0..n {
                        dx.data_mut()[i * c..(i + 1) * c].copy_from_slice(&row);
                    }
                    self.accumulate(x, dx);
                }
                Op::SumAll { x } => {
                    let (n, c) = self.shape(x);
                    self.accumulate(x, Matrix::filled(n, c, g[(0, 0)]));
                }
                Op::RepeatRows { row } => {
                    self.accumulate(row, g.col_sums());
                }
                Op::ScaleRows { x, s } => {
                    let sv = self.value(s).data().to_vec();
                    let xv = self.value(x);
                    let c = xv.cols();
                    let mut dx = g.clone();
                    let mut ds = Matrix::zeros(sv.len(), 1);
                    for i in 0..sv.len() {
                        let mut acc = 0.0;
                        for j in 0..c {
                            acc += g[(i, j)] * xv[(i, j)];
                            dx[(i, j)] *= sv[i];
                        }
                        ds[(i, 0)] = acc;
                    }
                    self.accumulate(x, dx);
                    self.accumulate(s, ds);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::gradcheck::grad_check;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn pointwise_linear_identity_passthrough() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap());
        let w = t.leaf(Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let b = t.leaf(Matrix::row_vector(&[0.0, 0.0]));
        let y = t.pointwise_linear(x, w, b).unwrap();
        assert_eq!(t.value(y), t.value(x));
    }

    #[test]
    fn pointwise_linear_direct_case() {
        // x = [[1,2]], W = [[1],[1]], b = [0.5] -> [[3.5]]
        let mut t = Tape::new();
        let x = t.leaf(Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let w = t.leaf(Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap());
        let b = t.leaf(Matrix::row_vector(&[0.5]));
        let y = t.pointwise_linear(x, w, b).unwrap();
        assert_eq!(t.value(y)[(0, 0)], 3.5);
    }

    #[test]
    fn pointwise_linear_row_equivariant() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5], vec![4.0, 4.0]]).unwrap();
        let w = Matrix::from_rows(&[vec![0.3, -1.0], vec![2.0, 0.1]]).unwrap();
        let b = Matrix::row_vector(&[0.7, -0.2]);
        let perm = [2usize, 0, 1];

        let run = |input: &Matrix| {
            let mut t = Tape::new();
            let xi = t.leaf(input.clone());
            let wi = t.leaf(w.clone());
            let bi = t.leaf(b.clone());
            let y = t.pointwise_linear(xi, wi, bi).unwrap();
            t.value(y).clone()
        };
        let base = run(&x);
        let permuted = run(&x.permute_rows(&perm));
        assert!(base.permute_rows(&perm).max_abs_diff(&permuted) == 0.0);
    }

    #[test]
    fn pointwise_linear_shape_mismatch_is_contract_error() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let w = t.leaf(Matrix::from_rows(&[vec![1.0]]).unwrap());
        let b = t.leaf(Matrix::row_vector(&[0.0]));
        assert!(matches!(
            t.pointwise_linear(x, w, b),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn activation_values() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::row_vector(&[-1.0, 0.0, 2.0]));
        let r = t.relu(x);
        assert_eq!(t.value(r).data(), &[0.0, 0.0, 2.0]);

        let z = t.leaf(Matrix::row_vector(&[0.0]));
        let s = t.sigmoid(z);
        assert_eq!(t.value(s)[(0, 0)], 0.5);

        let l3 = t.leaf(Matrix::row_vector(&[3f64.ln()]));
        let s3 = t.sigmoid(l3);
        assert!(close(t.value(s3)[(0, 0)], 0.75, 1e-15));
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        assert_eq!(stable_sigmoid(-800.0), 0.0);
        assert_eq!(stable_sigmoid(800.0), 1.0);
        assert!(stable_sigmoid(-800.0).is_finite());
    }

    #[test]
    fn softmax_uniform_shift_and_ratio() {
        let mut t = Tape::new();
        let c = t.leaf(Matrix::column_vector(&[7.0; 4]));
        let s = t.softmax_instances(c).unwrap();
        for &v in t.value(s).data() {
            assert!(close(v, 0.25, 1e-15));
        }

        let logits = [1f64.ln(), 2f64.ln(), 3f64.ln()];
        let a = t.leaf(Matrix::column_vector(&logits));
        let shifted: Vec<f64> = logits.iter().map(|v| v + 7.0).collect();
        let b = t.leaf(Matrix::column_vector(&shifted));
        let sa = t.softmax_instances(a).unwrap();
        let sb = t.softmax_instances(b).unwrap();
        let expect = [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0];
        for (i, &want) in expect.iter().enumerate() {
            assert!(close(t.value(sa)[(i, 0)], want, 1e-12));
            assert!(close(t.value(sa)[(i, 0)], t.value(sb)[(i, 0)], 1e-12));
        }
        let total: f64 = t.value(sa).data().iter().sum();
        assert!(close(total, 1.0, 1e-12));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut t = Tape::new();
        let x = t.trainable(Matrix::from_rows(&[vec![1.0, -2.0], vec![3.0, 0.25]]).unwrap());
        let loss = t.sum_all(x);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_half_square_is_identity() {
        let mut t = Tape::new();
        let x = t.trainable(Matrix::from_rows(&[vec![1.5, -2.0], vec![0.0, 4.0]]).unwrap());
        let sq = t.mul(x, x).unwrap();
        let s = t.sum_all(sq);
        let loss = t.affine(s, 0.5, 0.0);
        t.backward(loss).unwrap();
        assert!(t.grad(x).unwrap().max_abs_diff(t.value(x)) < 1e-15);
    }

    #[test]
    fn backward_twice_is_contract_error() {
        let mut t = Tape::new();
        let x = t.trainable(Matrix::row_vector(&[1.0]));
        let loss = t.sum_all(x);
        t.backward(loss).unwrap();
        assert!(matches!(t.backward(loss), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t = Tape::new();
        let x = t.trainable(Matrix::row_vector(&[1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    /// Finite-difference sweep over each primitive: wraps the op in a random
    /// fixed cotangent so the loss is a scalar, then compares the tape
    /// gradient to central differences.
    #[test]
    fn primitive_backwards_match_central_differences() {
        type CaseBuilder = Box<dyn Fn(&mut Tape, NodeId) -> NodeId>;
        let cases: Vec<(&str, CaseBuilder)> = vec![
            ("relu", Box::new(|t, x| t.relu(x))),
            ("sigmoid", Box::new(|t, x| t.sigmoid(x))),
            ("affine", Box::new(|t, x| t.affine(x, -1.7, 0.4))),
            ("softmax", Box::new(|t, x| t.softmax_instances(x).unwrap())),
            (
                "sum_rows_repeat",
                Box::new(|t, x| {
                    let s = t.sum_rows(x);
                    t.repeat_rows(s, t.value(x).rows()).unwrap()
                }),
            ),
            (
                "sqrt_of_square_plus",
                Box::new(|t, x| {
                    let sq = t.mul(x, x).unwrap();
                    let sh = t.affine(sq, 1.0, 0.5);
                    t.sqrt(sh)
                }),
            ),
            (
                "ln_of_sigmoid",
                Box::new(|t, x| {
                    let s = t.sigmoid(x);
                    t.ln(s)
                }),
            ),
            (
                "pow_of_sigmoid",
                Box::new(|t, x| {
                    let s = t.sigmoid(x);
                    t.pow_const(s, 2.0)
                }),
            ),
            (
                "div_by_shifted_square",
                Box::new(|t, x| {
                    let sq = t.mul(x, x).unwrap();
                    let dn = t.affine(sq, 1.0, 1.0);
                    t.div(x, dn).unwrap()
                }),
            ),
        ];

        // Fixed inputs away from the relu kink at 0 and the stationary
        // points of x/(x²+1) at ±1, where the relative-error formula is
        // meaningless.
        let base = [0.3, 0.65, -0.8, -0.55, -0.2];
        let n = base.len();
        let cotangent: Vec<f64> = (0..n).map(|i| 0.3 + ((i * 7) % 5) as f64 * 0.21).collect();

        for (name, build) in &cases {
            let eval = |xs: &[f64]| {
                let mut t = Tape::new();
                let x = t.trainable(Matrix::column_vector(xs));
                let y = build(&mut t, x);
                let w = t.leaf(Matrix::column_vector(&cotangent));
                let wy = t.mul(y, w).unwrap();
                let loss = t.sum_all(wy);
                (t, x, loss)
            };
            let (mut t, x, loss) = eval(&base);
            t.backward(loss).unwrap();
            let analytic = t.grad(x).unwrap().data().to_vec();

            let err = grad_check(
                |xs| {
                    let (t, _, loss) = eval(xs);
                    t.scalar(loss).unwrap()
                },
                &analytic,
                &base,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-7, "{name}: finite-difference mismatch {err}");
        }
    }

    #[test]
    fn matmul_and_bias_backward_match_central_differences() {
        let x = Matrix::from_rows(&[vec![0.3, -0.8], vec![1.2, 0.4], vec![-0.5, 0.9]]).unwrap();
        let w0 = [0.5, -0.3, 0.8, 0.2];
        let b0 = [0.1, -0.6];

        let eval = |wv: &[f64], bv: &[f64]| {
            let mut t = Tape::new();
            let xi = t.leaf(x.clone());
            let wi = t.trainable(Matrix::from_vec(2, 2, wv.to_vec()).unwrap());
            let bi = t.trainable(Matrix::row_vector(bv));
            let y = t.pointwise_linear(xi, wi, bi).unwrap();
            let s = t.sigmoid(y);
            let loss = t.sum_all(s);
            (t, wi, bi, loss)
        };

        let (mut t, wi, bi, loss) = eval(&w0, &b0);
        t.backward(loss).unwrap();
        let dw = t.grad(wi).unwrap().data().to_vec();
        let db = t.grad(bi).unwrap().data().to_vec();

        let err_w = grad_check(
            |wv| {
                let (t, _, _, loss) = eval(wv, &b0);
                t.scalar(loss).unwrap()
            },
            &dw,
            &w0,
            1e-5,
        )
        .unwrap();
        let err_b = grad_check(
            |bv| {
                let (t, _, _, loss) = eval(&w0, bv);
                t.scalar(loss).unwrap()
            },
            &db,
            &b0,
            1e-5,
        )
        .unwrap();
        assert!(err_w < 1e-8, "weight gradient mismatch {err_w}");
        assert!(err_b < 1e-8, "bias gradient mismatch {err_b}");
    }

    #[test]
    fn scale_rows_backward_matches_central_differences() {
        let x0 = [0.4, -0.9, 1.3, 0.2, -0.7, 0.6];
        let s0 = [0.8, -0.3, 1.1];
        let eval = |xv: &[f64], sv: &[f64]| {
            let mut t = Tape::new();
            let x = t.trainable(Matrix::from_vec(3, 2, xv.to_vec()).unwrap());
            let s = t.trainable(Matrix::column_vector(sv));
            let y = t.scale_rows(x, s).unwrap();
            let sig = t.sigmoid(y);
            let loss = t.sum_all(sig);
            (t, x, s, loss)
        };
        let (mut t, x, s, loss) = eval(&x0, &s0);
        t.backward(loss).unwrap();
        let dx = t.grad(x).unwrap().data().to_vec();
        let ds = t.grad(s).unwrap().data().to_vec();

        let ex = grad_check(
            |xv| {
                let (t, _, _, l) = eval(xv, &s0);
                t.scalar(l).unwrap()
            },
            &dx,
            &x0,
            1e-5,
        )
        .unwrap();
        let es = grad_check(
            |sv| {
                let (t, _, _, l) = eval(&x0, sv);
                t.scalar(l).unwrap()
            },
            &ds,
            &s0,
            1e-5,
        )
        .unwrap();
        assert!(ex < 1e-8 && es < 1e-8, "scale_rows gradients {ex} {es}");
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut t = Tape::new();
            let x = t.leaf(Matrix::from_fn(16, 3, |r, c| (r as f64 - c as f64) * 0.37));
            let w = t.leaf(Matrix::from_fn(3, 3, |r, c| ((r + 2 * c) as f64).sin()));
            let b = t.leaf(Matrix::row_vector(&[0.1, 0.2, 0.3]));
            let h = t.pointwise_linear(x, w, b).unwrap();
            let s = t.sigmoid(h);
            let loss = t.sum_all(s);
            t.scalar(loss).unwrap()
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }
}
