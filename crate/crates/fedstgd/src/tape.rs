//! Tape-based reverse-mode differentiation over a closed primitive set.
//!
//! Forward calls record one node per primitive and evaluate eagerly;
//! `backward` walks the record in reverse and accumulates gradients for
//! every parameter leaf. Constants (including aggregate sums received
//! from the server) enter as plain leaves and act as gradient stops.
//!
//! A tape is confined to one thread; distinct tapes may run in parallel.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::tensor::{gamma_map, sigmoid, softmax_rows, Tensor, TensorError, LEAKY_RELU_SLOPE};

#[derive(Debug, Error)]
pub enum TapeError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("node {0} is not on this tape")]
    NotOnTape(usize),
    #[error("loss node must hold a single value, has {0}")]
    NotScalar(usize),
    #[error("duplicate parameter name '{0}'")]
    DuplicateParam(String),
    #[error("non-finite loss value")]
    NonFiniteLoss,
}

pub type NodeId = usize;

/// Map from parameter name to tensor, used for leaves and gradients.
pub type ParamMap = BTreeMap<String, Tensor>;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows(NodeId, usize, usize),
    SliceCols(NodeId, usize, usize),
    Scale(NodeId, f64),
    ScaleByScalar(NodeId, NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    LeakyRelu(NodeId),
    SoftmaxRows(NodeId),
    Gamma(NodeId, NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Abs(NodeId),
}

struct Node {
    op: Op,
    value: Tensor,
    param: Option<String>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<NodeId>,
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    /// Constant leaf: participates in forward values, never in gradients.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, None)
    }

    /// Parameter leaf: receives a gradient entry from `backward`.
    pub fn param(&mut self, name: &str, value: Tensor) -> Result<NodeId, TapeError> {
        if self.nodes.iter().any(|n| n.param.as_deref() == Some(name)) {
            return Err(TapeError::DuplicateParam(name.to_string()));
        }
        Ok(self.push_leaf(value, Some(name.to_string())))
    }

    fn push_leaf(&mut self, value: Tensor, param: Option<String>) -> NodeId {
        let id = self.nodes.len();
        let is_param = param.is_some();
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            param,
        });
        if is_param {
            self.params.push(id);
        }
        id
    }

    fn check(&self, id: NodeId) -> Result<(), TapeError> {
        if id >= self.nodes.len() {
            return Err(TapeError::NotOnTape(id));
        }
        Ok(())
    }

    fn push_op(&mut self, op: Op) -> Result<NodeId, TapeError> {
        let value = self.eval(&op)?;
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            value,
            param: None,
        });
        Ok(id)
    }

    /// Forward evaluation of one primitive from already-recorded inputs.
    /// Shared by recording and replay so both take the same code path.
    fn eval(&self, op: &Op) -> Result<Tensor, TapeError> {
        let v = |id: NodeId| &self.nodes[id].value;
        let out = match op {
            Op::Leaf => unreachable!("leaves are never re-evaluated"),
            Op::MatMul(a, b) => v(*a).matmul(v(*b))?,
            Op::Transpose(a) => v(*a).transpose()?,
            Op::Add(a, b) => v(*a).add(v(*b))?,
            Op::Sub(a, b) => v(*a).sub(v(*b))?,
            Op::AddRow(a, b) => v(*a).add_row_broadcast(v(*b))?,
            Op::Hadamard(a, b) => v(*a).hadamard(v(*b))?,
            Op::ConcatRows(ids) => {
                let parts: Vec<&Tensor> = ids.iter().map(|&i| v(i)).collect();
                Tensor::concat_rows(&parts)?
            }
            Op::ConcatCols(ids) => {
                let parts: Vec<&Tensor> = ids.iter().map(|&i| v(i)).collect();
                Tensor::concat_cols(&parts)?
            }
            Op::SliceRows(a, r0, r1) => v(*a).slice_rows(*r0, *r1)?,
            Op::SliceCols(a, c0, c1) => v(*a).slice_cols(*c0, *c1)?,
            Op::Scale(a, c) => v(*a).scale(*c),
            Op::ScaleByScalar(a, s) => v(*a).scale(v(*s).item()),
            Op::Sigmoid(a) => v(*a).map(sigmoid),
            Op::Tanh(a) => v(*a).map(f64::tanh),
            Op::Relu(a) => v(*a).map(|x| if x > 0.0 { x } else { 0.0 }),
            Op::LeakyRelu(a) => v(*a).map(|x| if x > 0.0 { x } else { LEAKY_RELU_SLOPE * x }),
            Op::SoftmaxRows(a) => softmax_rows(v(*a))?,
            Op::Gamma(a, b) => gamma_map(v(*a), v(*b))?,
            Op::Sum(a) => Tensor::scalar(v(*a).sum()),
            Op::Mean(a) => Tensor::scalar(v(*a).mean()),
            Op::Abs(a) => v(*a).map(f64::abs),
        };
        Ok(out)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.check(a)?;
        self.check(b)?;
        self.push_op(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.check(a)?;
        self.push_op(Op::Transpose(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.check(a)?;
        self.check(b)?;
        self.push_op(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.check(a)?;
        self.check(b)?;
        self.push_op(Op::Sub(a, b))
    }

    /// Broadcast-add a 1 x m row (bias) to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId, TapeError> {
        self.check(a)?;
        self.check(row)?;
        self.push_op(Op::AddRow(a, row))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.check(a)?;
        self.check(b)?;
        self.push_op(Op::Hadamard(a, b))
    }

    pub fn concat_rows(&mut self, ids: &[NodeId]) -> Result<NodeId, TapeError> {
        for &id in ids {
            self.check(id)?;
        }
        self.push_op(Op::ConcatRows(ids.to_vec()))
    }

    pub fn concat_cols(&mut self, ids: &[NodeId]) -> Result<NodeId, TapeError> {
        for &id in ids {
            self.check(id)?;
        }
        self.push_op(Op::ConcatCols(ids.to_vec()))
    }

    pub fn slice_rows(&mut self, a: NodeId, r0: usize, r1: usize) -> Result<NodeId, TapeError> {
        self.check(a)?;
        self.push_op(Op::SliceRows(a, r0, r1))
    }

    pub fn slice_cols(&mut self, a: NodeId, c0: usize, c1: usize) -> Result<NodeId, TapeError> {
        self.check(a)?;
        self.push_op(Op::SliceCols(a, c0, c1))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, TapeError> {
        self.check(a)?;
        self.push_op(Op::Scale(a, c))
    }

    /// Multiply by a dynamic one-element node (trend factors).
    pub fn scale_by_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId, TapeError> {
        self.check(a)?;
        self.check(s)?;
        if self.nodes[s].value.len() != 1 {
            return Err(TapeError::NotScalar(s));
        }
        self.push_op(Op::ScaleByScalar(a, s))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.check(a)?;
        self.push_op(Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.check(a)?;
        self.push_op(Op::Tanh(a))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.check(a)?;
        self.push_op(Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.check(a)?;
        self.push_op(Op::LeakyRelu(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.check(a)?;
        self.push_op(Op::SoftmaxRows(a))
    }

    pub fn gamma(&mut self, w: NodeId, v: NodeId) -> Result<NodeId, TapeError> {
        self.check(w)?;
        self.check(v)?;
        self.push_op(Op::Gamma(w, v))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.check(a)?;
        self.push_op(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.check(a)?;
        self.push_op(Op::Mean(a))
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.check(a)?;
        self.push_op(Op::Abs(a))
    }

    /// Re-execute every recorded op and compare against the recorded
    /// values bit for bit.
    pub fn replay_check(&self) -> Result<bool, TapeError> {
        for node in &self.nodes {
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let redo = self.eval(&node.op)?;
            if redo.dims() != node.value.dims() || redo.data() != node.value.data() {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Reverse sweep from a one-element loss node. Returns one gradient per
    /// parameter leaf (zeros for parameters the loss does not reach).
    pub fn backward(&self, loss: NodeId) -> Result<ParamMap, TapeError> {
        self.check(loss)?;
        if self.nodes[loss].value.len() != 1 {
            return Err(TapeError::NotScalar(loss));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor::scalar(1.0));

        for id in (0..=loss).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let value = &self.nodes[id].value;
            match &self.nodes[id].op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul(&self.nodes[*b].value.transpose()?)?;
                    let db = self.nodes[*a].value.transpose()?.matmul(&g)?;
                    acc(&mut grads[*a], da);
                    acc(&mut grads[*b], db);
                }
                Op::Transpose(a) => acc(&mut grads[*a], g.transpose()?),
                Op::Add(a, b) => {
                    acc(&mut grads[*a], g.clone());
                    acc(&mut grads[*b], g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads[*a], g.clone());
                    acc(&mut grads[*b], g.scale(-1.0));
                }
                Op::AddRow(a, row) => {
                    let cols = g.cols();
                    let mut col_sum = vec![0.0; cols];
                    for r in 0..g.rows() {
                        for (s, &v) in col_sum.iter_mut().zip(g.row(r)) {
                            *s += v;
                        }
                    }
                    acc(&mut grads[*a], g);
                    acc(&mut grads[*row], Tensor::new(vec![1, cols], col_sum)?);
                }
                Op::Hadamard(a, b) => {
                    acc(&mut grads[*a], g.hadamard(&self.nodes[*b].value)?);
                    acc(&mut grads[*b], g.hadamard(&self.nodes[*a].value)?);
                }
                Op::ConcatRows(ids) => {
                    let mut r0 = 0;
                    for &part in ids {
                        let rows = self.nodes[part].value.rows();
                        acc(&mut grads[part], g.slice_rows(r0, r0 + rows)?);
                        r0 += rows;
                    }
                }
                Op::ConcatCols(ids) => {
                    let mut c0 = 0;
                    for &part in ids {
                        let cols = self.nodes[part].value.cols();
                        acc(&mut grads[part], g.slice_cols(c0, c0 + cols)?);
                        c0 += cols;
                    }
                }
                Op::SliceRows(a, r0, _) => {
                    let src = &self.nodes[*a].value;
                    let mut pad = vec![0.0; src.len()];
                    let cols = src.cols();
                    pad[r0 * cols..r0 * cols + g.len()].copy_from_slice(g.data());
                    acc(&mut grads[*a], Tensor::from_dims_data(src.dims(), pad));
                }
                Op::SliceCols(a, c0, c1) => {
                    let src = &self.nodes[*a].value;
                    let cols = src.cols();
                    let w = c1 - c0;
                    let mut pad = vec![0.0; src.len()];
                    for r in 0..src.rows() {
                        pad[r * cols + c0..r * cols + c1].copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                    }
                    acc(&mut grads[*a], Tensor::from_dims_data(src.dims(), pad));
                }
                Op::Scale(a, c) => acc(&mut grads[*a], g.scale(*c)),
                Op::ScaleByScalar(a, s) => {
                    let sval = self.nodes[*s].value.item();
                    acc(&mut grads[*a], g.scale(sval));
                    let ds = g.hadamard(&self.nodes[*a].value)?.sum();
                    acc(
                        &mut grads[*s],
                        Tensor::full(self.nodes[*s].value.dims(), ds),
                    );
                }
                Op::Sigmoid(a) => {
                    let d = value.map(|y| y * (1.0 - y));
                    acc(&mut grads[*a], g.hadamard(&d)?);
                }
                Op::Tanh(a) => {
                    let d = value.map(|y| 1.0 - y * y);
                    acc(&mut grads[*a], g.hadamard(&d)?);
                }
                Op::Relu(a) => {
                    let d = self.nodes[*a].value.map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    acc(&mut grads[*a], g.hadamard(&d)?);
                }
                Op::LeakyRelu(a) => {
                    let d = self.nodes[*a]
                        .value
                        .map(|x| if x > 0.0 { 1.0 } else { LEAKY_RELU_SLOPE });
                    acc(&mut grads[*a], g.hadamard(&d)?);
                }
                Op::SoftmaxRows(a) => {
                    // dx = y ⊙ g − y · rowsum(y ⊙ g)
                    let y = value;
                    let yg = g.hadamard(y)?;
                    let (rows, cols) = (y.rows(), y.cols());
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let dot: f64 = yg.row(r).iter().sum();
                        for c in 0..cols {
                            dx[r * cols + c] = yg.row(r)[c] - y.row(r)[c] * dot;
                        }
                    }
                    acc(&mut grads[*a], Tensor::from_dims_data(y.dims(), dx));
                }
                Op::Gamma(wid, vid) => {
                    let w = &self.nodes[*wid].value;
                    let v = &self.nodes[*vid].value;
                    let (n, d) = (w.rows(), w.cols());
                    let dn = v.cols();
                    let mut dw = vec![0.0; n * d];
                    let mut dv = vec![0.0; n * dn];
                    for r in 0..n {
                        let grow = g.row(r);
                        let wrow = w.row(r);
                        let vrow = v.row(r);
                        for k in 0..d {
                            for l in 0..dn {
                                let gp = grow[k * dn + l];
                                dw[r * d + k] += gp * vrow[l];
                                dv[r * dn + l] += gp * wrow[k];
                            }
                        }
                    }
                    acc(&mut grads[*wid], Tensor::from_dims_data(w.dims(), dw));
                    acc(&mut grads[*vid], Tensor::from_dims_data(v.dims(), dv));
                }
                Op::Sum(a) => {
                    let src = &self.nodes[*a].value;
                    acc(&mut grads[*a], Tensor::full(src.dims(), g.item()));
                }
                Op::Mean(a) => {
                    let src = &self.nodes[*a].value;
                    acc(
                        &mut grads[*a],
                        Tensor::full(src.dims(), g.item() / src.len() as f64),
                    );
                }
                Op::Abs(a) => {
                    let d = self.nodes[*a].value.map(|x| {
                        if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    acc(&mut grads[*a], g.hadamard(&d)?);
                }
            }
        }

        let mut out = ParamMap::new();
        for &pid in &self.params {
            let name = self.nodes[pid].param.clone().expect("param node has a name");
            let grad = match grads[pid].take() {
                Some(g) => g,
                None => Tensor::zeros(self.nodes[pid].value.dims()),
            };
            out.insert(name, grad);
        }
        Ok(out)
    }
}

fn acc(slot: &mut Option<Tensor>, t: Tensor) {
    match slot {
        Some(existing) => *existing = existing.add(&t).expect("gradient shape drift"),
        None => *slot = Some(t),
    }
}

impl Tensor {
    fn from_dims_data(dims: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(dims.to_vec(), data).expect("internal gradient tensor")
    }
}

/// Max over parameter coordinates of |analytic − central difference| /
/// max(1, |central difference|). `f` evaluates the loss at given parameters
/// and returns its analytic gradients alongside.
pub fn finite_diff_check<F>(f: F, params: &ParamMap, eps: f64) -> Result<f64, TapeError>
where
    F: Fn(&ParamMap) -> Result<(f64, ParamMap), TapeError>,
{
    assert!(eps > 0.0, "finite_diff_check needs eps > 0");
    let (loss0, analytic) = f(params)?;
    if !loss0.is_finite() {
        return Err(TapeError::NonFiniteLoss);
    }
    let mut worst: f64 = 0.0;
    for (name, value) in params {
        for i in 0..value.len() {
            let mut plus = params.clone();
            let mut minus = params.clone();
            let mut d = value.data().to_vec();
            d[i] += eps;
            plus.insert(name.clone(), Tensor::from_dims_data(value.dims(), d.clone()));
            d[i] = value.data()[i] - eps;
            minus.insert(name.clone(), Tensor::from_dims_data(value.dims(), d));
            let lp = f(&plus)?.0;
            let lm = f(&minus)?.0;
            if !lp.is_finite() || !lm.is_finite() {
                return Err(TapeError::NonFiniteLoss);
            }
            let numeric = (lp - lm) / (2.0 * eps);
            let a = analytic.get(name).map_or(0.0, |t| t.data()[i]);
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_sum_gradient_at_zero() {
        let mut tape = Tape::new();
        let x = tape.param("x", Tensor::scalar(0.0)).unwrap();
        let s = tape.sigmoid(x).unwrap();
        let loss = tape.sum(s).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!((grads["x"].item() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn constant_only_graph_has_empty_gradient_map() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::matrix(&[&[1.0, 2.0]]));
        let loss = tape.sum(c).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.is_empty());
    }

    #[test]
    fn unreached_param_gets_zero_gradient() {
        let mut tape = Tape::new();
        let _unused = tape.param("unused", Tensor::matrix(&[&[7.0]])).unwrap();
        let c = tape.constant(Tensor::scalar(3.0));
        let loss = tape.sum(c).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads["unused"].data(), &[0.0]);
    }

    #[test]
    fn backward_rejects_bad_loss() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(&[&[1.0, 2.0]]));
        assert!(matches!(tape.backward(99), Err(TapeError::NotOnTape(99))));
        assert!(matches!(tape.backward(x), Err(TapeError::NotScalar(_))));
    }

    #[test]
    fn duplicate_param_rejected() {
        let mut tape = Tape::new();
        tape.param("w", Tensor::scalar(1.0)).unwrap();
        assert!(matches!(
            tape.param("w", Tensor::scalar(2.0)),
            Err(TapeError::DuplicateParam(_))
        ));
    }

    #[test]
    fn replay_reproduces_recorded_values() {
        let mut tape = Tape::new();
        let a = tape.param("a", Tensor::matrix(&[&[0.3, -1.2], &[2.0, 0.7]])).unwrap();
        let b = tape.constant(Tensor::matrix(&[&[1.5, 0.25], &[-0.5, 1.0]]));
        let m = tape.matmul(a, b).unwrap();
        let s = tape.sigmoid(m).unwrap();
        let sm = tape.softmax_rows(s).unwrap();
        let _ = tape.sum(sm).unwrap();
        assert!(tape.replay_check().unwrap());
    }

    fn quadratic(params: &ParamMap) -> Result<(f64, ParamMap), TapeError> {
        let mut tape = Tape::new();
        let x = tape.param("x", params["x"].clone())?;
        let sq = tape.hadamard(x, x)?;
        let loss = tape.sum(sq)?;
        let grads = tape.backward(loss)?;
        Ok((tape.value(loss).item(), grads))
    }

    #[test]
    fn finite_diff_on_quadratic() {
        let mut params = ParamMap::new();
        params.insert("x".into(), Tensor::scalar(3.0));
        let err = finite_diff_check(quadratic, &params, 1e-5).unwrap();
        assert!(err <= 1e-10, "error {err}");
    }

    #[test]
    fn finite_diff_on_constant_function() {
        let f = |_: &ParamMap| Ok((4.0, ParamMap::new()));
        let mut params = ParamMap::new();
        params.insert("x".into(), Tensor::scalar(1.0));
        let err = finite_diff_check(f, &params, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn finite_diff_rejects_non_finite_loss() {
        let f = |_: &ParamMap| Ok((f64::NAN, ParamMap::new()));
        let mut params = ParamMap::new();
        params.insert("x".into(), Tensor::scalar(1.0));
        assert!(matches!(
            finite_diff_check(f, &params, 1e-5),
            Err(TapeError::NonFiniteLoss)
        ));
    }

    /// One composite graph touching every primitive, checked against
    /// central differences.
    fn all_ops_graph(params: &ParamMap) -> Result<(f64, ParamMap), TapeError> {
        let mut tape = Tape::new();
        let w = tape.param("w", params["w"].clone())?; // 3x2
        let v = tape.param("v", params["v"].clone())?; // 3x2
        let s = tape.param("s", params["s"].clone())?; // 1x1 scalar
        let c = tape.constant(Tensor::matrix(&[&[0.4, -0.3], &[0.9, 0.1], &[-0.6, 0.8]]));

        let g = tape.gamma(w, v)?; // 3x4
        let gt = tape.transpose(g)?; // 4x3
        let mm = tape.matmul(gt, c)?; // 4x2
        let sm = tape.softmax_rows(mm)?;
        let th = tape.tanh(sm)?;
        let sg = tape.sigmoid(th)?;
        let rl = tape.relu(mm)?;
        let lr = tape.leaky_relu(mm)?;
        let added = tape.add(rl, lr)?;
        let subbed = tape.sub(added, sg)?;
        let had = tape.hadamard(subbed, sg)?;
        let sc = tape.scale(had, 0.7)?;
        let ss = tape.scale_by_scalar(sc, s)?;
        let top = tape.slice_rows(ss, 0, 2)?;
        let bottom = tape.slice_rows(ss, 2, 4)?;
        let cat = tape.concat_cols(&[top, bottom])?; // 2x4
        let left = tape.slice_cols(cat, 0, 2)?;
        let right = tape.slice_cols(cat, 2, 4)?;
        let stacked = tape.concat_rows(&[left, right])?; // 4x2
        let row = tape.param("row", params["row"].clone())?; // 1x2
        let biased = tape.add_row(stacked, row)?;
        let ab = tape.abs(biased)?;
        let m = tape.mean(ab)?;
        let total = tape.sum(ab)?;
        let both = tape.add(m, total)?;
        let grads = tape.backward(both)?;
        Ok((tape.value(both).item(), grads))
    }

    #[test]
    fn finite_diff_over_all_primitives() {
        let mut params = ParamMap::new();
        params.insert(
            "w".into(),
            Tensor::matrix(&[&[0.2, -0.7], &[1.1, 0.4], &[-0.3, 0.9]]),
        );
        params.insert(
            "v".into(),
            Tensor::matrix(&[&[0.5, 0.3], &[-0.8, 0.6], &[0.2, -0.4]]),
        );
        params.insert("s".into(), Tensor::new(vec![1, 1], vec![1.3]).unwrap());
        params.insert("row".into(), Tensor::matrix(&[&[0.15, -0.25]]));
        let err = finite_diff_check(all_ops_graph, &params, 1e-5).unwrap();
        assert!(err <= 1e-4, "max relative error {err}");
        // Well away from the kinks this should be far tighter than the gate.
        assert!(err <= 1e-7, "max relative error {err}");
    }

    #[test]
    fn gamma_gradient_matches_finite_difference() {
        let f = |params: &ParamMap| -> Result<(f64, ParamMap), TapeError> {
            let mut tape = Tape::new();
            let w = tape.param("w", params["w"].clone())?;
            let v = tape.param("v", params["v"].clone())?;
            let g = tape.gamma(w, v)?;
            let sq = tape.hadamard(g, g)?;
            let loss = tape.sum(sq)?;
            let grads = tape.backward(loss)?;
            Ok((tape.value(loss).item(), grads))
        };
        let mut params = ParamMap::new();
        params.insert("w".into(), Tensor::matrix(&[&[1.0, 2.0], &[0.5, -1.5]]));
        params.insert("v".into(), Tensor::matrix(&[&[0.3, -0.2, 0.7], &[1.2, 0.1, -0.9]]));
        let err = finite_diff_check(f, &params, 1e-5).unwrap();
        assert!(err <= 1e-8, "error {err}");
    }
}
