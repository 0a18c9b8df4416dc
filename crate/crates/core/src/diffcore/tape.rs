//! Wengert-list reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node vector is already a
//! topological order and `backward` is a single reverse sweep.

use std::sync::Arc;

use super::kernels::{self, same_shape};
use super::{Backend, CustomOp, DiffError, ParamId, ParamStore, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Arc<Tensor>),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Square(Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    SelectCols(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    Custom(Vec<Var>, Arc<dyn CustomOp>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug)]
pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    bound: Vec<Option<Var>>,
}

/// Gradients of one backward sweep, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; `None` when `v` does not influence the root.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// One gradient per store entry, zero for parameters the root ignores.
    pub fn param_grads(&self) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = self.shapes.iter().map(|s| Tensor::zeros(s)).collect();
        for &(id, var) in &self.params {
            if let Some(g) = &self.grads[var.0] {
                out[id.0] = g.clone();
            }
        }
        out
    }
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            bound: vec![None; store.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant leaf that still receives a gradient (inputs under test).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, true)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn unary(&mut self, a: Var, value: Tensor, op: Op) -> Var {
        let ng = self.ng(a);
        self.push(value, op, ng)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor, op: Op) -> Var {
        let ng = self.ng(a) || self.ng(b);
        self.push(value, op, ng)
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients, DiffError> {
        let root_shape = self.nodes[root.0].value.shape();
        if self.nodes[root.0].value.len() != 1 {
            return Err(DiffError::NonScalarRoot(root_shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(root_shape, 1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }

        let params = self
            .bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .collect();
        let shapes = self
            .store
            .tensors()
            .iter()
            .map(|t| t.shape().to_vec())
            .collect();
        Ok(Gradients {
            grads,
            params,
            shapes,
        })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, delta: Tensor| {
            if !self.ng(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                        *e += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        let y = &node.value;
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    acc(*a, kernels::matmul_grad_lhs(g, self.val(*b)));
                }
                if self.ng(*b) {
                    acc(*b, kernels::matmul_grad_rhs(self.val(*a), g));
                }
            }
            Op::AddRow(a, bias) => {
                acc(*a, g.clone());
                if self.ng(*bias) {
                    let m = g.cols();
                    let mut col = vec![0.0; m];
                    for row in g.data().chunks_exact(m) {
                        for (c, v) in col.iter_mut().zip(row) {
                            *c += v;
                        }
                    }
                    let shape = self.val(*bias).shape().to_vec();
                    acc(*bias, Tensor::new(shape, col).expect("bias shape"));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(self.val(*b), |gv, bv| gv * bv));
                acc(*b, g.zip_map(self.val(*a), |gv, av| gv * av));
            }
            Op::MulConst(a, c) => acc(*a, g.zip_map(c, |gv, cv| gv * cv)),
            Op::Scale(a, k) => acc(*a, g.map(|v| v * k)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Relu(a) => acc(
                *a,
                g.zip_map(self.val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 }),
            ),
            Op::Tanh(a) => acc(*a, g.zip_map(y, |gv, t| gv * (1.0 - t * t))),
            Op::Exp(a) => acc(*a, g.zip_map(y, |gv, e| gv * e)),
            Op::Log(a) => acc(*a, g.zip_map(self.val(*a), |gv, x| gv / x)),
            Op::Softplus(a) => acc(
                *a,
                g.zip_map(self.val(*a), |gv, x| gv * kernels::sigmoid(x)),
            ),
            Op::Square(a) => acc(*a, g.zip_map(self.val(*a), |gv, x| 2.0 * gv * x)),
            Op::Softmax(a) => {
                let m = y.cols();
                let mut out = g.clone();
                for (orow, yrow) in out.data_mut().chunks_exact_mut(m).zip(y.data().chunks_exact(m))
                {
                    let dot: f64 = orow.iter().zip(yrow).map(|(gv, yv)| gv * yv).sum();
                    for (o, yv) in orow.iter_mut().zip(yrow) {
                        *o = yv * (*o - dot);
                    }
                }
                acc(*a, out);
            }
            Op::Sum(a) => {
                let shape = self.val(*a).shape().to_vec();
                acc(*a, Tensor::full(&shape, g.item()));
            }
            Op::Mean(a) => {
                let src = self.val(*a);
                let k = g.item() / src.len() as f64;
                acc(*a, Tensor::full(src.shape(), k));
            }
            Op::SumCols(a) => {
                let src = self.val(*a);
                let m = src.cols();
                let mut out = Vec::with_capacity(src.len());
                for &gv in g.data() {
                    out.extend(std::iter::repeat_n(gv, m));
                }
                acc(*a, Tensor::matrix(src.rows(), m, out));
            }
            Op::SelectCols(a, idx) => {
                let src = self.val(*a);
                let m = src.cols();
                let k = idx.len();
                let mut out = Tensor::zeros(&[src.rows(), m]);
                let od = out.data_mut();
                for (r, grow) in g.data().chunks_exact(k).enumerate() {
                    for (j, &c) in idx.iter().enumerate() {
                        od[r * m + c] += grow[j];
                    }
                }
                acc(*a, out);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = self.val(*p).cols();
                    let idx: Vec<usize> = (start..start + w).collect();
                    acc(*p, g.select_cols(&idx));
                    start += w;
                }
            }
            Op::Custom(inputs, op) => {
                let vals: Vec<&Tensor> = inputs.iter().map(|v| self.val(*v)).collect();
                let gs = op.backward(&vals, y, g);
                for (v, gi) in inputs.iter().zip(gs) {
                    acc(*v, gi);
                }
            }
        }
    }
}

impl Backend for Tape<'_> {
    type V = Var;

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        &self.nodes[v.0].value
    }

    fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.push(self.store.get(id).clone(), Op::Param, true);
        self.bound[id.0] = Some(v);
        v
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Var {
        let value = kernels::matmul(self.val(*a), self.val(*b));
        self.binary(*a, *b, value, Op::MatMul(*a, *b))
    }

    fn add_row(&mut self, a: &Var, bias: &Var) -> Var {
        let value = kernels::add_row(self.val(*a), self.val(*bias));
        self.binary(*a, *bias, value, Op::AddRow(*a, *bias))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Var {
        same_shape(self.val(*a), self.val(*b), "add");
        let value = self.val(*a).zip_map(self.val(*b), |x, y| x + y);
        self.binary(*a, *b, value, Op::Add(*a, *b))
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Var {
        same_shape(self.val(*a), self.val(*b), "sub");
        let value = self.val(*a).zip_map(self.val(*b), |x, y| x - y);
        self.binary(*a, *b, value, Op::Sub(*a, *b))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Var {
        same_shape(self.val(*a), self.val(*b), "mul");
        let value = self.val(*a).zip_map(self.val(*b), |x, y| x * y);
        self.binary(*a, *b, value, Op::Mul(*a, *b))
    }

    fn mul_const(&mut self, a: &Var, c: &Arc<Tensor>) -> Var {
        same_shape(self.val(*a), c, "mul_const");
        let value = self.val(*a).zip_map(c, |x, y| x * y);
        self.unary(*a, value, Op::MulConst(*a, Arc::clone(c)))
    }

    fn scale(&mut self, a: &Var, k: f64) -> Var {
        let value = self.val(*a).map(|x| x * k);
        self.unary(*a, value, Op::Scale(*a, k))
    }

    fn add_scalar(&mut self, a: &Var, k: f64) -> Var {
        let value = self.val(*a).map(|x| x + k);
        self.unary(*a, value, Op::AddScalar(*a))
    }

    fn relu(&mut self, a: &Var) -> Var {
        let value = self.val(*a).map(kernels::relu);
        self.unary(*a, value, Op::Relu(*a))
    }

    fn tanh(&mut self, a: &Var) -> Var {
        let value = self.val(*a).map(f64::tanh);
        self.unary(*a, value, Op::Tanh(*a))
    }

    fn exp(&mut self, a: &Var) -> Var {
        let value = self.val(*a).map(f64::exp);
        self.unary(*a, value, Op::Exp(*a))
    }

    fn log(&mut self, a: &Var) -> Var {
        let value = self.val(*a).map(f64::ln);
        self.unary(*a, value, Op::Log(*a))
    }

    fn softplus(&mut self, a: &Var) -> Var {
        let value = self.val(*a).map(kernels::softplus);
        self.unary(*a, value, Op::Softplus(*a))
    }

    fn square(&mut self, a: &Var) -> Var {
        let value = self.val(*a).map(|x| x * x);
        self.unary(*a, value, Op::Square(*a))
    }

    fn softmax(&mut self, a: &Var) -> Var {
        let value = kernels::softmax_rows(self.val(*a));
        self.unary(*a, value, Op::Softmax(*a))
    }

    fn sum(&mut self, a: &Var) -> Var {
        let value = Tensor::scalar(self.val(*a).sum());
        self.unary(*a, value, Op::Sum(*a))
    }

    fn mean(&mut self, a: &Var) -> Var {
        let src = self.val(*a);
        let value = Tensor::scalar(src.sum() / src.len() as f64);
        self.unary(*a, value, Op::Mean(*a))
    }

    fn sum_cols(&mut self, a: &Var) -> Var {
        let value = kernels::sum_cols(self.val(*a));
        self.unary(*a, value, Op::SumCols(*a))
    }

    fn select_cols(&mut self, a: &Var, idx: &[usize]) -> Var {
        let value = self.val(*a).select_cols(idx);
        self.unary(*a, value, Op::SelectCols(*a, idx.to_vec()))
    }

    fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let refs: Vec<&Tensor> = parts.iter().map(|p| self.val(*p)).collect();
        let value = kernels::concat_cols(&refs);
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    fn custom(&mut self, inputs: &[&Var], op: Arc<dyn CustomOp>) -> Var {
        let vals: Vec<&Tensor> = inputs.iter().map(|v| self.val(**v)).collect();
        let value = op.forward(&vals);
        let ng = inputs.iter().any(|v| self.ng(**v));
        let ins: Vec<Var> = inputs.iter().map(|v| **v).collect();
        self.push(value, Op::Custom(ins, op), ng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        for &v in values {
            s.add(Tensor::scalar(v));
        }
        s
    }

    #[test]
    fn sum_of_params_has_unit_gradients() {
        let store = store_with(&[1.5, -2.0, 7.0]);
        let mut tape = Tape::new(&store);
        let vs: Vec<Var> = (0..3).map(|i| tape.param(ParamId(i))).collect();
        let a = tape.add(&vs[0], &vs[1]);
        let root = tape.add(&a, &vs[2]);
        let grads = tape.backward(root).unwrap().param_grads();
        for g in grads {
            assert_eq!(g.item(), 1.0);
        }
    }

    #[test]
    fn square_at_three_has_gradient_six() {
        let store = store_with(&[3.0]);
        let mut tape = Tape::new(&store);
        let x = tape.param(ParamId(0));
        let root = tape.square(&x);
        let grads = tape.backward(root).unwrap();
        assert_eq!(grads.param_grads()[0].item(), 6.0);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.input(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.exp(&x);
        assert!(matches!(
            tape.backward(y),
            Err(DiffError::NonScalarRoot(_))
        ));
    }

    #[test]
    fn unused_params_get_zero_gradient() {
        let store = store_with(&[1.0, 2.0]);
        let mut tape = Tape::new(&store);
        let x = tape.param(ParamId(0));
        let root = tape.scale(&x, 4.0);
        let g = tape.backward(root).unwrap().param_grads();
        assert_eq!(g[0].item(), 4.0);
        assert_eq!(g[1].item(), 0.0);
    }

    #[test]
    fn shared_node_accumulates() {
        // f = x*x + x at x = 2 -> 2x + 1 = 5
        let store = store_with(&[2.0]);
        let mut tape = Tape::new(&store);
        let x = tape.param(ParamId(0));
        let sq = tape.mul(&x, &x);
        let root = tape.add(&sq, &x);
        assert_eq!(tape.backward(root).unwrap().param_grads()[0].item(), 5.0);
    }
}
