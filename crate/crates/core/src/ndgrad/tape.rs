use super::{NdError, ParamSet, Real, Result, Tensor};

/// Handle to a recorded node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Swish(NodeId),
    Softplus(NodeId),
    Tanh(NodeId),
    Concat(Vec<NodeId>),
    Gather(NodeId, Vec<usize>),
    SumRows(NodeId),
    SumAll(NodeId),
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::MatMul(a, b) | Op::AddRow(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Swish(a)
            | Op::Softplus(a)
            | Op::Tanh(a)
            | Op::Gather(a, _)
            | Op::SumRows(a)
            | Op::SumAll(a) => vec![*a],
            Op::Concat(parts) => parts.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node<R> {
    op: Op,
    value: Tensor<R>,
}

/// Record of one forward computation.
///
/// Nodes are appended in evaluation order, so reverse insertion order is a
/// valid reverse topological order for the backward sweep.
#[derive(Clone, Debug)]
pub struct Tape<R> {
    nodes: Vec<Node<R>>,
    params: Option<(u64, u64)>,
    input: Option<NodeId>,
    output: Option<NodeId>,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid<R: Real>(x: R) -> R {
    if x >= R::zero() {
        R::one() / (R::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (R::one() + e)
    }
}

fn softplus<R: Real>(x: R) -> R {
    // log(1 + e^x) = max(x, 0) + log1p(e^-|x|)
    x.max(R::zero()) + (-x.abs()).exp().ln_1p()
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: None,
            input: None,
            output: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<R> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor<R>, name: &'static str) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(NdError::NonFinite(name));
        }
        self.nodes.push(Node { op, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Records a leaf tensor (data or conditioning features).
    pub fn leaf(&mut self, value: Tensor<R>) -> Result<NodeId> {
        self.push(Op::Leaf, value, "input")
    }

    /// Records a leaf and marks it as the input [`Tape::grad_input`] differentiates against.
    pub fn input(&mut self, value: Tensor<R>) -> Result<NodeId> {
        let id = self.leaf(value)?;
        self.input = Some(id);
        Ok(id)
    }

    /// Records parameter `index` of `params`. All parameters on one tape must
    /// come from the same set.
    pub fn param(&mut self, params: &ParamSet<R>, index: usize) -> Result<NodeId> {
        let key = (params.id(), params.version());
        match self.params {
            None => self.params = Some(key),
            Some(k) if k == key => {}
            Some(_) => return Err(NdError::ForeignParams),
        }
        self.push(Op::Param(index), params.tensor(index).clone(), "param")
    }

    pub fn set_output(&mut self, id: NodeId) {
        self.output = Some(id);
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output
    }

    pub fn input_node(&self) -> Option<NodeId> {
        self.input
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.rows() {
            return Err(NdError::Shape {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![R::zero(); m * n];
        R::gemm(
            m, k, n, R::one(), av.data(), k as isize, 1, bv.data(), n as isize, 1, R::zero(),
            &mut out, n as isize, 1,
        );
        self.push(Op::MatMul(a, b), Tensor::raw(vec![m, n], out), "matmul")
    }

    /// Adds a bias row to every row of `x`.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.len() != xv.cols() {
            return Err(NdError::Shape {
                op: "add_row",
                lhs: xv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut out = xv.clone();
        let c = out.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v + bv.data()[i % c];
        }
        self.push(Op::AddRow(x, bias), out, "add_row")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        self.push(Op::Add(a, b), out, "add")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        self.push(Op::Mul(a, b), out, "mul")
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let sr = R::of(s);
        let out = self.value(a).map(|x| x * sr);
        self.push(Op::Scale(a, s), out, "scale")
    }

    pub fn swish(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.push(Op::Swish(a), out, "swish")
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).map(softplus);
        self.push(Op::Softplus(a), out, "softplus")
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).map(|x| x.tanh());
        self.push(Op::Tanh(a), out, "tanh")
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(NdError::Shape {
                    op: "concat",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            cols += v.cols();
        }
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        self.push(Op::Concat(parts.to_vec()), Tensor::raw(vec![rows, cols], out), "concat")
    }

    /// Selects rows of `table` (an embedding lookup).
    pub fn gather(&mut self, table: NodeId, idx: &[usize]) -> Result<NodeId> {
        let tv = self.value(table);
        if let Some(&bad) = idx.iter().find(|&&i| i >= tv.rows()) {
            return Err(NdError::BadClass {
                index: bad,
                classes: tv.rows(),
            });
        }
        let out = tv.gather_rows(idx);
        self.push(Op::Gather(table, idx.to_vec()), out, "gather")
    }

    /// Per-row sum, producing an `[n, 1]` column.
    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let out: Vec<R> = (0..v.rows()).map(|i| v.row(i).iter().copied().sum()).collect();
        let n = out.len();
        self.push(Op::SumRows(a), Tensor::raw(vec![n, 1], out), "sum_rows")
    }

    /// Sum of every element, producing a `[1, 1]` scalar.
    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).sum();
        self.push(Op::SumAll(a), Tensor::raw(vec![1, 1], vec![s]), "sum_all")
    }

    /// Reverse sweep from `output` seeded with `upstream`, computing gradients
    /// only along paths that reach one of `targets`.
    pub fn backward(
        &self,
        output: NodeId,
        upstream: &Tensor<R>,
        targets: &[NodeId],
    ) -> Result<Vec<Option<Tensor<R>>>> {
        self.value(output).check_same(upstream, "backward seed")?;
        let n = output.0 + 1;
        let mut needed = vec![false; n];
        for &t in targets {
            if t.0 < n {
                needed[t.0] = true;
            }
        }
        for i in 0..n {
            if !needed[i] {
                needed[i] = self.nodes[i].op.inputs().iter().any(|p| needed[p.0]);
            }
        }
        let mut grads: Vec<Option<Tensor<R>>> = vec![None; n];
        if !needed[output.0] {
            return Ok(grads);
        }
        grads[output.0] = Some(upstream.clone());

        for i in (0..n).rev() {
            if !needed[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &needed, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    fn propagate(
        &self,
        i: usize,
        g: &Tensor<R>,
        needed: &[bool],
        grads: &mut [Option<Tensor<R>>],
    ) -> Result<()> {
        let mut acc = |id: NodeId, t: Tensor<R>| -> Result<()> {
            match &mut grads[id.0] {
                Some(existing) => existing.axpy(R::one(), &t),
                slot @ None => {
                    *slot = Some(t);
                    Ok(())
                }
            }
        };
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, nn) = (av.rows(), av.cols(), bv.cols());
                if needed[a.0] {
                    // dA = dC @ B^T
                    let mut da = vec![R::zero(); m * k];
                    R::gemm(
                        m, nn, k, R::one(), g.data(), nn as isize, 1, bv.data(), 1, nn as isize,
                        R::zero(), &mut da, k as isize, 1,
                    );
                    acc(*a, Tensor::raw(vec![m, k], da))?;
                }
                if needed[b.0] {
                    // dB = A^T @ dC
                    let mut db = vec![R::zero(); k * nn];
                    R::gemm(
                        k, m, nn, R::one(), av.data(), 1, k as isize, g.data(), nn as isize, 1,
                        R::zero(), &mut db, nn as isize, 1,
                    );
                    acc(*b, Tensor::raw(vec![k, nn], db))?;
                }
            }
            Op::AddRow(x, b) => {
                if needed[x.0] {
                    acc(*x, g.clone())?;
                }
                if needed[b.0] {
                    let bshape = self.value(*b).shape().to_vec();
                    let c = g.cols();
                    let mut db = vec![R::zero(); c];
                    for r in 0..g.rows() {
                        for (d, &v) in db.iter_mut().zip(g.row(r)) {
                            *d = *d + v;
                        }
                    }
                    acc(*b, Tensor::raw(bshape, db))?;
                }
            }
            Op::Add(a, b) => {
                if needed[a.0] {
                    acc(*a, g.clone())?;
                }
                if needed[b.0] {
                    acc(*b, g.clone())?;
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if needed[a.0] {
                    acc(*a, g.zip_map(bv, "mul'", |x, y| x * y)?)?;
                }
                if needed[b.0] {
                    acc(*b, g.zip_map(av, "mul'", |x, y| x * y)?)?;
                }
            }
            Op::Scale(a, s) => {
                if needed[a.0] {
                    let sr = R::of(*s);
                    acc(*a, g.map(|v| v * sr))?;
                }
            }
            Op::Swish(a) => {
                if needed[a.0] {
                    let d = g.zip_map(self.value(*a), "swish'", |gv, x| {
                        let s = sigmoid(x);
                        gv * (s + x * s * (R::one() - s))
                    })?;
                    acc(*a, d)?;
                }
            }
            Op::Softplus(a) => {
                if needed[a.0] {
                    acc(*a, g.zip_map(self.value(*a), "softplus'", |gv, x| gv * sigmoid(x))?)?;
                }
            }
            Op::Tanh(a) => {
                if needed[a.0] {
                    let y = &self.nodes[i].value;
                    acc(*a, g.zip_map(y, "tanh'", |gv, yv| gv * (R::one() - yv * yv))?)?;
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                let total = g.cols();
                for p in parts {
                    let pc = self.value(*p).cols();
                    if needed[p.0] {
                        let rows = g.rows();
                        let mut d = Vec::with_capacity(rows * pc);
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * total + off..r * total + off + pc]);
                        }
                        acc(*p, Tensor::raw(vec![rows, pc], d))?;
                    }
                    off += pc;
                }
            }
            Op::Gather(table, idx) => {
                if needed[table.0] {
                    let tv = self.value(*table);
                    let mut d = Tensor::zeros(tv.shape());
                    for (r, &row) in idx.iter().enumerate() {
                        for (dv, &gv) in d.row_mut(row).iter_mut().zip(g.row(r)) {
                            *dv = *dv + gv;
                        }
                    }
                    acc(*table, d)?;
                }
            }
            Op::SumRows(a) => {
                if needed[a.0] {
                    let av = self.value(*a);
                    let c = av.cols();
                    let d = Tensor::from_fn(av.rows(), c, |r, _| g.data()[r]);
                    acc(*a, d)?;
                }
            }
            Op::SumAll(a) => {
                if needed[a.0] {
                    let av = self.value(*a);
                    acc(*a, Tensor::full(av.shape(), g.data()[0]))?;
                }
            }
        }
        Ok(())
    }

    fn seed_output(&self) -> Result<NodeId> {
        self.output.ok_or(NdError::Shape {
            op: "tape without output",
            lhs: vec![],
            rhs: vec![],
        })
    }

    /// Gradient of `<upstream, output>` with respect to the marked input.
    pub fn grad_input(&self, upstream: &Tensor<R>) -> Result<Tensor<R>> {
        let out = self.seed_output()?;
        let input = self.input.ok_or(NdError::Shape {
            op: "tape without marked input",
            lhs: vec![],
            rhs: vec![],
        })?;
        let mut grads = self.backward(out, upstream, &[input])?;
        Ok(grads[input.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.value(input).shape())))
    }

    /// Gradient of `<upstream, output>` with respect to every tensor of
    /// `params`, laid out like `params`. Unused parameters get exact zeros.
    pub fn grad_params(&self, params: &ParamSet<R>, upstream: &Tensor<R>) -> Result<ParamSet<R>> {
        self.check_params(params)?;
        let out = self.seed_output()?;
        let param_nodes: Vec<(NodeId, usize)> = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(p) => Some((NodeId(i), p)),
                _ => None,
            })
            .collect();
        let targets: Vec<NodeId> = param_nodes.iter().map(|(n, _)| *n).collect();
        let grads = self.backward(out, upstream, &targets)?;
        let mut result = params.zeros_like();
        {
            let ts = result.tensors_mut();
            for (node, p) in param_nodes {
                if let Some(g) = grads.get(node.0).and_then(|g| g.as_ref()) {
                    ts[p].axpy(R::one(), g)?;
                }
            }
        }
        Ok(result)
    }

    fn check_params(&self, params: &ParamSet<R>) -> Result<()> {
        match self.params {
            None => Ok(()),
            Some((id, _)) if id != params.id() => Err(NdError::ForeignParams),
            Some((_, v)) if v != params.version() => Err(NdError::StaleTape {
                recorded: v,
                current: params.version(),
            }),
            Some(_) => Ok(()),
        }
    }

    /// Both gradients from one reverse sweep.
    pub fn grad_both(
        &self,
        params: &ParamSet<R>,
        upstream: &Tensor<R>,
    ) -> Result<(ParamSet<R>, Tensor<R>)> {
        self.check_params(params)?;
        let out = self.seed_output()?;
        let input = self.input.ok_or(NdError::Shape {
            op: "tape without marked input",
            lhs: vec![],
            rhs: vec![],
        })?;
        let mut targets = vec![input];
        let mut param_nodes = Vec::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if let Op::Param(p) = n.op {
                targets.push(NodeId(i));
                param_nodes.push((i, p));
            }
        }
        let mut grads = self.backward(out, upstream, &targets)?;
        let mut result = params.zeros_like();
        {
            let ts = result.tensors_mut();
            for (node, p) in param_nodes {
                if let Some(g) = grads.get(node).and_then(|g| g.as_ref()) {
                    ts[p].axpy(R::one(), g)?;
                }
            }
        }
        let gi = grads[input.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.value(input).shape()));
        Ok((result, gi))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_square_norm_gradient_is_identity() {
        let x = Tensor::<f64>::from_fn(3, 2, |i, j| i as f64 - 0.5 * j as f64 + 0.25);
        let mut tape = Tape::new();
        let xi = tape.input(x.clone()).unwrap();
        let sq = tape.mul(xi, xi).unwrap();
        let half = tape.scale(sq, 0.5).unwrap();
        let f = tape.sum_all(half).unwrap();
        tape.set_output(f);
        let g = tape.grad_input(&Tensor::full(&[1, 1], 1.0)).unwrap();
        assert_eq!(g, x);
    }

    #[test]
    fn constant_output_has_zero_gradient() {
        let mut params = ParamSet::<f64>::new();
        params.push("unused", Tensor::full(&[2, 2], 3.0));
        let mut tape = Tape::new();
        let x = tape.input(Tensor::full(&[2, 2], 1.0)).unwrap();
        let c = tape.leaf(Tensor::full(&[1, 1], 5.0)).unwrap();
        let _w = tape.param(&params, 0).unwrap();
        tape.set_output(c);
        let seed = Tensor::full(&[1, 1], 1.0);
        let gp = tape.grad_params(&params, &seed).unwrap();
        assert!(gp.flatten().iter().all(|&v| v == 0.0));
        let gi = tape.grad_input(&seed).unwrap();
        assert!(gi.data().iter().all(|&v| v == 0.0));
        let _ = x;
    }

    #[test]
    fn each_node_is_visited_once_with_shared_subexpressions() {
        // f = sum((x + x) * x) = 2 sum(x^2); df/dx = 4x
        let x = Tensor::<f64>::from_fn(2, 2, |i, j| (i + 2 * j) as f64 + 1.0);
        let mut tape = Tape::new();
        let xi = tape.input(x.clone()).unwrap();
        let s = tape.add(xi, xi).unwrap();
        let p = tape.mul(s, xi).unwrap();
        let f = tape.sum_all(p).unwrap();
        tape.set_output(f);
        let g = tape.grad_input(&Tensor::full(&[1, 1], 1.0)).unwrap();
        assert_eq!(g, x.map(|v| 4.0 * v));
    }

    #[test]
    fn stale_tape_is_rejected() {
        let mut params = ParamSet::<f64>::new();
        params.push("w", Tensor::full(&[2, 1], 1.0));
        let mut tape = Tape::new();
        let x = tape.input(Tensor::full(&[3, 2], 1.0)).unwrap();
        let w = tape.param(&params, 0).unwrap();
        let y = tape.matmul(x, w).unwrap();
        tape.set_output(y);
        params.tensor_mut(0).set(0, 0, 2.0);
        let err = tape.grad_params(&params, &Tensor::full(&[3, 1], 1.0)).unwrap_err();
        assert!(matches!(err, NdError::StaleTape { .. }));
        let other = params.clone();
        assert_eq!(
            tape.grad_params(&other, &Tensor::full(&[3, 1], 1.0)).unwrap_err(),
            NdError::ForeignParams
        );
    }

    #[test]
    fn non_finite_forward_is_reported() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::full(&[1, 1], f64::MAX)).unwrap();
        assert_eq!(tape.scale(a, 10.0).unwrap_err(), NdError::NonFinite("scale"));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.leaf(Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(tape.matmul(a, b), Err(NdError::Shape { op: "matmul", .. })));
    }
}
