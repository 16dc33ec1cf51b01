//! Computation graph with reverse-mode automatic differentiation.
//!
//! Graphs are built once through the typed builder methods (each of which
//! infers and checks the output shape), then evaluated any number of times
//! against a [`Feed`] of named input tensors. Nodes are stored in creation
//! order, which is also a topological order since a node can only reference
//! nodes that already exist.
//!
//! The op set is closed. Every op has a hand-written backward rule, and
//! [`grad_check`] compares those rules against central finite differences.

use std::collections::BTreeMap;

use crate::error::GraphError;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Const(Tensor),
    Input { name: String, requires_grad: bool },
    Add,
    Sub,
    Mul,
    Scale(f64),
    Square,
    MatMul,
    /// Parents: input `(C,H,W)`, kernel `(O,C,KH,KW)`, optional bias `(O)`.
    Conv2d { stride: usize, pad: usize },
    Relu,
    Sigmoid,
    MaxPool2x2,
    Mean,
    Sum,
    /// Parents: logits `(C, ...)`, target distribution of the same shape.
    /// Mean over positions of the per-position softmax cross-entropy.
    SoftmaxCe,
    /// Parents: logits, target, weight (all the same shape). Mean of the
    /// weighted binary cross-entropy with logits.
    WeightedBce,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Const(_) => "const",
            Op::Input { .. } => "input",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Square => "square",
            Op::MatMul => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::MaxPool2x2 => "maxpool2x2",
            Op::Mean => "mean",
            Op::Sum => "sum",
            Op::SoftmaxCe => "softmax_ce",
            Op::WeightedBce => "weighted_bce",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    parents: Vec<NodeId>,
    shape: Vec<usize>,
}

/// Named input tensors for one evaluation.
#[derive(Default, Clone)]
pub struct Feed<'a> {
    tensors: BTreeMap<&'a str, &'a Tensor>,
}

impl<'a> Feed<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: &'a str, tensor: &'a Tensor) -> Self {
        self.tensors.insert(name, tensor);
        self
    }

    pub fn with_params(mut self, params: &'a ParamStore) -> Self {
        for (name, tensor) in params.iter() {
            self.tensors.insert(name, tensor);
        }
        self
    }

    pub fn with_map(mut self, map: &'a BTreeMap<String, Tensor>) -> Self {
        for (name, tensor) in map {
            self.tensors.insert(name, tensor);
        }
        self
    }

    fn get(&self, name: &str) -> Option<&'a Tensor> {
        self.tensors.get(name).copied()
    }
}

#[derive(Clone, Debug, Default)]
pub struct CompGraph {
    nodes: Vec<Node>,
    inputs: BTreeMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
    values: Option<Vec<Tensor>>,
    grads: Option<Vec<Tensor>>,
}

impl CompGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    /// Every node's op, in topological order.
    pub fn ops(&self) -> impl Iterator<Item = &Op> {
        self.nodes.iter().map(|n| &n.op)
    }

    /// Named input nodes in name order.
    pub fn inputs(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.inputs.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn input_id(&self, name: &str) -> Option<NodeId> {
        self.inputs.get(name).copied()
    }

    pub fn mark_output(&mut self, name: &str, id: NodeId) {
        self.outputs.insert(name.to_string(), id);
    }

    fn push(&mut self, op: Op, parents: Vec<NodeId>, shape: Vec<usize>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, parents, shape });
        self.values = None;
        self.grads = None;
        id
    }

    fn check(&self, id: NodeId) -> Result<&[usize], GraphError> {
        self.nodes
            .get(id.0)
            .map(|n| n.shape.as_slice())
            .ok_or(GraphError::UnknownNode(id.0))
    }

    fn shape_err(&self, op: &'static str, detail: String) -> GraphError {
        GraphError::Shape {
            node: self.nodes.len(),
            op,
            detail,
        }
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Const(value), vec![], shape)
    }

    /// Declares a named input. Inputs with `requires_grad` receive gradients
    /// from [`CompGraph::backward`].
    pub fn input(
        &mut self,
        name: &str,
        shape: &[usize],
        requires_grad: bool,
    ) -> Result<NodeId, GraphError> {
        if self.inputs.contains_key(name) {
            return Err(GraphError::DuplicateInput(name.to_string()));
        }
        if shape.is_empty() || shape.contains(&0) {
            return Err(self.shape_err("input", format!("invalid shape {shape:?}")));
        }
        let id = self.push(
            Op::Input {
                name: name.to_string(),
                requires_grad,
            },
            vec![],
            shape.to_vec(),
        );
        self.inputs.insert(name.to_string(), id);
        Ok(id)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<Vec<usize>, GraphError> {
        let sa = self.check(a)?;
        let sb = self.check(b)?;
        if sa != sb {
            return Err(self.shape_err(op, format!("operand shapes {sa:?} and {sb:?} differ")));
        }
        Ok(sa.to_vec())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let s = self.same_shape("add", a, b)?;
        Ok(self.push(Op::Add, vec![a, b], s))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let s = self.same_shape("sub", a, b)?;
        Ok(self.push(Op::Sub, vec![a, b], s))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let s = self.same_shape("mul", a, b)?;
        Ok(self.push(Op::Mul, vec![a, b], s))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId, GraphError> {
        let s = self.check(a)?.to_vec();
        Ok(self.push(Op::Scale(factor), vec![a], s))
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        let s = self.check(a)?.to_vec();
        Ok(self.push(Op::Square, vec![a], s))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        let s = self.check(a)?.to_vec();
        Ok(self.push(Op::Relu, vec![a], s))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        let s = self.check(a)?.to_vec();
        Ok(self.push(Op::Sigmoid, vec![a], s))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.check(a)?;
        Ok(self.push(Op::Mean, vec![a], vec![1]))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.check(a)?;
        Ok(self.push(Op::Sum, vec![a], vec![1]))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let sa = self.check(a)?.to_vec();
        let sb = self.check(b)?.to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.shape_err("matmul", format!("cannot multiply {sa:?} by {sb:?}")));
        }
        Ok(self.push(Op::MatMul, vec![a, b], vec![sa[0], sb[1]]))
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId, GraphError> {
        let si = self.check(input)?.to_vec();
        let sk = self.check(kernel)?.to_vec();
        if si.len() != 3 || sk.len() != 4 {
            return Err(self.shape_err(
                "conv2d",
                format!("expected (C,H,W) input and (O,C,KH,KW) kernel, got {si:?} and {sk:?}"),
            ));
        }
        if si[0] != sk[1] {
            return Err(self.shape_err(
                "conv2d",
                format!("input has {} channels, kernel expects {}", si[0], sk[1]),
            ));
        }
        if stride == 0 {
            return Err(self.shape_err("conv2d", "stride must be positive".into()));
        }
        if si[1] + 2 * pad < sk[2] || si[2] + 2 * pad < sk[3] {
            return Err(self.shape_err("conv2d", format!("kernel {sk:?} larger than padded input {si:?}")));
        }
        let mut parents = vec![input, kernel];
        if let Some(b) = bias {
            let sb = self.check(b)?;
            if sb != [sk[0]] {
                return Err(self.shape_err("conv2d", format!("bias shape {sb:?}, expected [{}]", sk[0])));
            }
            parents.push(b);
        }
        let oh = (si[1] + 2 * pad - sk[2]) / stride + 1;
        let ow = (si[2] + 2 * pad - sk[3]) / stride + 1;
        Ok(self.push(Op::Conv2d { stride, pad }, parents, vec![sk[0], oh, ow]))
    }

    pub fn maxpool2x2(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        let s = self.check(a)?.to_vec();
        if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(self.shape_err("maxpool2x2", format!("needs (C,H,W) with even H,W, got {s:?}")));
        }
        Ok(self.push(Op::MaxPool2x2, vec![a], vec![s[0], s[1] / 2, s[2] / 2]))
    }

    pub fn softmax_ce(&mut self, logits: NodeId, target: NodeId) -> Result<NodeId, GraphError> {
        let s = self.same_shape("softmax_ce", logits, target)?;
        if s.len() < 2 {
            return Err(self.shape_err("softmax_ce", format!("needs (C, ...) logits, got {s:?}")));
        }
        Ok(self.push(Op::SoftmaxCe, vec![logits, target], vec![1]))
    }

    pub fn weighted_bce(
        &mut self,
        logits: NodeId,
        target: NodeId,
        weight: NodeId,
    ) -> Result<NodeId, GraphError> {
        self.same_shape("weighted_bce", logits, target)?;
        self.same_shape("weighted_bce", logits, weight)?;
        Ok(self.push(Op::WeightedBce, vec![logits, target, weight], vec![1]))
    }

    /// Runs every node and caches its output. Returns the tensors of all
    /// nodes registered with [`CompGraph::mark_output`].
    pub fn evaluate(&mut self, feed: &Feed<'_>) -> Result<BTreeMap<String, Tensor>, GraphError> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let out = match &node.op {
                Op::Const(t) => t.clone(),
                Op::Input { name, .. } => {
                    let t = feed
                        .get(name)
                        .ok_or_else(|| GraphError::UnboundInput(name.clone()))?;
                    if t.shape() != node.shape.as_slice() {
                        return Err(GraphError::InputShape {
                            name: name.clone(),
                            expected: node.shape.clone(),
                            got: t.shape().to_vec(),
                        });
                    }
                    t.clone()
                }
                op => {
                    let args: Vec<&Tensor> = node.parents.iter().map(|p| &values[p.0]).collect();
                    forward(op, &args, &node.shape)
                }
            };
            if !out.is_finite() {
                return Err(GraphError::NonFinite {
                    node: idx,
                    op: node.op.name(),
                });
            }
            values.push(out);
        }
        let outputs = self
            .outputs
            .iter()
            .map(|(name, id)| (name.clone(), values[id.0].clone()))
            .collect();
        self.values = Some(values);
        self.grads = None;
        Ok(outputs)
    }

    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.values.as_ref().and_then(|v| v.get(id.0))
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.as_ref().and_then(|g| g.get(id.0))
    }

    /// Back-propagates from a scalar `loss` node. Every node ends up with a
    /// gradient of its own shape (zero where the loss does not depend on it or
    /// where no trainable input lies upstream). Returns the gradients of all
    /// inputs declared with `requires_grad`.
    pub fn backward(&mut self, loss: NodeId) -> Result<BTreeMap<String, Tensor>, GraphError> {
        let values = self.values.as_ref().ok_or(GraphError::NotEvaluated)?;
        let node = self.nodes.get(loss.0).ok_or(GraphError::UnknownNode(loss.0))?;
        if node.shape.iter().product::<usize>() != 1 {
            return Err(GraphError::NonScalarLoss {
                node: loss.0,
                shape: node.shape.clone(),
            });
        }

        // Only propagate into subgraphs that reach a trainable input.
        let mut needs = vec![false; self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            needs[i] = match &n.op {
                Op::Input { requires_grad, .. } => *requires_grad,
                Op::Const(_) => false,
                _ => n.parents.iter().any(|p| needs[p.0]),
            };
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(&node.shape));
        for idx in (0..=loss.0).rev() {
            let n = &self.nodes[idx];
            if n.parents.is_empty() || !needs[idx] {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let args: Vec<&Tensor> = n.parents.iter().map(|p| &values[p.0]).collect();
            let wanted: Vec<bool> = n.parents.iter().map(|p| needs[p.0]).collect();
            let parent_grads = backward_rule(&n.op, &args, &values[idx], &g, &wanted);
            for ((p, pg), want) in n.parents.iter().zip(parent_grads).zip(&wanted) {
                if !want {
                    continue;
                }
                if let Some(pg) = pg {
                    match &mut grads[p.0] {
                        Some(acc) => acc
                            .add_assign(&pg)
                            .expect("backward rule produced a mis-shaped gradient"),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            grads[idx] = Some(g);
        }

        let grads: Vec<Tensor> = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.unwrap_or_else(|| Tensor::zeros(&n.shape)))
            .collect();
        let mut out = BTreeMap::new();
        for (name, id) in &self.inputs {
            if let Op::Input {
                requires_grad: true,
                ..
            } = self.nodes[id.0].op
            {
                out.insert(name.clone(), grads[id.0].clone());
            }
        }
        self.grads = Some(grads);
        Ok(out)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^{-|x|})`, the stable tail of the logistic loss.
fn softplus_neg_abs(x: f64) -> f64 {
    (-x.abs()).exp().ln_1p()
}

fn forward(op: &Op, args: &[&Tensor], shape: &[usize]) -> Tensor {
    match op {
        Op::Const(_) | Op::Input { .. } => unreachable!("leaf nodes are bound directly"),
        Op::Add => args[0].zip_map(args[1], |a, b| a + b).unwrap(),
        Op::Sub => args[0].zip_map(args[1], |a, b| a - b).unwrap(),
        Op::Mul => args[0].zip_map(args[1], |a, b| a * b).unwrap(),
        Op::Scale(f) => args[0].scale(*f),
        Op::Square => args[0].map(|v| v * v),
        Op::Relu => args[0].map(|v| if v > 0.0 { v } else { 0.0 }),
        Op::Sigmoid => args[0].map(sigmoid),
        Op::Mean => Tensor::scalar(args[0].sum() / args[0].numel() as f64),
        Op::Sum => Tensor::scalar(args[0].sum()),
        Op::MatMul => {
            let (a, b) = (args[0], args[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut out = Tensor::zeros(&[m, n]);
            let (ad, bd) = (a.data(), b.data());
            let od = out.data_mut();
            for i in 0..m {
                for p in 0..k {
                    let av = ad[i * k + p];
                    let brow = &bd[p * n..(p + 1) * n];
                    let orow = &mut od[i * n..(i + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
            out
        }
        Op::Conv2d { stride, pad } => {
            let geom = ConvGeom::new(args[0].shape(), args[1].shape(), *stride, *pad);
            let mut out = Tensor::zeros(shape);
            conv_forward(&geom, args[0].data(), args[1].data(), args.get(2).map(|b| b.data()), out.data_mut());
            out
        }
        Op::MaxPool2x2 => {
            let s = args[0].shape();
            let (c, h, w) = (s[0], s[1], s[2]);
            let src = args[0].data();
            Tensor::from_fn(shape, |i| {
                let (ch, rem) = (i / ((h / 2) * (w / 2)), i % ((h / 2) * (w / 2)));
                let (y, x) = (rem / (w / 2) * 2, rem % (w / 2) * 2);
                let base = ch * h * w;
                debug_assert!(ch < c);
                let a = src[base + y * w + x];
                let b = src[base + y * w + x + 1];
                let cc = src[base + (y + 1) * w + x];
                let d = src[base + (y + 1) * w + x + 1];
                a.max(b).max(cc).max(d)
            })
        }
        Op::SoftmaxCe => {
            let (logits, target) = (args[0], args[1]);
            let classes = logits.shape()[0];
            let positions = logits.numel() / classes;
            let (z, t) = (logits.data(), target.data());
            let mut total = 0.0;
            for p in 0..positions {
                let max = (0..classes).map(|c| z[c * positions + p]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..classes).map(|c| (z[c * positions + p] - max).exp()).sum::<f64>().ln();
                for c in 0..classes {
                    total -= t[c * positions + p] * (z[c * positions + p] - lse);
                }
            }
            Tensor::scalar(total / positions as f64)
        }
        Op::WeightedBce => {
            let (z, t, w) = (args[0].data(), args[1].data(), args[2].data());
            let total: f64 = z
                .iter()
                .zip(t)
                .zip(w)
                .map(|((&z, &t), &w)| w * (z.max(0.0) - z * t + softplus_neg_abs(z)))
                .sum();
            Tensor::scalar(total / z.len() as f64)
        }
    }
}

/// Gradient contributions for each parent, given the upstream gradient `g`.
/// Parents with `wanted[i] == false` may be skipped (returned as `None`).
fn backward_rule(op: &Op, args: &[&Tensor], out: &Tensor, g: &Tensor, wanted: &[bool]) -> Vec<Option<Tensor>> {
    match op {
        Op::Const(_) | Op::Input { .. } => vec![],
        Op::Add => vec![Some(g.clone()), Some(g.clone())],
        Op::Sub => vec![Some(g.clone()), Some(g.scale(-1.0))],
        Op::Mul => vec![
            Some(g.zip_map(args[1], |g, b| g * b).unwrap()),
            Some(g.zip_map(args[0], |g, a| g * a).unwrap()),
        ],
        Op::Scale(f) => vec![Some(g.scale(*f))],
        Op::Square => vec![Some(g.zip_map(args[0], |g, x| 2.0 * x * g).unwrap())],
        Op::Relu => vec![Some(g.zip_map(args[0], |g, x| if x > 0.0 { g } else { 0.0 }).unwrap())],
        Op::Sigmoid => vec![Some(g.zip_map(out, |g, s| g * s * (1.0 - s)).unwrap())],
        Op::Mean => {
            let n = args[0].numel() as f64;
            vec![Some(Tensor::full(args[0].shape(), g.data()[0] / n))]
        }
        Op::Sum => vec![Some(Tensor::full(args[0].shape(), g.data()[0]))],
        Op::MatMul => {
            let (a, b) = (args[0], args[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let (ad, bd, gd) = (a.data(), b.data(), g.data());
            let mut ga = Tensor::zeros(a.shape());
            let mut gb = Tensor::zeros(b.shape());
            {
                let gad = ga.data_mut();
                for i in 0..m {
                    for p in 0..k {
                        gad[i * k + p] = (0..n).map(|j| gd[i * n + j] * bd[p * n + j]).sum();
                    }
                }
            }
            {
                let gbd = gb.data_mut();
                for i in 0..m {
                    for p in 0..k {
                        let av = ad[i * k + p];
                        for j in 0..n {
                            gbd[p * n + j] += av * gd[i * n + j];
                        }
                    }
                }
            }
            vec![Some(ga), Some(gb)]
        }
        Op::Conv2d { stride, pad } => {
            let geom = ConvGeom::new(args[0].shape(), args[1].shape(), *stride, *pad);
            let mut gi = wanted[0].then(|| Tensor::zeros(args[0].shape()));
            let mut gk = wanted[1].then(|| Tensor::zeros(args[1].shape()));
            conv_backward(
                &geom,
                args[0].data(),
                args[1].data(),
                g.data(),
                gi.as_mut().map(|t| t.data_mut()),
                gk.as_mut().map(|t| t.data_mut()),
            );
            let mut res = vec![gi, gk];
            if args.len() == 3 {
                let plane = geom.oh * geom.ow;
                let gd = g.data();
                res.push(Some(Tensor::from_fn(args[2].shape(), |o| {
                    gd[o * plane..(o + 1) * plane].iter().sum()
                })));
            }
            res
        }
        Op::MaxPool2x2 => {
            let s = args[0].shape();
            let (h, w) = (s[1], s[2]);
            let (oh, ow) = (h / 2, w / 2);
            let src = args[0].data();
            let mut gi = Tensor::zeros(s);
            let gid = gi.data_mut();
            for (i, &gv) in g.data().iter().enumerate() {
                let (ch, rem) = (i / (oh * ow), i % (oh * ow));
                let (y, x) = (rem / ow * 2, rem % ow * 2);
                let base = ch * h * w;
                let cands = [
                    base + y * w + x,
                    base + y * w + x + 1,
                    base + (y + 1) * w + x,
                    base + (y + 1) * w + x + 1,
                ];
                // first maximum in scan order takes the gradient
                let mut best = cands[0];
                for &c in &cands[1..] {
                    if src[c] > src[best] {
                        best = c;
                    }
                }
                gid[best] += gv;
            }
            vec![Some(gi)]
        }
        Op::SoftmaxCe => {
            let (logits, target) = (args[0], args[1]);
            let classes = logits.shape()[0];
            let positions = logits.numel() / classes;
            let scale = g.data()[0] / positions as f64;
            let (z, t) = (logits.data(), target.data());
            let mut gz = Tensor::zeros(logits.shape());
            let mut gt = Tensor::zeros(target.shape());
            {
                let (gzd, gtd) = (gz.data_mut(), gt.data_mut());
                for p in 0..positions {
                    let max = (0..classes).map(|c| z[c * positions + p]).fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = (0..classes).map(|c| (z[c * positions + p] - max).exp()).sum();
                    let lse = max + denom.ln();
                    let tsum: f64 = (0..classes).map(|c| t[c * positions + p]).sum();
                    for c in 0..classes {
                        let i = c * positions + p;
                        let sm = (z[i] - max).exp() / denom;
                        gzd[i] = scale * (sm * tsum - t[i]);
                        gtd[i] = -scale * (z[i] - lse);
                    }
                }
            }
            vec![Some(gz), Some(gt)]
        }
        Op::WeightedBce => {
            let (z, t, w) = (args[0].data(), args[1].data(), args[2].data());
            let scale = g.data()[0] / z.len() as f64;
            let shape = args[0].shape();
            let gz = Tensor::from_fn(shape, |i| scale * w[i] * (sigmoid(z[i]) - t[i]));
            let gt = Tensor::from_fn(shape, |i| -scale * w[i] * z[i]);
            let gw = Tensor::from_fn(shape, |i| {
                scale * (z[i].max(0.0) - z[i] * t[i] + softplus_neg_abs(z[i]))
            });
            vec![Some(gz), Some(gt), Some(gw)]
        }
    }
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Self {
        let (c, h, w) = (input[0], input[1], input[2]);
        let (o, kh, kw) = (kernel[0], kernel[2], kernel[3]);
        Self {
            c,
            h,
            w,
            o,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        }
    }

    /// Output positions along one axis whose tap `k` lands inside `[0, len)`.
    fn valid_range(&self, k: usize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.pad as isize;
        // need 0 <= o*s + off <= len-1
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi_incl = (len as isize - 1 - off).div_euclid(s);
        let hi = (hi_incl + 1).clamp(0, out_len as isize);
        let lo = lo.min(hi);
        (lo as usize, hi as usize)
    }
}

fn conv_forward(g: &ConvGeom, input: &[f64], kernel: &[f64], bias: Option<&[f64]>, out: &mut [f64]) {
    let plane = g.oh * g.ow;
    for o in 0..g.o {
        let oplane = &mut out[o * plane..(o + 1) * plane];
        if let Some(b) = bias {
            oplane.fill(b[o]);
        }
        for c in 0..g.c {
            let iplane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
            for ky in 0..g.kh {
                let (y0, y1) = g.valid_range(ky, g.h, g.oh);
                for kx in 0..g.kw {
                    let wv = kernel[((o * g.c + c) * g.kh + ky) * g.kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (x0, x1) = g.valid_range(kx, g.w, g.ow);
                    for oy in y0..y1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let orow = &mut oplane[oy * g.ow..(oy + 1) * g.ow];
                        let irow = &iplane[iy * g.w..(iy + 1) * g.w];
                        if g.stride == 1 {
                            let ix0 = x0 + kx - g.pad;
                            for (ov, iv) in orow[x0..x1].iter_mut().zip(&irow[ix0..ix0 + (x1 - x0)]) {
                                *ov += wv * iv;
                            }
                        } else {
                            for ox in x0..x1 {
                                orow[ox] += wv * irow[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward(
    g: &ConvGeom,
    input: &[f64],
    kernel: &[f64],
    gout: &[f64],
    mut gin: Option<&mut [f64]>,
    mut gker: Option<&mut [f64]>,
) {
    let plane = g.oh * g.ow;
    for o in 0..g.o {
        let gplane = &gout[o * plane..(o + 1) * plane];
        for c in 0..g.c {
            let ibase = c * g.h * g.w;
            for ky in 0..g.kh {
                let (y0, y1) = g.valid_range(ky, g.h, g.oh);
                for kx in 0..g.kw {
                    let kidx = ((o * g.c + c) * g.kh + ky) * g.kw + kx;
                    let wv = kernel[kidx];
                    let (x0, x1) = g.valid_range(kx, g.w, g.ow);
                    let mut acc = 0.0;
                    for oy in y0..y1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let grow = &gplane[oy * g.ow..(oy + 1) * g.ow];
                        let rbase = ibase + iy * g.w;
                        if g.stride == 1 {
                            let ix0 = rbase + x0 + kx - g.pad;
                            let n = x1 - x0;
                            if gker.is_some() {
                                acc += grow[x0..x1]
                                    .iter()
                                    .zip(&input[ix0..ix0 + n])
                                    .map(|(a, b)| a * b)
                                    .sum::<f64>();
                            }
                            if let Some(gi) = gin.as_deref_mut() {
                                for (gv, iv) in grow[x0..x1].iter().zip(&mut gi[ix0..ix0 + n]) {
                                    *iv += wv * gv;
                                }
                            }
                        } else {
                            for ox in x0..x1 {
                                let ii = rbase + ox * g.stride + kx - g.pad;
                                acc += grow[ox] * input[ii];
                                if let Some(gi) = gin.as_deref_mut() {
                                    gi[ii] += wv * grow[ox];
                                }
                            }
                        }
                    }
                    if let Some(gk) = gker.as_deref_mut() {
                        gk[kidx] += acc;
                    }
                }
            }
        }
    }
}

/// A scalar function of a set of named tensors with a claimed gradient.
pub trait Objective {
    fn loss(&mut self, point: &ParamStore) -> crate::Result<f64>;
    fn gradient(&mut self, point: &ParamStore) -> crate::Result<BTreeMap<String, Tensor>>;
}

/// A graph whose scalar `loss` node is viewed as a function of the inputs in
/// the checked [`ParamStore`]; all other inputs are held at `fixed`.
pub struct GraphObjective<'a> {
    pub graph: &'a mut CompGraph,
    pub loss: NodeId,
    pub fixed: &'a BTreeMap<String, Tensor>,
}

impl Objective for GraphObjective<'_> {
    fn loss(&mut self, point: &ParamStore) -> crate::Result<f64> {
        let feed = Feed::new().with_map(self.fixed).with_params(point);
        self.graph.evaluate(&feed)?;
        Ok(self.graph.value(self.loss).expect("evaluated").data()[0])
    }

    fn gradient(&mut self, point: &ParamStore) -> crate::Result<BTreeMap<String, Tensor>> {
        self.loss(point)?;
        Ok(self.graph.backward(self.loss)?)
    }
}

/// Largest `|analytic - numeric| / max(1, |numeric|)` over every coordinate
/// of every tensor in `point`, using central differences with step `eps`.
pub fn grad_check(objective: &mut dyn Objective, point: &ParamStore, eps: f64) -> crate::Result<f64> {
    let analytic = objective.gradient(point)?;
    let mut probe = point.clone();
    let mut worst: f64 = 0.0;
    for (name, tensor) in point.iter() {
        let grad = analytic
            .get(name)
            .ok_or_else(|| crate::error::ParamError::MissingGradient(name.to_string()))?;
        for i in 0..tensor.numel() {
            let orig = tensor.data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = orig + eps;
            let up = objective.loss(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig - eps;
            let down = objective.loss(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = (grad.data()[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
