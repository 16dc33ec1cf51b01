//! Random small graphs that use every op, for checking gradients.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{grad_check, CompGraph, GraphObjective, NodeId, Op};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub struct RandomNet {
    pub graph: CompGraph,
    pub loss: NodeId,
    /// Values of every differentiable input.
    pub point: ParamStore,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// Builds a net from `seed`. Shapes, strides, padding and constants vary.
pub fn random_net(seed: u64) -> Result<RandomNet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = rng.gen_range(1..=2);
    let o = rng.gen_range(2..=3);
    let hw = 2 * rng.gen_range(2..=3);
    let k = if rng.gen_bool(0.5) { 1 } else { 3 };
    let pad2 = rng.gen_range(0..=1);
    let (m, n, r) = (rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(1..=3));

    let mut point = ParamStore::new();
    let mut g = CompGraph::new();
    let mut param = |g: &mut CompGraph, name: &str, shape: &[usize], rng: &mut ChaCha8Rng| -> Result<NodeId> {
        point.insert(name, uniform(rng, shape, -1.0, 1.0))?;
        Ok(g.input(name, shape, true)?)
    };
    let x = param(&mut g, "x", &[c, hw, hw], &mut rng)?;
    let k1 = param(&mut g, "k1", &[o, c, k, k], &mut rng)?;
    let b1 = param(&mut g, "b1", &[o], &mut rng)?;
    let k2 = param(&mut g, "k2", &[o, c, 3, 3], &mut rng)?;
    let u = param(&mut g, "u", &[m, n], &mut rng)?;
    let v = param(&mut g, "v", &[n, r], &mut rng)?;

    let conv = g.conv2d(x, k1, Some(b1), 1, k / 2)?;
    let act = g.relu(conv)?;
    let pooled = g.maxpool2x2(act)?;
    let s = g.sigmoid(pooled)?;
    let sq = g.square(s)?;
    let scaled = g.scale(pooled, rng.gen_range(-2.0..2.0))?;
    let prod = g.mul(sq, scaled)?;
    let mixed = g.add(prod, s)?;
    let logits = g.sub(mixed, pooled)?;
    let shape = g.shape(logits).to_vec();

    let mut dist = uniform(&mut rng, &shape, 0.05, 1.0);
    let plane = shape[1] * shape[2];
    for i in 0..plane {
        let total: f64 = (0..shape[0]).map(|ch| dist.data()[ch * plane + i]).sum();
        for ch in 0..shape[0] {
            dist.data_mut()[ch * plane + i] /= total;
        }
    }
    let target = g.constant(dist);
    let ce = g.softmax_ce(logits, target)?;
    let bt = g.constant(uniform(&mut rng, &shape, 0.0, 1.0));
    let bw = g.constant(uniform(&mut rng, &shape, 0.5, 4.0));
    let bce = g.weighted_bce(mixed, bt, bw)?;

    let strided = g.conv2d(x, k2, None, 2, pad2)?;
    let sm = g.mean(strided)?;
    let mm = g.matmul(u, v)?;
    let ms = g.sum(mm)?;
    let ms = g.scale(ms, 0.1)?;

    let a = g.add(ce, bce)?;
    let a = g.add(a, sm)?;
    let loss = g.add(a, ms)?;
    Ok(RandomNet { graph: g, loss, point })
}

/// Distinct op names present in `g`.
pub fn op_kinds(g: &CompGraph) -> Vec<&'static str> {
    let mut names: Vec<&'static str> = g.ops().map(Op::name).collect();
    names.sort_unstable();
    names.dedup();
    names
}

/// Every op kind the graph supports.
pub fn all_op_kinds() -> Vec<&'static str> {
    let mut v: Vec<&'static str> = [
        Op::Const(Tensor::zeros(&[1])),
        Op::Input {
            name: String::new(),
            requires_grad: false,
        },
        Op::Add,
        Op::Sub,
        Op::Mul,
        Op::Scale(1.0),
        Op::Square,
        Op::MatMul,
        Op::Conv2d { stride: 1, pad: 0 },
        Op::Relu,
        Op::Sigmoid,
        Op::MaxPool2x2,
        Op::Mean,
        Op::Sum,
        Op::SoftmaxCe,
        Op::WeightedBce,
    ]
    .iter()
    .map(Op::name)
    .collect();
    v.sort_unstable();
    v
}

/// Worst relative gradient error of the net built from `seed`.
pub fn check_seed(seed: u64, eps: f64) -> Result<f64> {
    let mut net = random_net(seed)?;
    let fixed = BTreeMap::new();
    let mut obj = GraphObjective {
        graph: &mut net.graph,
        loss: net.loss,
        fixed: &fixed,
    };
    grad_check(&mut obj, &net.point, eps)
}
