//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation applied to tensors that refer to one of
//! its nodes. Operations on plain tensors (no node) are evaluated eagerly and
//! not recorded, which is how parameters are used at evaluation time.
//!
//! Backward rules are expressed with the same recorded operations, so with
//! `create_graph = true` the gradients returned by [`Graph::backward`] and
//! [`Graph::grad`] are nodes themselves and can be differentiated again.
//!
//! Subgradient conventions: `abs'(0) = 0`, `relu'(0) = 0`, and max pooling
//! routes the gradient to the first maximal element in row-major order.

mod kernels;
pub(crate) mod op;
mod tensor;

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

pub use kernels::ConvGeom;
pub(crate) use kernels::linear_interp_matrix;
pub use kernels::sigmoid;
pub use op::L2_EPS;
use op::Op;
pub use tensor::{NodeRef, Tensor};

use crate::error::{Error, Result};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Abs,
    Relu,
    Sigmoid,
    OneMinus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max2x2,
    Avg2x2,
    GlobalAvg,
}

struct NodeRecord {
    op: Op,
    inputs: Vec<Tensor>,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only operation record. Node inputs always have smaller ids than the
/// node itself, so the graph is acyclic by construction.
pub struct Graph {
    id: u64,
    nodes: RefCell<Vec<NodeRecord>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients keyed by node id.
#[derive(Clone, Debug, Default)]
pub struct GradientMap {
    grads: BTreeMap<usize, Tensor>,
}

impl GradientMap {
    pub fn get(&self, t: &Tensor) -> Option<&Tensor> {
        t.node.and_then(|n| self.grads.get(&n.id))
    }

    pub fn by_id(&self, id: usize) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// Generation counter identifying this graph among all graphs created by
    /// the process.
    pub fn generation(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Registers `t` as a leaf node.
    pub fn leaf(&self, t: &Tensor, requires_grad: bool) -> Tensor {
        let value = t.detach();
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(NodeRecord {
            op: Op::Leaf,
            inputs: vec![value.clone()],
            value: value.clone(),
            requires_grad,
        });
        value.with_node(NodeRef { graph: self.id, id }, requires_grad)
    }

    pub fn contains(&self, t: &Tensor) -> bool {
        t.node.is_some_and(|n| n.graph == self.id)
    }

    pub(crate) fn record(&self, op: Op, inputs: &[&Tensor]) -> Result<Tensor> {
        let mut any_node = false;
        let mut requires_grad = false;
        for t in inputs {
            if let Some(n) = t.node {
                if n.graph != self.id {
                    return Err(Error::ForeignGraph);
                }
                any_node = true;
                requires_grad |= t.requires_grad;
            }
        }
        let value = op::eval(&op, inputs)?;
        if !any_node {
            return Ok(value);
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(NodeRecord {
            op,
            inputs: inputs.iter().map(|t| (*t).clone()).collect(),
            value: value.clone(),
            requires_grad,
        });
        Ok(value.with_node(NodeRef { graph: self.id, id }, requires_grad))
    }

    pub fn elementwise(&self, kind: Elementwise, a: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
        let binary = matches!(kind, Elementwise::Add | Elementwise::Sub | Elementwise::Mul);
        match (binary, b) {
            (true, Some(b)) => {
                let op = match kind {
                    Elementwise::Add => Op::Add,
                    Elementwise::Sub => Op::Sub,
                    _ => Op::Mul,
                };
                self.record(op, &[a, b])
            }
            (false, None) => {
                let op = match kind {
                    Elementwise::Abs => Op::Abs,
                    Elementwise::Relu => Op::Relu,
                    Elementwise::Sigmoid => Op::Sigmoid,
                    _ => Op::OneMinus,
                };
                self.record(op, &[a])
            }
            (true, None) => Err(Error::invalid("elementwise", format!("{kind:?} needs two operands"))),
            (false, Some(_)) => Err(Error::invalid("elementwise", format!("{kind:?} is unary"))),
        }
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.record(Op::Add, &[a, b])
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.record(Op::Sub, &[a, b])
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.record(Op::Mul, &[a, b])
    }

    pub fn div(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.record(Op::Div, &[a, b])
    }

    pub fn abs(&self, a: &Tensor) -> Result<Tensor> {
        self.record(Op::Abs, &[a])
    }

    pub fn relu(&self, a: &Tensor) -> Result<Tensor> {
        self.record(Op::Relu, &[a])
    }

    pub fn sigmoid(&self, a: &Tensor) -> Result<Tensor> {
        self.record(Op::Sigmoid, &[a])
    }

    pub fn one_minus(&self, a: &Tensor) -> Result<Tensor> {
        self.record(Op::OneMinus, &[a])
    }

    pub fn scale(&self, a: &Tensor, c: f64) -> Result<Tensor> {
        self.record(Op::Scale(c), &[a])
    }

    pub fn add_scalar(&self, a: &Tensor, c: f64) -> Result<Tensor> {
        self.record(Op::AddScalar(c), &[a])
    }

    /// Multiplies every element of `v` by the single value held in `s`.
    pub fn scale_by(&self, v: &Tensor, s: &Tensor) -> Result<Tensor> {
        self.record(Op::ScaleBy, &[v, s])
    }

    /// `Σ a_t b_t` for two rank-1 tensors of equal length.
    pub fn dot(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.rank() != 1 || b.rank() != 1 {
            return Err(Error::invalid(
                "dot",
                format!("expected rank-1 operands, got {:?} and {:?}", a.shape(), b.shape()),
            ));
        }
        self.record(Op::Dot, &[a, b])
    }

    /// Inner product of two equal-shape tensors of any rank.
    pub fn inner(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.record(Op::Dot, &[a, b])
    }

    /// `sqrt(Σ (a_t − b_t)² + ε)` with `ε = 1e-12`, so the gradient stays defined at `a == b`.
    pub fn l2_distance(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.rank() != 1 || b.rank() != 1 {
            return Err(Error::invalid(
                "l2_distance",
                format!("expected rank-1 operands, got {:?} and {:?}", a.shape(), b.shape()),
            ));
        }
        self.record(Op::L2Distance, &[a, b])
    }

    pub fn sum(&self, a: &Tensor) -> Result<Tensor> {
        self.record(Op::Sum, &[a])
    }

    pub fn expand(&self, s: &Tensor, shape: &[usize]) -> Result<Tensor> {
        self.record(Op::Expand(shape.to_vec()), &[s])
    }

    pub fn reshape(&self, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
        self.record(Op::Reshape(shape.to_vec()), &[a])
    }

    pub fn transpose(&self, a: &Tensor) -> Result<Tensor> {
        self.record(Op::Transpose, &[a])
    }

    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.record(Op::MatMul, &[a, b])
    }

    /// Zero-padded cross-correlation of `x[c_in×h×w]` with `weights[c_out×c_in×k×k]`
    /// plus a per-output-channel bias.
    pub fn conv2d(
        &self,
        x: &Tensor,
        weights: &Tensor,
        bias: &Tensor,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor> {
        let geom = conv_geom(x, weights, stride, pad)?;
        if bias.shape() != [geom.out_channels] {
            return Err(Error::shape("conv2d", &[geom.out_channels], bias.shape()));
        }
        let y = self.record(Op::Conv(geom), &[x, weights])?;
        self.record(Op::ChannelBias, &[&y, bias])
    }

    pub fn pool(&self, kind: PoolKind, x: &Tensor) -> Result<Tensor> {
        match kind {
            PoolKind::Max2x2 => self.record(Op::MaxPool2, &[x]),
            PoolKind::Avg2x2 => self.record(Op::AvgPool2, &[x]),
            PoolKind::GlobalAvg => {
                if x.rank() != 3 {
                    return Err(Error::invalid(
                        "global_avg",
                        format!("expected c×m×n, got {:?}", x.shape()),
                    ));
                }
                let area = (x.shape()[1] * x.shape()[2]) as f64;
                let s = self.record(Op::SpatialSum, &[x])?;
                self.scale(&s, 1.0 / area)
            }
        }
    }

    /// Sum over the channel axis: `c×m×n → m×n`.
    pub fn channel_sum(&self, x: &Tensor) -> Result<Tensor> {
        self.record(Op::ChannelSum, &[x])
    }

    /// Repeats an `m×n` plane `c` times: `m×n → c×m×n`.
    pub fn tile(&self, x: &Tensor, c: usize) -> Result<Tensor> {
        self.record(Op::Tile(c), &[x])
    }

    /// Broadcasts each channel value over an `h×w` plane: `c → c×h×w`.
    pub fn channel_expand(&self, v: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        self.record(Op::ChannelExpand(h, w), &[v])
    }

    /// Largest element (first in row-major order on ties) as a scalar.
    pub fn max_all(&self, x: &Tensor) -> Result<Tensor> {
        self.record(Op::MaxAll, &[x])
    }

    /// Runs reverse accumulation from the scalar `output` and returns the
    /// gradient of every leaf that requires one.
    pub fn backward(&self, output: &Tensor, create_graph: bool) -> Result<GradientMap> {
        self.reverse(output, None, &[], create_graph)
    }

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// Only nodes on a path from some target to `output` are visited, whether or
    /// not they require gradients. A target with no path to `output` is an error.
    pub fn grad(&self, output: &Tensor, wrt: &[&Tensor], create_graph: bool) -> Result<Vec<Tensor>> {
        self.grad_holding(output, wrt, &[], create_graph)
    }

    /// [`Graph::grad`] with every node in `held` treated as a constant: no
    /// gradient flows through them, yet with `create_graph` the returned
    /// gradients still refer to them as nodes, so a later pass can
    /// differentiate through their values.
    pub fn grad_holding(
        &self,
        output: &Tensor,
        wrt: &[&Tensor],
        held: &[&Tensor],
        create_graph: bool,
    ) -> Result<Vec<Tensor>> {
        let mut ids = Vec::with_capacity(wrt.len());
        for t in wrt {
            ids.push(self.node_id(t)?);
        }
        let held = held.iter().map(|t| self.node_id(t)).collect::<Result<Vec<_>>>()?;
        let map = self.reverse(output, Some(&ids), &held, create_graph)?;
        ids.iter()
            .map(|id| map.by_id(*id).cloned().ok_or(Error::NoPath))
            .collect()
    }

    fn node_id(&self, t: &Tensor) -> Result<usize> {
        match t.node {
            Some(n) if n.graph == self.id => Ok(n.id),
            Some(_) => Err(Error::ForeignGraph),
            None => Err(Error::NotInGraph),
        }
    }

    fn reverse(
        &self,
        output: &Tensor,
        targets: Option<&[usize]>,
        held: &[usize],
        create_graph: bool,
    ) -> Result<GradientMap> {
        let out_id = self.node_id(output)?;
        if output.len() != 1 {
            return Err(Error::NotScalar(output.shape().to_vec()));
        }

        let (active, is_target) = {
            let nodes = self.nodes.borrow();
            let mut active = vec![false; out_id + 1];
            let mut is_target = vec![false; out_id + 1];
            for id in 0..=out_id {
                let rec = &nodes[id];
                if held.contains(&id) {
                    continue;
                }
                active[id] = match targets {
                    Some(ts) => {
                        if ts.contains(&id) {
                            is_target[id] = true;
                            true
                        } else {
                            rec.inputs.iter().any(|t| {
                                t.node.is_some_and(|n| n.graph == self.id && active[n.id])
                            })
                        }
                    }
                    None => {
                        is_target[id] = rec.requires_grad && matches!(rec.op, Op::Leaf);
                        rec.requires_grad
                    }
                };
            }
            (active, is_target)
        };

        let mut result = GradientMap::default();
        if !active[out_id] {
            return Ok(result);
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; out_id + 1];
        grads[out_id] = Some(Tensor::ones(output.shape()));

        for id in (0..=out_id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !active[id] {
                continue;
            }
            if is_target[id] {
                let g = if create_graph && g.node.is_none() {
                    self.leaf(&g, false)
                } else {
                    g.clone()
                };
                result.grads.insert(id, g);
            }
            let (op, inputs, value, requires_grad) = {
                let nodes = self.nodes.borrow();
                let rec = &nodes[id];
                if matches!(rec.op, Op::Leaf) {
                    continue;
                }
                (rec.op.clone(), rec.inputs.clone(), rec.value.clone(), rec.requires_grad)
            };
            let needs: Vec<bool> = inputs
                .iter()
                .map(|t| t.node.is_some_and(|n| n.graph == self.id && active[n.id]))
                .collect();
            if !needs.iter().any(|&b| b) {
                continue;
            }
            let input_grads = if create_graph {
                let out = value.with_node(NodeRef { graph: self.id, id }, requires_grad);
                op::vjp(self, &op, &inputs, &out, &g, &needs)?
            } else {
                let plain: Vec<Tensor> = inputs.iter().map(Tensor::detach).collect();
                op::vjp(self, &op, &plain, &value, &g.detach(), &needs)?
            };
            for (t, ig) in inputs.iter().zip(input_grads) {
                let (Some(n), Some(ig)) = (t.node, ig) else { continue };
                let slot = &mut grads[n.id];
                *slot = Some(match slot.take() {
                    Some(prev) => self.add(&prev, &ig)?,
                    None => ig,
                });
            }
        }
        Ok(result)
    }

    /// Re-executes every recorded operation from the leaf values and returns the
    /// recomputed node values. Fails if any value differs bitwise from the one
    /// recorded during the original forward pass.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let nodes = self.nodes.borrow();
        let mut values: Vec<Tensor> = Vec::with_capacity(nodes.len());
        for (id, rec) in nodes.iter().enumerate() {
            let v = if matches!(rec.op, Op::Leaf) {
                rec.value.clone()
            } else {
                let ins: Vec<Tensor> = rec
                    .inputs
                    .iter()
                    .map(|t| match t.node {
                        Some(n) if n.graph == self.id => values[n.id].clone(),
                        _ => t.detach(),
                    })
                    .collect();
                let refs: Vec<&Tensor> = ins.iter().collect();
                op::eval(&rec.op, &refs)?
            };
            if !v.bit_eq(&rec.value) {
                return Err(Error::ReplayMismatch(id));
            }
            values.push(v);
        }
        Ok(values)
    }
}

fn conv_geom(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<ConvGeom> {
    if x.rank() != 3 || w.rank() != 4 {
        return Err(Error::invalid(
            "conv2d",
            format!("expected x[c×h×w] and w[o×c×k×k], got {:?} and {:?}", x.shape(), w.shape()),
        ));
    }
    let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (o, ci, k, k2) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if ci != c || k != k2 {
        return Err(Error::shape("conv2d", &[o, c, k, k], w.shape()));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be at least 1"));
    }
    if k > h + 2 * pad || k > wd + 2 * pad {
        return Err(Error::invalid(
            "conv2d",
            format!("kernel {k} exceeds padded input {}×{}", h + 2 * pad, wd + 2 * pad),
        ));
    }
    Ok(ConvGeom {
        in_channels: c,
        in_h: h,
        in_w: wd,
        out_channels: o,
        kernel: k,
        stride,
        pad,
    })
}

/// Builds a constant index gather, used by tests to exercise scatter/gather adjoints.
#[doc(hidden)]
pub fn gather(graph: &Graph, x: &Tensor, idx: Vec<usize>, shape: &[usize]) -> Result<Tensor> {
    graph.record(
        Op::Gather {
            idx: Arc::new(idx),
            shape: shape.to_vec(),
        },
        &[x],
    )
}
