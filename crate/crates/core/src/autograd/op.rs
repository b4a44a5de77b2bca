use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::{Graph, Tensor};
use crate::error::{Error, Result};

/// Operation recorded on a graph node. Every backward rule below is written in
/// terms of other recorded operations, so gradients can themselves be
/// differentiated.
#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Abs,
    Relu,
    Sigmoid,
    OneMinus,
    Scale(f64),
    AddScalar(f64),
    /// `(v, s)`: every element of `v` times the single value of `s`.
    ScaleBy,
    /// Inner product of two equal-shape tensors.
    Dot,
    L2Distance,
    Sum,
    /// Broadcast a single value to the given shape.
    Expand(Vec<usize>),
    Reshape(Vec<usize>),
    Transpose,
    MatMul,
    Conv(ConvGeom),
    ConvInputGrad(ConvGeom),
    ConvWeightGrad(ConvGeom),
    ChannelBias,
    SpatialSum,
    ChannelExpand(usize, usize),
    ChannelSum,
    Tile(usize),
    MaxPool2,
    AvgPool2,
    AvgUnpool2,
    MaxAll,
    Gather {
        idx: Arc<Vec<usize>>,
        shape: Vec<usize>,
    },
    /// Scatter-add into a zero tensor of `shape`.
    Scatter {
        idx: Arc<Vec<usize>>,
        shape: Vec<usize>,
    },
}

pub const L2_EPS: f64 = 1e-12;

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Abs => "abs",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::OneMinus => "one_minus",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::ScaleBy => "scale_by",
            Op::Dot => "dot",
            Op::L2Distance => "l2_distance",
            Op::Sum => "sum",
            Op::Expand(_) => "expand",
            Op::Reshape(_) => "reshape",
            Op::Transpose => "transpose",
            Op::MatMul => "matmul",
            Op::Conv(_) => "conv2d",
            Op::ConvInputGrad(_) => "conv2d_input_grad",
            Op::ConvWeightGrad(_) => "conv2d_weight_grad",
            Op::ChannelBias => "channel_bias",
            Op::SpatialSum => "spatial_sum",
            Op::ChannelExpand(..) => "channel_expand",
            Op::ChannelSum => "channel_sum",
            Op::Tile(_) => "tile",
            Op::MaxPool2 => "max_pool2",
            Op::AvgPool2 => "avg_pool2",
            Op::AvgUnpool2 => "avg_unpool2",
            Op::MaxAll => "max_all",
            Op::Gather { .. } => "gather",
            Op::Scatter { .. } => "scatter",
        }
    }
}

fn arity(op: &Op, inputs: &[&Tensor], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(Error::invalid(
            op.name(),
            format!("expected {n} inputs, got {}", inputs.len()),
        ));
    }
    Ok(())
}

fn same_shape(op: &Op, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op.name(), a.shape(), b.shape()));
    }
    Ok(())
}

fn rank(op: &Op, t: &Tensor, r: usize) -> Result<()> {
    if t.rank() != r {
        return Err(Error::invalid(
            op.name(),
            format!("expected rank {r}, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

fn single(op: &Op, t: &Tensor) -> Result<f64> {
    if t.len() != 1 {
        return Err(Error::invalid(
            op.name(),
            format!("expected a single value, got shape {:?}", t.shape()),
        ));
    }
    Ok(t.data()[0])
}

fn chw(op: &Op, t: &Tensor) -> Result<(usize, usize, usize)> {
    rank(op, t, 3)?;
    let s = t.shape();
    Ok((s[0], s[1], s[2]))
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Vec<f64> {
    a.data().iter().map(|&x| f(x)).collect()
}

/// Forward evaluation. Validates shapes and rejects non-finite results.
pub(crate) fn eval(op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    let (shape, data): (Vec<usize>, Vec<f64>) = match op {
        Op::Leaf => {
            arity(op, inputs, 1)?;
            (inputs[0].shape().to_vec(), inputs[0].to_vec())
        }
        Op::Add | Op::Sub | Op::Mul | Op::Div => {
            arity(op, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            same_shape(op, a, b)?;
            let data = match op {
                Op::Add => zip(a, b, |x, y| x + y),
                Op::Sub => zip(a, b, |x, y| x - y),
                Op::Mul => zip(a, b, |x, y| x * y),
                _ => zip(a, b, |x, y| x / y),
            };
            (a.shape().to_vec(), data)
        }
        Op::Abs | Op::Relu | Op::Sigmoid | Op::OneMinus | Op::Scale(_) | Op::AddScalar(_) => {
            arity(op, inputs, 1)?;
            let a = inputs[0];
            let data = match *op {
                Op::Abs => map(a, f64::abs),
                Op::Relu => map(a, |x| if x > 0.0 { x } else { 0.0 }),
                Op::Sigmoid => map(a, kernels::sigmoid),
                Op::OneMinus => map(a, |x| 1.0 - x),
                Op::Scale(c) => map(a, |x| c * x),
                Op::AddScalar(c) => map(a, |x| x + c),
                _ => unreachable!(),
            };
            (a.shape().to_vec(), data)
        }
        Op::ScaleBy => {
            arity(op, inputs, 2)?;
            let s = single(op, inputs[1])?;
            (inputs[0].shape().to_vec(), map(inputs[0], |x| x * s))
        }
        Op::Dot => {
            arity(op, inputs, 2)?;
            same_shape(op, inputs[0], inputs[1])?;
            let v = inputs[0]
                .data()
                .iter()
                .zip(inputs[1].data())
                .map(|(x, y)| x * y)
                .sum();
            (vec![], vec![v])
        }
        Op::L2Distance => {
            arity(op, inputs, 2)?;
            same_shape(op, inputs[0], inputs[1])?;
            let sq: f64 = inputs[0]
                .data()
                .iter()
                .zip(inputs[1].data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            (vec![], vec![(sq + L2_EPS).sqrt()])
        }
        Op::Sum => {
            arity(op, inputs, 1)?;
            (vec![], vec![inputs[0].data().iter().sum()])
        }
        Op::Expand(shape) => {
            arity(op, inputs, 1)?;
            let v = single(op, inputs[0])?;
            (shape.clone(), vec![v; shape.iter().product()])
        }
        Op::Reshape(shape) => {
            arity(op, inputs, 1)?;
            if shape.iter().product::<usize>() != inputs[0].len() {
                return Err(Error::shape(op.name(), shape, inputs[0].shape()));
            }
            (shape.clone(), inputs[0].to_vec())
        }
        Op::Transpose => {
            arity(op, inputs, 1)?;
            rank(op, inputs[0], 2)?;
            let (r, c) = (inputs[0].shape()[0], inputs[0].shape()[1]);
            let a = inputs[0].data();
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = a[i * c + j];
                }
            }
            (vec![c, r], out)
        }
        Op::MatMul => {
            arity(op, inputs, 2)?;
            rank(op, inputs[0], 2)?;
            rank(op, inputs[1], 2)?;
            let (m, k) = (inputs[0].shape()[0], inputs[0].shape()[1]);
            let (k2, n) = (inputs[1].shape()[0], inputs[1].shape()[1]);
            if k != k2 {
                return Err(Error::shape(op.name(), &[k, n], inputs[1].shape()));
            }
            (
                vec![m, n],
                kernels::matmul(inputs[0].data(), inputs[1].data(), m, k, n),
            )
        }
        Op::Conv(g) => {
            arity(op, inputs, 2)?;
            check(op, inputs[0], &g.input_shape())?;
            check(op, inputs[1], &g.weight_shape())?;
            (
                g.output_shape().to_vec(),
                kernels::conv_forward(inputs[0].data(), inputs[1].data(), g),
            )
        }
        Op::ConvInputGrad(g) => {
            arity(op, inputs, 2)?;
            check(op, inputs[0], &g.output_shape())?;
            check(op, inputs[1], &g.weight_shape())?;
            (
                g.input_shape().to_vec(),
                kernels::conv_input_grad(inputs[0].data(), inputs[1].data(), g),
            )
        }
        Op::ConvWeightGrad(g) => {
            arity(op, inputs, 2)?;
            check(op, inputs[0], &g.input_shape())?;
            check(op, inputs[1], &g.output_shape())?;
            (
                g.weight_shape().to_vec(),
                kernels::conv_weight_grad(inputs[0].data(), inputs[1].data(), g),
            )
        }
        Op::ChannelBias => {
            arity(op, inputs, 2)?;
            let (c, h, w) = chw(op, inputs[0])?;
            check(op, inputs[1], &[c])?;
            let b = inputs[1].data();
            let mut data = inputs[0].to_vec();
            for (plane, &bias) in data.chunks_exact_mut(h * w).zip(b) {
                plane.iter_mut().for_each(|v| *v += bias);
            }
            (vec![c, h, w], data)
        }
        Op::SpatialSum => {
            arity(op, inputs, 1)?;
            let (c, h, w) = chw(op, inputs[0])?;
            let data = inputs[0].data().chunks(h * w).map(|p| p.iter().sum()).collect();
            (vec![c], data)
        }
        Op::ChannelExpand(h, w) => {
            arity(op, inputs, 1)?;
            rank(op, inputs[0], 1)?;
            let c = inputs[0].len();
            let data = inputs[0]
                .data()
                .iter()
                .flat_map(|&v| std::iter::repeat(v).take(h * w))
                .collect();
            (vec![c, *h, *w], data)
        }
        Op::ChannelSum => {
            arity(op, inputs, 1)?;
            let (_, h, w) = chw(op, inputs[0])?;
            let mut out = vec![0.0; h * w];
            for plane in inputs[0].data().chunks(h * w) {
                for (o, v) in out.iter_mut().zip(plane) {
                    *o += v;
                }
            }
            (vec![h, w], out)
        }
        Op::Tile(c) => {
            arity(op, inputs, 1)?;
            rank(op, inputs[0], 2)?;
            let s = inputs[0].shape();
            let mut data = Vec::with_capacity(c * inputs[0].len());
            for _ in 0..*c {
                data.extend_from_slice(inputs[0].data());
            }
            (vec![*c, s[0], s[1]], data)
        }
        Op::MaxPool2 | Op::AvgPool2 => {
            arity(op, inputs, 1)?;
            let (c, h, w) = chw(op, inputs[0])?;
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::invalid(
                    op.name(),
                    format!("spatial dims must be even, got {h}×{w}"),
                ));
            }
            let x = inputs[0].data();
            let data = if matches!(op, Op::MaxPool2) {
                kernels::max_pool2_indices(x, c, h, w)
                    .into_iter()
                    .map(|i| x[i])
                    .collect()
            } else {
                kernels::avg_pool2(x, c, h, w)
            };
            (vec![c, h / 2, w / 2], data)
        }
        Op::AvgUnpool2 => {
            arity(op, inputs, 1)?;
            let (c, h, w) = chw(op, inputs[0])?;
            (
                vec![c, 2 * h, 2 * w],
                kernels::avg_unpool2(inputs[0].data(), c, h, w),
            )
        }
        Op::MaxAll => {
            arity(op, inputs, 1)?;
            let x = inputs[0].data();
            (vec![], vec![x[kernels::argmax(x)]])
        }
        Op::Gather { idx, shape } => {
            arity(op, inputs, 1)?;
            let x = inputs[0].data();
            if idx.len() != shape.iter().product::<usize>() || idx.iter().any(|&i| i >= x.len()) {
                return Err(Error::invalid(op.name(), "index set does not fit"));
            }
            (shape.clone(), idx.iter().map(|&i| x[i]).collect())
        }
        Op::Scatter { idx, shape } => {
            arity(op, inputs, 1)?;
            let n: usize = shape.iter().product();
            if idx.len() != inputs[0].len() || idx.iter().any(|&i| i >= n) {
                return Err(Error::invalid(op.name(), "index set does not fit"));
            }
            let mut out = vec![0.0; n];
            for (&i, &v) in idx.iter().zip(inputs[0].data()) {
                out[i] += v;
            }
            (shape.clone(), out)
        }
    };
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: op.name() });
    }
    Ok(Tensor::from_parts(shape, data))
}

fn check(op: &Op, t: &Tensor, shape: &[usize]) -> Result<()> {
    if t.shape() != shape {
        return Err(Error::shape(op.name(), shape, t.shape()));
    }
    Ok(())
}

/// Vector-Jacobian products for `op`, one per input, computed only where
/// `needs[k]` is set. `out` is the node's own output, `g` its upstream gradient.
pub(crate) fn vjp(
    graph: &Graph,
    op: &Op,
    inputs: &[Tensor],
    out: &Tensor,
    g: &Tensor,
    needs: &[bool],
) -> Result<Vec<Option<Tensor>>> {
    let want = |k: usize| needs.get(k).copied().unwrap_or(false);
    let mut res: Vec<Option<Tensor>> = vec![None; inputs.len()];
    macro_rules! set {
        ($k:expr, $e:expr) => {
            if want($k) {
                res[$k] = Some($e);
            }
        };
    }
    let mask = |t: &Tensor, f: fn(f64) -> f64| Tensor::from_parts(t.shape().to_vec(), map(t, f));
    match op {
        Op::Leaf => {}
        Op::Add => {
            set!(0, g.clone());
            set!(1, g.clone());
        }
        Op::Sub => {
            set!(0, g.clone());
            set!(1, graph.scale(g, -1.0)?);
        }
        Op::Mul => {
            set!(0, graph.mul(g, &inputs[1])?);
            set!(1, graph.mul(g, &inputs[0])?);
        }
        Op::Div => {
            set!(0, graph.div(g, &inputs[1])?);
            set!(
                1,
                graph.scale(&graph.div(&graph.mul(g, out)?, &inputs[1])?, -1.0)?
            );
        }
        Op::Abs => {
            let sign = mask(&inputs[0], |x| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            });
            set!(0, graph.mul(g, &sign)?);
        }
        Op::Relu => {
            let step = mask(&inputs[0], |x| if x > 0.0 { 1.0 } else { 0.0 });
            set!(0, graph.mul(g, &step)?);
        }
        Op::Sigmoid => {
            let slope = graph.mul(out, &graph.one_minus(out)?)?;
            set!(0, graph.mul(g, &slope)?);
        }
        Op::OneMinus => set!(0, graph.scale(g, -1.0)?),
        Op::Scale(c) => set!(0, graph.scale(g, *c)?),
        Op::AddScalar(_) => set!(0, g.clone()),
        Op::ScaleBy => {
            set!(0, graph.scale_by(g, &inputs[1])?);
            if want(1) {
                let d = graph.inner(g, &inputs[0])?;
                res[1] = Some(graph.reshape(&d, inputs[1].shape())?);
            }
        }
        Op::Dot => {
            set!(0, graph.scale_by(&inputs[1], g)?);
            set!(1, graph.scale_by(&inputs[0], g)?);
        }
        Op::L2Distance => {
            let diff = graph.sub(&inputs[0], &inputs[1])?;
            let da = graph.scale_by(&diff, &graph.div(g, out)?)?;
            if want(1) {
                res[1] = Some(graph.scale(&da, -1.0)?);
            }
            set!(0, da);
        }
        Op::Sum => set!(0, graph.expand(g, inputs[0].shape())?),
        Op::Expand(_) => {
            let s = graph.sum(g)?;
            set!(0, graph.reshape(&s, inputs[0].shape())?);
        }
        Op::Reshape(_) => set!(0, graph.reshape(g, inputs[0].shape())?),
        Op::Transpose => set!(0, graph.transpose(g)?),
        Op::MatMul => {
            set!(0, graph.matmul(g, &graph.transpose(&inputs[1])?)?);
            set!(1, graph.matmul(&graph.transpose(&inputs[0])?, g)?);
        }
        Op::Conv(geom) => {
            set!(0, graph.record(Op::ConvInputGrad(*geom), &[g, &inputs[1]])?);
            set!(1, graph.record(Op::ConvWeightGrad(*geom), &[&inputs[0], g])?);
        }
        Op::ConvInputGrad(geom) => {
            // inputs: (y, w); g is input-shaped
            set!(0, graph.record(Op::Conv(*geom), &[g, &inputs[1]])?);
            set!(1, graph.record(Op::ConvWeightGrad(*geom), &[g, &inputs[0]])?);
        }
        Op::ConvWeightGrad(geom) => {
            // inputs: (x, y); g is weight-shaped
            set!(0, graph.record(Op::ConvInputGrad(*geom), &[&inputs[1], g])?);
            set!(1, graph.record(Op::Conv(*geom), &[&inputs[0], g])?);
        }
        Op::ChannelBias => {
            set!(0, g.clone());
            set!(1, graph.record(Op::SpatialSum, &[g])?);
        }
        Op::SpatialSum => {
            let s = inputs[0].shape();
            set!(0, graph.record(Op::ChannelExpand(s[1], s[2]), &[g])?);
        }
        Op::ChannelExpand(..) => set!(0, graph.record(Op::SpatialSum, &[g])?),
        Op::ChannelSum => set!(0, graph.record(Op::Tile(inputs[0].shape()[0]), &[g])?),
        Op::Tile(_) => set!(0, graph.record(Op::ChannelSum, &[g])?),
        Op::MaxPool2 => {
            if want(0) {
                let s = inputs[0].shape();
                let idx = kernels::max_pool2_indices(inputs[0].data(), s[0], s[1], s[2]);
                res[0] = Some(graph.record(
                    Op::Scatter {
                        idx: Arc::new(idx),
                        shape: s.to_vec(),
                    },
                    &[g],
                )?);
            }
        }
        Op::AvgPool2 => set!(0, graph.record(Op::AvgUnpool2, &[g])?),
        Op::AvgUnpool2 => set!(0, graph.record(Op::AvgPool2, &[g])?),
        Op::MaxAll => {
            let i = kernels::argmax(inputs[0].data());
            let g1 = graph.reshape(g, &[1])?;
            set!(
                0,
                graph.record(
                    Op::Scatter {
                        idx: Arc::new(vec![i]),
                        shape: inputs[0].shape().to_vec(),
                    },
                    &[&g1],
                )?
            );
        }
        Op::Gather { idx, .. } => set!(
            0,
            graph.record(
                Op::Scatter {
                    idx: Arc::clone(idx),
                    shape: inputs[0].shape().to_vec(),
                },
                &[g],
            )?
        ),
        Op::Scatter { idx, .. } => set!(
            0,
            graph.record(
                Op::Gather {
                    idx: Arc::clone(idx),
                    shape: inputs[0].shape().to_vec(),
                },
                &[g],
            )?
        ),
    }
    Ok(res)
}
