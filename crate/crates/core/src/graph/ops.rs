//! Op definitions: arity, shape rules, and the unscaled forward/backward
//! kernels `f` and `f_grad`.

use super::GraphError;
use crate::tensor::{gelu_grad, Tensor, TensorError};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NodeOp {
    Identity,
    /// `X[b×m] · W[m×n]`.
    MatMul,
    /// Plain sum of same-shaped inputs.
    Add,
    /// `Σ γ_i x_i` (the unscaled weighted sum).
    WeightedAdd {
        weights: Vec<f64>,
    },
    /// `x[b×n] + c[n]` broadcast over rows.
    BiasAdd,
    Relu,
    Gelu,
    Tanh,
    Sigmoid,
    Square,
    /// Softmax over the last axis.
    Softmax,
    /// Per-row `-log softmax(logits)_t`; inputs are logits `[b×s]` and
    /// labels `[b]` holding class indices.
    SoftmaxXent,
    /// `(x - μ)/σ · w + c` per row; inputs `x[b×n]`, `w[n]`, `c[n]`.
    LayerNorm,
    /// Sum of all elements, giving a scalar.
    Sum,
    /// Fan-out: `fanout` copies of the input. Backward sums the copies'
    /// gradients.
    Copy {
        fanout: usize,
    },
}

/// Cached forward intermediates needed by backward.
#[derive(Debug, Clone)]
pub(crate) enum Aux {
    None,
    /// Possibly quantised operands actually multiplied.
    MatMul {
        x: Tensor,
        w: Tensor,
    },
    Probs(Tensor),
    LayerNorm {
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Unscaled(Tensor),
}

impl NodeOp {
    pub fn name(&self) -> &'static str {
        match self {
            NodeOp::Identity => "identity",
            NodeOp::MatMul => "matmul",
            NodeOp::Add => "add",
            NodeOp::WeightedAdd { .. } => "weighted_add",
            NodeOp::BiasAdd => "bias_add",
            NodeOp::Relu => "relu",
            NodeOp::Gelu => "gelu",
            NodeOp::Tanh => "tanh",
            NodeOp::Sigmoid => "sigmoid",
            NodeOp::Square => "square",
            NodeOp::Softmax => "softmax",
            NodeOp::SoftmaxXent => "softmax_xent",
            NodeOp::LayerNorm => "layer_norm",
            NodeOp::Sum => "sum",
            NodeOp::Copy { .. } => "copy",
        }
    }

    /// `None` means variadic (at least one input).
    pub fn arity(&self) -> Option<usize> {
        match self {
            NodeOp::Add => None,
            NodeOp::WeightedAdd { weights } => Some(weights.len()),
            NodeOp::MatMul | NodeOp::BiasAdd | NodeOp::SoftmaxXent => Some(2),
            NodeOp::LayerNorm => Some(3),
            _ => Some(1),
        }
    }

    pub fn outputs(&self) -> usize {
        match self {
            NodeOp::Copy { fanout } => *fanout,
            _ => 1,
        }
    }

    /// Whether input `slot` carries no gradient (class labels).
    pub fn is_label_slot(&self, slot: usize) -> bool {
        matches!(self, NodeOp::SoftmaxXent) && slot == 1
    }

    pub(crate) fn check(&self, shapes: &[&[usize]]) -> Result<Vec<Vec<usize>>, GraphError> {
        let arity_err = |expected: usize| GraphError::Arity { op: self.name(), expected, got: shapes.len() };
        match self.arity() {
            Some(k) if k != shapes.len() => return Err(arity_err(k)),
            None if shapes.is_empty() => return Err(arity_err(1)),
            _ => {}
        }
        let mismatch = |a: &[usize], b: &[usize]| {
            GraphError::Tensor(TensorError::ShapeMismatch { op: self.name(), left: a.to_vec(), right: b.to_vec() })
        };
        let rank2 = |s: &[usize]| -> Result<(usize, usize), GraphError> {
            match *s {
                [r, c] => Ok((r, c)),
                _ => Err(GraphError::Tensor(TensorError::BadRank { op: self.name(), rank: 2, shape: s.to_vec() })),
            }
        };
        let out = match self {
            NodeOp::MatMul => {
                let (b, m) = rank2(shapes[0])?;
                let (m2, n) = rank2(shapes[1])?;
                if m != m2 {
                    return Err(mismatch(shapes[0], shapes[1]));
                }
                vec![b, n]
            }
            NodeOp::Add | NodeOp::WeightedAdd { .. } => {
                if let NodeOp::WeightedAdd { weights } = self {
                    if weights.iter().any(|g| !g.is_finite()) || weights.iter().all(|g| *g == 0.0) {
                        return Err(GraphError::BadWeights);
                    }
                }
                for s in &shapes[1..] {
                    if s != &shapes[0] {
                        return Err(mismatch(shapes[0], s));
                    }
                }
                shapes[0].to_vec()
            }
            NodeOp::BiasAdd => {
                let (_, n) = rank2(shapes[0])?;
                if shapes[1] != [n] {
                    return Err(mismatch(shapes[0], shapes[1]));
                }
                shapes[0].to_vec()
            }
            NodeOp::SoftmaxXent => {
                let (b, _) = rank2(shapes[0])?;
                if shapes[1] != [b] {
                    return Err(mismatch(shapes[0], shapes[1]));
                }
                vec![b]
            }
            NodeOp::LayerNorm => {
                let (_, n) = rank2(shapes[0])?;
                for s in &shapes[1..] {
                    if *s != [n] {
                        return Err(mismatch(shapes[0], s));
                    }
                }
                shapes[0].to_vec()
            }
            NodeOp::Softmax if shapes[0].is_empty() => return Err(GraphError::Tensor(TensorError::Empty("softmax"))),
            NodeOp::Sum => vec![],
            _ => shapes[0].to_vec(),
        };
        Ok(vec![out; self.outputs()])
    }

    /// Unscaled forward `f`. Returns outputs and backward cache.
    pub(crate) fn forward(&self, xs: &[&Tensor]) -> Result<(Vec<Tensor>, Aux), GraphError> {
        let one = |t: Tensor| Ok((vec![t], Aux::None));
        match self {
            NodeOp::Identity => one(xs[0].clone()),
            NodeOp::MatMul => {
                let z = xs[0].matmul(xs[1])?;
                Ok((vec![z], Aux::MatMul { x: xs[0].clone(), w: xs[1].clone() }))
            }
            NodeOp::Add => {
                let mut acc = xs[0].clone();
                for x in &xs[1..] {
                    acc.axpy(1.0, x)?;
                }
                one(acc)
            }
            NodeOp::WeightedAdd { weights } => {
                let mut acc = xs[0].scale(weights[0]);
                for (x, &g) in xs[1..].iter().zip(&weights[1..]) {
                    acc.axpy(g, x)?;
                }
                one(acc)
            }
            NodeOp::BiasAdd => {
                let n = xs[1].len();
                let mut out = xs[0].clone();
                for row in out.data_mut().chunks_mut(n) {
                    for (o, c) in row.iter_mut().zip(xs[1].data()) {
                        *o += c;
                    }
                }
                one(out)
            }
            NodeOp::Relu => one(xs[0].relu()),
            NodeOp::Gelu => one(xs[0].gelu()),
            NodeOp::Tanh => {
                let y = xs[0].tanh();
                Ok((vec![y.clone()], Aux::Unscaled(y)))
            }
            NodeOp::Sigmoid => {
                let y = xs[0].sigmoid();
                Ok((vec![y.clone()], Aux::Unscaled(y)))
            }
            NodeOp::Square => one(xs[0].map(|x| x * x)),
            NodeOp::Softmax => {
                let y = xs[0].softmax()?;
                Ok((vec![y.clone()], Aux::Unscaled(y)))
            }
            NodeOp::SoftmaxXent => {
                let (b, s) = xs[0].dims2("softmax_xent")?;
                let probs = xs[0].softmax()?;
                let mut loss = Vec::with_capacity(b);
                for (i, row) in probs.data().chunks(s).enumerate() {
                    let t = label(xs[1].data()[i], s, i)?;
                    loss.push(-row[t].ln());
                }
                Ok((vec![Tensor::from_vec(loss)], Aux::Probs(probs)))
            }
            NodeOp::LayerNorm => {
                let (b, n) = xs[0].dims2("layer_norm")?;
                let mut xhat = xs[0].clone();
                let mut inv_std = Vec::with_capacity(b);
                for (i, row) in xhat.data_mut().chunks_mut(n).enumerate() {
                    let mu = row.iter().sum::<f64>() / n as f64;
                    let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n as f64;
                    if var == 0.0 {
                        return Err(GraphError::DegenerateRow { row: i });
                    }
                    let r = 1.0 / var.sqrt();
                    for x in row.iter_mut() {
                        *x = (*x - mu) * r;
                    }
                    inv_std.push(r);
                }
                let mut y = xhat.clone();
                for row in y.data_mut().chunks_mut(n) {
                    for ((o, w), c) in row.iter_mut().zip(xs[1].data()).zip(xs[2].data()) {
                        *o = *o * w + c;
                    }
                }
                Ok((vec![y], Aux::LayerNorm { xhat, inv_std }))
            }
            NodeOp::Sum => one(Tensor::scalar(xs[0].sum())),
            NodeOp::Copy { fanout } => Ok((vec![xs[0].clone(); *fanout], Aux::None)),
        }
    }

    /// Unscaled backward `f_grad`: gradient for each input given output
    /// gradients `gs` (one per output; `None` means zero).
    pub(crate) fn backward(
        &self,
        xs: &[&Tensor],
        aux: &Aux,
        gs: &[Option<&Tensor>],
    ) -> Result<Vec<Tensor>, GraphError> {
        if let NodeOp::Copy { .. } = self {
            let mut acc = Tensor::zeros(xs[0].shape());
            for g in gs.iter().flatten() {
                acc.axpy(1.0, g)?;
            }
            return Ok(vec![acc]);
        }
        let g = gs[0].expect("backward called without an output gradient");
        let elementwise = |d: &dyn Fn(f64) -> f64| g.zip(&xs[0].map(d), "backward", |a, b| a * b);
        Ok(match self {
            NodeOp::Identity => vec![g.clone()],
            NodeOp::MatMul => {
                let Aux::MatMul { x, w } = aux else { unreachable!("matmul cache") };
                vec![g.matmul_nt(w)?, x.matmul_tn(g)?]
            }
            NodeOp::Add => vec![g.clone(); xs.len()],
            NodeOp::WeightedAdd { weights } => weights.iter().map(|&w| g.scale(w)).collect(),
            NodeOp::BiasAdd => {
                let n = xs[1].len();
                let mut gc = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (a, v) in gc.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                vec![g.clone(), Tensor::from_vec(gc)]
            }
            NodeOp::Relu => vec![elementwise(&|x| if x > 0.0 { 1.0 } else { 0.0 })?],
            NodeOp::Gelu => vec![elementwise(&gelu_grad)?],
            NodeOp::Tanh | NodeOp::Sigmoid => {
                let Aux::Unscaled(y) = aux else { unreachable!("activation cache") };
                let d: fn(f64) -> f64 = if matches!(self, NodeOp::Tanh) { |y| 1.0 - y * y } else { |y| y * (1.0 - y) };
                vec![g.zip(y, "backward", |g, y| g * d(y))?]
            }
            NodeOp::Square => vec![elementwise(&|x| 2.0 * x)?],
            NodeOp::Softmax => {
                let Aux::Unscaled(y) = aux else { unreachable!("softmax cache") };
                let s = *y.shape().last().unwrap();
                let mut out = g.clone();
                for (orow, yrow) in out.data_mut().chunks_mut(s).zip(y.data().chunks(s)) {
                    let dot: f64 = orow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for (o, yv) in orow.iter_mut().zip(yrow) {
                        *o = yv * (*o - dot);
                    }
                }
                vec![out]
            }
            NodeOp::SoftmaxXent => {
                let Aux::Probs(p) = aux else { unreachable!("xent cache") };
                let (_, s) = p.dims2("softmax_xent")?;
                let mut out = p.clone();
                for (i, row) in out.data_mut().chunks_mut(s).enumerate() {
                    let t = label(xs[1].data()[i], s, i)?;
                    row[t] -= 1.0;
                    let gi = g.data()[i];
                    for v in row.iter_mut() {
                        *v *= gi;
                    }
                }
                vec![out, Tensor::zeros(xs[1].shape())]
            }
            NodeOp::LayerNorm => {
                let Aux::LayerNorm { xhat, inv_std } = aux else { unreachable!("norm cache") };
                let n = xs[1].len();
                let w = xs[1].data();
                let mut gx = g.clone();
                let mut gw = vec![0.0; n];
                let mut gc = vec![0.0; n];
                for (i, (grow, xrow)) in gx.data_mut().chunks_mut(n).zip(xhat.data().chunks(n)).enumerate() {
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..n {
                        gw[j] += grow[j] * xrow[j];
                        gc[j] += grow[j];
                        let d = grow[j] * w[j];
                        mean_d += d;
                        mean_dx += d * xrow[j];
                    }
                    mean_d /= n as f64;
                    mean_dx /= n as f64;
                    for j in 0..n {
                        let d = grow[j] * w[j];
                        grow[j] = inv_std[i] * (d - mean_d - xrow[j] * mean_dx);
                    }
                }
                vec![gx, Tensor::from_vec(gw), Tensor::from_vec(gc)]
            }
            NodeOp::Sum => vec![Tensor::full(xs[0].shape(), g.data()[0])],
            NodeOp::Copy { .. } => unreachable!(),
        })
    }
}

fn label(v: f64, classes: usize, row: usize) -> Result<usize, GraphError> {
    if v >= 0.0 && v.fract() == 0.0 && (v as usize) < classes {
        Ok(v as usize)
    } else {
        Err(GraphError::LabelOutOfRange { row, label: v, classes })
    }
}
