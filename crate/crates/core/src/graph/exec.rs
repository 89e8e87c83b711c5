//! Forward and backward value recursions.

use super::ops::Aux;
use super::{Graph, GraphError, InputKind, NodeOp, Value};
use crate::floatsim::FloatFormat;
use crate::tensor::Tensor;

/// Which factors to apply when executing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FactorMode {
    /// `α` forward, `β_i` backward: the scaled graph.
    #[default]
    Scaled,
    /// `α` forward and `α` backward: the true gradient of the scaled
    /// graph's forward function.
    Collapsed,
    /// All factors 1: the plain unscaled graph.
    Unit,
}

/// Formats that matmul operands are rounded to.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatmulQuant {
    /// Activations and weights entering a matmul.
    pub forward: Option<FloatFormat>,
    /// Incoming gradients entering the matmul backward.
    pub gradient: Option<FloatFormat>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ExecOptions<'a> {
    pub mode: FactorMode,
    pub quant: Option<&'a MatmulQuant>,
}

impl<'a> ExecOptions<'a> {
    pub fn mode(mode: FactorMode) -> Self {
        Self { mode, quant: None }
    }
}

/// Forward values of every edge plus the caches backward needs.
#[derive(Debug, Clone)]
pub struct Tape {
    values: Vec<Tensor>,
    aux: Vec<Aux>,
    non_finite: Vec<Value>,
    n_nodes: usize,
}

impl Tape {
    pub fn value(&self, v: Value) -> &Tensor {
        &self.values[v.0]
    }
    pub fn values(&self) -> &[Tensor] {
        &self.values
    }
    /// Values that contain a NaN or infinity.
    pub fn non_finite(&self) -> &[Value] {
        &self.non_finite
    }
}

/// Backward values: gradients for every graph input and every edge.
#[derive(Debug, Clone)]
pub struct Backward {
    pub inputs: Vec<Tensor>,
    /// `h(e)` for each value; `None` where no gradient flowed.
    pub values: Vec<Option<Tensor>>,
    pub non_finite: bool,
}

fn factor_pair(g: &Graph, node: usize, slot: usize, mode: FactorMode) -> (f64, f64) {
    let f = &g.nodes[node].factors;
    match mode {
        FactorMode::Scaled => (f.alpha, f.betas[slot]),
        FactorMode::Collapsed => (f.alpha, f.alpha),
        FactorMode::Unit => (1.0, 1.0),
    }
}

fn quantized(t: &Tensor, fmt: Option<&FloatFormat>) -> Tensor {
    match fmt {
        Some(f) => t.map(|x| f.quantize(x)),
        None => t.clone(),
    }
}

impl Graph {
    /// Runs the forward recursion, recording every edge value.
    pub fn forward(&self, inputs: &[Tensor], opts: ExecOptions<'_>) -> Result<Tape, GraphError> {
        if self.outputs.is_empty() {
            return Err(GraphError::NoOutputs);
        }
        if inputs.len() != self.inputs.len() {
            return Err(GraphError::InputCount { expected: self.inputs.len(), got: inputs.len() });
        }
        let mut values: Vec<Option<Tensor>> = vec![None; self.values.len()];
        for (i, (spec, t)) in self.inputs.iter().zip(inputs).enumerate() {
            if t.shape() != spec.shape.as_slice() {
                return Err(GraphError::InputShape {
                    name: spec.name.clone(),
                    expected: spec.shape.clone(),
                    got: t.shape().to_vec(),
                });
            }
            values[self.input_values[i].0] = Some(t.clone());
        }
        let mut aux = Vec::with_capacity(self.nodes.len());
        for (n, node) in self.nodes.iter().enumerate() {
            let xs: Vec<&Tensor> =
                node.inputs.iter().map(|v| values[v.0].as_ref().expect("topological order")).collect();
            let fwd_fmt = opts.quant.and_then(|q| q.forward.as_ref());
            let (outs, a) = match (&node.op, fwd_fmt) {
                (NodeOp::MatMul, Some(fmt)) => {
                    let xq = quantized(xs[0], Some(fmt));
                    let wq = quantized(xs[1], Some(fmt));
                    node.op.forward(&[&xq, &wq])?
                }
                _ => node.op.forward(&xs)?,
            };
            let alpha = match opts.mode {
                FactorMode::Unit => 1.0,
                _ => node.factors.alpha,
            };
            for (port, out) in outs.into_iter().enumerate() {
                let out = if alpha == 1.0 { out } else { out.scale(alpha) };
                values[self.node_outputs[n][port].0] = Some(out);
            }
            aux.push(a);
        }
        let values: Vec<Tensor> = values.into_iter().map(|v| v.expect("every value is produced")).collect();
        let non_finite = (0..values.len()).filter(|&i| !values[i].all_finite()).map(Value).collect();
        Ok(Tape { values, aux, non_finite, n_nodes: self.nodes.len() })
    }

    /// Convenience: forward values of the graph outputs.
    pub fn eval(&self, inputs: &[Tensor], mode: FactorMode) -> Result<Vec<Tensor>, GraphError> {
        let tape = self.forward(inputs, ExecOptions::mode(mode))?;
        Ok(self.outputs.iter().map(|v| tape.values[v.0].clone()).collect())
    }

    /// Runs the backward recursion from one gradient per output.
    pub fn backward(
        &self,
        tape: &Tape,
        output_grads: &[Tensor],
        opts: ExecOptions<'_>,
    ) -> Result<Backward, GraphError> {
        if tape.n_nodes != self.nodes.len() || tape.values.len() != self.values.len() {
            return Err(GraphError::TapeMismatch);
        }
        if output_grads.len() != self.outputs.len() {
            return Err(GraphError::OutputGradCount { expected: self.outputs.len(), got: output_grads.len() });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.values.len()];
        for (v, g) in self.outputs.iter().zip(output_grads) {
            if g.shape() != self.value_shape(*v) {
                return Err(GraphError::InputShape {
                    name: format!("d{}", self.value_name(*v)),
                    expected: self.value_shape(*v).to_vec(),
                    got: g.shape().to_vec(),
                });
            }
            grads[v.0] = Some(g.clone());
        }
        let grad_fmt = opts.quant.and_then(|q| q.gradient.as_ref());
        for n in (0..self.nodes.len()).rev() {
            let node = &self.nodes[n];
            let outs = &self.node_outputs[n];
            if outs.iter().all(|v| grads[v.0].is_none()) {
                continue;
            }
            let xs: Vec<&Tensor> = node.inputs.iter().map(|v| &tape.values[v.0]).collect();
            let gq;
            let gs: Vec<Option<&Tensor>> = match (&node.op, grad_fmt) {
                (NodeOp::MatMul, Some(fmt)) => {
                    gq = quantized(grads[outs[0].0].as_ref().unwrap(), Some(fmt));
                    vec![Some(&gq)]
                }
                _ => outs.iter().map(|v| grads[v.0].as_ref()).collect(),
            };
            let in_grads = node.op.backward(&xs, &tape.aux[n], &gs)?;
            for (slot, (v, g)) in node.inputs.iter().zip(in_grads).enumerate() {
                if node.op.is_label_slot(slot) {
                    continue;
                }
                let (_, beta) = factor_pair(self, n, slot, opts.mode);
                let g = if beta == 1.0 { g } else { g.scale(beta) };
                match &mut grads[v.0] {
                    Some(acc) => acc.axpy(1.0, &g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        let inputs: Vec<Tensor> = self
            .input_values
            .iter()
            .zip(&self.inputs)
            .map(|(v, spec)| grads[v.0].clone().unwrap_or_else(|| Tensor::zeros(&spec.shape)))
            .collect();
        let non_finite = grads.iter().flatten().any(|g| !g.all_finite());
        Ok(Backward { inputs, values: grads, non_finite })
    }

    /// Gradients of the graph inputs for the given output gradients.
    pub fn gradients(
        &self,
        inputs: &[Tensor],
        output_grads: &[Tensor],
        mode: FactorMode,
    ) -> Result<Vec<Tensor>, GraphError> {
        let opts = ExecOptions::mode(mode);
        let tape = self.forward(inputs, opts)?;
        Ok(self.backward(&tape, output_grads, opts)?.inputs)
    }

    /// Random inputs matching the graph's input specs: unit normals for
    /// data and parameters, valid class indices for labels.
    pub fn random_inputs(&self, rng: &mut crate::rng::Rng) -> Vec<Tensor> {
        (0..self.inputs.len())
            .map(|i| {
                let spec = &self.inputs[i];
                match spec.kind {
                    InputKind::Labels => {
                        let classes = self.label_classes(i).unwrap_or(1).max(1);
                        let n = spec.shape.iter().product();
                        let data = (0..n).map(|_| rng.below(classes) as f64).collect();
                        Tensor::new(spec.shape.clone(), data).expect("shape from spec")
                    }
                    _ => Tensor::randn_with(&spec.shape, 1.0, rng),
                }
            })
            .collect()
    }
}
