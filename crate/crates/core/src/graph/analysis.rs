//! Constraint resolution and the checks built on the scaled-op theorem.

use super::exec::{ExecOptions, FactorMode};
use super::{FactorRef, Graph, GraphError, ScaleFactors};
use crate::rng::Rng;
use crate::tensor::Tensor;
use serde::Serialize;
use std::collections::BTreeMap;

/// Factors forced equal by the `α = β` rule at one node.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConstraintGroup {
    pub node: usize,
    pub members: Vec<FactorRef>,
    pub proposals: Vec<f64>,
    /// Geometric mean of `proposals`.
    pub resolved_value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Resolution {
    pub factors: Vec<ScaleFactors>,
    pub groups: Vec<ConstraintGroup>,
}

fn geometric_mean(xs: &[f64]) -> f64 {
    (xs.iter().map(|x| x.ln()).sum::<f64>() / xs.len() as f64).exp()
}

impl Graph {
    /// Resolves constraints using the graph's own factors as proposals.
    pub fn resolve_constraints(&self) -> Result<Resolution, GraphError> {
        let mut proposals = BTreeMap::new();
        for (n, node) in self.nodes.iter().enumerate() {
            proposals.insert(FactorRef::Alpha(n), node.factors.alpha);
            for (s, &b) in node.factors.betas.iter().enumerate() {
                proposals.insert(FactorRef::Beta(n, s), b);
            }
        }
        self.resolve_constraints_with(&proposals)
    }

    /// For every unpinned node, `α` and the `β`s of its constrained slots
    /// (non-cut or forced) are replaced by the geometric mean of their
    /// proposals. Every other factor keeps its proposal.
    pub fn resolve_constraints_with(&self, proposals: &BTreeMap<FactorRef, f64>) -> Result<Resolution, GraphError> {
        let get = |f: FactorRef| -> Result<f64, GraphError> {
            let node = match f {
                FactorRef::Alpha(n) | FactorRef::Beta(n, _) => n,
            };
            let v = *proposals.get(&f).ok_or_else(|| GraphError::Description(format!("no proposal for {f:?}")))?;
            if !(v > 0.0 && v.is_finite()) {
                return Err(GraphError::BadFactor { node, what: format!("{f:?}"), value: v });
            }
            Ok(v)
        };
        let mut factors = Vec::with_capacity(self.nodes.len());
        let mut groups = vec![];
        for (n, node) in self.nodes.iter().enumerate() {
            let mut f = ScaleFactors {
                alpha: get(FactorRef::Alpha(n))?,
                betas: (0..node.inputs.len()).map(|s| get(FactorRef::Beta(n, s))).collect::<Result<_, _>>()?,
            };
            let slots = self.constrained_slots(n);
            if !node.pinned && !slots.is_empty() {
                let mut members = vec![FactorRef::Alpha(n)];
                members.extend(slots.iter().map(|&s| FactorRef::Beta(n, s)));
                let props: Vec<f64> = members.iter().map(|&m| get(m)).collect::<Result<_, _>>()?;
                let v = geometric_mean(&props);
                f.alpha = v;
                for &s in &slots {
                    f.betas[s] = v;
                }
                groups.push(ConstraintGroup { node: n, members, proposals: props, resolved_value: v });
            }
            factors.push(f);
        }
        Ok(Resolution { factors, groups })
    }

    /// The graph with its constraints resolved.
    pub fn resolved(&self) -> Result<Graph, GraphError> {
        self.with_factors(&self.resolve_constraints()?.factors)
    }

    /// Constant by which the scaled backward pass multiplies the true
    /// gradient of the graph's (scaled) forward function for input `input`.
    ///
    /// Computed by walking back from the output: each op contributes
    /// `β_slot / α`. On a constraint-scaled graph every non-cut edge
    /// contributes 1, so this is the product over the cut-edges on any path.
    /// Errors when paths disagree, i.e. when no constant ratio exists.
    pub fn gradient_scale_ratio(&self, input: usize) -> Result<f64, GraphError> {
        #[derive(Clone, Copy)]
        enum R {
            Dead,
            Ratio(f64),
            Clash(f64, f64),
        }
        if self.outputs.len() != 1 {
            return Err(GraphError::MultipleOutputs(self.outputs.len()));
        }
        let name = self.inputs.get(input).ok_or(GraphError::UnknownValue(input))?.name.clone();
        let mut r = vec![R::Dead; self.values.len()];
        r[self.outputs[0].0] = R::Ratio(1.0);
        for n in (0..self.nodes.len()).rev() {
            let node = &self.nodes[n];
            let mut out = R::Dead;
            for v in &self.node_outputs[n] {
                out = match (out, r[v.0]) {
                    (R::Dead, x) | (x, R::Dead) => x,
                    (R::Clash(a, b), _) | (_, R::Clash(a, b)) => R::Clash(a, b),
                    (R::Ratio(a), R::Ratio(b)) if (a - b).abs() <= 1e-9 * a.abs().max(b.abs()) => R::Ratio(a),
                    (R::Ratio(a), R::Ratio(b)) => R::Clash(a, b),
                };
            }
            for (slot, v) in node.inputs.iter().enumerate() {
                if node.op.is_label_slot(slot) {
                    continue;
                }
                let k = node.factors.betas[slot] / node.factors.alpha;
                r[v.0] = match out {
                    R::Ratio(x) => R::Ratio(k * x),
                    other => other,
                };
            }
        }
        match r[self.input_values[input].0] {
            R::Ratio(x) => Ok(x),
            R::Dead => Err(GraphError::NotConnected(name)),
            R::Clash(a, b) => Err(GraphError::InconsistentRatio { input: name, a, b }),
        }
    }

    /// Product of `β/α` over the cut-edges into ops, following the first
    /// path from `input` to the output. Only meaningful on constraint-scaled
    /// graphs; see [`Graph::gradient_scale_ratio`].
    pub fn cut_edge_product(&self, input: usize) -> Result<f64, GraphError> {
        let mut v = self.input_values[input];
        let mut prod = 1.0;
        loop {
            if self.outputs.contains(&v) {
                return Ok(prod);
            }
            let Some((n, slot)) = self
                .nodes
                .iter()
                .enumerate()
                .find_map(|(n, node)| node.inputs.iter().position(|x| *x == v).map(|s| (n, s)))
            else {
                return Err(GraphError::NotConnected(self.inputs[input].name.clone()));
            };
            let node = &self.nodes[n];
            if self.cut[n][slot] {
                prod *= node.factors.betas[slot] / node.factors.alpha;
            }
            // Follow the first output that still reaches a graph output.
            let outs = &self.node_outputs[n];
            v = *outs
                .iter()
                .find(|o| self.reaches_output(**o))
                .ok_or_else(|| GraphError::NotConnected(self.inputs[input].name.clone()))?;
        }
    }

    fn reaches_output(&self, v: super::Value) -> bool {
        if self.outputs.contains(&v) {
            return true;
        }
        self.nodes
            .iter()
            .enumerate()
            .any(|(n, node)| node.inputs.contains(&v) && self.node_outputs[n].iter().any(|o| self.reaches_output(*o)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InputRatio {
    pub input: String,
    /// Least-squares ratio of scaled to true gradient; `None` when the
    /// true gradient vanished in every trial.
    pub ratio: Option<f64>,
    /// `max |s - c·t| / max |s|` over all elements and trials.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verification {
    pub is_scaled_op: bool,
    pub trials: usize,
    pub tolerance: f64,
    pub per_input: Vec<InputRatio>,
}

impl Verification {
    pub fn max_residual(&self) -> f64 {
        self.per_input.iter().map(|r| r.residual).fold(0.0, f64::max)
    }
}

/// Default tolerance of [`verify_scaled_op`].
pub const VERIFY_TOL: f64 = 1e-9;

/// Empirically checks whether the scaled graph's backward pass equals a
/// per-input constant times the true gradient of its forward function.
///
/// Inputs and output gradients are drawn at random for every trial.
/// Errors from execution (e.g. a degenerate layer-norm row) are returned.
pub fn verify_scaled_op(g: &Graph, trials: usize, seed: u64) -> Result<Verification, GraphError> {
    let mut rng = Rng::new(seed);
    let diff = g.differentiable_inputs();
    let mut st = vec![(0.0, 0.0); diff.len()];
    let mut pairs: Vec<Vec<(f64, f64)>> = vec![vec![]; diff.len()];
    for _ in 0..trials.max(1) {
        let inputs = g.random_inputs(&mut rng);
        let ograds: Vec<Tensor> =
            g.outputs().iter().map(|v| Tensor::randn_with(g.value_shape(*v), 1.0, &mut rng)).collect();
        let tape = g.forward(&inputs, ExecOptions::mode(FactorMode::Scaled))?;
        let scaled = g.backward(&tape, &ograds, ExecOptions::mode(FactorMode::Scaled))?;
        let truth = g.backward(&tape, &ograds, ExecOptions::mode(FactorMode::Collapsed))?;
        for (k, &i) in diff.iter().enumerate() {
            for (&s, &t) in scaled.inputs[i].data().iter().zip(truth.inputs[i].data()) {
                st[k].0 += s * t;
                st[k].1 += t * t;
                pairs[k].push((s, t));
            }
        }
    }
    let per_input: Vec<InputRatio> = diff
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            let (sum_st, sum_tt) = st[k];
            let max_s = pairs[k].iter().map(|p| p.0.abs()).fold(0.0, f64::max);
            if sum_tt == 0.0 {
                let residual = if max_s == 0.0 { 0.0 } else { f64::INFINITY };
                return InputRatio { input: g.inputs()[i].name.clone(), ratio: None, residual };
            }
            let c = sum_st / sum_tt;
            let worst = pairs[k].iter().map(|&(s, t)| (s - c * t).abs()).fold(0.0, f64::max);
            InputRatio {
                input: g.inputs()[i].name.clone(),
                ratio: Some(c),
                residual: if max_s == 0.0 { 0.0 } else { worst / max_s },
            }
        })
        .collect();
    let is_scaled_op = per_input.iter().all(|r| r.residual <= VERIFY_TOL);
    Ok(Verification { is_scaled_op, trials: trials.max(1), tolerance: VERIFY_TOL, per_input })
}

/// Largest deviation between central finite differences and the analytic
/// backward pass, relative to the largest analytic gradient entry.
///
/// The scalar checked is `L = Σ_j <r_j, f_j>` with fixed random `r_j`, and
/// the backward pass uses collapsed factors (`β := α`), under which it must
/// be the exact gradient of the scaled forward function.
pub fn gradcheck(g: &Graph, inputs: &[Tensor], eps: f64, seed: u64) -> Result<f64, GraphError> {
    let mut rng = Rng::new(seed);
    let weights: Vec<Tensor> =
        g.outputs().iter().map(|v| Tensor::randn_with(g.value_shape(*v), 1.0, &mut rng)).collect();
    let opts = ExecOptions::mode(FactorMode::Collapsed);
    let loss = |xs: &[Tensor]| -> Result<f64, GraphError> {
        let outs = g.eval(xs, FactorMode::Collapsed)?;
        Ok(outs.iter().zip(&weights).map(|(o, w)| o.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>()).sum())
    };
    let tape = g.forward(inputs, opts)?;
    let analytic = g.backward(&tape, &weights, opts)?.inputs;
    let mut max_dev: f64 = 0.0;
    let mut max_an: f64 = 0.0;
    let mut xs = inputs.to_vec();
    for i in g.differentiable_inputs() {
        for j in 0..xs[i].len() {
            let x0 = xs[i].data()[j];
            xs[i].data_mut()[j] = x0 + eps;
            let up = loss(&xs)?;
            xs[i].data_mut()[j] = x0 - eps;
            let down = loss(&xs)?;
            xs[i].data_mut()[j] = x0;
            let fd = (up - down) / (2.0 * eps);
            let an = analytic[i].data()[j];
            max_dev = max_dev.max((fd - an).abs());
            max_an = max_an.max(an.abs());
        }
    }
    Ok(if max_an == 0.0 { max_dev } else { max_dev / max_an })
}
