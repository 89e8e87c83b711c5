//! Scaled computational graphs.
//!
//! A graph is a DAG of ops. Each op carries a forward factor `α` and one
//! backward factor `β_i` per input: the scaled op computes `α·f(x)` forward and
//! multiplies the gradient of its input `i` by `β_i` instead of `α`. When every
//! non-cut edge into an op has `β = α` (a *constraint-scaled* graph) the whole
//! graph behaves like a single scaled op, which is what [`verify_scaled_op`]
//! checks and [`Graph::gradient_scale_ratio`] predicts.
//!
//! Graphs are built with [`GraphBuilder`] and frozen into an immutable
//! [`Graph`]. Freezing inserts explicit [`NodeOp::Copy`] nodes wherever a
//! value feeds more than one consumer, so every edge has one producer and one
//! consumer, and computes the cut-edges (bridges) once.

mod analysis;
mod bridges;
mod exec;
mod json;
mod ops;

pub use analysis::{gradcheck, verify_scaled_op, ConstraintGroup, InputRatio, Resolution, Verification};
pub use bridges::bridges;
pub use exec::{Backward, ExecOptions, FactorMode, MatmulQuant, Tape};
pub use json::{GraphDesc, InputDesc, NodeDesc};
pub use ops::NodeOp;

use crate::tensor::TensorError;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{op}: expected {expected} inputs, got {got}")]
    Arity { op: &'static str, expected: usize, got: usize },
    #[error("unknown value id {0}")]
    UnknownValue(usize),
    #[error("value {0} is referenced before it is defined (cycle or bad ordering)")]
    ForwardReference(usize),
    #[error("graph has no outputs")]
    NoOutputs,
    #[error("expected {expected} input tensors, got {got}")]
    InputCount { expected: usize, got: usize },
    #[error("input `{name}` expects shape {expected:?}, got {got:?}")]
    InputShape { name: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("expected {expected} output gradients, got {got}")]
    OutputGradCount { expected: usize, got: usize },
    #[error("node {node}: factors must be positive and finite ({what} = {value})")]
    BadFactor { node: usize, what: String, value: f64 },
    #[error("node {node}: {got} backward factors for {expected} inputs")]
    BetaCount { node: usize, expected: usize, got: usize },
    #[error("weighted add needs finite weights, not all zero")]
    BadWeights,
    #[error("copy needs a fanout of at least 1")]
    BadFanout,
    #[error("layer norm: row {row} has zero variance")]
    DegenerateRow { row: usize },
    #[error("row {row}: label {label} is not a class index below {classes}")]
    LabelOutOfRange { row: usize, label: f64, classes: usize },
    #[error("node {0} does not exist")]
    UnknownNode(usize),
    #[error("node {node} has no input slot {slot}")]
    UnknownSlot { node: usize, slot: usize },
    #[error("graph is not constraint-scaled: {}", fmt_violations(.0))]
    NotConstraintScaled(Vec<Violation>),
    #[error("input `{0}` does not reach the output")]
    NotConnected(String),
    #[error("no constant gradient ratio for input `{input}`: paths disagree ({a} vs {b})")]
    InconsistentRatio { input: String, a: f64, b: f64 },
    #[error("this operation needs a single-output graph, found {0} outputs")]
    MultipleOutputs(usize),
    #[error("tape does not belong to this graph")]
    TapeMismatch,
    #[error("graph description: {0}")]
    Description(String),
}

fn fmt_violations(vs: &[Violation]) -> String {
    vs.iter()
        .map(|v| format!("node {} slot {} (α={}, β={})", v.node, v.slot, v.alpha, v.beta))
        .collect::<Vec<_>>()
        .join("; ")
}

/// A tensor flowing along an edge: a graph input or a node output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Value(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    Data,
    Parameter,
    /// Integer class indices; never differentiated.
    Labels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: InputKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Source {
    Input(usize),
    Node { node: usize, port: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ValueInfo {
    pub shape: Vec<usize>,
    pub src: Source,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleFactors {
    pub alpha: f64,
    pub betas: Vec<f64>,
}

impl ScaleFactors {
    pub fn unit(arity: usize) -> Self {
        Self { alpha: 1.0, betas: vec![1.0; arity] }
    }
    pub fn new(alpha: f64, betas: Vec<f64>) -> Self {
        Self { alpha, betas }
    }
    /// `α = β_i = c` for every input.
    pub fn uniform(c: f64, arity: usize) -> Self {
        Self { alpha: c, betas: vec![c; arity] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub op: NodeOp,
    pub inputs: Vec<Value>,
    pub factors: ScaleFactors,
    /// Excluded from constraint resolution (used by the `id*` rewrite).
    pub pinned: bool,
    /// Slots treated as constrained even if their edge is a cut-edge.
    pub forced: Vec<bool>,
    pub name: Option<String>,
}

/// A factor of the graph: a node's `α` or one of its `β`s.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FactorRef {
    Alpha(usize),
    Beta(usize, usize),
}

/// An edge of the graph: input `slot` of `node`, or the edge carrying
/// output `j` out of the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EdgeRef {
    Slot { node: usize, slot: usize },
    Output(usize),
}

/// A constrained slot whose `β` differs from its node's `α`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub node: usize,
    pub slot: usize,
    pub alpha: f64,
    pub beta: f64,
}

/// Relative tolerance for `α == β` checks.
pub const FACTOR_RTOL: f64 = 1e-12;

pub(crate) fn factors_equal(a: f64, b: f64) -> bool {
    (a - b).abs() <= FACTOR_RTOL * a.abs().max(b.abs())
}

#[derive(Debug, Clone, Default)]
pub struct GraphBuilder {
    inputs: Vec<InputSpec>,
    nodes: Vec<Node>,
    values: Vec<ValueInfo>,
    outputs: Vec<Value>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_input(&mut self, name: &str, shape: &[usize], kind: InputKind) -> Value {
        self.inputs.push(InputSpec { name: name.into(), shape: shape.to_vec(), kind });
        self.push_value(shape.to_vec(), Source::Input(self.inputs.len() - 1))
    }

    fn push_value(&mut self, shape: Vec<usize>, src: Source) -> Value {
        self.values.push(ValueInfo { shape, src });
        Value(self.values.len() - 1)
    }

    pub fn shape(&self, v: Value) -> Result<&[usize], GraphError> {
        self.values.get(v.0).map(|i| i.shape.as_slice()).ok_or(GraphError::UnknownValue(v.0))
    }

    /// Adds a single-output op. `None` factors mean an unscaled op
    /// (`α = β_i = 1`).
    pub fn apply_op(
        &mut self,
        op: NodeOp,
        inputs: &[Value],
        factors: Option<ScaleFactors>,
    ) -> Result<Value, GraphError> {
        let outs = self.apply_multi(op, inputs, factors)?;
        Ok(outs[0])
    }

    /// Adds an op and returns all of its outputs.
    pub fn apply_multi(
        &mut self,
        op: NodeOp,
        inputs: &[Value],
        factors: Option<ScaleFactors>,
    ) -> Result<Vec<Value>, GraphError> {
        if let NodeOp::Copy { fanout: 0 } = op {
            return Err(GraphError::BadFanout);
        }
        let shapes: Vec<&[usize]> = inputs.iter().map(|&v| self.shape(v)).collect::<Result<_, _>>()?;
        let out_shapes = op.check(&shapes)?;
        let node = self.nodes.len();
        let factors = factors.unwrap_or_else(|| ScaleFactors::unit(inputs.len()));
        check_factors(node, &factors, inputs.len())?;
        self.nodes.push(Node {
            forced: vec![false; inputs.len()],
            op,
            inputs: inputs.to_vec(),
            factors,
            pinned: false,
            name: None,
        });
        Ok(out_shapes
            .into_iter()
            .enumerate()
            .map(|(port, s)| self.push_value(s, Source::Node { node, port }))
            .collect())
    }

    /// Index of the node producing `v`, if any.
    pub fn producer(&self, v: Value) -> Option<usize> {
        match self.values.get(v.0)?.src {
            Source::Node { node, .. } => Some(node),
            Source::Input(_) => None,
        }
    }

    pub fn last_node(&self) -> Option<usize> {
        self.nodes.len().checked_sub(1)
    }

    pub fn set_name(&mut self, node: usize, name: &str) -> Result<(), GraphError> {
        self.node_mut(node)?.name = Some(name.into());
        Ok(())
    }

    /// Names the node producing `v`.
    pub fn name_value(&mut self, v: Value, name: &str) -> Result<(), GraphError> {
        let node = self.producer(v).ok_or(GraphError::UnknownValue(v.0))?;
        self.set_name(node, name)
    }

    pub fn pin(&mut self, node: usize) -> Result<(), GraphError> {
        self.node_mut(node)?.pinned = true;
        Ok(())
    }

    pub fn constrain_input(&mut self, node: usize, slot: usize) -> Result<(), GraphError> {
        let n = self.node_mut(node)?;
        *n.forced.get_mut(slot).ok_or(GraphError::UnknownSlot { node, slot })? = true;
        Ok(())
    }

    pub fn set_factors(&mut self, node: usize, factors: ScaleFactors) -> Result<(), GraphError> {
        let arity = self.node_mut(node)?.inputs.len();
        check_factors(node, &factors, arity)?;
        self.nodes[node].factors = factors;
        Ok(())
    }

    fn node_mut(&mut self, node: usize) -> Result<&mut Node, GraphError> {
        self.nodes.get_mut(node).ok_or(GraphError::UnknownNode(node))
    }

    /// Marks `v` as a graph output. Marking twice is a no-op.
    pub fn mark_output(&mut self, v: Value) -> Result<(), GraphError> {
        self.shape(v)?;
        if !self.outputs.contains(&v) {
            self.outputs.push(v);
        }
        Ok(())
    }

    /// Inserts fan-out copies and computes cut-edges.
    pub fn freeze(self) -> Graph {
        let expanded = self.expand_fanout();
        Graph::from_expanded(expanded)
    }

    /// Rebuilds the graph so that every value has at most one use.
    fn expand_fanout(self) -> GraphBuilder {
        // Uses are consumed in a fixed order: node slots, then outputs.
        let mut uses = vec![0usize; self.values.len()];
        for v in self.nodes.iter().flat_map(|n| &n.inputs).chain(&self.outputs) {
            uses[v.0] += 1;
        }
        if uses.iter().all(|&u| u <= 1) {
            return self;
        }
        // For each old value, the new values handed to its uses in order.
        let mut handed: Vec<Vec<Value>> = vec![vec![]; self.values.len()];
        let mut next_use = vec![0usize; self.values.len()];
        let mut out = GraphBuilder { inputs: self.inputs.clone(), ..Default::default() };

        let place = |out: &mut GraphBuilder, old: usize, new: Value, handed: &mut Vec<Vec<Value>>| {
            let k = uses[old];
            handed[old] = if k > 1 {
                out.apply_multi(NodeOp::Copy { fanout: k }, &[new], None).expect("copy of an existing value")
            } else {
                vec![new]
            };
        };
        let mut take = |old: Value, handed: &Vec<Vec<Value>>| {
            let i = next_use[old.0];
            next_use[old.0] += 1;
            handed[old.0][i]
        };

        for (i, spec) in self.inputs.iter().enumerate() {
            let v = out.push_value(spec.shape.clone(), Source::Input(i));
            place(&mut out, self.input_value(i).0, v, &mut handed);
        }
        for (n, node) in self.nodes.iter().enumerate() {
            let ins: Vec<Value> = node.inputs.iter().map(|&v| take(v, &handed)).collect();
            let new_outs =
                out.apply_multi(node.op.clone(), &ins, Some(node.factors.clone())).expect("replaying a valid node");
            let idx = out.nodes.len() - 1;
            out.nodes[idx].pinned = node.pinned;
            out.nodes[idx].forced = node.forced.clone();
            out.nodes[idx].name = node.name.clone();
            for (port, nv) in new_outs.into_iter().enumerate() {
                let old = self.node_output(n, port).0;
                place(&mut out, old, nv, &mut handed);
            }
        }
        for &v in &self.outputs {
            let nv = take(v, &handed);
            out.outputs.push(nv);
        }
        out
    }

    fn input_value(&self, i: usize) -> Value {
        Value(self.values.iter().position(|v| v.src == Source::Input(i)).unwrap())
    }

    fn node_output(&self, node: usize, port: usize) -> Value {
        Value(self.values.iter().position(|v| v.src == Source::Node { node, port }).unwrap())
    }
}

fn check_factors(node: usize, f: &ScaleFactors, arity: usize) -> Result<(), GraphError> {
    if f.betas.len() != arity {
        return Err(GraphError::BetaCount { node, expected: arity, got: f.betas.len() });
    }
    let bad = |what: String, value: f64| GraphError::BadFactor { node, what, value };
    if !(f.alpha > 0.0 && f.alpha.is_finite()) {
        return Err(bad("α".into(), f.alpha));
    }
    for (i, &b) in f.betas.iter().enumerate() {
        if !(b > 0.0 && b.is_finite()) {
            return Err(bad(format!("β_{i}"), b));
        }
    }
    Ok(())
}

/// A frozen graph. Every value has at most one use (a consumer slot or a
/// graph output).
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    inputs: Vec<InputSpec>,
    nodes: Vec<Node>,
    values: Vec<ValueInfo>,
    outputs: Vec<Value>,
    input_values: Vec<Value>,
    node_outputs: Vec<Vec<Value>>,
    /// `cut[node][slot]`: is the edge into this slot a bridge?
    cut: Vec<Vec<bool>>,
    output_cut: Vec<bool>,
}

impl Graph {
    fn from_expanded(b: GraphBuilder) -> Graph {
        let mut input_values = vec![Value(0); b.inputs.len()];
        let mut node_outputs: Vec<Vec<Value>> = b.nodes.iter().map(|n| vec![Value(0); n.op.outputs()]).collect();
        for (i, v) in b.values.iter().enumerate() {
            match v.src {
                Source::Input(k) => input_values[k] = Value(i),
                Source::Node { node, port } => node_outputs[node][port] = Value(i),
            }
        }
        let mut g = Graph {
            inputs: b.inputs,
            nodes: b.nodes,
            values: b.values,
            outputs: b.outputs,
            input_values,
            node_outputs,
            cut: vec![],
            output_cut: vec![],
        };
        let (cut, output_cut) = bridges::graph_cut_edges(&g);
        g.cut = cut;
        g.output_cut = output_cut;
        g
    }

    pub fn inputs(&self) -> &[InputSpec] {
        &self.inputs
    }
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }
    pub fn outputs(&self) -> &[Value] {
        &self.outputs
    }
    pub fn input_value(&self, i: usize) -> Value {
        self.input_values[i]
    }
    pub fn node_outputs(&self, node: usize) -> &[Value] {
        &self.node_outputs[node]
    }
    pub fn num_values(&self) -> usize {
        self.values.len()
    }
    pub fn value_shape(&self, v: Value) -> &[usize] {
        &self.values[v.0].shape
    }

    pub fn input_index(&self, name: &str) -> Option<usize> {
        self.inputs.iter().position(|i| i.name == name)
    }

    /// Human-readable name of a value: the input name, the producing node's
    /// name, or `<op><index>`.
    pub fn value_name(&self, v: Value) -> String {
        match self.values[v.0].src {
            Source::Input(i) => self.inputs[i].name.clone(),
            Source::Node { node, port } => {
                let n = &self.nodes[node];
                let base = n.name.clone().unwrap_or_else(|| format!("{}{}", n.op.name(), node));
                if n.op.outputs() > 1 {
                    format!("{base}.{port}")
                } else {
                    base
                }
            }
        }
    }

    /// Whether input `slot` of `node` is fed by a cut-edge.
    pub fn is_cut(&self, node: usize, slot: usize) -> bool {
        self.cut[node][slot]
    }

    /// Every bridge of the underlying undirected graph. Graph inputs and
    /// outputs hang off their own terminal vertices, so their edges count.
    pub fn find_cut_edges(&self) -> BTreeSet<EdgeRef> {
        let mut set = BTreeSet::new();
        for (node, slots) in self.cut.iter().enumerate() {
            for (slot, &c) in slots.iter().enumerate() {
                if c {
                    set.insert(EdgeRef::Slot { node, slot });
                }
            }
        }
        for (j, &c) in self.output_cut.iter().enumerate() {
            if c {
                set.insert(EdgeRef::Output(j));
            }
        }
        set
    }

    /// Slots that must satisfy `α = β`: non-cut edges plus forced slots,
    /// skipping label inputs.
    pub fn constrained_slots(&self, node: usize) -> Vec<usize> {
        let n = &self.nodes[node];
        (0..n.inputs.len()).filter(|&s| !n.op.is_label_slot(s) && (!self.cut[node][s] || n.forced[s])).collect()
    }

    /// Constrained slots whose `β` differs from `α`, pinned nodes included.
    pub fn violations(&self) -> Vec<Violation> {
        let mut out = vec![];
        for (node, n) in self.nodes.iter().enumerate() {
            for slot in self.constrained_slots(node) {
                let (alpha, beta) = (n.factors.alpha, n.factors.betas[slot]);
                if !factors_equal(alpha, beta) {
                    out.push(Violation { node, slot, alpha, beta });
                }
            }
        }
        out
    }

    pub fn is_constraint_scaled(&self) -> bool {
        self.violations().is_empty()
    }

    pub fn validate_constraint_scaled(&self) -> Result<(), GraphError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(GraphError::NotConstraintScaled(v))
        }
    }

    pub fn factor(&self, f: FactorRef) -> f64 {
        match f {
            FactorRef::Alpha(n) => self.nodes[n].factors.alpha,
            FactorRef::Beta(n, s) => self.nodes[n].factors.betas[s],
        }
    }

    /// Current factors of every node.
    pub fn factors(&self) -> Vec<ScaleFactors> {
        self.nodes.iter().map(|n| n.factors.clone()).collect()
    }

    /// Copy of the graph with new factors (same structure, same cut-edges).
    pub fn with_factors(&self, factors: &[ScaleFactors]) -> Result<Graph, GraphError> {
        if factors.len() != self.nodes.len() {
            return Err(GraphError::Description(format!(
                "{} factor sets for {} nodes",
                factors.len(),
                self.nodes.len()
            )));
        }
        let mut g = self.clone();
        for (i, (n, f)) in g.nodes.iter_mut().zip(factors).enumerate() {
            check_factors(i, f, n.inputs.len())?;
            n.factors = f.clone();
        }
        Ok(g)
    }

    /// Same graph with `α = β_i = 1` everywhere.
    pub fn unit_factors(&self) -> Graph {
        let f: Vec<_> = self.nodes.iter().map(|n| ScaleFactors::unit(n.inputs.len())).collect();
        self.with_factors(&f).expect("unit factors are valid")
    }

    /// Indices of differentiable inputs (everything but labels).
    pub fn differentiable_inputs(&self) -> Vec<usize> {
        (0..self.inputs.len()).filter(|&i| self.inputs[i].kind != InputKind::Labels).collect()
    }

    /// Number of classes for a labels input (from the logits it is paired
    /// with), if it feeds a softmax-xent node.
    pub fn label_classes(&self, input: usize) -> Option<usize> {
        let v = self.input_values[input];
        for n in &self.nodes {
            if matches!(n.op, NodeOp::SoftmaxXent) && self.trace_copy(n.inputs[1]) == v {
                return self.values[n.inputs[0].0].shape.get(1).copied();
            }
        }
        None
    }

    /// Follows copy nodes upstream to the original value.
    fn trace_copy(&self, mut v: Value) -> Value {
        while let Source::Node { node, .. } = self.values[v.0].src {
            if matches!(self.nodes[node].op, NodeOp::Copy { .. }) {
                v = self.nodes[node].inputs[0];
            } else {
                break;
            }
        }
        v
    }

    /// Back to a builder, e.g. to extend a frozen graph.
    pub fn to_builder(&self) -> GraphBuilder {
        GraphBuilder {
            inputs: self.inputs.clone(),
            nodes: self.nodes.clone(),
            values: self.values.clone(),
            outputs: self.outputs.clone(),
        }
    }
}
