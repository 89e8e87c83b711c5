//! Unit-scaled ops: the scaling-factor compendium, graph builders that
//! attach those factors, residual weighting, and alignment helpers.
//!
//! Factors here are *proposals*. Builders attach them unconstrained; run
//! [`Graph::resolved`] on the frozen graph to apply the `α = β` rule on
//! non-cut edges (see [`unit_scale`]).

use crate::graph::{Graph, GraphBuilder, GraphError, InputKind, NodeOp, ScaleFactors, Value};
use crate::rng::Rng;
use crate::tensor::{gelu, gelu_grad, sigmoid};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OpsError {
    #[error("unknown op `{name}`; valid ops: {valid}")]
    UnknownOp { name: String, valid: String },
    #[error("{op} needs dimension `{dim}`")]
    MissingDim { op: &'static str, dim: &'static str },
    #[error("{op}: dimension `{dim}` must be at least {min}, got {value}")]
    BadDim { op: &'static str, dim: &'static str, min: usize, value: usize },
    #[error("weights must be positive and finite")]
    BadWeights,
    #[error("{what} must be positive and finite, got {value}")]
    BadScale { what: &'static str, value: f64 },
    #[error("residual tau must lie in (0, 1), got {0}")]
    BadTau(f64),
    #[error("running-mean layer index must be at least 1")]
    BadLayer,
    #[error("cannot parse dimensions `{0}`")]
    BadDimsSyntax(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Elementwise activations with table constants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Gelu,
    Tanh,
    Sigmoid,
}

/// `√(½(1 − 1/π))`: the standard deviation of `relu(N(0, 1))`.
pub fn relu_output_std() -> f64 {
    (0.5 * (1.0 - 1.0 / PI)).sqrt()
}

impl Activation {
    pub const ALL: [Activation; 4] = [Activation::Relu, Activation::Gelu, Activation::Tanh, Activation::Sigmoid];

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
        }
    }

    /// `(α, β)`. Only relu has a closed form; the rest are 4-significant-
    /// figure empirical constants.
    pub fn factors(self) -> (f64, f64) {
        match self {
            Activation::Relu => ((2.0 / (1.0 - 1.0 / PI)).sqrt(), 2f64.sqrt()),
            Activation::Gelu => (1.701, 1.481),
            Activation::Tanh => (1.593, 1.467),
            Activation::Sigmoid => (4.802, 4.722),
        }
    }

    pub fn op(self) -> NodeOp {
        match self {
            Activation::Relu => NodeOp::Relu,
            Activation::Gelu => NodeOp::Gelu,
            Activation::Tanh => NodeOp::Tanh,
            Activation::Sigmoid => NodeOp::Sigmoid,
        }
    }

    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => gelu(x),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => gelu_grad(x),
            Activation::Tanh => 1.0 - x.tanh().powi(2),
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
        }
    }
}

impl FromStr for Activation {
    type Err = OpsError;
    fn from_str(s: &str) -> Result<Self, OpsError> {
        Activation::ALL
            .into_iter()
            .find(|a| a.name() == s.to_ascii_lowercase())
            .ok_or_else(|| OpsError::UnknownOp { name: s.into(), valid: Activation::ALL.map(|a| a.name()).join(", ") })
    }
}

/// Dimensions a compendium formula may depend on.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    pub b: Option<usize>,
    pub m: Option<usize>,
    pub n: Option<usize>,
    pub s: Option<usize>,
    /// `γ_i` of a weighted add.
    pub weights: Option<Vec<f64>>,
}

impl FromStr for Dims {
    type Err = OpsError;

    /// `b=4,m=8,n=16` or `weights=1:2:3`. Whitespace is ignored.
    fn from_str(src: &str) -> Result<Self, OpsError> {
        let bad = || OpsError::BadDimsSyntax(src.into());
        let mut d = Dims::default();
        for part in src.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part.split_once('=').ok_or_else(bad)?;
            let int = || v.trim().parse::<usize>().map_err(|_| bad());
            match k.trim() {
                "b" => d.b = Some(int()?),
                "m" => d.m = Some(int()?),
                "n" => d.n = Some(int()?),
                "s" => d.s = Some(int()?),
                "weights" | "gamma" => {
                    d.weights = Some(
                        v.split(':').map(|w| w.trim().parse::<f64>().map_err(|_| bad())).collect::<Result<_, _>>()?,
                    )
                }
                _ => return Err(bad()),
            }
        }
        Ok(d)
    }
}

fn need(op: &'static str, dim: &'static str, v: Option<usize>, min: usize) -> Result<usize, OpsError> {
    let v = v.ok_or(OpsError::MissingDim { op, dim })?;
    if v < min {
        return Err(OpsError::BadDim { op, dim, min, value: v });
    }
    Ok(v)
}

fn check_weights(ws: &[f64]) -> Result<(), OpsError> {
    if ws.is_empty() || ws.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
        return Err(OpsError::BadWeights);
    }
    Ok(())
}

/// One row of the scaling-factor table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompendiumEntry {
    pub op: &'static str,
    pub definition: &'static str,
    /// Dimensions the factors depend on.
    pub dims: &'static [&'static str],
    pub alpha: &'static str,
    /// `(input, formula)` in input-slot order.
    pub betas: &'static [(&'static str, &'static str)],
}

/// A compendium entry evaluated at concrete dimensions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpFactors {
    pub op: &'static str,
    pub alpha: f64,
    pub betas: Vec<NamedFactor>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NamedFactor {
    pub input: String,
    pub value: f64,
}

impl OpFactors {
    pub fn scale_factors(&self) -> ScaleFactors {
        ScaleFactors::new(self.alpha, self.betas.iter().map(|b| b.value).collect())
    }
}

impl fmt::Display for OpFactors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: alpha={}", self.op, self.alpha)?;
        for b in &self.betas {
            write!(f, " beta_{}={}", b.input, b.value)?;
        }
        Ok(())
    }
}

static COMPENDIUM: [CompendiumEntry; 10] = [
    CompendiumEntry {
        op: "matmul",
        definition: "X[b×m] · W[m×n]",
        dims: &["b", "m", "n"],
        alpha: "m^-1/2",
        betas: &[("x", "n^-1/2"), ("w", "b^-1/2")],
    },
    CompendiumEntry {
        op: "sum",
        definition: "Σ_i x_i over n elements",
        dims: &["n"],
        alpha: "n^-1/2",
        betas: &[("x", "1")],
    },
    CompendiumEntry {
        op: "weighted_add",
        definition: "Σ_i γ_i x_i",
        dims: &["weights"],
        alpha: "(Σ γ_i²)^-1/2",
        betas: &[("x_i", "γ_i^-1")],
    },
    CompendiumEntry {
        op: "relu", definition: "max(x, 0)", dims: &[], alpha: "√(2/(1-1/π))", betas: &[("x", "√2")]
    },
    CompendiumEntry { op: "gelu", definition: "x·Φ(x)", dims: &[], alpha: "1.701", betas: &[("x", "1.481")] },
    CompendiumEntry {
        op: "tanh",
        definition: "(e^2x - 1)/(e^2x + 1)",
        dims: &[],
        alpha: "1.593",
        betas: &[("x", "1.467")],
    },
    CompendiumEntry { op: "sigmoid", definition: "1/(1 + e^-x)", dims: &[], alpha: "4.802", betas: &[("x", "4.722")] },
    CompendiumEntry {
        op: "softmax",
        definition: "e^x_i / Σ_j e^x_j over the last axis of size s",
        dims: &["s"],
        alpha: "s",
        betas: &[("x", "s")],
    },
    CompendiumEntry {
        op: "softmax_xent",
        definition: "-log softmax(x)_t over s classes",
        dims: &["s"],
        alpha: "1",
        betas: &[("x", "s/√(s-1)"), ("t", "1 (labels carry no gradient)")],
    },
    CompendiumEntry {
        op: "layer_norm",
        definition: "c_j + w_j·(X_ij - μ_i)/σ_i over rows of X[b×n]",
        dims: &["b"],
        alpha: "1",
        betas: &[("x", "1"), ("w", "b^-1/2"), ("c", "b^-1/2")],
    },
];

/// Every table entry, in table order.
pub fn compendium() -> &'static [CompendiumEntry] {
    &COMPENDIUM
}

pub fn compendium_entry(op: &str) -> Result<&'static CompendiumEntry, OpsError> {
    let key = op.to_ascii_lowercase().replace('-', "_");
    COMPENDIUM.iter().find(|e| e.op == key).ok_or_else(|| OpsError::UnknownOp {
        name: op.into(),
        valid: COMPENDIUM.iter().map(|e| e.op).collect::<Vec<_>>().join(", "),
    })
}

pub fn compendium_json() -> String {
    serde_json::to_string_pretty(compendium()).expect("compendium serialises")
}

fn inv_sqrt(x: usize) -> f64 {
    1.0 / (x as f64).sqrt()
}

impl CompendiumEntry {
    /// Evaluates the closed forms.
    pub fn evaluate(&self, dims: &Dims) -> Result<OpFactors, OpsError> {
        let named = |pairs: Vec<(&str, f64)>| {
            pairs.into_iter().map(|(i, v)| NamedFactor { input: i.into(), value: v }).collect()
        };
        let (alpha, betas) = match self.op {
            "matmul" => {
                let b = need("matmul", "b", dims.b, 1)?;
                let m = need("matmul", "m", dims.m, 1)?;
                let n = need("matmul", "n", dims.n, 1)?;
                (inv_sqrt(m), named(vec![("x", inv_sqrt(n)), ("w", inv_sqrt(b))]))
            }
            "sum" => (inv_sqrt(need("sum", "n", dims.n, 1)?), named(vec![("x", 1.0)])),
            "weighted_add" => {
                let ws = dims.weights.as_ref().ok_or(OpsError::MissingDim { op: "weighted_add", dim: "weights" })?;
                check_weights(ws)?;
                let (alpha, betas) = weighted_add_factors(ws);
                let names: Vec<String> = (0..ws.len()).map(|i| format!("x{i}")).collect();
                let betas = names.into_iter().zip(betas).map(|(input, value)| NamedFactor { input, value }).collect();
                (alpha, betas)
            }
            "softmax" => {
                let s = need("softmax", "s", dims.s, 2)? as f64;
                (s, named(vec![("x", s)]))
            }
            "softmax_xent" => {
                let s = need("softmax_xent", "s", dims.s, 2)? as f64;
                (1.0, named(vec![("x", s / (s - 1.0).sqrt()), ("t", 1.0)]))
            }
            "layer_norm" => {
                let b = need("layer_norm", "b", dims.b, 1)?;
                (1.0, named(vec![("x", 1.0), ("w", inv_sqrt(b)), ("c", inv_sqrt(b))]))
            }
            other => {
                let act: Activation = other.parse()?;
                let (a, b) = act.factors();
                (a, named(vec![("x", b)]))
            }
        };
        Ok(OpFactors { op: self.op, alpha, betas })
    }
}

/// `α = (Σγ²)^-½`, `β_i = 1/γ_i`.
pub fn weighted_add_factors(weights: &[f64]) -> (f64, Vec<f64>) {
    let norm = weights.iter().map(|w| w * w).sum::<f64>().sqrt();
    (1.0 / norm, weights.iter().map(|w| 1.0 / w).collect())
}

/// Evaluates the entry for `op` at `dims`.
pub fn op_factors(op: &str, dims: &Dims) -> Result<OpFactors, OpsError> {
    compendium_entry(op)?.evaluate(dims)
}

// --- graph builders -------------------------------------------------------

fn last(b: &GraphBuilder) -> usize {
    b.last_node().expect("a node was just added")
}

/// `α·XW` with unconstrained proposals `α = m^-½`, `β_X = n^-½`,
/// `β_W = b^-½`. With `constrain_x`, `α = β_X = (mn)^-¼` is applied
/// directly and the X slot is marked constrained.
pub fn scaled_matmul(g: &mut GraphBuilder, x: Value, w: Value, constrain_x: bool) -> Result<Value, OpsError> {
    let xs = g.shape(x)?.to_vec();
    let ws = g.shape(w)?.to_vec();
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
        // Let the op's own shape check produce the error.
        g.apply_op(NodeOp::MatMul, &[x, w], None)?;
        unreachable!("matmul shape check accepted mismatched operands");
    }
    let (b, m, n) = (xs[0], xs[1], ws[1]);
    let f = if constrain_x {
        let c = ((m * n) as f64).powf(-0.25);
        ScaleFactors::new(c, vec![c, inv_sqrt(b)])
    } else {
        ScaleFactors::new(inv_sqrt(m), vec![inv_sqrt(n), inv_sqrt(b)])
    };
    let y = g.apply_op(NodeOp::MatMul, &[x, w], Some(f))?;
    if constrain_x {
        g.constrain_input(last(g), 0)?;
    }
    Ok(y)
}

/// `n^-½ Σ x`, backward unscaled.
pub fn scaled_sum(g: &mut GraphBuilder, x: Value) -> Result<Value, OpsError> {
    let n: usize = g.shape(x)?.iter().product();
    Ok(g.apply_op(NodeOp::Sum, &[x], Some(ScaleFactors::new(inv_sqrt(n.max(1)), vec![1.0])))?)
}

/// `(Σγ²)^-½ Σ γ_i x_i` with `β_i = 1/γ_i`. `None` weights mean equal
/// weights whose squares sum to one.
pub fn weighted_add(g: &mut GraphBuilder, xs: &[Value], weights: Option<&[f64]>) -> Result<Value, OpsError> {
    let ws = match weights {
        Some(w) => w.to_vec(),
        None => vec![inv_sqrt(xs.len().max(1)); xs.len()],
    };
    check_weights(&ws)?;
    let (alpha, betas) = weighted_add_factors(&ws);
    Ok(g.apply_op(NodeOp::WeightedAdd { weights: ws }, xs, Some(ScaleFactors::new(alpha, betas)))?)
}

pub fn scaled_activation(g: &mut GraphBuilder, act: Activation, x: Value) -> Result<Value, OpsError> {
    let (a, b) = act.factors();
    Ok(g.apply_op(act.op(), &[x], Some(ScaleFactors::new(a, vec![b])))?)
}

/// Softmax over the last axis with `α = β = s`.
pub fn scaled_softmax(g: &mut GraphBuilder, x: Value) -> Result<Value, OpsError> {
    let s = *g.shape(x)?.last().unwrap_or(&0);
    if s < 2 {
        return Err(OpsError::BadDim { op: "softmax", dim: "s", min: 2, value: s });
    }
    Ok(g.apply_op(NodeOp::Softmax, &[x], Some(ScaleFactors::uniform(s as f64, 1)))?)
}

/// Per-row cross-entropy with `β = s/√(s-1)` on the logits.
pub fn scaled_softmax_xent(g: &mut GraphBuilder, logits: Value, labels: Value) -> Result<Value, OpsError> {
    let s = g.shape(logits)?.get(1).copied().unwrap_or(0);
    if s < 2 {
        return Err(OpsError::BadDim { op: "softmax_xent", dim: "s", min: 2, value: s });
    }
    let s = s as f64;
    let f = ScaleFactors::new(1.0, vec![s / (s - 1.0).sqrt(), 1.0]);
    Ok(g.apply_op(NodeOp::SoftmaxXent, &[logits, labels], Some(f))?)
}

/// Layer norm with `β_w = β_c = b^-½`.
pub fn scaled_layer_norm(g: &mut GraphBuilder, x: Value, w: Value, c: Value) -> Result<Value, OpsError> {
    let shape = g.shape(x)?.to_vec();
    if shape.len() == 2 && shape[1] < 2 {
        return Err(OpsError::BadDim { op: "layer_norm", dim: "n", min: 2, value: shape[1] });
    }
    let b = shape.first().copied().unwrap_or(1).max(1);
    let f = ScaleFactors::new(1.0, vec![1.0, inv_sqrt(b), inv_sqrt(b)]);
    Ok(g.apply_op(NodeOp::LayerNorm, &[x, w, c], Some(f))?)
}

/// `x + c` broadcast over rows, with `β_c = b^-½` (the bias gradient sums
/// `b` rows).
pub fn scaled_bias_add(g: &mut GraphBuilder, x: Value, c: Value) -> Result<Value, OpsError> {
    let b = g.shape(x)?.first().copied().unwrap_or(1).max(1);
    Ok(g.apply_op(NodeOp::BiasAdd, &[x, c], Some(ScaleFactors::new(1.0, vec![1.0, inv_sqrt(b)])))?)
}

/// A scaled identity `id*(x, α, β)`, pinned so constraint resolution
/// leaves it alone.
pub fn scaled_identity(g: &mut GraphBuilder, x: Value, alpha: f64, beta: f64) -> Result<Value, OpsError> {
    let y = g.apply_op(NodeOp::Identity, &[x], Some(ScaleFactors::new(alpha, vec![beta])))?;
    g.pin(last(g))?;
    Ok(y)
}

/// Computes `γ·f(x)` as `id*(f(id*(x, 1, γ)), γ, 1)`: forward is
/// unchanged, but gradients inside `f` are not multiplied by `γ`, which is
/// applied once on the way out of the branch instead.
pub fn residual_rewrite<F>(g: &mut GraphBuilder, x: Value, gamma: f64, f: F) -> Result<Value, OpsError>
where
    F: FnOnce(&mut GraphBuilder, Value) -> Result<Value, OpsError>,
{
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(OpsError::BadScale { what: "gamma", value: gamma });
    }
    if gamma == 1.0 {
        return f(g, x);
    }
    let inner = scaled_identity(g, x, 1.0, gamma)?;
    let y = f(g, inner)?;
    scaled_identity(g, y, gamma, 1.0)
}

/// How a residual block combines its skip and branch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ResidualScheme {
    /// `x + f(x)`.
    Default,
    /// `√(1-τ)·x + √τ·f(x)`.
    Fixed { tau: f64 },
    /// `√(l/(l+1))·x + √(1/(l+1))·f(x)` at layer `l`.
    RunningMean,
}

impl ResidualScheme {
    pub fn validate(&self) -> Result<(), OpsError> {
        match *self {
            ResidualScheme::Fixed { tau } if !(tau > 0.0 && tau < 1.0) => Err(OpsError::BadTau(tau)),
            _ => Ok(()),
        }
    }

    /// `(skip, branch)` weights at layer `l ≥ 1`.
    pub fn weights(&self, layer: usize) -> Result<(f64, f64), OpsError> {
        self.validate()?;
        Ok(match *self {
            ResidualScheme::Default => (1.0, 1.0),
            ResidualScheme::Fixed { tau } => ((1.0 - tau).sqrt(), tau.sqrt()),
            ResidualScheme::RunningMean => {
                if layer == 0 {
                    return Err(OpsError::BadLayer);
                }
                let l = layer as f64;
                ((l / (l + 1.0)).sqrt(), (1.0 / (l + 1.0)).sqrt())
            }
        })
    }
}

/// A residual block `interp(x, f(x))` at layer `l`.
///
/// Unit-scaled blocks scale the skip with a constrained identity and the
/// branch with [`residual_rewrite`], then add. Plain blocks use an
/// unscaled weighted add. The default scheme is a plain add either way.
pub fn residual<F>(
    g: &mut GraphBuilder,
    x: Value,
    scheme: ResidualScheme,
    layer: usize,
    unit_scaled: bool,
    f: F,
) -> Result<Value, OpsError>
where
    F: FnOnce(&mut GraphBuilder, Value) -> Result<Value, OpsError>,
{
    if scheme == ResidualScheme::Default {
        let y = f(g, x)?;
        return Ok(g.apply_op(NodeOp::Add, &[x, y], None)?);
    }
    let (a, c) = scheme.weights(layer)?;
    if unit_scaled {
        let skip = g.apply_op(NodeOp::Identity, &[x], Some(ScaleFactors::uniform(a, 1)))?;
        let branch = residual_rewrite(g, x, c, f)?;
        Ok(g.apply_op(NodeOp::Add, &[skip, branch], None)?)
    } else {
        let y = f(g, x)?;
        Ok(g.apply_op(NodeOp::WeightedAdd { weights: vec![a, c] }, &[x, y], None)?)
    }
}

/// Resolves the `α = β` constraints on non-cut edges by geometric mean.
pub fn unit_scale(g: &Graph) -> Result<Graph, OpsError> {
    Ok(g.resolved()?)
}

/// A frozen single-op graph for `op` using its compendium factors.
/// Shapes not fixed by `dims` default to small sizes.
pub fn standalone_graph(op: &str, dims: &Dims) -> Result<Graph, OpsError> {
    let entry = compendium_entry(op)?;
    let rows = dims.b.unwrap_or(8);
    let cols = dims.n.unwrap_or(8);
    let mut g = GraphBuilder::new();
    let y = match entry.op {
        "matmul" => {
            let (b, m, n) = (dims.b.unwrap_or(8), dims.m.unwrap_or(8), dims.n.unwrap_or(8));
            let x = g.add_input("x", &[b, m], InputKind::Data);
            let w = g.add_input("w", &[m, n], InputKind::Parameter);
            scaled_matmul(&mut g, x, w, false)?
        }
        "sum" => {
            let x = g.add_input("x", &[dims.n.unwrap_or(8)], InputKind::Data);
            scaled_sum(&mut g, x)?
        }
        "weighted_add" => {
            let ws = dims.weights.clone().unwrap_or_else(|| vec![1.0, 1.0]);
            let xs: Vec<Value> =
                (0..ws.len()).map(|i| g.add_input(&format!("x{i}"), &[rows, cols], InputKind::Data)).collect();
            weighted_add(&mut g, &xs, Some(&ws))?
        }
        "softmax" => {
            let x = g.add_input("x", &[rows, dims.s.unwrap_or(8)], InputKind::Data);
            scaled_softmax(&mut g, x)?
        }
        "softmax_xent" => {
            let x = g.add_input("x", &[rows, dims.s.unwrap_or(8)], InputKind::Data);
            let t = g.add_input("t", &[rows], InputKind::Labels);
            scaled_softmax_xent(&mut g, x, t)?
        }
        "layer_norm" => {
            let x = g.add_input("x", &[rows, cols], InputKind::Data);
            let w = g.add_input("w", &[cols], InputKind::Parameter);
            let c = g.add_input("c", &[cols], InputKind::Parameter);
            scaled_layer_norm(&mut g, x, w, c)?
        }
        other => {
            let x = g.add_input("x", &[rows, cols], InputKind::Data);
            scaled_activation(&mut g, other.parse()?, x)?
        }
    };
    g.mark_output(y)?;
    Ok(g.freeze())
}

// --- alignment and empirical scales ---------------------------------------

/// Pre- and post-activation scales: `f̂(x̂) = f(s1·x̂)·s2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Alignment {
    pub s1: f64,
    pub s2: f64,
}

fn positive(what: &'static str, v: f64) -> Result<f64, OpsError> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(OpsError::BadScale { what, value: v })
    }
}

/// `s1 = σ(x)`, `s2 = 1/σ(f(x))` from the base model's statistics. When
/// `sigma_out_base` is `None` it is estimated as the standard deviation of
/// `f(σ(x)·Z)` by Monte-Carlo.
pub fn align_activation(
    f: impl Fn(f64) -> f64,
    sigma_in: f64,
    sigma_out_base: Option<f64>,
    samples: usize,
    seed: u64,
) -> Result<Alignment, OpsError> {
    let s1 = positive("sigma_in", sigma_in)?;
    let sigma_out = match sigma_out_base {
        Some(s) => positive("sigma_out_base", s)?,
        None => {
            let mut rng = Rng::new(seed);
            let ys: Vec<f64> = (0..samples.max(2)).map(|_| f(s1 * rng.normal())).collect();
            positive("sigma_out_base", sample_std(&ys))?
        }
    };
    Ok(Alignment { s1, s2: 1.0 / sigma_out })
}

/// Graph fragment for an aligned activation: scaled identities around the
/// plain op. The identities keep `α = β`, so the fragment is exact.
pub fn aligned_activation(g: &mut GraphBuilder, act: Activation, x: Value, al: Alignment) -> Result<Value, OpsError> {
    let pre = g.apply_op(NodeOp::Identity, &[x], Some(ScaleFactors::uniform(al.s1, 1)))?;
    let y = g.apply_op(act.op(), &[pre], None)?;
    Ok(g.apply_op(NodeOp::Identity, &[y], Some(ScaleFactors::uniform(al.s2, 1)))?)
}

/// `(τ, α)` so that a fixed-τ weighted add reproduces `x + f(x)` up to
/// the constant `α`.
pub fn residual_tau(sigma_x: f64, sigma_fx: f64) -> Result<(f64, f64), OpsError> {
    let sx = positive("sigma_x", sigma_x)?;
    let sf = positive("sigma_fx", sigma_fx)?;
    let total = sx * sx + sf * sf;
    Ok((sf * sf / total, 1.0 / total.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EmpiricalScale {
    /// Standard deviation (about the mean) of `f(X)`.
    pub forward_std: f64,
    /// Standard deviation of `f'(X)·G`.
    pub backward_std: f64,
}

fn sample_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Monte-Carlo scales of an elementwise op under unit-normal `X` and
/// independent unit-normal incoming gradients `G`.
pub fn empirical_scale(f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64, samples: usize, seed: u64) -> EmpiricalScale {
    let mut rng = Rng::new(seed);
    let n = samples.max(2);
    let mut fwd = Vec::with_capacity(n);
    let mut bwd = Vec::with_capacity(n);
    for _ in 0..n {
        let x = rng.normal();
        let gr = rng.normal();
        fwd.push(f(x));
        bwd.push(df(x) * gr);
    }
    EmpiricalScale { forward_std: sample_std(&fwd), backward_std: sample_std(&bwd) }
}

pub fn empirical_activation_scale(act: Activation, samples: usize, seed: u64) -> EmpiricalScale {
    empirical_scale(|x| act.eval(x), |x| act.derivative(x), samples, seed)
}
