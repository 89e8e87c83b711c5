//! Residual FFN stacks with a softmax cross-entropy head.

use super::TrainError;
use crate::graph::{ExecOptions, FactorMode, Graph, GraphBuilder, InputKind, MatmulQuant, NodeOp, Value};
use crate::opslib::{self, Activation, OpsError, ResidualScheme};
use crate::rng::Rng;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormPlacement {
    /// `interp(z, f(layernorm(z)))`, plus a final layer norm before the head.
    #[default]
    Pre,
    /// `layernorm(interp(z, f(z)))`.
    Post,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub ffn_size: usize,
    pub depth: usize,
    /// Rows per batch; the weight-gradient factors depend on it.
    pub batch: usize,
    /// Taken from the dataset when omitted.
    #[serde(default)]
    pub input_dim: Option<usize>,
    #[serde(default)]
    pub classes: Option<usize>,
    #[serde(default = "default_scheme")]
    pub scheme: ResidualScheme,
    /// Without residuals the blocks are simply chained.
    #[serde(default = "yes")]
    pub residual: bool,
    #[serde(default)]
    pub norm: NormPlacement,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default)]
    pub bias: bool,
    pub unit_scaled: bool,
    /// Baseline weight init std; `None` means `1/√fan_in`. Ignored by
    /// unit-scaled models, which always use 1.
    #[serde(default)]
    pub init_std: Option<f64>,
}

fn default_scheme() -> ResidualScheme {
    ResidualScheme::Fixed { tau: 0.5 }
}
fn yes() -> bool {
    true
}
fn default_activation() -> Activation {
    Activation::Gelu
}

impl ModelConfig {
    pub fn new(hidden: usize, ffn_size: usize, depth: usize, batch: usize, unit_scaled: bool) -> Self {
        Self {
            hidden,
            ffn_size,
            depth,
            batch,
            input_dim: None,
            classes: None,
            scheme: default_scheme(),
            residual: true,
            norm: NormPlacement::Pre,
            activation: Activation::Gelu,
            bias: false,
            unit_scaled,
            init_std: None,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(format!("model: {m}")));
        if self.hidden < 2 || self.ffn_size < 2 {
            return bad("hidden and ffn_size must be at least 2".into());
        }
        if self.depth == 0 {
            return bad("depth must be at least 1".into());
        }
        if self.batch == 0 {
            return bad("batch must be positive".into());
        }
        if self.input_dim == Some(0) || self.classes.is_some_and(|c| c < 2) {
            return bad("input_dim must be positive and classes at least 2".into());
        }
        if let Some(s) = self.init_std {
            if !(s > 0.0 && s.is_finite()) {
                return bad(format!("init_std must be positive, got {s}"));
            }
        }
        self.scheme.validate()?;
        Ok(())
    }
}

/// Projection weights versus everything else (biases, norm gains).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Projection,
    NonProjection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Init {
    Normal(f64),
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamInfo {
    pub name: String,
    /// Index of the graph input holding this parameter.
    pub input: usize,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub init: Init,
}

/// What a recorded tensor is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Activation,
    Gradient,
    Param,
    ParamGrad,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub role: Role,
    pub tensor: Tensor,
}

/// Result of one forward/backward pass.
#[derive(Debug, Clone)]
pub struct Pass {
    /// Mean per-row loss.
    pub loss: f64,
    pub param_grads: Vec<Tensor>,
    pub records: Vec<Record>,
}

#[derive(Debug, Clone)]
pub struct ToyModel {
    pub config: ModelConfig,
    pub graph: Graph,
    pub params: Vec<ParamInfo>,
    x_input: usize,
    labels_input: usize,
}

struct Builder<'a> {
    g: GraphBuilder,
    params: Vec<ParamInfo>,
    cfg: &'a ModelConfig,
    n_inputs: usize,
}

impl Builder<'_> {
    fn input(&mut self, name: &str, shape: &[usize], kind: InputKind) -> Value {
        self.n_inputs += 1;
        self.g.add_input(name, shape, kind)
    }

    fn weight(&mut self, name: &str, rows: usize, cols: usize) -> Value {
        let std = if self.cfg.unit_scaled { 1.0 } else { self.cfg.init_std.unwrap_or(1.0 / (rows as f64).sqrt()) };
        self.param(name, &[rows, cols], ParamKind::Projection, Init::Normal(std))
    }

    fn param(&mut self, name: &str, shape: &[usize], kind: ParamKind, init: Init) -> Value {
        let input = self.n_inputs;
        let v = self.input(name, shape, InputKind::Parameter);
        self.params.push(ParamInfo { name: name.into(), input, shape: shape.to_vec(), kind, init });
        v
    }

    fn norm_params(&mut self, prefix: &str) -> (Value, Value) {
        let n = self.cfg.hidden;
        let w = self.param(&format!("{prefix}.w"), &[n], ParamKind::NonProjection, Init::Constant(1.0));
        let c = self.param(&format!("{prefix}.c"), &[n], ParamKind::NonProjection, Init::Constant(0.0));
        (w, c)
    }

    fn bias(&mut self, name: &str, n: usize) -> Option<Value> {
        self.cfg.bias.then(|| self.param(name, &[n], ParamKind::NonProjection, Init::Constant(0.0)))
    }
}

/// Op choices shared by every block.
#[derive(Clone, Copy)]
struct Ops {
    unit: bool,
    act: Activation,
}

impl Ops {
    fn matmul(self, g: &mut GraphBuilder, x: Value, w: Value, name: &str) -> Result<Value, OpsError> {
        let y =
            if self.unit { opslib::scaled_matmul(g, x, w, false)? } else { g.apply_op(NodeOp::MatMul, &[x, w], None)? };
        g.name_value(y, name)?;
        Ok(y)
    }

    fn bias(self, g: &mut GraphBuilder, x: Value, c: Option<Value>) -> Result<Value, OpsError> {
        match c {
            None => Ok(x),
            Some(c) if self.unit => opslib::scaled_bias_add(g, x, c),
            Some(c) => Ok(g.apply_op(NodeOp::BiasAdd, &[x, c], None)?),
        }
    }

    fn norm(self, g: &mut GraphBuilder, x: Value, (w, c): (Value, Value), name: &str) -> Result<Value, OpsError> {
        let y = if self.unit {
            opslib::scaled_layer_norm(g, x, w, c)?
        } else {
            g.apply_op(NodeOp::LayerNorm, &[x, w, c], None)?
        };
        g.name_value(y, name)?;
        Ok(y)
    }

    fn activation(self, g: &mut GraphBuilder, x: Value, name: &str) -> Result<Value, OpsError> {
        let y =
            if self.unit { opslib::scaled_activation(g, self.act, x)? } else { g.apply_op(self.act.op(), &[x], None)? };
        g.name_value(y, name)?;
        Ok(y)
    }
}

struct BlockParams {
    w1: Value,
    w2: Value,
    b1: Option<Value>,
    b2: Option<Value>,
    norm: Option<(Value, Value)>,
}

fn ffn(g: &mut GraphBuilder, ops: Ops, x: Value, p: &BlockParams, l: usize) -> Result<Value, OpsError> {
    let h = ops.matmul(g, x, p.w1, &format!("l{l}.fc1"))?;
    let h = ops.bias(g, h, p.b1)?;
    let h = ops.activation(g, h, &format!("l{l}.act"))?;
    let y = ops.matmul(g, h, p.w2, &format!("l{l}.fc2"))?;
    ops.bias(g, y, p.b2)
}

impl ToyModel {
    /// Builds the graph. Unit-scaled models get compendium factors with
    /// the `α = β` constraints resolved on non-cut edges.
    pub fn build(cfg: &ModelConfig) -> Result<ToyModel, TrainError> {
        cfg.validate()?;
        let input_dim = cfg.input_dim.unwrap_or(cfg.hidden);
        let classes = cfg.classes.unwrap_or(2);
        let mut config = cfg.clone();
        config.input_dim = Some(input_dim);
        config.classes = Some(classes);
        let (b, h, f) = (cfg.batch, cfg.hidden, cfg.ffn_size);
        let ops = Ops { unit: cfg.unit_scaled, act: cfg.activation };

        let mut bd = Builder { g: GraphBuilder::new(), params: vec![], cfg: &config, n_inputs: 0 };
        let x = bd.input("x", &[b, input_dim], InputKind::Data);
        let labels = bd.input("labels", &[b], InputKind::Labels);
        let w_in = bd.weight("w_in", input_dim, h);
        let mut z = ops.matmul(&mut bd.g, x, w_in, "embed")?;

        for l in 0..cfg.depth {
            let p = BlockParams {
                w1: bd.weight(&format!("l{l}.w1"), h, f),
                b1: bd.bias(&format!("l{l}.b1"), f),
                w2: bd.weight(&format!("l{l}.w2"), f, h),
                b2: bd.bias(&format!("l{l}.b2"), h),
                norm: (cfg.norm != NormPlacement::None).then(|| bd.norm_params(&format!("l{l}.ln"))),
            };
            let g = &mut bd.g;
            let ln_name = format!("l{l}.ln");
            let branch = |g: &mut GraphBuilder, v: Value| -> Result<Value, OpsError> {
                let v = match (cfg.norm, p.norm) {
                    (NormPlacement::Pre, Some(np)) => ops.norm(g, v, np, &ln_name)?,
                    _ => v,
                };
                ffn(g, ops, v, &p, l)
            };
            z = if cfg.residual {
                opslib::residual(g, z, cfg.scheme, l + 1, cfg.unit_scaled, branch)?
            } else {
                branch(g, z)?
            };
            if let (NormPlacement::Post, Some(np)) = (cfg.norm, p.norm) {
                z = ops.norm(g, z, np, &format!("l{l}.ln"))?;
            } else if cfg.residual {
                g.name_value(z, &format!("l{l}.out"))?;
            }
        }
        if cfg.norm == NormPlacement::Pre && cfg.depth > 0 {
            let np = bd.norm_params("ln_f");
            z = ops.norm(&mut bd.g, z, np, "ln_f")?;
        }
        let w_out = bd.weight("w_out", h, classes);
        let logits = ops.matmul(&mut bd.g, z, w_out, "logits")?;
        let loss = if cfg.unit_scaled {
            opslib::scaled_softmax_xent(&mut bd.g, logits, labels)?
        } else {
            bd.g.apply_op(NodeOp::SoftmaxXent, &[logits, labels], None)?
        };
        bd.g.mark_output(loss)?;
        let params = bd.params;
        let mut graph = bd.g.freeze();
        if cfg.unit_scaled {
            graph = opslib::unit_scale(&graph)?;
        }
        Ok(ToyModel { config, graph, params, x_input: 0, labels_input: 1 })
    }

    pub fn init_params(&self, seed: u64) -> Vec<Tensor> {
        let mut rng = Rng::stream(seed, 0);
        self.params
            .iter()
            .map(|p| match p.init {
                Init::Normal(s) => Tensor::randn_with(&p.shape, s, &mut rng),
                Init::Constant(c) => Tensor::full(&p.shape, c),
            })
            .collect()
    }

    pub fn batch(&self) -> usize {
        self.config.batch
    }

    /// Forward and backward with `seed` as the gradient of every per-row
    /// loss. With `record`, every named activation, its gradient, and every
    /// parameter and parameter gradient is returned.
    pub fn run(
        &self,
        params: &[Tensor],
        x: &Tensor,
        labels: &Tensor,
        seed: f64,
        quant: Option<&MatmulQuant>,
        record: bool,
    ) -> Result<Pass, TrainError> {
        if params.len() != self.params.len() {
            return Err(TrainError::InvalidConfig(format!(
                "{} parameter tensors for {} parameters",
                params.len(),
                self.params.len()
            )));
        }
        let mut inputs = vec![Tensor::scalar(0.0); self.graph.inputs().len()];
        inputs[self.x_input] = x.clone();
        inputs[self.labels_input] = labels.clone();
        for (p, t) in self.params.iter().zip(params) {
            inputs[p.input] = t.clone();
        }
        let opts = ExecOptions { mode: FactorMode::Scaled, quant };
        let tape = self.graph.forward(&inputs, opts)?;
        let out = self.graph.outputs()[0];
        let rows = tape.value(out);
        let loss = rows.sum() / rows.len() as f64;
        let seed_t = Tensor::full(rows.shape(), seed);
        let bw = self.graph.backward(&tape, &[seed_t], opts)?;
        let param_grads: Vec<Tensor> = self.params.iter().map(|p| bw.inputs[p.input].clone()).collect();
        let mut records = vec![];
        if record {
            for (n, node) in self.graph.nodes().iter().enumerate() {
                let Some(name) = &node.name else { continue };
                let v = self.graph.node_outputs(n)[0];
                records.push(Record { name: name.clone(), role: Role::Activation, tensor: tape.value(v).clone() });
                if let Some(gr) = &bw.values[v.0] {
                    records.push(Record { name: format!("{name}.grad"), role: Role::Gradient, tensor: gr.clone() });
                }
            }
            for (p, (t, gr)) in self.params.iter().zip(params.iter().zip(&param_grads)) {
                records.push(Record { name: p.name.clone(), role: Role::Param, tensor: t.clone() });
                records.push(Record { name: format!("{}.grad", p.name), role: Role::ParamGrad, tensor: gr.clone() });
            }
        }
        Ok(Pass { loss, param_grads, records })
    }
}

/// The plain residual stack of `matmul → gelu → matmul` blocks (no norms,
/// no biases), with input and class counts equal to `hidden`.
pub fn build_unit_ffn(
    hidden: usize,
    ffn_size: usize,
    depth: usize,
    scheme: ResidualScheme,
    unit_scaled: bool,
    batch: usize,
) -> Result<ToyModel, TrainError> {
    let mut cfg = ModelConfig::new(hidden, ffn_size, depth, batch, unit_scaled);
    cfg.scheme = scheme;
    cfg.norm = NormPlacement::None;
    cfg.classes = Some(hidden);
    if !unit_scaled {
        cfg.init_std = Some(0.02);
    }
    ToyModel::build(&cfg)
}

/// Step-size multipliers: `1/√hidden` for non-projection parameters, 1 for
/// projections.
pub fn lr_compensation(params: &[ParamInfo], hidden: usize) -> Vec<f64> {
    let m = 1.0 / (hidden.max(1) as f64).sqrt();
    params.iter().map(|p| if p.kind == ParamKind::NonProjection { m } else { 1.0 }).collect()
}

/// Extra FLOPs of applying scale factors relative to the matmuls:
/// `ops_per_matmul / (2·hidden)`.
pub fn flop_overhead(hidden: usize, ops_per_matmul: f64) -> Result<f64, TrainError> {
    if hidden == 0 || !(ops_per_matmul >= 0.0 && ops_per_matmul.is_finite()) {
        return Err(TrainError::InvalidConfig(format!(
            "flop overhead needs hidden ≥ 1 and ops ≥ 0, got {hidden} and {ops_per_matmul}"
        )));
    }
    Ok(ops_per_matmul / (2.0 * hidden as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::verify_scaled_op;

    fn small(unit: bool, norm: NormPlacement) -> ToyModel {
        let mut cfg = ModelConfig::new(8, 16, 2, 4, unit);
        cfg.norm = norm;
        cfg.bias = true;
        cfg.classes = Some(3);
        cfg.input_dim = Some(5);
        ToyModel::build(&cfg).unwrap()
    }

    #[test]
    fn unit_models_are_scaled_ops() {
        for norm in [NormPlacement::Pre, NormPlacement::Post, NormPlacement::None] {
            let m = small(true, norm);
            let v = verify_scaled_op(&m.graph, 2, 3).unwrap();
            assert!(v.is_scaled_op, "{norm:?}: {v:?}");
        }
    }

    #[test]
    fn baseline_has_unit_factors() {
        let m = small(false, NormPlacement::Pre);
        assert!(m.graph.nodes().iter().all(|n| n.factors.alpha == 1.0 && n.factors.betas.iter().all(|&b| b == 1.0)));
    }

    #[test]
    fn records_and_shapes() {
        let m = small(true, NormPlacement::Pre);
        let p = m.init_params(1);
        let x = Tensor::randn(&[4, 5], 1.0, 2);
        let y = Tensor::from_vec(vec![0.0, 1.0, 2.0, 1.0]);
        let pass = m.run(&p, &x, &y, 1.0, None, true).unwrap();
        assert!(pass.loss.is_finite());
        let names: Vec<&str> = pass.records.iter().map(|r| r.name.as_str()).collect();
        for want in ["embed", "l0.fc1", "l0.act.grad", "l1.out", "ln_f", "logits.grad", "w_out.grad", "l0.b1"] {
            assert!(names.contains(&want), "{want} missing from {names:?}");
        }
        assert!(m.run(&p[1..], &x, &y, 1.0, None, false).is_err());
    }

    #[test]
    fn lr_multipliers() {
        let m = small(true, NormPlacement::Pre);
        let mults = lr_compensation(&m.params, 1024);
        for (p, k) in m.params.iter().zip(mults) {
            let want = if p.kind == ParamKind::Projection { 1.0 } else { 1.0 / 32.0 };
            assert_eq!(k, want, "{}", p.name);
        }
        assert!(lr_compensation(&m.params, 1).iter().all(|&k| k == 1.0));
    }

    #[test]
    fn flops() {
        assert!((flop_overhead(1024, 4.0).unwrap() - 0.001953125).abs() < 1e-15);
        assert_eq!(flop_overhead(512, 0.0).unwrap(), 0.0);
        assert!((flop_overhead(512, 4.0).unwrap() - 0.00390625).abs() < 1e-15);
        assert!(flop_overhead(0, 4.0).is_err());
    }
}
