//! Trajectory checks: a scaled op trained with SGD or Adam against the
//! equivalent unscaled op.

use super::optim::{OptimState, OptimizerConfig};
use super::TrainError;
use crate::graph::{ExecOptions, FactorMode, Graph, GraphBuilder, InputKind, NodeOp, ScaleFactors};
use crate::rng::Rng;
use crate::tensor::Tensor;

struct Problem<'a> {
    g: &'a Graph,
    params: Vec<usize>,
    /// `β'/α'` per parameter: what the scaled backward multiplies the true
    /// gradient by.
    ratios: Vec<f64>,
}

impl<'a> Problem<'a> {
    fn new(g: &'a Graph) -> Result<Self, TrainError> {
        let params: Vec<usize> =
            (0..g.inputs().len()).filter(|&i| g.inputs()[i].kind == InputKind::Parameter).collect();
        if params.is_empty() {
            return Err(TrainError::InvalidConfig("graph has no parameter inputs".into()));
        }
        let ratios = params.iter().map(|&i| g.gradient_scale_ratio(i)).collect::<Result<_, _>>()?;
        Ok(Self { g, params, ratios })
    }

    fn initial(&self, rng: &mut Rng) -> Vec<Tensor> {
        self.params.iter().map(|&i| Tensor::randn_with(&self.g.inputs()[i].shape, 1.0, rng)).collect()
    }

    /// Gradients of `Σ outputs` w.r.t. the parameters, with `data` as the
    /// non-parameter inputs.
    fn grads(&self, theta: &[Tensor], data: &[Tensor], mode: FactorMode) -> Result<Vec<Tensor>, TrainError> {
        let mut inputs = data.to_vec();
        for (&i, t) in self.params.iter().zip(theta) {
            inputs[i] = t.clone();
        }
        let opts = ExecOptions::mode(mode);
        let tape = self.g.forward(&inputs, opts)?;
        let seeds: Vec<Tensor> = self.g.outputs().iter().map(|v| Tensor::full(self.g.value_shape(*v), 1.0)).collect();
        let bw = self.g.backward(&tape, &seeds, opts)?;
        Ok(self.params.iter().map(|&i| bw.inputs[i].clone()).collect())
    }
}

fn max_abs_diff(a: &[Tensor], b: &[Tensor]) -> f64 {
    a.iter().zip(b).flat_map(|(x, y)| x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs())).fold(0.0, f64::max)
}

/// Trains the scaled graph and the unscaled op `f̂(θ) = F(√r·θ)` with plain
/// SGD, where `F` is the graph's forward function and `r` each parameter's
/// gradient-scale ratio, starting from `θ(0) = θ*(0)/√r`. Returns the
/// largest `|θ(t) − θ*(t)/√r|` seen. Each step uses fresh random data,
/// identical for both runs; the loss is the sum of the outputs.
pub fn sgd_reparam_check(g: &Graph, steps: usize, lr: f64, seed: u64) -> Result<f64, TrainError> {
    let pb = Problem::new(g)?;
    let mut rng = Rng::new(seed);
    let mut scaled = pb.initial(&mut rng);
    let sq: Vec<f64> = pb.ratios.iter().map(|r| r.sqrt()).collect();
    let mut plain: Vec<Tensor> = scaled.iter().zip(&sq).map(|(t, s)| t.scale(1.0 / s)).collect();
    let mut opt_s = OptimState::new(OptimizerConfig::sgd(lr), &scaled);
    let mut opt_p = OptimState::new(OptimizerConfig::sgd(lr), &plain);
    let mut worst: f64 = 0.0;
    for _ in 0..steps {
        let data = g.random_inputs(&mut rng);
        let gs = pb.grads(&scaled, &data, FactorMode::Scaled)?;
        let at: Vec<Tensor> = plain.iter().zip(&sq).map(|(t, s)| t.scale(*s)).collect();
        let gp: Vec<Tensor> =
            pb.grads(&at, &data, FactorMode::Collapsed)?.iter().zip(&sq).map(|(t, s)| t.scale(*s)).collect();
        opt_s.apply(&mut scaled, &gs)?;
        opt_p.apply(&mut plain, &gp)?;
        let mapped: Vec<Tensor> = scaled.iter().zip(&sq).map(|(t, s)| t.scale(1.0 / s)).collect();
        worst = worst.max(max_abs_diff(&plain, &mapped));
    }
    Ok(worst)
}

/// Largest parameter difference between Adam on the scaled graph and Adam
/// on the unscaled op `F` (true gradients), from identical initial values.
/// Any `eps` is accepted; see [`adam_equivalence_check`].
pub fn adam_trajectory_deviation(
    g: &Graph,
    steps: usize,
    optimizer: OptimizerConfig,
    seed: u64,
) -> Result<f64, TrainError> {
    if !matches!(optimizer, OptimizerConfig::Adam { .. }) {
        return Err(TrainError::InvalidConfig("adam trajectory check needs an Adam optimizer".into()));
    }
    let pb = Problem::new(g)?;
    let mut rng = Rng::new(seed);
    let mut scaled = pb.initial(&mut rng);
    let mut plain = scaled.clone();
    let mut opt_s = OptimState::new(optimizer, &scaled);
    let mut opt_p = OptimState::new(optimizer, &plain);
    let mut worst: f64 = 0.0;
    for _ in 0..steps {
        let data = g.random_inputs(&mut rng);
        let gs = pb.grads(&scaled, &data, FactorMode::Scaled)?;
        let gp = pb.grads(&plain, &data, FactorMode::Collapsed)?;
        opt_s.apply(&mut scaled, &gs)?;
        opt_p.apply(&mut plain, &gp)?;
        worst = worst.max(max_abs_diff(&plain, &scaled));
    }
    Ok(worst)
}

/// [`adam_trajectory_deviation`] restricted to `eps = 0`, the setting in
/// which the two trajectories coincide.
pub fn adam_equivalence_check(
    g: &Graph,
    steps: usize,
    optimizer: OptimizerConfig,
    seed: u64,
) -> Result<f64, TrainError> {
    if let OptimizerConfig::Adam { eps, .. } = optimizer {
        if eps != 0.0 {
            return Err(TrainError::NonZeroEpsilon(eps));
        }
    }
    adam_trajectory_deviation(g, steps, optimizer, seed)
}

/// `x → matmul → gelu → matmul → softmax_xent` with log-uniform random
/// factors in `[1/4, 4]` on every op. The graph is a chain, so every edge
/// is a cut-edge and any factors give a scaled op.
pub fn random_two_layer(b: usize, d: usize, h: usize, classes: usize, rng: &mut Rng) -> Graph {
    let mut f = |k: usize| {
        let mut r = || (rng.uniform_in(-2.0, 2.0) * std::f64::consts::LN_2).exp();
        ScaleFactors::new(r(), (0..k).map(|_| r()).collect())
    };
    let mut g = GraphBuilder::new();
    let x = g.add_input("x", &[b, d], InputKind::Data);
    let t = g.add_input("labels", &[b], InputKind::Labels);
    let w1 = g.add_input("w1", &[d, h], InputKind::Parameter);
    let w2 = g.add_input("w2", &[h, classes], InputKind::Parameter);
    let build = |g: &mut GraphBuilder, f: &mut dyn FnMut(usize) -> ScaleFactors| {
        let z = g.apply_op(NodeOp::MatMul, &[x, w1], Some(f(2)))?;
        let a = g.apply_op(NodeOp::Gelu, &[z], Some(f(1)))?;
        let l = g.apply_op(NodeOp::MatMul, &[a, w2], Some(f(2)))?;
        let mut xf = f(2);
        xf.alpha = 1.0;
        let y = g.apply_op(NodeOp::SoftmaxXent, &[l, t], Some(xf))?;
        g.mark_output(y)
    };
    build(&mut g, &mut f).expect("shapes are consistent by construction");
    g.freeze()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(alpha: f64, beta: f64) -> Graph {
        let mut g = GraphBuilder::new();
        let th = g.add_input("theta", &[1], InputKind::Parameter);
        let y = g.apply_op(NodeOp::Square, &[th], Some(ScaleFactors::new(alpha, vec![beta]))).unwrap();
        g.mark_output(y).unwrap();
        g.freeze()
    }

    #[test]
    fn identical_factors_give_zero() {
        assert_eq!(sgd_reparam_check(&quadratic(1.0, 1.0), 10, 0.1, 0).unwrap(), 0.0);
        assert_eq!(adam_equivalence_check(&quadratic(2.0, 2.0), 10, OptimizerConfig::adam(0.1), 0).unwrap(), 0.0);
    }

    #[test]
    fn scalar_quadratic() {
        assert!(sgd_reparam_check(&quadratic(4.0, 1.0), 10, 0.05, 3).unwrap() < 1e-12);
    }

    #[test]
    fn epsilon_guard() {
        let g = quadratic(4.0, 1.0);
        let adam = OptimizerConfig::Adam { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        assert_eq!(adam_equivalence_check(&g, 5, adam, 0), Err(TrainError::NonZeroEpsilon(1e-8)));
        assert!(adam_trajectory_deviation(&g, 5, adam, 0).is_ok());
        assert!(adam_equivalence_check(&g, 5, OptimizerConfig::sgd(0.1), 0).is_err());
    }

    #[test]
    fn two_layer_is_chain() {
        let g = random_two_layer(4, 3, 5, 3, &mut Rng::new(1));
        assert_eq!(g.find_cut_edges().len(), 8);
        let v = crate::graph::verify_scaled_op(&g, 2, 0).unwrap();
        assert!(v.is_scaled_op);
    }
}
