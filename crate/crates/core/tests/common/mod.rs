#![allow(dead_code)]

use unit_scaling::graph::{Graph, GraphBuilder, InputKind, NodeOp, ScaleFactors, Value};
use unit_scaling::rng::Rng;

const SHAPE: [usize; 2] = [3, 3];

fn log_uniform(rng: &mut Rng) -> f64 {
    (rng.uniform_in(-2.0, 2.0) * std::f64::consts::LN_2).exp()
}

/// Random DAG of at most `max_ops` ops over `[3×3]` values with arbitrary
/// factors and fan-out, then made constraint-scaled by resolution.
/// Sinks are summed into a single output; the op count includes those sums.
pub fn random_constraint_scaled(rng: &mut Rng, max_ops: usize) -> Graph {
    loop {
        let g = random_dag(rng, max_ops);
        if g.last_node().map_or(0, |n| n + 1) <= max_ops {
            return g.freeze().resolved().expect("random graphs resolve");
        }
    }
}

fn random_dag(rng: &mut Rng, max_ops: usize) -> GraphBuilder {
    let mut g = GraphBuilder::new();
    let n_inputs = 1 + rng.below(3);
    let mut vals: Vec<Value> = (0..n_inputs)
        .map(|i| {
            let kind = if i == 0 { InputKind::Data } else { InputKind::Parameter };
            g.add_input(&format!("in{i}"), &SHAPE, kind)
        })
        .collect();
    let mut consumed = vec![false; vals.len()];
    let ops = n_inputs.max(1 + rng.below(max_ops)).min(max_ops);
    for k in 0..ops {
        let op = match rng.below(9) {
            0 => NodeOp::Identity,
            1 => NodeOp::Add,
            2 => NodeOp::WeightedAdd { weights: vec![log_uniform(rng), log_uniform(rng)] },
            3 => NodeOp::Gelu,
            4 => NodeOp::Tanh,
            5 => NodeOp::Sigmoid,
            6 => NodeOp::Square,
            7 => NodeOp::MatMul,
            _ => NodeOp::Softmax,
        };
        let arity = op.arity().unwrap_or(2);
        // Early ops consume the inputs in order so none is left dangling.
        let mut args: Vec<usize> = (0..arity).map(|_| rng.below(vals.len())).collect();
        if k < n_inputs {
            args[0] = k;
        }
        let factors = ScaleFactors::new(log_uniform(rng), (0..arity).map(|_| log_uniform(rng)).collect());
        let ins: Vec<Value> = args.iter().map(|&a| vals[a]).collect();
        for &a in &args {
            consumed[a] = true;
        }
        vals.push(g.apply_op(op, &ins, Some(factors)).expect("square shapes always fit"));
        consumed.push(false);
    }
    // A scaled op has one output: fold the sinks together.
    let sinks: Vec<Value> = vals.iter().zip(&consumed).filter(|(_, u)| !**u).map(|(v, _)| *v).collect();
    let mut out = sinks[0];
    for &s in &sinks[1..] {
        let factors = ScaleFactors::new(log_uniform(rng), vec![log_uniform(rng), log_uniform(rng)]);
        out = g.apply_op(NodeOp::Add, &[out, s], Some(factors)).unwrap();
    }
    g.mark_output(out).unwrap();
    g
}

/// `x + f*(x)` with `f(x) = x²` scaled by `(α, β)`; a scaled op only when
/// `α = β`.
pub fn square_residual(alpha: f64, beta: f64) -> Graph {
    let mut g = GraphBuilder::new();
    let x = g.add_input("x", &[4, 3], InputKind::Data);
    let f = g.apply_op(NodeOp::Square, &[x], Some(ScaleFactors::new(alpha, vec![beta]))).unwrap();
    let y = g.apply_op(NodeOp::Add, &[x, f], None).unwrap();
    g.mark_output(y).unwrap();
    g.freeze()
}

fn components(n: usize, edges: impl Iterator<Item = (usize, usize)>) -> usize {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let mut count = n;
    for (a, b) in edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra] = rb;
            count -= 1;
        }
    }
    count
}

/// Edge `e` is a bridge iff deleting it increases the component count.
pub fn bridges_by_deletion(n: usize, edges: &[(usize, usize)]) -> Vec<bool> {
    let base = components(n, edges.iter().copied());
    (0..edges.len())
        .map(|skip| {
            let rest = edges.iter().enumerate().filter(|(i, _)| *i != skip).map(|(_, e)| *e);
            components(n, rest) > base
        })
        .collect()
}

pub fn random_multigraph(rng: &mut Rng, max_vertices: usize, max_edges: usize) -> (usize, Vec<(usize, usize)>) {
    let n = 1 + rng.below(max_vertices);
    let m = rng.below(max_edges + 1);
    (n, (0..m).map(|_| (rng.below(n), rng.below(n))).collect())
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}
