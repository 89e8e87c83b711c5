//! Read-only commands: the format catalog, the factor table, and graph
//! verification.

use anyhow::{Context, Result};
use serde::Serialize;
use std::path::Path;
use unit_scaling::floatsim::{format_by_name, format_catalog};
use unit_scaling::graph::{verify_scaled_op, Graph, Violation};
use unit_scaling::opslib::{compendium, op_factors, Dims};

pub fn formats(name: Option<&str>) -> Result<String> {
    Ok(match name {
        Some(n) => serde_json::to_string_pretty(&format_by_name(n)?)?,
        None => serde_json::to_string_pretty(&format_catalog())?,
    })
}

pub fn factors(op: Option<&str>, dims: &str) -> Result<String> {
    Ok(match op {
        Some(op) => {
            let dims: Dims = dims.parse()?;
            serde_json::to_string_pretty(&op_factors(op, &dims)?)?
        }
        None => serde_json::to_string_pretty(compendium())?,
    })
}

#[derive(Debug, Serialize)]
pub struct InputReport {
    pub input: String,
    /// Measured ratio of scaled to true gradient.
    pub ratio: Option<f64>,
    /// Product of `β/α` over the cut-edges; absent when paths disagree.
    pub predicted_ratio: Option<f64>,
    pub residual: f64,
}

#[derive(Debug, Serialize)]
pub struct VerifyReport {
    pub graph: String,
    pub resolved: bool,
    pub constraint_scaled: bool,
    pub violations: Vec<Violation>,
    pub is_scaled_op: bool,
    pub trials: usize,
    pub tolerance: f64,
    pub max_residual: f64,
    pub inputs: Vec<InputReport>,
}

pub fn verify(path: &Path, trials: usize, seed: u64, resolve: bool) -> Result<VerifyReport> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut g = Graph::from_json(&text).with_context(|| format!("parsing {}", path.display()))?;
    if resolve {
        g = g.resolved()?;
    }
    let v = verify_scaled_op(&g, trials, seed)?;
    let inputs = v
        .per_input
        .iter()
        .map(|r| InputReport {
            input: r.input.clone(),
            ratio: r.ratio,
            predicted_ratio: g.input_index(&r.input).and_then(|i| g.gradient_scale_ratio(i).ok()),
            residual: r.residual,
        })
        .collect();
    Ok(VerifyReport {
        graph: path.display().to_string(),
        resolved: resolve,
        constraint_scaled: g.is_constraint_scaled(),
        violations: g.violations(),
        is_scaled_op: v.is_scaled_op,
        trials: v.trials,
        tolerance: v.tolerance,
        max_residual: v.max_residual(),
        inputs,
    })
}
