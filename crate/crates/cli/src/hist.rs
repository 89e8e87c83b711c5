//! Exponent histograms of every named tensor at initialisation.

use crate::manifest::{file_stem, OutDir};
use anyhow::Result;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use unit_scaling::floatsim::format_by_name;
use unit_scaling::rng::Rng;
use unit_scaling::tensor::Tensor;
use unit_scaling::train::{ModelConfig, Role, ToyModel};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistConfig {
    /// `input_dim` and `classes` default to `hidden`.
    pub model: ModelConfig,
    #[serde(default)]
    pub seed: u64,
    /// Range reported in the summary.
    #[serde(default = "default_range")]
    pub range_format: String,
}

fn default_range() -> String {
    "fp8-e4a".into()
}

#[derive(Debug, Serialize)]
struct TensorSummary {
    tensor: String,
    role: Role,
    mean: f64,
    std: f64,
    zero_fraction: f64,
    /// Share of nonzero values inside the format's normal range.
    in_range: f64,
}

#[derive(Debug, Serialize)]
struct Summary {
    range_format: String,
    range: (f64, f64),
    /// Pooled over all tensors.
    in_range: f64,
    tensors: Vec<TensorSummary>,
}

pub fn run(cfg: &HistConfig, out: &Path) -> Result<PathBuf> {
    let mut cfg = cfg.clone();
    cfg.model.input_dim.get_or_insert(cfg.model.hidden);
    cfg.model.classes.get_or_insert(cfg.model.hidden);
    cfg.model.validate()?;
    let fmt = format_by_name(&cfg.range_format)?;
    let (lo, hi) = (fmt.min_normal(), fmt.max_normal());
    let model = ToyModel::build(&cfg.model)?;

    let params = model.init_params(cfg.seed);
    let mut rng = Rng::stream(cfg.seed, 1);
    let (batch, d) = (model.batch(), cfg.model.input_dim.unwrap_or(cfg.model.hidden));
    let classes = cfg.model.classes.unwrap_or(cfg.model.hidden);
    let x = Tensor::randn_with(&[batch, d], 1.0, &mut rng);
    let labels = Tensor::from_vec((0..batch).map(|_| rng.below(classes) as f64).collect());
    let pass = model.run(&params, &x, &labels, 1.0, None, true)?;

    let mut dir = OutDir::create(out)?;
    let mut merged = String::from("tensor,role,bin_lo,bin_hi,count\n");
    let mut tensors = vec![];
    let (mut inside, mut nonzero) = (0.0, 0.0);
    for r in &pass.records {
        let h = r.tensor.exponent_histogram();
        let role = serde_json::to_value(r.role)?;
        let role = role.as_str().unwrap_or_default();
        for (a, b, c) in h.rows() {
            merged.push_str(&format!("{},{role},{a:e},{b:e},{c}\n", r.name));
        }
        dir.write(&format!("hist/{}.csv", file_stem(&r.name)), &h.to_csv())?;
        let st = r.tensor.stats()?;
        let nz = h.nonzero_finite() as f64;
        let frac = r.tensor.nonzero_fraction_within(lo, hi);
        inside += frac * nz;
        nonzero += nz;
        tensors.push(TensorSummary {
            tensor: r.name.clone(),
            role: r.role,
            mean: st.mean,
            std: st.std,
            zero_fraction: h.zero_fraction(),
            in_range: frac,
        });
    }
    dir.write("hist.csv", &merged)?;
    let mut stats = String::from("tensor,role,mean,std,zero_fraction,in_range\n");
    for t in &tensors {
        let role = serde_json::to_value(t.role)?;
        stats.push_str(&format!(
            "{},{},{:e},{:e},{},{}\n",
            t.tensor,
            role.as_str().unwrap_or_default(),
            t.mean,
            t.std,
            t.zero_fraction,
            t.in_range
        ));
    }
    dir.write("stats.csv", &stats)?;
    let summary = Summary {
        range_format: fmt.name.clone(),
        range: (lo, hi),
        in_range: if nonzero > 0.0 { inside / nonzero } else { 0.0 },
        tensors,
    };
    dir.write_json("summary.json", &summary)?;
    dir.finish("hist", &cfg, cfg.seed)
}
