//! Training runs and learning-rate/seed sweeps.

use crate::manifest::OutDir;
use anyhow::{bail, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use unit_scaling::train::{train_loop, OptimizerConfig, TrainConfig, TrainError, TrainReport};

#[derive(Debug, Serialize)]
pub struct Summary {
    pub steps_run: usize,
    pub final_loss: f64,
    pub diverged: bool,
    pub skipped_steps: usize,
    /// Projection weight gradients over the whole run.
    pub weight_grad_zero_fraction: f64,
    /// Nonzero weight gradients below FP16's normal range.
    pub weight_grad_subnormal_fraction: f64,
    /// Set when most weight gradients were zero, the usual sign of
    /// gradient underflow.
    pub underflow: bool,
}

fn summary(r: &TrainReport, diverged: bool) -> Summary {
    let h = &r.weight_grad_hist;
    let total = h.total().max(1) as f64;
    Summary {
        steps_run: r.losses.len(),
        final_loss: r.final_loss,
        diverged,
        skipped_steps: r.skipped_steps,
        weight_grad_zero_fraction: h.zero_fraction(),
        weight_grad_subnormal_fraction: (h.below + h.subnormal) as f64 / total,
        underflow: h.zero_fraction() > 0.5,
    }
}

fn histograms_csv(r: &TrainReport) -> String {
    let mut s = String::from("step,tensor,bin_lo,bin_hi,count\n");
    for h in &r.histograms {
        for (a, b, c) in h.hist.rows() {
            s.push_str(&format!("{},{},{a:e},{b:e},{c}\n", h.step, h.tensor));
        }
    }
    s
}

/// Runs one config; the report is kept even when the run diverges.
fn train(cfg: &TrainConfig) -> Result<(TrainReport, bool)> {
    match train_loop(cfg) {
        Ok(r) => Ok((r, false)),
        Err(TrainError::Diverged { report, .. }) => Ok((*report, true)),
        Err(e) => Err(e.into()),
    }
}

fn write_run(dir: &mut OutDir, prefix: &str, r: &TrainReport, s: &Summary) -> Result<()> {
    dir.write(&format!("{prefix}losses.csv"), &r.losses_csv())?;
    dir.write(&format!("{prefix}stats.csv"), &r.stats_csv())?;
    dir.write(&format!("{prefix}histograms.csv"), &histograms_csv(r))?;
    dir.write(&format!("{prefix}weight_grad_hist.csv"), &r.weight_grad_hist.to_csv())?;
    dir.write_json(&format!("{prefix}summary.json"), s)
}

/// Returns the summary and the manifest path.
pub fn run(cfg: &TrainConfig, out: &Path) -> Result<(Summary, PathBuf)> {
    cfg.validate()?;
    let (report, diverged) = train(cfg)?;
    let s = summary(&report, diverged);
    let mut dir = OutDir::create(out)?;
    write_run(&mut dir, "", &report, &s)?;
    let m = dir.finish("train", cfg, cfg.seed)?;
    Ok((s, m))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub base: TrainConfig,
    /// Replaces the optimizer's learning rate; the base rate when empty.
    #[serde(default)]
    pub learning_rates: Vec<f64>,
    /// The base seed when empty.
    #[serde(default)]
    pub seeds: Vec<u64>,
}

impl SweepConfig {
    /// Every `(lr, seed)` combination, learning rate outermost.
    pub fn expand(&self) -> Vec<TrainConfig> {
        let lrs =
            if self.learning_rates.is_empty() { vec![self.base.optimizer.lr()] } else { self.learning_rates.clone() };
        let seeds = if self.seeds.is_empty() { vec![self.base.seed] } else { self.seeds.clone() };
        let mut runs = vec![];
        for &lr in &lrs {
            for &seed in &seeds {
                let mut c = self.base.clone();
                c.optimizer = match c.optimizer {
                    OptimizerConfig::Sgd { momentum, .. } => OptimizerConfig::Sgd { lr, momentum },
                    OptimizerConfig::Adam { beta1, beta2, eps, .. } => OptimizerConfig::Adam { lr, beta1, beta2, eps },
                };
                c.seed = seed;
                runs.push(c);
            }
        }
        runs
    }
}

/// Returns whether any run diverged, and the manifest path.
pub fn sweep(cfg: &SweepConfig, jobs: usize, out: &Path) -> Result<(bool, PathBuf)> {
    if jobs == 0 {
        bail!("--jobs must be at least 1");
    }
    let runs = cfg.expand();
    for r in &runs {
        r.validate()?;
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?;
    // Each run owns its RNG streams through its seed, so results do not
    // depend on scheduling; collection keeps run order.
    let results: Vec<Result<(TrainReport, bool)>> = pool.install(|| runs.par_iter().map(train).collect());

    let mut dir = OutDir::create(out)?;
    let mut table = String::from("run,lr,seed,final_loss,skipped_steps,diverged,weight_grad_zero_fraction\n");
    let mut any_diverged = false;
    for (i, (c, res)) in runs.iter().zip(results).enumerate() {
        let (report, diverged) = res?;
        let s = summary(&report, diverged);
        any_diverged |= diverged;
        let id = format!("run-{i:03}");
        table.push_str(&format!(
            "{id},{:e},{},{:e},{},{},{}\n",
            c.optimizer.lr(),
            c.seed,
            s.final_loss,
            s.skipped_steps,
            u8::from(diverged),
            s.weight_grad_zero_fraction
        ));
        write_run(&mut dir, &format!("{id}/"), &report, &s)?;
        dir.write_json(&format!("{id}/config.json"), c)?;
    }
    dir.write("sweep.csv", &table)?;
    let m = dir.finish("sweep", cfg, cfg.base.seed)?;
    Ok((any_diverged, m))
}
