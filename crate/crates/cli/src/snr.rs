use crate::manifest::{file_stem, OutDir};
use anyhow::{bail, Result};
use serde::Serialize;
use std::path::{Path, PathBuf};
use unit_scaling::floatsim::{format_by_name, log2_grid, snr_curve, SnrPoint};

#[derive(Debug, Clone, Serialize)]
pub struct SnrConfig {
    pub formats: Vec<String>,
    /// `log2` of the smallest and largest scale.
    pub log2_lo: f64,
    pub log2_hi: f64,
    pub points: usize,
    pub samples: usize,
    pub seed: u64,
}

fn row(p: &SnrPoint) -> String {
    format!("{:e},{},{:e},{}", p.sigma, p.sigma.log2(), p.snr, p.db())
}

pub fn run(cfg: &SnrConfig, out: &Path) -> Result<PathBuf> {
    let finite = cfg.log2_lo.is_finite() && cfg.log2_hi.is_finite();
    let degenerate = cfg.points > 1 && cfg.log2_lo == cfg.log2_hi;
    if cfg.points == 0 || !finite || cfg.log2_lo > cfg.log2_hi || degenerate {
        bail!("bad grid: {} points over [2^{}, 2^{}]", cfg.points, cfg.log2_lo, cfg.log2_hi);
    }
    if cfg.formats.is_empty() {
        bail!("no formats given");
    }
    let formats = cfg.formats.iter().map(|n| format_by_name(n)).collect::<Result<Vec<_>, _>>()?;
    let grid = log2_grid(cfg.log2_lo, cfg.log2_hi, cfg.points);
    let mut dir = OutDir::create(out)?;
    let mut merged = String::from("format,sigma,log2_sigma,snr,snr_db\n");
    for f in &formats {
        let curve = snr_curve(f, &grid, cfg.samples, cfg.seed)?;
        let mut csv = String::from("sigma,log2_sigma,snr,snr_db\n");
        for p in &curve {
            csv.push_str(&row(p));
            csv.push('\n');
            merged.push_str(&format!("{},{}\n", f.name, row(p)));
        }
        dir.write(&format!("snr_{}.csv", file_stem(&f.name)), &csv)?;
    }
    dir.write("snr.csv", &merged)?;
    dir.finish("snr", cfg, cfg.seed)
}
