//! The training loop with simulated low-precision matmuls and loss scaling.

use super::data::DataConfig;
use super::model::{lr_compensation, ModelConfig, ParamKind, ToyModel};
use super::optim::{OptimState, OptimizerConfig};
use super::TrainError;
use crate::floatsim::{format_by_name, FloatFormat, OverflowPolicy};
use crate::graph::MatmulQuant;
use crate::tensor::{ExponentHistogram, ScaleStats, Tensor};
use serde::{Deserialize, Serialize};

/// Consecutive non-finite losses before a run is declared diverged.
pub const DIVERGENCE_STEPS: usize = 20;

/// Where values are rounded to a simulated format. Master weights and
/// everything outside matmul inputs stay in reference precision unless
/// `master_weights` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrecisionConfig {
    /// Format for activations and weights entering a matmul.
    #[serde(default)]
    pub activations: Option<String>,
    /// Format for gradients entering a matmul backward.
    #[serde(default)]
    pub gradients: Option<String>,
    /// Format parameters are rounded to after every update.
    #[serde(default)]
    pub master_weights: Option<String>,
    /// Multiplies the loss gradient; weight gradients are divided by it
    /// before the optimizer. 1 disables.
    #[serde(default = "one")]
    pub loss_scale: f64,
    /// Overflow policy of the simulated formats; `to_infinity` when unset,
    /// so overflow surfaces as non-finite gradients and skipped steps.
    #[serde(default)]
    pub overflow: Option<OverflowPolicy>,
}

fn one() -> f64 {
    1.0
}

impl Default for PrecisionConfig {
    fn default() -> Self {
        Self::fp32()
    }
}

impl PrecisionConfig {
    /// Reference precision throughout.
    pub fn fp32() -> Self {
        Self { activations: None, gradients: None, master_weights: None, loss_scale: 1.0, overflow: None }
    }

    pub fn fp16() -> Self {
        Self::matmul("fp16", "fp16")
    }

    /// E4 for activations and weights, E5 for gradients.
    pub fn fp8() -> Self {
        Self::matmul("fp8-e4a", "fp8-e5a")
    }

    pub fn matmul(forward: &str, gradient: &str) -> Self {
        Self { activations: Some(forward.into()), gradients: Some(gradient.into()), ..Self::fp32() }
    }

    pub fn with_loss_scale(mut self, s: f64) -> Self {
        self.loss_scale = s;
        self
    }

    fn format(&self, name: &Option<String>) -> Result<Option<FloatFormat>, TrainError> {
        name.as_deref()
            .map(|n| {
                let f = format_by_name(n)?;
                Ok(f.with_overflow(self.overflow.unwrap_or(OverflowPolicy::ToInfinity)))
            })
            .transpose()
    }

    /// Resolved matmul quantisation (`None` when nothing is quantised) and
    /// master-weight format.
    pub fn resolve(&self) -> Result<(Option<MatmulQuant>, Option<FloatFormat>), TrainError> {
        if !(self.loss_scale > 0.0 && self.loss_scale.is_finite()) {
            return Err(TrainError::InvalidConfig(format!("loss_scale must be positive, got {}", self.loss_scale)));
        }
        let q = MatmulQuant { forward: self.format(&self.activations)?, gradient: self.format(&self.gradients)? };
        let q = (q.forward.is_some() || q.gradient.is_some()).then_some(q);
        Ok((q, self.format(&self.master_weights)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub precision: PrecisionConfig,
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    /// Record tensor statistics every this many steps (also at the first
    /// and last step). 0 records only those two.
    #[serde(default)]
    pub stats_every: usize,
    /// Apply `1/√hidden` step multipliers to non-projection parameters of
    /// unit-scaled models.
    #[serde(default)]
    pub lr_compensation: bool,
    /// Baseline models take the mean loss over this many examples, as if
    /// the batch were part of a larger (accumulated or data-parallel) one.
    /// Defaults to the batch size. Unit-scaled models always seed each
    /// row's loss gradient with 1.
    #[serde(default)]
    pub loss_normalizer: Option<f64>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.model.validate()?;
        self.data.validate()?;
        self.optimizer.validate()?;
        self.precision.resolve()?;
        if self.steps == 0 {
            return Err(TrainError::InvalidConfig("steps must be positive".into()));
        }
        if let Some(n) = self.loss_normalizer {
            if !(n > 0.0 && n.is_finite()) {
                return Err(TrainError::InvalidConfig(format!("loss_normalizer must be positive, got {n}")));
            }
        }
        let check = |what: &str, model: Option<usize>, data: usize| match model {
            Some(m) if m != data => {
                Err(TrainError::InvalidConfig(format!("model {what} {m} does not match the dataset's {data}")))
            }
            _ => Ok(()),
        };
        check("input_dim", self.model.input_dim, self.data.input_dim())?;
        check("classes", self.model.classes, self.data.classes())
    }

    /// Model config with input and class counts taken from the data.
    pub fn resolved_model(&self) -> ModelConfig {
        let mut m = self.model.clone();
        m.input_dim = Some(self.data.input_dim());
        m.classes = Some(self.data.classes());
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatRecord {
    pub step: usize,
    pub tensor: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistRecord {
    pub step: usize,
    pub tensor: String,
    pub hist: ExponentHistogram,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<StepRecord>,
    pub stats: Vec<StatRecord>,
    pub histograms: Vec<HistRecord>,
    pub skipped_steps: usize,
    /// Projection-weight gradients of every step, as produced by the
    /// backward pass (before loss-scale division).
    pub weight_grad_hist: ExponentHistogram,
    /// Mean loss over the last tenth of the run.
    pub final_loss: f64,
    pub params: Vec<Tensor>,
}

impl TrainReport {
    pub fn losses_csv(&self) -> String {
        let mut s = String::from("step,loss,skipped\n");
        for r in &self.losses {
            s.push_str(&format!("{},{:e},{}\n", r.step, r.loss, u8::from(r.skipped)));
        }
        s
    }

    pub fn stats_csv(&self) -> String {
        let mut s = String::from("step,tensor,mean,std\n");
        for r in &self.stats {
            s.push_str(&format!("{},{},{:e},{:e}\n", r.step, r.tensor, r.mean, r.std));
        }
        s
    }
}

fn final_loss(losses: &[StepRecord]) -> f64 {
    let k = (losses.len() / 10).max(1);
    let tail = &losses[losses.len() - k..];
    tail.iter().map(|r| r.loss).sum::<f64>() / k as f64
}

/// Trains `cfg.model` on `cfg.data`.
///
/// Each step draws a batch, runs forward/backward with simulated matmul
/// formats, divides weight gradients by the loss scale, and skips the
/// update if any gradient is non-finite. A run whose loss stays
/// non-finite for [`DIVERGENCE_STEPS`] steps stops with
/// [`TrainError::Diverged`], carrying the report so far.
pub fn train_loop(cfg: &TrainConfig) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    let model = ToyModel::build(&cfg.resolved_model())?;
    let (quant, master) = cfg.precision.resolve()?;
    let mut data = cfg.data.build(cfg.seed)?;
    let mut params = model.init_params(cfg.seed);
    if let Some(f) = &master {
        for p in &mut params {
            f.quantize_slice(p.data_mut());
        }
    }
    let mut optim = OptimState::new(cfg.optimizer, &params);
    if cfg.lr_compensation && model.config.unit_scaled {
        optim = optim.with_multipliers(lr_compensation(&model.params, model.config.hidden))?;
    }
    let scale = cfg.precision.loss_scale;
    let seed =
        scale * if model.config.unit_scaled { 1.0 } else { 1.0 / cfg.loss_normalizer.unwrap_or(model.batch() as f64) };

    let mut report = TrainReport {
        losses: Vec::with_capacity(cfg.steps),
        stats: vec![],
        histograms: vec![],
        skipped_steps: 0,
        weight_grad_hist: ExponentHistogram::default(),
        final_loss: f64::NAN,
        params: vec![],
    };
    let mut bad_run = 0;
    for step in 0..cfg.steps {
        let (x, y) = data.batch(model.batch());
        let record = step == 0 || step + 1 == cfg.steps || (cfg.stats_every > 0 && step % cfg.stats_every == 0);
        let pass = model.run(&params, &x, &y, seed, quant.as_ref(), record)?;
        for r in &pass.records {
            let st = ScaleStats::of(r.tensor.data()).map_err(crate::graph::GraphError::from)?;
            report.stats.push(StatRecord { step, tensor: r.name.clone(), mean: st.mean, std: st.std });
            report.histograms.push(HistRecord { step, tensor: r.name.clone(), hist: r.tensor.exponent_histogram() });
        }
        for (info, g) in model.params.iter().zip(&pass.param_grads) {
            if info.kind == ParamKind::Projection {
                report.weight_grad_hist.merge(&g.exponent_histogram());
            }
        }
        let grads: Vec<Tensor> =
            pass.param_grads.iter().map(|g| if scale == 1.0 { g.clone() } else { g.scale(1.0 / scale) }).collect();
        let skipped = match optim.apply(&mut params, &grads) {
            Ok(()) => false,
            Err(TrainError::NonFiniteGradient { .. }) => true,
            Err(e) => return Err(e),
        };
        if skipped {
            report.skipped_steps += 1;
        } else if let Some(f) = &master {
            for p in &mut params {
                f.quantize_slice(p.data_mut());
            }
        }
        report.losses.push(StepRecord { step, loss: pass.loss, skipped });
        bad_run = if pass.loss.is_finite() { 0 } else { bad_run + 1 };
        if bad_run >= DIVERGENCE_STEPS {
            report.final_loss = final_loss(&report.losses);
            report.params = params;
            return Err(TrainError::Diverged { step, report: Box::new(report) });
        }
    }
    report.final_loss = final_loss(&report.losses);
    report.params = params;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny(unit: bool) -> TrainConfig {
        let mut model = ModelConfig::new(16, 32, 2, 32, unit);
        model.norm = super::super::NormPlacement::None;
        TrainConfig {
            model,
            data: DataConfig::Mixture {
                input_dim: 4,
                classes: 3,
                clusters: 6,
                spread: 2.0,
                noise: 0.3,
                label_noise: 0.0,
            },
            optimizer: OptimizerConfig::adam(0.01),
            precision: PrecisionConfig::fp32(),
            steps: 60,
            seed: 1,
            stats_every: 20,
            lr_compensation: false,
            loss_normalizer: None,
        }
    }

    #[test]
    fn loss_decreases() {
        for unit in [true, false] {
            let r = train_loop(&tiny(unit)).unwrap();
            assert!(r.final_loss < 0.7 * r.losses[0].loss, "{unit}: {} -> {}", r.losses[0].loss, r.final_loss);
            assert_eq!(r.skipped_steps, 0);
        }
    }

    #[test]
    fn deterministic() {
        let a = train_loop(&tiny(true)).unwrap();
        let b = train_loop(&tiny(true)).unwrap();
        assert_eq!(a.losses_csv(), b.losses_csv());
        assert_eq!(a.stats_csv(), b.stats_csv());
    }

    #[test]
    fn config_errors() {
        let mut c = tiny(true);
        c.model.classes = Some(7);
        assert!(matches!(train_loop(&c), Err(TrainError::InvalidConfig(_))));
        let mut c = tiny(true);
        c.precision.activations = Some("fp7".into());
        assert!(matches!(train_loop(&c), Err(TrainError::Format(_))));
        let mut c = tiny(true);
        c.precision.loss_scale = 0.0;
        assert!(train_loop(&c).is_err());
    }

    #[test]
    fn divergence_reported() {
        let mut c = tiny(false);
        c.optimizer = OptimizerConfig::sgd(1e200);
        c.steps = 200;
        match train_loop(&c) {
            Err(TrainError::Diverged { step, report }) => {
                assert!(step < 199);
                assert_eq!(report.losses.len(), step + 1);
            }
            other => panic!("expected divergence, got {:?}", other.map(|r| r.final_loss)),
        }
    }
}
