//! Acceptance run: one PASS/FAIL line per criterion, with its time budget.
//! Exits non-zero if any criterion fails.

mod common;

use std::time::{Duration, Instant};

use common::{bridges_by_deletion, random_constraint_scaled, random_multigraph, rel_err, square_residual};
use statrs::distribution::{ContinuousCDF, Normal};
use unit_scaling::floatsim::{
    folded_normal_mass, format_catalog, int8_outlier_analysis, log2_grid, plateau, snr_curve, FloatFormat,
};
use unit_scaling::graph::{bridges, gradcheck, verify_scaled_op, FactorMode, GraphBuilder, InputKind};
use unit_scaling::opslib::{
    compendium, empirical_activation_scale, relu_output_std, residual, scaled_bias_add, standalone_graph, Activation,
    Dims, ResidualScheme,
};
use unit_scaling::rng::Rng;
use unit_scaling::tensor::Tensor;
use unit_scaling::train::{
    adam_equivalence_check, build_unit_ffn, flop_overhead, random_two_layer, sgd_reparam_check, train_loop, DataConfig,
    ModelConfig, NormPlacement, OptimState, OptimizerConfig, PrecisionConfig, Role, TrainConfig,
};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c1_format_catalog() -> Outcome {
    let expected = [
        ("fp32", 8, 23, 127, -126),
        ("tf32", 8, 10, 127, -126),
        ("bf16", 8, 7, 127, -126),
        ("fp16", 5, 10, 15, -14),
        ("fp8-e5a", 5, 2, 15, -15),
        ("fp8-e5b", 5, 2, 15, -14),
        ("fp8-e4a", 4, 3, 7, -7),
        ("fp8-e4b", 4, 3, 8, -6),
    ];
    let got: Vec<_> = format_catalog()
        .into_iter()
        .map(|f| (f.name, f.exponent_bits, f.mantissa_bits, f.max_exponent, f.min_exponent))
        .collect();
    let want: Vec<_> = expected.iter().map(|&(n, e, m, hi, lo)| (n.to_string(), e, m, hi, lo)).collect();
    check(got == want, format!("{} rows", got.len()))
}

fn c2_snr_plateaus() -> Outcome {
    const SAMPLES: usize = 1_000_000;
    let mut peaks = Vec::new();
    let mut notes = Vec::new();
    let mut flat = true;
    for f in [FloatFormat::fp16(), FloatFormat::e5a(), FloatFormat::e4a()] {
        let lo = (f.min_normal() * 16.0).log2();
        let hi = (f.max_normal() / 16.0).log2();
        let points = ((hi - lo) * 2.0).ceil() as usize + 1;
        let curve = snr_curve(&f, &log2_grid(lo, hi, points), SAMPLES, 7).map_err(|e| e.to_string())?;
        let db: Vec<f64> = curve.iter().map(|p| p.db()).collect();
        let spread = db.iter().cloned().fold(f64::MIN, f64::max) - db.iter().cloned().fold(f64::MAX, f64::min);
        flat &= spread <= 3.0;
        let p = plateau(&curve).ok_or("empty curve")?;
        notes.push(format!("{} {:.1} dB spread {:.2} dB", f.name, 10.0 * p.peak_snr.log10(), spread));
        peaks.push(p.peak_snr);
    }
    let ratio = peaks[0] / peaks[2];
    let target = 2f64.powi(14);
    let ok = flat && peaks[0] > peaks[1] && peaks[0] > peaks[2] && ratio > target / 2.0 && ratio < target * 2.0;
    check(ok, format!("{}; fp16/e4 = 2^{:.2}", notes.join(", "), ratio.log2()))
}

fn c3_folded_normal() -> Outcome {
    let (lo, hi) = (2f64.powi(-4), 2.0);
    let mass = folded_normal_mass(lo, hi).map_err(|e| e.to_string())?;
    let n = Normal::standard();
    let oracle = 2.0 * (n.cdf(hi) - n.cdf(lo));
    check((mass - 0.90).abs() <= 0.01 && (mass - oracle).abs() < 1e-12, format!("mass {mass:.4}"))
}

fn c4_compendium_constants() -> Outcome {
    let mut notes = Vec::new();
    let exact = (0.5 * (1.0 - 1.0 / std::f64::consts::PI)).sqrt();
    let mut ok = (relu_output_std() - exact).abs() < 1e-6;
    let targets = [
        (Activation::Relu, exact, 0.01),
        (Activation::Gelu, 1.0 / 1.701, 0.02),
        (Activation::Tanh, 1.0 / 1.593, 0.02),
        (Activation::Sigmoid, 1.0 / Activation::Sigmoid.factors().0, 0.02),
    ];
    for (act, want, tol) in targets {
        let got = empirical_activation_scale(act, 1_000_000, 3).forward_std;
        let err = rel_err(got, want);
        ok &= err <= tol;
        notes.push(format!("{} {:.3}%", act.name(), 100.0 * err));
    }
    // Plain softmax-xent gradient at uniform softmax.
    for s in [2usize, 10, 64] {
        let g = standalone_graph("softmax_xent", &Dims { b: Some(16), s: Some(s), ..Default::default() })
            .map_err(|e| e.to_string())?
            .unit_factors();
        let mut rng = Rng::new(s as u64);
        let mut inputs = g.random_inputs(&mut rng);
        inputs[0] = Tensor::zeros(&[16, s]);
        let seed = vec![Tensor::full(&[16], 1.0)];
        let grads = g.gradients(&inputs, &seed, FactorMode::Scaled).map_err(|e| e.to_string())?;
        let sd = grads[0].stats().map_err(|e| e.to_string())?.std;
        let want = ((s - 1) as f64).sqrt() / s as f64;
        ok &= (sd - want).abs() < 1e-12;
        notes.push(format!("xent s={s} {sd:.6}"));
    }
    check(ok, notes.join(", "))
}

fn c5_theorem_suite() -> Outcome {
    let mut rng = Rng::new(2024);
    let mut worst: f64 = 0.0;
    for k in 0..100 {
        let g = random_constraint_scaled(&mut rng, 10);
        if !g.is_constraint_scaled() {
            return Err(format!("graph {k} not constraint-scaled after resolution"));
        }
        let v = verify_scaled_op(&g, 3, k).map_err(|e| e.to_string())?;
        if !v.is_scaled_op {
            return Err(format!("graph {k}: residual {:e}", v.max_residual()));
        }
        for r in &v.per_input {
            let i = g.input_index(&r.input).unwrap();
            let want = g.gradient_scale_ratio(i).map_err(|e| e.to_string())?;
            if let Some(c) = r.ratio {
                worst = worst.max(rel_err(c, want));
            }
        }
    }
    let mut failures = 0;
    for k in 0..10 {
        let alpha = (rng.uniform_in(-3.0, 3.0)).exp2();
        let mut beta = (rng.uniform_in(-3.0, 3.0)).exp2();
        if (beta / alpha - 1.0).abs() < 0.05 {
            beta = alpha * 2.0;
        }
        let v = verify_scaled_op(&square_residual(alpha, beta), 3, k).map_err(|e| e.to_string())?;
        failures += usize::from(!v.is_scaled_op);
    }
    check(
        worst < 1e-9 && failures == 10,
        format!("max ratio rel err {worst:.2e}; counterexample rejected {failures}/10"),
    )
}

fn c6_cut_edges() -> Outcome {
    let mut rng = Rng::new(6);
    for k in 0..200 {
        let (n, edges) = random_multigraph(&mut rng, 8, 12);
        if bridges(n, &edges) != bridges_by_deletion(n, &edges) {
            return Err(format!("graph {k} disagrees: n={n} edges={edges:?}"));
        }
    }
    Ok("200/200 graphs agree".into())
}

fn c7_optimizers() -> Outcome {
    let g = random_two_layer(8, 6, 10, 4, &mut Rng::new(70));
    let sgd = sgd_reparam_check(&g, 100, 0.01, 1).map_err(|e| e.to_string())?;
    let adam = adam_equivalence_check(&g, 100, OptimizerConfig::adam(0.01), 1).map_err(|e| e.to_string())?;

    // Per-element constant rescaling of the gradient leaves Adam (ε = 0) unchanged.
    let mut rng = Rng::new(71);
    let target = Tensor::randn_with(&[5, 4], 1.0, &mut rng);
    let diag: Vec<f64> = (0..20).map(|_| rng.uniform_in(-10.0, 10.0).exp2()).collect();
    let mut a = vec![Tensor::zeros(&[5, 4])];
    let mut b = a.clone();
    let mut sa = OptimState::new(OptimizerConfig::adam(0.05), &a);
    let mut sb = OptimState::new(OptimizerConfig::adam(0.05), &b);
    let mut inv: f64 = 0.0;
    for _ in 0..100 {
        let noise = Tensor::randn_with(&[5, 4], 0.1, &mut rng);
        let ga = a[0].sub(&target).unwrap().add(&noise).unwrap();
        let gb = b[0].sub(&target).unwrap().add(&noise).unwrap();
        let gb = Tensor::new(vec![5, 4], gb.data().iter().zip(&diag).map(|(x, d)| x * d).collect()).unwrap();
        sa.apply(&mut a, &[ga]).map_err(|e| e.to_string())?;
        sb.apply(&mut b, &[gb]).map_err(|e| e.to_string())?;
        inv = inv.max(a[0].sub(&b[0]).unwrap().max_abs());
    }
    check(sgd < 1e-8 && adam < 1e-8 && inv < 1e-12, format!("sgd {sgd:.2e}, adam {adam:.2e}, rescaling {inv:.2e}"))
}

fn c8_gradchecks() -> Outcome {
    let dims = Dims { b: Some(3), m: Some(4), n: Some(5), s: Some(6), weights: Some(vec![0.3, 1.7, 0.9]) };
    let mut worst: (f64, String) = (0.0, String::new());
    let mut record = |name: &str, g: &unit_scaling::graph::Graph, seed: u64| -> Result<(), String> {
        let mut rng = Rng::new(seed);
        let mut inputs = g.random_inputs(&mut rng);
        // Keep relu inputs away from its kink.
        for t in &mut inputs {
            for x in t.data_mut() {
                if x.abs() < 1e-3 {
                    *x = 0.5;
                }
            }
        }
        let e = gradcheck(g, &inputs, 1e-6, seed).map_err(|e| e.to_string())?;
        if e > worst.0 {
            worst = (e, name.to_string());
        }
        Ok(())
    };
    for e in compendium() {
        let g = standalone_graph(e.op, &dims).map_err(|e| e.to_string())?;
        record(e.op, &g, 1)?;
    }
    let mut b = GraphBuilder::new();
    let x = b.add_input("x", &[4, 5], InputKind::Data);
    let c = b.add_input("c", &[5], InputKind::Parameter);
    let y = scaled_bias_add(&mut b, x, c).map_err(|e| e.to_string())?;
    b.mark_output(y).unwrap();
    record("bias_add", &b.freeze(), 2)?;
    for scheme in [ResidualScheme::Default, ResidualScheme::Fixed { tau: 0.3 }, ResidualScheme::RunningMean] {
        for unit in [false, true] {
            let mut b = GraphBuilder::new();
            let x = b.add_input("x", &[4, 5], InputKind::Data);
            let w = b.add_input("w", &[5, 5], InputKind::Parameter);
            let y = residual(&mut b, x, scheme, 2, unit, |g, v| {
                let h = unit_scaling::opslib::scaled_matmul(g, v, w, false)?;
                unit_scaling::opslib::scaled_activation(g, Activation::Tanh, h)
            })
            .map_err(|e| e.to_string())?;
            b.mark_output(y).unwrap();
            record("residual", &b.freeze(), 3)?;
        }
    }
    check(worst.0 < 1e-5, format!("max rel err {:.2e} ({})", worst.0, worst.1))
}

fn c9_unit_scale_at_init() -> Outcome {
    let (hidden, ffn, batch) = (1024, 4096, 256);
    let model =
        build_unit_ffn(hidden, ffn, 4, ResidualScheme::Fixed { tau: 0.5 }, true, batch).map_err(|e| e.to_string())?;
    let (lo, hi) = (2f64.powi(-7), 2f64.powi(7) * (2.0 - 2f64.powi(-3)));
    let mut smallest = (f64::MAX, String::new());
    let mut largest = (0.0, String::new());
    // Containment counts every tensor in the histogram, weights included;
    // `no_w` is the same figure without the weights.
    let (mut inside, mut nonzero, mut inside_no_w, mut nonzero_no_w) = (0.0, 0.0, 0.0, 0.0);
    for seed in 0..10u64 {
        let params = model.init_params(seed);
        let mut rng = Rng::stream(seed, 99);
        let x = Tensor::randn_with(&[batch, hidden], 1.0, &mut rng);
        let labels = Tensor::from_vec((0..batch).map(|_| rng.below(hidden) as f64).collect());
        let pass = model.run(&params, &x, &labels, 1.0, None, true).map_err(|e| e.to_string())?;
        for r in &pass.records {
            let nz = r.tensor.data().iter().filter(|v| **v != 0.0).count() as f64;
            let within = r.tensor.nonzero_fraction_within(lo, hi) * nz;
            inside += within;
            nonzero += nz;
            if r.role == Role::Param {
                continue;
            }
            inside_no_w += within;
            nonzero_no_w += nz;
            let sd = r.tensor.stats().map_err(|e| e.to_string())?.std;
            if sd < smallest.0 {
                smallest = (sd, r.name.clone());
            }
            if sd > largest.0 {
                largest = (sd, r.name.clone());
            }
        }
    }
    let frac = inside / nonzero;
    check(
        smallest.0 >= 0.5 && largest.0 <= 2.0 && frac >= 0.99,
        format!(
            "std range [{:.3} ({}), {:.3} ({})]; {:.2}% of nonzero mass in E4 normal range ({:.2}% without weights)",
            smallest.0,
            smallest.1,
            largest.0,
            largest.1,
            100.0 * frac,
            100.0 * inside_no_w / nonzero_no_w
        ),
    )
}

fn parity_config(unit: bool, precision: PrecisionConfig) -> TrainConfig {
    let mut model = ModelConfig::new(32, 128, 2, 256, unit);
    model.norm = NormPlacement::None;
    if !unit {
        model.init_std = Some(0.02);
        model.scheme = ResidualScheme::Default;
    }
    TrainConfig {
        model,
        data: DataConfig::Mixture { input_dim: 8, classes: 4, clusters: 16, spread: 2.0, noise: 0.5, label_noise: 0.3 },
        optimizer: OptimizerConfig::adam(3e-3),
        precision,
        steps: 300,
        seed: 0,
        stats_every: 0,
        lr_compensation: false,
        // The baseline averages over a large virtual global batch, which
        // pushes its raw gradients below the FP16 subnormal range.
        loss_normalizer: (!unit).then_some(2f64.powi(25)),
    }
}

fn c10_fp16_parity() -> Outcome {
    let budget = Duration::from_secs(300);
    let run = |cfg: TrainConfig| -> Result<(unit_scaling::train::TrainReport, Duration), String> {
        let t = Instant::now();
        let r = train_loop(&cfg).map_err(|e| e.to_string())?;
        Ok((r, t.elapsed()))
    };
    let (u32r, t1) = run(parity_config(true, PrecisionConfig::fp32()))?;
    let (u16r, t2) = run(parity_config(true, PrecisionConfig::fp16()))?;
    let (b32, t3) = run(parity_config(false, PrecisionConfig::fp32()))?;
    let (b16, t4) = run(parity_config(false, PrecisionConfig::fp16()))?;
    let (bls, t5) = run(parity_config(false, PrecisionConfig::fp16().with_loss_scale(2048.0)))?;
    let slow = [t1, t2, t3, t4, t5].iter().any(|t| *t > budget);
    let a = rel_err(u16r.final_loss, u32r.final_loss) <= 0.05 && u16r.skipped_steps == 0;
    let zero = b16.weight_grad_hist.zero_fraction();
    let b = zero > 0.5 || (b16.final_loss - b32.final_loss) / b32.final_loss >= 0.05;
    let c = rel_err(bls.final_loss, b32.final_loss) <= 0.05;
    check(
        a && b && c && !slow,
        format!(
            "unit fp32 {:.4} fp16 {:.4} ({} skipped); baseline fp32 {:.4} fp16 {:.4} (zero grads {:.1}%) scaled {:.4}",
            u32r.final_loss,
            u16r.final_loss,
            u16r.skipped_steps,
            b32.final_loss,
            b16.final_loss,
            100.0 * zero,
            bls.final_loss
        ),
    )
}

fn c11_flop_overhead() -> Outcome {
    let r = flop_overhead(1024, 4.0).map_err(|e| e.to_string())?;
    check((r - 0.001953125).abs() < 1e-15 && format!("{:.1}", 100.0 * r) == "0.2", format!("{r}"))
}

fn c12_outliers() -> Outcome {
    let a = int8_outlier_analysis();
    let ok = a.int8_bins_used == 3
        && a.fp8_bins_used == 90
        && rel_err(a.snr_int8_nonoutlier, 2.03) <= 0.3
        && rel_err(a.snr_fp8e4_nonoutlier, 1.29e3) <= 0.3;
    check(
        ok,
        format!(
            "bins {}/256 vs {}; snr int8 {:.3}, fp8 {:.4e}",
            a.int8_bins_used, a.fp8_bins_used, a.snr_int8_nonoutlier, a.snr_fp8e4_nonoutlier
        ),
    )
}

type Criterion = (&'static str, Duration, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 12] = [
        ("format catalog", Duration::from_secs(1), c1_format_catalog),
        ("snr plateaus", Duration::from_secs(60), c2_snr_plateaus),
        ("folded-normal mass", Duration::from_secs(1), c3_folded_normal),
        ("compendium constants", Duration::from_secs(60), c4_compendium_constants),
        ("theorem suite", Duration::from_secs(120), c5_theorem_suite),
        ("cut-edge oracle", Duration::from_secs(30), c6_cut_edges),
        ("optimizer equivalences", Duration::from_secs(60), c7_optimizers),
        ("gradient checks", Duration::from_secs(60), c8_gradchecks),
        ("unit scale at init", Duration::from_secs(120), c9_unit_scale_at_init),
        ("fp16 parity", Duration::from_secs(1500), c10_fp16_parity),
        ("flop overhead", Duration::from_secs(1), c11_flop_overhead),
        ("outlier model", Duration::from_secs(30), c12_outliers),
    ];
    let mut failed = 0;
    for (i, (name, budget, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = f();
        let took = t.elapsed();
        let (ok, detail) = match outcome {
            Ok(d) if took <= *budget => (true, d),
            Ok(d) => (false, format!("{d}; over budget {budget:?}")),
            Err(d) => (false, d),
        };
        failed += usize::from(!ok);
        println!(
            "{} {:>2} {:<24} {:>8.2}s  {}",
            if ok { "PASS" } else { "FAIL" },
            i + 1,
            name,
            took.as_secs_f64(),
            detail
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
