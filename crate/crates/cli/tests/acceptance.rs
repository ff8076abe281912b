//! Acceptance criteria, one line each.
//!
//! Runs without the libtest harness so that every criterion prints its
//! PASS/FAIL line. Set `CONDMMD_UCI_CSV` (and optionally
//! `CONDMMD_UCI_TARGET`, default `MEDV`) to run the housing check on a real
//! file instead of the generated stand-in.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use condmmd::data::{
    gen_synthetic, load_csv, normalize_split, Dataset, GroundTruth, NormStats, Record, SyntheticSpec, TargetColumn,
};
use condmmd::estimators::{cmmd_hat, Batch, EstimatorKind, GenBatch, SampleSizes};
use condmmd::evalreport::{
    conditional_summaries, evaluate_model, frechet_gaussian, EvalSettings, GaussianMoments, MetricValue,
};
use condmmd::kernels::{Bandwidth, BandwidthRule, Kernel, KernelConfig, LinearKernel};
use condmmd::nn::MlpGenerator;
use condmmd::oracle::{
    check_metric_inequalities, closed_form_variance_ammd, closed_form_variance_jmmd, estimator_moments, exact_metrics,
    finite_feature_cmmd, Branch, DiscreteInstance,
};
use condmmd::rng::{self, Rng};
use condmmd::training::{train, Kernels, KernelsConfig, LossKind, TrainConfig, Trainer};
use condmmd_cli::varbench::{run_varbench, VarbenchConfig, VarbenchTask};
use condmmd_cli::verify::{grad_check_worst, Estimators, GRAD_TOL};
use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, LogNormal, Normal};

type Outcome = condmmd::Result<(bool, String)>;

const EXACT_TOL: f64 = 1e-12;

fn instances() -> Vec<DiscreteInstance> {
    let mut r = rng::seeded(2024);
    let mut out: Vec<DiscreteInstance> = (0..8).map(|_| DiscreteInstance::random(&mut r, 2, 2)).collect();
    assert!(out.iter().all(|i| i.p_joint().len() <= 4 && i.q_joint().len() <= 4));
    // make sure both single-x and two-x shapes are present
    if out.iter().all(|i| i.branches().len() == 2) {
        let b = out[0].branches()[0].clone();
        out.push(DiscreteInstance::single_x(b.x, b.p_cond, b.q_cond).unwrap());
    }
    out
}

fn y_kernels() -> Vec<Kernel> {
    let deep = KernelConfig::Deep {
        bandwidth_sq: Default::default(),
        code_bandwidth_sq: Default::default(),
        epsilon0: 0.1,
        code_dim: 2,
        encoder_seed: 7,
    }
    .build(&[vec![0.0]])
    .unwrap();
    vec![Kernel::standard_gaussian(), Kernel::gaussian(0.4).unwrap(), deep]
}

fn sizes(n: usize, m: usize, r: usize) -> SampleSizes {
    SampleSizes { n, m, r }
}

fn unbiasedness() -> Outcome {
    let kx = Kernel::standard_gaussian();
    let insts = instances();
    let (mut worst_j, mut worst_a) = (0.0f64, 0.0f64);
    for inst in &insts {
        for ky in y_kernels() {
            let em = exact_metrics(inst, &kx, &ky)?;
            for (m, r) in [(2, 1), (2, 2), (3, 2)] {
                let mo = estimator_moments(inst, EstimatorKind::Jmmd, sizes(1, m, r), &kx, &ky)?;
                worst_j = worst_j.max((mo.mean - (em.jmmd2 - em.c1)).abs());
            }
            for (n, m, r) in [(1, 2, 1), (2, 2, 1), (1, 2, 2), (1, 3, 2)] {
                let mo = estimator_moments(inst, EstimatorKind::Ammd, sizes(n, m, r), &kx, &ky)?;
                worst_a = worst_a.max((mo.mean - (em.ammd2 - em.c0)).abs());
            }
        }
    }
    Ok((
        worst_j < EXACT_TOL && worst_a < EXACT_TOL,
        format!(
            "{} instances: |E[J]-(JMMD2-C1)| {worst_j:.2e}, |E[A]-(AMMD2-C0)| {worst_a:.2e}",
            insts.len()
        ),
    ))
}

fn variance_formulas() -> Outcome {
    let kx = Kernel::standard_gaussian();
    let (mut worst_j, mut worst_a, mut max_k0) = (0.0f64, 0.0f64, 0.0f64);
    for inst in &instances() {
        for ky in y_kernels() {
            for (m, r) in [(2, 1), (2, 2), (3, 2), (2, 3)] {
                let mo = estimator_moments(inst, EstimatorKind::Jmmd, sizes(1, m, r), &kx, &ky)?;
                let cf = closed_form_variance_jmmd(inst, m, r, &kx, &ky)?;
                worst_j = worst_j.max((mo.variance - cf).abs());
            }
            for (n, m, r) in [(1, 2, 1), (2, 2, 1), (1, 2, 2), (1, 3, 2)] {
                let mo = estimator_moments(inst, EstimatorKind::Ammd, sizes(n, m, r), &kx, &ky)?;
                let cf = closed_form_variance_ammd(inst, n, m, r, &ky)?;
                worst_a = worst_a.max((mo.variance - cf.variance).abs());
                max_k0 = max_k0.max(cf.k0);
            }
        }
    }
    Ok((
        worst_j < EXACT_TOL && worst_a < EXACT_TOL && max_k0 > 0.0,
        format!("max |Var - closed form|: jmmd {worst_j:.2e}, ammd {worst_a:.2e} (largest K0 {max_k0:.3e})"),
    ))
}

fn metric_properties() -> Outcome {
    let k = Kernel::standard_gaussian();
    let mut all_zero = true;
    let mut smallest = f64::INFINITY;
    for inst in instances() {
        let matched = DiscreteInstance::new(
            inst.branches()
                .iter()
                .map(|b| Branch {
                    q_cond: b.p_cond.clone(),
                    ..b.clone()
                })
                .collect(),
        )?;
        let em = exact_metrics(&matched, &k, &k)?;
        all_zero &= em.jmmd2 == 0.0 && em.ammd2 == 0.0;
        for i in 0..matched.branches().len() {
            let mut branches = matched.branches().to_vec();
            branches[i].q_cond[0].point[0] += 0.5;
            let em = exact_metrics(&DiscreteInstance::new(branches)?, &k, &k)?;
            smallest = smallest.min(em.jmmd2).min(em.ammd2);
        }
    }
    Ok((
        all_zero && smallest > 1e-4,
        format!("matched instances exactly zero: {all_zero}; smallest value with one differing x {smallest:.3e}"),
    ))
}

fn inequality() -> Outcome {
    let mut r = rng::seeded(77);
    let kx = Kernel::standard_gaussian();
    let mut violations = 0;
    let mut min_slack = f64::INFINITY;
    let mut single = 0.0f64;
    for i in 0..200 {
        let inst = DiscreteInstance::random(&mut r, 3, 3);
        let ky = &y_kernels()[i % 3];
        let c = check_metric_inequalities(&inst, &kx, ky)?;
        let em = exact_metrics(&inst, &kx, ky)?;
        violations += usize::from(em.jmmd2 > em.e_k1xx * em.ammd2 + EXACT_TOL);
        min_slack = min_slack.min(c.slack);
        let b = &inst.branches()[0];
        for bw in [0.5, 1.0, 3.0] {
            let one = DiscreteInstance::single_x(b.x.clone(), b.p_cond.clone(), b.q_cond.clone())?;
            let c = check_metric_inequalities(&one, &Kernel::gaussian(bw)?, ky)?;
            single = single.max(c.slack.abs());
        }
    }
    Ok((
        violations == 0 && single < EXACT_TOL,
        format!(
            "{violations} violations in 200 instances (min slack {min_slack:.2e}); single-x max |slack| {single:.2e}"
        ),
    ))
}

fn points(r: &mut Rng, k: usize, d: usize) -> Vec<Vec<f64>> {
    (0..k)
        .map(|_| (0..d).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect()
}

fn cmmd_equivalence() -> Outcome {
    let lin = Kernel::Linear(LinearKernel);
    let mut r = rng::seeded(31);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (n, m) = (r.random_range(3..=6), r.random_range(3..=6));
        let (dx, dy) = (r.random_range(1..=3), r.random_range(1..=3));
        let lambda = r.random_range(0.01..1.0);
        let data = Batch::new(points(&mut r, n, dx), points(&mut r, n, dy))?;
        let gen = GenBatch::new(points(&mut r, m, dx), vec![], points(&mut r, m, dy))?;
        worst =
            worst.max((cmmd_hat(&lin, &lin, &data, &gen, lambda)? - finite_feature_cmmd(&data, &gen, lambda)?).abs());
    }
    Ok((worst < 1e-8, format!("100 instances, max |gram - feature| {worst:.2e}")))
}

fn gradient_checks() -> Outcome {
    let est = Estimators::default();
    let j = grad_check_worst(&est, EstimatorKind::Jmmd, 20, 101)?;
    let a = grad_check_worst(&est, EstimatorKind::Ammd, 20, 202)?;
    Ok((
        j < GRAD_TOL && a < GRAD_TOL,
        format!("20 configurations each, max relative error: jmmd {j:.2e}, ammd {a:.2e}"),
    ))
}

fn variance_scaling() -> Outcome {
    let main = run_varbench(&VarbenchConfig::default(), 0)?;
    let point = run_varbench(
        &VarbenchConfig {
            task: VarbenchTask::PointMass,
            ..VarbenchConfig::default()
        },
        0,
    )?;
    let vars: Vec<String> = main
        .rows
        .iter()
        .map(|r| format!("{}@{}={:.3e}", r.estimator, r.n, r.emp_var))
        .collect();
    let failed: Vec<&str> = main
        .assertions
        .iter()
        .chain(&point.assertions)
        .filter(|a| !a.passed)
        .map(|a| a.description.as_str())
        .collect();
    Ok((failed.is_empty(), format!("{}; failures: {failed:?}", vars.join(" "))))
}

fn normalized(ds: &Dataset, norm: &NormStats) -> condmmd::Result<Dataset> {
    Dataset::new(
        ds.records()
            .iter()
            .map(|r| Record {
                x: norm.apply_x(&r.x),
                ys: r.ys.iter().map(|y| norm.apply_y(y)).collect(),
            })
            .collect(),
    )
}

fn recovery_for(
    loss: LossKind,
    train_set: &Dataset,
    held: &Dataset,
    truth: &GroundTruth,
) -> condmmd::Result<(bool, String)> {
    let norm = train_set.norm.clone().expect("normalized split");
    let cfg = TrainConfig {
        loss,
        seed: 3,
        ..TrainConfig::default()
    };
    let kernels = Kernels::default();
    let init = Trainer::new(cfg.clone(), kernels.clone(), 1, 1)?.generator;
    let (g, _) = train(&cfg, train_set, &kernels, &mut |_, _| Ok(None))?;
    let (mut mean_err, mut std_err) = (0.0f64, 0.0f64);
    for xr in [-0.8, -0.4, 0.0, 0.4, 0.8] {
        let s = conditional_summaries(&g, &norm.apply_x(&[xr]), 4000, 1, &[])?;
        let mu = (truth.mean(&[xr])[0] - norm.y_mean[0]) / norm.y_std[0];
        let sd = truth.std(&[xr])[0] / norm.y_std[0];
        mean_err = mean_err.max((s.mean[0] - mu).abs());
        std_err = std_err.max((s.std[0] - sd).abs());
    }
    let settings = EvalSettings {
        n_reps: 8,
        ..EvalSettings::default()
    };
    let before = evaluate_model(&init, held, &kernels, &settings, 5)?;
    let after = evaluate_model(&g, held, &kernels, &settings, 5)?;
    let pick = |r: &condmmd::evalreport::MetricReport| match loss {
        LossKind::Ammd => r.ammd_with_c0.expect("several outputs per x").mean,
        _ => r.jmmd_with_c1.expect("always reported").mean,
    };
    let ratio = pick(&after) / pick(&before);
    let name = if loss == LossKind::Ammd { "a-cgm" } else { "j-cgm" };
    Ok((
        mean_err < 0.1 && std_err < 0.1 && ratio < 0.1,
        format!(
            "{name}: max mean error {mean_err:.3}, max std error {std_err:.3}, held-out metric {:.2e} -> {:.2e} (ratio {ratio:.3})",
            pick(&before),
            pick(&after)
        ),
    ))
}

fn end_to_end_recovery() -> Outcome {
    let (ds, truth) = gen_synthetic(&SyntheticSpec::heteroscedastic(4551, 7))?;
    let (train_set, _) = normalize_split(&ds, 0.1, 7)?;
    assert_eq!(train_set.len(), 4096);
    let norm = train_set.norm.clone().expect("normalized split");
    let spec = SyntheticSpec {
        outputs_per_x: 4,
        ..SyntheticSpec::heteroscedastic(1000, 99)
    };
    let held = normalized(&gen_synthetic(&spec)?.0, &norm)?;
    let (ok_j, j) = recovery_for(LossKind::Jmmd, &train_set, &held, &truth)?;
    let (ok_a, a) = recovery_for(LossKind::Ammd, &train_set, &held, &truth)?;
    Ok((ok_j && ok_a, format!("{j}; {a}")))
}

const HOUSING_COLUMNS: [&str; 14] = [
    "CRIM", "ZN", "INDUS", "CHAS", "NOX", "RM", "AGE", "DIS", "RAD", "TAX", "PTRATIO", "B", "LSTAT", "MEDV",
];

/// A 506-row table with the housing schema and plausible marginal ranges.
fn write_housing_like(path: &Path, seed: u64) -> std::io::Result<()> {
    let mut r = rng::seeded(seed);
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(HOUSING_COLUMNS)?;
    let crim = LogNormal::new(-0.7, 1.5).unwrap();
    let dis = LogNormal::new(1.2, 0.5).unwrap();
    let noise = Normal::new(0.0, 1.0).unwrap();
    for _ in 0..506 {
        let rm: f64 = Normal::new(6.3, 0.7).unwrap().sample(&mut r);
        let lstat = (12.6 - 6.0 * (rm - 6.3) + 5.0 * noise.sample(&mut r)).clamp(1.7, 38.0);
        let ptratio = r.random_range(12.6..22.0);
        let nox = r.random_range(0.38..0.87);
        let chas = f64::from(r.random_bool(0.07));
        let sd = 1.5 + 0.15 * lstat;
        let medv = (22.5 + 6.0 * (rm - 6.3) - 0.45 * (lstat - 12.6) - 0.8 * (ptratio - 18.5) - 8.0 * (nox - 0.55)
            + 2.5 * chas
            + sd * noise.sample(&mut r))
        .clamp(5.0, 50.0);
        let row = [
            crim.sample(&mut r),
            if r.random_bool(0.7) {
                0.0
            } else {
                r.random_range(12.5..100.0)
            },
            r.random_range(0.46..27.7),
            chas,
            nox,
            rm,
            r.random_range(2.9..100.0),
            dis.sample(&mut r),
            [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 24.0][r.random_range(0..9)],
            r.random_range(187.0..711.0f64).round(),
            ptratio,
            r.random_range(0.32..396.9),
            lstat,
            medv,
        ];
        w.write_record(row.iter().map(|v| format!("{v:.4}")))?;
    }
    w.flush()
}

fn housing_magnitude() -> Outcome {
    let dir = tempfile::TempDir::new()?;
    let (path, target) = match std::env::var("CONDMMD_UCI_CSV") {
        Ok(p) => (
            PathBuf::from(p),
            std::env::var("CONDMMD_UCI_TARGET").unwrap_or_else(|_| "MEDV".into()),
        ),
        Err(_) => {
            let p = dir.path().join("housing.csv");
            write_housing_like(&p, 506)?;
            (p, "MEDV".into())
        }
    };
    let ds = load_csv(&path, &[TargetColumn::Name(target)], true)?;
    let (train_set, test) = normalize_split(&ds, 0.1, 0)?;
    // two hidden layers of 32 ReLUs, Adam at 5e-4, ten uniform noise inputs
    let cfg = TrainConfig {
        loss: LossKind::Jmmd,
        hidden: vec![32, 32],
        lr: 5e-4,
        xi_dim: 10,
        seed: 0,
        ..TrainConfig::default()
    };
    let kernels = Kernels::default();
    let init = Trainer::new(cfg.clone(), kernels.clone(), train_set.x_dim(), train_set.y_dim())?.generator;
    let (g, _) = train(&cfg, &train_set, &kernels, &mut |_, _| Ok(None))?;
    let settings = EvalSettings {
        n_reps: 32,
        ..EvalSettings::default()
    };
    let median = KernelConfig::Gaussian {
        bandwidth_sq: Bandwidth::Named(BandwidthRule::Median),
    };
    let eval_kernels = KernelsConfig {
        x: median.clone(),
        y: median,
    }
    .build(&train_set)?;
    let full = |g: &MlpGenerator, k: &Kernels| -> condmmd::Result<MetricValue> {
        Ok(evaluate_model(g, &test, k, &settings, 1)?
            .jmmd_with_c1
            .expect("always reported"))
    };
    let (before, after) = (full(&init, &eval_kernels)?, full(&g, &eval_kernels)?);
    let (unit_before, unit_after) = (full(&init, &kernels)?, full(&g, &kernels)?);
    let upper = after.mean + 2.0 * after.stderr;
    Ok((
        upper * 10.0 <= before.mean,
        format!(
            "{} ({} train / {} test rows), median-bandwidth jmmd: untrained {:.3e}, trained {:.3e} +- {:.1e} \
             (upper bound {upper:.2e}); unit bandwidth: {:.2e} vs {:.2e}",
            path.file_name().unwrap().to_string_lossy(),
            train_set.len(),
            test.len(),
            before.mean,
            after.mean,
            after.stderr,
            unit_before.mean,
            unit_after.mean,
        ),
    ))
}

fn fid_closed_form() -> Outcome {
    let mut r = rng::seeded(9);
    let g1 =
        |mu: f64, sd: f64| GaussianMoments::new(DVector::from_element(1, mu), DMatrix::from_element(1, 1, sd * sd));
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let (m1, m2) = (r.random_range(-5.0..5.0), r.random_range(-5.0..5.0));
        let (s1, s2) = (r.random_range(0.05..4.0), r.random_range(0.05..4.0));
        let f = frechet_gaussian(&g1(m1, s1)?, &g1(m2, s2)?)?;
        worst = worst.max((f - ((m1 - m2).powi(2) + (s1 - s2).powi(2))).abs());
    }
    let samples: Vec<Vec<f64>> = points(&mut r, 500, 3);
    let a = GaussianMoments::from_samples(&samples)?;
    let b = GaussianMoments::from_samples(&samples)?;
    let self_distance = frechet_gaussian(&a, &b)?;
    Ok((
        worst < 1e-10 && self_distance == 0.0,
        format!("200 1-d pairs, max error {worst:.2e}; FID(a, a) = {self_distance}"),
    ))
}

struct Criterion {
    name: &'static str,
    run: fn() -> Outcome,
    budget: Option<Duration>,
}

fn main() {
    let criteria = [
        Criterion {
            name: "unbiasedness",
            run: unbiasedness,
            budget: Some(Duration::from_secs(10)),
        },
        Criterion {
            name: "variance formulas",
            run: variance_formulas,
            budget: Some(Duration::from_secs(30)),
        },
        Criterion {
            name: "metric properties",
            run: metric_properties,
            budget: None,
        },
        Criterion {
            name: "jmmd/ammd inequality",
            run: inequality,
            budget: None,
        },
        Criterion {
            name: "cmmd estimator",
            run: cmmd_equivalence,
            budget: None,
        },
        Criterion {
            name: "gradient checks",
            run: gradient_checks,
            budget: None,
        },
        Criterion {
            name: "variance scaling",
            run: variance_scaling,
            budget: Some(Duration::from_secs(300)),
        },
        Criterion {
            name: "end-to-end recovery",
            run: end_to_end_recovery,
            budget: Some(Duration::from_secs(600)),
        },
        Criterion {
            name: "housing magnitude",
            run: housing_magnitude,
            budget: None,
        },
        Criterion {
            name: "fid closed form",
            run: fid_closed_form,
            budget: None,
        },
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failures = 0;
    let mut ran = 0;
    for c in &criteria {
        if !filter.is_empty() && !filter.iter().any(|f| c.name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let (passed, detail) = match (c.run)() {
            Ok(v) => v,
            Err(e) => (false, format!("error: {e}")),
        };
        let elapsed = start.elapsed();
        let in_budget = c.budget.is_none_or(|b| elapsed <= b);
        let ok = passed && in_budget;
        failures += usize::from(!ok);
        let budget = c
            .budget
            .map(|b| format!(" of {}s budget", b.as_secs()))
            .unwrap_or_default();
        println!(
            "[{}] {}: {detail} ({:.1}s{budget})",
            if ok { "PASS" } else { "FAIL" },
            c.name,
            elapsed.as_secs_f64()
        );
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
