//! The oracle verification battery behind `condmmd verify`.
//!
//! Every estimator-dependent check goes through an [`Estimators`] table, so a
//! deliberately broken implementation can be swapped in (see [`Mutation`]) to
//! confirm that the battery notices.

use std::io::Write;
use std::time::Instant;

use condmmd::estimators::{
    ammd_hat, cmmd_hat, jmmd_hat, mmd2_unbiased, Batch, EstimateWithGrad, EstimatorKind, GenBatch, Group, GroupedBatch,
    SampleSizes,
};
use condmmd::evalreport::{frechet_gaussian, GaussianMoments};
use condmmd::kernels::{Kernel, LinearKernel};
use condmmd::nn::{grad_check, LossEval, Mlp};
use condmmd::oracle::{
    check_metric_inequalities, closed_form_variance_ammd, closed_form_variance_jmmd, estimator_moments_with,
    exact_metrics, finite_feature_cmmd, Branch, DiscreteInstance, SampleTuple,
};
use condmmd::rng::{self, derive_seed, Rng};
use condmmd::Result;
use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{CliError, CliResult};

pub type JmmdFn = fn(&Kernel, &Kernel, &Batch, &GenBatch) -> Result<EstimateWithGrad>;
pub type AmmdFn = fn(&Kernel, &GroupedBatch) -> Result<EstimateWithGrad>;
pub type MmdFn = fn(&Kernel, &[Vec<f64>], &[Vec<f64>]) -> Result<f64>;

/// The estimator implementations under test.
#[derive(Clone, Copy)]
pub struct Estimators {
    pub jmmd: JmmdFn,
    pub ammd: AmmdFn,
    pub mmd: MmdFn,
}

impl Default for Estimators {
    fn default() -> Self {
        Self {
            jmmd: jmmd_hat,
            ammd: ammd_hat,
            mmd: mmd2_unbiased,
        }
    }
}

/// Known-bad estimator variants for mutation testing the battery itself.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mutation {
    /// Negates the joint estimator's value and gradient.
    JmmdSign,
    /// Negates the grouped estimator's value and gradient.
    AmmdSign,
}

impl std::str::FromStr for Mutation {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "jmmd-sign" => Ok(Mutation::JmmdSign),
            "ammd-sign" => Ok(Mutation::AmmdSign),
            _ => Err(format!("unknown mutation {s:?} (expected jmmd-sign or ammd-sign)")),
        }
    }
}

fn negate(mut e: EstimateWithGrad) -> EstimateWithGrad {
    e.value = -e.value;
    e.grads_wrt_generated.iter_mut().flatten().for_each(|g| *g = -*g);
    e
}

fn jmmd_negated(kx: &Kernel, ky: &Kernel, data: &Batch, gen: &GenBatch) -> Result<EstimateWithGrad> {
    jmmd_hat(kx, ky, data, gen).map(negate)
}

fn ammd_negated(ky: &Kernel, b: &GroupedBatch) -> Result<EstimateWithGrad> {
    ammd_hat(ky, b).map(negate)
}

impl Estimators {
    pub fn mutated(m: Mutation) -> Self {
        let mut e = Self::default();
        match m {
            Mutation::JmmdSign => e.jmmd = jmmd_negated,
            Mutation::AmmdSign => e.ammd = ammd_negated,
        }
        e
    }
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Tolerance for every exact-arithmetic comparison against enumeration.
pub const ORACLE_TOL: f64 = 1e-12;
pub const CMMD_TOL: f64 = 1e-8;
pub const GRAD_TOL: f64 = 1e-4;
pub const FID_TOL: f64 = 1e-10;
/// Margin by which an instance with differing conditionals must be detected.
pub const SEPARATION: f64 = 1e-4;

const INSTANCES: usize = 6;
const INEQUALITY_INSTANCES: usize = 200;
const GRAD_CONFIGS: usize = 10;
const MAX_KINK_RESAMPLES: usize = 50;

/// Random discrete instances with at most two x values and two outputs per
/// conditional, so every joint support has at most four points.
pub fn instances(seed: u64, count: usize) -> Vec<DiscreteInstance> {
    let mut r = rng::seeded(seed);
    (0..count).map(|_| DiscreteInstance::random(&mut r, 2, 2)).collect()
}

fn kernel_pair(i: usize) -> (Kernel, Kernel) {
    let ky = if i.is_multiple_of(2) {
        Kernel::standard_gaussian()
    } else {
        Kernel::gaussian(0.3).expect("positive bandwidth")
    };
    (Kernel::standard_gaussian(), ky)
}

fn moments(
    est: &Estimators,
    inst: &DiscreteInstance,
    kind: EstimatorKind,
    sizes: SampleSizes,
    kx: &Kernel,
    ky: &Kernel,
) -> Result<condmmd::oracle::Moments> {
    estimator_moments_with(inst, kind, sizes, &mut |t| match t {
        SampleTuple::Marginal { ys, yhats } => (est.mmd)(ky, ys, yhats),
        SampleTuple::Joint { data, gen } => Ok((est.jmmd)(kx, ky, data, gen)?.value),
        SampleTuple::Grouped(b) => Ok((est.ammd)(ky, b)?.value),
    })
}

/// Largest deviation over instances and size grids; `f` returns `(got, want)`.
fn max_deviation(
    insts: &[DiscreteInstance],
    grid: &[SampleSizes],
    mut f: impl FnMut(&DiscreteInstance, SampleSizes, &Kernel, &Kernel) -> Result<(f64, f64)>,
) -> Result<f64> {
    let mut worst = 0.0f64;
    for (i, inst) in insts.iter().enumerate() {
        let (kx, ky) = kernel_pair(i);
        for &s in grid {
            let (got, want) = f(inst, s, &kx, &ky)?;
            worst = worst.max((got - want).abs());
            if !got.is_finite() {
                worst = f64::INFINITY;
            }
        }
    }
    Ok(worst)
}

fn sizes(n: usize, m: usize, r: usize) -> SampleSizes {
    SampleSizes { n, m, r }
}

fn tolerance_check(name: &'static str, dev: Result<f64>, tol: f64) -> CheckResult {
    labelled_check(name, "max deviation", dev, tol)
}

fn labelled_check(name: &'static str, label: &str, dev: Result<f64>, tol: f64) -> CheckResult {
    match dev {
        Ok(d) => CheckResult {
            name,
            passed: d <= tol,
            detail: format!("{label} {d:.3e} (tolerance {tol:.0e})"),
        },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

pub fn check_jmmd_unbiased(est: &Estimators, insts: &[DiscreteInstance]) -> CheckResult {
    let grid = [sizes(1, 2, 1), sizes(1, 2, 2), sizes(1, 3, 2)];
    let dev = max_deviation(insts, &grid, |inst, s, kx, ky| {
        let em = exact_metrics(inst, kx, ky)?;
        Ok((
            moments(est, inst, EstimatorKind::Jmmd, s, kx, ky)?.mean,
            em.jmmd2 - em.c1,
        ))
    });
    tolerance_check("jmmd estimator is unbiased", dev, ORACLE_TOL)
}

pub fn check_ammd_unbiased(est: &Estimators, insts: &[DiscreteInstance]) -> CheckResult {
    let grid = [sizes(1, 2, 1), sizes(2, 2, 1), sizes(1, 2, 2)];
    let dev = max_deviation(insts, &grid, |inst, s, kx, ky| {
        let em = exact_metrics(inst, kx, ky)?;
        Ok((
            moments(est, inst, EstimatorKind::Ammd, s, kx, ky)?.mean,
            em.ammd2 - em.c0,
        ))
    });
    tolerance_check("ammd estimator is unbiased", dev, ORACLE_TOL)
}

pub fn check_mmd_unbiased(est: &Estimators, insts: &[DiscreteInstance]) -> CheckResult {
    let grid = [sizes(2, 2, 1), sizes(3, 2, 1)];
    let dev = max_deviation(insts, &grid, |inst, s, kx, ky| {
        let em = exact_metrics(inst, kx, ky)?;
        Ok((
            moments(est, inst, EstimatorKind::Mmd, s, kx, ky)?.mean,
            em.mmd2_marginal_y,
        ))
    });
    tolerance_check("marginal mmd estimator is unbiased", dev, ORACLE_TOL)
}

pub fn check_jmmd_variance(est: &Estimators, insts: &[DiscreteInstance]) -> CheckResult {
    let grid = [sizes(1, 2, 1), sizes(1, 2, 2), sizes(1, 3, 2)];
    let dev = max_deviation(insts, &grid, |inst, s, kx, ky| {
        let got = moments(est, inst, EstimatorKind::Jmmd, s, kx, ky)?.variance;
        Ok((got, closed_form_variance_jmmd(inst, s.m, s.r, kx, ky)?))
    });
    tolerance_check("jmmd variance matches closed form", dev, ORACLE_TOL)
}

pub fn check_ammd_variance(est: &Estimators, insts: &[DiscreteInstance]) -> CheckResult {
    let grid = [sizes(1, 2, 2), sizes(2, 2, 1), sizes(1, 3, 1)];
    let dev = max_deviation(insts, &grid, |inst, s, kx, ky| {
        let got = moments(est, inst, EstimatorKind::Ammd, s, kx, ky)?.variance;
        Ok((got, closed_form_variance_ammd(inst, s.n, s.m, s.r, ky)?.variance))
    });
    tolerance_check("ammd variance matches closed form", dev, ORACLE_TOL)
}

/// Copy of `inst` whose generated conditionals equal the observed ones.
pub fn matched(inst: &DiscreteInstance) -> DiscreteInstance {
    let branches = inst
        .branches()
        .iter()
        .map(|b| Branch {
            q_cond: b.p_cond.clone(),
            ..b.clone()
        })
        .collect();
    DiscreteInstance::new(branches).expect("valid instance")
}

pub fn check_metric_zero(insts: &[DiscreteInstance]) -> CheckResult {
    let k = Kernel::standard_gaussian();
    let run = || -> Result<(bool, f64)> {
        let mut zero = true;
        let mut smallest = f64::INFINITY;
        for inst in insts {
            let m = matched(inst);
            let em = exact_metrics(&m, &k, &k)?;
            zero &= em.jmmd2 == 0.0 && em.ammd2 == 0.0;
            // perturb the generated conditional at each x in turn
            for i in 0..m.branches().len() {
                let mut branches = m.branches().to_vec();
                branches[i].q_cond[0].point[0] += 0.5;
                let em = exact_metrics(&DiscreteInstance::new(branches)?, &k, &k)?;
                smallest = smallest.min(em.jmmd2.min(em.ammd2));
            }
        }
        Ok((zero, smallest))
    };
    let name = "metrics vanish exactly iff conditionals match";
    match run() {
        Ok((zero, smallest)) => CheckResult {
            name,
            passed: zero && smallest > SEPARATION,
            detail: format!("matched instances exactly zero: {zero}; smallest mismatched value {smallest:.3e}"),
        },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

pub fn check_inequality(seed: u64) -> CheckResult {
    let k = Kernel::standard_gaussian();
    let run = || -> Result<(usize, f64, f64)> {
        let insts = instances(seed, INEQUALITY_INSTANCES);
        let mut violations = 0;
        let mut min_slack = f64::INFINITY;
        let mut single_slack = 0.0f64;
        for inst in &insts {
            let c = check_metric_inequalities(inst, &k, &k)?;
            violations += usize::from(!c.holds);
            min_slack = min_slack.min(c.slack);
            let b = &inst.branches()[0];
            let single = DiscreteInstance::single_x(b.x.clone(), b.p_cond.clone(), b.q_cond.clone())?;
            single_slack = single_slack.max(check_metric_inequalities(&single, &k, &k)?.slack.abs());
        }
        Ok((violations, min_slack, single_slack))
    };
    let name = "jmmd bounded by ammd, with equality for a single x";
    match run() {
        Ok((v, min_slack, single)) => CheckResult {
            name,
            passed: v == 0 && single < ORACLE_TOL,
            detail: format!(
                "{v} violations in {INEQUALITY_INSTANCES} instances (min slack {min_slack:.3e}); \
                 single-x |slack| {single:.3e}"
            ),
        },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn uniform_points(r: &mut Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| (0..dim).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect()
}

fn normal_points(r: &mut Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(r)).collect())
        .collect()
}

pub fn check_cmmd_finite_feature(seed: u64) -> CheckResult {
    let lin = Kernel::Linear(LinearKernel);
    let run = || -> Result<f64> {
        let mut r = rng::seeded(seed);
        let mut worst = 0.0f64;
        for _ in 0..20 {
            let (n, m) = (r.random_range(3..=6), r.random_range(3..=6));
            let (dx, dy) = (r.random_range(1..=3), r.random_range(1..=3));
            let lambda = r.random_range(0.01..0.5);
            let data = Batch::new(uniform_points(&mut r, n, dx), uniform_points(&mut r, n, dy))?;
            let gen = GenBatch::new(uniform_points(&mut r, m, dx), vec![], uniform_points(&mut r, m, dy))?;
            let a = cmmd_hat(&lin, &lin, &data, &gen, lambda)?;
            let b = finite_feature_cmmd(&data, &gen, lambda)?;
            worst = worst.max((a - b).abs());
        }
        Ok(worst)
    };
    tolerance_check("cmmd gram expansion matches feature operators", run(), CMMD_TOL)
}

/// One random gradient-check configuration through a ReLU MLP.
#[derive(Clone, Debug)]
pub struct GradConfig {
    pub kind: EstimatorKind,
    pub net: Mlp,
    pub x_dim: usize,
    pub kx: Kernel,
    pub ky: Kernel,
    pub data_xs: Vec<Vec<f64>>,
    pub data_ys: Vec<Vec<f64>>,
    /// Generator inputs `[x ; ξ]`; grouped batches are group-major.
    pub inputs: Vec<Vec<f64>>,
    /// Group count for the grouped estimator (1 for the joint one).
    pub groups: usize,
    /// Observed outputs per group, or observed pairs for the joint estimator.
    pub r: usize,
    /// Generated outputs per group, or generated pairs for the joint estimator.
    pub m: usize,
}

impl GradConfig {
    pub fn random(kind: EstimatorKind, r: &mut Rng) -> Result<Self> {
        let x_dim = r.random_range(1..=2);
        let xi_dim = r.random_range(1..=3);
        let y_dim = r.random_range(1..=2);
        let mut dims = vec![x_dim + xi_dim];
        for _ in 0..r.random_range(1..=2) {
            dims.push(r.random_range(3..=8));
        }
        dims.push(y_dim);
        let net = Mlp::new(&dims, r.random())?;
        let kx = Kernel::gaussian(r.random_range(0.5..2.0))?;
        let ky = Kernel::gaussian(r.random_range(0.5..2.0))?;
        let with_noise = |x: &[f64], r: &mut Rng| -> Vec<f64> {
            x.iter()
                .copied()
                .chain((0..xi_dim).map(|_| r.random_range(-1.0..1.0)))
                .collect()
        };
        match kind {
            EstimatorKind::Ammd => {
                let groups = r.random_range(2..=4);
                let (rr, m) = (r.random_range(1..=3), r.random_range(2..=4));
                let data_xs = normal_points(r, groups, x_dim);
                let data_ys = normal_points(r, groups * rr, y_dim);
                let inputs = data_xs
                    .iter()
                    .flat_map(|x| std::iter::repeat_n(x, m))
                    .map(|x| with_noise(x, r))
                    .collect();
                Ok(Self {
                    kind,
                    net,
                    x_dim,
                    kx,
                    ky,
                    data_xs,
                    data_ys,
                    inputs,
                    groups,
                    r: rr,
                    m,
                })
            }
            _ => {
                let (rr, m) = (r.random_range(2..=5), r.random_range(2..=5));
                let data_xs = normal_points(r, rr, x_dim);
                let data_ys = normal_points(r, rr, y_dim);
                let gen_xs = normal_points(r, m, x_dim);
                let inputs = gen_xs.iter().map(|x| with_noise(x, r)).collect();
                Ok(Self {
                    kind: EstimatorKind::Jmmd,
                    net,
                    x_dim,
                    kx,
                    ky,
                    data_xs,
                    data_ys,
                    inputs,
                    groups: 1,
                    r: rr,
                    m,
                })
            }
        }
    }

    /// Estimator value and parameter gradient at `net`.
    pub fn loss(&self, est: &Estimators, net: &Mlp) -> Result<LossEval> {
        let (yhats, cache) = net.forward_batch(&self.inputs)?;
        let e = match self.kind {
            EstimatorKind::Ammd => {
                let groups = (0..self.groups)
                    .map(|g| Group {
                        x: self.data_xs[g].clone(),
                        ys: self.data_ys[g * self.r..(g + 1) * self.r].to_vec(),
                        yhats: yhats[g * self.m..(g + 1) * self.m].to_vec(),
                    })
                    .collect();
                (est.ammd)(&self.ky, &GroupedBatch::new(groups)?)?
            }
            _ => {
                let data = Batch::new(self.data_xs.clone(), self.data_ys.clone())?;
                let gen_xs = self.inputs.iter().map(|v| v[..self.x_dim].to_vec()).collect();
                let gen = GenBatch::new(gen_xs, vec![], yhats)?;
                (est.jmmd)(&self.kx, &self.ky, &data, &gen)?
            }
        };
        Ok(LossEval {
            value: e.value,
            grad: net.backward(&cache, &e.grads_wrt_generated)?,
            min_abs_preactivation: cache.min_abs_preactivation,
            activation_signature: cache.activation_signature(),
        })
    }
}

/// Worst relative error over `configs` random configurations, re-sampling any
/// configuration that sits on a ReLU kink.
pub fn grad_check_worst(est: &Estimators, kind: EstimatorKind, configs: usize, seed: u64) -> Result<f64> {
    let mut r = rng::seeded(seed);
    let mut worst = 0.0f64;
    for _ in 0..configs {
        let mut attempts = 0;
        let report = loop {
            let cfg = GradConfig::random(kind, &mut r)?;
            let rep = grad_check(&cfg.net, |net| cfg.loss(est, net), GRAD_TOL)?;
            attempts += 1;
            if !rep.near_kink || attempts >= MAX_KINK_RESAMPLES {
                break rep;
            }
        };
        if report.near_kink {
            return Err(condmmd::Error::Numeric(
                "could not find a configuration away from ReLU kinks".into(),
            ));
        }
        worst = worst.max(report.max_rel_error);
    }
    Ok(worst)
}

pub fn check_gradients(est: &Estimators, kind: EstimatorKind, seed: u64) -> CheckResult {
    let name = match kind {
        EstimatorKind::Ammd => "ammd gradients through the generator",
        _ => "jmmd gradients through the generator",
    };
    let worst = grad_check_worst(est, kind, GRAD_CONFIGS, seed);
    labelled_check(name, "max relative error", worst, GRAD_TOL)
}

pub fn check_fid_closed_form(seed: u64) -> CheckResult {
    let run = || -> Result<f64> {
        let mut r = rng::seeded(seed);
        let g1 =
            |mu: f64, sd: f64| GaussianMoments::new(DVector::from_element(1, mu), DMatrix::from_element(1, 1, sd * sd));
        let mut worst = 0.0f64;
        for _ in 0..50 {
            let (m1, m2) = (r.random_range(-3.0..3.0), r.random_range(-3.0..3.0));
            let (s1, s2) = (r.random_range(0.1..3.0), r.random_range(0.1..3.0));
            let (a, b) = (g1(m1, s1)?, g1(m2, s2)?);
            let want = (m1 - m2).powi(2) + (s1 - s2).powi(2);
            worst = worst.max((frechet_gaussian(&a, &b)? - want).abs());
            worst = worst.max(frechet_gaussian(&a, &a)?.abs());
        }
        Ok(worst)
    };
    tolerance_check("fid matches the 1-d closed form", run(), FID_TOL)
}

/// Runs every check in order, streaming one line per check to `out`.
pub fn run_battery(est: &Estimators, seed: u64, out: &mut dyn Write) -> Vec<CheckResult> {
    let insts = instances(derive_seed(seed, 1), INSTANCES);
    type Check<'a> = Box<dyn Fn() -> CheckResult + 'a>;
    let checks: Vec<Check> = vec![
        Box::new(|| check_jmmd_unbiased(est, &insts)),
        Box::new(|| check_ammd_unbiased(est, &insts)),
        Box::new(|| check_mmd_unbiased(est, &insts)),
        Box::new(|| check_jmmd_variance(est, &insts)),
        Box::new(|| check_ammd_variance(est, &insts)),
        Box::new(|| check_metric_zero(&insts)),
        Box::new(|| check_inequality(derive_seed(seed, 2))),
        Box::new(|| check_cmmd_finite_feature(derive_seed(seed, 3))),
        Box::new(|| check_gradients(est, EstimatorKind::Jmmd, derive_seed(seed, 4))),
        Box::new(|| check_gradients(est, EstimatorKind::Ammd, derive_seed(seed, 5))),
        Box::new(|| check_fid_closed_form(derive_seed(seed, 6))),
    ];
    let mut results = Vec::with_capacity(checks.len());
    for check in checks {
        let start = Instant::now();
        let res = check();
        let _ = writeln!(
            out,
            "[{}] {} ({}; {:.2}s)",
            if res.passed { "PASS" } else { "FAIL" },
            res.name,
            res.detail,
            start.elapsed().as_secs_f64()
        );
        results.push(res);
    }
    results
}

/// `condmmd verify`: succeeds iff every check passes.
pub fn cmd_verify(mutation: Option<Mutation>, seed: u64, out: &mut dyn Write) -> CliResult<Vec<CheckResult>> {
    let est = mutation.map(Estimators::mutated).unwrap_or_default();
    if let Some(m) = mutation {
        let _ = writeln!(out, "running with mutation {m:?}; failures are expected");
    }
    let results = run_battery(&est, seed, out);
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name.to_string())
        .collect();
    let _ = writeln!(
        out,
        "{} of {} checks passed",
        results.len() - failed.len(),
        results.len()
    );
    if failed.is_empty() {
        Ok(results)
    } else {
        Err(CliError::ChecksFailed(failed))
    }
}
