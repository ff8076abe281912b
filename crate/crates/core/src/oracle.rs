//! Exact computations on finite discrete instances.
//!
//! Everything here is brute force: population metrics are weighted double
//! sums over the supports, estimator moments enumerate every sample tuple and
//! call the production estimators on it, and the closed-form variances
//! evaluate the explicit second-moment expansion term by term. The finite
//! feature CMMD reference builds the conditional-embedding operators as
//! literal matrices for linear kernels.

use nalgebra::DMatrix;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};
use crate::estimators::{
    ammd_value, jmmd_value, mmd2_unbiased, Batch, EstimatorKind, GenBatch, Group, GroupedBatch, SampleSizes,
};
use crate::kernels::Kernel;
use crate::linalg::KahanSum;

/// Largest total support size accepted by the exact routines.
pub const MAX_SUPPORT: usize = 64;
/// Largest number of sample tuples [`estimator_moments`] will enumerate.
pub const MAX_ENUMERATION: u64 = 10_000_000;

const PROB_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedPoint {
    pub point: Vec<f64>,
    pub prob: f64,
}

impl WeightedPoint {
    pub fn new(point: Vec<f64>, prob: f64) -> Self {
        Self { point, prob }
    }
}

/// One support point of the shared `P_X` with its two conditionals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub x: Vec<f64>,
    pub prob: f64,
    /// Data conditional `P_{Y|X=x}`.
    pub p_cond: Vec<WeightedPoint>,
    /// Generator conditional `Q_{Y|X=x}`.
    pub q_cond: Vec<WeightedPoint>,
}

/// Finite-support pair of joint distributions with a shared X-marginal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteInstance {
    branches: Vec<Branch>,
}

fn check_distribution(points: &[WeightedPoint], what: &str) -> Result<()> {
    if points.is_empty() {
        return invalid(format!("{what}: empty support"));
    }
    let mut total = KahanSum::new();
    for p in points {
        if !(p.prob >= 0.0) {
            return invalid(format!("{what}: negative probability {}", p.prob));
        }
        total.add(p.prob);
    }
    if (total.value() - 1.0).abs() > PROB_TOLERANCE {
        return invalid(format!("{what}: probabilities sum to {}", total.value()));
    }
    Ok(())
}

impl DiscreteInstance {
    pub fn new(branches: Vec<Branch>) -> Result<Self> {
        let Some(first) = branches.first() else {
            return invalid("instance has no x support");
        };
        let dx = first.x.len();
        let dy = first.p_cond[0].point.len();
        let mut total = KahanSum::new();
        for (i, b) in branches.iter().enumerate() {
            check_dim(dx, b.x.len())?;
            if !(b.prob >= 0.0) {
                return invalid(format!("P_X({i}) is negative"));
            }
            total.add(b.prob);
            check_distribution(&b.p_cond, &format!("P(Y|x{i})"))?;
            check_distribution(&b.q_cond, &format!("Q(Y|x{i})"))?;
            for y in b.p_cond.iter().chain(&b.q_cond) {
                check_dim(dy, y.point.len())?;
            }
        }
        if (total.value() - 1.0).abs() > PROB_TOLERANCE {
            return invalid(format!("P_X sums to {}", total.value()));
        }
        Ok(Self { branches })
    }

    /// Degenerate `X ≡ x` instance.
    pub fn single_x(x: Vec<f64>, p_cond: Vec<WeightedPoint>, q_cond: Vec<WeightedPoint>) -> Result<Self> {
        Self::new(vec![Branch {
            x,
            prob: 1.0,
            p_cond,
            q_cond,
        }])
    }

    /// Random instance with 1-D X and Y, at most `max_x` x-points and at most
    /// `max_y` y-points per conditional. Values are drawn from a small grid so
    /// that coincident support points occur.
    pub fn random(rng: &mut crate::rng::Rng, max_x: usize, max_y: usize) -> Self {
        let nx = rng.random_range(1..=max_x);
        let px = random_simplex(rng, nx);
        let branches = (0..nx)
            .map(|i| {
                let cond = |rng: &mut crate::rng::Rng| {
                    let ny = rng.random_range(1..=max_y);
                    let w = random_simplex(rng, ny);
                    w.into_iter()
                        .map(|p| WeightedPoint::new(vec![rng.random_range(-4i32..=4) as f64 * 0.5], p))
                        .collect::<Vec<_>>()
                };
                Branch {
                    x: vec![i as f64 * rng.random_range(0.3..1.5)],
                    prob: px[i],
                    p_cond: cond(rng),
                    q_cond: cond(rng),
                }
            })
            .collect();
        Self::new(branches).expect("random instance is valid by construction")
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn support_size(&self) -> usize {
        self.branches.iter().map(|b| 1 + b.p_cond.len() + b.q_cond.len()).sum()
    }

    /// Joint support of `P_{X,Y}` as `(x, y, prob)`.
    pub fn p_joint(&self) -> Vec<(Vec<f64>, Vec<f64>, f64)> {
        self.joint(|b| &b.p_cond)
    }

    /// Joint support of `Q_{X,Y}` as `(x, y, prob)`.
    pub fn q_joint(&self) -> Vec<(Vec<f64>, Vec<f64>, f64)> {
        self.joint(|b| &b.q_cond)
    }

    fn joint(&self, side: impl Fn(&Branch) -> &Vec<WeightedPoint>) -> Vec<(Vec<f64>, Vec<f64>, f64)> {
        self.branches
            .iter()
            .flat_map(|b| {
                side(b)
                    .iter()
                    .map(move |y| (b.x.clone(), y.point.clone(), b.prob * y.prob))
            })
            .collect()
    }

    fn guard(&self) -> Result<()> {
        if self.support_size() > MAX_SUPPORT {
            return invalid(format!(
                "instance support {} exceeds the exact-computation limit {MAX_SUPPORT}",
                self.support_size()
            ));
        }
        Ok(())
    }
}

fn random_simplex(rng: &mut crate::rng::Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let mut w: Vec<f64> = raw.iter().map(|v| v / total).collect();
    // absorb rounding so the weights sum to one within tolerance
    let s: f64 = w[..n - 1].iter().sum();
    w[n - 1] = 1.0 - s;
    w
}

/// `E[k(A, B)]` for independent `A ~ a`, `B ~ b` given as weighted points.
fn cross_expectation<T>(a: &[(T, f64)], b: &[(T, f64)], k: &impl Fn(&T, &T) -> f64) -> f64 {
    let mut s = KahanSum::new();
    for (pa, wa) in a {
        for (pb, wb) in b {
            s.add(wa * wb * k(pa, pb));
        }
    }
    s.value()
}

/// Population quantities of an instance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExactMetrics {
    pub mmd2_marginal_y: f64,
    pub jmmd2: f64,
    pub ammd2: f64,
    pub c0: f64,
    pub c1: f64,
    pub e_k1xx: f64,
    /// `E[k₂(Y₁, Y₂)]` for unconditionally independent `Y₁, Y₂ ~ P_Y`.
    pub e_k2_marginal: f64,
}

type Joint = Vec<((Vec<f64>, Vec<f64>), f64)>;

fn weighted_joint(v: Vec<(Vec<f64>, Vec<f64>, f64)>) -> Joint {
    v.into_iter().map(|(x, y, p)| ((x, y), p)).collect()
}

fn weighted(points: &[WeightedPoint]) -> Vec<(Vec<f64>, f64)> {
    points.iter().map(|w| (w.point.clone(), w.prob)).collect()
}

/// Squared discrepancy `E_aa − 2E_ab + E_bb`, grouped so equal inputs give exactly zero.
fn discrepancy(aa: f64, ab: f64, bb: f64) -> f64 {
    (aa - ab) + (bb - ab)
}

pub fn exact_metrics(inst: &DiscreteInstance, kx: &Kernel, ky: &Kernel) -> Result<ExactMetrics> {
    inst.guard()?;
    let k3 = |a: &(Vec<f64>, Vec<f64>), b: &(Vec<f64>, Vec<f64>)| kx.value(&a.0, &b.0) * ky.value(&a.1, &b.1);
    let k2 = |a: &Vec<f64>, b: &Vec<f64>| ky.value(a, b);

    let p = weighted_joint(inst.p_joint());
    let q = weighted_joint(inst.q_joint());
    let c1 = cross_expectation(&p, &p, &k3);
    let jmmd2 = discrepancy(c1, cross_expectation(&p, &q, &k3), cross_expectation(&q, &q, &k3));

    let py: Vec<(Vec<f64>, f64)> = p.iter().map(|((_, y), w)| (y.clone(), *w)).collect();
    let qy: Vec<(Vec<f64>, f64)> = q.iter().map(|((_, y), w)| (y.clone(), *w)).collect();
    let e_k2_marginal = cross_expectation(&py, &py, &k2);
    let mmd2_marginal_y = discrepancy(
        e_k2_marginal,
        cross_expectation(&py, &qy, &k2),
        cross_expectation(&qy, &qy, &k2),
    );

    let mut ammd2 = KahanSum::new();
    let mut c0 = KahanSum::new();
    let mut e_k1xx = KahanSum::new();
    for b in inst.branches() {
        let pc = weighted(&b.p_cond);
        let qc = weighted(&b.q_cond);
        let pp = cross_expectation(&pc, &pc, &k2);
        let mmd_x = discrepancy(pp, cross_expectation(&pc, &qc, &k2), cross_expectation(&qc, &qc, &k2));
        ammd2.add(b.prob * mmd_x);
        c0.add(b.prob * pp);
        e_k1xx.add(b.prob * kx.value(&b.x, &b.x));
    }
    Ok(ExactMetrics {
        mmd2_marginal_y,
        jmmd2,
        ammd2: ammd2.value(),
        c0: c0.value(),
        c1,
        e_k1xx: e_k1xx.value(),
        e_k2_marginal,
    })
}

/// Mean and variance of an estimator as a random variable.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub variance: f64,
}

/// Calls `f(indices)` for every tuple in the mixed-radix product space.
fn for_each_tuple(radices: &[usize], mut f: impl FnMut(&[usize]) -> Result<()>) -> Result<()> {
    let mut idx = vec![0usize; radices.len()];
    if radices.contains(&0) {
        return Ok(());
    }
    loop {
        f(&idx)?;
        let mut pos = 0;
        loop {
            if pos == idx.len() {
                return Ok(());
            }
            idx[pos] += 1;
            if idx[pos] < radices[pos] {
                break;
            }
            idx[pos] = 0;
            pos += 1;
        }
    }
}

fn enumeration_size(radices: &[usize]) -> Result<u64> {
    let mut total: u64 = 1;
    for &r in radices {
        total = total.saturating_mul(r as u64);
        if total > MAX_ENUMERATION {
            return invalid(format!("enumeration exceeds {MAX_ENUMERATION} sample tuples"));
        }
    }
    Ok(total)
}

fn moments_of(samples: &[(f64, f64)]) -> Moments {
    let mean: KahanSum = samples.iter().map(|(v, w)| v * w).collect();
    let mean = mean.value();
    let var: KahanSum = samples.iter().map(|(v, w)| w * (v - mean) * (v - mean)).collect();
    Moments {
        mean,
        variance: var.value(),
    }
}

/// Exact mean and variance of an estimator over every possible sample tuple.
///
/// * `Mmd`: `n` draws from `P_Y`, `m` from `Q_Y`, statistic [`mmd2_unbiased`].
/// * `Jmmd`: `r` joint draws from `P`, `m` from `Q`, statistic [`jmmd_value`].
/// * `Ammd`: `n` groups, each drawing `x ~ P_X` then `r` outputs from
///   `P_{Y|x}` and `m` from `Q_{Y|x}` conditionally independently; statistic
///   [`ammd_value`].
pub fn estimator_moments(
    inst: &DiscreteInstance,
    which: EstimatorKind,
    sizes: SampleSizes,
    kx: &Kernel,
    ky: &Kernel,
) -> Result<Moments> {
    estimator_moments_with(inst, which, sizes, &mut |t| match t {
        SampleTuple::Marginal { ys, yhats } => mmd2_unbiased(ky, ys, yhats),
        SampleTuple::Joint { data, gen } => jmmd_value(kx, ky, data, gen),
        SampleTuple::Grouped(b) => ammd_value(ky, b),
    })
}

/// One enumerated sample handed to the statistic in [`estimator_moments_with`].
pub enum SampleTuple<'a> {
    Marginal { ys: &'a [Vec<f64>], yhats: &'a [Vec<f64>] },
    Joint { data: &'a Batch, gen: &'a GenBatch },
    Grouped(&'a GroupedBatch),
}

/// Like [`estimator_moments`] but with a caller-supplied statistic, so that
/// alternative estimator implementations can be checked against the same
/// enumeration.
pub fn estimator_moments_with(
    inst: &DiscreteInstance,
    which: EstimatorKind,
    sizes: SampleSizes,
    stat: &mut dyn FnMut(SampleTuple<'_>) -> Result<f64>,
) -> Result<Moments> {
    inst.guard()?;
    let SampleSizes { n, m, r } = sizes;
    let p = inst.p_joint();
    let q = inst.q_joint();
    let mut samples = Vec::new();
    match which {
        EstimatorKind::Mmd => {
            let radices: Vec<usize> = std::iter::repeat_n(p.len(), n)
                .chain(std::iter::repeat_n(q.len(), m))
                .collect();
            enumeration_size(&radices)?;
            for_each_tuple(&radices, |idx| {
                let (di, gi) = idx.split_at(n);
                let ys: Vec<Vec<f64>> = di.iter().map(|&i| p[i].1.clone()).collect();
                let yh: Vec<Vec<f64>> = gi.iter().map(|&i| q[i].1.clone()).collect();
                let w = di
                    .iter()
                    .map(|&i| p[i].2)
                    .chain(gi.iter().map(|&i| q[i].2))
                    .product::<f64>();
                samples.push((stat(SampleTuple::Marginal { ys: &ys, yhats: &yh })?, w));
                Ok(())
            })?;
        }
        EstimatorKind::Jmmd => {
            let radices: Vec<usize> = std::iter::repeat_n(p.len(), r)
                .chain(std::iter::repeat_n(q.len(), m))
                .collect();
            enumeration_size(&radices)?;
            for_each_tuple(&radices, |idx| {
                let (di, gi) = idx.split_at(r);
                let data = Batch::new(
                    di.iter().map(|&i| p[i].0.clone()).collect(),
                    di.iter().map(|&i| p[i].1.clone()).collect(),
                )?;
                let gen = GenBatch::new(
                    gi.iter().map(|&i| q[i].0.clone()).collect(),
                    vec![],
                    gi.iter().map(|&i| q[i].1.clone()).collect(),
                )?;
                let w = di
                    .iter()
                    .map(|&i| p[i].2)
                    .chain(gi.iter().map(|&i| q[i].2))
                    .product::<f64>();
                samples.push((stat(SampleTuple::Joint { data: &data, gen: &gen })?, w));
                Ok(())
            })?;
        }
        EstimatorKind::Ammd => {
            // every possible single-group outcome with its probability
            let mut outcomes: Vec<(Group, f64)> = Vec::new();
            for b in inst.branches() {
                let radices: Vec<usize> = std::iter::repeat_n(b.p_cond.len(), r)
                    .chain(std::iter::repeat_n(b.q_cond.len(), m))
                    .collect();
                enumeration_size(&radices)?;
                for_each_tuple(&radices, |idx| {
                    let (di, gi) = idx.split_at(r);
                    let w = b.prob
                        * di.iter().map(|&i| b.p_cond[i].prob).product::<f64>()
                        * gi.iter().map(|&i| b.q_cond[i].prob).product::<f64>();
                    outcomes.push((
                        Group {
                            x: b.x.clone(),
                            ys: di.iter().map(|&i| b.p_cond[i].point.clone()).collect(),
                            yhats: gi.iter().map(|&i| b.q_cond[i].point.clone()).collect(),
                        },
                        w,
                    ));
                    Ok(())
                })?;
            }
            let radices = vec![outcomes.len(); n];
            enumeration_size(&radices)?;
            for_each_tuple(&radices, |idx| {
                let groups = idx.iter().map(|&i| outcomes[i].0.clone()).collect();
                let w = idx.iter().map(|&i| outcomes[i].1).product::<f64>();
                samples.push((stat(SampleTuple::Grouped(&GroupedBatch::new(groups)?))?, w));
                Ok(())
            })?;
        }
    }
    Ok(moments_of(&samples))
}

/// Expectation terms of the second-moment expansion for one pair of
/// distributions `z ~ a` (data) and `ẑ ~ b` (generated), all draws independent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VarianceTerms {
    /// E[k(z₁,ẑ₁)²]
    pub t1: f64,
    /// E[k(z₂,ẑ₁) k(z₁,ẑ₁)]
    pub t2: f64,
    /// E[k(z₁,ẑ₁) k(z₁,ẑ₂)]
    pub t3: f64,
    /// E[k(z₁,ẑ₁) k(z₂,ẑ₂)]
    pub t4: f64,
    /// E[k(ẑ₁,ẑ₂)²]
    pub s1: f64,
    /// E[k(ẑ₁,ẑ₂) k(ẑ₁,ẑ₃)]
    pub s2: f64,
    /// E[k(ẑ₁,ẑ₂) k(ẑ₃,ẑ₄)]
    pub s3: f64,
    /// E[k(ẑ₁,ẑ₂) k(z₁,ẑ₁)]
    pub u1: f64,
    /// E[k(ẑ₁,ẑ₂) k(z₁,ẑ₃)]
    pub u2: f64,
    /// E[k(z₁,ẑ₁)]
    pub mean_cross: f64,
    /// E[k(ẑ₁,ẑ₂)]
    pub mean_gen: f64,
}

impl VarianceTerms {
    fn compute<T>(a: &[(T, f64)], b: &[(T, f64)], k: &impl Fn(&T, &T) -> f64) -> Self {
        // conditional means: E[k(z, ẑ) | ẑ], E[k(z, ẑ) | z], E[k(ẑ', ẑ) | ẑ]
        let cross_given_gen: Vec<f64> = b
            .iter()
            .map(|(zh, _)| a.iter().map(|(z, w)| w * k(z, zh)).collect::<KahanSum>().value())
            .collect();
        let cross_given_data: Vec<f64> = a
            .iter()
            .map(|(z, _)| b.iter().map(|(zh, w)| w * k(z, zh)).collect::<KahanSum>().value())
            .collect();
        let gen_given_gen: Vec<f64> = b
            .iter()
            .map(|(zh, _)| b.iter().map(|(zp, w)| w * k(zp, zh)).collect::<KahanSum>().value())
            .collect();

        let mut t1 = KahanSum::new();
        for (z, wa) in a {
            for (zh, wb) in b {
                let v = k(z, zh);
                t1.add(wa * wb * v * v);
            }
        }
        let mut s1 = KahanSum::new();
        let mut u1 = KahanSum::new();
        for (i, (z1, w1)) in b.iter().enumerate() {
            for (z2, w2) in b {
                let v = k(z1, z2);
                s1.add(w1 * w2 * v * v);
                u1.add(w1 * w2 * v * cross_given_gen[i]);
            }
        }
        let dot = |w: &[(T, f64)], f: &[f64], g: &[f64]| -> f64 {
            w.iter()
                .zip(f)
                .zip(g)
                .map(|(((_, p), x), y)| p * x * y)
                .collect::<KahanSum>()
                .value()
        };
        let mean_cross: f64 = b
            .iter()
            .zip(&cross_given_gen)
            .map(|((_, w), v)| w * v)
            .collect::<KahanSum>()
            .value();
        let mean_gen: f64 = b
            .iter()
            .zip(&gen_given_gen)
            .map(|((_, w), v)| w * v)
            .collect::<KahanSum>()
            .value();
        VarianceTerms {
            t1: t1.value(),
            t2: dot(b, &cross_given_gen, &cross_given_gen),
            t3: dot(a, &cross_given_data, &cross_given_data),
            t4: mean_cross * mean_cross,
            s1: s1.value(),
            s2: dot(b, &gen_given_gen, &gen_given_gen),
            s3: mean_gen * mean_gen,
            u1: u1.value(),
            u2: mean_gen * mean_cross,
            mean_cross,
            mean_gen,
        }
    }

    /// Variance of the shifted loss with `m` generated and `r` observed draws.
    pub fn variance(&self, m: usize, r: usize) -> f64 {
        let (mf, rf) = (m as f64, r as f64);
        let cross =
            4.0 / (mf * rf) * (self.t1 + (rf - 1.0) * self.t2 + (mf - 1.0) * self.t3 + (1.0 - mf - rf) * self.t4);
        let gen = 1.0 / (mf * (mf - 1.0)) * (2.0 * self.s1 + 4.0 * (mf - 2.0) * self.s2 + (6.0 - 4.0 * mf) * self.s3);
        let mixed = -4.0 / (mf * rf) * (2.0 * rf * self.u1 - 2.0 * rf * self.u2);
        cross + gen + mixed
    }

    /// `E[loss] = −2 E[k(z,ẑ)] + E[k(ẑ₁,ẑ₂)]`.
    pub fn mean(&self) -> f64 {
        -2.0 * self.mean_cross + self.mean_gen
    }
}

fn check_sizes(m: usize, r: usize) -> Result<()> {
    if m < 2 || r < 1 {
        return invalid(format!(
            "closed-form variance needs m >= 2 and r >= 1 (got m={m}, r={r})"
        ));
    }
    Ok(())
}

/// Closed-form `Var[Ĵ²]` with every expectation term enumerated exactly.
pub fn closed_form_variance_jmmd(inst: &DiscreteInstance, m: usize, r: usize, kx: &Kernel, ky: &Kernel) -> Result<f64> {
    inst.guard()?;
    check_sizes(m, r)?;
    let k3 = |a: &(Vec<f64>, Vec<f64>), b: &(Vec<f64>, Vec<f64>)| kx.value(&a.0, &b.0) * ky.value(&a.1, &b.1);
    let p = weighted_joint(inst.p_joint());
    let q = weighted_joint(inst.q_joint());
    Ok(VarianceTerms::compute(&p, &q, &k3).variance(m, r))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmmdVariance {
    pub variance: f64,
    /// Between-x variance floor `Var_x[−2E[k₂(Yˣ,Ŷˣ)|x] + E[k₂(Ŷ₁ˣ,Ŷ₂ˣ)|x]]`.
    pub k0: f64,
    /// `E_x[Var[L^x | x]]`.
    pub within: f64,
}

/// Closed-form `Var[Â²] = (E_x[Var[Lˣ|x]] + K₀) / n` by the law of total variance.
pub fn closed_form_variance_ammd(
    inst: &DiscreteInstance,
    n: usize,
    m: usize,
    r: usize,
    ky: &Kernel,
) -> Result<AmmdVariance> {
    inst.guard()?;
    check_sizes(m, r)?;
    if n < 1 {
        return invalid("closed-form AMMD variance needs n >= 1");
    }
    let k2 = |a: &Vec<f64>, b: &Vec<f64>| ky.value(a, b);
    let mut within = KahanSum::new();
    let mut cond_means = Vec::with_capacity(inst.branches().len());
    for b in inst.branches() {
        let t = VarianceTerms::compute(&weighted(&b.p_cond), &weighted(&b.q_cond), &k2);
        within.add(b.prob * t.variance(m, r));
        cond_means.push((b.prob, t.mean()));
    }
    // variance across x of the conditional mean of the per-x loss
    let overall: f64 = cond_means.iter().map(|(p, v)| p * v).collect::<KahanSum>().value();
    let k0 = cond_means
        .iter()
        .map(|(p, v)| p * (v - overall) * (v - overall))
        .collect::<KahanSum>()
        .value();
    let within = within.value();
    Ok(AmmdVariance {
        variance: (within + k0) / n as f64,
        k0,
        within,
    })
}

/// CMMD² for linear kernels, building `C̃ = Y (XᵀX + λsI)⁻¹ Xᵀ` explicitly for
/// both sides and returning the squared Frobenius norm of the difference.
pub fn finite_feature_cmmd(data: &Batch, gen: &GenBatch, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0) {
        return invalid(format!("lambda must be positive (got {lambda})"));
    }
    if data.is_empty() || gen.is_empty() {
        return invalid("finite_feature_cmmd needs non-empty samples");
    }
    let operator = |xs: &[Vec<f64>], ys: &[Vec<f64>]| -> Result<DMatrix<f64>> {
        let s = xs.len();
        let xm = DMatrix::from_fn(xs[0].len(), s, |i, j| xs[j][i]);
        let ym = DMatrix::from_fn(ys[0].len(), s, |i, j| ys[j][i]);
        let reg = xm.transpose() * &xm + DMatrix::identity(s, s) * (lambda * s as f64);
        let inv = reg
            .lu()
            .try_inverse()
            .ok_or_else(|| Error::Numeric("regularized feature Gram matrix is singular".into()))?;
        Ok(ym * inv * xm.transpose())
    };
    let cp = operator(data.xs(), data.ys())?;
    let cq = operator(gen.xs(), gen.yhats())?;
    if cp.shape() != cq.shape() {
        return Err(Error::DimensionMismatch {
            expected: cp.len(),
            got: cq.len(),
        });
    }
    Ok((cp - cq).norm_squared())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InequalityCheck {
    pub holds: bool,
    /// `E[k₁(x,x)]·AMMD² − JMMD²`.
    pub slack: f64,
}

pub const INEQUALITY_TOLERANCE: f64 = 1e-12;

/// Checks `JMMD² ≤ E[k₁(x,x)]·AMMD²`.
pub fn check_metric_inequalities(inst: &DiscreteInstance, kx: &Kernel, ky: &Kernel) -> Result<InequalityCheck> {
    let em = exact_metrics(inst, kx, ky)?;
    let slack = em.e_k1xx * em.ammd2 - em.jmmd2;
    Ok(InequalityCheck {
        holds: slack >= -INEQUALITY_TOLERANCE,
        slack,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::{cmmd_hat, EstimatorKind::*};
    use crate::kernels::LinearKernel;
    use crate::rng;

    fn g() -> Kernel {
        Kernel::standard_gaussian()
    }

    fn wp(v: f64, p: f64) -> WeightedPoint {
        WeightedPoint::new(vec![v], p)
    }

    /// X ≡ 0, P: Y ~ U{±1}, Q: Y ≡ 0.
    fn pm_one() -> DiscreteInstance {
        DiscreteInstance::single_x(vec![0.0], vec![wp(-1.0, 0.5), wp(1.0, 0.5)], vec![wp(0.0, 1.0)]).unwrap()
    }

    fn point_mass() -> DiscreteInstance {
        DiscreteInstance::single_x(vec![0.3], vec![wp(1.0, 1.0)], vec![wp(1.0, 1.0)]).unwrap()
    }

    fn two_x() -> DiscreteInstance {
        DiscreteInstance::new(vec![
            Branch {
                x: vec![0.0],
                prob: 0.4,
                p_cond: vec![wp(0.0, 0.5), wp(1.0, 0.5)],
                q_cond: vec![wp(0.0, 0.5), wp(1.0, 0.5)],
            },
            Branch {
                x: vec![1.0],
                prob: 0.6,
                p_cond: vec![wp(-1.0, 0.3), wp(1.0, 0.7)],
                q_cond: vec![wp(0.5, 1.0)],
            },
        ])
        .unwrap()
    }

    const SIZES: SampleSizes = SampleSizes { n: 1, m: 2, r: 2 };

    #[test]
    fn pm_one_metrics_by_hand() {
        let em = exact_metrics(&pm_one(), &g(), &g()).unwrap();
        let c = 0.5 * (1.0 + (-2.0f64).exp());
        let metric = c - 2.0 * (-0.5f64).exp() + 1.0;
        for v in [em.jmmd2, em.ammd2, em.mmd2_marginal_y] {
            assert!((v - metric).abs() < 1e-15);
        }
        assert!((em.c0 - c).abs() < 1e-15 && (em.c1 - c).abs() < 1e-15);
        assert_eq!(em.e_k1xx, 1.0);
        assert!((metric - 0.354606).abs() < 1e-6);
    }

    #[test]
    fn matched_instance_metrics_vanish() {
        let mut inst = two_x();
        inst.branches[1].q_cond = inst.branches[1].p_cond.clone();
        let em = exact_metrics(&inst, &g(), &g()).unwrap();
        assert_eq!(em.jmmd2, 0.0);
        assert_eq!(em.ammd2, 0.0);
        assert_eq!(em.c0 - em.c0, 0.0);
    }

    #[test]
    fn ammd_decomposes_over_x() {
        let inst = two_x();
        let em = exact_metrics(&inst, &g(), &g()).unwrap();
        let b = &inst.branches[1];
        let only_b = DiscreteInstance::single_x(b.x.clone(), b.p_cond.clone(), b.q_cond.clone()).unwrap();
        let mb = exact_metrics(&only_b, &g(), &g()).unwrap().ammd2;
        assert!((em.ammd2 - 0.6 * mb).abs() < 1e-15);
        assert!(em.ammd2 > 0.0);
    }

    #[test]
    fn conditional_and_global_self_similarity_differ() {
        let inst = DiscreteInstance::new(vec![
            Branch {
                x: vec![0.0],
                prob: 0.5,
                p_cond: vec![wp(-2.0, 1.0)],
                q_cond: vec![wp(0.0, 1.0)],
            },
            Branch {
                x: vec![1.0],
                prob: 0.5,
                p_cond: vec![wp(2.0, 1.0)],
                q_cond: vec![wp(0.0, 1.0)],
            },
        ])
        .unwrap();
        let em = exact_metrics(&inst, &g(), &g()).unwrap();
        assert_eq!(em.c0, 1.0);
        assert!((em.c0 - em.e_k2_marginal).abs() > 0.1);
    }

    #[test]
    fn support_guard() {
        let many: Vec<WeightedPoint> = (0..70).map(|i| wp(i as f64, 1.0 / 70.0)).collect();
        let mut last = many.clone();
        let s: f64 = last[..69].iter().map(|w| w.prob).sum();
        last[69].prob = 1.0 - s;
        let inst = DiscreteInstance::single_x(vec![0.0], last.clone(), last).unwrap();
        assert!(exact_metrics(&inst, &g(), &g()).is_err());
    }

    #[test]
    fn invalid_probabilities_rejected() {
        assert!(DiscreteInstance::single_x(vec![0.0], vec![wp(0.0, 0.7)], vec![wp(0.0, 1.0)]).is_err());
        assert!(DiscreteInstance::single_x(vec![0.0], vec![wp(0.0, -0.5), wp(1.0, 1.5)], vec![wp(0.0, 1.0)]).is_err());
    }

    #[test]
    fn point_mass_moments() {
        let em = exact_metrics(&point_mass(), &g(), &g()).unwrap();
        let mo = estimator_moments(&point_mass(), Jmmd, SIZES, &g(), &g()).unwrap();
        assert_eq!(mo.mean, -em.c1);
        assert_eq!(mo.variance, 0.0);
        assert_eq!(closed_form_variance_jmmd(&point_mass(), 2, 2, &g(), &g()).unwrap(), 0.0);
    }

    #[test]
    fn pm_one_moments_match_closed_forms() {
        let inst = pm_one();
        let em = exact_metrics(&inst, &g(), &g()).unwrap();
        let mo = estimator_moments(&inst, Jmmd, SIZES, &g(), &g()).unwrap();
        assert!((mo.mean - (em.jmmd2 - em.c1)).abs() < 1e-12);
        assert!((mo.mean - -0.213061).abs() < 1e-6);
        let cf = closed_form_variance_jmmd(&inst, 2, 2, &g(), &g()).unwrap();
        assert!((mo.variance - cf).abs() < 1e-12);

        let ma = estimator_moments(&inst, Ammd, SIZES, &g(), &g()).unwrap();
        let ca = closed_form_variance_ammd(&inst, 1, 2, 2, &g()).unwrap();
        assert!((ma.variance - ca.variance).abs() < 1e-12);
        assert_eq!(ca.k0, 0.0);
    }

    #[test]
    fn larger_samples_reduce_jmmd_variance() {
        let inst = two_x();
        let v2 = closed_form_variance_jmmd(&inst, 2, 2, &g(), &g()).unwrap();
        let v4 = closed_form_variance_jmmd(&inst, 4, 4, &g(), &g()).unwrap();
        assert!(v4 < v2);
        let e4 = estimator_moments(&inst, Jmmd, SampleSizes { n: 1, m: 3, r: 3 }, &g(), &g()).unwrap();
        let c3 = closed_form_variance_jmmd(&inst, 3, 3, &g(), &g()).unwrap();
        assert!((e4.variance - c3).abs() < 1e-12);
    }

    #[test]
    fn ammd_variance_halves_with_double_n() {
        let inst = two_x();
        let a = closed_form_variance_ammd(&inst, 3, 2, 1, &g()).unwrap();
        let b = closed_form_variance_ammd(&inst, 6, 2, 1, &g()).unwrap();
        assert!((b.variance - 0.5 * a.variance).abs() < 1e-15);
        assert!(a.k0 > 0.0);
        let mo = estimator_moments(&inst, Ammd, SampleSizes { n: 2, m: 2, r: 1 }, &g(), &g()).unwrap();
        let cf = closed_form_variance_ammd(&inst, 2, 2, 1, &g()).unwrap();
        assert!((mo.variance - cf.variance).abs() < 1e-12);
    }

    #[test]
    fn mmd_moments_unbiased() {
        let inst = two_x();
        let em = exact_metrics(&inst, &g(), &g()).unwrap();
        let mo = estimator_moments(&inst, Mmd, SampleSizes { n: 2, m: 2, r: 1 }, &g(), &g()).unwrap();
        assert!((mo.mean - em.mmd2_marginal_y).abs() < 1e-12);
    }

    #[test]
    fn enumeration_guard() {
        let inst = two_x();
        let r = estimator_moments(&inst, Jmmd, SampleSizes { n: 1, m: 12, r: 12 }, &g(), &g());
        assert!(r.is_err());
    }

    #[test]
    fn finite_feature_cmmd_examples() {
        let lin = Kernel::Linear(LinearKernel);
        let data = Batch::new(vec![vec![0.5], vec![-1.0]], vec![vec![0.2], vec![0.3]]).unwrap();
        let gen = GenBatch::new(data.xs().to_vec(), vec![], data.ys().to_vec()).unwrap();
        assert_eq!(finite_feature_cmmd(&data, &gen, 0.1).unwrap(), 0.0);

        let (x, y, yh, lambda) = (0.7, 1.2, -0.4, 0.25);
        let data = Batch::new(vec![vec![x]], vec![vec![y]]).unwrap();
        let gen = GenBatch::new(vec![vec![x]], vec![], vec![vec![yh]]).unwrap();
        let by_hand = ((y - yh) * x / (x * x + lambda)).powi(2);
        assert!((finite_feature_cmmd(&data, &gen, lambda).unwrap() - by_hand).abs() < 1e-14);
        assert!((cmmd_hat(&lin, &lin, &data, &gen, lambda).unwrap() - by_hand).abs() < 1e-12);
    }

    #[test]
    fn finite_feature_cmmd_matches_gram_expansion() {
        let lin = Kernel::Linear(LinearKernel);
        let mut r = rng::seeded(17);
        for _ in 0..20 {
            let n = r.random_range(3..=6);
            let m = r.random_range(3..=6);
            let pts = |r: &mut crate::rng::Rng, k: usize, d: usize| -> Vec<Vec<f64>> {
                (0..k)
                    .map(|_| (0..d).map(|_| r.random_range(-1.0..1.0)).collect())
                    .collect()
            };
            let data = Batch::new(pts(&mut r, n, 2), pts(&mut r, n, 2)).unwrap();
            let gen = GenBatch::new(pts(&mut r, m, 2), vec![], pts(&mut r, m, 2)).unwrap();
            let a = finite_feature_cmmd(&data, &gen, 0.05).unwrap();
            let b = cmmd_hat(&lin, &lin, &data, &gen, 0.05).unwrap();
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn inequality_examples() {
        let c = check_metric_inequalities(&pm_one(), &g(), &g()).unwrap();
        assert!(c.holds && c.slack.abs() < 1e-12);
        let mut inst = two_x();
        inst.branches[1].q_cond = inst.branches[1].p_cond.clone();
        let c = check_metric_inequalities(&inst, &g(), &g()).unwrap();
        assert!(c.holds && c.slack == 0.0);
        let mut r = rng::seeded(1);
        for _ in 0..200 {
            let inst = DiscreteInstance::random(&mut r, 2, 2);
            assert!(check_metric_inequalities(&inst, &g(), &g()).unwrap().holds);
        }
    }
}
