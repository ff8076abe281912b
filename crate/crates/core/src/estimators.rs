//! Unbiased Monte-Carlo estimators of kernel discrepancies.
//!
//! The training losses ([`jmmd_hat`], [`ammd_hat`]) drop the data-only term of
//! the squared discrepancy, so their expectations are `JMMD² − C₁` and
//! `AMMD² − C₀`. [`c1_hat`] and [`c0_hat`] estimate the dropped constants
//! when the data allow it.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Result};
use crate::kernels::{gram, Kernel};
use crate::linalg::spd_inverse;

fn check_points(points: &[Vec<f64>], what: &str) -> Result<usize> {
    let Some(first) = points.first() else {
        return invalid(format!("{what}: empty"));
    };
    let d = first.len();
    for p in points {
        check_dim(d, p.len())?;
    }
    Ok(d)
}

/// Observed joint sample `{(x_l, y_l)}`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Batch {
    xs: Vec<Vec<f64>>,
    ys: Vec<Vec<f64>>,
}

impl Batch {
    pub fn new(xs: Vec<Vec<f64>>, ys: Vec<Vec<f64>>) -> Result<Self> {
        check_dim(xs.len(), ys.len())?;
        check_points(&xs, "batch x")?;
        check_points(&ys, "batch y")?;
        Ok(Self { xs, ys })
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn xs(&self) -> &[Vec<f64>] {
        &self.xs
    }

    pub fn ys(&self) -> &[Vec<f64>] {
        &self.ys
    }
}

/// Generated joint sample `{(x̂_j, ξ_j, ŷ_j = G(ξ_j, x̂_j))}`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GenBatch {
    xs: Vec<Vec<f64>>,
    xis: Vec<Vec<f64>>,
    yhats: Vec<Vec<f64>>,
}

impl GenBatch {
    /// `xis` may be empty when the noise draws are not retained.
    pub fn new(xs: Vec<Vec<f64>>, xis: Vec<Vec<f64>>, yhats: Vec<Vec<f64>>) -> Result<Self> {
        check_dim(xs.len(), yhats.len())?;
        if !xis.is_empty() {
            check_dim(xs.len(), xis.len())?;
        }
        check_points(&xs, "generated x")?;
        check_points(&yhats, "generated y")?;
        Ok(Self { xs, xis, yhats })
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn xs(&self) -> &[Vec<f64>] {
        &self.xs
    }

    pub fn xis(&self) -> &[Vec<f64>] {
        &self.xis
    }

    pub fn yhats(&self) -> &[Vec<f64>] {
        &self.yhats
    }
}

/// Observed and generated outputs sharing one conditioning input.
#[derive(Clone, Debug, PartialEq)]
pub struct Group {
    pub x: Vec<f64>,
    pub ys: Vec<Vec<f64>>,
    pub yhats: Vec<Vec<f64>>,
}

/// `n` groups with a constant number `r` of observed and `m` of generated outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedBatch {
    groups: Vec<Group>,
}

impl GroupedBatch {
    pub fn new(groups: Vec<Group>) -> Result<Self> {
        let Some(first) = groups.first() else {
            return invalid("grouped batch: no groups");
        };
        let (r, m) = (first.ys.len(), first.yhats.len());
        let dx = first.x.len();
        let dy = first.ys.first().or(first.yhats.first()).map(Vec::len);
        for g in &groups {
            if g.ys.len() != r || g.yhats.len() != m {
                return invalid(format!(
                    "grouped batch: inconsistent group sizes (r={}, m={} vs r={r}, m={m})",
                    g.ys.len(),
                    g.yhats.len()
                ));
            }
            check_dim(dx, g.x.len())?;
            if let Some(dy) = dy {
                for y in g.ys.iter().chain(&g.yhats) {
                    check_dim(dy, y.len())?;
                }
            }
        }
        Ok(Self { groups })
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn n(&self) -> usize {
        self.groups.len()
    }

    pub fn r(&self) -> usize {
        self.groups[0].ys.len()
    }

    pub fn m(&self) -> usize {
        self.groups[0].yhats.len()
    }
}

/// Estimator value with its gradient with respect to every generated output.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimateWithGrad {
    pub value: f64,
    /// One entry per generated `ŷ`, in input order (group-major for grouped batches).
    pub grads_wrt_generated: Vec<Vec<f64>>,
}

fn zero_grads(ys: &[Vec<f64>]) -> Vec<Vec<f64>> {
    ys.iter().map(|y| vec![0.0; y.len()]).collect()
}

/// Classical unbiased MMD² estimate between `{y_i}` and `{ŷ_j}`.
pub fn mmd2_unbiased(ky: &Kernel, ys: &[Vec<f64>], yhats: &[Vec<f64>]) -> Result<f64> {
    let (n, m) = (ys.len(), yhats.len());
    if n < 2 || m < 2 {
        return invalid(format!("mmd2_unbiased needs n >= 2 and m >= 2 (got n={n}, m={m})"));
    }
    let d = check_points(ys, "ys")?;
    check_dim(d, check_points(yhats, "yhats")?)?;
    let within = |pts: &[Vec<f64>]| {
        let mut s = 0.0;
        for (i, a) in pts.iter().enumerate() {
            for b in &pts[i + 1..] {
                s += ky.value(a, b);
            }
        }
        2.0 * s / (pts.len() * (pts.len() - 1)) as f64
    };
    let mut cross = 0.0;
    for y in ys {
        for yh in yhats {
            cross += ky.value(y, yh);
        }
    }
    Ok(within(ys) - 2.0 * cross / (n * m) as f64 + within(yhats))
}

/// Joint-sample loss core shared by [`jmmd_hat`] and the grouped per-x term of
/// [`ammd_hat`]: `−2/(mr) ΣΣ k(z_l, ẑ_j) + 1/(m(m−1)) Σ_{j≠j'} k(ẑ_j, ẑ_j')`.
///
/// `kx_pair(a, b)` returns the X-kernel factor for data index `a` / generated
/// index `b` (`None` marks the generated side). Gradients are added, scaled by
/// `grad_scale`, into `grads` when given.
fn shifted_loss(
    ky: &Kernel,
    data_ys: &[Vec<f64>],
    gen_ys: &[Vec<f64>],
    kx_cross: &dyn Fn(usize, usize) -> f64,
    kx_gen: &dyn Fn(usize, usize) -> f64,
    grad_scale: f64,
    mut grads: Option<&mut [Vec<f64>]>,
) -> f64 {
    let r = data_ys.len();
    let m = gen_ys.len();
    let cross_w = 2.0 / (m * r) as f64;
    let within_w = 1.0 / (m * (m - 1)) as f64;

    let mut cross = 0.0;
    for (j, yh) in gen_ys.iter().enumerate() {
        for (l, y) in data_ys.iter().enumerate() {
            let kx = kx_cross(l, j);
            if kx == 0.0 {
                continue;
            }
            cross += kx * ky.value(y, yh);
            if let Some(g) = grads.as_deref_mut() {
                ky.grad_second(y, yh, -grad_scale * cross_w * kx, &mut g[j]);
            }
        }
    }

    let mut within = 0.0;
    for j in 0..m {
        for jp in j + 1..m {
            let kx = kx_gen(j, jp);
            if kx == 0.0 {
                continue;
            }
            within += kx * ky.value(&gen_ys[j], &gen_ys[jp]);
            if let Some(g) = grads.as_deref_mut() {
                let c = grad_scale * 2.0 * within_w * kx;
                ky.grad_second(&gen_ys[jp], &gen_ys[j], c, &mut g[j]);
                ky.grad_second(&gen_ys[j], &gen_ys[jp], c, &mut g[jp]);
            }
        }
    }
    -cross_w * cross + 2.0 * within_w * within
}

fn jmmd_impl(kx: &Kernel, ky: &Kernel, data: &Batch, gen: &GenBatch, grads: Option<&mut [Vec<f64>]>) -> Result<f64> {
    let m = gen.len();
    if m < 2 {
        return invalid(format!("jmmd_hat needs m >= 2 generated samples (got {m})"));
    }
    if data.is_empty() {
        return invalid("jmmd_hat needs r >= 1 data samples");
    }
    check_dim(data.xs[0].len(), gen.xs[0].len())?;
    check_dim(data.ys[0].len(), gen.yhats[0].len())?;
    let cross = |l: usize, j: usize| kx.value(&data.xs[l], &gen.xs[j]);
    let within = |j: usize, jp: usize| kx.value(&gen.xs[j], &gen.xs[jp]);
    Ok(shifted_loss(ky, &data.ys, &gen.yhats, &cross, &within, 1.0, grads))
}

/// Ĵ²: joint estimator, unbiased for `JMMD² − C₁`.
pub fn jmmd_hat(kx: &Kernel, ky: &Kernel, data: &Batch, gen: &GenBatch) -> Result<EstimateWithGrad> {
    let mut grads = zero_grads(&gen.yhats);
    let value = jmmd_impl(kx, ky, data, gen, Some(&mut grads))?;
    Ok(EstimateWithGrad {
        value,
        grads_wrt_generated: grads,
    })
}

/// Value-only variant of [`jmmd_hat`].
pub fn jmmd_value(kx: &Kernel, ky: &Kernel, data: &Batch, gen: &GenBatch) -> Result<f64> {
    jmmd_impl(kx, ky, data, gen, None)
}

fn ammd_impl(ky: &Kernel, grouped: &GroupedBatch, mut grads: Option<&mut [Vec<f64>]>) -> Result<f64> {
    let (n, m, r) = (grouped.n(), grouped.m(), grouped.r());
    if m < 2 {
        return invalid(format!("ammd_hat needs m >= 2 generated samples per x (got {m})"));
    }
    if r < 1 {
        return invalid("ammd_hat needs r >= 1 observed outputs per x");
    }
    let one = |_: usize, _: usize| 1.0;
    let scale = 1.0 / n as f64;
    let mut total = 0.0;
    for (i, g) in grouped.groups.iter().enumerate() {
        let slot = grads.as_deref_mut().map(|gr| &mut gr[i * m..(i + 1) * m]);
        total += shifted_loss(ky, &g.ys, &g.yhats, &one, &one, scale, slot);
    }
    Ok(total * scale)
}

/// Â²: per-x averaged estimator, unbiased for `AMMD² − C₀`.
pub fn ammd_hat(ky: &Kernel, grouped: &GroupedBatch) -> Result<EstimateWithGrad> {
    let mut grads: Vec<Vec<f64>> = grouped
        .groups
        .iter()
        .flat_map(|g| g.yhats.iter().map(|y| vec![0.0; y.len()]))
        .collect();
    let value = ammd_impl(ky, grouped, Some(&mut grads))?;
    Ok(EstimateWithGrad {
        value,
        grads_wrt_generated: grads,
    })
}

/// Value-only variant of [`ammd_hat`].
pub fn ammd_value(ky: &Kernel, grouped: &GroupedBatch) -> Result<f64> {
    ammd_impl(ky, grouped, None)
}

fn mean_offdiag(points: &[Vec<f64>], k: impl Fn(usize, usize) -> f64) -> f64 {
    let r = points.len();
    let mut s = 0.0;
    for l in 0..r {
        for lp in l + 1..r {
            s += k(l, lp);
        }
    }
    2.0 * s / (r * (r - 1)) as f64
}

/// Unbiased estimate of `C₀ = E_x E[k₂(Y₁ˣ, Y₂ˣ) | x]` from repeated outputs.
pub fn c0_hat(ky: &Kernel, grouped: &GroupedBatch) -> Result<f64> {
    let r = grouped.r();
    if r < 2 {
        return invalid(format!("c0_hat needs r >= 2 outputs per x (got {r})"));
    }
    let total: f64 = grouped
        .groups
        .iter()
        .map(|g| mean_offdiag(&g.ys, |a, b| ky.value(&g.ys[a], &g.ys[b])))
        .sum();
    Ok(total / grouped.n() as f64)
}

/// Unbiased estimate of `C₁ = E[k₃((X₁, Y₁), (X₂, Y₂))]`.
pub fn c1_hat(kx: &Kernel, ky: &Kernel, data: &Batch) -> Result<f64> {
    let r = data.len();
    if r < 2 {
        return invalid(format!("c1_hat needs r >= 2 samples (got {r})"));
    }
    Ok(mean_offdiag(&data.xs, |a, b| {
        kx.value(&data.xs[a], &data.xs[b]) * ky.value(&data.ys[a], &data.ys[b])
    }))
}

struct CmmdParts {
    value: f64,
    a_p: DMatrix<f64>,
    a_q: DMatrix<f64>,
    k1_gd: DMatrix<f64>,
    k1_gg: DMatrix<f64>,
}

fn cmmd_parts(kx: &Kernel, ky: &Kernel, data: &Batch, gen: &GenBatch, lambda: f64) -> Result<CmmdParts> {
    if !(lambda > 0.0) {
        return invalid(format!("cmmd_hat needs lambda > 0 (got {lambda})"));
    }
    if data.is_empty() || gen.is_empty() {
        return invalid("cmmd_hat needs non-empty data and generated batches");
    }
    let (n, m) = (data.len(), gen.len());
    let k1_dd = gram(kx, &data.xs, &data.xs)?;
    let k2_dd = gram(ky, &data.ys, &data.ys)?;
    let k1_gg = gram(kx, &gen.xs, &gen.xs)?;
    let k2_gg = gram(ky, &gen.yhats, &gen.yhats)?;
    let k2_dg = gram(ky, &data.ys, &gen.yhats)?;
    let k1_gd = gram(kx, &gen.xs, &data.xs)?;

    let a_p = spd_inverse(&k1_dd + DMatrix::identity(n, n) * (lambda * n as f64))?;
    let a_q = spd_inverse(&k1_gg + DMatrix::identity(m, m) * (lambda * m as f64))?;

    let pp = (&a_p * &k2_dd * &a_p * &k1_dd).trace();
    let pq = (&a_p * &k2_dg * &a_q * &k1_gd).trace();
    let qq = (&a_q * &k2_gg * &a_q * &k1_gg).trace();
    Ok(CmmdParts {
        value: pp - 2.0 * pq + qq,
        a_p,
        a_q,
        k1_gd,
        k1_gg,
    })
}

/// Ridge-regularized CMMD² estimate ‖C̃_P − C̃_Q‖²_HS via its Gram-trace expansion.
///
/// With `A_P = (K₁ᴰᴰ + λnI)⁻¹` and `A_Q = (K₁ᴳᴳ + λmI)⁻¹`:
/// `tr(A_P K₂ᴰᴰ A_P K₁ᴰᴰ) − 2 tr(A_P K₂ᴰᴳ A_Q K₁ᴳᴰ) + tr(A_Q K₂ᴳᴳ A_Q K₁ᴳᴳ)`.
pub fn cmmd_hat(kx: &Kernel, ky: &Kernel, data: &Batch, gen: &GenBatch, lambda: f64) -> Result<f64> {
    Ok(cmmd_parts(kx, ky, data, gen, lambda)?.value)
}

/// [`cmmd_hat`] with gradients with respect to the generated outputs.
pub fn cmmd_hat_with_grad(
    kx: &Kernel,
    ky: &Kernel,
    data: &Batch,
    gen: &GenBatch,
    lambda: f64,
) -> Result<EstimateWithGrad> {
    let parts = cmmd_parts(kx, ky, data, gen, lambda)?;
    // cross term: Σ_{l,j} K₂ᴰᴳ[l,j] · M[j,l] with M = A_Q K₁ᴳᴰ A_P
    let cross = &parts.a_q * &parts.k1_gd * &parts.a_p;
    // generated term: Σ_{j,j'} K₂ᴳᴳ[j,j'] · N[j',j] with N = A_Q K₁ᴳᴳ A_Q (symmetric)
    let gen_w = &parts.a_q * &parts.k1_gg * &parts.a_q;
    let mut grads = zero_grads(&gen.yhats);
    for (j, g) in grads.iter_mut().enumerate() {
        let yh = &gen.yhats[j];
        for (l, y) in data.ys.iter().enumerate() {
            ky.grad_second(y, yh, -2.0 * cross[(j, l)], g);
        }
        for (jp, yp) in gen.yhats.iter().enumerate() {
            let w = 0.5 * (gen_w[(j, jp)] + gen_w[(jp, j)]);
            ky.grad_second(yp, yh, 2.0 * w, g);
        }
    }
    Ok(EstimateWithGrad {
        value: parts.value,
        grads_wrt_generated: grads,
    })
}

/// Which estimator a budget recommendation is for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Jmmd,
    Ammd,
    Mmd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSizes {
    pub n: usize,
    pub m: usize,
    pub r: usize,
}

/// Variance-minimizing sample sizes for a budget of kernel-sample draws.
///
/// AMMD with free `n`: keep `m = 2`, `r = 1` and spend the rest on `n`
/// (each group costs `m + r = 3` draws). JMMD: `m = r = ⌊√budget⌋`.
pub fn estimator_settings_note(kind: EstimatorKind, budget: usize) -> Result<SampleSizes> {
    if budget < 4 {
        return invalid(format!("budget must be at least 4 (got {budget})"));
    }
    Ok(match kind {
        EstimatorKind::Ammd => SampleSizes {
            n: budget / 3,
            m: 2,
            r: 1,
        },
        EstimatorKind::Jmmd | EstimatorKind::Mmd => {
            let s = (budget as f64).sqrt().floor() as usize;
            SampleSizes { n: 1, m: s, r: s }
        }
    })
}
