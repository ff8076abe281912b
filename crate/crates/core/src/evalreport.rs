//! Model evaluation: JMMD/AMMD estimates with Monte-Carlo standard errors,
//! the Fréchet distance between moment-matched Gaussians on the joint
//! `(x, y)`, and conditional summaries from generator draws.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{sample_noise_with, Dataset};
use crate::error::{check_dim, invalid, Error, Result};
use crate::estimators::{ammd_value, c0_hat, c1_hat, jmmd_value, Batch, GenBatch, Group, GroupedBatch};
use crate::linalg::{psd_eigen, sqrtm_psd, PSD_TOLERANCE};
use crate::nn::ConditionalGenerator;
use crate::rng::{self, derive_seed};
use crate::training::{Kernels, KernelsConfig};

const SYMMETRY_TOLERANCE: f64 = 1e-10;

/// Mean vector and covariance of a Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianMoments {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        check_dim(d, cov.nrows())?;
        check_dim(d, cov.ncols())?;
        let asym = (&cov - cov.transpose()).abs().max();
        if asym > SYMMETRY_TOLERANCE {
            return Err(Error::Numeric(format!(
                "covariance is not symmetric (max deviation {asym:e})"
            )));
        }
        psd_eigen(&cov)?;
        Ok(Self { mean, cov })
    }

    /// Sample mean and unbiased sample covariance.
    pub fn from_samples(samples: &[Vec<f64>]) -> Result<Self> {
        if samples.len() < 2 {
            return invalid("moment estimation needs at least 2 samples");
        }
        let d = samples[0].len();
        for s in samples {
            check_dim(d, s.len())?;
        }
        let n = samples.len() as f64;
        let data = DMatrix::from_fn(samples.len(), d, |i, j| samples[i][j]);
        let mean = DVector::from_fn(d, |j, _| data.column(j).sum() / n);
        let mut centered = data;
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let mut cov = centered.transpose() * &centered / (n - 1.0);
        cov = (&cov + cov.transpose()) * 0.5;
        Self::new(mean, cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// `‖μₐ − μᵦ‖² + tr(Σₐ + Σᵦ − 2(Σₐ^½ Σᵦ Σₐ^½)^½)`.
pub fn frechet_gaussian(a: &GaussianMoments, b: &GaussianMoments) -> Result<f64> {
    check_dim(a.dim(), b.dim())?;
    if a == b {
        return Ok(0.0);
    }
    let dm = (&a.mean - &b.mean).norm_squared();
    let sa = sqrtm_psd(&a.cov)?;
    let inner = &sa * &b.cov * &sa;
    let cross = sqrtm_psd(&((&inner + inner.transpose()) * 0.5))?;
    let value = dm + a.cov.trace() + b.cov.trace() - 2.0 * cross.trace();
    if value < PSD_TOLERANCE {
        return Err(Error::Numeric(format!("Fréchet distance is negative ({value:e})")));
    }
    Ok(value.max(0.0))
}

/// Mean over repetitions with its Monte-Carlo standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub mean: f64,
    pub stderr: f64,
}

impl MetricValue {
    pub fn from_reps(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let stderr = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
        } else {
            0.0
        };
        Self { mean, stderr }
    }
}

fn default_m_draws() -> usize {
    2
}
fn default_n_reps() -> usize {
    8
}
fn default_quantiles() -> Vec<f64> {
    vec![0.1, 0.5, 0.9]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    /// Generated samples per x for the grouped estimator.
    #[serde(default = "default_m_draws")]
    pub m_draws: usize,
    #[serde(default = "default_n_reps")]
    pub n_reps: usize,
    /// Quantile levels reported by conditional summaries.
    #[serde(default = "default_quantiles")]
    pub quantiles: Vec<f64>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            m_draws: default_m_draws(),
            n_reps: default_n_reps(),
            quantiles: default_quantiles(),
        }
    }
}

/// Everything needed to reproduce a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSettings {
    pub test_records: usize,
    pub test_pairs: usize,
    /// Groups used by the grouped estimator.
    pub ammd_n: usize,
    pub ammd_m: usize,
    pub ammd_r: usize,
    /// Observed and generated sizes of the joint estimator.
    pub jmmd_r: usize,
    pub jmmd_m: usize,
    pub n_reps: usize,
    pub seed: u64,
    pub rep_seeds: Vec<u64>,
    pub kernels: Option<KernelsConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub jmmd_shifted: MetricValue,
    pub jmmd_with_c1: Option<MetricValue>,
    pub ammd_shifted: MetricValue,
    pub ammd_with_c0: Option<MetricValue>,
    pub fid: MetricValue,
    pub settings: ReportSettings,
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub const CSV_HEADER: &'static str = "jmmd_shifted,jmmd_shifted_se,jmmd_with_c1,jmmd_with_c1_se,\
ammd_shifted,ammd_shifted_se,ammd_with_c0,ammd_with_c0_se,fid,fid_se,n_reps,seed";

    /// One CSV row matching [`MetricReport::CSV_HEADER`].
    pub fn to_csv_row(&self) -> String {
        let pair = |v: &MetricValue| format!("{},{}", v.mean, v.stderr);
        let opt = |v: &Option<MetricValue>| v.as_ref().map(pair).unwrap_or_else(|| ",".into());
        format!(
            "{},{},{},{},{},{},{}",
            pair(&self.jmmd_shifted),
            opt(&self.jmmd_with_c1),
            pair(&self.ammd_shifted),
            opt(&self.ammd_with_c0),
            pair(&self.fid),
            self.settings.n_reps,
            self.settings.seed
        )
    }

    /// Human-readable summary table.
    pub fn summary_table(&self) -> String {
        let mut rows = vec![("jmmd (shifted)", Some(self.jmmd_shifted))];
        rows.push(("jmmd", self.jmmd_with_c1));
        rows.push(("ammd (shifted)", Some(self.ammd_shifted)));
        rows.push(("ammd", self.ammd_with_c0));
        rows.push(("fid", Some(self.fid)));
        let mut s = format!("{:<16} {:>14} {:>12}\n", "metric", "mean", "stderr");
        for (name, v) in rows {
            match v {
                Some(v) => s.push_str(&format!("{name:<16} {:>14.6e} {:>12.3e}\n", v.mean, v.stderr)),
                None => s.push_str(&format!("{name:<16} {:>14} {:>12}\n", "n/a", "")),
            }
        }
        s
    }
}

/// Evaluates a generator on a test set.
///
/// Each repetition uses its own seed derived from `seed`:
/// * the grouped estimator draws `m_draws` outputs for every test x, with
///   each record's observed outputs truncated to the smallest count;
/// * the joint estimator splits the test pairs into two random halves, using
///   one half as the observed sample and generating one output for each x of
///   the other half;
/// * FID compares the joint moments of the test pairs with those of
///   `(x, G(ξ, x))` over the same x's.
pub fn evaluate_model(
    gen: &dyn ConditionalGenerator,
    test: &Dataset,
    kernels: &Kernels,
    settings: &EvalSettings,
    seed: u64,
) -> Result<MetricReport> {
    if settings.m_draws < 2 {
        return invalid(format!("m_draws must be at least 2 (got {})", settings.m_draws));
    }
    if settings.n_reps < 1 {
        return invalid("n_reps must be at least 1");
    }
    if test.len() < 2 {
        return invalid(format!("test set needs at least 2 records (got {})", test.len()));
    }
    check_dim(gen.x_dim(), test.x_dim())?;
    check_dim(gen.y_dim(), test.y_dim())?;
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = test.pairs().map(|(x, y)| (x.clone(), y.clone())).collect();
    if pairs.len() < 4 {
        return invalid(format!(
            "joint evaluation needs at least 4 test pairs (got {})",
            pairs.len()
        ));
    }
    let r = test.min_outputs();
    let m = settings.m_draws;
    let half = pairs.len() / 2;
    let joint_data: Vec<Vec<f64>> = pairs
        .iter()
        .map(|(x, y)| x.iter().chain(y).copied().collect())
        .collect();
    let data_moments = GaussianMoments::from_samples(&joint_data)?;

    let rep_seeds: Vec<u64> = (0..settings.n_reps as u64).map(|i| derive_seed(seed, i)).collect();
    let (mut jm, mut jc, mut am, mut ac, mut fid) = (vec![], vec![], vec![], vec![], vec![]);
    for &s in &rep_seeds {
        let mut rng = rng::seeded(s);

        // grouped estimator
        let xs: Vec<Vec<f64>> = test
            .records()
            .iter()
            .flat_map(|rec| std::iter::repeat_n(rec.x.clone(), m))
            .collect();
        let xis = sample_noise_with(&mut rng, gen.xi_dim(), xs.len());
        let yhats = gen.generate(&xs, &xis)?;
        let groups: Vec<Group> = test
            .records()
            .iter()
            .zip(yhats.chunks(m))
            .map(|(rec, yh)| Group {
                x: rec.x.clone(),
                ys: rec.ys[..r].to_vec(),
                yhats: yh.to_vec(),
            })
            .collect();
        let grouped = GroupedBatch::new(groups)?;
        let a = ammd_value(&kernels.y, &grouped)?;
        am.push(a);
        if r >= 2 {
            ac.push(a + c0_hat(&kernels.y, &grouped)?);
        }

        // joint estimator on a random half split
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng);
        let (obs, gen_idx) = order.split_at(half);
        let data = Batch::new(
            obs.iter().map(|&i| pairs[i].0.clone()).collect(),
            obs.iter().map(|&i| pairs[i].1.clone()).collect(),
        )?;
        let gx: Vec<Vec<f64>> = gen_idx.iter().map(|&i| pairs[i].0.clone()).collect();
        let gxi = sample_noise_with(&mut rng, gen.xi_dim(), gx.len());
        let gy = gen.generate(&gx, &gxi)?;
        let gbatch = GenBatch::new(gx, gxi, gy)?;
        let j = jmmd_value(&kernels.x, &kernels.y, &data, &gbatch)?;
        jm.push(j);
        jc.push(j + c1_hat(&kernels.x, &kernels.y, &data)?);

        // FID on the joint
        let all_x: Vec<Vec<f64>> = pairs.iter().map(|(x, _)| x.clone()).collect();
        let fxi = sample_noise_with(&mut rng, gen.xi_dim(), all_x.len());
        let fy = gen.generate(&all_x, &fxi)?;
        let joint_gen: Vec<Vec<f64>> = all_x
            .iter()
            .zip(&fy)
            .map(|(x, y)| x.iter().chain(y).copied().collect())
            .collect();
        fid.push(frechet_gaussian(
            &data_moments,
            &GaussianMoments::from_samples(&joint_gen)?,
        )?);
    }
    if jm.iter().chain(&am).chain(&fid).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("evaluation produced a non-finite metric".into()));
    }
    Ok(MetricReport {
        jmmd_shifted: MetricValue::from_reps(&jm),
        jmmd_with_c1: Some(MetricValue::from_reps(&jc)),
        ammd_shifted: MetricValue::from_reps(&am),
        ammd_with_c0: (r >= 2).then(|| MetricValue::from_reps(&ac)),
        fid: MetricValue::from_reps(&fid),
        settings: ReportSettings {
            test_records: test.len(),
            test_pairs: pairs.len(),
            ammd_n: test.len(),
            ammd_m: m,
            ammd_r: r,
            jmmd_r: half,
            jmmd_m: pairs.len() - half,
            n_reps: settings.n_reps,
            seed,
            rep_seeds,
            kernels: None,
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionalSummary {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// `(level, per-coordinate quantile)`.
    pub quantiles: Vec<(f64, Vec<f64>)>,
}

/// Linear-interpolation quantile of sorted data (`(n−1)q` positioning).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = (sorted.len() - 1) as f64 * q;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Monte-Carlo mean, standard deviation and quantiles of `G(ξ, x)`.
pub fn conditional_summaries(
    gen: &dyn ConditionalGenerator,
    x: &[f64],
    draws: usize,
    seed: u64,
    levels: &[f64],
) -> Result<ConditionalSummary> {
    if draws < 2 {
        return invalid(format!("conditional summaries need at least 2 draws (got {draws})"));
    }
    if let Some(q) = levels.iter().find(|q| !(0.0..=1.0).contains(*q)) {
        return invalid(format!("quantile level {q} outside [0, 1]"));
    }
    check_dim(gen.x_dim(), x.len())?;
    let xs = vec![x.to_vec(); draws];
    let xis = sample_noise_with(&mut rng::seeded(seed), gen.xi_dim(), draws);
    let ys = gen.generate(&xs, &xis)?;
    let n = draws as f64;
    let mut out = ConditionalSummary {
        mean: vec![],
        std: vec![],
        quantiles: levels.iter().map(|&q| (q, vec![])).collect(),
    };
    for j in 0..gen.y_dim() {
        let mut col: Vec<f64> = ys.iter().map(|y| y[j]).collect();
        // shift by the first draw so constant samples give exact results
        let c = col[0];
        let mean = c + col.iter().map(|v| v - c).sum::<f64>() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        out.mean.push(mean);
        out.std.push(var.sqrt());
        col.sort_by(f64::total_cmp);
        for (q, vals) in &mut out.quantiles {
            vals.push(quantile_sorted(&col, *q));
        }
    }
    Ok(out)
}
