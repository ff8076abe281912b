//! Empirical estimator variances over a grid of sample sizes.

use std::io::Write;
use std::path::Path;

use condmmd::data::{sample_noise_with, GroundTruth, SyntheticKind};
use condmmd::estimators::{ammd_value, jmmd_value, Batch, GenBatch, Group, GroupedBatch};
use condmmd::nn::{ConditionalGenerator, Mlp, MlpGenerator};
use condmmd::rng::{self, derive_seed, Rng};
use condmmd::training::Kernels;
use condmmd::Result;
use serde::{Deserialize, Serialize};

use crate::commands::write_artifacts;
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const VARBENCH_FILE: &str = "varbench.csv";
pub const CSV_HEADER: &str = "estimator,n,m,r,emp_var,reps";
/// Every variance of the degenerate task must fall below this.
pub const POINT_MASS_BOUND: f64 = 1e-20;
/// Accepted band for `Var(n') / Var(n)`, as multiples of `n / n'`.
pub const RATIO_BAND: (f64, f64) = (0.6, 1.6);

const XI_DIM: usize = 10;
const HIDDEN: [usize; 2] = [32, 32];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarbenchTask {
    /// Default heteroscedastic task against a fixed untrained generator.
    #[default]
    Heteroscedastic,
    /// `x ≡ 0`, `y ≡ 0` and a generator that always outputs 0.
    PointMass,
}

fn default_reps() -> usize {
    500
}
fn default_jmmd_sizes() -> Vec<usize> {
    vec![2, 4, 8]
}
fn default_ammd_n() -> Vec<usize> {
    vec![8, 32, 128]
}
fn default_ammd_m() -> usize {
    2
}
fn default_ammd_r() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VarbenchConfig {
    #[serde(default)]
    pub task: VarbenchTask,
    #[serde(default = "default_reps")]
    pub reps: usize,
    /// Joint estimator sizes, each used as both `m` and `r`.
    #[serde(default = "default_jmmd_sizes")]
    pub jmmd_sizes: Vec<usize>,
    /// Group counts for the grouped estimator.
    #[serde(default = "default_ammd_n")]
    pub ammd_n: Vec<usize>,
    #[serde(default = "default_ammd_m")]
    pub ammd_m: usize,
    #[serde(default = "default_ammd_r")]
    pub ammd_r: usize,
}

impl Default for VarbenchConfig {
    fn default() -> Self {
        Self {
            task: VarbenchTask::default(),
            reps: default_reps(),
            jmmd_sizes: default_jmmd_sizes(),
            ammd_n: default_ammd_n(),
            ammd_m: default_ammd_m(),
            ammd_r: default_ammd_r(),
        }
    }
}

fn strictly_increasing(v: &[usize]) -> bool {
    v.windows(2).all(|w| w[0] < w[1])
}

impl VarbenchConfig {
    pub(crate) fn validate(&self) -> std::result::Result<(), String> {
        if self.reps < 2 {
            return Err(format!("varbench.reps must be at least 2 (got {})", self.reps));
        }
        if self.jmmd_sizes.len() < 2 || !strictly_increasing(&self.jmmd_sizes) || self.jmmd_sizes[0] < 2 {
            return Err("varbench.jmmd_sizes needs at least two strictly increasing sizes, all >= 2".into());
        }
        if self.ammd_n.len() < 2 || !strictly_increasing(&self.ammd_n) || self.ammd_n[0] < 1 {
            return Err("varbench.ammd_n needs at least two strictly increasing positive counts".into());
        }
        if self.ammd_m < 2 || self.ammd_r < 1 {
            return Err("varbench needs ammd_m >= 2 and ammd_r >= 1".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VarbenchRow {
    pub estimator: &'static str,
    /// Groups for `ammd`; observed pairs for `jmmd`.
    pub n: usize,
    pub m: usize,
    pub r: usize,
    pub emp_var: f64,
    pub reps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Assertion {
    pub description: String,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VarbenchOutcome {
    pub rows: Vec<VarbenchRow>,
    pub assertions: Vec<Assertion>,
}

impl VarbenchOutcome {
    pub fn passed(&self) -> bool {
        self.assertions.iter().all(|a| a.passed)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{:e},{}\n",
                r.estimator, r.n, r.m, r.r, r.emp_var, r.reps
            ));
        }
        s
    }
}

struct Setup {
    truth: Option<GroundTruth>,
    gen: MlpGenerator,
    kernels: Kernels,
}

impl Setup {
    fn new(task: VarbenchTask, seed: u64) -> Result<Self> {
        let (truth, gen) = match task {
            VarbenchTask::Heteroscedastic => (
                Some(GroundTruth::new(SyntheticKind::Heteroscedastic {
                    amplitude: 1.0,
                    frequency: 2.0,
                    noise_base: 0.1,
                    noise_slope: 0.4,
                })?),
                MlpGenerator::new(1, XI_DIM, &HIDDEN, 1, derive_seed(seed, 0))?,
            ),
            VarbenchTask::PointMass => {
                let net = Mlp::zeros(&[1 + XI_DIM, HIDDEN[0], HIDDEN[1], 1])?;
                (None, MlpGenerator::from_net(net, 1, XI_DIM)?)
            }
        };
        Ok(Self {
            truth,
            gen,
            kernels: Kernels::default(),
        })
    }

    fn x(&self, r: &mut Rng) -> Vec<f64> {
        self.truth.as_ref().map_or_else(|| vec![0.0], |t| t.sample_x(r))
    }

    fn y(&self, x: &[f64], r: &mut Rng) -> Vec<f64> {
        self.truth.as_ref().map_or_else(|| vec![0.0], |t| t.sample(x, r))
    }

    fn generate(&self, xs: &[Vec<f64>], r: &mut Rng) -> Result<Vec<Vec<f64>>> {
        self.gen
            .generate(xs, &sample_noise_with(r, self.gen.xi_dim(), xs.len()))
    }

    fn jmmd_rep(&self, size: usize, r: &mut Rng) -> Result<f64> {
        let xs: Vec<Vec<f64>> = (0..size).map(|_| self.x(r)).collect();
        let ys = xs.iter().map(|x| self.y(x, r)).collect();
        let gxs: Vec<Vec<f64>> = (0..size).map(|_| self.x(r)).collect();
        let yhats = self.generate(&gxs, r)?;
        jmmd_value(
            &self.kernels.x,
            &self.kernels.y,
            &Batch::new(xs, ys)?,
            &GenBatch::new(gxs, vec![], yhats)?,
        )
    }

    fn ammd_rep(&self, n: usize, m: usize, rr: usize, r: &mut Rng) -> Result<f64> {
        let mut groups = Vec::with_capacity(n);
        for _ in 0..n {
            let x = self.x(r);
            let ys = (0..rr).map(|_| self.y(&x, r)).collect();
            let yhats = self.generate(&vec![x.clone(); m], r)?;
            groups.push(Group { x, ys, yhats });
        }
        ammd_value(&self.kernels.y, &GroupedBatch::new(groups)?)
    }
}

/// Unbiased sample variance, shifted by the first value so that constant
/// inputs give exactly zero.
pub fn sample_variance(v: &[f64]) -> f64 {
    let c = v[0];
    let n = v.len() as f64;
    let mean = c + v.iter().map(|x| x - c).sum::<f64>() / n;
    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

fn replicate(reps: usize, seed: u64, mut f: impl FnMut(&mut Rng) -> Result<f64>) -> Result<f64> {
    let values = (0..reps)
        .map(|i| f(&mut rng::seeded(derive_seed(seed, i as u64))))
        .collect::<Result<Vec<_>>>()?;
    Ok(sample_variance(&values))
}

/// Runs the benchmark and evaluates its assertions.
pub fn run_varbench(cfg: &VarbenchConfig, seed: u64) -> Result<VarbenchOutcome> {
    let setup = Setup::new(cfg.task, seed)?;
    let mut rows = Vec::new();
    for (k, &s) in cfg.jmmd_sizes.iter().enumerate() {
        let v = replicate(cfg.reps, derive_seed(seed, 1 << 20 | k as u64), |r| {
            setup.jmmd_rep(s, r)
        })?;
        rows.push(VarbenchRow {
            estimator: "jmmd",
            n: s,
            m: s,
            r: s,
            emp_var: v,
            reps: cfg.reps,
        });
    }
    for (k, &n) in cfg.ammd_n.iter().enumerate() {
        let v = replicate(cfg.reps, derive_seed(seed, 2 << 20 | k as u64), |r| {
            setup.ammd_rep(n, cfg.ammd_m, cfg.ammd_r, r)
        })?;
        rows.push(VarbenchRow {
            estimator: "ammd",
            n,
            m: cfg.ammd_m,
            r: cfg.ammd_r,
            emp_var: v,
            reps: cfg.reps,
        });
    }
    let assertions = match cfg.task {
        VarbenchTask::PointMass => rows
            .iter()
            .map(|row| Assertion {
                description: format!(
                    "{} n={} m={} r={}: variance {:e} < {POINT_MASS_BOUND:e}",
                    row.estimator, row.n, row.m, row.r, row.emp_var
                ),
                passed: row.emp_var < POINT_MASS_BOUND,
            })
            .collect(),
        VarbenchTask::Heteroscedastic => scaling_assertions(&rows),
    };
    Ok(VarbenchOutcome { rows, assertions })
}

fn scaling_assertions(rows: &[VarbenchRow]) -> Vec<Assertion> {
    let of = |name: &str| rows.iter().filter(|r| r.estimator == name).collect::<Vec<_>>();
    let mut out = Vec::new();
    for w in of("jmmd").windows(2) {
        out.push(Assertion {
            description: format!(
                "jmmd m=r={} -> {}: variance {:e} -> {:e} strictly decreases",
                w[0].m, w[1].m, w[0].emp_var, w[1].emp_var
            ),
            passed: w[1].emp_var < w[0].emp_var,
        });
    }
    for w in of("ammd").windows(2) {
        let expected = w[0].n as f64 / w[1].n as f64;
        let (lo, hi) = (RATIO_BAND.0 * expected, RATIO_BAND.1 * expected);
        let ratio = w[1].emp_var / w[0].emp_var;
        out.push(Assertion {
            description: format!(
                "ammd n={} -> {}: variance ratio {ratio:.4} within [{lo:.3}, {hi:.3}]",
                w[0].n, w[1].n
            ),
            passed: (lo..=hi).contains(&ratio),
        });
    }
    out
}

/// `condmmd varbench`: writes the CSV, then fails if any assertion does.
pub fn cmd_varbench(config: &Path, out: &mut dyn Write) -> CliResult<VarbenchOutcome> {
    let cfg = RunConfig::load(config)?;
    let outcome = run_varbench(&cfg.varbench, cfg.seed)?;
    write_artifacts(&cfg.out_dir, &[(VARBENCH_FILE, outcome.to_csv().as_bytes())])?;
    for a in &outcome.assertions {
        let _ = writeln!(out, "[{}] {}", if a.passed { "PASS" } else { "FAIL" }, a.description);
    }
    let _ = writeln!(out, "wrote {}", cfg.out_dir.join(VARBENCH_FILE).display());
    if outcome.passed() {
        Ok(outcome)
    } else {
        Err(CliError::ChecksFailed(
            outcome
                .assertions
                .iter()
                .filter(|a| !a.passed)
                .map(|a| a.description.clone())
                .collect(),
        ))
    }
}
