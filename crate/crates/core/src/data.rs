//! Datasets: CSV ingestion, normalization and splitting, and synthetic tasks
//! with closed-form conditionals.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{check_dim, Error, Result};
use crate::rng::{self, Rng};

/// One conditioning input with every output observed for it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub x: Vec<f64>,
    pub ys: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Single,
    Multi,
}

/// Per-feature z-score statistics from a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    /// Indices of the raw x columns that were kept (non-constant).
    pub kept_x: Vec<usize>,
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: Vec<f64>,
    pub y_std: Vec<f64>,
}

impl NormStats {
    /// Maps a raw x to normalized units, dropping constant columns.
    pub fn apply_x(&self, x: &[f64]) -> Vec<f64> {
        self.kept_x
            .iter()
            .zip(self.x_mean.iter().zip(&self.x_std))
            .map(|(&i, (m, s))| (x[i] - m) / s)
            .collect()
    }

    pub fn apply_y(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .zip(self.y_mean.iter().zip(&self.y_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn inverse_y(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .zip(self.y_mean.iter().zip(&self.y_std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }

    /// Inverse of [`NormStats::apply_x`] on the kept columns.
    pub fn inverse_x(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.x_mean.iter().zip(&self.x_std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    records: Vec<Record>,
    x_dim: usize,
    y_dim: usize,
    /// Set once the dataset has been normalized.
    pub norm: Option<NormStats>,
}

impl Dataset {
    pub fn new(records: Vec<Record>) -> Result<Self> {
        let Some(first) = records.first() else {
            return Err(Error::Schema("dataset has no records".into()));
        };
        let x_dim = first.x.len();
        let Some(y0) = first.ys.first() else {
            return Err(Error::Schema("record without outputs".into()));
        };
        let y_dim = y0.len();
        for r in &records {
            check_dim(x_dim, r.x.len())?;
            if r.ys.is_empty() {
                return Err(Error::Schema("record without outputs".into()));
            }
            for y in &r.ys {
                check_dim(y_dim, y.len())?;
            }
        }
        Ok(Self {
            records,
            x_dim,
            y_dim,
            norm: None,
        })
    }

    /// Builds a dataset from `(x, y)` rows, merging rows whose x is bitwise
    /// identical into one record (first-occurrence order).
    pub fn from_pairs(pairs: Vec<(Vec<f64>, Vec<f64>)>) -> Result<Self> {
        let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut records: Vec<Record> = Vec::new();
        for (x, y) in pairs {
            let key: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
            match index.get(&key) {
                Some(&i) => records[i].ys.push(y),
                None => {
                    index.insert(key, records.len());
                    records.push(Record { x, ys: vec![y] });
                }
            }
        }
        Self::new(records)
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn x_dim(&self) -> usize {
        self.x_dim
    }

    pub fn y_dim(&self) -> usize {
        self.y_dim
    }

    pub fn num_pairs(&self) -> usize {
        self.records.iter().map(|r| r.ys.len()).sum()
    }

    pub fn task(&self) -> TaskKind {
        if self.records.iter().all(|r| r.ys.len() == 1) {
            TaskKind::Single
        } else {
            TaskKind::Multi
        }
    }

    /// Smallest number of outputs any record has.
    pub fn min_outputs(&self) -> usize {
        self.records.iter().map(|r| r.ys.len()).min().unwrap_or(0)
    }

    /// Every `(x, y)` pair, record by record.
    pub fn pairs(&self) -> impl Iterator<Item = (&Vec<f64>, &Vec<f64>)> {
        self.records.iter().flat_map(|r| r.ys.iter().map(move |y| (&r.x, y)))
    }

    /// Writes `x0..,y0..` columns with a header, one row per pair.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let header: Vec<String> = (0..self.x_dim)
            .map(|i| format!("x{i}"))
            .chain((0..self.y_dim).map(|i| format!("y{i}")))
            .collect();
        w.write_record(&header)?;
        for (x, y) in self.pairs() {
            w.write_record(x.iter().chain(y).map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// A target column selected by header name or zero-based index.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TargetColumn {
    Index(usize),
    Name(String),
}

/// Reads a numeric CSV; `targets` become y, every other column becomes x.
pub fn load_csv(path: &Path, targets: &[TargetColumn], has_header: bool) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    read_csv(file, targets, has_header)
}

pub fn read_csv(reader: impl std::io::Read, targets: &[TargetColumn], has_header: bool) -> Result<Dataset> {
    if targets.is_empty() {
        return Err(Error::Schema("at least one target column is required".into()));
    }
    let mut rdr = csv::ReaderBuilder::new().has_headers(has_header).from_reader(reader);
    let header: Option<Vec<String>> = if has_header {
        Some(rdr.headers()?.iter().map(|h| h.trim().to_string()).collect())
    } else {
        None
    };
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1 + has_header as usize;
        let vals = rec
            .iter()
            .enumerate()
            .map(|(c, cell)| {
                cell.trim().parse::<f64>().map_err(|e| Error::Parse {
                    row,
                    col: c + 1,
                    msg: format!("{cell:?}: {e}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(vals);
    }
    let width = match (&header, rows.first()) {
        (_, Some(r)) => r.len(),
        _ => return Err(Error::Schema("CSV file has no data rows".into())),
    };
    let mut target_idx = Vec::with_capacity(targets.len());
    for t in targets {
        let idx = match t {
            TargetColumn::Index(i) => *i,
            TargetColumn::Name(name) => header
                .as_ref()
                .and_then(|h| h.iter().position(|c| c == name))
                .ok_or_else(|| Error::Schema(format!("target column {name:?} not found")))?,
        };
        if idx >= width {
            return Err(Error::Schema(format!(
                "target column index {idx} out of range ({width} columns)"
            )));
        }
        if target_idx.contains(&idx) {
            return Err(Error::Schema(format!("target column {idx} listed twice")));
        }
        target_idx.push(idx);
    }
    if target_idx.len() == width {
        return Err(Error::Schema("no feature columns left after removing targets".into()));
    }
    let pairs = rows
        .into_iter()
        .map(|r| {
            let y = target_idx.iter().map(|&i| r[i]).collect();
            let x = r
                .iter()
                .enumerate()
                .filter(|(i, _)| !target_idx.contains(i))
                .map(|(_, v)| *v)
                .collect();
            (x, y)
        })
        .collect();
    Dataset::from_pairs(pairs)
}

fn mean_std<'a>(values: impl Iterator<Item = &'a [f64]>, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let rows: Vec<&[f64]> = values.collect();
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..dim).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let std = (0..dim)
        .map(|j| (rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt())
        .collect();
    (mean, std)
}

/// Default held-out fraction.
pub const DEFAULT_TEST_FRACTION: f64 = 0.1;

/// Seeded random split of the records followed by z-scoring with train
/// statistics. Constant x columns are dropped; a constant y column keeps
/// unit scale.
pub fn normalize_split(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "test_fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let n = ds.len();
    let n_test = ((n as f64) * test_fraction).round() as usize;
    if n - n_test < 2 {
        return Err(Error::InvalidInput(format!(
            "train split would have {} records; at least 2 are required",
            n - n_test
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::seeded(seed));
    let (test_idx, train_idx) = order.split_at(n_test);
    let mut test_idx = test_idx.to_vec();
    let mut train_idx = train_idx.to_vec();
    test_idx.sort_unstable();
    train_idx.sort_unstable();

    let train_raw: Vec<&Record> = train_idx.iter().map(|&i| &ds.records[i]).collect();
    let (x_mean, x_std) = mean_std(train_raw.iter().map(|r| r.x.as_slice()), ds.x_dim);
    let (y_mean, y_std) = mean_std(train_raw.iter().flat_map(|r| r.ys.iter().map(Vec::as_slice)), ds.y_dim);
    let mut kept_x = Vec::new();
    for (j, s) in x_std.iter().enumerate() {
        if *s > 0.0 {
            kept_x.push(j);
        } else {
            log::info!("dropping constant feature column {j}");
        }
    }
    let y_std = y_std
        .into_iter()
        .enumerate()
        .map(|(j, s)| {
            if s > 0.0 {
                s
            } else {
                log::info!("target column {j} is constant on the train split; using unit scale");
                1.0
            }
        })
        .collect();
    let stats = NormStats {
        x_mean: kept_x.iter().map(|&j| x_mean[j]).collect(),
        x_std: kept_x.iter().map(|&j| x_std[j]).collect(),
        kept_x,
        y_mean,
        y_std,
    };
    let make = |idx: &[usize]| -> Result<Dataset> {
        let records = idx
            .iter()
            .map(|&i| {
                let r = &ds.records[i];
                Record {
                    x: stats.apply_x(&r.x),
                    ys: r.ys.iter().map(|y| stats.apply_y(y)).collect(),
                }
            })
            .collect();
        let mut d = Dataset::new(records)?;
        d.norm = Some(stats.clone());
        Ok(d)
    };
    let train = make(&train_idx)?;
    let test = if test_idx.is_empty() {
        return Err(Error::InvalidInput("test split is empty; raise test_fraction".into()));
    } else {
        make(&test_idx)?
    };
    Ok((train, test))
}

/// Synthetic task family with its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SyntheticKind {
    /// `x ~ U[-1,1]`, `y | x ~ N(a·sin(ω x), (σ₀ + σ₁ x²)²)`.
    Heteroscedastic {
        #[serde(default = "one")]
        amplitude: f64,
        #[serde(default = "default_frequency")]
        frequency: f64,
        #[serde(default = "default_noise_base")]
        noise_base: f64,
        #[serde(default = "default_noise_slope")]
        noise_slope: f64,
    },
    /// `x ~ U[-1,1]`, equal-weight mixture of `N(±(g₀ + g₁ x), s²)`.
    Bimodal {
        #[serde(default = "one")]
        half_gap: f64,
        #[serde(default)]
        gap_slope: f64,
        #[serde(default = "default_mode_std")]
        mode_std: f64,
    },
    /// One-hot label `x ∈ {1..K}`; `y ∈ R²` is an equal mixture of two
    /// isotropic Gaussians placed symmetrically around the label's centre.
    LabelMixture {
        #[serde(default = "default_labels")]
        labels: usize,
        #[serde(default = "default_radius")]
        radius: f64,
        #[serde(default = "default_spread")]
        spread: f64,
        #[serde(default = "default_mode_std")]
        component_std: f64,
    },
}

fn one() -> f64 {
    1.0
}
fn default_frequency() -> f64 {
    2.0
}
fn default_noise_base() -> f64 {
    0.1
}
fn default_noise_slope() -> f64 {
    0.4
}
fn default_mode_std() -> f64 {
    0.2
}
fn default_labels() -> usize {
    3
}
fn default_radius() -> f64 {
    2.0
}
fn default_spread() -> f64 {
    0.5
}
fn default_samples() -> usize {
    1024
}
fn default_outputs() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub task: SyntheticKind,
    /// Number of x draws (unused by `label_mixture`, which has one record per label).
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Outputs drawn per x.
    #[serde(default = "default_outputs")]
    pub outputs_per_x: usize,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn heteroscedastic(samples: usize, seed: u64) -> Self {
        Self {
            task: SyntheticKind::Heteroscedastic {
                amplitude: one(),
                frequency: default_frequency(),
                noise_base: default_noise_base(),
                noise_slope: default_noise_slope(),
            },
            samples,
            outputs_per_x: 1,
            seed,
        }
    }

    pub fn bimodal(samples: usize, seed: u64) -> Self {
        Self {
            task: SyntheticKind::Bimodal {
                half_gap: one(),
                gap_slope: 0.0,
                mode_std: default_mode_std(),
            },
            samples,
            outputs_per_x: 1,
            seed,
        }
    }
}

/// Exact conditional law of a synthetic task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    kind: SyntheticKind,
}

/// One Gaussian component of a per-coordinate mixture.
#[derive(Clone, Copy, Debug)]
struct Component {
    weight: f64,
    mean: f64,
    std: f64,
}

impl GroundTruth {
    pub fn new(kind: SyntheticKind) -> Result<Self> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        match &kind {
            SyntheticKind::Heteroscedastic {
                amplitude,
                frequency,
                noise_base,
                noise_slope,
            } => {
                if ![amplitude, frequency, noise_base, noise_slope]
                    .iter()
                    .all(|v| v.is_finite())
                {
                    return bad("heteroscedastic parameters must be finite");
                }
                if *noise_base < 0.0 || *noise_slope < 0.0 {
                    return bad("noise scale parameters must be non-negative");
                }
            }
            SyntheticKind::Bimodal {
                half_gap,
                gap_slope,
                mode_std,
            } => {
                if !(half_gap.is_finite() && gap_slope.is_finite() && *mode_std >= 0.0 && mode_std.is_finite()) {
                    return bad("bimodal parameters must be finite with mode_std >= 0");
                }
            }
            SyntheticKind::LabelMixture {
                labels,
                radius,
                spread,
                component_std,
            } => {
                if *labels == 0 {
                    return bad("label_mixture needs at least one label");
                }
                if !(radius.is_finite() && spread.is_finite() && *component_std >= 0.0 && component_std.is_finite()) {
                    return bad("label_mixture parameters must be finite with component_std >= 0");
                }
            }
        }
        Ok(Self { kind })
    }

    pub fn kind(&self) -> &SyntheticKind {
        &self.kind
    }

    pub fn x_dim(&self) -> usize {
        match self.kind {
            SyntheticKind::LabelMixture { labels, .. } => labels,
            _ => 1,
        }
    }

    pub fn y_dim(&self) -> usize {
        match self.kind {
            SyntheticKind::LabelMixture { .. } => 2,
            _ => 1,
        }
    }

    /// Draws an x from the task's input distribution.
    pub fn sample_x(&self, rng: &mut Rng) -> Vec<f64> {
        match self.kind {
            SyntheticKind::LabelMixture { labels, .. } => one_hot(rng.random_range(0..labels), labels),
            _ => vec![rng.random_range(-1.0..=1.0)],
        }
    }

    fn label_of(x: &[f64]) -> usize {
        x.iter()
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |best, (i, &v)| if v > best.1 { (i, v) } else { best },
            )
            .0
    }

    /// Per-coordinate mixture components of `Y | X = x`.
    fn components(&self, x: &[f64]) -> Vec<Vec<Component>> {
        match self.kind {
            SyntheticKind::Heteroscedastic {
                amplitude,
                frequency,
                noise_base,
                noise_slope,
            } => {
                let x = x[0];
                vec![vec![Component {
                    weight: 1.0,
                    mean: amplitude * (frequency * x).sin(),
                    std: noise_base + noise_slope * x * x,
                }]]
            }
            SyntheticKind::Bimodal {
                half_gap,
                gap_slope,
                mode_std,
            } => {
                let g = half_gap + gap_slope * x[0];
                vec![vec![
                    Component {
                        weight: 0.5,
                        mean: -g,
                        std: mode_std,
                    },
                    Component {
                        weight: 0.5,
                        mean: g,
                        std: mode_std,
                    },
                ]]
            }
            SyntheticKind::LabelMixture {
                labels,
                radius,
                spread,
                component_std,
            } => {
                let (cx, cy, dx, dy) = label_geometry(Self::label_of(x), labels, radius, spread);
                vec![
                    vec![
                        Component {
                            weight: 0.5,
                            mean: cx - dx,
                            std: component_std,
                        },
                        Component {
                            weight: 0.5,
                            mean: cx + dx,
                            std: component_std,
                        },
                    ],
                    vec![
                        Component {
                            weight: 0.5,
                            mean: cy - dy,
                            std: component_std,
                        },
                        Component {
                            weight: 0.5,
                            mean: cy + dy,
                            std: component_std,
                        },
                    ],
                ]
            }
        }
    }

    pub fn mean(&self, x: &[f64]) -> Vec<f64> {
        self.components(x)
            .iter()
            .map(|cs| cs.iter().map(|c| c.weight * c.mean).sum())
            .collect()
    }

    pub fn std(&self, x: &[f64]) -> Vec<f64> {
        self.components(x)
            .iter()
            .map(|cs| {
                let mu: f64 = cs.iter().map(|c| c.weight * c.mean).sum();
                let second: f64 = cs.iter().map(|c| c.weight * (c.std * c.std + c.mean * c.mean)).sum();
                (second - mu * mu).max(0.0).sqrt()
            })
            .collect()
    }

    /// Per-coordinate conditional quantile, `q ∈ (0, 1)`.
    pub fn quantile(&self, x: &[f64], q: f64) -> Result<Vec<f64>> {
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::InvalidInput(format!(
                "quantile level must lie in (0, 1), got {q}"
            )));
        }
        Ok(self.components(x).iter().map(|cs| mixture_quantile(cs, q)).collect())
    }

    /// Draws `y ~ P(Y | X = x)`.
    pub fn sample(&self, x: &[f64], rng: &mut Rng) -> Vec<f64> {
        let comps = self.components(x);
        match self.kind {
            SyntheticKind::LabelMixture { .. } => {
                // both coordinates share the component choice
                let k = rng.random_range(0..2);
                comps
                    .iter()
                    .map(|cs| {
                        let z: f64 = StandardNormal.sample(rng);
                        cs[k].mean + cs[k].std * z
                    })
                    .collect()
            }
            _ => comps
                .iter()
                .map(|cs| {
                    let c = if cs.len() == 1 {
                        cs[0]
                    } else {
                        cs[rng.random_range(0..cs.len())]
                    };
                    let z: f64 = StandardNormal.sample(rng);
                    c.mean + c.std * z
                })
                .collect(),
        }
    }
}

fn label_geometry(label: usize, labels: usize, radius: f64, spread: f64) -> (f64, f64, f64, f64) {
    let angle = 2.0 * std::f64::consts::PI * label as f64 / labels as f64;
    let (s, c) = angle.sin_cos();
    // components sit along the tangent direction
    (radius * c, radius * s, -spread * s, spread * c)
}

fn one_hot(i: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; k];
    v[i] = 1.0;
    v
}

fn mixture_cdf(cs: &[Component], y: f64) -> f64 {
    cs.iter()
        .map(|c| {
            let p = if c.std > 0.0 {
                Normal::new(c.mean, c.std).expect("valid normal").cdf(y)
            } else if y >= c.mean {
                1.0
            } else {
                0.0
            };
            c.weight * p
        })
        .sum()
}

fn mixture_quantile(cs: &[Component], q: f64) -> f64 {
    if let [c] = cs {
        if c.std > 0.0 {
            return Normal::new(c.mean, c.std).expect("valid normal").inverse_cdf(q);
        }
        return c.mean;
    }
    let lo_start = cs.iter().map(|c| c.mean - 40.0 * c.std).fold(f64::INFINITY, f64::min);
    let hi_start = cs
        .iter()
        .map(|c| c.mean + 40.0 * c.std)
        .fold(f64::NEG_INFINITY, f64::max);
    let (mut lo, mut hi) = (lo_start, hi_start);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mixture_cdf(cs, mid) < q {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Generates the dataset described by `spec` and its ground truth.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, GroundTruth)> {
    let truth = GroundTruth::new(spec.task.clone())?;
    if spec.outputs_per_x == 0 {
        return Err(Error::Config("outputs_per_x must be at least 1".into()));
    }
    let mut r = rng::seeded(spec.seed);
    let records = match spec.task {
        SyntheticKind::LabelMixture { labels, .. } => (0..labels)
            .map(|k| {
                let x = one_hot(k, labels);
                let ys = (0..spec.outputs_per_x).map(|_| truth.sample(&x, &mut r)).collect();
                Record { x, ys }
            })
            .collect(),
        _ => {
            if spec.samples == 0 {
                return Err(Error::Config("samples must be at least 1".into()));
            }
            (0..spec.samples)
                .map(|_| {
                    let x = truth.sample_x(&mut r);
                    let ys = (0..spec.outputs_per_x).map(|_| truth.sample(&x, &mut r)).collect();
                    Record { x, ys }
                })
                .collect()
        }
    };
    Ok((Dataset::new(records)?, truth))
}

/// `count` i.i.d. draws from `U[-1,1]^xi_dim`.
pub fn sample_noise(xi_dim: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    sample_noise_with(&mut rng::seeded(seed), xi_dim, count)
}

pub fn sample_noise_with(rng: &mut Rng, xi_dim: usize, count: usize) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| (0..xi_dim).map(|_| rng.random_range(-1.0..=1.0)).collect())
        .collect()
}
