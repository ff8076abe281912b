//! Training loops for conditional generators: the per-x averaged loss
//! (A-CGM), the joint loss (J-CGM), and a CMMD baseline.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{sample_noise_with, Dataset, Record};
use crate::error::{Error, Result};
use crate::estimators::{
    ammd_hat, cmmd_hat_with_grad, jmmd_hat, Batch, EstimateWithGrad, GenBatch, Group, GroupedBatch,
};
use crate::kernels::{Kernel, KernelConfig};
use crate::nn::{AdamState, MlpGenerator};
use crate::rng::{self, derive_seed, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Ammd,
    Jmmd,
    Cmmd,
}

fn default_epochs() -> usize {
    500
}
fn default_batch_size() -> usize {
    128
}
fn default_m() -> usize {
    2
}
fn default_xi_dim() -> usize {
    10
}
fn default_lr() -> f64 {
    AdamState::DEFAULT_LR
}
fn default_hidden() -> Vec<usize> {
    vec![32, 32]
}
fn default_lambda() -> f64 {
    0.01
}
fn default_loss() -> LossKind {
    LossKind::Jmmd
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Generated samples per x (A-CGM only).
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_xi_dim")]
    pub xi_dim: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    /// Ridge parameter of the CMMD loss.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Set by the caller; not part of the serialized form.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            m: default_m(),
            xi_dim: default_xi_dim(),
            lr: default_lr(),
            hidden: default_hidden(),
            loss: default_loss(),
            lambda: default_lambda(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs < 1 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2 (got {})", self.batch_size));
        }
        if self.loss == LossKind::Ammd && self.m < 2 {
            return bad(format!(
                "the ammd loss needs m >= 2 generated samples per x (got {})",
                self.m
            ));
        }
        if self.xi_dim < 1 {
            return bad("xi_dim must be at least 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be a non-negative number (got {})", self.lr));
        }
        if self.hidden.contains(&0) {
            return bad("hidden layer sizes must be positive".into());
        }
        if self.loss == LossKind::Cmmd && !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be positive (got {})", self.lambda));
        }
        Ok(())
    }
}

/// Kernels on X and on Y; the joint kernel is their tensor product.
#[derive(Clone, Debug)]
pub struct Kernels {
    pub x: Kernel,
    pub y: Kernel,
}

impl Default for Kernels {
    fn default() -> Self {
        Self {
            x: Kernel::standard_gaussian(),
            y: Kernel::standard_gaussian(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelsConfig {
    #[serde(default)]
    pub x: KernelConfig,
    #[serde(default)]
    pub y: KernelConfig,
}

impl KernelsConfig {
    /// Builds both kernels, using `ds` for data-dependent bandwidths.
    pub fn build(&self, ds: &Dataset) -> Result<Kernels> {
        let xs: Vec<Vec<f64>> = ds.records().iter().map(|r| r.x.clone()).collect();
        let ys: Vec<Vec<f64>> = ds.pairs().map(|(_, y)| y.clone()).collect();
        Ok(Kernels {
            x: self.x.build(&xs)?,
            y: self.y.build(&ys)?,
        })
    }
}

/// Held-out metrics recorded by an epoch monitor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HeldOut {
    pub jmmd: Option<f64>,
    pub ammd: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub wall_ms: f64,
    pub heldout: Option<HeldOut>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }

    /// Trailing moving average of the loss over `window` epochs.
    pub fn smoothed(&self, window: usize) -> Vec<f64> {
        let l = self.losses();
        (0..l.len())
            .map(|i| {
                let lo = (i + 1).saturating_sub(window.max(1));
                l[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
            })
            .collect()
    }

    /// `epoch,loss,wall_ms,heldout_jmmd,heldout_ammd`, empty cells when not recorded.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,wall_ms,heldout_jmmd,heldout_ammd\n");
        let cell = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for e in &self.epochs {
            let h = e.heldout.unwrap_or_default();
            s.push_str(&format!(
                "{},{},{:.3},{},{}\n",
                e.epoch,
                e.loss,
                e.wall_ms,
                cell(h.jmmd),
                cell(h.ammd)
            ));
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchMode {
    /// Items are individual `(x, y)` pairs.
    Single,
    /// Items are whole records, keeping every output of an x together.
    Grouped,
}

/// Seeded random partition of `0..n` into consecutive chunks of `batch_size`.
pub fn partition(n: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Minibatch indices for one epoch. In `Single` mode the indices refer to
/// [`Dataset::pairs`] order, in `Grouped` mode to records.
pub fn make_minibatches(ds: &Dataset, batch_size: usize, seed: u64, mode: BatchMode) -> Vec<Vec<usize>> {
    let n = match mode {
        BatchMode::Single => ds.num_pairs(),
        BatchMode::Grouped => ds.len(),
    };
    partition(n, batch_size, &mut rng::seeded(seed))
}

/// Outcome of one optimization step, before the parameter update.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub loss: f64,
    /// Assembled generated batch for the grouped loss.
    pub grouped: Option<GroupedBatch>,
    /// Data and generated batches for the joint and CMMD losses.
    pub joint: Option<(Batch, GenBatch)>,
}

/// Owns a generator and its optimizer state for one training run.
pub struct Trainer {
    pub config: TrainConfig,
    pub kernels: Kernels,
    pub generator: MlpGenerator,
    pub adam: AdamState,
    rng: Rng,
}

impl Trainer {
    pub fn new(config: TrainConfig, kernels: Kernels, x_dim: usize, y_dim: usize) -> Result<Self> {
        config.validate()?;
        let generator = MlpGenerator::new(x_dim, config.xi_dim, &config.hidden, y_dim, derive_seed(config.seed, 0))?;
        let adam = AdamState::new(generator.net.num_params(), config.lr);
        let rng = rng::seeded(derive_seed(config.seed, 1));
        Ok(Self {
            config,
            kernels,
            generator,
            adam,
            rng,
        })
    }

    fn apply(&mut self, est: &EstimateWithGrad, cache: &crate::nn::ForwardCache) -> Result<()> {
        if !est.value.is_finite() {
            return Err(Error::Numeric(format!("training loss became {}", est.value)));
        }
        let grads = self.generator.net.backward(cache, &est.grads_wrt_generated)?;
        self.adam.step_mlp(&mut self.generator.net, &grads)
    }

    /// One A-CGM step on a set of records: `m` fresh ξ per x, loss Â².
    /// Records with more outputs than the smallest in the batch are truncated
    /// so the group size `r` is constant.
    pub fn acgm_step(&mut self, records: &[&Record]) -> Result<StepOutcome> {
        let m = self.config.m;
        let r = records.iter().map(|rec| rec.ys.len()).min().unwrap_or(0);
        let xs: Vec<Vec<f64>> = records
            .iter()
            .flat_map(|rec| std::iter::repeat_n(rec.x.clone(), m))
            .collect();
        let xis = sample_noise_with(&mut self.rng, self.config.xi_dim, xs.len());
        let (yhats, cache) = self.generator.generate_with_cache(&xs, &xis)?;
        let groups = records
            .iter()
            .zip(yhats.chunks(m))
            .map(|(rec, yh)| Group {
                x: rec.x.clone(),
                ys: rec.ys[..r].to_vec(),
                yhats: yh.to_vec(),
            })
            .collect();
        let grouped = GroupedBatch::new(groups)?;
        let est = ammd_hat(&self.kernels.y, &grouped)?;
        self.apply(&est, &cache)?;
        Ok(StepOutcome {
            loss: est.value,
            grouped: Some(grouped),
            joint: None,
        })
    }

    /// One J-CGM (or CMMD) step on `(x, y)` pairs: one fresh ξ per x.
    pub fn joint_step(&mut self, pairs: &[(&Vec<f64>, &Vec<f64>)]) -> Result<StepOutcome> {
        let xs: Vec<Vec<f64>> = pairs.iter().map(|(x, _)| (*x).clone()).collect();
        let ys: Vec<Vec<f64>> = pairs.iter().map(|(_, y)| (*y).clone()).collect();
        let xis = sample_noise_with(&mut self.rng, self.config.xi_dim, xs.len());
        let (yhats, cache) = self.generator.generate_with_cache(&xs, &xis)?;
        let data = Batch::new(xs.clone(), ys)?;
        let gen = GenBatch::new(xs, xis, yhats)?;
        let est = match self.config.loss {
            LossKind::Cmmd => cmmd_hat_with_grad(&self.kernels.x, &self.kernels.y, &data, &gen, self.config.lambda)?,
            _ => jmmd_hat(&self.kernels.x, &self.kernels.y, &data, &gen)?,
        };
        self.apply(&est, &cache)?;
        Ok(StepOutcome {
            loss: est.value,
            grouped: None,
            joint: Some((data, gen)),
        })
    }

    /// One pass over the dataset; returns the mean step loss.
    pub fn epoch(&mut self, ds: &Dataset) -> Result<f64> {
        let mut total = 0.0;
        let mut steps = 0usize;
        match self.config.loss {
            LossKind::Ammd => {
                for idx in partition(ds.len(), self.config.batch_size, &mut self.rng) {
                    let recs: Vec<&Record> = idx.iter().map(|&i| &ds.records()[i]).collect();
                    total += self.acgm_step(&recs)?.loss;
                    steps += 1;
                }
            }
            LossKind::Jmmd | LossKind::Cmmd => {
                let pairs: Vec<(&Vec<f64>, &Vec<f64>)> = ds.pairs().collect();
                for idx in partition(pairs.len(), self.config.batch_size, &mut self.rng) {
                    if idx.len() < 2 {
                        log::debug!("skipping a trailing minibatch of one pair");
                        continue;
                    }
                    let batch: Vec<_> = idx.iter().map(|&i| pairs[i]).collect();
                    total += self.joint_step(&batch)?.loss;
                    steps += 1;
                }
            }
        }
        if steps == 0 {
            return Err(Error::InvalidInput("dataset too small for a single minibatch".into()));
        }
        Ok(total / steps as f64)
    }

    /// Runs every epoch, calling `monitor` after each one.
    pub fn run(
        &mut self,
        ds: &Dataset,
        monitor: &mut dyn FnMut(usize, &MlpGenerator) -> Result<Option<HeldOut>>,
    ) -> Result<TrainHistory> {
        let mut history = TrainHistory::default();
        for epoch in 1..=self.config.epochs {
            let start = Instant::now();
            let loss = self.epoch(ds)?;
            let wall_ms = start.elapsed().as_secs_f64() * 1e3;
            let heldout = monitor(epoch, &self.generator)?;
            log::debug!("epoch {epoch}: loss {loss:.6}");
            history.epochs.push(EpochRecord {
                epoch,
                loss,
                wall_ms,
                heldout,
            });
        }
        Ok(history)
    }
}

fn no_monitor(_: usize, _: &MlpGenerator) -> Result<Option<HeldOut>> {
    Ok(None)
}

fn check_dataset(ds: &Dataset) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::InvalidInput("training dataset is empty".into()));
    }
    Ok(())
}

/// A-CGM: grouped minibatches, Â² loss.
pub fn train_acgm(config: &TrainConfig, ds: &Dataset, kernels: &Kernels) -> Result<(MlpGenerator, TrainHistory)> {
    let config = TrainConfig {
        loss: LossKind::Ammd,
        ..config.clone()
    };
    train(&config, ds, kernels, &mut no_monitor)
}

/// J-CGM: joint minibatches, Ĵ² loss.
pub fn train_jcgm(config: &TrainConfig, ds: &Dataset, kernels: &Kernels) -> Result<(MlpGenerator, TrainHistory)> {
    let config = TrainConfig {
        loss: LossKind::Jmmd,
        ..config.clone()
    };
    train(&config, ds, kernels, &mut no_monitor)
}

/// Trains with the loss selected in `config`.
pub fn train(
    config: &TrainConfig,
    ds: &Dataset,
    kernels: &Kernels,
    monitor: &mut dyn FnMut(usize, &MlpGenerator) -> Result<Option<HeldOut>>,
) -> Result<(MlpGenerator, TrainHistory)> {
    check_dataset(ds)?;
    let mut trainer = Trainer::new(config.clone(), kernels.clone(), ds.x_dim(), ds.y_dim())?;
    let history = trainer.run(ds, monitor)?;
    Ok((trainer.generator, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticSpec};
    use crate::nn::ConditionalGenerator;

    fn small_config(loss: LossKind) -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 16,
            hidden: vec![8, 8],
            xi_dim: 3,
            loss,
            ..TrainConfig::default()
        }
    }

    fn small_data() -> Dataset {
        gen_synthetic(&SyntheticSpec::heteroscedastic(64, 3)).unwrap().0
    }

    #[test]
    fn partition_sizes_and_coverage() {
        let parts = partition(10, 4, &mut rng::seeded(1));
        let sizes: Vec<usize> = parts.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let mut all: Vec<usize> = parts.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(partition(5, 5, &mut rng::seeded(2)).len(), 1);
    }

    #[test]
    fn minibatches_deterministic() {
        let ds = small_data();
        let a = make_minibatches(&ds, 7, 3, BatchMode::Single);
        assert_eq!(a, make_minibatches(&ds, 7, 3, BatchMode::Single));
        assert_ne!(a, make_minibatches(&ds, 7, 4, BatchMode::Single));
    }

    #[test]
    fn config_validation() {
        let mut c = small_config(LossKind::Ammd);
        c.m = 1;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = small_config(LossKind::Jmmd);
        c.batch_size = 1;
        assert!(c.validate().is_err());
        c.batch_size = 2;
        c.epochs = 0;
        assert!(c.validate().is_err());
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epochs": 3, "nope": 1}"#).is_err());
        let c: TrainConfig = serde_json::from_str(r#"{"loss": "ammd"}"#).unwrap();
        assert_eq!(c.batch_size, 128);
        assert_eq!(c.lr, 5e-4);
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let ds = small_data();
        for loss in [LossKind::Ammd, LossKind::Jmmd, LossKind::Cmmd] {
            let mut c = small_config(loss);
            c.lr = 0.0;
            let init = Trainer::new(c.clone(), Kernels::default(), 1, 1).unwrap().generator;
            let (trained, hist) = train(&c, &ds, &Kernels::default(), &mut no_monitor).unwrap();
            assert_eq!(trained.net.params_flat(), init.net.params_flat());
            assert_eq!(hist.len(), 3);
        }
    }

    #[test]
    fn deterministic_runs() {
        let ds = small_data();
        let c = small_config(LossKind::Jmmd);
        let (a, ha) = train_jcgm(&c, &ds, &Kernels::default()).unwrap();
        let (b, hb) = train_jcgm(&c, &ds, &Kernels::default()).unwrap();
        assert_eq!(a.net.params_flat(), b.net.params_flat());
        assert_eq!(ha.losses(), hb.losses());
    }

    #[test]
    fn acgm_step_loss_equals_estimator() {
        let ds = small_data();
        let mut t = Trainer::new(small_config(LossKind::Ammd), Kernels::default(), 1, 1).unwrap();
        let recs: Vec<&Record> = ds.records()[..10].iter().collect();
        let out = t.acgm_step(&recs).unwrap();
        let grouped = out.grouped.unwrap();
        assert_eq!(grouped.n(), 10);
        assert_eq!(grouped.m(), 2);
        assert_eq!(out.loss, ammd_hat(&t.kernels.y, &grouped).unwrap().value);
    }

    #[test]
    fn generator_shapes() {
        let t = Trainer::new(small_config(LossKind::Jmmd), Kernels::default(), 2, 3).unwrap();
        let ys = t.generator.generate(&[vec![0.0, 1.0]], &[vec![0.0; 3]]).unwrap();
        assert_eq!(ys[0].len(), 3);
    }

    #[test]
    fn history_csv_and_smoothing() {
        let h = TrainHistory {
            epochs: (1..=4)
                .map(|e| EpochRecord {
                    epoch: e,
                    loss: e as f64,
                    wall_ms: 1.0,
                    heldout: None,
                })
                .collect(),
        };
        assert_eq!(h.smoothed(2), vec![1.0, 1.5, 2.5, 3.5]);
        let csv = h.to_csv();
        assert!(csv.starts_with("epoch,loss,wall_ms"));
        assert_eq!(csv.lines().count(), 5);
    }
}
