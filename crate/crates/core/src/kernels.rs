//! Kernels on X, Y and X×Y.
//!
//! All kernels here are symmetric, so the gradient with respect to the first
//! argument is the gradient with respect to the second with the arguments
//! swapped. Only [`Kernel::grad_second`] is exposed; estimators use it to push
//! derivatives onto generated samples.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};
use crate::rng;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `k(a, b) = exp(-‖a − b‖² / (2 · bandwidth_sq))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianKernel {
    bandwidth_sq: f64,
}

impl GaussianKernel {
    pub fn new(bandwidth_sq: f64) -> Result<Self> {
        if !(bandwidth_sq > 0.0 && bandwidth_sq.is_finite()) {
            return Err(Error::Config(format!(
                "bandwidth_sq must be positive and finite, got {bandwidth_sq}"
            )));
        }
        Ok(Self { bandwidth_sq })
    }

    /// The unit-bandwidth kernel `exp(-½‖a − b‖²)`.
    pub fn standard() -> Self {
        Self { bandwidth_sq: 1.0 }
    }

    pub fn bandwidth_sq(&self) -> f64 {
        self.bandwidth_sq
    }

    pub fn value(&self, a: &[f64], b: &[f64]) -> f64 {
        (-sq_dist(a, b) / (2.0 * self.bandwidth_sq)).exp()
    }

    fn grad_second(&self, a: &[f64], b: &[f64], scale: f64, out: &mut [f64]) {
        let k = self.value(a, b);
        let c = scale * k / self.bandwidth_sq;
        for ((o, ai), bi) in out.iter_mut().zip(a).zip(b) {
            *o += c * (ai - bi);
        }
    }
}

impl Default for GaussianKernel {
    fn default() -> Self {
        Self::standard()
    }
}

/// `k(a, b) = ⟨a, b⟩`. Its feature map is the identity, which makes
/// conditional-embedding operators literal matrices.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LinearKernel;

/// A deterministic map from Y into a code space, with its vector-Jacobian product.
pub trait Encoder: Send + Sync + fmt::Debug {
    fn input_dim(&self) -> usize;
    fn code_dim(&self) -> usize;
    fn encode(&self, y: &[f64]) -> Vec<f64>;
    /// Returns `J(y)ᵀ · code_grad` where `J` is the Jacobian of [`Encoder::encode`] at `y`.
    fn pullback(&self, y: &[f64], code_grad: &[f64]) -> Vec<f64>;
}

/// `y ↦ tanh(W y)` with a fixed, seeded random `W`. Stands in for a trained encoder.
#[derive(Clone, Debug)]
pub struct TanhProjection {
    input_dim: usize,
    code_dim: usize,
    /// `code_dim × input_dim`, row-major.
    weights: Vec<f64>,
}

impl TanhProjection {
    pub fn random(input_dim: usize, code_dim: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || code_dim == 0 {
            return invalid("encoder dimensions must be positive");
        }
        let mut rng = rng::seeded(seed);
        let scale = 1.0 / (input_dim as f64).sqrt();
        let weights = (0..input_dim * code_dim)
            .map(|_| rng.random_range(-1.0..1.0) * scale)
            .collect();
        Ok(Self {
            input_dim,
            code_dim,
            weights,
        })
    }

    pub fn from_weights(input_dim: usize, code_dim: usize, weights: Vec<f64>) -> Result<Self> {
        check_dim(input_dim * code_dim, weights.len())?;
        Ok(Self {
            input_dim,
            code_dim,
            weights,
        })
    }
}

impl Encoder for TanhProjection {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn code_dim(&self) -> usize {
        self.code_dim
    }

    fn encode(&self, y: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.input_dim)
            .map(|row| row.iter().zip(y).map(|(w, v)| w * v).sum::<f64>().tanh())
            .collect()
    }

    fn pullback(&self, y: &[f64], code_grad: &[f64]) -> Vec<f64> {
        let code = self.encode(y);
        let mut out = vec![0.0; self.input_dim];
        for ((row, c), g) in self.weights.chunks_exact(self.input_dim).zip(&code).zip(code_grad) {
            let d = g * (1.0 - c * c);
            for (o, w) in out.iter_mut().zip(row) {
                *o += d * w;
            }
        }
        out
    }
}

/// Feature-aware deep kernel
/// `k(y₁, y₂) = ((1 − ε₀)·κ₁(A(y₁), A(y₂)) + ε₀)·κ₂(y₁, y₂)`.
#[derive(Clone, Debug)]
pub struct DeepKernel {
    encoder: Arc<dyn Encoder>,
    kappa1: GaussianKernel,
    kappa2: GaussianKernel,
    epsilon0: f64,
}

impl DeepKernel {
    pub fn new(
        encoder: Arc<dyn Encoder>,
        kappa1: GaussianKernel,
        kappa2: GaussianKernel,
        epsilon0: f64,
    ) -> Result<Self> {
        if !(epsilon0 > 0.0 && epsilon0 < 1.0) {
            return Err(Error::Config(format!("epsilon0 must lie in (0, 1), got {epsilon0}")));
        }
        Ok(Self {
            encoder,
            kappa1,
            kappa2,
            epsilon0,
        })
    }

    pub fn epsilon0(&self) -> f64 {
        self.epsilon0
    }

    pub fn encoder(&self) -> &Arc<dyn Encoder> {
        &self.encoder
    }

    fn value(&self, a: &[f64], b: &[f64]) -> f64 {
        let ca = self.encoder.encode(a);
        let cb = self.encoder.encode(b);
        let gate = (1.0 - self.epsilon0) * self.kappa1.value(&ca, &cb) + self.epsilon0;
        gate * self.kappa2.value(a, b)
    }

    fn grad_second(&self, a: &[f64], b: &[f64], scale: f64, out: &mut [f64]) {
        let ca = self.encoder.encode(a);
        let cb = self.encoder.encode(b);
        let k1 = self.kappa1.value(&ca, &cb);
        let k2 = self.kappa2.value(a, b);
        let gate = (1.0 - self.epsilon0) * k1 + self.epsilon0;
        // product rule: gate · ∇κ₂ + κ₂ · (1 − ε₀) · Jᵀ ∇_code κ₁
        self.kappa2.grad_second(a, b, scale * gate, out);
        let mut code_grad = vec![0.0; cb.len()];
        self.kappa1
            .grad_second(&ca, &cb, scale * k2 * (1.0 - self.epsilon0), &mut code_grad);
        for (o, g) in out.iter_mut().zip(self.encoder.pullback(b, &code_grad)) {
            *o += g;
        }
    }
}

/// A kernel on a single space (X or Y).
#[derive(Clone, Debug)]
pub enum Kernel {
    Gaussian(GaussianKernel),
    Linear(LinearKernel),
    Deep(DeepKernel),
}

impl Kernel {
    pub fn gaussian(bandwidth_sq: f64) -> Result<Self> {
        GaussianKernel::new(bandwidth_sq).map(Kernel::Gaussian)
    }

    pub fn standard_gaussian() -> Self {
        Kernel::Gaussian(GaussianKernel::standard())
    }

    /// Input dimension fixed at construction, if any.
    pub fn dim(&self) -> Option<usize> {
        match self {
            Kernel::Deep(d) => Some(d.encoder.input_dim()),
            _ => None,
        }
    }

    /// Checked evaluation of `k(a, b)`.
    pub fn eval(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        check_dim(a.len(), b.len())?;
        if let Some(d) = self.dim() {
            check_dim(d, a.len())?;
        }
        Ok(self.value(a, b))
    }

    /// Unchecked evaluation; callers guarantee matching dimensions.
    pub fn value(&self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Kernel::Gaussian(g) => g.value(a, b),
            Kernel::Linear(_) => a.iter().zip(b).map(|(x, y)| x * y).sum(),
            Kernel::Deep(d) => d.value(a, b),
        }
    }

    /// Accumulates `scale · ∂k(a, b)/∂b` into `out`.
    pub fn grad_second(&self, a: &[f64], b: &[f64], scale: f64, out: &mut [f64]) {
        match self {
            Kernel::Gaussian(g) => g.grad_second(a, b, scale, out),
            Kernel::Linear(_) => {
                for (o, ai) in out.iter_mut().zip(a) {
                    *o += scale * ai;
                }
            }
            Kernel::Deep(d) => d.grad_second(a, b, scale, out),
        }
    }

    /// Whether `k(a, a) = 1` for every `a`.
    pub fn is_normalized(&self) -> bool {
        !matches!(self, Kernel::Linear(_))
    }
}

/// `k₃((x₁, y₁), (x₂, y₂)) = kx(x₁, x₂) · ky(y₁, y₂)`.
#[derive(Clone, Debug)]
pub struct TensorKernel {
    pub kx: Kernel,
    pub ky: Kernel,
}

impl TensorKernel {
    pub fn new(kx: Kernel, ky: Kernel) -> Self {
        Self { kx, ky }
    }

    pub fn eval(&self, x1: &[f64], y1: &[f64], x2: &[f64], y2: &[f64]) -> Result<f64> {
        Ok(self.kx.eval(x1, x2)? * self.ky.eval(y1, y2)?)
    }

    pub fn value(&self, x1: &[f64], y1: &[f64], x2: &[f64], y2: &[f64]) -> f64 {
        self.kx.value(x1, x2) * self.ky.value(y1, y2)
    }
}

/// Gram matrix `G[i, j] = k(a[i], b[j])`.
pub fn gram(kernel: &Kernel, a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let dim = a.first().or(b.first()).map(Vec::len);
    if let Some(d) = dim {
        for p in a.iter().chain(b) {
            check_dim(d, p.len())?;
        }
        if let Some(kd) = kernel.dim() {
            check_dim(kd, d)?;
        }
    }
    Ok(DMatrix::from_fn(a.len(), b.len(), |i, j| kernel.value(&a[i], &b[j])))
}

/// Median of squared pairwise distances over distinct pairs.
pub fn median_heuristic(samples: &[Vec<f64>]) -> Result<f64> {
    if samples.len() < 2 {
        return invalid("median heuristic needs at least two samples");
    }
    let d = samples[0].len();
    let mut dists = Vec::with_capacity(samples.len() * (samples.len() - 1) / 2);
    for (i, a) in samples.iter().enumerate() {
        check_dim(d, a.len())?;
        for b in &samples[i + 1..] {
            dists.push(sq_dist(a, b));
        }
    }
    dists.sort_by(f64::total_cmp);
    let n = dists.len();
    let med = if n % 2 == 1 {
        dists[n / 2]
    } else {
        0.5 * (dists[n / 2 - 1] + dists[n / 2])
    };
    if med > 0.0 {
        Ok(med)
    } else {
        Err(Error::Numeric(
            "median pairwise distance is zero (samples are identical)".into(),
        ))
    }
}

/// Bandwidth given either as a number or as `"median"`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Bandwidth {
    Fixed(f64),
    Named(BandwidthRule),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BandwidthRule {
    Median,
}

impl Default for Bandwidth {
    fn default() -> Self {
        Bandwidth::Fixed(1.0)
    }
}

impl Bandwidth {
    fn resolve(&self, samples: &[Vec<f64>]) -> Result<f64> {
        match self {
            Bandwidth::Fixed(v) => Ok(*v),
            Bandwidth::Named(BandwidthRule::Median) => median_heuristic(samples),
        }
    }
}

fn default_epsilon0() -> f64 {
    0.1
}

fn default_code_dim() -> usize {
    4
}

/// JSON kernel description. The joint kernel on X×Y is always the tensor product
/// of the configured X and Y kernels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum KernelConfig {
    Gaussian {
        #[serde(default)]
        bandwidth_sq: Bandwidth,
    },
    Linear,
    Deep {
        /// Bandwidth of κ₂ on the original space.
        #[serde(default)]
        bandwidth_sq: Bandwidth,
        /// Bandwidth of κ₁ on the code space.
        #[serde(default)]
        code_bandwidth_sq: Bandwidth,
        #[serde(default = "default_epsilon0")]
        epsilon0: f64,
        #[serde(default = "default_code_dim")]
        code_dim: usize,
        #[serde(default)]
        encoder_seed: u64,
    },
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig::Gaussian {
            bandwidth_sq: Bandwidth::default(),
        }
    }
}

impl KernelConfig {
    /// Builds the kernel; `samples` feed the median heuristic when requested.
    pub fn build(&self, samples: &[Vec<f64>]) -> Result<Kernel> {
        match self {
            KernelConfig::Gaussian { bandwidth_sq } => Kernel::gaussian(bandwidth_sq.resolve(samples)?),
            KernelConfig::Linear => Ok(Kernel::Linear(LinearKernel)),
            KernelConfig::Deep {
                bandwidth_sq,
                code_bandwidth_sq,
                epsilon0,
                code_dim,
                encoder_seed,
            } => {
                let dim = samples
                    .first()
                    .map(Vec::len)
                    .ok_or_else(|| Error::Config("deep kernel needs samples to fix its input dimension".into()))?;
                let encoder = TanhProjection::random(dim, *code_dim, *encoder_seed)?;
                let codes: Vec<Vec<f64>> = samples.iter().map(|s| encoder.encode(s)).collect();
                let kappa1 = GaussianKernel::new(code_bandwidth_sq.resolve(&codes)?)?;
                let kappa2 = GaussianKernel::new(bandwidth_sq.resolve(samples)?)?;
                DeepKernel::new(Arc::new(encoder), kappa1, kappa2, *epsilon0).map(Kernel::Deep)
            }
        }
    }
}
