//! Multilayer perceptron with hand-written backpropagation, Adam, and the
//! conditional generator wrapper built on top of it.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};
use crate::rng;

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn fresh_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

/// Dense layer `z = W h + b`, with `W` stored as `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }

    fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// ReLU on hidden layers, identity on the output layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Layer>,
    version: u64,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

/// Activations recorded by a forward pass, consumed by [`Mlp::backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    version: u64,
    /// Input to each layer, `batch × in_dim`.
    inputs: Vec<DMatrix<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<DMatrix<f64>>,
    /// Smallest `|z|` over all hidden pre-activations (`inf` without hidden layers).
    pub min_abs_preactivation: f64,
}

impl ForwardCache {
    /// Hash of the ReLU on/off pattern; changes iff some unit crossed its kink.
    pub fn activation_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for z in &self.pre {
            for v in z.iter() {
                h ^= (*v > 0.0) as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    pub fn batch_size(&self) -> usize {
        self.inputs.first().map_or(0, |m| m.nrows())
    }
}

impl Mlp {
    /// He-uniform initialization: `W ~ U(±√(6/fan_in))`, zero biases.
    pub fn new(layer_dims: &[usize], seed: u64) -> Result<Self> {
        validate_dims(layer_dims)?;
        let mut r = rng::seeded(seed);
        let layers = layer_dims
            .windows(2)
            .map(|w| {
                let (d_in, d_out) = (w[0], w[1]);
                let bound = (6.0 / d_in as f64).sqrt();
                Layer {
                    weights: DMatrix::from_fn(d_out, d_in, |_, _| r.random_range(-bound..bound)),
                    bias: DVector::zeros(d_out),
                }
            })
            .collect();
        Ok(Self {
            layers,
            version: fresh_version(),
        })
    }

    pub fn zeros(layer_dims: &[usize]) -> Result<Self> {
        validate_dims(layer_dims)?;
        let layers = layer_dims
            .windows(2)
            .map(|w| Layer {
                weights: DMatrix::zeros(w[1], w[0]),
                bias: DVector::zeros(w[1]),
            })
            .collect();
        Ok(Self {
            layers,
            version: fresh_version(),
        })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return invalid("network needs at least one layer");
        }
        for (i, l) in layers.iter().enumerate() {
            if l.in_dim() == 0 || l.out_dim() == 0 {
                return invalid(format!("layer {i} has a zero dimension"));
            }
            check_dim(l.out_dim(), l.bias.len())?;
            if i > 0 {
                check_dim(layers[i - 1].out_dim(), l.in_dim())?;
            }
        }
        Ok(Self {
            layers,
            version: fresh_version(),
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].in_dim())
            .chain(self.layers.iter().map(Layer::out_dim))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::num_params).sum()
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        let (mut out, cache) = self.forward_batch(&[input.to_vec()])?;
        Ok((out.pop().expect("batch of one"), cache))
    }

    /// Forward pass over a batch of inputs (one row per sample).
    pub fn forward_batch(&self, inputs: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, ForwardCache)> {
        let h = self.input_matrix(inputs)?;
        let mut cache = ForwardCache {
            version: self.version,
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len() - 1),
            min_abs_preactivation: f64::INFINITY,
        };
        let last = self.layers.len() - 1;
        let mut h = h;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = affine(layer, &h);
            cache.inputs.push(h);
            if i == last {
                return Ok((rows(&z), cache));
            }
            for v in z.iter() {
                cache.min_abs_preactivation = cache.min_abs_preactivation.min(v.abs());
            }
            h = z.map(|v| v.max(0.0));
            cache.pre.push(z);
        }
        unreachable!("loop returns on the last layer")
    }

    /// Forward pass without recording a cache.
    pub fn predict_batch(&self, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let mut h = self.input_matrix(inputs)?;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = affine(layer, &h);
            if i < last {
                h.apply(|v| *v = v.max(0.0));
            }
        }
        Ok(rows(&h))
    }

    fn input_matrix(&self, inputs: &[Vec<f64>]) -> Result<DMatrix<f64>> {
        if inputs.is_empty() {
            return invalid("forward pass needs at least one input");
        }
        let d = self.input_dim();
        for v in inputs {
            check_dim(d, v.len())?;
        }
        Ok(DMatrix::from_fn(inputs.len(), d, |i, j| inputs[i][j]))
    }

    /// Gradient of `Σ_b output_grads[b] · output[b]` with respect to every
    /// parameter, in [`Mlp::params_flat`] order.
    pub fn backward(&self, cache: &ForwardCache, output_grads: &[Vec<f64>]) -> Result<Vec<f64>> {
        if cache.version != self.version {
            return invalid("forward cache is stale: parameters changed since the forward pass");
        }
        let batch = cache.batch_size();
        check_dim(batch, output_grads.len())?;
        let d_out = self.output_dim();
        for g in output_grads {
            check_dim(d_out, g.len())?;
        }
        let mut dz = DMatrix::from_fn(batch, d_out, |i, j| output_grads[i][j]);
        let mut per_layer: Vec<(DMatrix<f64>, DVector<f64>)> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let h = &cache.inputs[i];
            let dw = dz.transpose() * h;
            let db = DVector::from_iterator(dz.ncols(), dz.column_iter().map(|c| c.sum()));
            per_layer.push((dw, db));
            if i > 0 {
                let mut dh = &dz * &layer.weights;
                let pre = &cache.pre[i - 1];
                dh.zip_apply(pre, |g, z| {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                });
                dz = dh;
            }
        }
        per_layer.reverse();
        let mut flat = Vec::with_capacity(self.num_params());
        for (dw, db) in &per_layer {
            push_layer(&mut flat, dw, db);
        }
        Ok(flat)
    }

    /// Parameters as one vector: per layer, the weights row by row, then the bias.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            push_layer(&mut flat, &l.weights, &l.bias);
        }
        flat
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        check_dim(self.num_params(), params.len())?;
        let mut it = params.iter().copied();
        for l in &mut self.layers {
            for i in 0..l.weights.nrows() {
                for j in 0..l.weights.ncols() {
                    l.weights[(i, j)] = it.next().expect("length checked");
                }
            }
            for b in l.bias.iter_mut() {
                *b = it.next().expect("length checked");
            }
        }
        self.version = fresh_version();
        Ok(())
    }
}

fn validate_dims(layer_dims: &[usize]) -> Result<()> {
    if layer_dims.len() < 2 {
        return invalid("layer_dims needs an input and an output size");
    }
    if layer_dims.contains(&0) {
        return invalid("layer sizes must be positive");
    }
    Ok(())
}

fn affine(layer: &Layer, h: &DMatrix<f64>) -> DMatrix<f64> {
    let mut z = h * layer.weights.transpose();
    for mut row in z.row_iter_mut() {
        row += layer.bias.transpose();
    }
    z
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn push_layer(flat: &mut Vec<f64>, w: &DMatrix<f64>, b: &DVector<f64>) {
    for i in 0..w.nrows() {
        flat.extend(w.row(i).iter());
    }
    flat.extend(b.iter());
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub const DEFAULT_LR: f64 = 5e-4;

    pub fn new(num_params: usize, lr: f64) -> Self {
        Self {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        check_dim(self.m.len(), params.len())?;
        check_dim(self.m.len(), grads.len())?;
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }

    /// Applies one step directly to a network's parameters.
    pub fn step_mlp(&mut self, net: &mut Mlp, grads: &[f64]) -> Result<()> {
        let mut p = net.params_flat();
        self.step(&mut p, grads)?;
        net.set_params_flat(&p)
    }
}

/// Loss value and gradient of a scalar objective of the network parameters.
#[derive(Clone, Debug)]
pub struct LossEval {
    pub value: f64,
    /// Gradient in [`Mlp::params_flat`] order.
    pub grad: Vec<f64>,
    pub min_abs_preactivation: f64,
    pub activation_signature: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub num_params: usize,
    pub max_rel_error: f64,
    /// Worst parameter index, when any was checked.
    pub worst_index: Option<usize>,
    /// Some hidden pre-activation was within the kink margin at the base point.
    pub near_kink: bool,
    /// Parameters skipped because a finite-difference probe flipped a ReLU.
    pub skipped: usize,
    pub tolerance: f64,
    pub passed: bool,
}

pub const KINK_MARGIN: f64 = 1e-6;
pub const FD_STEP: f64 = 1e-5;
const REL_ERROR_FLOOR: f64 = 1e-6;

/// `|a − f| / max(|a|, |f|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares the analytic gradient of `loss` against central differences.
///
/// The caller should re-sample the configuration when the report says
/// `near_kink`, since the loss is not differentiable there.
pub fn grad_check(net: &Mlp, loss: impl Fn(&Mlp) -> Result<LossEval>, tolerance: f64) -> Result<GradCheckReport> {
    let base = loss(net)?;
    let params = net.params_flat();
    check_dim(params.len(), base.grad.len())?;
    let mut probe = net.clone();
    let mut worst = (0.0f64, None);
    let mut skipped = 0;
    let mut shifted = params.clone();
    for i in 0..params.len() {
        shifted[i] = params[i] + FD_STEP;
        probe.set_params_flat(&shifted)?;
        let up = loss(&probe)?;
        shifted[i] = params[i] - FD_STEP;
        probe.set_params_flat(&shifted)?;
        let down = loss(&probe)?;
        shifted[i] = params[i];
        if up.activation_signature != base.activation_signature
            || down.activation_signature != base.activation_signature
        {
            skipped += 1;
            continue;
        }
        let numeric = (up.value - down.value) / (2.0 * FD_STEP);
        let e = relative_error(base.grad[i], numeric);
        if e > worst.0 || worst.1.is_none() {
            worst = (e, Some(i));
        }
    }
    let near_kink = base.min_abs_preactivation < KINK_MARGIN;
    Ok(GradCheckReport {
        num_params: params.len(),
        max_rel_error: worst.0,
        worst_index: worst.1,
        near_kink,
        skipped,
        tolerance,
        passed: worst.0 < tolerance && !near_kink,
    })
}

/// A conditional sampler `ŷ = G(ξ, x)`.
pub trait ConditionalGenerator: Send + Sync {
    fn x_dim(&self) -> usize;
    fn xi_dim(&self) -> usize;
    fn y_dim(&self) -> usize;
    /// One output per `(x, ξ)` row.
    fn generate(&self, xs: &[Vec<f64>], xis: &[Vec<f64>]) -> Result<Vec<Vec<f64>>>;
}

/// MLP generator fed with the concatenation `[x ; ξ]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGenerator {
    pub net: Mlp,
    x_dim: usize,
    xi_dim: usize,
}

pub const MODEL_FORMAT: &str = "condmmd-mlp";
pub const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerFile {
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format: String,
    version: u32,
    layer_dims: Vec<usize>,
    x_dim: usize,
    xi_dim: usize,
    layers: Vec<LayerFile>,
}

impl MlpGenerator {
    /// Builds a freshly initialized generator with the given hidden sizes.
    pub fn new(x_dim: usize, xi_dim: usize, hidden: &[usize], y_dim: usize, seed: u64) -> Result<Self> {
        if xi_dim == 0 {
            return Err(Error::Config("xi_dim must be at least 1".into()));
        }
        let mut dims = vec![x_dim + xi_dim];
        dims.extend_from_slice(hidden);
        dims.push(y_dim);
        Ok(Self {
            net: Mlp::new(&dims, seed)?,
            x_dim,
            xi_dim,
        })
    }

    pub fn from_net(net: Mlp, x_dim: usize, xi_dim: usize) -> Result<Self> {
        check_dim(net.input_dim(), x_dim + xi_dim)?;
        Ok(Self { net, x_dim, xi_dim })
    }

    pub fn inputs(&self, xs: &[Vec<f64>], xis: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        check_dim(xs.len(), xis.len())?;
        xs.iter()
            .zip(xis)
            .map(|(x, xi)| {
                check_dim(self.x_dim, x.len())?;
                check_dim(self.xi_dim, xi.len())?;
                Ok(x.iter().chain(xi).copied().collect())
            })
            .collect()
    }

    /// Generates and keeps the cache for a subsequent backward pass.
    pub fn generate_with_cache(&self, xs: &[Vec<f64>], xis: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, ForwardCache)> {
        self.net.forward_batch(&self.inputs(xs, xis)?)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            layer_dims: self.net.layer_dims(),
            x_dim: self.x_dim,
            xi_dim: self.xi_dim,
            layers: self
                .net
                .layers()
                .iter()
                .map(|l| LayerFile {
                    weights: l.weights.row_iter().map(|r| r.iter().copied().collect()).collect(),
                    bias: l.bias.iter().copied().collect(),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        if file.format != MODEL_FORMAT {
            return Err(Error::Schema(format!("unknown model format {:?}", file.format)));
        }
        if file.version != MODEL_VERSION {
            return Err(Error::Schema(format!("unsupported model version {}", file.version)));
        }
        if file.layers.len() + 1 != file.layer_dims.len() {
            return Err(Error::Schema("layer count disagrees with layer_dims".into()));
        }
        let mut layers = Vec::with_capacity(file.layers.len());
        for (i, l) in file.layers.into_iter().enumerate() {
            let (d_in, d_out) = (file.layer_dims[i], file.layer_dims[i + 1]);
            if l.weights.len() != d_out || l.weights.iter().any(|r| r.len() != d_in) || l.bias.len() != d_out {
                return Err(Error::Schema(format!("layer {i} shape disagrees with layer_dims")));
            }
            layers.push(Layer {
                weights: DMatrix::from_fn(d_out, d_in, |a, b| l.weights[a][b]),
                bias: DVector::from_vec(l.bias),
            });
        }
        let net = Mlp::from_layers(layers)?;
        if net.input_dim() != file.x_dim + file.xi_dim {
            return Err(Error::Schema("input width is not x_dim + xi_dim".into()));
        }
        Self::from_net(net, file.x_dim, file.xi_dim)
    }
}

impl ConditionalGenerator for MlpGenerator {
    fn x_dim(&self) -> usize {
        self.x_dim
    }

    fn xi_dim(&self) -> usize {
        self.xi_dim
    }

    fn y_dim(&self) -> usize {
        self.net.output_dim()
    }

    fn generate(&self, xs: &[Vec<f64>], xis: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        self.net.predict_batch(&self.inputs(xs, xis)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn quad_loss(target: Vec<Vec<f64>>, inputs: Vec<Vec<f64>>) -> impl Fn(&Mlp) -> Result<LossEval> {
        move |net| {
            let (out, cache) = net.forward_batch(&inputs)?;
            let mut value = 0.0;
            let mut g = Vec::new();
            for (o, t) in out.iter().zip(&target) {
                let d: Vec<f64> = o.iter().zip(t).map(|(a, b)| a - b).collect();
                value += 0.5 * d.iter().map(|v| v * v).sum::<f64>();
                g.push(d);
            }
            Ok(LossEval {
                value,
                grad: net.backward(&cache, &g)?,
                min_abs_preactivation: cache.min_abs_preactivation,
                activation_signature: cache.activation_signature(),
            })
        }
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::zeros(&[3, 4, 2]).unwrap();
        let (out, _) = net.forward(&[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn identity_layer_passthrough() {
        let layer = Layer {
            weights: DMatrix::identity(3, 3),
            bias: DVector::zeros(3),
        };
        let net = Mlp::from_layers(vec![layer]).unwrap();
        let x = [0.5, -1.5, 2.0];
        assert_eq!(net.forward(&x).unwrap().0, x.to_vec());
    }

    #[test]
    fn forward_is_deterministic() {
        let net = Mlp::new(&[4, 8, 8, 2], 3).unwrap();
        let x = [0.1, 0.2, -0.3, 0.9];
        assert_eq!(net.forward(&x).unwrap().0, net.forward(&x).unwrap().0);
        assert_eq!(net.predict_batch(&[x.to_vec()]).unwrap()[0], net.forward(&x).unwrap().0);
    }

    #[test]
    fn forward_rejects_wrong_dim() {
        let net = Mlp::new(&[2, 3, 1], 0).unwrap();
        assert!(matches!(net.forward(&[1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn zero_output_grad_gives_zero_param_grad() {
        let net = Mlp::new(&[2, 5, 1], 1).unwrap();
        let (_, cache) = net.forward(&[0.3, 0.4]).unwrap();
        let g = net.backward(&cache, &[vec![0.0]]).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linear_layer_weight_grad_is_input() {
        let net = Mlp::new(&[3, 1], 2).unwrap();
        let x = [0.7, -0.2, 1.1];
        let (_, cache) = net.forward(&x).unwrap();
        let g = net.backward(&cache, &[vec![1.0]]).unwrap();
        assert_eq!(&g[..3], &x);
        assert_eq!(g[3], 1.0);
    }

    #[test]
    fn stale_cache_rejected() {
        let mut net = Mlp::new(&[2, 3, 1], 1).unwrap();
        let (_, cache) = net.forward(&[0.1, 0.2]).unwrap();
        let p = net.params_flat();
        net.set_params_flat(&p).unwrap();
        assert!(net.backward(&cache, &[vec![1.0]]).is_err());
    }

    #[test]
    fn params_round_trip_and_count() {
        let mut net = Mlp::new(&[3, 4, 2], 9).unwrap();
        assert_eq!(net.num_params(), 3 * 4 + 4 + 4 * 2 + 2);
        let p: Vec<f64> = (0..net.num_params()).map(|i| i as f64).collect();
        net.set_params_flat(&p).unwrap();
        assert_eq!(net.params_flat(), p);
        assert_eq!(net.layers()[0].weights[(0, 1)], 1.0);
        assert!(net.set_params_flat(&p[1..]).is_err());
    }

    #[test]
    fn linear_net_quadratic_loss_exact_gradient() {
        let net = Mlp::new(&[3, 2], 5).unwrap();
        let inputs = vec![vec![0.2, -0.4, 0.9], vec![1.0, 0.5, -0.5]];
        let target = vec![vec![0.3, 0.1], vec![-1.0, 2.0]];
        let rep = grad_check(&net, quad_loss(target, inputs), 1e-9).unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn relu_net_gradient_matches_finite_differences() {
        let mut r = rng::seeded(11);
        let net = Mlp::new(&[3, 6, 5, 2], 8).unwrap();
        let inputs: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..3).map(|_| r.random_range(-1.0..1.0)).collect())
            .collect();
        let target: Vec<Vec<f64>> = (0..4).map(|_| vec![r.random_range(-1.0..1.0), 0.5]).collect();
        let rep = grad_check(&net, quad_loss(target, inputs), 1e-4).unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn zero_parameter_report_passes() {
        let net = Mlp::new(&[1, 1], 0).unwrap();
        let rep = grad_check(
            &net,
            |_| {
                Ok(LossEval {
                    value: 0.0,
                    grad: vec![0.0; 2],
                    min_abs_preactivation: f64::INFINITY,
                    activation_signature: 0,
                })
            },
            1e-9,
        )
        .unwrap();
        assert!(rep.passed);
        assert_eq!(rep.max_rel_error, 0.0);
    }

    #[test]
    fn adam_zero_grad_is_noop() {
        let mut s = AdamState::new(3, 1e-3);
        let mut p = vec![1.0, -2.0, 0.5];
        s.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn adam_first_step_is_lr_sign() {
        let lr = 5e-4;
        let mut s = AdamState::new(3, lr);
        let mut p = vec![0.0; 3];
        s.step(&mut p, &[3.0, -0.01, 1e3]).unwrap();
        assert!((p[0] + lr).abs() < lr * 1e-6);
        assert!((p[1] - lr).abs() < lr * 1e-5);
        assert!((p[2] + lr).abs() < lr * 1e-6);
    }

    #[test]
    fn adam_constant_gradient_decreases_monotonically() {
        let mut s = AdamState::new(1, 1e-2);
        let mut p = vec![1.0];
        let mut prev = p[0];
        for _ in 0..100 {
            s.step(&mut p, &[0.7]).unwrap();
            assert!(p[0] < prev);
            prev = p[0];
        }
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut s = AdamState::new(2, 1e-3);
        assert!(s.step(&mut [0.0; 3], &[0.0; 3]).is_err());
    }

    #[test]
    fn model_json_round_trip() {
        let g = MlpGenerator::new(2, 3, &[4, 4], 1, 7).unwrap();
        let text = g.to_json().unwrap();
        let back = MlpGenerator::from_json(&text).unwrap();
        assert_eq!(back, g);
        assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn model_json_rejects_corruption() {
        let g = MlpGenerator::new(1, 2, &[3], 1, 7).unwrap();
        let text = g.to_json().unwrap();
        assert!(MlpGenerator::from_json(&text[..text.len() / 2]).is_err());
        assert!(MlpGenerator::from_json(&text.replace("condmmd-mlp", "other")).is_err());
    }

    proptest! {
        #[test]
        fn adam_scale_invariant_first_step(g in proptest::collection::vec(-5.0f64..5.0, 1..8), c in 0.1f64..100.0) {
            let n = g.len();
            let mut a = AdamState::new(n, 1e-3);
            let mut b = AdamState::new(n, 1e-3);
            let mut pa = vec![0.0; n];
            let mut pb = vec![0.0; n];
            a.step(&mut pa, &g).unwrap();
            let scaled: Vec<f64> = g.iter().map(|v| v * c).collect();
            b.step(&mut pb, &scaled).unwrap();
            for (x, y) in pa.iter().zip(&pb) {
                prop_assert_eq!(x.signum(), y.signum());
            }
        }
    }
}
