//! The energy `E(x) = ‖x − Ψ(x)‖² / (2σ_f²)`, its score `H = ∇E` and the
//! residual map `T = I − H`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{grad, GradMode, Var};
use crate::error::{Error, Result};
use crate::lcmt;
use crate::rng::seeded;
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Architecture of the convolutional network `Ψ`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub layers: usize,
    pub channels: usize,
    pub kernel_size: usize,
    pub io_channels: usize,
    pub bias: bool,
    #[serde(default)]
    pub activation: Activation,
}

/// Nonlinearity between convolution layers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    /// `exp(x) - 1` below zero. Continuously differentiable, so the score
    /// `∇E` is continuous, unlike with ReLU.
    Elu,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            layers: 5,
            channels: 64,
            kernel_size: 3,
            io_channels: 2,
            bias: true,
            activation: Activation::Relu,
        }
    }
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.channels == 0 || self.io_channels == 0 {
            return Err(Error::Config("network dimensions must be positive".into()));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        Ok(())
    }

    /// `(out_channels, in_channels)` of each layer.
    pub fn layer_channels(&self) -> Vec<(usize, usize)> {
        (0..self.layers)
            .map(|l| {
                let c_in = if l == 0 { self.io_channels } else { self.channels };
                let c_out = if l + 1 == self.layers {
                    self.io_channels
                } else {
                    self.channels
                };
                (c_out, c_in)
            })
            .collect()
    }

    pub fn kernel_shapes(&self) -> Vec<[usize; 4]> {
        self.layer_channels()
            .into_iter()
            .map(|(o, i)| [o, i, self.kernel_size, self.kernel_size])
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.kernel_shapes()
            .iter()
            .map(|s| s.iter().product::<usize>() + if self.bias { s[0] } else { 0 })
            .sum()
    }
}

/// Parameter initialization scheme.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Init {
    /// He-style uniform kernels `U(−√(6/fan_in), √(6/fan_in))`, zero biases.
    FanInUniform,
    /// Embeds `Ψ(x) = c·x` through two channels that carry `x + IDENTITY_OFFSET`
    /// (exact while every input exceeds `-IDENTITY_OFFSET`), with `c` chosen
    /// so that `T = t_gain·I` at initialization. The other weights are
    /// fan-in uniform scaled by `jitter`. Needs biases.
    ScaledIdentity { t_gain: f64, jitter: f64 },
}

/// The energy model: network parameters plus the finest noise level `σ_f`.
#[derive(Clone, Debug)]
pub struct EnergyModel<T: Real> {
    spec: NetworkSpec,
    /// `[k0, b0, k1, b1, ...]`, biases omitted when `spec.bias` is false.
    params: Vec<Tensor<T>>,
    sigma_f: f64,
}

impl<T: Real> EnergyModel<T> {
    pub fn new(spec: NetworkSpec, params: Vec<Tensor<T>>, sigma_f: f64) -> Result<Self> {
        spec.validate()?;
        if !(sigma_f > 0.0) {
            return Err(Error::Config(format!("σ_f must be positive, got {sigma_f}")));
        }
        let expected = Self::param_shapes(&spec);
        if params.len() != expected.len() {
            return Err(Error::shape(
                "EnergyModel::new",
                format!("expected {} parameter tensors, got {}", expected.len(), params.len()),
            ));
        }
        for (p, s) in params.iter().zip(&expected) {
            if p.shape() != s.as_slice() {
                return Err(Error::shape(
                    "EnergyModel::new",
                    format!("parameter shape {:?}, expected {s:?}", p.shape()),
                ));
            }
        }
        Ok(Self {
            spec,
            params,
            sigma_f,
        })
    }

    pub fn zeros(spec: NetworkSpec, sigma_f: f64) -> Result<Self> {
        let params = Self::param_shapes(&spec).iter().map(|s| Tensor::zeros(s)).collect();
        Self::new(spec, params, sigma_f)
    }

    pub fn init(spec: NetworkSpec, sigma_f: f64, init: Init, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = seeded(seed, 0);
        let k = spec.kernel_size;
        let mut params = Vec::new();
        let layer_channels = spec.layer_channels();
        let identity = match init {
            Init::ScaledIdentity { t_gain, jitter } if spec.bias && spec.io_channels <= spec.channels => {
                Some((t_gain, jitter))
            }
            _ => None,
        };
        let n_layers = layer_channels.len();
        let io = spec.io_channels;
        for (l, &(c_out, c_in)) in layer_channels.iter().enumerate() {
            let fan_in = (c_in * k * k) as f64;
            let bound = (6.0 / fan_in).sqrt() * identity.map_or(1.0, |(_, j)| j);
            let mut kern: Tensor<T> = Tensor::from_fn(&[c_out, c_in, k, k], |_| {
                T::of_f64(rng.gen_range(-bound..=bound))
            });
            let mut bias = Tensor::zeros(&[c_out]);
            if let Some((t_gain, _)) = identity {
                let centre = k / 2;
                let gain = if l + 1 == n_layers {
                    1.0 - spec_sigma_gain(sigma_f, t_gain)
                } else {
                    1.0
                };
                let data = kern.data_mut();
                let rows = if l + 1 == n_layers { 0..c_out } else { 0..io };
                for o in rows {
                    data[o * c_in * k * k..(o + 1) * c_in * k * k].fill(T::zero());
                    data[((o * c_in + o) * k + centre) * k + centre] = T::of_f64(gain);
                }
                let b = bias.data_mut();
                if l == 0 {
                    b[..io].fill(T::of_f64(IDENTITY_OFFSET));
                }
                if l + 1 == n_layers {
                    b.fill(T::of_f64(-gain * IDENTITY_OFFSET));
                }
            }
            params.push(kern);
            if spec.bias {
                params.push(bias);
            }
        }
        Self::new(spec, params, sigma_f)
    }

    fn param_shapes(spec: &NetworkSpec) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        for s in spec.kernel_shapes() {
            shapes.push(s.to_vec());
            if spec.bias {
                shapes.push(vec![s[0]]);
            }
        }
        shapes
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn sigma_f(&self) -> f64 {
        self.sigma_f
    }

    pub fn with_params(&self, params: Vec<Tensor<T>>) -> Result<Self> {
        Self::new(self.spec.clone(), params, self.sigma_f)
    }

    pub fn cast<U: Real>(&self) -> EnergyModel<U> {
        EnergyModel {
            spec: self.spec.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            sigma_f: self.sigma_f,
        }
    }

    /// SHA-256 over architecture, `σ_f` and parameter values (as f64).
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.spec).expect("spec serializes"));
        h.update(self.sigma_f.to_le_bytes());
        for p in &self.params {
            for v in p.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn param_vars(&self, trainable: bool) -> Vec<Var<T>> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    Var::variable(p.clone())
                } else {
                    Var::constant(p.clone())
                }
            })
            .collect()
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.rank() != 3 || x.shape()[0] != self.spec.io_channels {
            return Err(Error::shape(
                "psi",
                format!(
                    "expected [{}, H, W], got {:?}",
                    self.spec.io_channels,
                    x.shape()
                ),
            ));
        }
        Ok(())
    }

    /// Network forward pass on the graph, with explicit parameter nodes.
    pub fn psi_var(&self, x: &Var<T>, params: &[Var<T>]) -> Result<Var<T>> {
        self.check_input(x.value())?;
        let stride = if self.spec.bias { 2 } else { 1 };
        let mut h = x.clone();
        for l in 0..self.spec.layers {
            let kern = &params[l * stride];
            let bias = self.spec.bias.then(|| &params[l * stride + 1]);
            h = h.conv2d(kern, bias)?;
            if l + 1 < self.spec.layers {
                h = match self.spec.activation {
                    Activation::Relu => h.relu(),
                    Activation::Elu => h.elu(),
                };
            }
        }
        Ok(h)
    }

    pub fn energy_var(&self, x: &Var<T>, params: &[Var<T>]) -> Result<Var<T>> {
        let r = x.sub(&self.psi_var(x, params)?)?;
        Ok(r.norm_sq().scale(T::of_f64(0.5 / (self.sigma_f * self.sigma_f))))
    }

    /// `∇_x E` at `x` as a graph node. With `GradMode::Record` the result
    /// stays differentiable in `x` and in any trainable parameters.
    pub fn score_var(&self, x: &Var<T>, params: &[Var<T>], mode: GradMode) -> Result<Var<T>> {
        let e = self.energy_var(x, params)?;
        let mut g = grad(&e, std::slice::from_ref(x), mode)?;
        Ok(g.grads.remove(0))
    }

    pub fn psi(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let params = self.param_vars(false);
        Ok(self.psi_var(&Var::constant(x.clone()), &params)?.value().clone())
    }

    pub fn energy(&self, x: &Tensor<T>) -> Result<T> {
        let r = x.sub(&self.psi(x)?)?;
        Ok(r.norm_sq() * T::of_f64(0.5 / (self.sigma_f * self.sigma_f)))
    }

    pub fn score(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let params = self.param_vars(false);
        let xv = Var::variable(x.clone());
        Ok(self.score_var(&xv, &params, GradMode::Detached)?.value().clone())
    }

    pub fn t_map(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.sub(&self.score(x)?)
    }

    /// `∇²E(x) v`, by differentiating `⟨∇E(x), v⟩` once more.
    pub fn hessian_vec(&self, x: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
        let params = self.param_vars(false);
        let xv = Var::variable(x.clone());
        let h = self.score_var(&xv, &params, GradMode::Record)?;
        let s = h.dot(&Var::constant(v.clone()))?;
        let mut g = grad(&s, &[xv], GradMode::Detached)?;
        Ok(g.grads.remove(0).value().clone())
    }

    pub fn save(&self, path: &Path, meta: &CheckpointMeta) -> Result<()> {
        lcmt::save_all(path, &self.params)?;
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.to_string(),
            version: 1,
            dtype: T::NAME.to_string(),
            network: self.spec.clone(),
            layer_shapes: self.params.iter().map(|p| p.shape().to_vec()).collect(),
            sigma_f: self.sigma_f,
            meta: meta.clone(),
            hash: self.hash(),
        };
        let side = sidecar_path(path);
        fs::write(&side, serde_json::to_vec_pretty(&header)?).map_err(|e| Error::io(side, e))
    }

    /// Loads a checkpoint, converting parameters to `T`.
    pub fn load(path: &Path) -> Result<(Self, CheckpointHeader)> {
        let side = sidecar_path(path);
        let text = fs::read(&side).map_err(|e| Error::io(&side, e))?;
        let header: CheckpointHeader = serde_json::from_slice(&text)?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("not a checkpoint: {}", header.format)));
        }
        let params = lcmt::load_all(path)?;
        let model = Self::new(header.network.clone(), params, header.sigma_f)?;
        Ok((model, header))
    }
}

/// `σ_f·√(1 − t_gain)`: the residual gain that makes `T ≈ t_gain·I` when
/// `Ψ(x) = (1 − σ_f√(1 − t_gain))·x`.
/// Inputs above `-IDENTITY_OFFSET` pass the identity path of
/// [`Init::ScaledIdentity`] unchanged.
pub const IDENTITY_OFFSET: f64 = 4.0;

fn spec_sigma_gain(sigma_f: f64, t_gain: f64) -> f64 {
    sigma_f * (1.0 - t_gain).max(0.0).sqrt()
}

const CHECKPOINT_FORMAT: &str = "lcmuse-checkpoint";

/// Training context stored alongside the parameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub m: f64,
    pub delta: f64,
    pub l: f64,
    #[serde(default)]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub network: NetworkSpec,
    pub layer_shapes: Vec<Vec<usize>>,
    pub sigma_f: f64,
    pub meta: CheckpointMeta,
    pub hash: String,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Certified Lipschitz constant of the score when `Lip(T) ≤ 1 − m`:
/// `Lip(H) = Lip(I − T) ≤ 1 + (1 − m) = 2 − m`.
pub fn score_lipschitz_bound(m: f64) -> Result<f64> {
    if !(m > 0.0 && m <= 1.0) {
        return Err(Error::InvalidArgument(format!("m must lie in (0, 1], got {m}")));
    }
    Ok(2.0 - m)
}

/// A closed Euclidean ball.
#[derive(Clone, Debug)]
pub struct Ball<T: Real> {
    pub center: Tensor<T>,
    pub radius: T,
}

impl<T: Real> Ball<T> {
    pub fn new(center: Tensor<T>, radius: T) -> Result<Self> {
        if !(radius > T::zero()) {
            return Err(Error::InvalidArgument(format!("ball radius must be positive, got {radius}")));
        }
        Ok(Self { center, radius })
    }

    pub fn contains(&self, u: &Tensor<T>) -> Result<bool> {
        Ok(u.sub(&self.center)?.norm() <= self.radius)
    }

    /// Nearest point of the ball.
    pub fn project(&self, u: &Tensor<T>) -> Result<Tensor<T>> {
        let d = u.sub(&self.center)?;
        let n = d.norm();
        if n <= self.radius {
            return Ok(u.clone());
        }
        self.center.axpy(self.radius / n, &d)
    }
}

/// A gradient field `H = ∇E` that the probes, the Lipschitz estimator and
/// the MAP solver can query.
pub trait ScoreField<T: Real>: Sync {
    fn energy(&self, x: &Tensor<T>) -> Result<T>;
    fn score(&self, x: &Tensor<T>) -> Result<Tensor<T>>;

    fn energy_and_score(&self, x: &Tensor<T>) -> Result<(T, Tensor<T>)> {
        Ok((self.energy(x)?, self.score(x)?))
    }

    /// Noise scale `σ_f` that sets `ζ = η/σ_f` in the MAP solver.
    fn sigma_f(&self) -> f64 {
        1.0
    }
    /// Hessian-vector product `∇²E(x) v`.
    fn hessian_vec(&self, x: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>>;

    fn t_map(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.sub(&self.score(x)?)
    }

    /// `J_T(x)^T u = u − ∇²E(x) u`.
    fn t_vjp(&self, x: &Tensor<T>, u: &Tensor<T>) -> Result<Tensor<T>> {
        u.sub(&self.hessian_vec(x, u)?)
    }

    /// `d = T(x1) − T(x2)` with `J_T(x1)^T d` and `J_T(x2)^T d`.
    fn t_difference_vjp(
        &self,
        x1: &Tensor<T>,
        x2: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let d = self.t_map(x1)?.sub(&self.t_map(x2)?)?;
        let g1 = self.t_vjp(x1, &d)?;
        let g2 = self.t_vjp(x2, &d)?;
        Ok((d, g1, g2))
    }
}

impl<T: Real> ScoreField<T> for EnergyModel<T> {
    fn energy(&self, x: &Tensor<T>) -> Result<T> {
        EnergyModel::energy(self, x)
    }

    fn score(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        EnergyModel::score(self, x)
    }

    fn energy_and_score(&self, x: &Tensor<T>) -> Result<(T, Tensor<T>)> {
        let params = self.param_vars(false);
        let xv = Var::variable(x.clone());
        let e = self.energy_var(&xv, &params)?;
        let g = grad(&e, &[xv], GradMode::Detached)?.values().remove(0);
        Ok((e.value().item(), g))
    }

    fn sigma_f(&self) -> f64 {
        self.sigma_f
    }

    fn hessian_vec(&self, x: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
        EnergyModel::hessian_vec(self, x, v)
    }

    fn t_difference_vjp(
        &self,
        x1: &Tensor<T>,
        x2: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        // one graph through both points, one backward pass
        let params = self.param_vars(false);
        let v1 = Var::variable(x1.clone());
        let v2 = Var::variable(x2.clone());
        let t1 = v1.sub(&self.score_var(&v1, &params, GradMode::Record)?)?;
        let t2 = v2.sub(&self.score_var(&v2, &params, GradMode::Record)?)?;
        let d = t1.sub(&t2)?;
        let half = d.norm_sq().scale(T::of_f64(0.5));
        let g = grad(&half, &[v1, v2], GradMode::Detached)?.values();
        Ok((d.value().clone(), g[0].clone(), g[1].neg()))
    }
}

/// `E(x) = ½ xᵀ M x` for a dense symmetric `M`; used to build fields with
/// known spectra.
#[derive(Clone, Debug)]
pub struct QuadraticField {
    shape: Vec<usize>,
    n: usize,
    /// Row-major `n × n`.
    matrix: Vec<f64>,
}

impl QuadraticField {
    pub fn new(shape: &[usize], matrix: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if matrix.len() != n * n {
            return Err(Error::shape(
                "QuadraticField",
                format!("matrix has {} entries, expected {}", matrix.len(), n * n),
            ));
        }
        for i in 0..n {
            for j in 0..i {
                if (matrix[i * n + j] - matrix[j * n + i]).abs() > 1e-12 {
                    return Err(Error::InvalidArgument("matrix must be symmetric".into()));
                }
            }
        }
        Ok(Self {
            shape: shape.to_vec(),
            n,
            matrix,
        })
    }

    /// `M = c·I`.
    pub fn scaled_identity(shape: &[usize], c: f64) -> Self {
        let n: usize = shape.iter().product();
        let mut matrix = vec![0.0; n * n];
        for i in 0..n {
            matrix[i * n + i] = c;
        }
        Self {
            shape: shape.to_vec(),
            n,
            matrix,
        }
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    fn apply<T: Real>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.shape() != self.shape.as_slice() {
            return Err(Error::shape(
                "QuadraticField",
                format!("expected {:?}, got {:?}", self.shape, x.shape()),
            ));
        }
        let d = x.data();
        Ok(Tensor::from_fn(&self.shape, |i| {
            let row = &self.matrix[i * self.n..(i + 1) * self.n];
            T::of_f64(row.iter().zip(d).map(|(m, v)| m * v.as_f64()).sum())
        }))
    }
}

impl<T: Real> ScoreField<T> for QuadraticField {
    fn energy(&self, x: &Tensor<T>) -> Result<T> {
        Ok(x.dot(&self.apply(x)?)? * T::of_f64(0.5))
    }

    fn score(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply(x)
    }

    fn hessian_vec(&self, _x: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply(v)
    }
}

/// Power-iteration estimate of `‖∇²E(x)‖₂`, a local Lipschitz constant of
/// the score at `x`.
pub fn estimate_score_lipschitz<T: Real, F: ScoreField<T>>(
    field: &F,
    x: &Tensor<T>,
    iters: usize,
    seed: u64,
) -> Result<f64> {
    let start = crate::rng::normal_tensor(&mut seeded(seed, 0), x.shape());
    let squared = crate::linalg::power_iteration(
        |v| field.hessian_vec(x, &field.hessian_vec(x, v)?),
        &start,
        iters,
    )?;
    Ok(squared.max(0.0).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::normal_tensor;
    use crate::tensor::conv2d;

    fn small_spec(layers: usize, channels: usize) -> NetworkSpec {
        NetworkSpec {
            layers,
            channels,
            kernel_size: 3,
            io_channels: 2,
            bias: true,
            activation: Activation::Relu,
        }
    }

    fn random_model(layers: usize, channels: usize, seed: u64) -> EnergyModel<f64> {
        let m = EnergyModel::init(small_spec(layers, channels), 0.5, Init::FanInUniform, seed).unwrap();
        // nonzero biases so the oracle exercises them
        let mut rng = seeded(seed, 9);
        let params = m
            .params()
            .iter()
            .map(|p| {
                if p.rank() == 1 {
                    normal_tensor::<f64>(&mut rng, p.shape()).scale(0.1)
                } else {
                    p.clone()
                }
            })
            .collect();
        m.with_params(params).unwrap()
    }

    /// Layer-by-layer forward pass using the plain tensor convolution.
    fn psi_oracle(m: &EnergyModel<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let p = m.params();
        let mut h = x.clone();
        for l in 0..m.spec().layers {
            h = conv2d(&h, &p[2 * l], &p[2 * l + 1]).unwrap();
            if l + 1 < m.spec().layers {
                h = match m.spec().activation {
                    Activation::Relu => h.relu(),
                    Activation::Elu => h.map(|v| if v > 0.0 { v } else { v.exp_m1() }),
                };
            }
        }
        h
    }

    #[test]
    fn zero_network_psi_is_zero() {
        let m = EnergyModel::<f64>::zeros(small_spec(5, 4), 0.1).unwrap();
        let x = normal_tensor(&mut seeded(1, 0), &[2, 6, 6]);
        assert_eq!(m.psi(&x).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn single_layer_identity_kernel() {
        let spec = NetworkSpec {
            layers: 1,
            ..small_spec(1, 2)
        };
        let mut k = Tensor::<f64>::zeros(&[2, 2, 3, 3]);
        k.data_mut()[4] = 1.0; // (0,0) centre
        k.data_mut()[(2 + 1) * 9 + 4] = 1.0; // (1,1) centre
        let m = EnergyModel::new(spec, vec![k, Tensor::zeros(&[2])], 0.1).unwrap();
        let x = normal_tensor(&mut seeded(2, 0), &[2, 5, 5]);
        assert_eq!(m.psi(&x).unwrap(), x);
        assert_eq!(m.energy(&x).unwrap(), 0.0);
    }

    #[test]
    fn psi_matches_layer_oracle() {
        let m = random_model(3, 5, 3);
        let x = normal_tensor(&mut seeded(3, 1), &[2, 7, 6]);
        let d = m.psi(&x).unwrap().sub(&psi_oracle(&m, &x)).unwrap().max_abs();
        assert!(d < 1e-10);
    }

    #[test]
    fn psi_rejects_wrong_channels() {
        let m = random_model(2, 3, 4);
        assert!(m.psi(&Tensor::zeros(&[3, 4, 4])).is_err());
    }

    #[test]
    fn zero_network_energy_and_maps() {
        let m = EnergyModel::<f64>::zeros(small_spec(5, 4), 0.1).unwrap();
        // ‖x‖² = 2
        let x = Tensor::new(&[2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((m.energy(&x).unwrap() - 100.0).abs() < 1e-9);
        let s = m.score(&x).unwrap();
        assert!(s.sub(&x.scale(100.0)).unwrap().max_abs() < 1e-9);
        let t = m.t_map(&x).unwrap();
        assert!(t.sub(&x.scale(-99.0)).unwrap().max_abs() < 1e-9);

        let m1 = EnergyModel::<f64>::zeros(small_spec(5, 4), 1.0).unwrap();
        assert!(m1.t_map(&x).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn energy_matches_oracle_and_is_nonnegative() {
        let m = random_model(3, 4, 5);
        let x = normal_tensor(&mut seeded(5, 1), &[2, 6, 6]);
        let r = x.sub(&psi_oracle(&m, &x)).unwrap();
        let oracle = 0.5 / (0.5 * 0.5) * r.norm_sq();
        let e = m.energy(&x).unwrap();
        assert!(e >= 0.0);
        assert!((e - oracle).abs() < 1e-10 * oracle.max(1.0));
    }

    #[test]
    fn score_matches_finite_differences() {
        let m = random_model(3, 4, 6);
        let mut rng = seeded(6, 1);
        let x = normal_tensor::<f64>(&mut rng, &[2, 5, 5]);
        let s = m.score(&x).unwrap();
        let eps = 1e-5;
        for k in 0..5 {
            let d = crate::rng::unit_direction::<f64>(&mut rng, x.shape());
            let ep = m.energy(&x.axpy(eps, &d).unwrap()).unwrap();
            let em = m.energy(&x.axpy(-eps, &d).unwrap()).unwrap();
            let fd = (ep - em) / (2.0 * eps);
            let an = s.dot(&d).unwrap();
            let rel = (fd - an).abs() / an.abs().max(1e-8);
            assert!(rel < 1e-6, "direction {k}: fd {fd} vs {an} (rel {rel})");
        }
    }

    #[test]
    fn score_matches_closed_form_vjp() {
        let m = random_model(2, 3, 7);
        let x = normal_tensor::<f64>(&mut seeded(7, 1), &[2, 4, 4]);
        // (x − Ψ) − J_Ψ^T (x − Ψ), scaled by 1/σ_f²
        let params = m.param_vars(false);
        let xv = Var::variable(x.clone());
        let psi = m.psi_var(&xv, &params).unwrap();
        let r = x.sub(psi.value()).unwrap();
        let vjp = grad(&psi.dot(&Var::constant(r.clone())).unwrap(), &[xv], GradMode::Detached)
            .unwrap()
            .values()
            .remove(0);
        let expected = r.sub(&vjp).unwrap().scale(1.0 / 0.25);
        assert!(m.score(&x).unwrap().sub(&expected).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn t_map_plus_score_is_identity() {
        let m = random_model(3, 4, 8);
        let x = normal_tensor::<f64>(&mut seeded(8, 1), &[2, 5, 4]);
        let sum = m.t_map(&x).unwrap().add(&m.score(&x).unwrap()).unwrap();
        assert!(sum.sub(&x).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn hessian_vec_matches_score_differences() {
        let m = random_model(3, 4, 9);
        let mut rng = seeded(9, 1);
        let x = normal_tensor::<f64>(&mut rng, &[2, 4, 4]);
        let v = crate::rng::unit_direction::<f64>(&mut rng, x.shape());
        let hv = m.hessian_vec(&x, &v).unwrap();
        let eps = 1e-6;
        let fd = m
            .score(&x.axpy(eps, &v).unwrap())
            .unwrap()
            .sub(&m.score(&x.axpy(-eps, &v).unwrap()).unwrap())
            .unwrap()
            .scale(0.5 / eps);
        assert!(hv.sub(&fd).unwrap().norm() < 1e-5 * hv.norm());
    }

    #[test]
    fn fixed_point_with_zero_jacobian_has_zero_score() {
        // Ψ ≡ b (zero kernels, bias b): x = b is a fixed point with J_Ψ = 0
        let spec = small_spec(2, 2);
        let mut m = EnergyModel::<f64>::zeros(spec, 0.3).unwrap();
        let mut params = m.params().to_vec();
        params[3] = Tensor::new(&[2], vec![0.4, -0.2]).unwrap();
        m = m.with_params(params).unwrap();
        let x = Tensor::from_fn(&[2, 3, 3], |i| if i < 9 { 0.4 } else { -0.2 });
        assert!(m.score(&x).unwrap().max_abs() < 1e-15);
        assert_eq!(m.energy(&x).unwrap(), 0.0);
    }

    #[test]
    fn lipschitz_bound_values() {
        assert!((score_lipschitz_bound(0.1).unwrap() - 1.9).abs() < 1e-15);
        assert_eq!(score_lipschitz_bound(1.0).unwrap(), 1.0);
        assert_eq!(score_lipschitz_bound(0.5).unwrap(), 1.5);
        assert!(score_lipschitz_bound(0.0).is_err());
        assert!(score_lipschitz_bound(1.5).is_err());
    }

    #[test]
    fn scaled_identity_init_sets_t_gain() {
        for activation in [Activation::Relu, Activation::Elu] {
            let spec = NetworkSpec {
                activation,
                ..small_spec(5, 6)
            };
            let m = EnergyModel::<f64>::init(
                spec,
                0.1,
                Init::ScaledIdentity {
                    t_gain: 0.5,
                    jitter: 0.0,
                },
                1,
            )
            .unwrap();
            let x = normal_tensor::<f64>(&mut seeded(10, 0), &[2, 6, 6]);
            let t = m.t_map(&x).unwrap();
            assert!(t.sub(&x.scale(0.5)).unwrap().max_abs() < 1e-10, "{activation:?}");
        }
    }

    #[test]
    fn elu_network_matches_oracle_and_finite_differences() {
        let spec = NetworkSpec {
            activation: Activation::Elu,
            ..small_spec(3, 3)
        };
        let base = random_model(3, 3, 21);
        let m = EnergyModel::new(spec, base.params().to_vec(), 0.5).unwrap();
        let x = normal_tensor::<f64>(&mut seeded(22, 0), &[2, 5, 5]);
        assert!(m.psi(&x).unwrap().sub(&psi_oracle(&m, &x)).unwrap().max_abs() < 1e-12);
        // Hessian-vector product against central differences of the score.
        let v = normal_tensor::<f64>(&mut seeded(23, 0), &[2, 5, 5]);
        let hv = m.hessian_vec(&x, &v).unwrap();
        let eps = 1e-5;
        let plus = m.score(&x.add(&v.scale(eps)).unwrap()).unwrap();
        let minus = m.score(&x.sub(&v.scale(eps)).unwrap()).unwrap();
        let fd = plus.sub(&minus).unwrap().scale(0.5 / eps);
        let err = hv.sub(&fd).unwrap().norm() / fd.norm();
        assert!(err < 1e-7, "relative error {err}");
    }

    #[test]
    fn ball_projection() {
        let c = Tensor::<f64>::zeros(&[2]);
        let b = Ball::new(c, 1.0).unwrap();
        let p = b.project(&Tensor::new(&[2], vec![3.0, 4.0]).unwrap()).unwrap();
        assert!((p.data()[0] - 0.6).abs() < 1e-15 && (p.data()[1] - 0.8).abs() < 1e-15);
        assert!(b.contains(&p).unwrap());
        assert!(Ball::new(Tensor::<f64>::zeros(&[1]), 0.0).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let m = random_model(2, 3, 11);
        let meta = CheckpointMeta {
            m: 0.1,
            delta: 0.7,
            l: 0.9,
            epochs: 3,
            seed: 5,
        };
        m.save(&path, &meta).unwrap();
        let (back, header) = EnergyModel::<f64>::load(&path).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(header.meta, meta);
        assert_eq!(header.hash, m.hash());
        assert_eq!(header.layer_shapes[0], vec![3, 2, 3, 3]);
    }

    #[test]
    fn quadratic_field_hessian_estimate() {
        let f = QuadraticField::scaled_identity(&[2, 2, 2], -1.5);
        let x = Tensor::<f64>::ones(&[2, 2, 2]);
        let l = estimate_score_lipschitz(&f, &x, 50, 1).unwrap();
        assert!((l - 1.5).abs() < 1e-12);
        assert!(ScoreField::<f64>::energy(&f, &x).unwrap() < 0.0);
    }
}
