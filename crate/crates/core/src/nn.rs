//! Dense multilayer perceptrons with hand-written reverse-mode gradients and
//! an Adam optimizer. Everything is `f64` so that finite-difference checks
//! stay meaningful.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for Matrix {
    type Error = Error;

    fn try_from(raw: RawMatrix) -> Result<Self> {
        Matrix::from_vec(raw.rows, raw.cols, raw.data)
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::config(
                "matrix",
                format!("{rows}x{cols} matrix needs {} values, got {}", rows * cols, data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::config("matrix", "ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Column vector of a single column.
    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }
}

/// Largest double strictly below one.
const ONE_MINUS: f64 = 1.0 - f64::EPSILON / 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu { slope: f64 },
    Sigmoid,
    Tanh,
    Identity,
}

impl Activation {
    pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

    pub fn leaky_relu() -> Self {
        Activation::LeakyRelu {
            slope: Self::DEFAULT_LEAKY_SLOPE,
        }
    }

    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::LeakyRelu { slope } => {
                if z > 0.0 {
                    z
                } else {
                    slope * z
                }
            }
            Activation::Sigmoid => sigmoid(z),
            Activation::Tanh => z.tanh().clamp(-ONE_MINUS, ONE_MINUS),
            Activation::Identity => z,
        }
    }

    /// Derivative with respect to the pre-activation `z`, given `out = apply(z)`.
    #[inline]
    pub fn derivative(self, z: f64, out: f64) -> f64 {
        match self {
            Activation::LeakyRelu { slope } => {
                if z > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Sigmoid => out * (1.0 - out),
            Activation::Tanh => 1.0 - out * out,
            Activation::Identity => 1.0,
        }
    }
}

/// Logistic function kept strictly inside (0, 1).
#[inline]
pub fn sigmoid(z: f64) -> f64 {
    let s = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, ONE_MINUS)
}

/// Weights and biases of a dense network. Layer `k` maps `size[k]` inputs to
/// `size[k + 1]` outputs as `x · W + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layer_sizes: Vec<usize>,
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

/// Intermediate values of one forward pass, consumed by [`MlpParams::backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    fingerprint: u64,
    /// `activations[0]` is the input; `activations[k]` the output of layer `k`.
    activations: Vec<Matrix>,
    pre_activations: Vec<Matrix>,
}

impl ForwardCache {
    pub fn output(&self) -> &Matrix {
        self.activations.last().expect("cache holds at least the input")
    }

    pub fn input(&self) -> &Matrix {
        &self.activations[0]
    }
}

/// Gradients shaped like an [`MlpParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(params: &MlpParams) -> Self {
        MlpGrads {
            weights: params
                .weights
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
            biases: params.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for w in &mut self.weights {
            w.data_mut().iter_mut().for_each(|x| *x *= k);
        }
        for b in &mut self.biases {
            b.iter_mut().for_each(|x| *x *= k);
        }
    }

    /// Flattened in the same order as [`MlpParams::flat`].
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(Matrix::is_finite)
            && self.biases.iter().flatten().all(|v| v.is_finite())
    }

    pub fn sq_norm(&self) -> f64 {
        self.flat().iter().map(|g| g * g).sum()
    }
}

impl MlpParams {
    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(
        layer_sizes: &[usize],
        hidden_activation: Activation,
        output_activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut params = Self::zeros(layer_sizes, hidden_activation, output_activation)?;
        for w in &mut params.weights {
            let limit = (6.0 / (w.rows() + w.cols()) as f64).sqrt();
            for v in w.data_mut() {
                *v = rng.random_range(-limit..=limit);
            }
        }
        Ok(params)
    }

    pub fn zeros(
        layer_sizes: &[usize],
        hidden_activation: Activation,
        output_activation: Activation,
    ) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::config("layer_sizes", "need at least input and output sizes"));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::config("layer_sizes", "layer sizes must be positive"));
        }
        let weights = layer_sizes
            .windows(2)
            .map(|w| Matrix::zeros(w[0], w[1]))
            .collect();
        let biases = layer_sizes[1..].iter().map(|&n| vec![0.0; n]).collect();
        Ok(MlpParams {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
            hidden_activation,
            output_activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.num_layers() {
            self.output_activation
        } else {
            self.hidden_activation
        }
    }

    /// Checks that weight and bias shapes chain with `layer_sizes`.
    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 || self.weights.len() != self.layer_sizes.len() - 1 {
            return Err(Error::config("layer_sizes", "layer count does not match weights"));
        }
        if self.biases.len() != self.weights.len() {
            return Err(Error::config("biases", "bias count does not match weights"));
        }
        for (k, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            if w.rows() != self.layer_sizes[k] || w.cols() != self.layer_sizes[k + 1] {
                return Err(Error::config(
                    "weights",
                    format!(
                        "layer {k} weight is {}x{}, expected {}x{}",
                        w.rows(),
                        w.cols(),
                        self.layer_sizes[k],
                        self.layer_sizes[k + 1]
                    ),
                ));
            }
            if b.len() != self.layer_sizes[k + 1] {
                return Err(Error::config("biases", format!("layer {k} bias has wrong length")));
            }
        }
        if !self.is_finite() {
            return Err(Error::non_finite("network parameters"));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(Matrix::is_finite)
            && self.biases.iter().flatten().all(|v| v.is_finite())
    }

    pub fn num_params(&self) -> usize {
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| w.data().len() + b.len())
            .sum()
    }

    /// All parameters, layer by layer: weights (row-major) then biases.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b);
        }
        out
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::Usage(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                values.len()
            )));
        }
        let mut it = values.iter().copied();
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            w.data_mut().iter_mut().for_each(|v| *v = it.next().unwrap());
            b.iter_mut().for_each(|v| *v = it.next().unwrap());
        }
        Ok(())
    }

    fn fingerprint(&self) -> u64 {
        // FNV-1a over the parameter bit patterns.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |v: f64| {
            h ^= v.to_bits();
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for (w, b) in self.weights.iter().zip(&self.biases) {
            w.data().iter().copied().for_each(&mut mix);
            b.iter().copied().for_each(&mut mix);
        }
        h
    }

    fn check_input(&self, inputs: &Matrix) -> Result<()> {
        if inputs.cols() != self.input_dim() {
            return Err(Error::config(
                "inputs",
                format!(
                    "network expects {} input columns, got {}",
                    self.input_dim(),
                    inputs.cols()
                ),
            ));
        }
        Ok(())
    }

    fn affine(&self, layer: usize, input: &Matrix) -> Matrix {
        let w = &self.weights[layer];
        let b = &self.biases[layer];
        let mut z = Matrix::zeros(input.rows(), w.cols());
        for i in 0..input.rows() {
            let out = z.row_mut(i);
            out.copy_from_slice(b);
            for (k, &x) in input.row(i).iter().enumerate() {
                if x == 0.0 {
                    continue;
                }
                for (o, &wk) in out.iter_mut().zip(w.row(k)) {
                    *o += x * wk;
                }
            }
        }
        z
    }

    /// Forward pass without keeping intermediates.
    pub fn predict(&self, inputs: &Matrix) -> Result<Matrix> {
        self.check_input(inputs)?;
        let mut a = inputs.clone();
        for layer in 0..self.num_layers() {
            let act = self.activation(layer);
            let mut z = self.affine(layer, &a);
            z.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
            a = z;
        }
        Ok(a)
    }

    /// Single-sample forward pass into `out`. Used on the rollout hot path.
    pub fn predict_one(&self, input: &[f64], out: &mut Vec<f64>) {
        debug_assert_eq!(input.len(), self.input_dim());
        let mut cur: Vec<f64> = input.to_vec();
        for layer in 0..self.num_layers() {
            let act = self.activation(layer);
            let w = &self.weights[layer];
            let mut next = self.biases[layer].clone();
            for (k, &x) in cur.iter().enumerate() {
                for (o, &wk) in next.iter_mut().zip(w.row(k)) {
                    *o += x * wk;
                }
            }
            next.iter_mut().for_each(|v| *v = act.apply(*v));
            cur = next;
        }
        *out = cur;
    }

    /// Forward pass that records what [`MlpParams::backward`] needs.
    pub fn forward(&self, inputs: &Matrix) -> Result<(Matrix, ForwardCache)> {
        self.check_input(inputs)?;
        let mut activations = Vec::with_capacity(self.num_layers() + 1);
        let mut pre_activations = Vec::with_capacity(self.num_layers());
        activations.push(inputs.clone());
        for layer in 0..self.num_layers() {
            let act = self.activation(layer);
            let z = self.affine(layer, activations.last().unwrap());
            let mut a = z.clone();
            a.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
            pre_activations.push(z);
            activations.push(a);
        }
        let out = activations.last().unwrap().clone();
        Ok((
            out,
            ForwardCache {
                fingerprint: self.fingerprint(),
                activations,
                pre_activations,
            },
        ))
    }

    /// Reverse-mode gradients given dLoss/dOutput. Returns parameter gradients
    /// and dLoss/dInput.
    pub fn backward(&self, cache: &ForwardCache, output_grad: &Matrix) -> Result<(MlpGrads, Matrix)> {
        if cache.fingerprint != self.fingerprint()
            || cache.pre_activations.len() != self.num_layers()
        {
            return Err(Error::Usage(
                "forward cache was produced by different parameters".into(),
            ));
        }
        let out = cache.output();
        if output_grad.rows() != out.rows() || output_grad.cols() != out.cols() {
            return Err(Error::Usage(format!(
                "output gradient is {}x{}, forward output is {}x{}",
                output_grad.rows(),
                output_grad.cols(),
                out.rows(),
                out.cols()
            )));
        }
        let mut grads = MlpGrads::zeros_like(self);
        let mut delta = output_grad.clone();
        for layer in (0..self.num_layers()).rev() {
            let act = self.activation(layer);
            let z = &cache.pre_activations[layer];
            let a = &cache.activations[layer + 1];
            for ((d, &zv), &av) in delta.data_mut().iter_mut().zip(z.data()).zip(a.data()) {
                *d *= act.derivative(zv, av);
            }
            let input = &cache.activations[layer];
            let gw = &mut grads.weights[layer];
            let gb = &mut grads.biases[layer];
            for i in 0..input.rows() {
                let drow = delta.row(i);
                for (g, &d) in gb.iter_mut().zip(drow) {
                    *g += d;
                }
                for (k, &x) in input.row(i).iter().enumerate() {
                    if x == 0.0 {
                        continue;
                    }
                    for (g, &d) in gw.row_mut(k).iter_mut().zip(drow) {
                        *g += x * d;
                    }
                }
            }
            let w = &self.weights[layer];
            let mut prev = Matrix::zeros(input.rows(), input.cols());
            for i in 0..input.rows() {
                let drow = delta.row(i);
                for (k, p) in prev.row_mut(i).iter_mut().enumerate() {
                    *p = w.row(k).iter().zip(drow).map(|(a, b)| a * b).sum();
                }
            }
            delta = prev;
        }
        Ok((grads, delta))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

fn adam_update(
    cfg: &AdamConfig,
    step: u64,
    lr: f64,
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
) {
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(m).zip(v) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Adam moments for one network.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: MlpGrads,
    v: MlpGrads,
}

impl AdamState {
    pub fn new(params: &MlpParams, config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            m: MlpGrads::zeros_like(params),
            v: MlpGrads::zeros_like(params),
        }
    }

    /// One bias-corrected Adam update of `params`.
    pub fn step(&mut self, params: &mut MlpParams, grads: &MlpGrads, lr: f64) -> Result<()> {
        if grads.weights.len() != params.weights.len()
            || grads
                .weights
                .iter()
                .zip(&params.weights)
                .any(|(g, w)| g.rows() != w.rows() || g.cols() != w.cols())
            || grads
                .biases
                .iter()
                .zip(&params.biases)
                .any(|(g, b)| g.len() != b.len())
        {
            return Err(Error::Usage("gradient shapes do not match parameters".into()));
        }
        if !grads.is_finite() {
            return Err(Error::non_finite(format!(
                "adam step {}: gradient",
                self.step + 1
            )));
        }
        self.step += 1;
        let cfg = self.config;
        for k in 0..params.weights.len() {
            adam_update(
                &cfg,
                self.step,
                lr,
                params.weights[k].data_mut(),
                grads.weights[k].data(),
                self.m.weights[k].data_mut(),
                self.v.weights[k].data_mut(),
            );
            adam_update(
                &cfg,
                self.step,
                lr,
                &mut params.biases[k],
                &grads.biases[k],
                &mut self.m.biases[k],
                &mut self.v.biases[k],
            );
        }
        Ok(())
    }
}

/// Adam over a plain parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorAdam {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl VectorAdam {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        VectorAdam {
            config,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Usage("gradient length does not match parameters".into()));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::non_finite(format!(
                "adam step {}: gradient",
                self.step + 1
            )));
        }
        self.step += 1;
        adam_update(
            &self.config,
            self.step,
            lr,
            params,
            grads,
            &mut self.m,
            &mut self.v,
        );
        Ok(())
    }
}
