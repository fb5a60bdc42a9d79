//! Dense multinomial classifier with analytic backpropagation, softmax
//! cross-entropy and Adam.
//!
//! Parameters live in one flat `f64` buffer. Layer `l` stores its weight
//! matrix (`out x in`, row-major) followed by its bias vector, in layer
//! order. That buffer is the only thing strategies exchange.

use rand::Rng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::{self, Key};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    actual: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Copies the selected rows, in the given order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub activation: Activation,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            input_dim: 16,
            hidden_dims: vec![32],
            num_classes: 3,
            activation: Activation::Relu,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidSpec("input_dim must be positive".into()));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::InvalidSpec("hidden layer widths must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidSpec("num_classes must be at least 2".into()));
        }
        Ok(())
    }

    /// `[input, hidden..., classes]`.
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.num_classes);
        dims
    }

    pub fn num_layers(&self) -> usize {
        self.hidden_dims.len() + 1
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims()
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    pub fn shape_index(&self) -> ShapeIndex {
        let mut tensors = Vec::with_capacity(2 * self.num_layers());
        let mut offset = 0;
        for (l, w) in self.layer_dims().windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            tensors.push(TensorShape {
                name: format!("w{l}"),
                offset,
                rows: fan_out,
                cols: fan_in,
            });
            offset += fan_in * fan_out;
            tensors.push(TensorShape {
                name: format!("b{l}"),
                offset,
                rows: fan_out,
                cols: 1,
            });
            offset += fan_out;
        }
        ShapeIndex { tensors }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorShape {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeIndex {
    pub tensors: Vec<TensorShape>,
}

impl ShapeIndex {
    pub fn total_len(&self) -> usize {
        self.tensors.iter().map(|t| t.rows * t.cols).sum()
    }
}

/// Flat model weights plus their layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    values: Vec<f64>,
    shape: ShapeIndex,
}

impl ParameterVector {
    pub fn new(values: Vec<f64>, shape: ShapeIndex) -> Result<Self> {
        if values.len() != shape.total_len() {
            return Err(Error::DimensionMismatch {
                expected: shape.total_len(),
                actual: values.len(),
            });
        }
        Ok(Self { values, shape })
    }

    pub fn zeros(spec: &ModelSpec) -> Self {
        Self {
            values: vec![0.0; spec.param_count()],
            shape: spec.shape_index(),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn shape(&self) -> &ShapeIndex {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    fn check_spec(&self, spec: &ModelSpec) -> Result<()> {
        spec.validate()?;
        if self.shape != spec.shape_index() {
            return Err(Error::ShapeMismatch);
        }
        Ok(())
    }
}

/// Gradient of the mean loss, laid out like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub values: Vec<f64>,
    pub shape: ShapeIndex,
}

impl Gradients {
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must be in [0,1)");
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        Ok(())
    }
}

/// Adam moments. Never aggregated or transmitted between sites.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            config,
        }
    }

    pub fn for_params(params: &ParameterVector, config: AdamConfig) -> Self {
        Self::new(params.len(), config)
    }

    /// In-place bias-corrected update of `params`.
    pub fn apply(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::DimensionMismatch {
                expected: self.m.len(),
                actual: if params.len() != self.m.len() {
                    params.len()
                } else {
                    grads.len()
                },
            });
        }
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = i32::try_from(self.t).unwrap_or(i32::MAX);
        let correction1 = 1.0 - beta1.powi(t);
        let correction2 = 1.0 - beta2.powi(t);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / correction1;
            let v_hat = *v / correction2;
            *p -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
        Ok(())
    }
}

/// Functional form of one Adam step.
pub fn adam_step(
    params: &ParameterVector,
    grads: &Gradients,
    state: &AdamState,
) -> Result<(ParameterVector, AdamState)> {
    if grads.shape != params.shape {
        return Err(Error::ShapeMismatch);
    }
    let mut next_params = params.clone();
    let mut next_state = state.clone();
    next_state.apply(&mut next_params.values, &grads.values)?;
    Ok((next_params, next_state))
}

/// Fan-in/fan-out scaled uniform weights, zero biases.
pub fn init_model(spec: &ModelSpec, seed: u64) -> Result<ParameterVector> {
    spec.validate()?;
    let shape = spec.shape_index();
    let mut values = vec![0.0; shape.total_len()];
    let mut rng = seeding::derive_rng(seed, &[Key::Str("init")]);
    for tensor in shape.tensors.iter().filter(|t| t.name.starts_with('w')) {
        let limit = (6.0 / (tensor.rows + tensor.cols) as f64).sqrt();
        for w in &mut values[tensor.offset..tensor.offset + tensor.rows * tensor.cols] {
            *w = rng.random_range(-limit..limit);
        }
    }
    Ok(ParameterVector { values, shape })
}

/// Activations of every layer; the last entry holds the logits.
struct Trace {
    activations: Vec<Matrix>,
}

fn dense(params: &[f64], offset: usize, input: &Matrix, fan_out: usize) -> Matrix {
    let fan_in = input.cols;
    let weights = &params[offset..offset + fan_in * fan_out];
    let bias = &params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
    let mut out = Matrix::zeros(input.rows, fan_out);
    for i in 0..input.rows {
        let x = input.row(i);
        let z = out.row_mut(i);
        for (o, zo) in z.iter_mut().enumerate() {
            let w = &weights[o * fan_in..(o + 1) * fan_in];
            *zo = bias[o] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    out
}

fn forward_trace(params: &[f64], spec: &ModelSpec, features: Matrix) -> Trace {
    let dims = spec.layer_dims();
    let last = dims.len() - 2;
    let mut activations = Vec::with_capacity(dims.len());
    activations.push(features);
    let mut offset = 0;
    for (l, w) in dims.windows(2).enumerate() {
        let mut z = dense(params, offset, &activations[l], w[1]);
        if l < last {
            for v in &mut z.data {
                *v = spec.activation.apply(*v);
            }
        }
        activations.push(z);
        offset += w[0] * w[1] + w[1];
    }
    Trace { activations }
}

fn check_features(spec: &ModelSpec, features: &Matrix) -> Result<()> {
    if features.cols != spec.input_dim {
        return Err(Error::DimensionMismatch {
            expected: spec.input_dim,
            actual: features.cols,
        });
    }
    Ok(())
}

pub fn forward(params: &ParameterVector, spec: &ModelSpec, features: &Matrix) -> Result<Matrix> {
    params.check_spec(spec)?;
    check_features(spec, features)?;
    let mut trace = forward_trace(&params.values, spec, features.clone());
    Ok(trace.activations.pop().expect("at least one layer"))
}

/// Output of the last hidden layer, after its nonlinearity.
pub fn penultimate(params: &ParameterVector, spec: &ModelSpec, features: &Matrix) -> Result<Matrix> {
    params.check_spec(spec)?;
    check_features(spec, features)?;
    if spec.hidden_dims.is_empty() {
        return Err(Error::NoHiddenLayer);
    }
    let mut trace = forward_trace(&params.values, spec, features.clone());
    trace.activations.pop();
    Ok(trace.activations.pop().expect("hidden layer present"))
}

/// Mean softmax cross-entropy and the softmax probabilities.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if labels.len() != logits.rows {
        return Err(Error::DimensionMismatch {
            expected: logits.rows,
            actual: labels.len(),
        });
    }
    let k = logits.cols;
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            num_classes: k,
        });
    }
    let mut probs = Matrix::zeros(logits.rows, k);
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let z = logits.row(i);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
        let log_sum = max + sum.ln();
        total += log_sum - z[y];
        for (p, v) in probs.row_mut(i).iter_mut().zip(z) {
            *p = (v - log_sum).exp();
        }
    }
    let loss = if labels.is_empty() {
        0.0
    } else {
        total / labels.len() as f64
    };
    Ok((loss.max(0.0), probs))
}

/// Mean loss and its gradient; no layout checks.
fn loss_and_grad_unchecked(
    params: &[f64],
    spec: &ModelSpec,
    features: Matrix,
    labels: &[usize],
    grad: &mut [f64],
) -> Result<f64> {
    let trace = forward_trace(params, spec, features);
    let logits = trace.activations.last().expect("logits");
    let (loss, probs) = cross_entropy(logits, labels)?;
    let batch = labels.len() as f64;

    // dL/dz for the output layer
    let mut delta = probs;
    for (i, &y) in labels.iter().enumerate() {
        let row = delta.row_mut(i);
        row[y] -= 1.0;
        for d in row.iter_mut() {
            *d /= batch;
        }
    }

    grad.iter_mut().for_each(|g| *g = 0.0);
    let dims = spec.layer_dims();
    let mut offsets = Vec::with_capacity(dims.len() - 1);
    let mut offset = 0;
    for w in dims.windows(2) {
        offsets.push(offset);
        offset += w[0] * w[1] + w[1];
    }

    for l in (0..dims.len() - 1).rev() {
        let (fan_in, fan_out) = (dims[l], dims[l + 1]);
        let input = &trace.activations[l];
        let off = offsets[l];
        {
            let (gw, gb) = grad[off..off + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
            for i in 0..input.rows {
                let a = input.row(i);
                let d = delta.row(i);
                for (o, &dv) in d.iter().enumerate() {
                    if dv == 0.0 {
                        continue;
                    }
                    gb[o] += dv;
                    for (g, &av) in gw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(a) {
                        *g += dv * av;
                    }
                }
            }
        }
        if l == 0 {
            break;
        }
        let weights = &params[off..off + fan_in * fan_out];
        let mut prev = Matrix::zeros(input.rows, fan_in);
        for i in 0..input.rows {
            let d = delta.row(i);
            let p = prev.row_mut(i);
            for (o, &dv) in d.iter().enumerate() {
                if dv == 0.0 {
                    continue;
                }
                for (pv, &w) in p.iter_mut().zip(&weights[o * fan_in..(o + 1) * fan_in]) {
                    *pv += dv * w;
                }
            }
            for (pv, &a) in p.iter_mut().zip(input.row(i)) {
                *pv *= spec.activation.derivative_from_output(a);
            }
        }
        delta = prev;
    }
    Ok(loss)
}

/// Gradient of the mean cross-entropy with respect to every parameter.
pub fn backward(
    params: &ParameterVector,
    spec: &ModelSpec,
    features: &Matrix,
    labels: &[usize],
) -> Result<Gradients> {
    Ok(loss_and_backward(params, spec, features, labels)?.1)
}

pub fn loss_and_backward(
    params: &ParameterVector,
    spec: &ModelSpec,
    features: &Matrix,
    labels: &[usize],
) -> Result<(f64, Gradients)> {
    params.check_spec(spec)?;
    check_features(spec, features)?;
    if labels.len() != features.rows {
        return Err(Error::DimensionMismatch {
            expected: features.rows,
            actual: labels.len(),
        });
    }
    let mut values = vec![0.0; params.len()];
    let loss = loss_and_grad_unchecked(&params.values, spec, features.clone(), labels, &mut values)?;
    Ok((
        loss,
        Gradients {
            values,
            shape: params.shape.clone(),
        },
    ))
}

/// Feature matrix plus class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>) -> Result<Self> {
        if features.rows != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: features.rows,
                actual: labels.len(),
            });
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LocalTraining {
    pub epochs: usize,
    pub batch_size: usize,
    /// Base of the per-epoch shuffle streams.
    pub seed: u64,
    /// Index of the first epoch, so a continued run reuses the same
    /// shuffle streams as one long run.
    pub first_epoch: usize,
}

#[derive(Debug, Clone)]
pub struct LocalOutcome {
    pub params: ParameterVector,
    pub state: AdamState,
    /// Mean per-example training loss observed during each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seeding::derive_rng(seed, &[Key::Str("epoch"), epoch.into()]);
    order.shuffle(&mut rng);
    order
}

/// Minibatch Adam over `epochs` passes; the last partial batch is kept.
pub fn train_local_epochs(
    params: &ParameterVector,
    state: &AdamState,
    spec: &ModelSpec,
    data: &Dataset,
    opts: &LocalTraining,
) -> Result<LocalOutcome> {
    params.check_spec(spec)?;
    check_features(spec, &data.features)?;
    if data.is_empty() {
        return Err(Error::EmptyTrainingSet(String::from("<local>")));
    }
    if opts.epochs == 0 {
        return Err(Error::InvalidFederation("epochs must be at least 1".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::InvalidFederation("batch_size must be at least 1".into()));
    }
    if state.m.len() != params.len() {
        return Err(Error::DimensionMismatch {
            expected: params.len(),
            actual: state.m.len(),
        });
    }
    if let Some(&bad) = data.labels.iter().find(|&&y| y >= spec.num_classes) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            num_classes: spec.num_classes,
        });
    }

    let mut weights = params.values.clone();
    let mut adam = state.clone();
    let mut grad = vec![0.0; weights.len()];
    let mut epoch_losses = Vec::with_capacity(opts.epochs);
    let mut steps = 0;
    for e in 0..opts.epochs {
        let order = epoch_order(data.len(), opts.seed, opts.first_epoch + e);
        let mut loss_sum = 0.0;
        for batch in order.chunks(opts.batch_size) {
            let x = data.features.select_rows(batch);
            let y: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
            let loss = loss_and_grad_unchecked(&weights, spec, x, &y, &mut grad)?;
            loss_sum += loss * batch.len() as f64;
            adam.apply(&mut weights, &grad)?;
            steps += 1;
        }
        epoch_losses.push(loss_sum / data.len() as f64);
    }
    Ok(LocalOutcome {
        params: ParameterVector {
            values: weights,
            shape: params.shape.clone(),
        },
        state: adam,
        epoch_losses,
        steps,
    })
}

/// Mean loss over a dataset without updating anything.
pub fn mean_loss(params: &ParameterVector, spec: &ModelSpec, data: &Dataset) -> Result<f64> {
    let logits = forward(params, spec, &data.features)?;
    Ok(cross_entropy(&logits, &data.labels)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn linear_spec(input: usize, classes: usize) -> ModelSpec {
        ModelSpec {
            input_dim: input,
            hidden_dims: vec![],
            num_classes: classes,
            activation: Activation::Relu,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let spec = ModelSpec::default();
        assert_eq!(init_model(&spec, 11).unwrap(), init_model(&spec, 11).unwrap());
        assert_ne!(init_model(&spec, 11).unwrap(), init_model(&spec, 12).unwrap());
    }

    #[test]
    fn logistic_regression_param_count() {
        let spec = linear_spec(4, 3);
        assert_eq!(spec.param_count(), 15);
        assert_eq!(init_model(&spec, 0).unwrap().len(), 15);
    }

    #[test]
    fn init_biases_are_zero_and_weights_bounded() {
        let spec = ModelSpec::default();
        let p = init_model(&spec, 3).unwrap();
        for t in &p.shape().tensors {
            let slice = &p.values()[t.offset..t.offset + t.rows * t.cols];
            if t.name.starts_with('b') {
                assert!(slice.iter().all(|&b| b == 0.0));
            } else {
                let limit = (6.0 / (t.rows + t.cols) as f64).sqrt();
                assert!(slice.iter().all(|w| w.abs() <= limit));
            }
        }
    }

    #[test]
    fn init_weights_are_centered() {
        // one weight per seed, 10^4 seeds; uniform(-a, a) has sd a/sqrt(3)
        let spec = linear_spec(4, 3);
        let limit = (6.0f64 / 7.0).sqrt();
        let n = 10_000;
        let mean = (0..n)
            .map(|s| init_model(&spec, s).unwrap().values()[0])
            .sum::<f64>()
            / n as f64;
        let se = limit / 3f64.sqrt() / (n as f64).sqrt();
        assert!(mean.abs() < 3.0 * se, "mean {mean} se {se}");
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = linear_spec(0, 3);
        assert!(init_model(&spec, 0).is_err());
        spec.input_dim = 2;
        spec.hidden_dims = vec![0];
        assert!(init_model(&spec, 0).is_err());
        spec.hidden_dims = vec![];
        spec.num_classes = 1;
        assert!(init_model(&spec, 0).is_err());
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let spec = ModelSpec::default();
        let p = ParameterVector::zeros(&spec);
        let x = Matrix::from_rows(&[vec![1.0; 16], vec![-3.0; 16]]).unwrap();
        let logits = forward(&p, &spec, &x).unwrap();
        assert!(logits.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_linear_layer_picks_first_weight_column() {
        // W is out x in = 3 x 2; input [1, 0] selects column 0 of W,
        // i.e. row 0 of the in x out matrix [[1,2,3],[4,5,6]].
        let spec = linear_spec(2, 3);
        let values = vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0, 0.0, 0.0, 0.0];
        let p = ParameterVector::new(values, spec.shape_index()).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let logits = forward(&p, &spec, &x).unwrap();
        assert_eq!(logits.row(0), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let spec = ModelSpec::default();
        let p = init_model(&spec, 0).unwrap();
        let x = Matrix::zeros(2, 5);
        assert!(matches!(
            forward(&p, &spec, &x),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn forward_rows_are_independent() {
        let spec = ModelSpec::default();
        let p = init_model(&spec, 5).unwrap();
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..16).map(|j| ((i * 16 + j) as f64).sin()).collect())
            .collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let perm = [2, 0, 3, 1];
        let xp = x.select_rows(&perm);
        let a = forward(&p, &spec, &x).unwrap();
        let b = forward(&p, &spec, &xp).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(a.row(i), b.row(k));
        }
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let logits = Matrix::zeros(4, 3);
        let (loss, probs) = cross_entropy(&logits, &[0, 1, 2, 0]).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
        assert!(probs.as_slice().iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn cross_entropy_hand_value() {
        let logits = Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let (loss, _) = cross_entropy(&logits, &[2]).unwrap();
        assert!((loss - 0.40760596444438013).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_give_near_zero_loss() {
        let logits = Matrix::from_rows(&[vec![0.0, 800.0, 0.0]]).unwrap();
        let (loss, probs) = cross_entropy(&logits, &[1]).unwrap();
        assert!(loss < 1e-12);
        assert!(probs.as_slice().iter().all(|p| p.is_finite()));
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let logits = Matrix::zeros(1, 3);
        assert!(matches!(
            cross_entropy(&logits, &[3]),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn saturated_predictions_have_vanishing_gradient() {
        let spec = linear_spec(2, 3);
        // logit for class k = 100 * x_k-ish: inputs pick a class with a huge margin
        let values = vec![100.0, 0.0, 0.0, 100.0, -100.0, -100.0, 0.0, 0.0, 0.0];
        let p = ParameterVector::new(values, spec.shape_index()).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let g = backward(&p, &spec, &x, &[0, 1]).unwrap();
        assert!(g.norm() < 1e-6, "{}", g.norm());
    }

    #[test]
    fn duplicated_batch_gives_same_gradient() {
        let spec = ModelSpec {
            input_dim: 3,
            hidden_dims: vec![4],
            num_classes: 3,
            activation: Activation::Tanh,
        };
        let p = init_model(&spec, 9).unwrap();
        let rows = vec![vec![0.1, -0.4, 0.7], vec![1.2, 0.3, -0.5]];
        let x = Matrix::from_rows(&rows).unwrap();
        let doubled = Matrix::from_rows(&[&rows[0], &rows[0], &rows[1], &rows[1]]).unwrap();
        let g1 = backward(&p, &spec, &x, &[0, 2]).unwrap();
        let g2 = backward(&p, &spec, &doubled, &[0, 0, 2, 2]).unwrap();
        for (a, b) in g1.values.iter().zip(&g2.values) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_zero_gradient_from_fresh_state_is_noop() {
        let spec = linear_spec(2, 2);
        let p = init_model(&spec, 1).unwrap();
        let g = Gradients {
            values: vec![0.0; p.len()],
            shape: p.shape().clone(),
        };
        let s = AdamState::for_params(&p, AdamConfig::default());
        let (p2, s2) = adam_step(&p, &g, &s).unwrap();
        assert_eq!(p, p2);
        assert_eq!(s2.t, 1);
    }

    #[test]
    fn adam_first_step_hand_value() {
        // t=1: m_hat = g, v_hat = g^2, so the step is -lr * g / (|g| + eps)
        let shape = ShapeIndex {
            tensors: vec![TensorShape {
                name: "w0".into(),
                offset: 0,
                rows: 1,
                cols: 1,
            }],
        };
        let p = ParameterVector::new(vec![0.0], shape.clone()).unwrap();
        let g = Gradients {
            values: vec![1.0],
            shape,
        };
        let s = AdamState::for_params(&p, AdamConfig::default());
        let (p2, _) = adam_step(&p, &g, &s).unwrap();
        assert!((p2.values()[0] - -0.0009999999900000003).abs() < 1e-15);
    }

    #[test]
    fn adam_is_reproducible() {
        let spec = ModelSpec::default();
        let p = init_model(&spec, 2).unwrap();
        let g = Gradients {
            values: (0..p.len()).map(|i| (i as f64 * 0.37).cos()).collect(),
            shape: p.shape().clone(),
        };
        let s = AdamState::for_params(&p, AdamConfig::default());
        let a = adam_step(&p, &g, &s).and_then(|(p, s)| adam_step(&p, &g, &s)).unwrap();
        let b = adam_step(&p, &g, &s).and_then(|(p, s)| adam_step(&p, &g, &s)).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let p = init_model(&linear_spec(2, 2), 0).unwrap();
        let g = Gradients {
            values: vec![0.0; 3],
            shape: linear_spec(1, 2).shape_index(),
        };
        let s = AdamState::for_params(&p, AdamConfig::default());
        assert!(adam_step(&p, &g, &s).is_err());
    }

    fn toy_separable() -> Dataset {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..40 {
            let t = i as f64 / 40.0;
            rows.push(vec![1.0 + t, 0.5 - t]);
            labels.push(0);
            rows.push(vec![-1.0 - t, -0.5 + t]);
            labels.push(1);
        }
        Dataset::new(Matrix::from_rows(&rows).unwrap(), labels).unwrap()
    }

    #[test]
    fn training_reduces_loss_on_separable_data() {
        let spec = ModelSpec {
            input_dim: 2,
            hidden_dims: vec![8],
            num_classes: 2,
            activation: Activation::Relu,
        };
        let data = toy_separable();
        let p = init_model(&spec, 4).unwrap();
        let before = mean_loss(&p, &spec, &data).unwrap();
        let s = AdamState::for_params(&p, AdamConfig::default());
        let opts = LocalTraining {
            epochs: 5,
            batch_size: 8,
            seed: 1,
            first_epoch: 0,
        };
        let out = train_local_epochs(&p, &s, &spec, &data, &opts).unwrap();
        assert_eq!(out.epoch_losses.len(), 5);
        let after = mean_loss(&out.params, &spec, &data).unwrap();
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn continued_training_matches_single_run() {
        let spec = ModelSpec {
            input_dim: 2,
            hidden_dims: vec![5],
            num_classes: 2,
            activation: Activation::Tanh,
        };
        let data = toy_separable();
        let p = init_model(&spec, 8).unwrap();
        let s = AdamState::for_params(&p, AdamConfig::default());
        let full = train_local_epochs(
            &p,
            &s,
            &spec,
            &data,
            &LocalTraining {
                epochs: 5,
                batch_size: 7,
                seed: 3,
                first_epoch: 0,
            },
        )
        .unwrap();
        let first = train_local_epochs(
            &p,
            &s,
            &spec,
            &data,
            &LocalTraining {
                epochs: 2,
                batch_size: 7,
                seed: 3,
                first_epoch: 0,
            },
        )
        .unwrap();
        let second = train_local_epochs(
            &first.params,
            &first.state,
            &spec,
            &data,
            &LocalTraining {
                epochs: 3,
                batch_size: 7,
                seed: 3,
                first_epoch: 2,
            },
        )
        .unwrap();
        assert_eq!(full.params, second.params);
        assert_eq!(full.state, second.state);
        let mut history = first.epoch_losses.clone();
        history.extend(second.epoch_losses);
        assert_eq!(full.epoch_losses, history);
    }

    #[test]
    fn large_batch_means_one_step_per_epoch() {
        let spec = linear_spec(2, 2);
        let data = toy_separable();
        let p = init_model(&spec, 0).unwrap();
        let s = AdamState::for_params(&p, AdamConfig::default());
        let out = train_local_epochs(
            &p,
            &s,
            &spec,
            &data,
            &LocalTraining {
                epochs: 3,
                batch_size: 1000,
                seed: 0,
                first_epoch: 0,
            },
        )
        .unwrap();
        assert_eq!(out.steps, 3);
        assert_eq!(out.state.t, 3);
    }

    #[test]
    fn partial_batch_is_kept() {
        let spec = linear_spec(2, 2);
        let data = toy_separable(); // 80 rows
        let p = init_model(&spec, 0).unwrap();
        let s = AdamState::for_params(&p, AdamConfig::default());
        let out = train_local_epochs(
            &p,
            &s,
            &spec,
            &data,
            &LocalTraining {
                epochs: 1,
                batch_size: 30,
                seed: 0,
                first_epoch: 0,
            },
        )
        .unwrap();
        assert_eq!(out.steps, 3);
    }

    #[test]
    fn empty_training_set_rejected() {
        let spec = linear_spec(2, 2);
        let p = init_model(&spec, 0).unwrap();
        let s = AdamState::for_params(&p, AdamConfig::default());
        let data = Dataset::new(Matrix::zeros(0, 2), vec![]).unwrap();
        let opts = LocalTraining {
            epochs: 1,
            batch_size: 4,
            seed: 0,
            first_epoch: 0,
        };
        assert!(matches!(
            train_local_epochs(&p, &s, &spec, &data, &opts),
            Err(Error::EmptyTrainingSet(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn softmax_rows_sum_to_one(row in prop::collection::vec(-50.0f64..50.0, 2..6), label in 0usize..2) {
            let k = row.len();
            let logits = Matrix::from_rows(&[row]).unwrap();
            let (loss, probs) = cross_entropy(&logits, &[label % k]).unwrap();
            prop_assert!(loss >= 0.0);
            let s: f64 = probs.row(0).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }

        #[test]
        fn adam_update_sign_is_scale_invariant(
            grads in prop::collection::vec(-3.0f64..3.0, 5),
            scale in 0.01f64..100.0,
        ) {
            let shape = ShapeIndex { tensors: vec![TensorShape { name: "w0".into(), offset: 0, rows: 5, cols: 1 }] };
            let p = ParameterVector::new(vec![0.0; 5], shape.clone()).unwrap();
            let s = AdamState::for_params(&p, AdamConfig::default());
            let g1 = Gradients { values: grads.clone(), shape: shape.clone() };
            let g2 = Gradients { values: grads.iter().map(|g| g * scale).collect(), shape };
            let (a, _) = adam_step(&p, &g1, &s).unwrap();
            let (b, _) = adam_step(&p, &g2, &s).unwrap();
            for (x, y) in a.values().iter().zip(b.values()) {
                prop_assert_eq!(*x == 0.0, *y == 0.0);
                if *x != 0.0 {
                    prop_assert_eq!(x.signum(), y.signum());
                }
            }
        }
    }
}
