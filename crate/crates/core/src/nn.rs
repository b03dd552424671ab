//! Fully connected networks trained full-batch with Adam.
//!
//! Everything here works on batches laid out as `samples x features`
//! matrices. A per-layer `trainable` mask freezes parameters: frozen layers
//! still pass gradients upstream but never receive parameter updates.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::linalg::{axpy, dot, LinalgError, Matrix};
use crate::rng;

pub const MODEL_FORMAT_VERSION: u32 = 1;
/// Minimum decrease of the monitored loss that counts as an improvement.
pub const IMPROVEMENT_EPS: f64 = 1e-12;
pub const DEFAULT_PATIENCE: usize = 100;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("training diverged at epoch {epoch} (non-finite loss)")]
    Diverged { epoch: usize },
    #[error("non-finite parameter in layer {layer} after optimizer step")]
    NonFiniteParameter { layer: usize },
    #[error("forward cache does not match the network")]
    StaleCache,
    #[error("model document: {0}")]
    Format(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `outputs x inputs`
    pub weights: Matrix,
    pub biases: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weights: Matrix, biases: Vec<f64>, activation: Activation) -> Result<Self, NnError> {
        if biases.len() != weights.rows() {
            return Err(NnError::DimensionMismatch(format!(
                "{} biases for {} outputs",
                biases.len(),
                weights.rows()
            )));
        }
        if biases.iter().any(|b| !b.is_finite()) {
            return Err(NnError::Format("non-finite bias".into()));
        }
        Ok(Self {
            weights,
            biases,
            activation,
        })
    }

    /// He-uniform for ReLU layers, Xavier-uniform otherwise; zero biases.
    pub fn init(inputs: usize, outputs: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        let limit = match activation {
            Activation::Relu => (6.0 / inputs as f64).sqrt(),
            Activation::Identity => (6.0 / (inputs + outputs) as f64).sqrt(),
        };
        let weights = Matrix::from_fn(outputs, inputs, |_, _| rng.random_range(-limit..limit));
        Self {
            weights,
            biases: vec![0.0; outputs],
            activation,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.rows()
    }

    fn param_count(&self) -> usize {
        self.weights.data().len() + self.biases.len()
    }

    /// Pre-activations `X W^T + b` for a batch.
    fn linear(&self, x: &Matrix) -> Matrix {
        let (batch, out) = (x.rows(), self.outputs());
        let mut z = Matrix::zeros(batch, out);
        for b in 0..batch {
            let xb = x.row(b);
            let zb = z.row_mut(b);
            for (o, zo) in zb.iter_mut().enumerate() {
                *zo = dot(xb, self.weights.row(o)) + self.biases[o];
            }
        }
        z
    }
}

/// Per-layer activations recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input fed to each layer (`batch x inputs`).
    inputs: Vec<Matrix>,
    /// Pre-activation of each layer (`batch x outputs`).
    pre: Vec<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Matrix,
    pub biases: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Gradients {
    /// `None` for frozen layers.
    pub layers: Vec<Option<LayerGrad>>,
    /// Gradient with respect to the network input.
    pub input: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<DenseLayer>,
    trainable: Vec<bool>,
    seed: u64,
}

impl Mlp {
    pub fn new(layers: Vec<DenseLayer>, seed: u64) -> Result<Self, NnError> {
        if layers.is_empty() {
            return Err(NnError::InvalidConfig("network needs at least one layer".into()));
        }
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].outputs() != w[1].inputs() {
                return Err(NnError::DimensionMismatch(format!(
                    "layer {i} emits {} values but layer {} expects {}",
                    w[0].outputs(),
                    i + 1,
                    w[1].inputs()
                )));
            }
        }
        let trainable = vec![true; layers.len()];
        Ok(Self {
            layers,
            trainable,
            seed,
        })
    }

    /// `input -> hidden[0] -> ... -> output`.
    pub fn build(
        input: usize,
        hidden: &[usize],
        output: usize,
        hidden_activation: Activation,
        output_activation: Activation,
        seed: u64,
    ) -> Result<Self, NnError> {
        if input == 0 || output == 0 || hidden.contains(&0) {
            return Err(NnError::InvalidConfig(format!(
                "layer widths must be positive: {input} {hidden:?} {output}"
            )));
        }
        let mut rng = rng::stream(seed, "mlp-init", 0);
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut prev = input;
        for &h in hidden {
            layers.push(DenseLayer::init(prev, h, hidden_activation, &mut rng));
            prev = h;
        }
        layers.push(DenseLayer::init(prev, output, output_activation, &mut rng));
        Self::new(layers, seed)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn trainable(&self) -> &[bool] {
        &self.trainable
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn set_trainable(&mut self, layer: usize, flag: bool) {
        self.trainable[layer] = flag;
    }

    pub fn set_all_trainable(&mut self, flag: bool) {
        self.trainable.iter_mut().for_each(|t| *t = flag);
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    /// Appends `other` after `self`.
    pub fn stack(mut self, other: Mlp) -> Result<Mlp, NnError> {
        if self.output_dim() != other.input_dim() {
            return Err(NnError::DimensionMismatch(format!(
                "cannot stack {} -> {}",
                self.output_dim(),
                other.input_dim()
            )));
        }
        self.layers.extend(other.layers);
        self.trainable.extend(other.trainable);
        Ok(self)
    }

    /// Splits off layers `at..`, returning them as a new network with the
    /// given seed tag.
    pub fn split_off(&mut self, at: usize, seed: u64) -> Result<Mlp, NnError> {
        if at == 0 || at >= self.layers.len() {
            return Err(NnError::InvalidConfig(format!(
                "split point {at} outside 1..{}",
                self.layers.len()
            )));
        }
        let layers = self.layers.split_off(at);
        let trainable = self.trainable.split_off(at);
        Ok(Mlp {
            layers,
            trainable,
            seed,
        })
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardCache), NnError> {
        let xm = Matrix::new(1, x.len(), x.to_vec())?;
        let (y, cache) = self.forward_batch(&xm)?;
        Ok((y.into_data(), cache))
    }

    pub fn forward_batch(&self, x: &Matrix) -> Result<(Matrix, ForwardCache), NnError> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut current = x.clone();
        for layer in &self.layers {
            let z = layer.linear(&current);
            let mut a = z.clone();
            a.as_mut_slice()
                .iter_mut()
                .for_each(|v| *v = layer.activation.apply(*v));
            inputs.push(current);
            pre.push(z);
            current = a;
        }
        Ok((current, ForwardCache { inputs, pre }))
    }

    /// Forward pass without recording a cache.
    pub fn predict_batch(&self, x: &Matrix) -> Result<Matrix, NnError> {
        self.check_input(x)?;
        let mut current = x.clone();
        for layer in &self.layers {
            let mut z = layer.linear(&current);
            z.as_mut_slice()
                .iter_mut()
                .for_each(|v| *v = layer.activation.apply(*v));
            current = z;
        }
        Ok(current)
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        let xm = Matrix::new(1, x.len(), x.to_vec())?;
        Ok(self.predict_batch(&xm)?.into_data())
    }

    fn check_input(&self, x: &Matrix) -> Result<(), NnError> {
        if x.cols() != self.input_dim() {
            return Err(NnError::DimensionMismatch(format!(
                "input has {} features, network expects {}",
                x.cols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Reverse-mode pass. `grad_out` is dLoss/dOutput for the cached batch.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &Matrix) -> Result<Gradients, NnError> {
        if cache.pre.len() != self.layers.len() {
            return Err(NnError::StaleCache);
        }
        for (layer, (inp, z)) in self.layers.iter().zip(cache.inputs.iter().zip(&cache.pre)) {
            if inp.cols() != layer.inputs() || z.cols() != layer.outputs() || inp.rows() != z.rows() {
                return Err(NnError::StaleCache);
            }
        }
        let batch = cache.inputs[0].rows();
        if grad_out.shape() != (batch, self.output_dim()) {
            return Err(NnError::DimensionMismatch(format!(
                "output gradient {:?}, expected ({batch}, {})",
                grad_out.shape(),
                self.output_dim()
            )));
        }

        let mut layer_grads: Vec<Option<LayerGrad>> = vec![None; self.layers.len()];
        let mut upstream = grad_out.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let z = &cache.pre[i];
            let x = &cache.inputs[i];
            let mut dz = upstream;
            for (g, zv) in dz.as_mut_slice().iter_mut().zip(z.data()) {
                *g *= layer.activation.derivative(*zv);
            }
            if self.trainable[i] {
                let mut dw = Matrix::zeros(layer.outputs(), layer.inputs());
                let mut db = vec![0.0; layer.outputs()];
                for b in 0..batch {
                    let dzb = dz.row(b);
                    let xb = x.row(b);
                    for (o, &g) in dzb.iter().enumerate() {
                        if g != 0.0 {
                            axpy(g, xb, dw.row_mut(o));
                            db[o] += g;
                        }
                    }
                }
                layer_grads[i] = Some(LayerGrad {
                    weights: dw,
                    biases: db,
                });
            }
            let mut dx = Matrix::zeros(batch, layer.inputs());
            for b in 0..batch {
                let dzb = dz.row(b);
                let dxb = dx.row_mut(b);
                for (o, &g) in dzb.iter().enumerate() {
                    if g != 0.0 {
                        axpy(g, layer.weights.row(o), dxb);
                    }
                }
            }
            upstream = dx;
        }
        Ok(Gradients {
            layers: layer_grads,
            input: upstream,
        })
    }

    /// SHA-256 over shapes, activations, trainable flags and parameter bits.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (layer, t) in self.layers.iter().zip(&self.trainable) {
            h.update((layer.inputs() as u64).to_le_bytes());
            h.update((layer.outputs() as u64).to_le_bytes());
            h.update([layer.activation as u8, u8::from(*t)]);
            for v in layer.weights.data().iter().chain(&layer.biases) {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_document(&self) -> ModelDocument {
        ModelDocument {
            format_version: MODEL_FORMAT_VERSION,
            seed: self.seed,
            layers: self
                .layers
                .iter()
                .zip(&self.trainable)
                .map(|(l, &t)| LayerDocument {
                    inputs: l.inputs(),
                    outputs: l.outputs(),
                    activation: l.activation,
                    trainable: t,
                    weights: l.weights.data().to_vec(),
                    biases: l.biases.clone(),
                })
                .collect(),
        }
    }

    pub fn from_document(doc: ModelDocument) -> Result<Self, NnError> {
        if doc.format_version != MODEL_FORMAT_VERSION {
            return Err(NnError::Format(format!(
                "unsupported format version {}",
                doc.format_version
            )));
        }
        let mut trainable = Vec::with_capacity(doc.layers.len());
        let mut layers = Vec::with_capacity(doc.layers.len());
        for l in doc.layers {
            let weights = Matrix::new(l.outputs, l.inputs, l.weights)?;
            layers.push(DenseLayer::new(weights, l.biases, l.activation)?);
            trainable.push(l.trainable);
        }
        let mut net = Mlp::new(layers, doc.seed)?;
        net.trainable = trainable;
        Ok(net)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("model document serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, NnError> {
        let doc: ModelDocument = serde_json::from_str(text).map_err(|e| NnError::Format(e.to_string()))?;
        Self::from_document(doc)
    }
}

/// Self-describing JSON form of an [`Mlp`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub format_version: u32,
    pub seed: u64,
    pub layers: Vec<LayerDocument>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDocument {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
    pub trainable: bool,
    /// Row-major `outputs x inputs`.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

/// Mean squared error over all entries and its gradient.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>), NnError> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(NnError::DimensionMismatch(format!(
            "prediction length {} vs target length {}",
            pred.len(),
            target.len()
        )));
    }
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            loss += d * d;
            2.0 * d / n
        })
        .collect();
    Ok((loss / n, grad))
}

pub fn mse_loss_batch(pred: &Matrix, target: &Matrix) -> Result<(f64, Matrix), NnError> {
    if pred.shape() != target.shape() {
        return Err(NnError::DimensionMismatch(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let (loss, grad) = mse_loss(pred.data(), target.data())?;
    Ok((loss, Matrix::new(pred.rows(), pred.cols(), grad)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(self, lr: f64) -> Self {
        Self { lr, ..self }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Moments {
    fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// Adam moments for the trainable layers of one network.
#[derive(Debug, Clone)]
pub struct AdamState {
    config: AdamConfig,
    t: u64,
    /// Weights then biases per layer; `None` for frozen layers.
    moments: Vec<Option<(Moments, Moments)>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, net: &Mlp) -> Self {
        let moments = net
            .layers
            .iter()
            .zip(&net.trainable)
            .map(|(l, &t)| t.then(|| (Moments::zeros(l.weights.data().len()), Moments::zeros(l.biases.len()))))
            .collect();
        Self {
            config,
            t: 0,
            moments,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    /// One bias-corrected Adam update on every trainable layer.
    pub fn step(&mut self, net: &mut Mlp, grads: &Gradients) -> Result<(), NnError> {
        if grads.layers.len() != net.layers.len() || self.moments.len() != net.layers.len() {
            return Err(NnError::DimensionMismatch("gradient/optimizer layer count".into()));
        }
        self.t += 1;
        let cfg = self.config;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (i, layer) in net.layers.iter_mut().enumerate() {
            if !net.trainable[i] {
                continue;
            }
            let (Some(g), Some((mw, mb))) = (&grads.layers[i], self.moments[i].as_mut()) else {
                return Err(NnError::DimensionMismatch(format!(
                    "missing gradient or moments for trainable layer {i}"
                )));
            };
            if g.weights.data().len() != mw.m.len() || g.biases.len() != mb.m.len() {
                return Err(NnError::DimensionMismatch(format!("gradient shape for layer {i}")));
            }
            adam_update(&cfg, bc1, bc2, layer.weights.as_mut_slice(), g.weights.data(), mw);
            adam_update(&cfg, bc1, bc2, &mut layer.biases, &g.biases, mb);
            let finite = layer.weights.data().iter().chain(&layer.biases).all(|v| v.is_finite());
            if !finite {
                return Err(NnError::NonFiniteParameter { layer: i });
            }
        }
        Ok(())
    }
}

fn adam_update(cfg: &AdamConfig, bc1: f64, bc2: f64, params: &mut [f64], grads: &[f64], mom: &mut Moments) {
    for ((p, &g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(mom.m.iter_mut().zip(mom.v.iter_mut()))
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Validation set watched for early stopping.
#[derive(Debug, Clone, Copy)]
pub struct Monitor<'a> {
    pub inputs: &'a Matrix,
    pub targets: &'a Matrix,
    /// Halt after this many epochs without improvement.
    pub patience: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Training loss of the parameters entering each epoch's update.
    pub train_loss: Vec<f64>,
    /// Monitored loss after each epoch's update (empty without a monitor).
    pub val_loss: Vec<f64>,
    /// Epoch whose parameters were kept; 0 means the initial parameters.
    pub best_epoch: usize,
    pub best_val_loss: Option<f64>,
    pub stopped_early: bool,
}

/// Full-batch Adam training on MSE.
///
/// With a monitor, the network is restored to the best monitored epoch
/// before returning.
pub fn train(
    net: &mut Mlp,
    inputs: &Matrix,
    targets: &Matrix,
    epochs: usize,
    adam: AdamConfig,
    monitor: Option<Monitor<'_>>,
) -> Result<TrainReport, NnError> {
    if epochs == 0 {
        return Err(NnError::InvalidConfig("epochs must be at least 1".into()));
    }
    if inputs.rows() != targets.rows() || inputs.rows() == 0 {
        return Err(NnError::DimensionMismatch(format!(
            "{} input rows vs {} target rows",
            inputs.rows(),
            targets.rows()
        )));
    }
    if targets.cols() != net.output_dim() {
        return Err(NnError::DimensionMismatch(format!(
            "targets have {} columns, network emits {}",
            targets.cols(),
            net.output_dim()
        )));
    }
    let mut state = AdamState::new(adam, net);
    let mut report = TrainReport::default();

    let mut best: Option<(f64, Mlp)> = None;
    if let Some(mon) = &monitor {
        let val = monitored_loss(net, mon, 0)?;
        report.best_val_loss = Some(val);
        best = Some((val, net.clone()));
    }

    for epoch in 1..=epochs {
        let (pred, cache) = net.forward_batch(inputs)?;
        let (loss, grad) = mse_loss_batch(&pred, targets)?;
        if !loss.is_finite() {
            return Err(NnError::Diverged { epoch });
        }
        report.train_loss.push(loss);
        let grads = net.backward(&cache, &grad)?;
        state.step(net, &grads).map_err(|e| match e {
            NnError::NonFiniteParameter { .. } => NnError::Diverged { epoch },
            other => other,
        })?;

        if let Some(mon) = &monitor {
            let val = monitored_loss(net, mon, epoch)?;
            report.val_loss.push(val);
            let (best_val, _) = best.as_ref().expect("initialized with monitor");
            if val < *best_val - IMPROVEMENT_EPS {
                report.best_epoch = epoch;
                report.best_val_loss = Some(val);
                best = Some((val, net.clone()));
            } else if epoch - report.best_epoch >= mon.patience {
                report.stopped_early = true;
                break;
            }
        }
    }

    match best {
        Some((_, kept)) => *net = kept,
        None => report.best_epoch = report.train_loss.len(),
    }
    Ok(report)
}

fn monitored_loss(net: &Mlp, mon: &Monitor<'_>, epoch: usize) -> Result<f64, NnError> {
    let pred = net.predict_batch(mon.inputs)?;
    let (val, _) = mse_loss_batch(&pred, mon.targets)?;
    if !val.is_finite() {
        return Err(NnError::Diverged { epoch });
    }
    Ok(val)
}
