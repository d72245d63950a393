//! The trainable model: a ReLU MLP feature extractor followed by one linear
//! classifier whose rows grow as classes arrive.
//!
//! Parameters live in [`Dense`] layers with weights stored `out × in`, so a
//! layer computes `x · Wᵀ + b`. Backpropagation is exact; [`Sgd`] applies
//! momentum and weight decay and can be restricted to the classifier.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};
use crate::ClassId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `out × in`
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn new(weights: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(Error::invalid(format!(
                "bias length {} does not match {} output units",
                bias.len(),
                weights.rows()
            )));
        }
        Ok(Dense { weights, bias })
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            weights: Matrix::zeros(outputs, inputs),
            bias: vec![0.0; outputs],
        }
    }

    fn uniform(inputs: usize, outputs: usize, bound: f64, rng: &mut Rng) -> Self {
        let data = (0..inputs * outputs).map(|_| rng.uniform(-bound, bound)).collect();
        Dense {
            weights: Matrix::from_vec(outputs, inputs, data).expect("finite init"),
            bias: vec![0.0; outputs],
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.rows()
    }

    fn apply(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = x.matmul_transpose_b(&self.weights)?;
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(&self.bias) {
                *o += b;
            }
        }
        Ok(out)
    }

    fn parameter_count(&self) -> usize {
        self.weights.rows() * self.weights.cols() + self.bias.len()
    }
}

/// Optimizer settings for one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs at which the learning rate is divided by 10.
    #[serde(default)]
    pub lr_decay_epochs: Vec<usize>,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::invalid(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.learning_rate * 0.1_f64.powi(decays as i32)
    }
}

/// Activations retained by a forward pass for backpropagation.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// Input to each extractor layer; `layer_inputs[0]` is the batch itself.
    layer_inputs: Vec<Matrix>,
    /// Pre-activation output of each extractor layer.
    pre_activations: Vec<Matrix>,
    pub features: Matrix,
    pub logits: Matrix,
}

/// Gradient of a scalar objective with respect to every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub extractor: Vec<Dense>,
    pub classifier: Dense,
}

impl Gradients {
    /// Same ordering as [`Network::parameters`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in self.extractor.iter().chain(std::iter::once(&self.classifier)) {
            out.extend_from_slice(layer.weights.as_slice());
            out.extend_from_slice(&layer.bias);
        }
        out
    }
}

/// Which parameters an optimizer step may touch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateScope {
    All,
    /// Extractor frozen; used by decoupled classifier retraining.
    ClassifierOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    input_dim: usize,
    extractor: Vec<Dense>,
    classifier: Dense,
}

impl Network {
    /// Random MLP `input_dim → hidden[0] → … → hidden[last]` with a classifier
    /// over `num_classes` outputs. Extractor layers use He-uniform weights.
    pub fn new(input_dim: usize, hidden: &[usize], num_classes: usize, rng: &mut Rng) -> Result<Self> {
        if input_dim == 0 || hidden.contains(&0) {
            return Err(Error::invalid("layer sizes must be positive"));
        }
        let mut extractor = Vec::with_capacity(hidden.len());
        let mut fan_in = input_dim;
        for &h in hidden {
            let bound = (6.0 / fan_in as f64).sqrt();
            extractor.push(Dense::uniform(fan_in, h, bound, rng));
            fan_in = h;
        }
        let classifier = Dense::uniform(fan_in, num_classes, head_init_bound(fan_in), rng);
        Ok(Network {
            input_dim,
            extractor,
            classifier,
        })
    }

    /// All-zero parameters of the given shape.
    pub fn zeros(input_dim: usize, hidden: &[usize], num_classes: usize) -> Self {
        let mut extractor = Vec::new();
        let mut fan_in = input_dim;
        for &h in hidden {
            extractor.push(Dense::zeros(fan_in, h));
            fan_in = h;
        }
        Network {
            input_dim,
            extractor,
            classifier: Dense::zeros(fan_in, num_classes),
        }
    }

    pub fn from_layers(extractor: Vec<Dense>, classifier: Dense) -> Result<Self> {
        let input_dim = extractor.first().map_or(classifier.inputs(), Dense::inputs);
        let mut width = input_dim;
        for (i, layer) in extractor.iter().enumerate() {
            if layer.inputs() != width {
                return Err(Error::invalid(format!(
                    "extractor layer {i} expects {} inputs, previous width is {width}",
                    layer.inputs()
                )));
            }
            width = layer.outputs();
        }
        if classifier.inputs() != width {
            return Err(Error::invalid(format!(
                "classifier expects {} inputs, feature width is {width}",
                classifier.inputs()
            )));
        }
        Ok(Network {
            input_dim,
            extractor,
            classifier,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.classifier.inputs()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.outputs()
    }

    pub fn hidden_sizes(&self) -> Vec<usize> {
        self.extractor.iter().map(Dense::outputs).collect()
    }

    pub fn extractor(&self) -> &[Dense] {
        &self.extractor
    }

    pub fn classifier(&self) -> &Dense {
        &self.classifier
    }

    fn check_input(&self, batch: &Matrix) -> Result<()> {
        if batch.cols() != self.input_dim {
            return Err(Error::invalid(format!(
                "batch has {} columns, network expects {}",
                batch.cols(),
                self.input_dim
            )));
        }
        Ok(())
    }

    pub fn forward(&self, batch: &Matrix) -> Result<Matrix> {
        let features = self.extract_features(batch)?;
        self.classifier.apply(&features)
    }

    /// Penultimate representation (output of the last ReLU).
    pub fn extract_features(&self, batch: &Matrix) -> Result<Matrix> {
        self.check_input(batch)?;
        let mut h = batch.clone();
        for layer in &self.extractor {
            h = layer.apply(&h)?.map(relu);
        }
        Ok(h)
    }

    /// Classifier output for precomputed features.
    pub fn classify_features(&self, features: &Matrix) -> Result<Matrix> {
        self.classifier.apply(features)
    }

    pub fn forward_pass(&self, batch: &Matrix) -> Result<ForwardPass> {
        self.check_input(batch)?;
        let mut layer_inputs = Vec::with_capacity(self.extractor.len());
        let mut pre_activations = Vec::with_capacity(self.extractor.len());
        let mut h = batch.clone();
        for layer in &self.extractor {
            let pre = layer.apply(&h)?;
            let next = pre.map(relu);
            layer_inputs.push(h);
            pre_activations.push(pre);
            h = next;
        }
        let logits = self.classifier.apply(&h)?;
        Ok(ForwardPass {
            layer_inputs,
            pre_activations,
            features: h,
            logits,
        })
    }

    /// Backpropagates `dL/dlogits` through the cached pass. With
    /// [`UpdateScope::ClassifierOnly`] the extractor gradients are left zero.
    pub fn backward(&self, pass: &ForwardPass, grad_logits: &Matrix, scope: UpdateScope) -> Result<Gradients> {
        if grad_logits.shape() != pass.logits.shape() {
            return Err(Error::invalid(format!(
                "gradient shape {:?} does not match logits {:?}",
                grad_logits.shape(),
                pass.logits.shape()
            )));
        }
        let classifier = layer_gradient(&pass.features, grad_logits)?;
        let mut extractor: Vec<Dense> = self
            .extractor
            .iter()
            .map(|l| Dense::zeros(l.inputs(), l.outputs()))
            .collect();
        if scope == UpdateScope::All {
            let mut upstream = grad_logits.matmul(&self.classifier.weights)?;
            for i in (0..self.extractor.len()).rev() {
                let pre = &pass.pre_activations[i];
                for (g, &p) in upstream.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                    if p <= 0.0 {
                        *g = 0.0;
                    }
                }
                extractor[i] = layer_gradient(&pass.layer_inputs[i], &upstream)?;
                if i > 0 {
                    upstream = upstream.matmul(&self.extractor[i].weights)?;
                }
            }
        }
        Ok(Gradients { extractor, classifier })
    }

    /// Appends `count` classifier rows drawn from `U(-1/√d, 1/√d)` with zero
    /// bias, leaving existing rows untouched.
    pub fn expand_classifier(&mut self, count: usize, rng: &mut Rng) -> Result<()> {
        if count == 0 {
            return Err(Error::invalid("expand_classifier needs at least one new class"));
        }
        let d = self.feature_dim();
        let fresh = Dense::uniform(d, count, head_init_bound(d), rng);
        self.classifier.weights.append_rows(&fresh.weights)?;
        self.classifier.bias.extend(fresh.bias);
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.extractor.iter().map(Dense::parameter_count).sum::<usize>() + self.classifier.parameter_count()
    }

    /// Every weight and bias, layer by layer (weights row-major, then bias).
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for layer in self.extractor.iter().chain(std::iter::once(&self.classifier)) {
            out.extend_from_slice(layer.weights.as_slice());
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    pub fn set_parameters(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.parameter_count() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.parameter_count(),
                values.len()
            )));
        }
        let mut offset = 0;
        for layer in self.extractor.iter_mut().chain(std::iter::once(&mut self.classifier)) {
            let w = layer.weights.as_mut_slice();
            w.copy_from_slice(&values[offset..offset + w.len()]);
            offset += w.len();
            let b = layer.bias.len();
            layer.bias.copy_from_slice(&values[offset..offset + b]);
            offset += b;
        }
        Ok(())
    }

    /// Flattened extractor parameters only.
    pub fn extractor_parameters(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.extractor {
            out.extend_from_slice(layer.weights.as_slice());
            out.extend_from_slice(&layer.bias);
        }
        out
    }
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

fn head_init_bound(feature_dim: usize) -> f64 {
    1.0 / (feature_dim as f64).sqrt()
}

/// `dW = gradᵀ · input`, `db = Σ_rows grad`.
fn layer_gradient(input: &Matrix, grad_out: &Matrix) -> Result<Dense> {
    let weights = grad_out.transpose_a_matmul(input)?;
    let mut bias = vec![0.0; grad_out.cols()];
    for r in grad_out.row_iter() {
        for (b, g) in bias.iter_mut().zip(r) {
            *b += g;
        }
    }
    Ok(Dense { weights, bias })
}

/// Frozen copy of a network, taken at the end of a phase.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherSnapshot {
    net: Network,
}

impl TeacherSnapshot {
    pub fn capture(net: &Network) -> Self {
        TeacherSnapshot { net: net.clone() }
    }

    pub fn forward(&self, batch: &Matrix) -> Result<Matrix> {
        self.net.forward(batch)
    }

    pub fn extract_features(&self, batch: &Matrix) -> Result<Matrix> {
        self.net.extract_features(batch)
    }

    pub fn num_classes(&self) -> usize {
        self.net.num_classes()
    }

    pub fn network(&self) -> &Network {
        &self.net
    }
}

/// SGD with heavy-ball momentum and L2 weight decay:
/// `g ← g + λw`, `v ← μv + g`, `w ← w − ηv`.
#[derive(Clone, Debug)]
pub struct Sgd {
    config: SgdConfig,
    velocity: Option<Gradients>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Result<Self> {
        config.validate()?;
        Ok(Sgd { config, velocity: None })
    }

    pub fn config(&self) -> &SgdConfig {
        &self.config
    }

    pub fn step(&mut self, net: &mut Network, grads: &Gradients, learning_rate: f64, scope: UpdateScope) -> Result<()> {
        if grads.extractor.len() != net.extractor.len()
            || grads.classifier.weights.shape() != net.classifier.weights.shape()
        {
            return Err(Error::invalid("gradient structure does not match the network"));
        }
        let velocity = self.velocity.get_or_insert_with(|| zero_like(net));
        if velocity.classifier.weights.shape() != net.classifier.weights.shape() {
            *velocity = zero_like(net);
        }
        let SgdConfig {
            momentum, weight_decay, ..
        } = self.config;
        if scope == UpdateScope::All {
            for ((layer, g), v) in net.extractor.iter_mut().zip(&grads.extractor).zip(&mut velocity.extractor) {
                update_layer(layer, g, v, learning_rate, momentum, weight_decay);
            }
        }
        update_layer(
            &mut net.classifier,
            &grads.classifier,
            &mut velocity.classifier,
            learning_rate,
            momentum,
            weight_decay,
        );
        Ok(())
    }
}

fn zero_like(net: &Network) -> Gradients {
    Gradients {
        extractor: net.extractor.iter().map(|l| Dense::zeros(l.inputs(), l.outputs())).collect(),
        classifier: Dense::zeros(net.classifier.inputs(), net.classifier.outputs()),
    }
}

fn update_layer(layer: &mut Dense, grad: &Dense, velocity: &mut Dense, lr: f64, momentum: f64, weight_decay: f64) {
    let pairs = layer
        .weights
        .as_mut_slice()
        .iter_mut()
        .zip(grad.weights.as_slice())
        .zip(velocity.weights.as_mut_slice())
        .chain(layer.bias.iter_mut().zip(&grad.bias).zip(velocity.bias.iter_mut()));
    for ((w, &g), v) in pairs {
        let g = g + weight_decay * *w;
        *v = momentum * *v + g;
        *w -= lr * *v;
    }
}

/// Forward, backward and one optimizer step in a single call.
pub fn backward_and_step(
    net: &mut Network,
    pass: &ForwardPass,
    grad_logits: &Matrix,
    optimizer: &mut Sgd,
    learning_rate: f64,
    scope: UpdateScope,
) -> Result<()> {
    let grads = net.backward(pass, grad_logits, scope)?;
    optimizer.step(net, &grads, learning_rate, scope)
}

const CHECKPOINT_FORMAT: &str = "mgrb-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk model checkpoint (JSON). Layout:
///
/// ```text
/// { "format": "mgrb-checkpoint", "version": 1,
///   "input_dim": D, "hidden_sizes": [h1, ...], "num_classes": N,
///   "class_order": [class ids, one per classifier row],
///   "network": { "input_dim": D,
///                "extractor": [ { "weights": {rows, cols, data}, "bias": [...] }, ... ],
///                "classifier": { "weights": {...}, "bias": [...] } } }
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub input_dim: usize,
    pub hidden_sizes: Vec<usize>,
    pub num_classes: usize,
    pub class_order: Vec<ClassId>,
    pub network: Network,
}

impl Checkpoint {
    pub fn new(network: &Network, class_order: &[ClassId]) -> Result<Self> {
        if class_order.len() != network.num_classes() {
            return Err(Error::invalid(format!(
                "class order lists {} classes, classifier has {}",
                class_order.len(),
                network.num_classes()
            )));
        }
        Ok(Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            input_dim: network.input_dim(),
            hidden_sizes: network.hidden_sizes(),
            num_classes: network.num_classes(),
            class_order: class_order.to_vec(),
            network: network.clone(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::invalid(format!("not a checkpoint file (format `{}`)", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!("unsupported checkpoint version {}", ck.version)));
        }
        let net = &ck.network;
        let rebuilt = Network::from_layers(net.extractor.clone(), net.classifier.clone())?;
        if rebuilt.input_dim() != ck.input_dim
            || rebuilt.hidden_sizes() != ck.hidden_sizes
            || rebuilt.num_classes() != ck.num_classes
            || ck.class_order.len() != ck.num_classes
        {
            return Err(Error::invalid("checkpoint header does not match its parameters"));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_json(&std::fs::read_to_string(path)?)
    }
}
