//! The base classifier: a dense stack exposing every intermediate
//! representation, trained by plain mini-batch gradient descent.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::detector::BiasDetector;
use crate::error::{dim, invalid, FairNetError, Result};
use crate::fairlora::{AdapterGrad, LoraAdapter};
use crate::numerics::{
    activation_backward, stable_softmax_ce, Activation, DenseCache, GradientTape, LayerSpec, Matrix,
};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub spec: LayerSpec,
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseModel {
    layers: Vec<DenseLayer>,
    num_classes: usize,
    frozen: bool,
}

/// Per-layer caches of one forward pass. Layer indices are 1-based in the
/// public accessors: `representation(1)` is the first hidden output.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub caches: Vec<DenseCache>,
}

impl ForwardTrace {
    pub fn representation(&self, layer: usize) -> &[f64] {
        &self.caches[layer - 1].output
    }

    pub fn pre_activation(&self, layer: usize) -> &[f64] {
        &self.caches[layer - 1].pre_activation
    }

    pub fn logits(&self) -> &[f64] {
        &self.caches.last().expect("empty trace").output
    }

    pub fn depth(&self) -> usize {
        self.caches.len()
    }
}

/// Result of a reverse pass besides the accumulated parameter gradients:
/// the gradient at every layer's pre-activation and w.r.t. the input.
#[derive(Debug, Clone)]
pub struct Backprop {
    pub dpre: Vec<Vec<f64>>,
    pub dinput: Vec<f64>,
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

impl BaseModel {
    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(invalid("model needs at least one layer"));
        }
        for (k, layer) in layers.iter().enumerate() {
            if layer.weight.shape() != (layer.spec.out_dim, layer.spec.in_dim)
                || layer.bias.len() != layer.spec.out_dim
            {
                return Err(dim(format!(
                    "layer {} parameters do not match its spec",
                    k + 1
                )));
            }
            if k > 0 && layers[k - 1].spec.out_dim != layer.spec.in_dim {
                return Err(dim(format!("layer {} input does not chain", k + 1)));
            }
        }
        let num_classes = layers.last().map(|l| l.spec.out_dim).unwrap_or(0);
        Ok(Self {
            layers,
            num_classes,
            frozen: false,
        })
    }

    /// `input → hidden… → classes`, hidden layers using `activation`, the
    /// output layer linear.
    pub fn init(
        input: usize,
        hidden: &[usize],
        classes: usize,
        activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = SplitMix64::new(seed);
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(classes);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let act = if k + 2 == dims.len() {
                    Activation::Identity
                } else {
                    activation
                };
                let spec = LayerSpec::new(w[0], w[1], act)?;
                Ok(DenseLayer {
                    spec,
                    weight: Matrix::xavier_uniform(w[1], w[0], &mut rng),
                    bias: vec![0.0; w[1]],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layer(&self, index: usize) -> &DenseLayer {
        &self.layers[index - 1]
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].spec.in_dim
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.rows() * l.weight.cols() + l.bias.len())
            .sum()
    }

    /// Multiply-adds count two FLOPs; bias adds count one.
    pub fn flops_per_sample(&self) -> usize {
        self.layers
            .iter()
            .map(|l| 2 * l.spec.in_dim * l.spec.out_dim + l.spec.out_dim)
            .sum()
    }

    pub fn check_layer(&self, index: usize) -> Result<()> {
        if index == 0 || index > self.depth() {
            return Err(invalid(format!(
                "layer {index} outside 1..={}",
                self.depth()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardTrace> {
        self.forward_adapted(x, &[])
    }

    /// Forward pass where every adapter in `active` adds `B(A·input)` to the
    /// pre-activation of its target layer.
    pub fn forward_adapted(&self, x: &[f64], active: &[&LoraAdapter]) -> Result<ForwardTrace> {
        if x.len() != self.input_dim() {
            return Err(dim(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let mut caches = Vec::with_capacity(self.depth());
        let mut current = x.to_vec();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut pre = layer.weight.matvec(&current)?;
            for (p, b) in pre.iter_mut().zip(&layer.bias) {
                *p += b;
            }
            for adapter in active.iter().filter(|a| a.target_layer() == k + 1) {
                for (p, d) in pre.iter_mut().zip(adapter.apply(&current)?) {
                    *p += d;
                }
            }
            let output: Vec<f64> = pre
                .iter()
                .map(|&v| layer.spec.activation.apply(v))
                .collect();
            let input = std::mem::replace(&mut current, output.clone());
            caches.push(DenseCache {
                input,
                pre_activation: pre,
                output,
            });
        }
        Ok(ForwardTrace { caches })
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(self.forward(x)?.logits()))
    }

    pub fn new_tape(&self) -> GradientTape {
        GradientTape::for_shapes(self.layers.iter().map(|l| l.weight.shape()))
    }

    /// Reverse pass accumulating base-parameter gradients into `tape` and
    /// adapter gradients into `adapter_grads` (aligned with `active`, which
    /// must match the forward pass). `extra` adds gradients at the outputs of
    /// earlier layers (1-based index → gradient).
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        dlogits: &[f64],
        extra: &BTreeMap<usize, Vec<f64>>,
        active: &[&LoraAdapter],
        tape: &mut GradientTape,
        adapter_grads: &mut [AdapterGrad],
    ) -> Result<Backprop> {
        if trace.depth() != self.depth() {
            return Err(dim("trace depth does not match model"));
        }
        if dlogits.len() != self.num_classes {
            return Err(dim("logit gradient length"));
        }
        if adapter_grads.len() != active.len() {
            return Err(dim("one adapter gradient buffer per active adapter"));
        }
        let mut dpre = vec![Vec::new(); self.depth()];
        let mut upstream = dlogits.to_vec();
        for k in (0..self.depth()).rev() {
            if let Some(g) = extra.get(&(k + 1)) {
                if g.len() != upstream.len() {
                    return Err(dim(format!("extra gradient at layer {}", k + 1)));
                }
                for (u, e) in upstream.iter_mut().zip(g) {
                    *u += e;
                }
            }
            let layer = &self.layers[k];
            let cache = &trace.caches[k];
            let d = activation_backward(layer.spec.activation, cache, &upstream);
            tape.weights[k].add_outer(1.0, &d, &cache.input);
            for (gb, v) in tape.biases[k].iter_mut().zip(&d) {
                *gb += v;
            }
            let mut down = layer.weight.t_matvec(&d)?;
            for (adapter, grad) in active.iter().zip(adapter_grads.iter_mut()) {
                if adapter.target_layer() == k + 1 {
                    let extra_down = adapter.backward(&cache.input, &d, grad)?;
                    for (x, e) in down.iter_mut().zip(extra_down) {
                        *x += e;
                    }
                }
            }
            upstream = down;
            dpre[k] = d;
        }
        Ok(Backprop {
            dpre,
            dinput: upstream,
        })
    }

    /// `θ ← θ − lr · g`. Fails on a frozen model.
    pub fn apply_gradients(&mut self, lr: f64, tape: &GradientTape) -> Result<()> {
        if self.frozen {
            return Err(invalid("model is frozen"));
        }
        for (layer, (gw, gb)) in self
            .layers
            .iter_mut()
            .zip(tape.weights.iter().zip(&tape.biases))
        {
            layer.weight.step(lr, gw);
            for (b, g) in layer.bias.iter_mut().zip(gb) {
                *b -= lr * g;
            }
        }
        Ok(())
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.values());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(dim("flat parameter length"));
        }
        let mut cursor = 0;
        for l in &mut self.layers {
            let nw = l.weight.rows() * l.weight.cols();
            l.weight
                .values_mut()
                .copy_from_slice(&params[cursor..cursor + nw]);
            cursor += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&params[cursor..cursor + nb]);
            cursor += nb;
        }
        Ok(())
    }

    /// Mean cross-entropy over `indices` and its gradient.
    pub fn batch_loss(
        &self,
        dataset: &Dataset,
        indices: &[usize],
        tape: &mut GradientTape,
    ) -> Result<f64> {
        tape.zero();
        let empty = BTreeMap::new();
        let mut total = 0.0;
        for &i in indices {
            let trace = self.forward(dataset.x(i))?;
            let (loss, g) = stable_softmax_ce(trace.logits(), dataset.y()[i])?;
            total += loss;
            self.backward(&trace, &g, &empty, &[], tape, &mut [])?;
        }
        let n = indices.len().max(1) as f64;
        tape.scale(1.0 / n);
        Ok(total / n)
    }

    pub fn accuracy(&self, dataset: &Dataset, indices: &[usize]) -> Result<f64> {
        if indices.is_empty() {
            return Ok(0.0);
        }
        let mut hits = 0usize;
        for &i in indices {
            hits += usize::from(self.predict(dataset.x(i))? == dataset.y()[i]);
        }
        Ok(hits as f64 / indices.len() as f64)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&ModelCheckpoint {
            format_version: CHECKPOINT_VERSION,
            model: self.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: ModelCheckpoint = serde_json::from_str(text)?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(invalid(format!(
                "unsupported checkpoint version {}",
                ck.format_version
            )));
        }
        let mut model = Self::from_layers(ck.model.layers)?;
        model.frozen = ck.model.frozen;
        Ok(model)
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelCheckpoint {
    format_version: u32,
    model: BaseModel,
}

/// Mini-batch gradient descent settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ErmHyper {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for ErmHyper {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32],
            activation: Activation::Tanh,
            learning_rate: 0.05,
            batch_size: 64,
            epochs: 300,
        }
    }
}

impl ErmHyper {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning_rate must be positive"));
        }
        if self.hidden.contains(&0) {
            return Err(invalid("hidden widths must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErmLog {
    pub epoch_losses: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

/// Empirical risk minimisation. Returns the parameters from the epoch with
/// the best validation accuracy (epoch 0 is the initialisation; ties keep
/// the earliest).
pub fn train_erm(dataset: &Dataset, hyper: &ErmHyper, seed: u64) -> Result<(BaseModel, ErmLog)> {
    hyper.validate()?;
    let train = dataset.indices(Split::Train);
    if train.is_empty() {
        return Err(FairNetError::InsufficientData(
            "empty training split".into(),
        ));
    }
    let mut val = dataset.indices(Split::Val);
    if val.is_empty() {
        val.clone_from(&train);
    }
    let mut model = BaseModel::init(
        dataset.dim(),
        &hyper.hidden,
        dataset.num_classes(),
        hyper.activation,
        SplitMix64::derive(seed, 1).next_u64(),
    )?;
    let mut order_rng = SplitMix64::derive(seed, 2);
    let mut best = model.clone();
    let mut best_acc = model.accuracy(dataset, &val)?;
    let mut best_epoch = 0;
    let mut tape = model.new_tape();
    let mut epoch_losses = Vec::with_capacity(hyper.epochs);
    let mut order = train.clone();
    for epoch in 1..=hyper.epochs {
        order_rng.shuffle(&mut order);
        let mut sum = 0.0;
        for batch in order.chunks(hyper.batch_size) {
            let loss = model.batch_loss(dataset, batch, &mut tape)?;
            if !loss.is_finite() {
                return Err(FairNetError::Diverged {
                    epoch,
                    msg: "non-finite cross-entropy".into(),
                });
            }
            sum += loss * batch.len() as f64;
            model.apply_gradients(hyper.learning_rate, &tape)?;
        }
        if !model.params_flat().iter().all(|v| v.is_finite()) {
            return Err(FairNetError::Diverged {
                epoch,
                msg: "non-finite weights".into(),
            });
        }
        epoch_losses.push(sum / order.len() as f64);
        let acc = model.accuracy(dataset, &val)?;
        if acc > best_acc {
            best_acc = acc;
            best_epoch = epoch;
            best.clone_from(&model);
        }
    }
    Ok((
        best,
        ErmLog {
            epoch_losses,
            best_epoch,
            best_val_accuracy: best_acc,
        },
    ))
}

/// Parameter and per-sample FLOP accounting for a model with adapters and
/// detectors attached.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Overhead {
    pub params_base: usize,
    pub params_added: usize,
    pub flops_per_sample_base: usize,
    /// Base plus detector scoring, adapters idle.
    pub flops_per_sample_untriggered: usize,
    /// Base plus detector scoring plus every adapter's `B(Ax)` product.
    pub flops_per_sample_triggered: usize,
}

pub fn count_overhead(
    model: &BaseModel,
    adapters: &[LoraAdapter],
    detectors: &[BiasDetector],
) -> Overhead {
    let params_base = model.param_count();
    let adapter_params: usize = adapters.iter().map(LoraAdapter::param_count).sum();
    let detector_params: usize = detectors.iter().map(BiasDetector::param_count).sum();
    let base_flops = model.flops_per_sample();
    let detector_flops: usize = detectors.iter().map(BiasDetector::flops_per_sample).sum();
    let adapter_flops: usize = adapters.iter().map(LoraAdapter::flops_per_sample).sum();
    Overhead {
        params_base,
        params_added: adapter_params + detector_params,
        flops_per_sample_base: base_flops,
        flops_per_sample_untriggered: base_flops + detector_flops,
        flops_per_sample_triggered: base_flops + detector_flops + adapter_flops,
    }
}
