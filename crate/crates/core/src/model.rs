//! Classifiers in encoder + prototype-head form: `logits = Wᵀ f(x)`.
//!
//! The encoder `f` is either an MLP or a small CNN with relu activations
//! (including after its last layer). The head is a bias-free `d×M` matrix
//! whose columns are the class prototypes.
//!
//! # Model file
//!
//! A model is persisted as one JSON document:
//!
//! ```text
//! {
//!   "format": "tempscale-model",
//!   "version": 1,
//!   "spec": { EncoderSpec },
//!   "classes": M,
//!   "metadata": { ModelMetadata },
//!   "params": [ { "name": ..., "shape": [...], "data": [...] }, ... ]
//! }
//! ```
//!
//! Parameters are listed in registration order. Encoder linear weights are
//! stored `[fan_in × fan_out]`, conv kernels `[out, in, kh, kw]`, and the
//! head `head.prototypes` as `[d × M]`. Floats are written in shortest
//! round-trip form, so a save/load cycle is bit-exact.

use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Padding, ParamId, ParameterStore, Tape, Var};
use crate::error::{Error, Result};
use crate::seed;
use crate::softmax::Logits;
use crate::tensor::{matmul, Tensor};

pub const MODEL_FORMAT: &str = "tempscale-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EncoderSpec {
    /// Fully connected relu stack over flattened input.
    Mlp {
        input_shape: Vec<usize>,
        /// Hidden widths; the last entry is the feature dimension `d`.
        widths: Vec<usize>,
    },
    /// Conv(3×3, same) → relu → 2×2 avg-pool per entry of `channels`,
    /// then a linear layer to `feature_dim` and a final relu.
    SmallCnn {
        /// `[C, H, W]` or `[H, W]` (single channel).
        input_shape: Vec<usize>,
        channels: Vec<usize>,
        feature_dim: usize,
    },
}

impl EncoderSpec {
    /// `input → 256 → 128 → 64` for flat inputs of the given length.
    pub fn default_mlp(input_len: usize) -> Self {
        EncoderSpec::Mlp {
            input_shape: vec![input_len],
            widths: vec![256, 128, 64],
        }
    }

    /// Two conv layers (8, 16 channels) and a 64-wide feature layer.
    pub fn default_cnn(input_shape: Vec<usize>) -> Self {
        EncoderSpec::SmallCnn {
            input_shape,
            channels: vec![8, 16],
            feature_dim: 64,
        }
    }

    pub fn input_shape(&self) -> &[usize] {
        match self {
            EncoderSpec::Mlp { input_shape, .. } | EncoderSpec::SmallCnn { input_shape, .. } => input_shape,
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_shape().iter().product()
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            EncoderSpec::Mlp { widths, .. } => widths.last().copied().unwrap_or(0),
            EncoderSpec::SmallCnn { feature_dim, .. } => *feature_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_shape().is_empty() || self.input_shape().contains(&0) {
            return Err(Error::Usage(format!("invalid input shape {:?}", self.input_shape())));
        }
        if self.feature_dim() < 2 {
            return Err(Error::Usage("feature dimension must be at least 2".into()));
        }
        match self {
            EncoderSpec::Mlp { widths, .. } => {
                if widths.contains(&0) {
                    return Err(Error::Usage("zero-width layer".into()));
                }
            }
            EncoderSpec::SmallCnn {
                input_shape, channels, ..
            } => {
                if channels.is_empty() || channels.contains(&0) {
                    return Err(Error::Usage("small-cnn needs at least one non-empty conv layer".into()));
                }
                if !(2..=3).contains(&input_shape.len()) {
                    return Err(Error::Usage(format!(
                        "small-cnn input must be [H,W] or [C,H,W], got {input_shape:?}"
                    )));
                }
                let (_, h, w) = chw(input_shape);
                let shrink = 1usize << channels.len();
                if h / shrink == 0 || w / shrink == 0 {
                    return Err(Error::Usage(format!(
                        "input {h}x{w} too small for {} pooling stages",
                        channels.len()
                    )));
                }
            }
        }
        Ok(())
    }
}

fn chw(shape: &[usize]) -> (usize, usize, usize) {
    match *shape {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        _ => (0, 0, 0),
    }
}

/// Provenance recorded with a model.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMetadata {
    pub init_seed: u64,
    /// Training temperature; `None` for an untrained model.
    pub tau: Option<f64>,
    pub epochs: usize,
    /// The serialized training configuration, when trained.
    pub train_config: Option<serde_json::Value>,
}

#[derive(Debug, Clone)]
enum Layer {
    Linear { weight: ParamId, bias: ParamId },
    Conv { kernel: ParamId, bias: ParamId },
}

/// Encoder parameters plus prototype matrix.
#[derive(Debug, Clone)]
pub struct Model {
    spec: EncoderSpec,
    classes: usize,
    store: ParameterStore,
    layers: Vec<Layer>,
    head: ParamId,
    pub metadata: ModelMetadata,
}

/// Tape handles produced by [`Model::forward_tape`].
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub features: Var,
    pub logits: Var,
}

/// Whether parameters participate in differentiation on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamMode {
    Trainable,
    Frozen,
}

impl Model {
    /// He-normal weights (`σ = sqrt(2 / fan_in)`), zero biases.
    pub fn init(spec: EncoderSpec, classes: usize, seed_value: u64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Usage(format!("need at least 2 classes, got {classes}")));
        }
        spec.validate()?;
        let mut rng = seed::rng(seed::derive_named(seed_value, "init"));
        let mut he = |shape: &[usize], fan_in: usize| -> Tensor {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(&mut rng)).collect()).expect("shape")
        };
        let mut store = ParameterStore::new();
        let mut layers = Vec::new();
        let d = spec.feature_dim();
        match &spec {
            EncoderSpec::Mlp { input_shape, widths } => {
                let mut fan_in: usize = input_shape.iter().product();
                for (i, &w) in widths.iter().enumerate() {
                    let weight = store.insert(format!("enc.{i}.weight"), he(&[fan_in, w], fan_in))?;
                    let bias = store.insert(format!("enc.{i}.bias"), Tensor::zeros(&[w]))?;
                    layers.push(Layer::Linear { weight, bias });
                    fan_in = w;
                }
            }
            EncoderSpec::SmallCnn {
                input_shape,
                channels,
                feature_dim,
            } => {
                let (mut c, mut h, mut w) = chw(input_shape);
                for (i, &oc) in channels.iter().enumerate() {
                    let kernel = store.insert(format!("enc.conv{i}.kernel"), he(&[oc, c, 3, 3], c * 9))?;
                    let bias = store.insert(format!("enc.conv{i}.bias"), Tensor::zeros(&[oc]))?;
                    layers.push(Layer::Conv { kernel, bias });
                    c = oc;
                    h /= 2;
                    w /= 2;
                }
                let fan_in = c * h * w;
                let weight = store.insert("enc.fc.weight", he(&[fan_in, *feature_dim], fan_in))?;
                let bias = store.insert("enc.fc.bias", Tensor::zeros(&[*feature_dim]))?;
                layers.push(Layer::Linear { weight, bias });
            }
        }
        let head = store.insert("head.prototypes", he(&[d, classes], d))?;
        Ok(Self {
            spec,
            classes,
            store,
            layers,
            head,
            metadata: ModelMetadata {
                init_seed: seed_value,
                ..ModelMetadata::default()
            },
        })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim()
    }

    pub fn params(&self) -> &ParameterStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.store
    }

    /// The `d×M` prototype matrix.
    pub fn prototype_matrix(&self) -> &Tensor {
        self.store.value(self.head)
    }

    /// Prototype vectors `w_j`, in class order.
    pub fn prototypes(&self) -> Vec<Vec<f64>> {
        let w = self.prototype_matrix();
        let (d, m) = (self.feature_dim(), self.classes);
        (0..m).map(|j| (0..d).map(|k| w.data()[k * m + j]).collect()).collect()
    }

    /// Records the forward pass of a `[batch, ...input_shape]` tensor.
    pub fn forward_tape(&self, tape: &mut Tape, x: Var, mode: ParamMode) -> Result<ForwardVars> {
        let bind = |tape: &mut Tape, id: ParamId| match mode {
            ParamMode::Trainable => tape.param(&self.store, id),
            ParamMode::Frozen => tape.frozen_param(&self.store, id),
        };
        let xv = tape.value(x);
        if xv.shape().len() < 2 || xv.shape()[1..] != *self.spec.input_shape() {
            return Err(Error::Dimension {
                op: "forward",
                left: self.spec.input_shape().to_vec(),
                right: xv.shape().to_vec(),
            });
        }
        let batch = xv.rows();
        let mut h = match &self.spec {
            EncoderSpec::Mlp { .. } => tape.flatten(x)?,
            EncoderSpec::SmallCnn { input_shape, .. } => {
                let (c, hh, ww) = chw(input_shape);
                tape.reshape(x, &[batch, c, hh, ww])?
            }
        };
        for layer in &self.layers {
            h = match *layer {
                Layer::Linear { weight, bias } => {
                    let flat = if tape.value(h).shape().len() > 2 {
                        tape.flatten(h)?
                    } else {
                        h
                    };
                    let wv = bind(tape, weight);
                    let bv = bind(tape, bias);
                    let z = tape.matmul(flat, wv)?;
                    let z = tape.add_bias(z, bv)?;
                    tape.relu(z)
                }
                Layer::Conv { kernel, bias } => {
                    let kv = bind(tape, kernel);
                    let bv = bind(tape, bias);
                    let z = tape.conv2d(h, kv, Some(bv), 1, Padding::Same)?;
                    let z = tape.relu(z);
                    tape.avg_pool2(z)?
                }
            };
        }
        let head = bind(tape, self.head);
        let logits = tape.matmul(h, head)?;
        Ok(ForwardVars { features: h, logits })
    }

    fn batch_input(&self, x: &[f64], batch: usize) -> Result<Tensor> {
        let mut shape = vec![batch];
        shape.extend_from_slice(self.spec.input_shape());
        Tensor::new(shape, x.to_vec())
    }

    /// Features and logits for a batch of flattened samples laid out
    /// contiguously, returned as `[batch×d]` and `[batch×M]`.
    pub fn forward_batch(&self, x: &[f64], batch: usize) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let xv = tape.constant(self.batch_input(x, batch)?);
        let vars = self.forward_tape(&mut tape, xv, ParamMode::Frozen)?;
        Ok((tape.value(vars.features).clone(), tape.value(vars.logits).clone()))
    }

    /// `Wᵀ f(x)` for a single sample; no softmax.
    pub fn forward(&self, x: &[f64]) -> Result<Logits> {
        let (_, logits) = self.forward_batch(x, 1)?;
        Logits::new(logits.into_data())
    }

    /// Penultimate-layer feature vector `f(x)`.
    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (f, _) = self.forward_batch(x, 1)?;
        Ok(f.into_data())
    }

    /// Applies the prototype head to precomputed features `[batch×d]`.
    pub fn head(&self, features: &Tensor) -> Result<Tensor> {
        matmul(features, self.prototype_matrix())
    }

    /// Single-layer identity encoder with identity prototypes over inputs
    /// of length `n`; logits equal the (non-negative) input.
    pub fn identity(n: usize) -> Result<Self> {
        let mut m = Self::init(
            EncoderSpec::Mlp {
                input_shape: vec![n],
                widths: vec![n],
            },
            n,
            0,
        )?;
        let ids: Vec<ParamId> = m.store.ids().collect();
        for id in ids {
            let v = m.store.value_mut(id);
            *v = if v.shape().len() == 2 {
                Tensor::identity(n)
            } else {
                Tensor::zeros(v.shape())
            };
        }
        Ok(m)
    }

    pub fn to_file(&self) -> ModelFile {
        ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            spec: self.spec.clone(),
            classes: self.classes,
            metadata: self.metadata.clone(),
            params: self
                .store
                .ids()
                .map(|id| StoredParam {
                    name: self.store.name(id).to_string(),
                    shape: self.store.value(id).shape().to_vec(),
                    data: self.store.value(id).data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_file(file: ModelFile) -> Result<Self> {
        if file.format != MODEL_FORMAT {
            return Err(Error::Format {
                offset: 0,
                msg: format!("not a model file (format {:?})", file.format),
            });
        }
        if file.version != MODEL_VERSION {
            return Err(Error::Format {
                offset: 0,
                msg: format!("unsupported model version {}", file.version),
            });
        }
        let mut model = Self::init(file.spec, file.classes, file.metadata.init_seed)?;
        if file.params.len() != model.store.len() {
            return Err(Error::Format {
                offset: 0,
                msg: format!("expected {} parameters, found {}", model.store.len(), file.params.len()),
            });
        }
        for p in file.params {
            let id = model.store.id(&p.name).ok_or_else(|| Error::Format {
                offset: 0,
                msg: format!("unknown parameter {}", p.name),
            })?;
            let t = Tensor::new(p.shape, p.data)?;
            if t.shape() != model.store.value(id).shape() {
                return Err(Error::Dimension {
                    op: "load",
                    left: model.store.value(id).shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            *model.store.value_mut(id) = t;
        }
        model.metadata = file.metadata;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(&self.to_file())?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_file(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoredParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub spec: EncoderSpec,
    pub classes: usize,
    pub metadata: ModelMetadata,
    pub params: Vec<StoredParam>,
}
