//! Desk-scale teacher and student architectures: layer specs, seeded
//! initialization, forward passes on a tape, parameter enumeration with
//! prunable flags, and the reset step of the one-shot lottery-ticket
//! baseline.

use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::importance::ScoreMap;
use crate::pruning::PruneMask;
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Registered architectures. Teachers are the wider/deeper variants of their
/// compact student counterparts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    MlpSmall,
    MlpTeacher,
    CnnSmall,
    CnnTeacher,
}

impl Architecture {
    pub const ALL: [Architecture; 4] = [
        Architecture::MlpSmall,
        Architecture::MlpTeacher,
        Architecture::CnnSmall,
        Architecture::CnnTeacher,
    ];
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp-small" => Ok(Architecture::MlpSmall),
            "mlp-teacher" => Ok(Architecture::MlpTeacher),
            "cnn-small" => Ok(Architecture::CnnSmall),
            "cnn-teacher" => Ok(Architecture::CnnTeacher),
            other => Err(Error::config(format!(
                "unknown architecture {other:?}; expected one of \
                 mlp-small, mlp-teacher, cnn-small, cnn-teacher"
            ))),
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Architecture::MlpSmall => "mlp-small",
            Architecture::MlpTeacher => "mlp-teacher",
            Architecture::CnnSmall => "cnn-small",
            Architecture::CnnTeacher => "cnn-teacher",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub arch: Architecture,
    pub input_shape: Vec<usize>,
    pub classes: usize,
}

/// One layer of the ordered graph. Only linear and conv2d layers carry
/// parameters; their weight tensors are the prunable set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Linear {
        in_features: usize,
        out_features: usize,
    },
    /// 2-D cross-correlation. `in_h`/`in_w` record the spatial size the layer
    /// was built for, which pins shape compatibility and lets checkpoints
    /// reconstruct the model input shape.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
        in_h: usize,
        in_w: usize,
    },
    Relu,
    MaxPool2d {
        window: usize,
    },
    Flatten,
}

impl LayerSpec {
    pub fn kind_tag(&self) -> u32 {
        match self {
            LayerSpec::Linear { .. } => 0,
            LayerSpec::Conv2d { .. } => 1,
            LayerSpec::Relu => 2,
            LayerSpec::MaxPool2d { .. } => 3,
            LayerSpec::Flatten => 4,
        }
    }

    pub fn dims(&self) -> Vec<u32> {
        match *self {
            LayerSpec::Linear {
                in_features,
                out_features,
            } => vec![in_features as u32, out_features as u32],
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kh,
                kw,
                stride,
                padding,
                in_h,
                in_w,
            } => vec![
                in_channels as u32,
                out_channels as u32,
                kh as u32,
                kw as u32,
                stride as u32,
                padding as u32,
                in_h as u32,
                in_w as u32,
            ],
            LayerSpec::Relu => vec![],
            LayerSpec::MaxPool2d { window } => vec![window as u32],
            LayerSpec::Flatten => vec![],
        }
    }

    pub fn from_tag_dims(tag: u32, dims: &[u32]) -> Result<Self> {
        let d = |i: usize| dims[i] as usize;
        match (tag, dims.len()) {
            (0, 2) => Ok(LayerSpec::Linear {
                in_features: d(0),
                out_features: d(1),
            }),
            (1, 8) => Ok(LayerSpec::Conv2d {
                in_channels: d(0),
                out_channels: d(1),
                kh: d(2),
                kw: d(3),
                stride: d(4),
                padding: d(5),
                in_h: d(6),
                in_w: d(7),
            }),
            (2, 0) => Ok(LayerSpec::Relu),
            (3, 1) => Ok(LayerSpec::MaxPool2d { window: d(0) }),
            (4, 0) => Ok(LayerSpec::Flatten),
            _ => Err(Error::config(format!(
                "invalid layer record: tag {tag} with {} dims",
                dims.len()
            ))),
        }
    }
}

/// A named parameter tensor. Exactly the linear/conv2d weight tensors carry
/// `prunable = true`; biases and stateless layers never do.
#[derive(Debug, Clone)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub prunable: bool,
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    layers: Vec<LayerSpec>,
    params: Vec<Param<T>>,
    input_shape: Vec<usize>,
}

/// Copy of all parameters at initialization time, for lottery-ticket resets.
#[derive(Debug, Clone)]
pub struct InitSnapshot<T: Scalar> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> InitSnapshot<T> {
    pub fn of(model: &Model<T>) -> Self {
        Self {
            entries: model
                .params
                .iter()
                .map(|p| (p.name.clone(), p.tensor.clone()))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

fn layers_for(cfg: &ModelConfig) -> Result<Vec<LayerSpec>> {
    if cfg.classes < 2 {
        return Err(Error::config(format!(
            "need >= 2 classes, got {}",
            cfg.classes
        )));
    }
    let features: usize = cfg.input_shape.iter().product();
    if features == 0 {
        return Err(Error::config(format!(
            "invalid input shape {:?}",
            cfg.input_shape
        )));
    }
    let classes = cfg.classes;
    let mlp = |hidden: &[usize]| {
        let mut layers = vec![LayerSpec::Flatten];
        let mut prev = features;
        for &h in hidden {
            layers.push(LayerSpec::Linear {
                in_features: prev,
                out_features: h,
            });
            layers.push(LayerSpec::Relu);
            prev = h;
        }
        layers.push(LayerSpec::Linear {
            in_features: prev,
            out_features: classes,
        });
        layers
    };
    let cnn = |c1: usize, c2: usize, hidden: Option<usize>| -> Result<Vec<LayerSpec>> {
        let [c, h, w] = cfg.input_shape[..] else {
            return Err(Error::config(format!(
                "{} requires a [channels, height, width] input shape, got {:?}",
                cfg.arch, cfg.input_shape
            )));
        };
        if h < 4 || w < 4 {
            return Err(Error::config(format!(
                "{} needs input of at least 4x4 for two 2x2 pools, got {h}x{w}",
                cfg.arch
            )));
        }
        let (h1, w1) = (h / 2, w / 2);
        let (h2, w2) = (h1 / 2, w1 / 2);
        let mut layers = vec![
            LayerSpec::Conv2d {
                in_channels: c,
                out_channels: c1,
                kh: 3,
                kw: 3,
                stride: 1,
                padding: 1,
                in_h: h,
                in_w: w,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool2d { window: 2 },
            LayerSpec::Conv2d {
                in_channels: c1,
                out_channels: c2,
                kh: 3,
                kw: 3,
                stride: 1,
                padding: 1,
                in_h: h1,
                in_w: w1,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool2d { window: 2 },
            LayerSpec::Flatten,
        ];
        let flat = c2 * h2 * w2;
        match hidden {
            Some(hd) => {
                layers.push(LayerSpec::Linear {
                    in_features: flat,
                    out_features: hd,
                });
                layers.push(LayerSpec::Relu);
                layers.push(LayerSpec::Linear {
                    in_features: hd,
                    out_features: classes,
                });
            }
            None => layers.push(LayerSpec::Linear {
                in_features: flat,
                out_features: classes,
            }),
        }
        Ok(layers)
    };
    match cfg.arch {
        Architecture::MlpSmall => Ok(mlp(&[32])),
        Architecture::MlpTeacher => Ok(mlp(&[256, 64])),
        Architecture::CnnSmall => cnn(4, 8, None),
        Architecture::CnnTeacher => cnn(6, 12, Some(64)),
    }
}

/// Simulate the per-sample shape through the layer chain; errors name the
/// first incompatible layer.
pub(crate) fn validate_flow(layers: &[LayerSpec], input_shape: &[usize]) -> Result<usize> {
    let mut shape = input_shape.to_vec();
    for (i, layer) in layers.iter().enumerate() {
        match layer {
            LayerSpec::Flatten => shape = vec![shape.iter().product()],
            LayerSpec::Relu => {}
            LayerSpec::Linear { in_features, out_features } => {
                if shape != [*in_features] {
                    return Err(Error::config(format!(
                        "layer {i}: linear expects [{in_features}], got {shape:?}"
                    )));
                }
                shape = vec![*out_features];
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kh,
                kw,
                stride,
                padding,
                in_h,
                in_w,
            } => {
                if shape != [*in_channels, *in_h, *in_w] {
                    return Err(Error::config(format!(
                        "layer {i}: conv2d expects [{in_channels}, {in_h}, {in_w}], got {shape:?}"
                    )));
                }
                if *kh > in_h + 2 * padding || *kw > in_w + 2 * padding {
                    return Err(Error::config(format!(
                        "layer {i}: kernel {kh}x{kw} larger than padded input"
                    )));
                }
                let oh = (in_h + 2 * padding - kh) / stride + 1;
                let ow = (in_w + 2 * padding - kw) / stride + 1;
                shape = vec![*out_channels, oh, ow];
            }
            LayerSpec::MaxPool2d { window } => {
                if shape.len() != 3 || shape[1] < *window || shape[2] < *window {
                    return Err(Error::config(format!(
                        "layer {i}: maxpool2d window {window} incompatible with {shape:?}"
                    )));
                }
                shape = vec![shape[0], shape[1] / window, shape[2] / window];
            }
        }
    }
    if shape.len() != 1 {
        return Err(Error::config(format!(
            "network must end in logits, final shape {shape:?}"
        )));
    }
    Ok(shape[0])
}

/// Build a model with fan-in-scaled uniform initialization from `seed` and
/// capture the pre-training snapshot.
pub fn build_model<T: Scalar>(
    cfg: &ModelConfig,
    seed: u64,
) -> Result<(Model<T>, InitSnapshot<T>)> {
    let layers = layers_for(cfg)?;
    let logits = validate_flow(&layers, &cfg.input_shape)?;
    if logits != cfg.classes {
        return Err(Error::contract(format!(
            "architecture emits {logits} logits for {} classes",
            cfg.classes
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |shape: Vec<usize>, fan_in: usize| {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<T> = (0..n)
            .map(|_| T::from_f64((2.0 * rng.random::<f64>() - 1.0) * bound))
            .collect();
        Tensor::from_vec_unchecked(shape, data).with_requires_grad(true)
    };

    let mut params = Vec::new();
    for (li, layer) in layers.iter().enumerate() {
        match *layer {
            LayerSpec::Linear {
                in_features,
                out_features,
            } => {
                params.push(Param {
                    name: format!("{li}.weight"),
                    tensor: draw(vec![in_features, out_features], in_features),
                    prunable: true,
                });
                params.push(Param {
                    name: format!("{li}.bias"),
                    tensor: draw(vec![out_features], in_features),
                    prunable: false,
                });
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kh,
                kw,
                ..
            } => {
                let fan_in = in_channels * kh * kw;
                params.push(Param {
                    name: format!("{li}.weight"),
                    tensor: draw(vec![out_channels, in_channels, kh, kw], fan_in),
                    prunable: true,
                });
                params.push(Param {
                    name: format!("{li}.bias"),
                    tensor: draw(vec![out_channels], fan_in),
                    prunable: false,
                });
            }
            _ => {}
        }
    }

    let model = Model {
        layers,
        params,
        input_shape: cfg.input_shape.clone(),
    };
    let snapshot = InitSnapshot::of(&model);
    Ok((model, snapshot))
}

impl<T: Scalar> Model<T> {
    pub(crate) fn from_parts(
        layers: Vec<LayerSpec>,
        params: Vec<Param<T>>,
        input_shape: Vec<usize>,
    ) -> Self {
        Self {
            layers,
            params,
            input_shape,
        }
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Total prunable element count D.
    pub fn prunable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.prunable)
            .map(|p| p.tensor.numel())
            .sum()
    }

    fn check_batch_shape(&self, batch: &[usize]) -> Result<()> {
        if batch.len() < 2 {
            return Err(Error::dimension(format!(
                "expected a batched input, got shape {batch:?}"
            )));
        }
        let starts_with_conv = matches!(self.layers.first(), Some(LayerSpec::Conv2d { .. }));
        let sample = &batch[1..];
        let ok = if starts_with_conv {
            sample == self.input_shape.as_slice()
        } else {
            sample.iter().product::<usize>() == self.input_shape.iter().product::<usize>()
        };
        if !ok {
            return Err(Error::dimension(format!(
                "batch sample shape {sample:?} incompatible with model input {:?}",
                self.input_shape
            )));
        }
        Ok(())
    }

    /// Register every parameter as a tape leaf. With `with_grad = false` the
    /// leaves act as constants and backward skips them.
    pub fn register_params(&self, tape: &mut Tape<T>, with_grad: bool) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|p| {
                tape.leaf_from(
                    p.tensor.shape().to_vec(),
                    p.tensor.data().to_vec(),
                    with_grad && p.tensor.requires_grad(),
                )
            })
            .collect()
    }

    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<T>,
        input: NodeId,
        param_ids: &[NodeId],
    ) -> Result<NodeId> {
        let mut x = input;
        let mut pi = 0;
        for layer in &self.layers {
            match layer {
                LayerSpec::Linear { .. } => {
                    let y = tape.matmul(x, param_ids[pi])?;
                    x = tape.add_bias(y, param_ids[pi + 1])?;
                    pi += 2;
                }
                LayerSpec::Conv2d {
                    stride, padding, ..
                } => {
                    let y = tape.conv2d(x, param_ids[pi], *stride, *padding)?;
                    x = tape.add_bias(y, param_ids[pi + 1])?;
                    pi += 2;
                }
                LayerSpec::Relu => x = tape.relu(x),
                LayerSpec::MaxPool2d { window } => x = tape.maxpool2d(x, *window)?,
                LayerSpec::Flatten => x = tape.flatten(x)?,
            }
        }
        debug_assert_eq!(pi, self.params.len());
        Ok(x)
    }

    /// Run one forward pass on a fresh tape, returning the tape, the logits
    /// node, and the parameter leaves (aligned with [`Model::params`]).
    pub fn forward_batch(
        &self,
        inputs: &Tensor<T>,
        with_grad: bool,
    ) -> Result<(Tape<T>, NodeId, Vec<NodeId>)> {
        self.check_batch_shape(inputs.shape())?;
        let mut tape = Tape::new();
        let x = tape.constant(inputs);
        let param_ids = self.register_params(&mut tape, with_grad);
        let logits = self.forward_on_tape(&mut tape, x, &param_ids)?;
        Ok((tape, logits, param_ids))
    }

    /// Inference-only forward; no gradients are tracked.
    pub fn infer_logits(&self, inputs: &Tensor<T>) -> Result<Tensor<T>> {
        let (tape, logits, _) = self.forward_batch(inputs, false)?;
        Ok(tape.value_tensor(logits))
    }

    /// Pull gradients off a tape into the parameter grad buffers
    /// (additively).
    pub fn accumulate_grads_from_tape(&mut self, tape: &Tape<T>, param_ids: &[NodeId]) {
        for (param, &id) in self.params.iter_mut().zip(param_ids) {
            if let Some(g) = tape.grad(id) {
                param.tensor.accumulate_grad(g);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    /// Native little-endian bytes of every parameter, in declaration order.
    pub fn param_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for p in &self.params {
            out.extend_from_slice(&p.tensor.to_le_bytes());
        }
        out
    }

    /// Overwrite all parameters from a snapshot (shapes must match).
    pub fn restore(&mut self, snapshot: &InitSnapshot<T>) -> Result<()> {
        for p in &mut self.params {
            let Some(t) = snapshot.get(&p.name) else {
                return Err(Error::contract(format!(
                    "snapshot missing parameter {}",
                    p.name
                )));
            };
            if t.shape() != p.tensor.shape() {
                return Err(Error::contract(format!(
                    "snapshot shape {:?} != param shape {:?} for {}",
                    t.shape(),
                    p.tensor.shape(),
                    p.name
                )));
            }
            let rg = p.tensor.requires_grad();
            p.tensor = t.clone().with_requires_grad(rg);
        }
        Ok(())
    }
}

/// Elementwise |W| on prunable parameters only — the scoring rule of the
/// magnitude/LTH baselines.
pub fn magnitude_scores<T: Scalar>(model: &Model<T>) -> ScoreMap<T> {
    ScoreMap::new(
        model
            .params()
            .iter()
            .filter(|p| p.prunable)
            .map(|p| (p.name.clone(), p.tensor.map(|v| v.abs())))
            .collect(),
    )
}

/// Lottery-ticket reset: retained weights go back to their initial values,
/// pruned weights to zero, biases back to their initial values.
pub fn lth_reset<T: Scalar>(
    model: &mut Model<T>,
    snapshot: &InitSnapshot<T>,
    mask: &PruneMask,
) -> Result<()> {
    for p in model.params_mut() {
        let Some(init) = snapshot.get(&p.name) else {
            return Err(Error::contract(format!(
                "snapshot missing parameter {}",
                p.name
            )));
        };
        if init.shape() != p.tensor.shape() {
            return Err(Error::contract(format!(
                "snapshot shape {:?} != param shape {:?} for {}",
                init.shape(),
                p.tensor.shape(),
                p.name
            )));
        }
        if p.prunable {
            let keep = mask.keep_flags(&p.name).ok_or_else(|| {
                Error::contract(format!("mask missing entry for {}", p.name))
            })?;
            if keep.len() != p.tensor.numel() {
                return Err(Error::contract(format!(
                    "mask length {} != param size {} for {}",
                    keep.len(),
                    p.tensor.numel(),
                    p.name
                )));
            }
            let dst = p.tensor.data_mut();
            for (i, (&k, &v)) in keep.iter().zip(init.data()).enumerate() {
                dst[i] = if k { v } else { T::zero() };
            }
        } else {
            let rg = p.tensor.requires_grad();
            p.tensor = init.clone().with_requires_grad(rg);
        }
    }
    Ok(())
}
