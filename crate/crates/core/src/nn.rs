//! Parameter storage and the few layers the extractor and head are built from.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, Uniform};

use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    BnScale,
    BnShift,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn is_trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    /// Weight decay is not applied to normalization parameters.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight | ParamKind::Bias)
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub var: Var,
    pub kind: ParamKind,
}

/// Named parameters in deterministic (sorted) order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    device: Device,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new(Device::Cpu)
    }
}

impl ParamStore {
    pub fn new(device: Device) -> Self {
        Self {
            params: BTreeMap::new(),
            device,
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        values: Vec<f32>,
        shape: &[usize],
        kind: ParamKind,
    ) -> Result<Var> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter '{name}'")));
        }
        let var = Var::from_tensor(&Tensor::from_vec(values, shape, &self.device)?)?;
        self.params.insert(name, Param { var: var.clone(), kind });
        Ok(var)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.iter().filter(|(_, p)| p.kind.is_trainable())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_trainable_values(&self) -> usize {
        self.trainable().map(|(_, p)| p.var.elem_count()).sum()
    }

    pub fn tensors(&self) -> HashMap<String, Tensor> {
        self.params
            .iter()
            .map(|(k, p)| (k.clone(), p.var.as_tensor().clone()))
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        candle_core::safetensors::save(&self.tensors(), path.as_ref())?;
        Ok(())
    }

    /// Overwrites every parameter from `tensors`; names and shapes must match exactly.
    pub fn load_tensors(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        for (name, param) in &self.params {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter '{name}'")))?;
            if t.dims() != param.var.dims() {
                return Err(Error::Shape(format!(
                    "parameter '{name}' has shape {:?}, checkpoint has {:?}",
                    param.var.dims(),
                    t.dims()
                )));
            }
            param.var.set(&t.to_dtype(DType::F32)?.to_device(&self.device)?)?;
        }
        if let Some(extra) = tensors.keys().find(|k| !self.params.contains_key(*k)) {
            return Err(Error::Config(format!("checkpoint has unknown parameter '{extra}'")));
        }
        Ok(())
    }

    pub fn load(&self, path: impl AsRef<Path>) -> Result<()> {
        let tensors = candle_core::safetensors::load(path.as_ref(), &self.device)?;
        self.load_tensors(&tensors)
    }
}

/// Parameter initialization streams.
pub(crate) fn normal_values(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f32> {
    let dist = Normal::new(0.0, std).expect("positive std");
    (0..n).map(|_| rng.sample(dist) as f32).collect()
}

pub(crate) fn uniform_values(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f32> {
    let dist = Uniform::new_inclusive(-bound, bound);
    (0..n).map(|_| rng.sample(dist) as f32).collect()
}

/// Bias-free 2-D convolution, He-initialized.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Var,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        rng: &mut ChaCha8Rng,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let fan_out = out_channels * kernel * kernel;
        let n = out_channels * in_channels * kernel * kernel;
        let weight = store.register(
            format!("{name}.weight"),
            normal_values(rng, n, (2.0 / fan_out as f64).sqrt()),
            &[out_channels, in_channels, kernel, kernel],
            ParamKind::Weight,
        )?;
        Ok(Self {
            weight,
            stride,
            padding,
        })
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.conv2d(self.weight.as_tensor(), self.padding, self.stride, 1, 1)?)
    }
}

/// Batch normalization over the channel axis (dim 1) of `N x C [x H x W]` inputs.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    scale: Var,
    shift: Var,
    running_mean: Var,
    running_var: Var,
    channels: usize,
    apply_shift: bool,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            scale: store.register(
                format!("{name}.scale"),
                vec![1.0; channels],
                &[channels],
                ParamKind::BnScale,
            )?,
            shift: store.register(
                format!("{name}.shift"),
                vec![0.0; channels],
                &[channels],
                ParamKind::BnShift,
            )?,
            running_mean: store.register(
                format!("{name}.running_mean"),
                vec![0.0; channels],
                &[channels],
                ParamKind::RunningMean,
            )?,
            running_var: store.register(
                format!("{name}.running_var"),
                vec![1.0; channels],
                &[channels],
                ParamKind::RunningVar,
            )?,
            channels,
            apply_shift: true,
        })
    }

    /// Variant whose output is `scale * normalized` with the shift left out.
    pub fn without_shift(mut self) -> Self {
        self.apply_shift = false;
        self
    }

    pub fn running_mean(&self) -> &Tensor {
        self.running_mean.as_tensor()
    }

    pub fn running_var(&self) -> &Tensor {
        self.running_var.as_tensor()
    }

    pub fn scale(&self) -> &Var {
        &self.scale
    }

    pub fn shift(&self) -> &Var {
        &self.shift
    }

    /// Scale, shift, running mean and running variance.
    pub fn vars(&self) -> [&Var; 4] {
        [&self.scale, &self.shift, &self.running_mean, &self.running_var]
    }

    fn broadcast_shape(&self, x: &Tensor) -> Vec<usize> {
        let mut shape = vec![1; x.rank()];
        shape[1] = self.channels;
        shape
    }

    /// Normalized activations before the affine step.
    pub fn normalize(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        if x.rank() < 2 || x.dim(1)? != self.channels {
            return Err(Error::Shape(format!(
                "batch norm over {} channels got input {:?}",
                self.channels,
                x.dims()
            )));
        }
        let shape = self.broadcast_shape(x);
        if train {
            let per_channel = x.elem_count() / self.channels;
            if per_channel < 2 {
                return Err(Error::Validation(
                    "training-mode batch normalization needs at least 2 values per channel".into(),
                ));
            }
            // Channels to the last axis, everything else flattened.
            let flat = x.transpose(0, 1)?.contiguous()?.reshape((self.channels, per_channel))?;
            let mean = flat.mean(D::Minus1)?;
            let centered = flat.broadcast_sub(&mean.unsqueeze(1)?)?;
            let var = centered.sqr()?.mean(D::Minus1)?;
            let unbiased = (var.detach() * (per_channel as f64 / (per_channel as f64 - 1.0)))?;
            let m = BN_MOMENTUM;
            self.running_mean
                .set(&((self.running_mean.as_tensor() * (1.0 - m))? + (mean.detach() * m)?)?)?;
            self.running_var
                .set(&((self.running_var.as_tensor() * (1.0 - m))? + (unbiased * m)?)?)?;
            let denom = (var + BN_EPS)?.sqrt()?;
            Ok(x.broadcast_sub(&mean.reshape(shape.as_slice())?)?
                .broadcast_div(&denom.reshape(shape.as_slice())?)?)
        } else {
            let denom = (self.running_var.as_tensor() + BN_EPS)?.sqrt()?;
            Ok(
                x.broadcast_sub(&self.running_mean.as_tensor().reshape(shape.as_slice())?)?
                    .broadcast_div(&denom.reshape(shape.as_slice())?)?,
            )
        }
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let shape = self.broadcast_shape(x);
        let y = self
            .normalize(x, train)?
            .broadcast_mul(&self.scale.as_tensor().reshape(shape.as_slice())?)?;
        if self.apply_shift {
            Ok(y.broadcast_add(&self.shift.as_tensor().reshape(shape.as_slice())?)?)
        } else {
            Ok(y)
        }
    }
}

/// Fully connected layer `y = x W^T (+ b)`.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Var,
    bias: Option<Var>,
}

impl Linear {
    pub fn from_vars(weight: Var, bias: Option<Var>) -> Self {
        Self { weight, bias }
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Var> {
        self.bias.as_ref()
    }

    pub fn in_features(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 2 || x.dim(1)? != self.in_features() {
            return Err(Error::Shape(format!(
                "linear layer expects N x {}, got {:?}",
                self.in_features(),
                x.dims()
            )));
        }
        let y = x.matmul(&self.weight.as_tensor().t()?)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(b.as_tensor())?),
            None => Ok(y),
        }
    }
}
