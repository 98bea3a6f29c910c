use candle_core::{DType, Tensor};

use super::ops::{self, ConvGeom};
use super::params::{Builder, ParamStore};
use crate::error::Result;

/// Per-call forward settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Batch statistics and running-stat updates when true.
    pub train: bool,
    /// Compute dtype for convolutions; normalisation and the loss stay `f32`.
    pub dtype: DType,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        Self {
            train: false,
            dtype: DType::F32,
        }
    }

    pub fn train() -> Self {
        Self {
            train: true,
            dtype: DType::F32,
        }
    }
}

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Dense,
    Depthwise,
}

#[derive(Debug, Clone)]
pub struct Conv {
    weight: String,
    bias: Option<String>,
    geom: ConvGeom,
    kind: Kind,
}

impl Conv {
    pub fn new(b: &mut Builder, name: &str, cin: usize, cout: usize, k: usize, stride: usize, bias: bool) -> Result<Self> {
        b.push(name);
        let weight = b.kaiming("weight", &[cout, cin, k, k], cin * k * k)?;
        let bias = if bias {
            Some(b.constant("bias", &[cout], 0.0)?)
        } else {
            None
        };
        b.pop();
        Ok(Self {
            weight,
            bias,
            geom: ConvGeom {
                stride,
                padding: k / 2,
            },
            kind: Kind::Dense,
        })
    }

    pub fn depthwise(b: &mut Builder, name: &str, channels: usize, k: usize, stride: usize) -> Result<Self> {
        b.push(name);
        let weight = b.kaiming("weight", &[channels, 1, k, k], k * k)?;
        b.pop();
        Ok(Self {
            weight,
            bias: None,
            geom: ConvGeom {
                stride,
                padding: k / 2,
            },
            kind: Kind::Depthwise,
        })
    }

    pub fn forward(&self, p: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let w = p.get(&self.weight)?.as_tensor().to_dtype(x.dtype())?;
        let y = match self.kind {
            Kind::Dense => ops::conv2d(x, &w, self.geom)?,
            Kind::Depthwise => ops::depthwise_conv2d(x, &w, self.geom)?,
        };
        match &self.bias {
            Some(name) => {
                let b = p.get(name)?.as_tensor().to_dtype(x.dtype())?;
                Ok(y.broadcast_add(&b.reshape((1, (), 1, 1))?)?)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    gamma: String,
    beta: String,
    mean: String,
    var: String,
    eps: f64,
}

impl BatchNorm {
    pub fn new(b: &mut Builder, name: &str, channels: usize, eps: f64) -> Result<Self> {
        b.push(name);
        let bn = Self {
            gamma: b.constant("weight", &[channels], 1.0)?,
            beta: b.constant("bias", &[channels], 0.0)?,
            mean: b.buffer("running_mean", &[channels], 0.0)?,
            var: b.buffer("running_var", &[channels], 1.0)?,
            eps,
        };
        b.pop();
        Ok(bn)
    }

    /// Normalises in `f32` and returns the input dtype.
    pub fn forward(&self, p: &ParamStore, x: &Tensor, opts: ForwardOptions) -> Result<Tensor> {
        let dtype = x.dtype();
        let x = x.to_dtype(DType::F32)?;
        let (mean, var) = if opts.train {
            let (n, _, h, w) = x.dims4()?;
            let mean = x.mean_keepdim((0, 2, 3))?;
            let var = x.broadcast_sub(&mean)?.sqr()?.mean_keepdim((0, 2, 3))?;
            let count = (n * h * w) as f64;
            let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            let m = BN_MOMENTUM;
            let rm = (p.buffer(&self.mean)?.affine(1.0 - m, 0.0)? + mean.detach().flatten_all()?.affine(m, 0.0)?)?;
            let rv = (p.buffer(&self.var)?.affine(1.0 - m, 0.0)?
                + var.detach().flatten_all()?.affine(m * unbiased, 0.0)?)?;
            p.set_buffer(&self.mean, rm);
            p.set_buffer(&self.var, rv);
            (mean, var)
        } else {
            (
                p.buffer(&self.mean)?.reshape((1, (), 1, 1))?,
                p.buffer(&self.var)?.reshape((1, (), 1, 1))?,
            )
        };
        let gamma = p.get(&self.gamma)?.as_tensor().reshape((1, (), 1, 1))?;
        let beta = p.get(&self.beta)?.as_tensor().reshape((1, (), 1, 1))?;
        let scale = gamma.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let y = x.broadcast_sub(&mean)?.broadcast_mul(&scale)?.broadcast_add(&beta)?;
        Ok(y.to_dtype(dtype)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Swish,
}

impl Activation {
    pub fn apply(self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Activation::Relu => x.relu()?,
            Activation::Swish => x.silu()?,
        })
    }
}

/// Convolution, batch norm, activation.
#[derive(Debug, Clone)]
pub struct ConvBn {
    conv: Conv,
    bn: BatchNorm,
    act: Activation,
}

impl ConvBn {
    pub fn new(b: &mut Builder, name: &str, conv: impl FnOnce(&mut Builder) -> Result<Conv>, cout: usize, eps: f64, act: Activation) -> Result<Self> {
        b.push(name);
        let conv = conv(b)?;
        let bn = BatchNorm::new(b, "bn", cout, eps)?;
        b.pop();
        Ok(Self { conv, bn, act })
    }

    pub fn dense(b: &mut Builder, name: &str, cin: usize, cout: usize, k: usize, stride: usize, act: Activation) -> Result<Self> {
        Self::new(b, name, |b| Conv::new(b, "conv", cin, cout, k, stride, false), cout, 1e-5, act)
    }

    pub fn forward(&self, p: &ParamStore, x: &Tensor, opts: ForwardOptions) -> Result<Tensor> {
        let y = self.conv.forward(p, x)?;
        let y = self.bn.forward(p, &y, opts)?;
        self.act.apply(&y)
    }
}
