//! Building blocks operating on channels-last `[N, F, T, C]` feature maps.

use candle_core::{Tensor, Var, D};

use super::kernels;
use super::params::{value, ParamBuilder};
use crate::error::Result;

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.gelu_erf()?)
}

/// Dense layer over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    weight: Var,
    bias: Option<Var>,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        pb.scoped(name, |pb| {
            Ok(Self {
                weight: pb.uniform("weight", &[d_out, d_in], bound)?,
                bias: Some(pb.uniform("bias", &[d_out], bound)?),
            })
        })
    }

    /// Linear map with explicit initial weight and bias values.
    pub fn with_init(
        pb: &mut ParamBuilder,
        name: &str,
        d_in: usize,
        d_out: usize,
        weight: f64,
        bias: Vec<f64>,
    ) -> Result<Self> {
        pb.scoped(name, |pb| {
            Ok(Self {
                weight: pb.constant("weight", &[d_out, d_in], weight)?,
                bias: Some(pb.from_values("bias", &[d_out], bias)?),
            })
        })
    }

    pub fn no_bias(pb: &mut ParamBuilder, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        pb.scoped(name, |pb| {
            Ok(Self {
                weight: pb.uniform("weight", &[d_out, d_in], bound)?,
                bias: None,
            })
        })
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let d_in = *dims.last().expect("linear input has a feature axis");
        let rows = x.elem_count() / d_in;
        let y = x.reshape((rows, d_in))?.matmul(&value(&self.weight).t()?)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(&value(b))?,
            None => y,
        };
        let mut out = dims;
        *out.last_mut().unwrap() = self.weight.dim(0)?;
        Ok(y.reshape(out)?)
    }
}

/// Normalization over the last axis.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    weight: Var,
    bias: Var,
    eps: f64,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize) -> Result<Self> {
        pb.scoped(name, |pb| {
            Ok(Self {
                weight: pb.constant("weight", &[dim], 1.0)?,
                bias: pb.constant("bias", &[dim], 0.0)?,
                eps: 1e-6,
            })
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&value(&self.weight))?
            .broadcast_add(&value(&self.bias))?)
    }
}

/// Zero-padded, stride-1 `k x k` convolution built from shifted views.
#[derive(Clone, Debug)]
pub struct Conv2d {
    proj: Linear,
    kernel: usize,
}

impl Conv2d {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
    ) -> Result<Self> {
        assert!(kernel % 2 == 1);
        let fan_in = c_in * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let proj = pb.scoped(name, |pb| {
            Ok(Linear {
                weight: pb.uniform("weight", &[c_out, fan_in], bound)?,
                bias: Some(pb.uniform("bias", &[c_out], bound)?),
            })
        })?;
        Ok(Self { proj, kernel })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if self.kernel == 1 {
            return self.proj.forward(x);
        }
        self.proj.forward(&kernels::patches(x, self.kernel)?)
    }
}

/// Per-channel `k x k` convolution.
#[derive(Clone, Debug)]
pub struct DepthwiseConv {
    weight: Var,
    bias: Var,
    kernel: usize,
}

impl DepthwiseConv {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize, kernel: usize) -> Result<Self> {
        let bound = 1.0 / (kernel as f64);
        pb.scoped(name, |pb| {
            Ok(Self {
                weight: pb.uniform("weight", &[kernel * kernel, channels], bound)?,
                bias: pb.uniform("bias", &[channels], bound)?,
                kernel,
            })
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = kernels::depthwise_conv(x, &value(&self.weight), self.kernel)?;
        Ok(y.broadcast_add(&value(&self.bias))?)
    }
}

/// Global response normalization over the spatial axes.
#[derive(Clone, Debug)]
pub struct Grn {
    gamma: Var,
    beta: Var,
}

impl Grn {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize) -> Result<Self> {
        pb.scoped(name, |pb| {
            Ok(Self {
                gamma: pb.constant("gamma", &[channels], 0.0)?,
                beta: pb.constant("beta", &[channels], 0.0)?,
            })
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let gx = (x.sqr()?.sum_keepdim(1)?.sum_keepdim(2)? + 1e-12)?.sqrt()?;
        let nx = gx.broadcast_div(&(gx.mean_keepdim(3)? + 1e-6)?)?;
        let scaled = x.broadcast_mul(&nx)?.broadcast_mul(&value(&self.gamma))?;
        Ok((scaled.broadcast_add(&value(&self.beta))? + x)?)
    }
}

/// ConvNeXt-V2 block with an additive global embedding.
#[derive(Clone, Debug)]
pub struct ConvNextBlock {
    dwconv: DepthwiseConv,
    embed: Linear,
    norm: LayerNorm,
    pw1: Linear,
    grn: Grn,
    pw2: Linear,
}

impl ConvNextBlock {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        channels: usize,
        d_embed: usize,
        kernel: usize,
        expansion: usize,
    ) -> Result<Self> {
        pb.scoped(name, |pb| {
            Ok(Self {
                dwconv: DepthwiseConv::new(pb, "dwconv", channels, kernel)?,
                embed: Linear::new(pb, "embed", d_embed, channels)?,
                norm: LayerNorm::new(pb, "norm", channels)?,
                pw1: Linear::new(pb, "pw1", channels, expansion * channels)?,
                grn: Grn::new(pb, "grn", expansion * channels)?,
                pw2: Linear::new(pb, "pw2", expansion * channels, channels)?,
            })
        })
    }

    /// `x`: `[N, F, T, C]`; `g`: `[N, D]` global embedding.
    pub fn forward(&self, x: &Tensor, g: &Tensor) -> Result<Tensor> {
        let (n, _, _, c) = x.dims4()?;
        let e = self.embed.forward(g)?.reshape((n, 1, 1, c))?;
        let h = self.dwconv.forward(x)?.broadcast_add(&e)?;
        let h = self.norm.forward(&h)?;
        let h = gelu(&self.pw1.forward(&h)?)?;
        let h = self.pw2.forward(&self.grn.forward(&h)?)?;
        Ok((x + h)?)
    }
}

/// Strided 2x2 convolution: halves both spatial axes.
#[derive(Clone, Debug)]
pub struct Downsample {
    proj: Linear,
}

impl Downsample {
    pub fn new(pb: &mut ParamBuilder, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(pb, name, 4 * c_in, c_out)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, h, w, c) = x.dims4()?;
        let blocks = x
            .reshape(vec![n, h / 2, 2, w / 2, 2, c])?
            .permute([0, 1, 3, 2, 4, 5])?
            .reshape((n, h / 2, w / 2, 4 * c))?;
        self.proj.forward(&blocks)
    }
}

/// Transposed 2x2 convolution with stride 2: doubles both spatial axes.
#[derive(Clone, Debug)]
pub struct Upsample {
    proj: Linear,
    bias: Var,
    c_out: usize,
}

impl Upsample {
    pub fn new(pb: &mut ParamBuilder, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        let bound = 1.0 / ((4 * c_in) as f64).sqrt();
        pb.scoped(name, |pb| {
            Ok(Self {
                proj: Linear::no_bias(pb, "kernel", c_in, 4 * c_out)?,
                bias: pb.uniform("bias", &[c_out], bound)?,
                c_out,
            })
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, h, w, _) = x.dims4()?;
        let y = self
            .proj
            .forward(x)?
            .reshape(vec![n, h, w, 2, 2, self.c_out])?
            .permute([0, 1, 3, 2, 4, 5])?
            .reshape((n, 2 * h, 2 * w, self.c_out))?;
        Ok(y.broadcast_add(&value(&self.bias))?)
    }
}
