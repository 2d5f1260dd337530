use candle_core::{Tensor, Var, D};

use super::params::{Builder, Init};
use super::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Symmetric zero padding.
    Explicit(usize),
    /// TensorFlow "SAME": output = ceil(input / stride), extra pixel on the
    /// bottom/right.
    Same,
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: Padding,
    groups: usize,
    kernel: usize,
}

pub struct ConvCfg {
    pub stride: usize,
    pub padding: Padding,
    pub groups: usize,
    pub bias: bool,
}

impl Default for ConvCfg {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: Padding::Explicit(0),
            groups: 1,
            bias: false,
        }
    }
}

impl ConvCfg {
    /// Padding `k / 2`, the usual "keep size" choice for odd kernels.
    pub fn same_size(k: usize) -> Self {
        Self {
            padding: Padding::Explicit(k / 2),
            ..Self::default()
        }
    }
    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }
    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }
    pub fn bias(mut self, b: bool) -> Self {
        self.bias = b;
        self
    }
    pub fn padding(mut self, p: Padding) -> Self {
        self.padding = p;
        self
    }
}

impl Conv2d {
    pub fn new(b: &Builder, cin: usize, cout: usize, k: usize, cfg: ConvCfg) -> Result<Self> {
        let weight = b.param("weight", (cout, cin / cfg.groups, k, k), Init::KaimingFanOut)?;
        let bias = if cfg.bias {
            Some(b.param("bias", cout, Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride: cfg.stride,
            padding: cfg.padding,
            groups: cfg.groups,
            kernel: k,
        })
    }

    fn pads(&self, size: usize) -> (usize, usize) {
        match self.padding {
            Padding::Explicit(p) => (p, p),
            Padding::Same => {
                let out = size.div_ceil(self.stride);
                let total = ((out - 1) * self.stride + self.kernel).saturating_sub(size);
                (total / 2, total - total / 2)
            }
        }
    }

    fn is_depthwise(&self) -> bool {
        self.groups > 1 && self.weight.dim(1).ok() == Some(1) && self.weight.dim(0).ok() == Some(self.groups)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let (pt, pb) = self.pads(h);
        let (pl, pr) = self.pads(w);
        let y = if self.is_depthwise() {
            depthwise(x, &self.weight, self.stride, (pt, pb, pl, pr))?
        } else if pt == pb && pl == pr && pt == pl {
            x.conv2d(&self.weight, pt, self.stride, 1, self.groups)?
        } else {
            let x = x.pad_with_zeros(2, pt, pb)?.pad_with_zeros(3, pl, pr)?;
            x.conv2d(&self.weight, 0, self.stride, 1, self.groups)?
        };
        match &self.bias {
            Some(bias) => Ok(y.broadcast_add(&bias.reshape((1, (), 1, 1))?)?),
            None => Ok(y),
        }
    }
}

/// Depthwise convolution as a sum of shifted, per-channel scaled slices.
/// Grouped `conv2d` in candle loops over groups, which is far slower for
/// one channel per group; this form is also differentiable end to end.
fn depthwise(x: &Tensor, weight: &Tensor, stride: usize, pads: (usize, usize, usize, usize)) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let k = weight.dim(2)?;
    let (pt, pb, pl, pr) = pads;
    let hp = h + pt + pb;
    let wp = w + pl + pr;
    let ho = (hp - k) / stride + 1;
    let wo = (wp - k) / stride + 1;
    // pad so both spatial sizes split evenly into (index / stride, index % stride)
    let rows = (ho + (k - 1) / stride + 1) * stride;
    let cols = (wo + (k - 1) / stride + 1) * stride;
    let x = x
        .pad_with_zeros(2, pt, rows - h - pt)?
        .pad_with_zeros(3, pl, cols - w - pl)?
        .reshape((n, c, rows / stride, stride, cols / stride, stride))?;
    let mut acc: Option<Tensor> = None;
    for i in 0..k {
        let xi = x.narrow(2, i / stride, ho)?.narrow(3, i % stride, 1)?;
        for j in 0..k {
            let slice = xi
                .narrow(4, j / stride, wo)?
                .narrow(5, j % stride, 1)?
                .reshape((n, c, ho, wo))?;
            let wij = weight.narrow(2, i, 1)?.narrow(3, j, 1)?.reshape((1, c, 1, 1))?;
            let term = slice.broadcast_mul(&wij)?;
            acc = Some(match acc {
                None => term,
                Some(a) => (a + term)?,
            });
        }
    }
    Ok(acc.expect("kernel has at least one tap"))
}

/// Batch normalization over NCHW.
///
/// Frozen instances always normalize with their running statistics. A
/// trainable instance uses batch statistics in training mode and updates
/// its running buffers, matching torch's train-mode semantics.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    weight: Tensor,
    bias: Tensor,
    running_mean: Var,
    running_var: Var,
    eps: f64,
    momentum: f64,
    batch_stats: bool,
}

impl BatchNorm2d {
    pub fn new(b: &Builder, c: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            weight: b.param("weight", c, Init::Ones)?,
            bias: b.param("bias", c, Init::Zeros)?,
            running_mean: b.buffer("running_mean", c, Init::Zeros)?,
            running_var: b.buffer("running_var", c, Init::Ones)?,
            eps,
            momentum: 0.1,
            batch_stats: b.is_trainable("weight"),
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let c = x.dim(1)?;
        if train && self.batch_stats {
            let (n, _, h, w) = x.dims4()?;
            let count = (n * h * w) as f64;
            let mean = x.mean_keepdim((0, 2, 3))?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim((0, 2, 3))?;
            let y = centered.broadcast_div(&(var.clone() + self.eps)?.sqrt()?)?;
            let m = self.momentum;
            let rm = self.running_mean.as_tensor().detach();
            let rv = self.running_var.as_tensor().detach();
            let bm = mean.detach().flatten_all()?;
            let bv = (var.detach().flatten_all()? * (count / (count - 1.0).max(1.0)))?;
            self.running_mean.set(&((rm * (1.0 - m))? + (bm * m)?)?)?;
            self.running_var.set(&((rv * (1.0 - m))? + (bv * m)?)?)?;
            let y = y.broadcast_mul(&self.weight.reshape((1, c, 1, 1))?)?;
            return Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?);
        }
        let rm = self.running_mean.as_tensor().detach();
        let rv = self.running_var.as_tensor().detach();
        let scale = self.weight.broadcast_div(&(rv + self.eps)?.sqrt()?)?;
        let shift = (&self.bias - rm.mul(&scale)?)?;
        let y = x.broadcast_mul(&scale.reshape((1, c, 1, 1))?)?;
        Ok(y.broadcast_add(&shift.reshape((1, c, 1, 1))?)?)
    }
}

/// Layer normalization over the last dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(b: &Builder, dim: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            weight: b.param("weight", dim, Init::Ones)?,
            bias: b.param("bias", dim, Init::Zeros)?,
            eps,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if !x.track_op() && !self.weight.track_op() {
            return Ok(candle_nn::ops::layer_norm(
                &x.contiguous()?,
                &self.weight,
                &self.bias,
                self.eps as f32,
            )?);
        }
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let y = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(y.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// Affine map over the last dimension, torch `Linear` layout.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(b: &Builder, cin: usize, cout: usize, bias: bool) -> Result<Self> {
        Self::with_init(b, cin, cout, bias, Init::TruncNormal(0.02))
    }

    pub fn with_init(b: &Builder, cin: usize, cout: usize, bias: bool, init: Init) -> Result<Self> {
        let weight = b.param("weight", (cout, cin), init)?;
        let bias = if bias { Some(b.param("bias", cout, Init::Zeros)?) } else { None };
        Ok(Self { weight, bias })
    }

    pub fn from_parts(weight: Tensor, bias: Option<Tensor>) -> Self {
        Self { weight, bias }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let cin = *dims.last().unwrap();
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let y = x.reshape((rows, cin))?.matmul(&self.weight.t()?)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out = dims;
        *out.last_mut().unwrap() = self.weight.dim(0)?;
        Ok(y.reshape(out)?)
    }
}

/// Softmax over the last dimension, using the fused kernel when no gradient
/// is needed.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    if x.track_op() {
        Ok(candle_nn::ops::softmax(x, D::Minus1)?)
    } else {
        Ok(candle_nn::ops::softmax_last_dim(&x.contiguous()?)?)
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// Global average pool of NCHW to (N, C).
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean((2, 3))?)
}

/// 3x3 stride-2 max pool with one pixel of padding. Callers apply it after
/// a ReLU, so zero padding is equivalent to -inf padding.
pub fn max_pool_3x3_s2(x: &Tensor) -> Result<Tensor> {
    let x = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
    Ok(x.max_pool2d_with_stride(3, 2)?)
}

/// Two-layer MLP with exact GELU, the transformer feed-forward block.
#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
    silu: bool,
}

impl Mlp {
    pub fn gelu(b: &Builder, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&b.pp("fc1"), dim, hidden, true)?,
            fc2: Linear::new(&b.pp("fc2"), hidden, dim, true)?,
            silu: false,
        })
    }

    pub fn silu(b: &Builder, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            silu: true,
            ..Self::gelu(b, dim, hidden)?
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.fc1.forward(x)?;
        let h = if self.silu { h.silu()? } else { h.gelu_erf()? };
        self.fc2.forward(&h)
    }
}
