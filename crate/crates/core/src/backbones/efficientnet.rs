//! EfficientNetV2-B2 (TF-ported variant, "same" padding, BN eps 1e-3)
//! with timm tensor names.

use candle_core::Tensor;

use super::layers::{global_avg_pool, sigmoid, BatchNorm2d, Conv2d, ConvCfg, Padding};
use super::params::Builder;
use super::{Features, Result};

const EPS: f64 = 1e-3;

#[derive(Clone, Copy)]
enum Kind {
    /// conv3x3 + BN + SiLU
    ConvBnAct,
    /// fused MBConv: conv3x3 expand, conv1x1 project
    EdgeResidual,
    /// MBConv with depthwise conv and squeeze-excite
    InvertedResidual,
}

struct StageDef {
    kind: Kind,
    depth: usize,
    stride: usize,
    expand: usize,
    out: usize,
}

const STAGES: [StageDef; 6] = [
    StageDef { kind: Kind::ConvBnAct, depth: 2, stride: 1, expand: 1, out: 16 },
    StageDef { kind: Kind::EdgeResidual, depth: 3, stride: 2, expand: 4, out: 32 },
    StageDef { kind: Kind::EdgeResidual, depth: 3, stride: 2, expand: 4, out: 56 },
    StageDef { kind: Kind::InvertedResidual, depth: 4, stride: 2, expand: 4, out: 104 },
    StageDef { kind: Kind::InvertedResidual, depth: 6, stride: 1, expand: 6, out: 120 },
    StageDef { kind: Kind::InvertedResidual, depth: 10, stride: 2, expand: 6, out: 208 },
];

const STEM: usize = 32;
const HEAD: usize = 1408;

fn tf_conv(b: &Builder, cin: usize, cout: usize, k: usize, stride: usize, groups: usize) -> Result<Conv2d> {
    let padding = if stride == 1 { Padding::Explicit(k / 2) } else { Padding::Same };
    Conv2d::new(b, cin, cout, k, ConvCfg::default().stride(stride).groups(groups).padding(padding))
}

struct SqueezeExcite {
    reduce: Conv2d,
    expand: Conv2d,
}

impl SqueezeExcite {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.mean_keepdim((2, 3))?;
        let s = self.reduce.forward(&s)?.silu()?;
        let s = sigmoid(&self.expand.forward(&s)?)?;
        Ok(x.broadcast_mul(&s)?)
    }
}

struct Block {
    conv_a: Conv2d,
    bn_a: BatchNorm2d,
    conv_dw: Option<(Conv2d, BatchNorm2d)>,
    se: Option<SqueezeExcite>,
    conv_b: Option<(Conv2d, BatchNorm2d)>,
    skip: bool,
}

impl Block {
    fn new(b: &Builder, kind: Kind, cin: usize, cout: usize, stride: usize, expand: usize) -> Result<Self> {
        let skip = cin == cout && stride == 1;
        let mid = cin * expand;
        Ok(match kind {
            Kind::ConvBnAct => Self {
                conv_a: tf_conv(&b.pp("conv"), cin, cout, 3, stride, 1)?,
                bn_a: BatchNorm2d::new(&b.pp("bn1"), cout, EPS)?,
                conv_dw: None,
                se: None,
                conv_b: None,
                skip,
            },
            Kind::EdgeResidual => Self {
                conv_a: tf_conv(&b.pp("conv_exp"), cin, mid, 3, stride, 1)?,
                bn_a: BatchNorm2d::new(&b.pp("bn1"), mid, EPS)?,
                conv_dw: None,
                se: None,
                conv_b: Some((
                    tf_conv(&b.pp("conv_pwl"), mid, cout, 1, 1, 1)?,
                    BatchNorm2d::new(&b.pp("bn2"), cout, EPS)?,
                )),
                skip,
            },
            Kind::InvertedResidual => {
                let rd = cin / 4;
                let se = b.pp("se");
                Self {
                    conv_a: tf_conv(&b.pp("conv_pw"), cin, mid, 1, 1, 1)?,
                    bn_a: BatchNorm2d::new(&b.pp("bn1"), mid, EPS)?,
                    conv_dw: Some((
                        tf_conv(&b.pp("conv_dw"), mid, mid, 3, stride, mid)?,
                        BatchNorm2d::new(&b.pp("bn2"), mid, EPS)?,
                    )),
                    se: Some(SqueezeExcite {
                        reduce: Conv2d::new(&se.pp("conv_reduce"), mid, rd, 1, ConvCfg::default().bias(true))?,
                        expand: Conv2d::new(&se.pp("conv_expand"), rd, mid, 1, ConvCfg::default().bias(true))?,
                    }),
                    conv_b: Some((
                        tf_conv(&b.pp("conv_pwl"), mid, cout, 1, 1, 1)?,
                        BatchNorm2d::new(&b.pp("bn3"), cout, EPS)?,
                    )),
                    skip,
                }
            }
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut h = self.bn_a.forward(&self.conv_a.forward(x)?, train)?.silu()?;
        if let Some((conv, bn)) = &self.conv_dw {
            h = bn.forward(&conv.forward(&h)?, train)?.silu()?;
        }
        if let Some(se) = &self.se {
            h = se.forward(&h)?;
        }
        if let Some((conv, bn)) = &self.conv_b {
            h = bn.forward(&conv.forward(&h)?, train)?;
        }
        Ok(if self.skip { (h + x)? } else { h })
    }
}

pub struct EfficientNetV2B2 {
    conv_stem: Conv2d,
    bn1: BatchNorm2d,
    blocks: Vec<Vec<Block>>,
    conv_head: Conv2d,
    bn2: BatchNorm2d,
}

impl EfficientNetV2B2 {
    pub fn new(b: &Builder) -> Result<Self> {
        let mut cin = STEM;
        let mut blocks = Vec::new();
        for (i, s) in STAGES.iter().enumerate() {
            let sb = b.pp("blocks").pp(i);
            let mut stage = Vec::new();
            for j in 0..s.depth {
                let stride = if j == 0 { s.stride } else { 1 };
                stage.push(Block::new(&sb.pp(j), s.kind, cin, s.out, stride, s.expand)?);
                cin = s.out;
            }
            blocks.push(stage);
        }
        Ok(Self {
            conv_stem: tf_conv(&b.pp("conv_stem"), 3, STEM, 3, 2, 1)?,
            bn1: BatchNorm2d::new(&b.pp("bn1"), STEM, EPS)?,
            blocks,
            conv_head: tf_conv(&b.pp("conv_head"), cin, HEAD, 1, 1, 1)?,
            bn2: BatchNorm2d::new(&b.pp("bn2"), HEAD, EPS)?,
        })
    }
}

impl Features for EfficientNetV2B2 {
    fn features(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut x = self.bn1.forward(&self.conv_stem.forward(x)?, train)?.silu()?;
        for stage in &self.blocks {
            for block in stage {
                x = block.forward(&x, train)?;
            }
        }
        let x = self.bn2.forward(&self.conv_head.forward(&x)?, train)?.silu()?;
        global_avg_pool(&x)
    }
}
