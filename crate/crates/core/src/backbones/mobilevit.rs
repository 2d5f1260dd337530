//! MobileViT-S with timm tensor names.

use candle_core::Tensor;

use super::layers::{global_avg_pool, softmax, BatchNorm2d, Conv2d, ConvCfg, LayerNorm, Linear, Mlp};
use super::params::Builder;
use super::{Features, Result};

const EPS: f64 = 1e-5;
const HEADS: usize = 4;
const PATCH: usize = 2;

/// conv + BN with optional SiLU.
struct ConvNormAct {
    conv: Conv2d,
    bn: BatchNorm2d,
    act: bool,
}

impl ConvNormAct {
    fn new(b: &Builder, cin: usize, cout: usize, k: usize, stride: usize, groups: usize, act: bool) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&b.pp("conv"), cin, cout, k, ConvCfg::same_size(k).stride(stride).groups(groups))?,
            bn: BatchNorm2d::new(&b.pp("bn"), cout, EPS)?,
            act,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.bn.forward(&self.conv.forward(x)?, train)?;
        Ok(if self.act { y.silu()? } else { y })
    }
}

/// Inverted residual; the shortcut exists only when shapes match.
struct InvertedResidual {
    conv1: ConvNormAct,
    conv2: ConvNormAct,
    conv3: ConvNormAct,
    shortcut: bool,
}

impl InvertedResidual {
    fn new(b: &Builder, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        let mid = cin * 4;
        Ok(Self {
            conv1: ConvNormAct::new(&b.pp("conv1_1x1"), cin, mid, 1, 1, 1, true)?,
            conv2: ConvNormAct::new(&b.pp("conv2_kxk"), mid, mid, 3, stride, mid, true)?,
            conv3: ConvNormAct::new(&b.pp("conv3_1x1"), mid, cout, 1, 1, 1, false)?,
            shortcut: cin == cout && stride == 1,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let h = self.conv1.forward(x, train)?;
        let h = self.conv2.forward(&h, train)?;
        let h = self.conv3.forward(&h, train)?;
        Ok(if self.shortcut { (h + x)? } else { h })
    }
}

/// Pre-norm transformer block with multi-head self-attention.
pub(crate) struct TransformerBlock {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    mlp: Mlp,
    heads: usize,
}

impl TransformerBlock {
    fn new(b: &Builder, dim: usize, heads: usize) -> Result<Self> {
        let attn = b.pp("attn");
        Ok(Self {
            norm1: LayerNorm::new(&b.pp("norm1"), dim, EPS)?,
            qkv: Linear::new(&attn.pp("qkv"), dim, dim * 3, true)?,
            proj: Linear::new(&attn.pp("proj"), dim, dim, true)?,
            norm2: LayerNorm::new(&b.pp("norm2"), dim, EPS)?,
            mlp: Mlp::silu(&b.pp("mlp"), dim, dim * 2)?,
            heads,
        })
    }

    fn attention(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        let hd = c / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, n, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = (qkv.get(0)?.contiguous()? * (hd as f64).powf(-0.5))?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let attn = softmax(&q.matmul(&k.t()?)?)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, n, c))?;
        self.proj.forward(&out)
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attention(&self.norm1.forward(x)?)?)?;
        Ok((&x + self.mlp.forward(&self.norm2.forward(&x)?)?)?)
    }
}

struct MobileVitBlock {
    conv_kxk: ConvNormAct,
    conv_1x1: Conv2d,
    transformer: Vec<TransformerBlock>,
    norm: LayerNorm,
    conv_proj: ConvNormAct,
    conv_fusion: ConvNormAct,
}

impl MobileVitBlock {
    fn new(b: &Builder, c: usize, dim: usize, depth: usize) -> Result<Self> {
        let t = b.pp("transformer");
        Ok(Self {
            conv_kxk: ConvNormAct::new(&b.pp("conv_kxk"), c, c, 3, 1, 1, true)?,
            conv_1x1: Conv2d::new(&b.pp("conv_1x1"), c, dim, 1, ConvCfg::default())?,
            transformer: (0..depth)
                .map(|i| TransformerBlock::new(&t.pp(i), dim, HEADS))
                .collect::<Result<_>>()?,
            norm: LayerNorm::new(&b.pp("norm"), dim, EPS)?,
            conv_proj: ConvNormAct::new(&b.pp("conv_proj"), dim, c, 1, 1, 1, true)?,
            conv_fusion: ConvNormAct::new(&b.pp("conv_fusion"), 2 * c, c, 3, 1, 1, true)?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let shortcut = x;
        let h = self.conv_kxk.forward(x, train)?;
        let h = self.conv_1x1.forward(&h)?;
        let (b, c, hh, ww) = h.dims4()?;
        if hh % PATCH != 0 || ww % PATCH != 0 {
            return Err(super::ModelError::ShapeMismatch {
                what: "mobilevit feature map".into(),
                expected: vec![b, c, hh.div_ceil(PATCH) * PATCH, ww.div_ceil(PATCH) * PATCH],
                actual: vec![b, c, hh, ww],
            });
        }
        let (nh, nw) = (hh / PATCH, ww / PATCH);
        let area = PATCH * PATCH;
        // (B, C, nh, ph, nw, pw) -> (B, ph, pw, nh, nw, C) -> (B*P, N, C)
        let mut t = h
            .reshape((b, c, nh, PATCH, nw, PATCH))?
            .permute((0, 3, 5, 2, 4, 1))?
            .reshape((b * area, nh * nw, c))?;
        for block in &self.transformer {
            t = block.forward(&t)?;
        }
        let t = self.norm.forward(&t)?;
        let h = t
            .reshape((b, PATCH, PATCH, nh, nw, c))?
            .permute((0, 5, 3, 1, 4, 2))?
            .reshape((b, c, hh, ww))?;
        let h = self.conv_proj.forward(&h, train)?;
        self.conv_fusion.forward(&Tensor::cat(&[shortcut, &h], 1)?, train)
    }
}

enum Stage {
    Residual(InvertedResidual),
    Vit(MobileVitBlock),
}

pub struct MobileVitS {
    stem: ConvNormAct,
    stages: Vec<Vec<Stage>>,
    final_conv: ConvNormAct,
}

impl MobileVitS {
    pub fn new(b: &Builder) -> Result<Self> {
        let s = b.pp("stages");
        let mut stages = Vec::new();
        let mut cin = 16;
        for (i, (depth, c, stride)) in [(1, 32, 1), (3, 64, 2)].into_iter().enumerate() {
            let mut blocks = Vec::new();
            for j in 0..depth {
                let st = if j == 0 { stride } else { 1 };
                blocks.push(Stage::Residual(InvertedResidual::new(&s.pp(i).pp(j), cin, c, st)?));
                cin = c;
            }
            stages.push(blocks);
        }
        for (i, (c, dim, depth)) in [(96, 144, 2), (128, 192, 4), (160, 240, 3)].into_iter().enumerate() {
            let sb = s.pp(i + 2);
            stages.push(vec![
                Stage::Residual(InvertedResidual::new(&sb.pp(0), cin, c, 2)?),
                Stage::Vit(MobileVitBlock::new(&sb.pp(1), c, dim, depth)?),
            ]);
            cin = c;
        }
        Ok(Self {
            stem: ConvNormAct::new(&b.pp("stem"), 3, 16, 3, 2, 1, true)?,
            stages,
            final_conv: ConvNormAct::new(&b.pp("final_conv"), cin, 640, 1, 1, 1, true)?,
        })
    }
}

impl Features for MobileVitS {
    fn features(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut x = self.stem.forward(x, train)?;
        for stage in &self.stages {
            for block in stage {
                x = match block {
                    Stage::Residual(r) => r.forward(&x, train)?,
                    Stage::Vit(v) => v.forward(&x, train)?,
                };
            }
        }
        global_avg_pool(&self.final_conv.forward(&x, train)?)
    }
}
