//! CoaT-Lite Mini with timm tensor names.
//!
//! Each serial block reuses its stage's `cpe<i>` / `crpe<i>` modules; the
//! per-block upstream names are registered as aliases of the stage tensors.

use candle_core::{Tensor, D};

use super::layers::{softmax, Conv2d, ConvCfg, LayerNorm, Linear, Mlp};
use super::params::{Builder, Init};
use super::{Features, Result};

const DIMS: [usize; 4] = [64, 128, 320, 512];
const DEPTHS: [usize; 4] = [2, 2, 2, 2];
const MLP_RATIOS: [usize; 4] = [8, 8, 4, 4];
const HEADS: usize = 8;
/// (kernel, heads) for the relative position convolutions.
const CRPE_WINDOWS: [(usize, usize); 3] = [(3, 2), (5, 3), (7, 3)];

#[derive(Clone)]
struct ConvPosEnc {
    proj: Conv2d,
}

impl ConvPosEnc {
    fn new(b: &Builder, dim: usize) -> Result<Self> {
        Ok(Self {
            proj: Conv2d::new(&b.pp("proj"), dim, dim, 3, ConvCfg::same_size(3).groups(dim).bias(true))?,
        })
    }

    fn forward(&self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        let cls = x.narrow(1, 0, 1)?;
        let feat = x.narrow(1, 1, n - 1)?.transpose(1, 2)?.reshape((b, c, h, w))?;
        let y = (self.proj.forward(&feat)? + feat)?.flatten_from(2)?.transpose(1, 2)?;
        Ok(Tensor::cat(&[&cls, &y], 1)?)
    }
}

#[derive(Clone)]
struct ConvRelPosEnc {
    convs: Vec<Conv2d>,
    splits: Vec<usize>,
}

impl ConvRelPosEnc {
    fn new(b: &Builder, head_chs: usize) -> Result<Self> {
        let mut convs = Vec::new();
        let mut splits = Vec::new();
        for (i, &(k, heads)) in CRPE_WINDOWS.iter().enumerate() {
            let c = heads * head_chs;
            convs.push(Conv2d::new(
                &b.pp("conv_list").pp(i),
                c,
                c,
                k,
                ConvCfg::same_size(k).groups(c).bias(true),
            )?);
            splits.push(c);
        }
        Ok(Self { convs, splits })
    }

    /// q, v: (B, h, N, Ch) including the class token.
    fn forward(&self, q: &Tensor, v: &Tensor, hh: usize, ww: usize) -> Result<Tensor> {
        let (b, heads, n, ch) = q.dims4()?;
        let q_img = q.narrow(2, 1, n - 1)?;
        let v_img = v
            .narrow(2, 1, n - 1)?
            .transpose(2, 3)?
            .reshape((b, heads * ch, hh, ww))?;
        let mut parts = Vec::new();
        let mut start = 0;
        for (conv, &len) in self.convs.iter().zip(&self.splits) {
            parts.push(conv.forward(&v_img.narrow(1, start, len)?)?);
            start += len;
        }
        let conv_v = Tensor::cat(&parts, 1)?
            .reshape((b, heads, ch, hh * ww))?
            .transpose(2, 3)?;
        let ev = (q_img * conv_v)?;
        Ok(ev.pad_with_zeros(2, 1, 0)?)
    }
}

struct SerialBlock {
    cpe: ConvPosEnc,
    crpe: ConvRelPosEnc,
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl SerialBlock {
    fn attention(&self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        let ch = c / HEADS;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, n, 3, HEADS, ch))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        // softmax of k over tokens, kept transposed: (B, h, Ch, N)
        let k_soft_t = softmax(&k.transpose(2, 3)?.contiguous()?)?;
        let factor = q.matmul(&k_soft_t.matmul(&v)?)?;
        let crpe = self.crpe.forward(&q, &v, h, w)?;
        let out = ((factor * (ch as f64).powf(-0.5))? + crpe)?
            .transpose(1, 2)?
            .reshape((b, n, c))?;
        self.proj.forward(&out)
    }

    fn forward(&self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let x = self.cpe.forward(x, h, w)?;
        let x = (&x + self.attention(&self.norm1.forward(&x)?, h, w)?)?;
        Ok((&x + self.mlp.forward(&self.norm2.forward(&x)?)?)?)
    }
}

struct Stage {
    proj: Conv2d,
    norm: LayerNorm,
    cls_token: Tensor,
    blocks: Vec<SerialBlock>,
    patch: usize,
}

pub struct CoatLiteMini {
    stages: Vec<Stage>,
    norm4: LayerNorm,
}

impl CoatLiteMini {
    pub fn new(b: &Builder) -> Result<Self> {
        let mut stages = Vec::new();
        let mut cin = 3;
        for i in 0..4 {
            let s = i + 1;
            let dim = DIMS[i];
            let patch = if i == 0 { 4 } else { 2 };
            let pe = b.pp(format!("patch_embed{s}"));
            let proj = Conv2d::new(&pe.pp("proj"), cin, dim, patch, ConvCfg::default().stride(patch).bias(true))?;
            let norm = LayerNorm::new(&pe.pp("norm"), dim, 1e-5)?;
            let cls_token = b.param(&format!("cls_token{s}"), (1, 1, dim), Init::TruncNormal(0.02))?;
            let cpe = ConvPosEnc::new(&b.pp(format!("cpe{s}")), dim)?;
            let crpe = ConvRelPosEnc::new(&b.pp(format!("crpe{s}")), dim / HEADS)?;
            let mut blocks = Vec::new();
            for j in 0..DEPTHS[i] {
                let bb = b.pp(format!("serial_blocks{s}")).pp(j);
                for suffix in ["weight", "bias"] {
                    b.alias(
                        &bb.full_name(&format!("cpe.proj.{suffix}")),
                        &b.full_name(&format!("cpe{s}.proj.{suffix}")),
                    );
                    for k in 0..CRPE_WINDOWS.len() {
                        b.alias(
                            &bb.full_name(&format!("factoratt_crpe.crpe.conv_list.{k}.{suffix}")),
                            &b.full_name(&format!("crpe{s}.conv_list.{k}.{suffix}")),
                        );
                    }
                }
                let att = bb.pp("factoratt_crpe");
                blocks.push(SerialBlock {
                    cpe: cpe.clone(),
                    crpe: crpe.clone(),
                    norm1: LayerNorm::new(&bb.pp("norm1"), dim, 1e-6)?,
                    qkv: Linear::new(&att.pp("qkv"), dim, dim * 3, true)?,
                    proj: Linear::new(&att.pp("proj"), dim, dim, true)?,
                    norm2: LayerNorm::new(&bb.pp("norm2"), dim, 1e-6)?,
                    mlp: Mlp::gelu(&bb.pp("mlp"), dim, dim * MLP_RATIOS[i])?,
                });
            }
            stages.push(Stage {
                proj,
                norm,
                cls_token,
                blocks,
                patch,
            });
            cin = dim;
        }
        Ok(Self {
            stages,
            norm4: LayerNorm::new(&b.pp("norm4"), DIMS[3], 1e-6)?,
        })
    }
}

impl Features for CoatLiteMini {
    fn features(&self, x: &Tensor, _train: bool) -> Result<Tensor> {
        let mut img = x.clone();
        let mut tokens = None;
        for stage in &self.stages {
            let (b, _, hh, ww) = img.dims4()?;
            let (h, w) = (hh / stage.patch, ww / stage.patch);
            let t = stage.proj.forward(&img)?.flatten_from(2)?.transpose(1, 2)?;
            let t = stage.norm.forward(&t)?;
            let c = t.dim(D::Minus1)?;
            let cls = stage.cls_token.broadcast_as((b, 1, c))?;
            let mut t = Tensor::cat(&[&cls, &t], 1)?;
            for block in &stage.blocks {
                t = block.forward(&t, h, w)?;
            }
            img = t.narrow(1, 1, h * w)?.reshape((b, h, w, c))?.permute((0, 3, 1, 2))?.contiguous()?;
            tokens = Some(t);
        }
        let t = self.norm4.forward(&tokens.expect("four stages"))?;
        Ok(t.narrow(1, 0, 1)?.squeeze(1)?)
    }
}
