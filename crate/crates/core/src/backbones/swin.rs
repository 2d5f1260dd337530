//! Swin-S3-Tiny (searched window sizes 7/7/14/7) with timm tensor names.
//! Runs at a fixed resolution; activations are kept channels-last.

use candle_core::{Device, Tensor};

use super::layers::{softmax, Conv2d, ConvCfg, LayerNorm, Linear, Mlp};
use super::params::{Builder, Init};
use super::{Features, Result};

const EPS: f64 = 1e-5;
const EMBED: usize = 96;
const DEPTHS: [usize; 4] = [2, 2, 6, 2];
const HEADS: [usize; 4] = [3, 6, 12, 24];
const WINDOWS: [usize; 4] = [7, 7, 14, 7];
const PATCH: usize = 4;

fn relative_position_index(win: usize, device: &Device) -> Result<Tensor> {
    let n = win * win;
    let mut idx = Vec::with_capacity(n * n);
    for a in 0..n {
        for b in 0..n {
            let dh = (a / win) as i64 - (b / win) as i64 + win as i64 - 1;
            let dw = (a % win) as i64 - (b % win) as i64 + win as i64 - 1;
            idx.push((dh * (2 * win as i64 - 1) + dw) as u32);
        }
    }
    Ok(Tensor::from_vec(idx, n * n, device)?)
}

/// Region labels after a cyclic shift; tokens from different regions must
/// not attend to each other. Returns (num_windows, N, N) of 0 / -100.
fn shifted_window_mask(res: usize, win: usize, shift: usize, device: &Device) -> Result<Tensor> {
    let region = |i: usize| -> usize {
        if i < res - win {
            0
        } else if i < res - shift {
            1
        } else {
            2
        }
    };
    let nwin = res / win;
    let n = win * win;
    let mut mask = Vec::with_capacity(nwin * nwin * n * n);
    for wy in 0..nwin {
        for wx in 0..nwin {
            let labels: Vec<usize> = (0..n)
                .map(|t| region(wy * win + t / win) * 3 + region(wx * win + t % win))
                .collect();
            for a in 0..n {
                for b in 0..n {
                    mask.push(if labels[a] == labels[b] { 0f32 } else { -100.0 });
                }
            }
        }
    }
    Ok(Tensor::from_vec(mask, (nwin * nwin, n, n), device)?)
}

struct SwinBlock {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    rel_table: Tensor,
    rel_index: Tensor,
    norm2: LayerNorm,
    mlp: Mlp,
    heads: usize,
    window: usize,
    shift: usize,
    mask: Option<Tensor>,
}

impl SwinBlock {
    fn new(b: &Builder, dim: usize, heads: usize, res: usize, target_window: usize, odd: bool) -> Result<Self> {
        let (window, shift) = if res <= target_window {
            (res, 0)
        } else {
            (target_window, if odd { target_window / 2 } else { 0 })
        };
        let attn = b.pp("attn");
        let mask = if shift > 0 {
            Some(shifted_window_mask(res, window, shift, b.device())?)
        } else {
            None
        };
        Ok(Self {
            norm1: LayerNorm::new(&b.pp("norm1"), dim, EPS)?,
            rel_table: attn.param(
                "relative_position_bias_table",
                ((2 * window - 1) * (2 * window - 1), heads),
                Init::TruncNormal(0.02),
            )?,
            qkv: Linear::new(&attn.pp("qkv"), dim, dim * 3, true)?,
            proj: Linear::new(&attn.pp("proj"), dim, dim, true)?,
            rel_index: relative_position_index(window, b.device())?,
            norm2: LayerNorm::new(&b.pp("norm2"), dim, EPS)?,
            mlp: Mlp::gelu(&b.pp("mlp"), dim, dim * 4)?,
            heads,
            window,
            shift,
            mask,
        })
    }

    /// Window attention over (B*nW, N, C).
    fn window_attention(&self, x: &Tensor) -> Result<Tensor> {
        let (bw, n, c) = x.dims3()?;
        let hd = c / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((bw, n, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = (qkv.get(0)?.contiguous()? * (hd as f64).powf(-0.5))?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let bias = self
            .rel_table
            .index_select(&self.rel_index, 0)?
            .reshape((n, n, self.heads))?
            .permute((2, 0, 1))?
            .unsqueeze(0)?;
        let mut attn = q.matmul(&k.t()?)?.broadcast_add(&bias)?;
        if let Some(mask) = &self.mask {
            let nw = mask.dim(0)?;
            attn = attn
                .reshape((bw / nw, nw, self.heads, n, n))?
                .broadcast_add(&mask.unsqueeze(1)?.unsqueeze(0)?)?
                .reshape((bw, self.heads, n, n))?;
        }
        let out = softmax(&attn)?.matmul(&v)?.transpose(1, 2)?.reshape((bw, n, c))?;
        self.proj.forward(&out)
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let win = self.window;
        let s = self.shift as i32;
        let mut t = self.norm1.forward(x)?;
        if s > 0 {
            t = t.roll(-s, 1)?.roll(-s, 2)?;
        }
        let windows = t
            .reshape((b, h / win, win, w / win, win, c))?
            .permute((0, 1, 3, 2, 4, 5))?
            .reshape((b * (h / win) * (w / win), win * win, c))?;
        let attn = self.window_attention(&windows)?;
        let mut t = attn
            .reshape((b, h / win, w / win, win, win, c))?
            .permute((0, 1, 3, 2, 4, 5))?
            .reshape((b, h, w, c))?;
        if s > 0 {
            t = t.roll(s, 1)?.roll(s, 2)?;
        }
        let x = (x + t)?;
        Ok((&x + self.mlp.forward(&self.norm2.forward(&x)?)?)?)
    }
}

struct PatchMerging {
    norm: LayerNorm,
    reduction: Linear,
}

impl PatchMerging {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        // channel order (w offset, h offset, c)
        let x = x
            .reshape((b, h / 2, 2, w / 2, 2, c))?
            .permute((0, 1, 3, 4, 2, 5))?
            .reshape((b, h / 2, w / 2, 4 * c))?;
        self.reduction.forward(&self.norm.forward(&x)?)
    }
}

struct Stage {
    downsample: Option<PatchMerging>,
    blocks: Vec<SwinBlock>,
}

pub struct SwinS3Tiny {
    proj: Conv2d,
    patch_norm: LayerNorm,
    layers: Vec<Stage>,
    norm: LayerNorm,
    input_size: usize,
}

impl SwinS3Tiny {
    pub fn new(b: &Builder, input_size: usize) -> Result<Self> {
        let pe = b.pp("patch_embed");
        let mut layers = Vec::new();
        let mut dim = EMBED;
        let mut res = input_size / PATCH;
        for i in 0..4 {
            let lb = b.pp("layers").pp(i);
            let downsample = if i > 0 {
                let d = lb.pp("downsample");
                let m = PatchMerging {
                    norm: LayerNorm::new(&d.pp("norm"), 4 * dim, EPS)?,
                    reduction: Linear::new(&d.pp("reduction"), 4 * dim, 2 * dim, false)?,
                };
                dim *= 2;
                res /= 2;
                Some(m)
            } else {
                None
            };
            let blocks = (0..DEPTHS[i])
                .map(|j| SwinBlock::new(&lb.pp("blocks").pp(j), dim, HEADS[i], res, WINDOWS[i], j % 2 == 1))
                .collect::<Result<_>>()?;
            layers.push(Stage { downsample, blocks });
        }
        Ok(Self {
            proj: Conv2d::new(&pe.pp("proj"), 3, EMBED, PATCH, ConvCfg::default().stride(PATCH).bias(true))?,
            patch_norm: LayerNorm::new(&pe.pp("norm"), EMBED, EPS)?,
            layers,
            norm: LayerNorm::new(&b.pp("norm"), dim, EPS)?,
            input_size,
        })
    }
}

impl Features for SwinS3Tiny {
    fn features(&self, x: &Tensor, _train: bool) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        if h != self.input_size || w != self.input_size {
            return Err(super::ModelError::ShapeMismatch {
                what: "swin input".into(),
                expected: vec![3, self.input_size, self.input_size],
                actual: vec![x.dim(1)?, h, w],
            });
        }
        let mut x = self.patch_norm.forward(&self.proj.forward(x)?.permute((0, 2, 3, 1))?)?;
        for stage in &self.layers {
            if let Some(d) = &stage.downsample {
                x = d.forward(&x)?;
            }
            for block in &stage.blocks {
                x = block.forward(&x)?;
            }
        }
        Ok(self.norm.forward(&x)?.mean((1, 2))?)
    }
}
