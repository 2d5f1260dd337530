//! ResNet-50 with torchvision tensor names (stride on the 3x3 conv).

use candle_core::Tensor;

use super::layers::{global_avg_pool, max_pool_3x3_s2, BatchNorm2d, Conv2d, ConvCfg};
use super::params::Builder;
use super::{Features, Result};

const EPS: f64 = 1e-5;

struct Bottleneck {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    conv3: Conv2d,
    bn3: BatchNorm2d,
    downsample: Option<(Conv2d, BatchNorm2d)>,
}

impl Bottleneck {
    fn new(b: &Builder, cin: usize, width: usize, stride: usize) -> Result<Self> {
        let cout = width * 4;
        let downsample = if stride != 1 || cin != cout {
            let d = b.pp("downsample");
            Some((
                Conv2d::new(&d.pp(0), cin, cout, 1, ConvCfg::default().stride(stride))?,
                BatchNorm2d::new(&d.pp(1), cout, EPS)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: Conv2d::new(&b.pp("conv1"), cin, width, 1, ConvCfg::default())?,
            bn1: BatchNorm2d::new(&b.pp("bn1"), width, EPS)?,
            conv2: Conv2d::new(&b.pp("conv2"), width, width, 3, ConvCfg::same_size(3).stride(stride))?,
            bn2: BatchNorm2d::new(&b.pp("bn2"), width, EPS)?,
            conv3: Conv2d::new(&b.pp("conv3"), width, cout, 1, ConvCfg::default())?,
            bn3: BatchNorm2d::new(&b.pp("bn3"), cout, EPS)?,
            downsample,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let h = self.bn1.forward(&self.conv1.forward(x)?, train)?.relu()?;
        let h = self.bn2.forward(&self.conv2.forward(&h)?, train)?.relu()?;
        let h = self.bn3.forward(&self.conv3.forward(&h)?, train)?;
        let shortcut = match &self.downsample {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, train)?,
            None => x.clone(),
        };
        Ok((h + shortcut)?.relu()?)
    }
}

pub struct ResNet50 {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    layers: Vec<Vec<Bottleneck>>,
}

impl ResNet50 {
    pub fn new(b: &Builder) -> Result<Self> {
        let mut cin = 64;
        let mut layers = Vec::new();
        for (i, (&depth, &width)) in [3usize, 4, 6, 3].iter().zip(&[64usize, 128, 256, 512]).enumerate() {
            let lb = b.pp(format!("layer{}", i + 1));
            let mut blocks = Vec::new();
            for j in 0..depth {
                let stride = if j == 0 && i > 0 { 2 } else { 1 };
                blocks.push(Bottleneck::new(&lb.pp(j), cin, width, stride)?);
                cin = width * 4;
            }
            layers.push(blocks);
        }
        Ok(Self {
            conv1: Conv2d::new(&b.pp("conv1"), 3, 64, 7, ConvCfg::same_size(7).stride(2))?,
            bn1: BatchNorm2d::new(&b.pp("bn1"), 64, EPS)?,
            layers,
        })
    }
}

impl Features for ResNet50 {
    fn features(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut x = self.bn1.forward(&self.conv1.forward(x)?, train)?.relu()?;
        x = max_pool_3x3_s2(&x)?;
        for layer in &self.layers {
            for block in layer {
                x = block.forward(&x, train)?;
            }
        }
        global_avg_pool(&x)
    }
}
