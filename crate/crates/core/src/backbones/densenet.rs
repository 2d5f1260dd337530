//! DenseNet-161 with torchvision tensor names.

use candle_core::Tensor;

use super::layers::{global_avg_pool, max_pool_3x3_s2, BatchNorm2d, Conv2d, ConvCfg};
use super::params::Builder;
use super::{Features, Result};

const EPS: f64 = 1e-5;
const GROWTH: usize = 48;
const BN_SIZE: usize = 4;
const BLOCKS: [usize; 4] = [6, 12, 36, 24];

struct DenseLayer {
    norm1: BatchNorm2d,
    conv1: Conv2d,
    norm2: BatchNorm2d,
    conv2: Conv2d,
}

impl DenseLayer {
    fn new(b: &Builder, cin: usize) -> Result<Self> {
        let mid = BN_SIZE * GROWTH;
        Ok(Self {
            norm1: BatchNorm2d::new(&b.pp("norm1"), cin, EPS)?,
            conv1: Conv2d::new(&b.pp("conv1"), cin, mid, 1, ConvCfg::default())?,
            norm2: BatchNorm2d::new(&b.pp("norm2"), mid, EPS)?,
            conv2: Conv2d::new(&b.pp("conv2"), mid, GROWTH, 3, ConvCfg::same_size(3))?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x, train)?.relu()?)?;
        self.conv2.forward(&self.norm2.forward(&h, train)?.relu()?)
    }
}

struct Transition {
    norm: BatchNorm2d,
    conv: Conv2d,
}

pub struct DenseNet161 {
    conv0: Conv2d,
    norm0: BatchNorm2d,
    blocks: Vec<Vec<DenseLayer>>,
    transitions: Vec<Transition>,
    norm5: BatchNorm2d,
}

impl DenseNet161 {
    pub fn new(b: &Builder) -> Result<Self> {
        let f = b.pp("features");
        let mut c = 2 * GROWTH;
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        for (i, &n) in BLOCKS.iter().enumerate() {
            let bb = f.pp(format!("denseblock{}", i + 1));
            let mut layers = Vec::new();
            for j in 0..n {
                layers.push(DenseLayer::new(&bb.pp(format!("denselayer{}", j + 1)), c)?);
                c += GROWTH;
            }
            blocks.push(layers);
            if i + 1 < BLOCKS.len() {
                let t = f.pp(format!("transition{}", i + 1));
                transitions.push(Transition {
                    norm: BatchNorm2d::new(&t.pp("norm"), c, EPS)?,
                    conv: Conv2d::new(&t.pp("conv"), c, c / 2, 1, ConvCfg::default())?,
                });
                c /= 2;
            }
        }
        Ok(Self {
            conv0: Conv2d::new(&f.pp("conv0"), 3, 2 * GROWTH, 7, ConvCfg::same_size(7).stride(2))?,
            norm0: BatchNorm2d::new(&f.pp("norm0"), 2 * GROWTH, EPS)?,
            blocks,
            transitions,
            norm5: BatchNorm2d::new(&f.pp("norm5"), c, EPS)?,
        })
    }
}

impl Features for DenseNet161 {
    fn features(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let x = self.norm0.forward(&self.conv0.forward(x)?, train)?.relu()?;
        let mut x = max_pool_3x3_s2(&x)?;
        for (i, block) in self.blocks.iter().enumerate() {
            // accumulate new features and concatenate once per layer
            let mut parts = vec![x];
            for layer in block {
                let input = Tensor::cat(&parts, 1)?;
                let out = layer.forward(&input, train)?;
                parts = vec![input, out];
            }
            x = Tensor::cat(&parts, 1)?;
            if let Some(t) = self.transitions.get(i) {
                let h = t.conv.forward(&t.norm.forward(&x, train)?.relu()?)?;
                x = h.avg_pool2d(2)?;
            }
        }
        let x = self.norm5.forward(&x, train)?.relu()?;
        global_avg_pool(&x)
    }
}
