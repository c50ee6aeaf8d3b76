use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HingeError, Result};
use crate::net::conv::{Conv, ConvCache, ConvMeta, FeatureMap};
use crate::tensor::matrix::{matmul_nt, matmul_tn};
use crate::tensor::{matmul, DenseMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// Block description used to build a network from a config.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BlockConfig {
    Plain {
        out_channels: usize,
        #[serde(default = "default_kernel")]
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
    },
    BasicBlock {
        out_channels: usize,
        #[serde(default = "one")]
        stride: usize,
    },
    Bottleneck {
        width: usize,
        out_channels: usize,
        #[serde(default = "one")]
        stride: usize,
    },
    GroupedBottleneck {
        width: usize,
        out_channels: usize,
        cardinality: usize,
        #[serde(default = "one")]
        stride: usize,
    },
}

fn default_kernel() -> usize {
    3
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub input: InputShape,
    pub blocks: Vec<BlockConfig>,
    pub classes: usize,
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(HingeError::Config("architecture needs at least one block".into()));
        }
        if self.classes < 2 {
            return Err(HingeError::Config("need at least two classes".into()));
        }
        let inp = &self.input;
        if inp.channels == 0 || inp.height == 0 || inp.width == 0 {
            return Err(HingeError::Config("input dimensions must be positive".into()));
        }
        Ok(())
    }

    /// Stem conv followed by two basic blocks, the desk-scale residual net.
    pub fn toy_residual(input: InputShape, classes: usize) -> Self {
        ArchSpec {
            input,
            blocks: vec![
                BlockConfig::Plain { out_channels: 16, kernel: 3, stride: 1 },
                BlockConfig::BasicBlock { out_channels: 16, stride: 1 },
                BlockConfig::BasicBlock { out_channels: 32, stride: 2 },
            ],
            classes,
        }
    }
}

/// Fully connected classifier, `logits = x · weight + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: DenseMatrix,
    pub bias: DenseMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Block {
    Plain {
        conv: Conv,
    },
    Basic {
        conv1: Conv,
        conv2: Conv,
        shortcut: Option<Conv>,
    },
    Bottleneck {
        lead: Conv,
        mid: Conv,
        end: Conv,
        shortcut: Option<Conv>,
    },
}

impl Block {
    /// Convolutions in canonical order with their local names.
    pub fn convs(&self) -> Vec<(&'static str, &Conv)> {
        match self {
            Block::Plain { conv } => vec![("conv", conv)],
            Block::Basic { conv1, conv2, shortcut } => {
                let mut v = vec![("conv1", conv1), ("conv2", conv2)];
                if let Some(s) = shortcut {
                    v.push(("shortcut", s));
                }
                v
            }
            Block::Bottleneck { lead, mid, end, shortcut } => {
                let mut v = vec![("lead", lead), ("mid", mid), ("end", end)];
                if let Some(s) = shortcut {
                    v.push(("shortcut", s));
                }
                v
            }
        }
    }

    pub fn convs_mut(&mut self) -> Vec<(&'static str, &mut Conv)> {
        match self {
            Block::Plain { conv } => vec![("conv", conv)],
            Block::Basic { conv1, conv2, shortcut } => {
                let mut v = vec![("conv1", conv1), ("conv2", conv2)];
                if let Some(s) = shortcut {
                    v.push(("shortcut", s));
                }
                v
            }
            Block::Bottleneck { lead, mid, end, shortcut } => {
                let mut v = vec![("lead", lead), ("mid", mid), ("end", end)];
                if let Some(s) = shortcut {
                    v.push(("shortcut", s));
                }
                v
            }
        }
    }

    /// True when the block input is added back unchanged to its output.
    pub fn has_identity_skip(&self) -> bool {
        matches!(
            self,
            Block::Basic { shortcut: None, .. } | Block::Bottleneck { shortcut: None, .. }
        )
    }

    pub fn has_skip(&self) -> bool {
        !matches!(self, Block::Plain { .. })
    }

    pub fn out_channels(&self) -> usize {
        match self {
            Block::Plain { conv } => conv.meta.out_channels,
            Block::Basic { conv2, .. } => conv2.meta.out_channels,
            Block::Bottleneck { end, .. } => end.meta.out_channels,
        }
    }

    pub fn out_size(&self) -> (usize, usize) {
        match self {
            Block::Plain { conv } => conv.meta.out_size,
            Block::Basic { conv2, .. } => conv2.meta.out_size,
            Block::Bottleneck { end, .. } => end.meta.out_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub input: InputShape,
    pub blocks: Vec<Block>,
    pub head: Linear,
}

/// Identifies one parameter tensor in canonical order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub block: Option<usize>,
    pub conv: Option<&'static str>,
    pub is_hinge: bool,
}

enum BlockCache {
    Plain {
        conv: ConvCache,
        out: DenseMatrix,
    },
    Basic {
        c1: ConvCache,
        h1: DenseMatrix,
        c2: ConvCache,
        sc: Option<ConvCache>,
        out: DenseMatrix,
    },
    Bottleneck {
        lead: ConvCache,
        h1: DenseMatrix,
        mid: ConvCache,
        h2: DenseMatrix,
        end: ConvCache,
        sc: Option<ConvCache>,
        out: DenseMatrix,
    },
}

/// Activations kept from a forward pass for the matching backward pass.
pub struct ForwardCache {
    blocks: Vec<BlockCache>,
    pooled: DenseMatrix,
    last_shape: (usize, usize, usize, usize),
}

fn relu(mut m: DenseMatrix) -> DenseMatrix {
    m.data_mut().iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v = 0.0
        }
    });
    m
}

/// Zeroes the gradient where the ReLU output was not positive.
fn relu_back(grad: &mut DenseMatrix, out: &DenseMatrix) {
    for (g, &o) in grad.data_mut().iter_mut().zip(out.data()) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

fn kaiming<R: Rng + ?Sized>(meta: &ConvMeta, gain: f64, rng: &mut R) -> DenseMatrix {
    let std = gain * (2.0 / meta.patch_len() as f64).sqrt();
    DenseMatrix::random_normal(meta.patch_len(), meta.out_channels, std, rng)
}

impl Network {
    pub fn build<R: Rng + ?Sized>(arch: &ArchSpec, rng: &mut R) -> Result<Network> {
        arch.validate()?;
        let mut channels = arch.input.channels;
        let mut size = (arch.input.height, arch.input.width);
        let mut blocks = Vec::with_capacity(arch.blocks.len());
        // residual branches start small so the untrained net stays well scaled
        let branch_gain = 0.5;
        for cfg in &arch.blocks {
            let block = match *cfg {
                BlockConfig::Plain { out_channels, kernel, stride } => {
                    let meta = ConvMeta::new(channels, out_channels, kernel, stride, kernel / 2, 1, size)?;
                    Block::Plain { conv: Conv::new(meta, kaiming(&meta, 1.0, rng), None)? }
                }
                BlockConfig::BasicBlock { out_channels, stride } => {
                    let m1 = ConvMeta::new(channels, out_channels, 3, stride, 1, 1, size)?;
                    let m2 = ConvMeta::new(out_channels, out_channels, 3, 1, 1, 1, m1.out_size)?;
                    let shortcut = if stride != 1 || channels != out_channels {
                        let ms = ConvMeta::new(channels, out_channels, 1, stride, 0, 1, size)?;
                        Some(Conv::new(ms, kaiming(&ms, 0.5, rng), None)?)
                    } else {
                        None
                    };
                    Block::Basic {
                        conv1: Conv::new(m1, kaiming(&m1, 1.0, rng), None)?,
                        conv2: Conv::new(m2, kaiming(&m2, branch_gain, rng), None)?,
                        shortcut,
                    }
                }
                BlockConfig::Bottleneck { width, out_channels, stride } => {
                    Self::bottleneck(channels, width, out_channels, 1, stride, size, branch_gain, rng)?
                }
                BlockConfig::GroupedBottleneck { width, out_channels, cardinality, stride } => {
                    Self::bottleneck(channels, width, out_channels, cardinality, stride, size, branch_gain, rng)?
                }
            };
            channels = block.out_channels();
            size = block.out_size();
            blocks.push(block);
        }
        let head = Linear {
            weight: DenseMatrix::random_normal(channels, arch.classes, (1.0 / channels as f64).sqrt(), rng),
            bias: DenseMatrix::zeros(1, arch.classes),
        };
        Ok(Network { input: arch.input, blocks, head })
    }

    #[allow(clippy::too_many_arguments)]
    fn bottleneck<R: Rng + ?Sized>(
        channels: usize,
        width: usize,
        out_channels: usize,
        cardinality: usize,
        stride: usize,
        size: (usize, usize),
        branch_gain: f64,
        rng: &mut R,
    ) -> Result<Block> {
        let ml = ConvMeta::new(channels, width, 1, 1, 0, 1, size)?;
        let mm = ConvMeta::new(width, width, 3, stride, 1, cardinality, size)?;
        let me = ConvMeta::new(width, out_channels, 1, 1, 0, 1, mm.out_size)?;
        let shortcut = if stride != 1 || channels != out_channels {
            let ms = ConvMeta::new(channels, out_channels, 1, stride, 0, 1, size)?;
            Some(Conv::new(ms, kaiming(&ms, 0.5, rng), None)?)
        } else {
            None
        };
        Ok(Block::Bottleneck {
            lead: Conv::new(ml, kaiming(&ml, 1.0, rng), None)?,
            mid: Conv::new(mm, kaiming(&mm, 1.0, rng), None)?,
            end: Conv::new(me, kaiming(&me, branch_gain, rng), None)?,
            shortcut,
        })
    }

    pub fn feature_channels(&self) -> usize {
        self.blocks.last().map_or(self.input.channels, |b| b.out_channels())
    }

    pub fn classes(&self) -> usize {
        self.head.weight.cols()
    }

    pub fn conv_name(block: usize, conv: &str) -> String {
        format!("b{block}.{conv}")
    }

    /// Every parameter tensor in canonical order.
    pub fn param_infos(&self) -> Vec<ParamInfo> {
        let mut out = Vec::new();
        for (bi, block) in self.blocks.iter().enumerate() {
            for (cname, conv) in block.convs() {
                let base = Self::conv_name(bi, cname);
                out.push(ParamInfo { name: format!("{base}.W"), block: Some(bi), conv: Some(cname), is_hinge: false });
                if conv.hinge.is_some() {
                    out.push(ParamInfo { name: format!("{base}.A"), block: Some(bi), conv: Some(cname), is_hinge: true });
                }
            }
        }
        out.push(ParamInfo { name: "head.W".into(), block: None, conv: None, is_hinge: false });
        out.push(ParamInfo { name: "head.b".into(), block: None, conv: None, is_hinge: false });
        out
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.param_infos().iter().position(|p| p.name == name)
    }

    pub fn params(&self) -> Vec<&DenseMatrix> {
        let mut out = Vec::new();
        for block in &self.blocks {
            for (_, conv) in block.convs() {
                out.push(&conv.weight);
                if let Some(a) = &conv.hinge {
                    out.push(a);
                }
            }
        }
        out.push(&self.head.weight);
        out.push(&self.head.bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut DenseMatrix> {
        let mut out = Vec::new();
        for block in &mut self.blocks {
            for (_, conv) in block.convs_mut() {
                out.push(&mut conv.weight);
                if let Some(a) = &mut conv.hinge {
                    out.push(a);
                }
            }
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn conv(&self, block: usize, name: &str) -> Option<&Conv> {
        self.blocks.get(block)?.convs().into_iter().find(|(n, _)| *n == name).map(|(_, c)| c)
    }

    pub fn conv_mut(&mut self, block: usize, name: &str) -> Option<&mut Conv> {
        self.blocks
            .get_mut(block)?
            .convs_mut()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, c)| c)
    }

    pub fn input_map(&self, batch: usize, data: DenseMatrix) -> Result<FeatureMap> {
        if data.cols() != self.input.channels {
            return Err(HingeError::dim(format!(
                "input has {} channels, network expects {}",
                data.cols(),
                self.input.channels
            )));
        }
        FeatureMap::new(batch, self.input.height, self.input.width, data)
    }

    pub fn logits(&self, x: &FeatureMap) -> Result<DenseMatrix> {
        Ok(self.forward(x)?.0)
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<(DenseMatrix, ForwardCache)> {
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut cur = x.clone();
        for block in &self.blocks {
            let (next, cache) = match block {
                Block::Plain { conv } => {
                    let (z, c) = conv.forward(&cur)?;
                    let out = relu(z.data);
                    let fm = FeatureMap::new(z.batch, z.height, z.width, out.clone())?;
                    (fm, BlockCache::Plain { conv: c, out })
                }
                Block::Basic { conv1, conv2, shortcut } => {
                    let (z1, c1) = conv1.forward(&cur)?;
                    let h1 = relu(z1.data);
                    let h1_map = FeatureMap::new(z1.batch, z1.height, z1.width, h1.clone())?;
                    let (z2, c2) = conv2.forward(&h1_map)?;
                    let (skip, sc) = match shortcut {
                        Some(s) => {
                            let (zs, cs) = s.forward(&cur)?;
                            (zs.data, Some(cs))
                        }
                        None => (cur.data.clone(), None),
                    };
                    let mut sum = z2.data;
                    sum.add_scaled(&skip, 1.0)?;
                    let out = relu(sum);
                    let fm = FeatureMap::new(z2.batch, z2.height, z2.width, out.clone())?;
                    (fm, BlockCache::Basic { c1, h1, c2, sc, out })
                }
                Block::Bottleneck { lead, mid, end, shortcut } => {
                    let (z1, cl) = lead.forward(&cur)?;
                    let h1 = relu(z1.data);
                    let (z2, cm) = mid.forward(&FeatureMap::new(z1.batch, z1.height, z1.width, h1.clone())?)?;
                    let h2 = relu(z2.data);
                    let (z3, ce) = end.forward(&FeatureMap::new(z2.batch, z2.height, z2.width, h2.clone())?)?;
                    let (skip, sc) = match shortcut {
                        Some(s) => {
                            let (zs, cs) = s.forward(&cur)?;
                            (zs.data, Some(cs))
                        }
                        None => (cur.data.clone(), None),
                    };
                    let mut sum = z3.data;
                    sum.add_scaled(&skip, 1.0)?;
                    let out = relu(sum);
                    let fm = FeatureMap::new(z3.batch, z3.height, z3.width, out.clone())?;
                    (fm, BlockCache::Bottleneck { lead: cl, h1, mid: cm, h2, end: ce, sc, out })
                }
            };
            caches.push(cache);
            cur = next;
        }
        let pooled = global_avg_pool(&cur);
        let mut logits = matmul(&pooled, &self.head.weight)?;
        for r in 0..logits.rows() {
            for (v, b) in logits.row_mut(r).iter_mut().zip(self.head.bias.row(0)) {
                *v += b;
            }
        }
        logits.ensure_finite("logits")?;
        let last_shape = (cur.batch, cur.height, cur.width, cur.channels());
        Ok((logits, ForwardCache { blocks: caches, pooled, last_shape }))
    }

    /// Gradients of every parameter, in [`Network::params`] order, given
    /// `d loss / d logits`.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &DenseMatrix) -> Result<Vec<DenseMatrix>> {
        if cache.blocks.len() != self.blocks.len() || dlogits.rows() != cache.pooled.rows() {
            return Err(HingeError::Structural("forward cache does not belong to this network".into()));
        }
        let d_head_w = matmul_tn(&cache.pooled, dlogits);
        let mut d_head_b = DenseMatrix::zeros(1, dlogits.cols());
        for r in 0..dlogits.rows() {
            for (acc, v) in d_head_b.row_mut(0).iter_mut().zip(dlogits.row(r)) {
                *acc += v;
            }
        }
        let dpooled = matmul_nt(dlogits, &self.head.weight);
        let (batch, h, w, c) = cache.last_shape;
        let positions = (h * w) as f64;
        let mut grad = DenseMatrix::zeros(batch * h * w, c);
        for b in 0..batch {
            for p in 0..h * w {
                let row = grad.row_mut(b * h * w + p);
                for (g, &d) in row.iter_mut().zip(dpooled.row(b)) {
                    *g = d / positions;
                }
            }
        }

        let mut per_block: Vec<Vec<DenseMatrix>> = Vec::with_capacity(self.blocks.len());
        for (block, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            let mut grads = Vec::new();
            let push = |grads: &mut Vec<DenseMatrix>, g: crate::net::conv::ConvGrads| {
                grads.push(g.weight);
                if let Some(a) = g.hinge {
                    grads.push(a);
                }
            };
            grad = match (block, bc) {
                (Block::Plain { conv }, BlockCache::Plain { conv: cc, out }) => {
                    relu_back(&mut grad, out);
                    let (dx, g) = conv.backward(cc, &grad)?;
                    push(&mut grads, g);
                    dx.data
                }
                (Block::Basic { conv1, conv2, shortcut }, BlockCache::Basic { c1, h1, c2, sc, out }) => {
                    relu_back(&mut grad, out);
                    let (mut dh1, g2) = conv2.backward(c2, &grad)?;
                    relu_back(&mut dh1.data, h1);
                    let (dx1, g1) = conv1.backward(c1, &dh1.data)?;
                    let mut dx = dx1.data;
                    push(&mut grads, g1);
                    push(&mut grads, g2);
                    match (shortcut, sc) {
                        (Some(s), Some(cs)) => {
                            let (dxs, gs) = s.backward(cs, &grad)?;
                            dx.add_scaled(&dxs.data, 1.0)?;
                            push(&mut grads, gs);
                        }
                        (None, None) => dx.add_scaled(&grad, 1.0)?,
                        _ => return Err(HingeError::Structural("shortcut cache mismatch".into())),
                    }
                    dx
                }
                (
                    Block::Bottleneck { lead, mid, end, shortcut },
                    BlockCache::Bottleneck { lead: cl, h1, mid: cm, h2, end: ce, sc, out },
                ) => {
                    relu_back(&mut grad, out);
                    let (mut dh2, ge) = end.backward(ce, &grad)?;
                    relu_back(&mut dh2.data, h2);
                    let (mut dh1, gm) = mid.backward(cm, &dh2.data)?;
                    relu_back(&mut dh1.data, h1);
                    let (dx1, gl) = lead.backward(cl, &dh1.data)?;
                    let mut dx = dx1.data;
                    push(&mut grads, gl);
                    push(&mut grads, gm);
                    push(&mut grads, ge);
                    match (shortcut, sc) {
                        (Some(s), Some(cs)) => {
                            let (dxs, gs) = s.backward(cs, &grad)?;
                            dx.add_scaled(&dxs.data, 1.0)?;
                            push(&mut grads, gs);
                        }
                        (None, None) => dx.add_scaled(&grad, 1.0)?,
                        _ => return Err(HingeError::Structural("shortcut cache mismatch".into())),
                    }
                    dx
                }
                _ => return Err(HingeError::Structural("block cache kind mismatch".into())),
            };
            per_block.push(grads);
        }
        let mut out: Vec<DenseMatrix> = per_block.into_iter().rev().flatten().collect();
        out.push(d_head_w);
        out.push(d_head_b);
        Ok(out)
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.rows() * p.cols()).sum()
    }
}

fn global_avg_pool(x: &FeatureMap) -> DenseMatrix {
    let positions = x.positions();
    let mut out = DenseMatrix::zeros(x.batch, x.channels());
    for b in 0..x.batch {
        let dst = out.row_mut(b);
        for p in 0..positions {
            for (d, v) in dst.iter_mut().zip(x.data.row(b * positions + p)) {
                *d += v;
            }
        }
        dst.iter_mut().for_each(|d| *d /= positions as f64);
    }
    out
}
