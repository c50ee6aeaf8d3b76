//! Network parameters to and from HNGW checkpoints.
//!
//! Tensor names follow [`Network::param_infos`]: `b{i}.{conv}.W`,
//! `b{i}.{conv}.A` for a trailing `1×1` factor, `head.W` and `head.b`. Shapes
//! are read back from the tensors, so pruned or decomposed networks load with
//! the same topology description as the original.

use std::collections::HashSet;

use crate::error::{HingeError, Result};
use crate::net::conv::{Conv, ConvMeta};
use crate::net::model::{ArchSpec, Block, BlockConfig, Linear, Network, ParamInfo};
use crate::tensor::{Checkpoint, DenseMatrix};

impl Network {
    /// Writes every parameter in canonical order; `after` runs once per
    /// parameter so callers can interleave masks or mode bytes.
    pub fn write_tensors<F>(&self, ckpt: &mut Checkpoint, mut after: F) -> Result<()>
    where
        F: FnMut(&ParamInfo, &mut Checkpoint) -> Result<()>,
    {
        for (info, p) in self.param_infos().iter().zip(self.params()) {
            if info.name == "head.b" {
                ckpt.push_vector(&info.name, p.data())?;
            } else {
                ckpt.push_matrix(&info.name, p)?;
            }
            after(info, ckpt)?;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new();
        self.write_tensors(&mut ckpt, |_, _| Ok(()))?;
        Ok(ckpt)
    }

    /// Rebuilds a network whose topology follows `arch` and whose shapes
    /// come from the stored tensors.
    pub fn from_checkpoint(arch: &ArchSpec, ckpt: &Checkpoint) -> Result<Network> {
        arch.validate()?;
        let mut ld = Loader { ckpt, used: HashSet::new() };
        let mut channels = arch.input.channels;
        let mut size = (arch.input.height, arch.input.width);
        let mut blocks = Vec::with_capacity(arch.blocks.len());
        for (i, cfg) in arch.blocks.iter().enumerate() {
            let base = |c: &str| Network::conv_name(i, c);
            let block = match *cfg {
                BlockConfig::Plain { kernel, stride, .. } => Block::Plain {
                    conv: ld.conv(&base("conv"), channels, kernel, stride, size)?,
                },
                BlockConfig::BasicBlock { stride, .. } => {
                    let conv1 = ld.conv(&base("conv1"), channels, 3, stride, size)?;
                    let conv2 = ld.conv(&base("conv2"), conv1.meta.out_channels, 3, 1, conv1.meta.out_size)?;
                    let shortcut = ld.optional_conv(&base("shortcut"), channels, 1, stride, size)?;
                    Block::Basic { conv1, conv2, shortcut }
                }
                BlockConfig::Bottleneck { stride, .. } | BlockConfig::GroupedBottleneck { stride, .. } => {
                    let lead = ld.conv(&base("lead"), channels, 1, 1, size)?;
                    let mid = ld.conv(&base("mid"), lead.meta.out_channels, 3, stride, size)?;
                    let end = ld.conv(&base("end"), mid.meta.out_channels, 1, 1, mid.meta.out_size)?;
                    let shortcut = ld.optional_conv(&base("shortcut"), channels, 1, stride, size)?;
                    Block::Bottleneck { lead, mid, end, shortcut }
                }
            };
            check_skip(&block, i, channels, size)?;
            channels = block.out_channels();
            size = block.out_size();
            blocks.push(block);
        }
        let weight = ld.matrix("head.W")?;
        let bias = ld.matrix("head.b")?;
        if weight.rows() != channels || bias.shape() != (1, weight.cols()) || weight.cols() != arch.classes {
            return Err(HingeError::Format(format!(
                "head is {}x{} with bias {:?}; features {channels}, classes {}",
                weight.rows(),
                weight.cols(),
                bias.shape(),
                arch.classes
            )));
        }
        for t in ckpt.tensors() {
            let byte = t.name.ends_with(".mask") || t.name.ends_with(".mode");
            if !byte && !ld.used.contains(&t.name) {
                return Err(HingeError::Format(format!("unexpected tensor {}", t.name)));
            }
        }
        Ok(Network { input: arch.input, blocks, head: Linear { weight, bias } })
    }
}

fn check_skip(block: &Block, i: usize, channels: usize, size: (usize, usize)) -> Result<()> {
    if block.has_identity_skip() && (block.out_channels() != channels || block.out_size() != size) {
        return Err(HingeError::Format(format!("block {i} has an identity skip but changes shape")));
    }
    if let Block::Basic { shortcut: Some(s), conv2: last, .. } | Block::Bottleneck { shortcut: Some(s), end: last, .. } =
        block
    {
        if s.meta.out_channels != last.meta.out_channels || s.meta.out_size != last.meta.out_size {
            return Err(HingeError::Format(format!("block {i} shortcut shape mismatch")));
        }
    }
    Ok(())
}

struct Loader<'a> {
    ckpt: &'a Checkpoint,
    used: HashSet<String>,
}

impl Loader<'_> {
    fn matrix(&mut self, name: &str) -> Result<DenseMatrix> {
        let m = self.ckpt.matrix(name)?;
        self.used.insert(name.to_string());
        Ok(m)
    }

    fn optional_conv(
        &mut self,
        name: &str,
        in_channels: usize,
        kernel: usize,
        stride: usize,
        size: (usize, usize),
    ) -> Result<Option<Conv>> {
        if self.ckpt.contains(&format!("{name}.W")) {
            Ok(Some(self.conv(name, in_channels, kernel, stride, size)?))
        } else {
            Ok(None)
        }
    }

    fn conv(&mut self, name: &str, in_channels: usize, kernel: usize, stride: usize, size: (usize, usize)) -> Result<Conv> {
        let w = self.matrix(&format!("{name}.W"))?;
        let a_name = format!("{name}.A");
        let a = if self.ckpt.contains(&a_name) { Some(self.matrix(&a_name)?) } else { None };
        let out = a.as_ref().map_or(w.cols(), |a| a.cols());
        let area = kernel * kernel;
        if w.rows() == 0 || (in_channels * area) % w.rows() != 0 {
            return Err(HingeError::Format(format!(
                "{name}.W has {} rows, incompatible with {in_channels} inputs",
                w.rows()
            )));
        }
        let groups = in_channels * area / w.rows();
        let meta = ConvMeta::new(in_channels, out, kernel, stride, kernel / 2, groups, size)
            .map_err(|e| HingeError::Format(format!("{name}: {e}")))?;
        Conv::new(meta, w, a).map_err(|e| HingeError::Format(format!("{name}: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::model::InputShape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn arch() -> ArchSpec {
        ArchSpec {
            input: InputShape { channels: 2, height: 6, width: 6 },
            blocks: vec![
                BlockConfig::Plain { out_channels: 4, kernel: 3, stride: 1 },
                BlockConfig::BasicBlock { out_channels: 4, stride: 1 },
                BlockConfig::BasicBlock { out_channels: 6, stride: 2 },
                BlockConfig::GroupedBottleneck { width: 4, out_channels: 6, cardinality: 2, stride: 1 },
            ],
            classes: 3,
        }
    }

    fn round_f32(net: &mut Network) {
        for p in net.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    #[test]
    fn round_trip() {
        let mut net = Network::build(&arch(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        round_f32(&mut net);
        let bytes = net.to_checkpoint().unwrap().to_bytes();
        let back = Network::from_checkpoint(&arch(), &Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn shapes_come_from_tensors() {
        let mut net = Network::build(&arch(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        // decompose b1.conv1 to rank 2
        let conv = net.conv_mut(1, "conv1").unwrap();
        let w = conv.weight.select_columns(&[0, 1]);
        conv.weight = w;
        conv.hinge = Some(DenseMatrix::zeros(2, 4));
        round_f32(&mut net);
        let back = Network::from_checkpoint(&arch(), &net.to_checkpoint().unwrap()).unwrap();
        assert_eq!(back.conv(1, "conv1").unwrap().hinge.as_ref().unwrap().shape(), (2, 4));
        assert_eq!(back, net);
    }

    #[test]
    fn rejects_extra_or_missing_tensors() {
        let net = Network::build(&arch(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut ckpt = net.to_checkpoint().unwrap();
        ckpt.push_matrix("stray", &DenseMatrix::zeros(1, 1)).unwrap();
        assert!(Network::from_checkpoint(&arch(), &ckpt).is_err());
        let mut short = arch();
        short.blocks.pop();
        assert!(Network::from_checkpoint(&short, &net.to_checkpoint().unwrap()).is_err());
    }
}
