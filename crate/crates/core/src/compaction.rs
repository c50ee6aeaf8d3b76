//! Turns a masked hinged model into a smaller plain network.
//!
//! Column sites are merged into one filter `W·A` with dead outputs dropped;
//! row sites become the pair `(W[:,K], A[K,:])` over the alive rows `K`, or a
//! merged filter when the pair would not save FLOPs. Removed output channels
//! are propagated into the input rows of every consumer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cost::{network_report, plan, ConvPlan, CostReport, LayerMode};
use crate::error::{HingeError, Result};
use crate::hinge::{HingedLayer, HingedModel};
use crate::net::conv::{Conv, ConvMeta, FeatureMap};
use crate::net::model::{Block, Linear, Network};
use crate::tensor::{Checkpoint, DenseMatrix, SchemeKind};

#[derive(Debug, Clone, PartialEq)]
pub struct CompactModel {
    pub net: Network,
    /// Mode of every conv, in network order.
    pub modes: Vec<(String, LayerMode)>,
    pub report: CostReport,
}

fn alive(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter(|(_, &a)| a).map(|(i, _)| i).collect()
}

/// Merged filter `W·A` restricted to the alive columns, plus those column
/// indices.
pub fn compact_prune(layer: &HingedLayer) -> Result<(DenseMatrix, Vec<usize>)> {
    if layer.scheme.kind() != SchemeKind::Columns {
        return Err(HingeError::legality(format!("{}: pruning needs a column scheme", layer.name)));
    }
    let keep = alive(&layer.mask);
    Ok((layer.product().select_columns(&keep), keep))
}

/// `(W[:,K], A[K,:])` for the alive rows `K` of `A`.
pub fn compact_decompose(layer: &HingedLayer) -> Result<(DenseMatrix, DenseMatrix)> {
    if layer.scheme.kind() != SchemeKind::Rows {
        return Err(HingeError::legality(format!("{}: decomposition needs a row scheme", layer.name)));
    }
    let keep = alive(&layer.mask);
    Ok((layer.w.select_columns(&keep), layer.a.select_rows(&keep)))
}

fn input_rows(meta: &ConvMeta, plan: &ConvPlan) -> Vec<usize> {
    if meta.groups > 1 {
        // grouped filters index rows within one group; whole groups go at once
        return (0..meta.patch_len()).collect();
    }
    let kk = meta.kernel_area();
    plan.in_keep.iter().flat_map(|&c| c * kk..(c + 1) * kk).collect()
}

fn compact_conv(conv: &Conv, plan: &ConvPlan) -> Result<Conv> {
    let m = &conv.meta;
    let rows = input_rows(m, plan);
    let (weight, hinge) = match (&plan.rank_keep, &conv.hinge) {
        (Some(k), Some(a)) => (conv.weight.select_rows(&rows).select_columns(k), Some(a.select_rows(k))),
        (Some(_), None) => return Err(HingeError::Structural(format!("{}: decomposition without hinge", plan.name))),
        (None, _) => (conv.effective_weight().select_rows(&rows).select_columns(&plan.out_keep), None),
    };
    let meta = ConvMeta::new(
        plan.in_keep.len(),
        plan.out_keep.len(),
        m.kernel.0,
        m.stride,
        m.padding,
        plan.groups(),
        m.in_size,
    )?;
    Conv::new(meta, weight, hinge)
}

/// Compacts `model` under its current masks. The masks must already have
/// been applied to the parameters.
pub fn compact(model: &HingedModel) -> Result<CompactModel> {
    for (s, site) in model.sites.iter().enumerate() {
        let norms = model.site_norms(s)?;
        if norms.iter().zip(&site.mask).any(|(&n, &a)| !a && n != 0.0) {
            return Err(HingeError::Structural(format!("{}: masked groups are not zero", site.name)));
        }
    }
    let p = plan(model, &model.masks())?;
    let mut blocks = Vec::with_capacity(model.net.blocks.len());
    let mut modes = Vec::new();
    for (block, plans) in model.net.blocks.iter().zip(&p.convs) {
        let convs = block.convs();
        if convs.len() != plans.len() {
            return Err(HingeError::Structural("plan does not match block".into()));
        }
        let mut out: Vec<Conv> = Vec::with_capacity(convs.len());
        for ((_, conv), cp) in convs.iter().zip(plans) {
            out.push(compact_conv(conv, cp)?);
            modes.push((cp.name.clone(), cp.mode));
        }
        let mut it = out.into_iter();
        let mut next = || it.next().expect("one compact conv per original conv");
        let compact_block = match block {
            Block::Plain { .. } => Block::Plain { conv: next() },
            Block::Basic { shortcut, .. } => {
                let conv1 = next();
                let conv2 = next();
                Block::Basic { conv1, conv2, shortcut: shortcut.as_ref().map(|_| next()) }
            }
            Block::Bottleneck { shortcut, .. } => {
                let lead = next();
                let mid = next();
                let end = next();
                Block::Bottleneck { lead, mid, end, shortcut: shortcut.as_ref().map(|_| next()) }
            }
        };
        if block.has_skip() && compact_block.out_channels() != block.out_channels() {
            return Err(HingeError::legality("a skip-connected block output was pruned"));
        }
        blocks.push(compact_block);
    }
    let head = Linear {
        weight: model.net.head.weight.select_rows(&p.head_in_keep),
        bias: model.net.head.bias.clone(),
    };
    let net = Network { input: model.net.input, blocks, head };
    let mode_list: Vec<LayerMode> = modes.iter().map(|(_, m)| *m).collect();
    let report = network_report(&net, &model.net, &mode_list)?;
    Ok(CompactModel { net, modes, report })
}

/// Largest elementwise logit difference over `n_inputs` seeded random
/// inputs.
pub fn verify_equivalence(a: &Network, b: &Network, n_inputs: usize, seed: u64) -> Result<f64> {
    if a.input != b.input || a.classes() != b.classes() {
        return Err(HingeError::Structural("networks differ in input or output shape".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = a.input;
    let mut worst: f64 = 0.0;
    let mut left = n_inputs;
    while left > 0 {
        let batch = left.min(8);
        left -= batch;
        let x = DenseMatrix::random_normal(batch * shape.height * shape.width, shape.channels, 1.0, &mut rng);
        let fm = FeatureMap::new(batch, shape.height, shape.width, x)?;
        let la = a.logits(&fm)?;
        let lb = b.logits(&fm)?;
        if la.shape() != lb.shape() {
            return Err(HingeError::Structural("logit shapes diverge".into()));
        }
        worst = worst.max(la.sub(&lb)?.max_abs());
    }
    Ok(worst)
}

impl CompactModel {
    /// Parameters in canonical order, each conv followed by its mode byte.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new();
        let infos = self.net.param_infos();
        self.net.write_tensors(&mut ckpt, |info, ck| {
            let idx = infos.iter().position(|p| p.name == info.name).expect("info comes from this network");
            let last_of_conv = infos.get(idx + 1).map_or(true, |next| {
                next.block != info.block || next.conv != info.conv
            });
            if let (Some(b), Some(c), true) = (info.block, info.conv, last_of_conv) {
                let name = Network::conv_name(b, c);
                let mode = self.modes.iter().find(|(n, _)| *n == name).map_or(LayerMode::Untouched, |(_, m)| *m);
                ck.push_byte(format!("{name}.mode"), mode.byte())?;
            }
            Ok(())
        })?;
        Ok(ckpt)
    }
}
