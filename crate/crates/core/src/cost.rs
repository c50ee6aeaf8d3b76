//! FLOP and parameter counting.
//!
//! Convention: a multiply-accumulate is 2 FLOPs; biases and activations are
//! not counted. Ratios are taken against the original network without hinge
//! factors. A row-scheme layer is kept as two convolutions only when that is
//! cheaper than the merged filter, so an uncompressed hinged model has
//! `γ = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{HingeError, Result};
use crate::hinge::{HingedModel, Position};
use crate::net::conv::ConvMeta;
use crate::net::model::{Block, Network};
use crate::tensor::SchemeKind;

pub const FLOP_CONVENTION: &str = "2 FLOPs per multiply-accumulate; biases and activations ignored";

/// `2 · (in/groups) · w · h · out · H_out · W_out`.
pub fn conv_flops(meta: &ConvMeta, in_alive: usize, out_alive: usize) -> u64 {
    conv_flops_grouped(meta, in_alive, out_alive, meta.groups)
}

fn conv_flops_grouped(meta: &ConvMeta, in_alive: usize, out_alive: usize, groups: usize) -> u64 {
    2 * (in_alive / groups.max(1)) as u64 * meta.kernel_area() as u64 * out_alive as u64 * meta.out_positions() as u64
}

/// True when a `c·w·h → rank` conv plus a `rank → n` pointwise conv is
/// cheaper than the single `c·w·h → n` conv.
pub fn decompose_saves(meta: &ConvMeta, rank: usize) -> bool {
    let patch = meta.patch_len() as u64;
    let n = meta.out_channels as u64;
    (rank as u64) * (patch + n) < patch * n
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerMode {
    Untouched,
    /// Output (or, for bottleneck ends, input) channels removed; one filter.
    Prune,
    /// Two convolutions over the alive rank.
    Decompose,
    /// Row scheme whose reduced pair would not save FLOPs, stored merged.
    Merged,
}

impl LayerMode {
    /// Mode byte stored in compact checkpoints. Merged layers are a single
    /// filter, like pruned ones.
    pub fn byte(self) -> u8 {
        match self {
            LayerMode::Untouched => 0,
            LayerMode::Prune | LayerMode::Merged => 1,
            LayerMode::Decompose => 2,
        }
    }
}

/// Structure of one convolution after compaction, in original channel
/// indices.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvPlan {
    pub name: String,
    pub meta: ConvMeta,
    pub mode: LayerMode,
    pub in_keep: Vec<usize>,
    pub out_keep: Vec<usize>,
    /// Alive rows of the hinge for a two-layer decomposition.
    pub rank_keep: Option<Vec<usize>>,
    /// Cardinal groups kept (grouped middle convolutions only).
    pub group_keep: Option<Vec<usize>>,
}

impl ConvPlan {
    pub fn groups(&self) -> usize {
        self.group_keep.as_ref().map_or(1, |g| g.len())
    }

    pub fn flops(&self) -> u64 {
        match &self.rank_keep {
            Some(k) => {
                conv_flops_grouped(&self.meta, self.in_keep.len(), k.len(), 1)
                    + 2 * (k.len() * self.out_keep.len() * self.meta.out_positions()) as u64
            }
            None => conv_flops_grouped(&self.meta, self.in_keep.len(), self.out_keep.len(), self.groups()),
        }
    }

    pub fn params(&self) -> u64 {
        let kk = self.meta.kernel_area();
        match &self.rank_keep {
            Some(k) => (self.in_keep.len() * kk * k.len() + k.len() * self.out_keep.len()) as u64,
            None => ((self.in_keep.len() / self.groups()) * kk * self.out_keep.len()) as u64,
        }
    }
}

/// Compaction plan of a whole hinged model under given site masks.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelPlan {
    /// Per block, per conv in [`Block::convs`] order.
    pub convs: Vec<Vec<ConvPlan>>,
    pub head_in_keep: Vec<usize>,
    /// Classifier input width of the original network.
    pub head_features: usize,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub mode: LayerMode,
    pub alive_in: usize,
    pub alive_out: usize,
    /// Alive rank for decomposed layers.
    pub rank: Option<usize>,
    pub flops: u64,
    pub flops_original: u64,
    pub params: u64,
    pub params_original: u64,
    /// `flops / flops_original` for this layer.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub flops_original: u64,
    pub flops_compressed: u64,
    pub params_original: u64,
    pub params_compressed: u64,
    pub gamma: f64,
    pub per_layer: Vec<LayerCost>,
    pub flop_convention: String,
}

fn all(n: usize) -> Vec<usize> {
    (0..n).collect()
}

fn alive_indices(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter(|(_, &a)| a).map(|(i, _)| i).collect()
}

fn rows_plan(name: String, meta: ConvMeta, in_keep: Vec<usize>, alive: &[bool]) -> ConvPlan {
    let k = alive_indices(alive);
    let mut effective = meta;
    effective.in_channels = in_keep.len();
    let (mode, rank_keep) =
        if decompose_saves(&effective, k.len()) { (LayerMode::Decompose, Some(k)) } else { (LayerMode::Merged, None) };
    ConvPlan { name, meta, mode, in_keep, out_keep: all(meta.out_channels), rank_keep, group_keep: None }
}

fn untouched(name: String, meta: ConvMeta, in_keep: Vec<usize>) -> ConvPlan {
    ConvPlan {
        name,
        meta,
        mode: LayerMode::Untouched,
        in_keep,
        out_keep: all(meta.out_channels),
        rank_keep: None,
        group_keep: None,
    }
}

/// Channel bookkeeping for `masks` (one per site). Fails if a pruned channel
/// would reach an identity skip connection.
pub fn plan(model: &HingedModel, masks: &[Vec<bool>]) -> Result<ModelPlan> {
    if masks.len() != model.sites.len() {
        return Err(HingeError::dim(format!("{} masks for {} sites", masks.len(), model.sites.len())));
    }
    let site_mask = |name: &str| -> Option<(&[bool], Position, SchemeKind)> {
        model
            .sites
            .iter()
            .position(|s| s.name == name)
            .map(|i| (masks[i].as_slice(), model.sites[i].position, model.sites[i].scheme.kind()))
    };
    let conv_plan = |n: String, meta: ConvMeta, in_keep: Vec<usize>| match site_mask(&n) {
        Some((m, _, SchemeKind::Columns)) => ConvPlan {
            name: n,
            meta,
            mode: LayerMode::Prune,
            in_keep,
            out_keep: alive_indices(m),
            rank_keep: None,
            group_keep: None,
        },
        Some((m, _, _)) => rows_plan(n, meta, in_keep, m),
        None => untouched(n, meta, in_keep),
    };
    let net = &model.net;
    let mut cur: Vec<usize> = all(net.input.channels);
    let mut convs = Vec::with_capacity(net.blocks.len());
    for (bi, block) in net.blocks.iter().enumerate() {
        let name = |c: &str| Network::conv_name(bi, c);
        let block_in = cur.clone();
        if block.has_identity_skip() && block_in.len() != block.out_channels() {
            return Err(HingeError::legality(format!("block {bi}: pruned channels reach an identity skip")));
        }
        let mut plans = Vec::new();
        match block {
            Block::Plain { conv } => {
                let p = conv_plan(name("conv"), conv.meta, block_in);
                cur = p.out_keep.clone();
                plans.push(p);
            }
            Block::Basic { conv1, conv2, shortcut } => {
                let p1 = conv_plan(name("conv1"), conv1.meta, block_in.clone());
                let p2 = conv_plan(name("conv2"), conv2.meta, p1.out_keep.clone());
                plans.push(p1);
                plans.push(p2);
                if let Some(s) = shortcut {
                    plans.push(untouched(name("shortcut"), s.meta, block_in));
                }
                cur = all(block.out_channels());
            }
            Block::Bottleneck { lead, mid, end, shortcut } => {
                let width = lead.meta.out_channels;
                let (lead_keep, mid_out, group_keep) = if let Some((m, Position::Grouped { cardinality }, _)) =
                    site_mask(&format!("b{bi}.cardinal"))
                {
                    let w = width / cardinality;
                    let gk = alive_indices(m);
                    let ch: Vec<usize> = gk.iter().flat_map(|&g| g * w..(g + 1) * w).collect();
                    (ch.clone(), ch, Some(gk))
                } else {
                    let lk = site_mask(&name("lead")).map_or_else(|| all(width), |(m, _, _)| alive_indices(m));
                    let ek = site_mask(&name("end")).map_or_else(|| all(width), |(m, _, _)| alive_indices(m));
                    (lk, ek, None)
                };
                let pruned = |n: String, meta: ConvMeta, in_keep: Vec<usize>, out_keep: Vec<usize>, gk: Option<Vec<usize>>| {
                    let changed = in_keep.len() != meta.in_channels || out_keep.len() != meta.out_channels;
                    ConvPlan {
                        name: n,
                        meta,
                        mode: if changed { LayerMode::Prune } else { LayerMode::Untouched },
                        in_keep,
                        out_keep,
                        rank_keep: None,
                        group_keep: gk,
                    }
                };
                plans.push(pruned(name("lead"), lead.meta, block_in.clone(), lead_keep.clone(), None));
                let mid_groups = group_keep.clone().or_else(|| (mid.meta.groups > 1).then(|| all(mid.meta.groups)));
                plans.push(pruned(name("mid"), mid.meta, lead_keep, mid_out.clone(), mid_groups));
                plans.push(pruned(name("end"), end.meta, mid_out, all(end.meta.out_channels), None));
                if let Some(s) = shortcut {
                    plans.push(untouched(name("shortcut"), s.meta, block_in));
                }
                cur = all(block.out_channels());
            }
        }
        convs.push(plans);
    }
    Ok(ModelPlan { convs, head_in_keep: cur, head_features: net.feature_channels(), classes: net.classes() })
}

/// FLOPs and parameters of the original network, hinge factors ignored.
fn original_conv(meta: &ConvMeta) -> (u64, u64) {
    (conv_flops(meta, meta.in_channels, meta.out_channels), (meta.patch_len() * meta.out_channels) as u64)
}

fn head_cost(features: usize, classes: usize) -> (u64, u64) {
    (2 * (features * classes) as u64, (features * classes + classes) as u64)
}

fn finish(per_layer: Vec<LayerCost>) -> CostReport {
    let flops_original = per_layer.iter().map(|l| l.flops_original).sum::<u64>();
    let flops_compressed = per_layer.iter().map(|l| l.flops).sum::<u64>();
    CostReport {
        flops_original,
        flops_compressed,
        params_original: per_layer.iter().map(|l| l.params_original).sum(),
        params_compressed: per_layer.iter().map(|l| l.params).sum(),
        gamma: flops_compressed as f64 / flops_original as f64,
        per_layer,
        flop_convention: FLOP_CONVENTION.to_string(),
    }
}

fn layer_cost(name: String, mode: LayerMode, alive: (usize, usize), rank: Option<usize>, now: (u64, u64), orig: (u64, u64)) -> LayerCost {
    LayerCost {
        name,
        mode,
        alive_in: alive.0,
        alive_out: alive.1,
        rank,
        flops: now.0,
        flops_original: orig.0,
        params: now.1,
        params_original: orig.1,
        ratio: now.0 as f64 / orig.0 as f64,
    }
}

impl ModelPlan {
    pub fn report(&self) -> CostReport {
        let mut per_layer = Vec::new();
        for p in self.convs.iter().flatten() {
            per_layer.push(layer_cost(
                p.name.clone(),
                p.mode,
                (p.in_keep.len(), p.out_keep.len()),
                p.rank_keep.as_ref().map(|k| k.len()),
                (p.flops(), p.params()),
                original_conv(&p.meta),
            ));
        }
        per_layer.push(layer_cost(
            "head".into(),
            LayerMode::Untouched,
            (self.head_in_keep.len(), self.classes),
            None,
            head_cost(self.head_in_keep.len(), self.classes),
            head_cost(self.head_features, self.classes),
        ));
        finish(per_layer)
    }
}

/// γ after hypothetically nullifying every group below `threshold`; the
/// model is not modified.
pub fn compression_ratio(model: &HingedModel, threshold: f64) -> Result<f64> {
    Ok(plan(model, &model.hypothetical_masks(threshold)?)?.report().gamma)
}

pub fn cost_at(model: &HingedModel, threshold: f64) -> Result<CostReport> {
    Ok(plan(model, &model.hypothetical_masks(threshold)?)?.report())
}

/// Cost of a plain (possibly compacted) network by walking its stored
/// tensors. `original` supplies the reference shapes and `modes` the label
/// of each conv, both in network order.
pub fn network_report(net: &Network, original: &Network, modes: &[LayerMode]) -> Result<CostReport> {
    let convs: Vec<_> = net.blocks.iter().enumerate().flat_map(|(bi, b)| b.convs().into_iter().map(move |(n, c)| (Network::conv_name(bi, n), c))).collect();
    let orig: Vec<_> = original.blocks.iter().flat_map(|b| b.convs().into_iter().map(|(_, c)| c)).collect();
    if convs.len() != orig.len() || modes.len() != convs.len() {
        return Err(HingeError::Structural("network and reference have different layers".into()));
    }
    let mut per_layer = Vec::with_capacity(convs.len() + 1);
    for (((name, c), o), &mode) in convs.iter().zip(&orig).zip(modes) {
        let m = &c.meta;
        let hw = m.out_positions() as u64;
        let (flops, params, rank) = match &c.hinge {
            Some(a) => (
                2 * hw * (c.weight.rows() * c.weight.cols() + a.rows() * a.cols()) as u64,
                (c.weight.rows() * c.weight.cols() + a.rows() * a.cols()) as u64,
                Some(a.rows()),
            ),
            // a grouped filter applies each column to one group's patch only
            None => (
                2 * hw * (c.weight.rows() * c.weight.cols()) as u64,
                (c.weight.rows() * c.weight.cols()) as u64,
                None,
            ),
        };
        let o = &o.meta;
        let orig_cost = (2 * o.out_positions() as u64 * (o.patch_len() * o.out_channels) as u64, (o.patch_len() * o.out_channels) as u64);
        per_layer.push(layer_cost(name.clone(), mode, (m.in_channels, m.out_channels), rank, (flops, params), orig_cost));
    }
    let h = &net.head.weight;
    let now = (2 * (h.rows() * h.cols()) as u64, (h.rows() * h.cols() + net.head.bias.cols()) as u64);
    let ho = &original.head.weight;
    let before = (2 * (ho.rows() * ho.cols()) as u64, (ho.rows() * ho.cols() + original.head.bias.cols()) as u64);
    per_layer.push(layer_cost("head".into(), LayerMode::Untouched, (h.rows(), h.cols()), None, now, before));
    Ok(finish(per_layer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hinge::HingeOptions;
    use crate::net::model::{ArchSpec, BlockConfig, InputShape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn flops_convention() {
        let m = ConvMeta::new(16, 32, 3, 1, 1, 1, (8, 8)).unwrap();
        assert_eq!(conv_flops(&m, 16, 32), 589_824);
        assert_eq!(conv_flops(&m, 16, 16), 589_824 / 2);
        let p = ConvMeta::new(4, 4, 1, 1, 0, 1, (1, 1)).unwrap();
        assert_eq!(conv_flops(&p, 4, 4), 32);
    }

    #[test]
    fn decompose_boundary() {
        // c·w·h = 144, n = 32: break-even rank 144·32/176 ≈ 26.18
        let m = ConvMeta::new(16, 32, 3, 1, 1, 1, (8, 8)).unwrap();
        assert!(decompose_saves(&m, 16));
        assert!(decompose_saves(&m, 26));
        assert!(!decompose_saves(&m, 27));
        assert!(!decompose_saves(&m, 32));
    }

    fn model() -> HingedModel {
        let arch = ArchSpec::toy_residual(InputShape { channels: 3, height: 8, width: 8 }, 4);
        let net = Network::build(&arch, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        HingedModel::attach(net, &HingeOptions::default()).unwrap()
    }

    #[test]
    fn untouched_model_has_unit_ratio() {
        let m = model();
        assert_eq!(compression_ratio(&m, 0.0).unwrap(), 1.0);
        let r = cost_at(&m, 0.0).unwrap();
        assert_eq!(r.flops_compressed, r.per_layer.iter().map(|l| l.flops).sum::<u64>());
        assert_eq!(r.params_compressed, r.params_original);
    }

    #[test]
    fn floor_and_purity() {
        let m = model();
        let before = m.clone();
        let floor = compression_ratio(&m, f64::INFINITY).unwrap();
        assert!(floor > 0.0 && floor < 0.2, "floor {floor}");
        assert_eq!(m, before);
    }

    #[test]
    fn staircase_is_monotone() {
        let m = model();
        let mut norms: Vec<f64> = m.all_norms().unwrap().concat();
        norms.sort_by(f64::total_cmp);
        norms.dedup();
        let mut prev = compression_ratio(&m, 0.0).unwrap();
        for &t in &norms {
            let g = compression_ratio(&m, t + 1e-12).unwrap();
            assert!(g <= prev);
            prev = g;
        }
    }

    #[test]
    fn mixed_blocks_plan() {
        let arch = ArchSpec {
            input: InputShape { channels: 2, height: 6, width: 6 },
            blocks: vec![
                BlockConfig::Plain { out_channels: 4, kernel: 3, stride: 1 },
                BlockConfig::Bottleneck { width: 4, out_channels: 6, stride: 2 },
                BlockConfig::GroupedBottleneck { width: 4, out_channels: 6, cardinality: 2, stride: 1 },
            ],
            classes: 3,
        };
        let net = Network::build(&arch, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let m = HingedModel::attach(net, &HingeOptions::default()).unwrap();
        let mut masks = m.masks();
        masks[0][1] = false; // stem column
        masks[1][0] = false; // lead column
        masks[3][1] = false; // cardinal group
        let p = plan(&m, &masks).unwrap();
        assert_eq!(p.convs[0][0].out_keep, vec![0, 2, 3]);
        assert_eq!(p.convs[1][0].in_keep, vec![0, 2, 3]);
        assert_eq!(p.convs[1][1].in_keep, vec![1, 2, 3]);
        assert_eq!(p.convs[1][3].in_keep, vec![0, 2, 3]);
        assert_eq!(p.convs[2][1].group_keep, Some(vec![0]));
        assert_eq!(p.convs[2][2].in_keep, vec![0, 1]);
        let r = p.report();
        assert!(r.gamma < 1.0);
    }
}
