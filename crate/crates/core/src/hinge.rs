//! Sparsity-inducing matrices attached to convolutions, their group schemes
//! and nullification masks.
//!
//! Plain and basic-block convolutions get a new square `1×1` factor `A` after
//! the filter. Bottleneck blocks already have `1×1` convolutions on both sides
//! of the `3×3`, so their leading and ending filters play the role of `A`
//! directly; in a grouped bottleneck the two are joined into one site whose
//! groups are the cardinal groups of the middle convolution.

use serde::{Deserialize, Serialize};

use crate::error::{HingeError, Result};
use crate::net::conv::ConvMeta;
use crate::net::model::{Block, Network};
use crate::tensor::{svd, Checkpoint, DenseMatrix, GroupScheme, SchemeKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HingeInit {
    Identity,
    Svd,
}

/// Where a sparsity site sits, which decides the legal group schemes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Position {
    /// A stand-alone convolution. Its outputs may only be pruned when they do
    /// not feed an identity skip connection.
    Plain { feeds_identity_skip: bool },
    FirstInBasicBlock,
    SecondInBasicBlock,
    LeadingOneByOne,
    EndingOneByOne,
    Grouped { cardinality: usize },
}

/// `(W, A)` with `W·A` equal to the given filter.
///
/// `Svd` stores `U` and `S·Vᵀ`, so every column of the new `W` has unit norm.
/// That needs at least as many filter rows as outputs.
pub fn attach_matrices(w: &DenseMatrix, init: HingeInit) -> Result<(DenseMatrix, DenseMatrix)> {
    match init {
        HingeInit::Identity => Ok((w.clone(), DenseMatrix::identity(w.cols()))),
        HingeInit::Svd => {
            if w.rows() < w.cols() {
                return Err(HingeError::legality(format!(
                    "svd init needs c·w·h >= n, filter is {}x{}",
                    w.rows(),
                    w.cols()
                )));
            }
            let s = svd(w)?;
            let mut a = s.vt.clone();
            for (i, &sv) in s.singular_values.iter().enumerate() {
                a.row_mut(i).iter_mut().for_each(|v| *v *= sv);
            }
            Ok((s.u, a))
        }
    }
}

/// Legal scheme for `position` over the matrices in `shapes`.
///
/// `preference` picks between columns and rows where both are allowed;
/// `None` takes the default (rows for the first basic-block matrix, columns
/// for a plain layer that may be pruned).
pub fn make_scheme(
    shapes: &[(usize, usize)],
    position: Position,
    preference: Option<SchemeKind>,
) -> Result<GroupScheme> {
    let single = || -> Result<(usize, usize)> {
        match shapes {
            [s] => Ok(*s),
            _ => Err(HingeError::dim(format!("{:?} takes one matrix, got {}", position, shapes.len()))),
        }
    };
    let build = |kind: SchemeKind, (r, c): (usize, usize)| -> Result<GroupScheme> {
        match kind {
            SchemeKind::Columns => Ok(GroupScheme::columns(r, c)),
            SchemeKind::Rows => Ok(GroupScheme::rows(r, c)),
            SchemeKind::ConcatGroups => Err(HingeError::legality("concat groups need a grouped bottleneck")),
        }
    };
    let forbid = |kind: SchemeKind, why: &str| -> Result<()> {
        if preference == Some(kind) {
            Err(HingeError::legality(format!("{kind:?} groups not allowed: {why}")))
        } else {
            Ok(())
        }
    };
    match position {
        Position::Plain { feeds_identity_skip } => {
            if feeds_identity_skip {
                forbid(SchemeKind::Columns, "outputs feed an identity skip connection")?;
            }
            let default = if feeds_identity_skip { SchemeKind::Rows } else { SchemeKind::Columns };
            build(preference.unwrap_or(default), single()?)
        }
        Position::FirstInBasicBlock => build(preference.unwrap_or(SchemeKind::Rows), single()?),
        Position::SecondInBasicBlock => {
            forbid(SchemeKind::Columns, "the block output feeds the skip connection")?;
            build(SchemeKind::Rows, single()?)
        }
        Position::LeadingOneByOne => {
            forbid(SchemeKind::Rows, "rows select the block input")?;
            build(SchemeKind::Columns, single()?)
        }
        Position::EndingOneByOne => {
            forbid(SchemeKind::Columns, "columns select the block output")?;
            build(SchemeKind::Rows, single()?)
        }
        Position::Grouped { cardinality } => match shapes {
            [lead, end] => GroupScheme::concat(*lead, *end, cardinality),
            _ => Err(HingeError::dim("grouped sites span the leading and ending matrices")),
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupStats {
    /// Norm of every group; masked groups read 0.
    pub norms: Vec<f64>,
    /// Mean over alive groups.
    pub mean_norm: f64,
    pub alive_count: usize,
}

pub fn group_stats(norms: &[f64], mask: &[bool]) -> GroupStats {
    let alive: Vec<f64> = norms.iter().zip(mask).filter(|(_, &m)| m).map(|(&n, _)| n).collect();
    let mean_norm = if alive.is_empty() { 0.0 } else { alive.iter().sum::<f64>() / alive.len() as f64 };
    GroupStats { norms: norms.to_vec(), mean_norm, alive_count: alive.len() }
}

/// Groups that survive `threshold`: alive, with norm `>= threshold`. The
/// largest-norm alive group always survives so no layer disappears.
pub fn survivors(norms: &[f64], mask: &[bool], threshold: f64) -> Vec<bool> {
    let mut out: Vec<bool> = norms.iter().zip(mask).map(|(&n, &m)| m && n >= threshold).collect();
    if !out.iter().any(|&a| a) {
        let best = norms
            .iter()
            .zip(mask)
            .enumerate()
            .filter(|(_, (_, &m))| m)
            .fold(None, |best: Option<(usize, f64)>, (i, (&n, _))| match best {
                Some((_, bn)) if bn >= n => best,
                _ => Some((i, n)),
            });
        // with no alive group at all fall back to the largest norm overall
        let idx = best.map(|(i, _)| i).unwrap_or_else(|| {
            norms.iter().enumerate().fold(0, |b, (i, &n)| if n > norms[b] { i } else { b })
        });
        if !out.is_empty() {
            out[idx] = true;
        }
    }
    out
}

/// A single convolution with its sparsity-inducing matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct HingedLayer {
    pub name: String,
    pub w: DenseMatrix,
    pub a: DenseMatrix,
    pub scheme: GroupScheme,
    pub mask: Vec<bool>,
    pub meta: ConvMeta,
}

impl HingedLayer {
    /// Attaches `A` with a column scheme; use [`HingedLayer::set_position`]
    /// to pick the scheme for the layer's place in the network.
    pub fn attach(name: impl Into<String>, w: &DenseMatrix, meta: ConvMeta, init: HingeInit) -> Result<Self> {
        if w.rows() != meta.patch_len() || w.cols() != meta.out_channels || meta.groups != 1 {
            return Err(HingeError::dim(format!(
                "filter {}x{} does not match conv with c·w·h = {}, n = {}, groups {}",
                w.rows(),
                w.cols(),
                meta.patch_len(),
                meta.out_channels,
                meta.groups
            )));
        }
        let (w, a) = attach_matrices(w, init)?;
        let n = a.cols();
        Ok(HingedLayer { name: name.into(), w, a, scheme: GroupScheme::columns(n, n), mask: vec![true; n], meta })
    }

    pub fn set_position(&mut self, position: Position, preference: Option<SchemeKind>) -> Result<()> {
        self.scheme = make_scheme(&[self.a.shape()], position, preference)?;
        self.mask = vec![true; self.scheme.group_count()];
        Ok(())
    }

    pub fn norms(&self) -> Result<Vec<f64>> {
        self.scheme.norms_of(&[&self.a])
    }

    pub fn stats(&self) -> Result<GroupStats> {
        Ok(group_stats(&self.norms()?, &self.mask))
    }

    /// Zeroes every masked group of `A`.
    pub fn apply_mask(&mut self) -> Result<()> {
        self.scheme.zero_dead(&mut [&mut self.a], &self.mask)
    }

    /// Permanently masks groups with norm below `threshold`.
    pub fn nullify_below(&mut self, threshold: f64) -> Result<()> {
        self.mask = survivors(&self.norms()?, &self.mask, threshold);
        self.apply_mask()
    }

    pub fn product(&self) -> DenseMatrix {
        crate::tensor::matmul(&self.w, &self.a).expect("hinged layer shapes are checked on construction")
    }
}

/// One group-sparsity site of a hinged model.
#[derive(Debug, Clone, PartialEq)]
pub struct Site {
    pub name: String,
    pub block: usize,
    pub position: Position,
    /// Indices into [`Network::params`], ascending.
    pub members: Vec<usize>,
    pub scheme: GroupScheme,
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HingeOptions {
    pub init: HingeInit,
    /// Scheme of the first matrix in each basic block.
    pub first_in_basic_block: SchemeKind,
}

impl Default for HingeOptions {
    fn default() -> Self {
        HingeOptions { init: HingeInit::Svd, first_in_basic_block: SchemeKind::Rows }
    }
}

/// A network with sparsity sites and their masks.
#[derive(Debug, Clone, PartialEq)]
pub struct HingedModel {
    pub net: Network,
    pub sites: Vec<Site>,
}

/// Picks the members of `params` at the ascending indices `idx`.
fn pick_mut<'a>(params: Vec<&'a mut DenseMatrix>, idx: &[usize]) -> Vec<&'a mut DenseMatrix> {
    params
        .into_iter()
        .enumerate()
        .filter(|(i, _)| idx.contains(i))
        .map(|(_, p)| p)
        .collect()
}

impl HingedModel {
    /// Adds hinges to every plain and basic-block convolution and defines
    /// the sites. Shortcut projections and the classifier are left alone.
    ///
    /// SVD init falls back to identity on layers with fewer filter rows than
    /// outputs.
    pub fn attach(mut net: Network, opts: &HingeOptions) -> Result<Self> {
        if net.blocks.iter().any(|b| b.convs().iter().any(|(_, c)| c.hinge.is_some())) {
            return Err(HingeError::Structural("network already carries hinge factors".into()));
        }
        let n_blocks = net.blocks.len();
        for bi in 0..n_blocks {
            let hinged: &[&str] = match &net.blocks[bi] {
                Block::Plain { .. } => &["conv"],
                Block::Basic { .. } => &["conv1", "conv2"],
                Block::Bottleneck { .. } => &[],
            };
            for &name in hinged {
                let conv = net.conv_mut(bi, name).expect("conv listed for its block kind");
                let init = if conv.weight.rows() >= conv.weight.cols() { opts.init } else { HingeInit::Identity };
                let (w, a) = attach_matrices(&conv.weight, init)?;
                conv.weight = w;
                conv.hinge = Some(a);
            }
        }
        let sites = Self::define_sites(&net, opts, None)?;
        Ok(HingedModel { net, sites })
    }

    /// Sites for a network that already carries its hinges. `masks` restores
    /// saved masks by site name.
    fn define_sites(net: &Network, opts: &HingeOptions, masks: Option<&Checkpoint>) -> Result<Vec<Site>> {
        let infos = net.param_infos();
        let index = |bi: usize, conv: &str, hinge: bool| -> Result<usize> {
            let suffix = if hinge { "A" } else { "W" };
            let name = format!("{}.{suffix}", Network::conv_name(bi, conv));
            infos
                .iter()
                .position(|p| p.name == name)
                .ok_or_else(|| HingeError::Structural(format!("missing parameter {name}")))
        };
        let params = net.params();
        let mut sites = Vec::new();
        for (bi, block) in net.blocks.iter().enumerate() {
            let next_identity = net.blocks.get(bi + 1).is_some_and(|b| b.has_identity_skip());
            let mut specs: Vec<(String, Position, Vec<usize>, Option<SchemeKind>)> = Vec::new();
            match block {
                Block::Plain { .. } => specs.push((
                    Network::conv_name(bi, "conv"),
                    Position::Plain { feeds_identity_skip: next_identity },
                    vec![index(bi, "conv", true)?],
                    None,
                )),
                Block::Basic { .. } => {
                    specs.push((
                        Network::conv_name(bi, "conv1"),
                        Position::FirstInBasicBlock,
                        vec![index(bi, "conv1", true)?],
                        Some(opts.first_in_basic_block),
                    ));
                    specs.push((
                        Network::conv_name(bi, "conv2"),
                        Position::SecondInBasicBlock,
                        vec![index(bi, "conv2", true)?],
                        None,
                    ));
                }
                Block::Bottleneck { mid, .. } => {
                    let lead = index(bi, "lead", false)?;
                    let end = index(bi, "end", false)?;
                    if mid.meta.groups > 1 {
                        specs.push((
                            format!("b{bi}.cardinal"),
                            Position::Grouped { cardinality: mid.meta.groups },
                            vec![lead, end],
                            None,
                        ));
                    } else {
                        specs.push((Network::conv_name(bi, "lead"), Position::LeadingOneByOne, vec![lead], None));
                        specs.push((Network::conv_name(bi, "end"), Position::EndingOneByOne, vec![end], None));
                    }
                }
            }
            for (name, position, members, pref) in specs {
                let shapes: Vec<(usize, usize)> = members.iter().map(|&i| params[i].shape()).collect();
                let scheme = make_scheme(&shapes, position, pref)?;
                let mask = match masks {
                    Some(ckpt) => {
                        let m = ckpt.mask(&format!("{name}.mask"))?;
                        if m.len() != scheme.group_count() {
                            return Err(HingeError::Format(format!(
                                "{name}.mask has {} entries for {} groups",
                                m.len(),
                                scheme.group_count()
                            )));
                        }
                        m
                    }
                    None => vec![true; scheme.group_count()],
                };
                sites.push(Site { name, block: bi, position, members, scheme, mask });
            }
        }
        Ok(sites)
    }

    pub fn site_mats<'a>(&'a self, site: &Site) -> Vec<&'a DenseMatrix> {
        let params = self.net.params();
        site.members.iter().map(|&i| params[i]).collect()
    }

    pub fn site_norms(&self, s: usize) -> Result<Vec<f64>> {
        let site = &self.sites[s];
        site.scheme.norms_of(&self.site_mats(site))
    }

    pub fn site_stats(&self, s: usize) -> Result<GroupStats> {
        Ok(group_stats(&self.site_norms(s)?, &self.sites[s].mask))
    }

    pub fn all_norms(&self) -> Result<Vec<Vec<f64>>> {
        (0..self.sites.len()).map(|s| self.site_norms(s)).collect()
    }

    /// Per parameter: true when a site owns it (updated by the prox step).
    pub fn sparsity_params(&self) -> Vec<bool> {
        let mut out = vec![false; self.net.params().len()];
        for site in &self.sites {
            for &m in &site.members {
                out[m] = true;
            }
        }
        out
    }

    /// Mutable views of one site's matrices out of a full parameter list.
    pub fn site_members_mut<'a>(site: &Site, params: Vec<&'a mut DenseMatrix>) -> Vec<&'a mut DenseMatrix> {
        pick_mut(params, &site.members)
    }

    pub fn apply_site_mask(&mut self, s: usize) -> Result<()> {
        let site = &self.sites[s];
        let mut mats = pick_mut(self.net.params_mut(), &site.members);
        site.scheme.zero_dead(&mut mats, &site.mask)
    }

    pub fn apply_masks(&mut self) -> Result<()> {
        (0..self.sites.len()).try_for_each(|s| self.apply_site_mask(s))
    }

    /// Masks every site would have after nullifying below `threshold`.
    pub fn hypothetical_masks(&self, threshold: f64) -> Result<Vec<Vec<bool>>> {
        self.sites
            .iter()
            .enumerate()
            .map(|(s, site)| Ok(survivors(&self.site_norms(s)?, &site.mask, threshold)))
            .collect()
    }

    /// Permanently masks groups below `threshold` and zeroes them.
    pub fn nullify_below(&mut self, threshold: f64) -> Result<()> {
        let masks = self.hypothetical_masks(threshold)?;
        for (site, m) in self.sites.iter_mut().zip(masks) {
            site.mask = m;
        }
        self.apply_masks()
    }

    pub fn masks(&self) -> Vec<Vec<bool>> {
        self.sites.iter().map(|s| s.mask.clone()).collect()
    }

    /// Parameters in canonical order; each site's mask follows its last
    /// member.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new();
        let infos = self.net.param_infos();
        self.net.write_tensors(&mut ckpt, |info, ck| {
            let idx = infos.iter().position(|p| p.name == info.name).expect("info comes from this network");
            for site in self.sites.iter().filter(|s| s.members.last() == Some(&idx)) {
                ck.push_mask(format!("{}.mask", site.name), &site.mask)?;
            }
            Ok(())
        })?;
        Ok(ckpt)
    }

    pub fn from_checkpoint(arch: &crate::net::ArchSpec, ckpt: &Checkpoint, opts: &HingeOptions) -> Result<Self> {
        let net = Network::from_checkpoint(arch, ckpt)?;
        let sites = Self::define_sites(&net, opts, Some(ckpt))?;
        let model = HingedModel { net, sites };
        for (s, site) in model.sites.iter().enumerate() {
            let norms = model.site_norms(s)?;
            if norms.iter().zip(&site.mask).any(|(&n, &alive)| !alive && n != 0.0) {
                return Err(HingeError::Format(format!("{}: masked group is not zero", site.name)));
            }
        }
        Ok(model)
    }
}
