//! Proximal-gradient compression loop and threshold search.
//!
//! Each batch takes a small SGD step on ordinary weights and a gradient step
//! followed by the group prox on the sparsity matrices. At the end of an
//! epoch groups below the nullification threshold are masked for good, the
//! ratio is recomputed, and the per-site regularization strength and
//! learning rates are recalibrated.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cost::plan;
use crate::error::{HingeError, Result};
use crate::hinge::{group_stats, HingeOptions, HingedModel, Position};
use crate::net::data::Dataset;
use crate::net::train::{batch_loss, LossKind};
use crate::regularizers::{prox_in_place, RegularizerKind, RegularizerSpec};
use crate::tensor::{DenseMatrix, GroupScheme};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompressionConfig {
    pub target_ratio: f64,
    /// Stop once `γ_c − γ* <= stop_margin`.
    pub stop_margin: f64,
    pub nullify_threshold: f64,
    pub regularizer: RegularizerSpec,
    /// Learning rate of the sparsity matrices.
    pub eta: f64,
    /// Learning rate of every other weight, relative to `eta`.
    pub lr_ratio: f64,
    /// Exponent of the gradient ratio in the basic-block lr adjustment.
    pub m: f64,
    pub weight_decay: f64,
    pub anneal_decay: f64,
    /// Defaults to twice the nullification threshold.
    pub anneal_trigger: Option<f64>,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub search_criterion: f64,
    pub search_max_iter: usize,
    pub hinge: HingeOptions,
    pub seed: u64,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        CompressionConfig {
            target_ratio: 0.5,
            stop_margin: 0.1,
            nullify_threshold: 0.005,
            regularizer: RegularizerSpec::new(RegularizerKind::L1, 2e-4),
            eta: 0.1,
            lr_ratio: 0.01,
            m: 1.35,
            weight_decay: 1e-4,
            anneal_decay: 0.5,
            anneal_trigger: None,
            max_epochs: 500,
            batch_size: 32,
            search_criterion: 0.005,
            search_max_iter: 200,
            hinge: HingeOptions::default(),
            seed: 0,
        }
    }
}

impl CompressionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(HingeError::Config(msg.into()));
        if !(self.target_ratio > 0.0 && self.target_ratio < 1.0) {
            return bad("target_ratio must lie in (0, 1)");
        }
        if !(self.stop_margin > 0.0) {
            return bad("stop_margin must be positive");
        }
        if !(self.nullify_threshold >= 0.0) || !(self.eta >= 0.0) || !(self.lr_ratio >= 0.0) {
            return bad("nullify_threshold, eta and lr_ratio must be non-negative");
        }
        if !(self.weight_decay >= 0.0) || !(self.anneal_decay > 0.0 && self.anneal_decay <= 1.0) {
            return bad("need weight_decay >= 0 and anneal_decay in (0, 1]");
        }
        if self.batch_size == 0 || !(self.search_criterion > 0.0) {
            return bad("batch_size and search_criterion must be positive");
        }
        self.regularizer.validate()
    }

    pub fn eta_s(&self) -> f64 {
        self.lr_ratio * self.eta
    }

    pub fn trigger(&self) -> f64 {
        self.anneal_trigger.unwrap_or(2.0 * self.nullify_threshold)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhoRecord {
    pub epoch: usize,
    pub block: usize,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionState {
    /// Epochs completed.
    pub epoch: usize,
    pub gamma_c: f64,
    /// Un-balanced λ per site; only ever decays.
    pub base_lambda: Vec<f64>,
    /// Balanced λˡ per site used by the last prox steps.
    pub per_layer_lambda: Vec<f64>,
    /// Learning rate of each site, by site name.
    pub lr_per_matrix: BTreeMap<String, f64>,
    pub anneal_count: usize,
    pub rho_history: Vec<RhoRecord>,
    pub converged: bool,
}

/// Per-epoch progress record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub gamma_c: f64,
    pub train_loss: f64,
    pub mean_norms: BTreeMap<String, f64>,
    /// Balanced λˡ used during the epoch.
    pub lambda: BTreeMap<String, f64>,
    /// Un-balanced λ after this epoch's annealing.
    pub base_lambda: BTreeMap<String, f64>,
    pub rho: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub warnings: Vec<String>,
}

/// `W ← W − η_s·(∇W + μ·W)`.
pub fn sgd_step_w(w: &mut DenseMatrix, grad: &DenseMatrix, eta_s: f64, mu: f64) -> Result<()> {
    w.check_same_shape(grad)?;
    grad.ensure_finite("weight gradient")?;
    for (x, &g) in w.data_mut().iter_mut().zip(grad.data()) {
        *x -= eta_s * (g + mu * *x);
    }
    Ok(())
}

/// Gradient step at `lr`, then the group prox with threshold `λˡ·lr`. Masked
/// groups are zeroed again afterwards.
pub fn prox_step_a(
    mats: &mut [&mut DenseMatrix],
    grads: &[&DenseMatrix],
    scheme: &GroupScheme,
    mask: &[bool],
    lr: f64,
    spec: &RegularizerSpec,
) -> Result<()> {
    if mats.len() != grads.len() {
        return Err(HingeError::dim(format!("{} matrices, {} gradients", mats.len(), grads.len())));
    }
    for (a, g) in mats.iter_mut().zip(grads) {
        a.check_same_shape(g)?;
        g.ensure_finite("hinge gradient")?;
        a.add_scaled(g, -lr)?;
    }
    prox_in_place(mats, scheme, spec, lr)?;
    scheme.zero_dead(mats, mask)?;
    for a in mats.iter() {
        a.ensure_finite("hinge after prox")?;
    }
    Ok(())
}

/// Mean group norm of a gradient over the alive groups.
pub fn mean_grad_norm(grads: &[&DenseMatrix], scheme: &GroupScheme, mask: &[bool]) -> Result<f64> {
    Ok(group_stats(&scheme.norms_of(grads)?, mask).mean_norm)
}

/// `ρ = mean‖∇A¹‖ / mean‖∇A²‖`; `None` when the denominator vanishes.
pub fn gradient_ratio(first_mean: f64, second_mean: f64) -> Option<f64> {
    (second_mean > 0.0 && first_mean.is_finite()).then(|| first_mean / second_mean)
}

/// Learning rates `(A¹, A²)` of a basic block: `(η/ρ^m, η)`.
pub fn adjust_learning_rates(eta: f64, rho: f64, m: f64) -> (f64, f64) {
    (eta / rho.powf(m), eta)
}

/// `λˡ = λ · mean alive group norm`.
pub fn balance_lambda(norms: &[f64], mask: &[bool], base_lambda: f64) -> f64 {
    base_lambda * group_stats(norms, mask).mean_norm
}

/// Decays `base_lambda` when the mean alive norm falls below `trigger`.
/// Returns the new value and whether it decayed.
pub fn anneal(base_lambda: f64, mean_norm: f64, trigger: f64, decay: f64) -> (f64, bool) {
    if mean_norm < trigger {
        (base_lambda * decay, true)
    } else {
        (base_lambda, false)
    }
}

/// `(first, second)` site indices of every basic block.
fn basic_pairs(model: &HingedModel) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for (i, s) in model.sites.iter().enumerate() {
        if s.position == Position::FirstInBasicBlock {
            if let Some(j) = model
                .sites
                .iter()
                .position(|t| t.block == s.block && t.position == Position::SecondInBasicBlock)
            {
                out.push((s.block, i, j));
            }
        }
    }
    out
}

/// Runs the compression loop until `γ_c − γ* <= α` or `max_epochs`.
/// `on_epoch` receives one record per epoch.
pub fn run_compression(
    model: &mut HingedModel,
    data: &Dataset,
    cfg: &CompressionConfig,
    loss: &LossKind,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<CompressionState> {
    cfg.validate()?;
    let n_sites = model.sites.len();
    if n_sites == 0 {
        return Err(HingeError::Structural("model has no sparsity sites".into()));
    }
    let is_site = model.sparsity_params();
    let decays: Vec<bool> = model.net.param_infos().iter().map(|p| p.name != "head.b").collect();
    let pairs = basic_pairs(model);
    let mut rho: BTreeMap<usize, f64> = pairs.iter().map(|&(b, _, _)| (b, 1.0)).collect();
    let mut state = CompressionState {
        epoch: 0,
        gamma_c: plan(model, &model.masks())?.report().gamma,
        base_lambda: vec![cfg.regularizer.lambda; n_sites],
        per_layer_lambda: vec![0.0; n_sites],
        lr_per_matrix: model.sites.iter().map(|s| (s.name.clone(), cfg.eta)).collect(),
        anneal_count: 0,
        rho_history: Vec::new(),
        converged: false,
    };
    let eta_s = cfg.eta_s();
    loop {
        let epoch = state.epoch;
        for s in 0..n_sites {
            let norms = model.site_norms(s)?;
            state.per_layer_lambda[s] = balance_lambda(&norms, &model.sites[s].mask, state.base_lambda[s]);
        }
        let lrs: Vec<f64> = model.sites.iter().map(|s| state.lr_per_matrix[&s.name]).collect();
        let mut accum: Vec<Option<DenseMatrix>> = vec![None; is_site.len()];
        let mut total_loss = 0.0;
        for idx in data.epoch_batches(cfg.batch_size, cfg.seed, epoch) {
            let batch = data.batch(&idx)?;
            let (logits, cache) = model.net.forward(&batch.input)?;
            let (l, dlogits) = batch_loss(&logits, &batch.input, &batch.labels, loss)?;
            if !l.is_finite() {
                return Err(HingeError::numeric(format!("loss diverged at compression epoch {epoch}")));
            }
            total_loss += l * idx.len() as f64;
            let grads = model.net.backward(&cache, &dlogits)?;
            for (i, g) in grads.iter().enumerate().filter(|(i, _)| is_site[*i]) {
                match &mut accum[i] {
                    Some(acc) => acc.add_scaled(g, 1.0)?,
                    slot => *slot = Some(g.clone()),
                }
            }
            {
                let params = model.net.params_mut();
                for (i, p) in params.into_iter().enumerate().filter(|(i, _)| !is_site[*i]) {
                    sgd_step_w(p, &grads[i], eta_s, if decays[i] { cfg.weight_decay } else { 0.0 })?;
                }
            }
            for (s, site) in model.sites.iter().enumerate() {
                let spec = RegularizerSpec { lambda: state.per_layer_lambda[s], ..cfg.regularizer };
                let site_grads: Vec<&DenseMatrix> = site.members.iter().map(|&i| &grads[i]).collect();
                let mut mats = HingedModel::site_members_mut(site, model.net.params_mut());
                prox_step_a(&mut mats, &site_grads, &site.scheme, &site.mask, lrs[s], &spec)?;
            }
        }

        model.nullify_below(cfg.nullify_threshold)?;
        state.gamma_c = plan(model, &model.masks())?.report().gamma;

        let mut warnings = Vec::new();
        let mut rho_now = BTreeMap::new();
        for &(block, first, second) in &pairs {
            let grad_mean = |s: usize| -> Result<f64> {
                let site = &model.sites[s];
                let g: Vec<&DenseMatrix> =
                    site.members.iter().map(|&i| accum[i].as_ref().expect("every site gets gradients")).collect();
                mean_grad_norm(&g, &site.scheme, &site.mask)
            };
            match gradient_ratio(grad_mean(first)?, grad_mean(second)?) {
                Some(r) => {
                    rho.insert(block, r);
                }
                None => warnings.push(format!("b{block}: zero gradient in second hinge, keeping previous ratio")),
            }
            let r = rho[&block];
            let (lr1, lr2) = adjust_learning_rates(cfg.eta, r, cfg.m);
            state.lr_per_matrix.insert(model.sites[first].name.clone(), lr1);
            state.lr_per_matrix.insert(model.sites[second].name.clone(), lr2);
            state.rho_history.push(RhoRecord { epoch, block, rho: r });
            rho_now.insert(format!("b{block}"), r);
        }

        let mut mean_norms = BTreeMap::new();
        for s in 0..n_sites {
            let mean = model.site_stats(s)?.mean_norm;
            let (next, decayed) = anneal(state.base_lambda[s], mean, cfg.trigger(), cfg.anneal_decay);
            state.base_lambda[s] = next;
            state.anneal_count += decayed as usize;
            mean_norms.insert(model.sites[s].name.clone(), mean);
        }

        state.epoch += 1;
        on_epoch(&EpochRecord {
            epoch,
            gamma_c: state.gamma_c,
            train_loss: total_loss / data.len().max(1) as f64,
            mean_norms,
            lambda: model.sites.iter().map(|s| s.name.clone()).zip(state.per_layer_lambda.iter().copied()).collect(),
            base_lambda: model.sites.iter().map(|s| s.name.clone()).zip(state.base_lambda.iter().copied()).collect(),
            rho: rho_now,
            warnings,
        });

        if state.gamma_c - cfg.target_ratio <= cfg.stop_margin {
            state.converged = true;
            break;
        }
        if state.epoch >= cfg.max_epochs {
            break;
        }
    }
    Ok(state)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSearch {
    pub threshold: f64,
    pub gamma: f64,
    /// `|γ − γ*| <= criterion` was reached.
    pub exact: bool,
    pub iterations: usize,
    /// Every `(threshold, γ)` evaluated, in order.
    pub visited: Vec<(f64, f64)>,
    /// Smallest reachable ratio, when known.
    pub floor: Option<f64>,
}

impl ThresholdSearch {
    /// The target lies below the reachable floor by more than `criterion`.
    pub fn infeasible(&self, target: f64, criterion: f64) -> bool {
        self.floor.is_some_and(|f| target < f - criterion)
    }
}

/// Binary search for a threshold whose ratio `g(T)` is within `criterion`
/// of `target`. `g` must be non-increasing in `T`. The step halves whenever
/// consecutive ratios fall on opposite sides of the target. When the
/// criterion is never met the closest threshold visited is returned.
pub fn binary_search_threshold(
    mut g: impl FnMut(f64) -> Result<f64>,
    target: f64,
    criterion: f64,
    t0: f64,
    s0: f64,
    max_iter: usize,
) -> Result<ThresholdSearch> {
    if !(criterion > 0.0) {
        return Err(HingeError::Parameter(format!("criterion must be positive, got {criterion}")));
    }
    let mut t = t0;
    let mut s = s0;
    let mut prev: Option<f64> = None;
    let mut visited = Vec::new();
    let mut best = (t0, f64::INFINITY, f64::NAN);
    for n in 0..max_iter.max(1) {
        let gamma = g(t)?;
        visited.push((t, gamma));
        let dev = (gamma - target).abs();
        if dev < best.1 {
            best = (t, dev, gamma);
        }
        if dev <= criterion {
            return Ok(ThresholdSearch { threshold: t, gamma, exact: true, iterations: n + 1, visited, floor: None });
        }
        if let Some(p) = prev {
            if (p >= target) == (gamma < target) {
                s /= 2.0;
            }
        }
        if gamma > target {
            t += s;
        } else {
            t -= s;
        }
        prev = Some(gamma);
    }
    let iterations = visited.len();
    Ok(ThresholdSearch { threshold: best.0, gamma: best.2, exact: false, iterations, visited, floor: None })
}

/// Threshold search on a model's current norms, starting from the median
/// alive norm. A target below the reachable floor returns a threshold just
/// above every norm, flagged not exact.
pub fn search_threshold(model: &HingedModel, target: f64, criterion: f64, max_iter: usize) -> Result<ThresholdSearch> {
    let mut alive: Vec<f64> = Vec::new();
    for (s, site) in model.sites.iter().enumerate() {
        let norms = model.site_norms(s)?;
        alive.extend(norms.iter().zip(&site.mask).filter(|(_, &m)| m).map(|(&n, _)| n));
    }
    if alive.is_empty() {
        return Err(HingeError::DegenerateInput("no alive groups to threshold".into()));
    }
    alive.sort_by(f64::total_cmp);
    let max = *alive.last().expect("non-empty");
    let above_all = if max > 0.0 { max * (1.0 + 1e-9) } else { f64::MIN_POSITIVE };
    let ratio = |t: f64| plan(model, &model.hypothetical_masks(t)?).map(|p| p.report().gamma);
    let floor = ratio(above_all)?;
    if target < floor - criterion {
        return Ok(ThresholdSearch {
            threshold: above_all,
            gamma: floor,
            exact: false,
            iterations: 1,
            visited: vec![(above_all, floor)],
            floor: Some(floor),
        });
    }
    let t0 = alive[alive.len() / 2];
    let mut found = binary_search_threshold(ratio, target, criterion, t0, t0 / 2.0, max_iter)?;
    found.floor = Some(floor);
    Ok(found)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hinge::HingeInit;
    use crate::net::data::SyntheticConfig;
    use crate::net::model::{ArchSpec, BlockConfig, Network};
    use crate::regularizers::prox_oracle;
    use crate::tensor::group_norms;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(r: usize, c: usize, seed: u64) -> DenseMatrix {
        DenseMatrix::random_normal(r, c, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn sgd_step_rules() {
        let w0 = rand_mat(4, 5, 1);
        let g = rand_mat(4, 5, 2);
        let mut w = w0.clone();
        sgd_step_w(&mut w, &g, 0.0, 1e-4).unwrap();
        assert_eq!(w, w0);

        let eta_s = 0.01;
        let mut w = w0.clone();
        let mut g2 = w0.clone();
        g2.scale(1.0 / eta_s);
        sgd_step_w(&mut w, &g2, eta_s, 0.0).unwrap();
        assert!(w.max_abs() <= 1e-15);

        let mut w = w0.clone();
        sgd_step_w(&mut w, &g, 0.03, 0.2).unwrap();
        for i in 0..w.data().len() {
            let x = w0.data()[i];
            let expect = x - 0.03 * (g.data()[i] + 0.2 * x);
            assert!((w.data()[i] - expect).abs() <= 1e-15);
        }

        let mut bad = g.clone();
        bad.data_mut()[3] = f64::NAN;
        assert!(matches!(sgd_step_w(&mut w, &bad, 0.1, 0.0), Err(HingeError::Numeric(_))));
    }

    #[test]
    fn prox_step_trivial_cases() {
        let a0 = rand_mat(5, 5, 3);
        let scheme = GroupScheme::columns(5, 5);
        let zero = DenseMatrix::zeros(5, 5);
        let mask = vec![true; 5];
        let mut a = a0.clone();
        let spec = RegularizerSpec::new(RegularizerKind::L1, 0.0);
        prox_step_a(&mut [&mut a], &[&zero], &scheme, &mask, 0.1, &spec).unwrap();
        assert_eq!(a, a0);

        // a group with norm below λη is removed by pure shrinkage
        let mut a = a0.clone();
        for r in 0..5 {
            a[(r, 2)] *= 1e-3;
        }
        let norms = group_norms(&a, &scheme).unwrap();
        let spec = RegularizerSpec::new(RegularizerKind::L1, 2.0 * norms[2] / 0.1);
        prox_step_a(&mut [&mut a], &[&zero], &scheme, &mask, 0.1, &spec).unwrap();
        assert_eq!(a.column(2), vec![0.0; 5]);

        let mut a = a0.clone();
        let dead = vec![true, false, true, true, true];
        let g = rand_mat(5, 5, 4);
        prox_step_a(&mut [&mut a], &[&g], &scheme, &dead, 0.1, &RegularizerSpec::new(RegularizerKind::L1, 0.0)).unwrap();
        assert_eq!(a.column(1), vec![0.0; 5]);
    }

    #[test]
    fn prox_step_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for kind in RegularizerKind::ALL {
            for trial in 0..5 {
                let a0 = rand_mat(6, 6, 10 + trial);
                let g = rand_mat(6, 6, 20 + trial);
                let scheme = if trial % 2 == 0 { GroupScheme::columns(6, 6) } else { GroupScheme::rows(6, 6) };
                let lr = rng.gen_range(0.05..0.3);
                let spec = RegularizerSpec::new(kind, rng.gen_range(0.5..4.0));
                let mut a = a0.clone();
                let mask = vec![true; 6];
                let res = prox_step_a(&mut [&mut a], &[&g], &scheme, &mask, lr, &spec);
                let mut stepped = a0.clone();
                stepped.add_scaled(&g, -lr).unwrap();
                if kind == RegularizerKind::L1Minus2 {
                    // coupled across groups; checked against its own oracle elsewhere
                    if res.is_ok() {
                        assert!(group_norms(&a, &scheme).unwrap().iter().all(|n| n.is_finite()));
                    }
                    continue;
                }
                res.unwrap();
                let before = group_norms(&stepped, &scheme).unwrap();
                let after = group_norms(&a, &scheme).unwrap();
                let eps_spec = RegularizerSpec { epsilon: Some(spec.epsilon_for(spec.lambda * lr)), ..spec };
                for (b, n) in before.iter().zip(&after) {
                    let expect = prox_oracle(*b, &eps_spec, lr);
                    assert!((n - expect).abs() <= 1e-6, "{kind:?}: {n} vs {expect}");
                }
            }
        }
    }

    #[test]
    fn lr_adjustment() {
        assert_eq!(adjust_learning_rates(0.1, 1.0, 1.35), (0.1, 0.1));
        let rho = gradient_ratio(0.2, 0.1).unwrap();
        assert!((rho - 2.0).abs() <= 1e-15);
        let (lr1, lr2) = adjust_learning_rates(0.1, rho, 1.35);
        assert!((0.1 / lr1 - 2f64.powf(1.35)).abs() <= 1e-12);
        assert!((2f64.powf(1.35) - 2.549).abs() < 1e-3);
        assert_eq!(lr2, 0.1);
        assert!(adjust_learning_rates(0.1, 0.5, 1.35).0 > 0.1);
        assert_eq!(gradient_ratio(0.3, 0.0), None);
    }

    #[test]
    fn lambda_balancing_and_annealing() {
        let l = balance_lambda(&[0.4, 0.6, 0.5], &[true; 3], 2e-4);
        assert!((l - 1e-4).abs() <= 1e-18);
        assert_eq!(balance_lambda(&[0.0, 1.0, 0.0, 1.0], &[false, true, false, true], 2e-4), 2e-4);
        let d = balance_lambda(&[0.8, 1.2, 1.0], &[true; 3], 2e-4);
        assert!((d - 2.0 * l).abs() <= 1e-18);

        assert_eq!(anneal(2e-4, 0.5, 0.01, 0.5), (2e-4, false));
        let (once, _) = anneal(2e-4, 0.001, 0.01, 0.5);
        let (twice, _) = anneal(once, 0.001, 0.01, 0.5);
        assert_eq!(twice, 2e-4 * 0.25);
    }

    #[test]
    fn search_returns_start_when_close() {
        let r = binary_search_threshold(|_| Ok(0.5), 0.5, 0.005, 0.3, 0.15, 200).unwrap();
        assert!(r.exact);
        assert_eq!((r.threshold, r.iterations), (0.3, 1));
    }

    #[test]
    fn search_on_staircase() {
        // γ steps down by 0.1 at every multiple of 0.1
        let g = |t: f64| Ok(1.0 - 0.1 * (t / 0.1).floor().clamp(0.0, 9.0));
        for target in [0.3, 0.6, 0.8] {
            let sweep: Vec<f64> =
                (0..2000).map(|i| i as f64 * 5e-4).filter(|&t| (g(t).unwrap() - target).abs() <= 1e-9).collect();
            let (lo, hi) = (sweep[0], *sweep.last().unwrap());
            let r = binary_search_threshold(g, target, 0.005, 0.45, 0.225, 200).unwrap();
            assert!(r.exact);
            assert!(r.threshold >= lo - 1e-12 && r.threshold <= hi + 5e-4, "target {target}: {}", r.threshold);
        }
        // unreachable in between two steps: best visited is returned
        let r = binary_search_threshold(g, 0.55, 0.005, 0.45, 0.225, 200).unwrap();
        assert!(!r.exact);
        assert_eq!(r.iterations, 200);
        let dev = (r.gamma - 0.55).abs();
        assert!(r.visited.iter().all(|&(_, gv)| dev <= (gv - 0.55).abs()));
    }

    fn toy() -> (HingedModel, Dataset) {
        let data = SyntheticConfig { n_train: 32, n_test: 8, height: 6, width: 6, ..Default::default() };
        let (tr, _) = data.generate().unwrap();
        let arch = ArchSpec {
            input: data.input_shape(),
            blocks: vec![
                BlockConfig::Plain { out_channels: 8, kernel: 3, stride: 1 },
                BlockConfig::BasicBlock { out_channels: 8, stride: 1 },
            ],
            classes: 4,
        };
        let net = Network::build(&arch, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let opts = HingeOptions { init: HingeInit::Identity, ..Default::default() };
        (HingedModel::attach(net, &opts).unwrap(), tr)
    }

    #[test]
    fn zero_rates_are_a_fixed_point() {
        let (mut m, data) = toy();
        let before = m.clone();
        let cfg = CompressionConfig {
            eta: 0.0,
            nullify_threshold: 0.0,
            regularizer: RegularizerSpec::new(RegularizerKind::L1, 0.0),
            max_epochs: 2,
            ..Default::default()
        };
        let st = run_compression(&mut m, &data, &cfg, &LossKind::CrossEntropy, |_| {}).unwrap();
        assert_eq!(m, before);
        assert_eq!((st.epoch, st.converged, st.gamma_c), (2, false, 1.0));
    }

    #[test]
    fn already_satisfied_target_stops_after_one_epoch() {
        let (mut m, data) = toy();
        let cfg = CompressionConfig { target_ratio: 0.95, max_epochs: 10, ..Default::default() };
        let mut records = Vec::new();
        let st = run_compression(&mut m, &data, &cfg, &LossKind::CrossEntropy, |r| records.push(r.clone())).unwrap();
        assert_eq!((st.epoch, records.len()), (1, 1));
        assert!(st.converged);
        let line = serde_json::to_string(&records[0]).unwrap();
        assert!(line.contains("\"gamma_c\""));
    }

    #[test]
    fn compresses_toy_model_to_target() {
        let (mut m, data) = toy();
        let cfg = CompressionConfig {
            target_ratio: 0.5,
            regularizer: RegularizerSpec::new(RegularizerKind::L1, 0.1),
            eta: 0.2,
            nullify_threshold: 0.02,
            anneal_trigger: Some(0.005),
            batch_size: 8,
            max_epochs: 300,
            ..Default::default()
        };
        let mut gammas = Vec::new();
        let st = run_compression(&mut m, &data, &cfg, &LossKind::CrossEntropy, |r| gammas.push(r.gamma_c)).unwrap();
        assert!(st.converged, "gamma {}", st.gamma_c);
        assert!(st.gamma_c > 0.4 && st.gamma_c <= 0.6, "gamma {}", st.gamma_c);
        assert!(gammas.windows(2).all(|w| w[1] <= w[0]));
        assert!(st.base_lambda.iter().all(|&l| l <= 0.5));
        assert_eq!(st.gamma_c, plan(&m, &m.masks()).unwrap().report().gamma);
        for (s, site) in m.sites.iter().enumerate() {
            let norms = m.site_norms(s).unwrap();
            assert!(norms.iter().zip(&site.mask).all(|(&n, &a)| a || n == 0.0));
        }
        assert!(!st.rho_history.is_empty());
        assert!(st.lr_per_matrix["b1.conv2"] == cfg.eta);
    }

    #[test]
    fn no_regularization_never_converges() {
        let (mut m, data) = toy();
        let cfg = CompressionConfig {
            target_ratio: 0.5,
            regularizer: RegularizerSpec::new(RegularizerKind::L1, 0.0),
            max_epochs: 5,
            ..Default::default()
        };
        let st = run_compression(&mut m, &data, &cfg, &LossKind::CrossEntropy, |_| {}).unwrap();
        assert!(!st.converged);
        assert_eq!(st.epoch, 5);
        assert!(m.masks().iter().all(|mk| mk.iter().all(|&a| a)));
    }

    #[test]
    fn model_search_and_floor() {
        let (m, _) = toy();
        let r = search_threshold(&m, 0.6, 0.005, 200).unwrap();
        let g = crate::cost::compression_ratio(&m, r.threshold).unwrap();
        assert_eq!(g, r.gamma);
        assert!(r.visited.iter().all(|&(_, gv)| (r.gamma - 0.6).abs() <= (gv - 0.6).abs()));
        let floor = search_threshold(&m, 0.01, 0.005, 200).unwrap();
        assert!(!floor.exact);
        assert!(floor.gamma > 0.01);
        assert!(floor.infeasible(0.01, 0.005));
        assert!(!r.infeasible(0.6, 0.005));
    }
}
