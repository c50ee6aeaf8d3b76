//! Self-check suites: closed-form prox against brute-force minimization,
//! backprop against central differences, and compaction against the masked
//! model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::compaction::{compact, verify_equivalence};
use crate::cost::compression_ratio;
use crate::error::Result;
use crate::hinge::{HingeInit, HingeOptions, HingedModel};
use crate::net::conv::FeatureMap;
use crate::net::loss::{cross_entropy, distill_loss, DistillConfig};
use crate::net::model::{ArchSpec, BlockConfig, InputShape, Network};
use crate::regularizers::{
    half_threshold_cutoff, l1_minus_2_joint_oracle, prox_oracle, RegularizerKind, RegularizerSpec,
};
use crate::tensor::DenseMatrix;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub cases: usize,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// First failing case, with enough inputs to reproduce it.
    pub failure: Option<String>,
}

impl SuiteReport {
    fn new(suite: &str, tolerance: f64) -> Self {
        SuiteReport { suite: suite.into(), cases: 0, max_deviation: 0.0, tolerance, passed: true, failure: None }
    }

    fn record(&mut self, dev: f64, case: impl FnOnce() -> String) {
        self.cases += 1;
        if dev > self.max_deviation || dev.is_nan() {
            self.max_deviation = if dev.is_nan() { f64::INFINITY } else { dev };
        }
        if !(dev <= self.tolerance) && self.failure.is_none() {
            self.passed = false;
            self.failure = Some(case());
        }
    }

    fn fail(&mut self, case: String) {
        self.cases += 1;
        self.passed = false;
        self.max_deviation = f64::INFINITY;
        self.failure.get_or_insert(case);
    }
}

/// Per-group multipliers for `(norms, kind, λη, ε)`; [`shrink_factors`]
/// unless a test swaps in a broken operator.
pub type ShrinkFn = dyn Fn(&[f64], RegularizerKind, f64, f64) -> Result<Vec<f64>>;

fn operator_name(kind: RegularizerKind) -> String {
    format!("prox_{}", kind.name())
}

/// Closed-form prox norms against the brute-force oracle: `cases` random
/// single groups for each separable regularizer and `cases` random
/// 2–8-group layers for ℓ1−2.
pub fn prox_suite(cases: usize, seed: u64, shrink: &ShrinkFn) -> Vec<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for kind in RegularizerKind::ALL {
        let mut rep = SuiteReport::new(&operator_name(kind), 1e-6);
        for _ in 0..cases {
            let lambda = rng.gen_range(0.01..2.0);
            let step = rng.gen_range(0.01..1.0);
            let lambda_eta = lambda * step;
            let spec = RegularizerSpec::new(kind, lambda);
            if kind == RegularizerKind::L1Minus2 {
                let g = rng.gen_range(2..=8);
                let norms: Vec<f64> = (0..g).map(|_| rng.gen_range(0.0..3.0 * lambda_eta + 0.5)).collect();
                let case = || format!("norms={norms:?} lambda_eta={lambda_eta:e}");
                match shrink(&norms, kind, lambda_eta, 0.0) {
                    Ok(f) => {
                        let oracle = l1_minus_2_joint_oracle(&norms, lambda_eta);
                        let dev = norms
                            .iter()
                            .zip(&f)
                            .zip(&oracle)
                            .map(|((n, f), o)| (n * f - o).abs())
                            .fold(0.0, f64::max);
                        rep.record(dev, case);
                    }
                    // degenerate only when no norm exceeds the threshold
                    Err(_) if norms.iter().all(|&n| n <= lambda_eta) => rep.record(0.0, case),
                    Err(e) => rep.fail(format!("{}: {e}", case())),
                }
                continue;
            }
            let norm = rng.gen_range(0.0..3.0 * lambda_eta.max(lambda_eta.sqrt()) + 0.1);
            let eps = spec.epsilon_for(lambda_eta);
            let case = || format!("norm={norm:e} lambda={lambda:e} step={step:e}");
            match shrink(&[norm], kind, lambda_eta, eps) {
                Ok(f) => {
                    let dev = (norm * f[0] - prox_oracle(norm, &spec, step)).abs();
                    rep.record(dev, case);
                }
                Err(e) => rep.fail(format!("{}: {e}", case())),
            }
        }
        out.push(rep);
    }
    out
}

/// Zeroing cutoffs: ℓ1 at exactly `λη`, ℓ1/2 at `∛54/4·(λη)^{2/3}`.
pub fn threshold_suite(shrink: &ShrinkFn) -> SuiteReport {
    let mut rep = SuiteReport::new("thresholds", 1e-9);
    let cutoff = half_threshold_cutoff(1.0);
    rep.record((cutoff - 0.944_940_787_421_154_8).abs(), || format!("l_half cutoff {cutoff}"));
    for lambda_eta in [0.1, 0.5, 1.0, 2.0] {
        let f = shrink(&[lambda_eta, lambda_eta * (1.0 + 1e-9)], RegularizerKind::L1, lambda_eta, 0.0);
        match f {
            Ok(f) => rep.record(if f[0] == 0.0 && f[1] > 0.0 { 0.0 } else { f64::INFINITY }, || {
                format!("l1 cutoff at lambda_eta={lambda_eta}: factors {f:?}")
            }),
            Err(e) => rep.fail(e.to_string()),
        }
        let c = half_threshold_cutoff(lambda_eta);
        match shrink(&[c, c * (1.0 + 1e-6)], RegularizerKind::LHalf, lambda_eta, 0.0) {
            Ok(f) => rep.record(if f[0] == 0.0 && f[1] > 0.0 { 0.0 } else { f64::INFINITY }, || {
                format!("l_half cutoff at lambda_eta={lambda_eta}: factors {f:?}")
            }),
            Err(e) => rep.fail(e.to_string()),
        }
    }
    rep
}

fn loss_of(net: &Network, x: &FeatureMap, labels: &[usize], teacher: Option<&DenseMatrix>) -> Result<f64> {
    let logits = net.logits(x)?;
    match teacher {
        None => Ok(cross_entropy(&logits, labels)?.0),
        Some(t) => Ok(distill_loss(&logits, t, labels, &DistillConfig::default())?.0),
    }
}

/// Small network with every layer kind: plain conv, basic blocks with and
/// without a projection shortcut, a bottleneck and a grouped bottleneck,
/// all hinged, plus the linear head.
pub fn gradient_check_net(seed: u64) -> Result<HingedModel> {
    let arch = ArchSpec {
        input: InputShape { channels: 3, height: 6, width: 6 },
        blocks: vec![
            BlockConfig::Plain { out_channels: 4, kernel: 3, stride: 1 },
            BlockConfig::BasicBlock { out_channels: 4, stride: 1 },
            BlockConfig::BasicBlock { out_channels: 6, stride: 2 },
            BlockConfig::Bottleneck { width: 4, out_channels: 6, stride: 1 },
            BlockConfig::GroupedBottleneck { width: 4, out_channels: 8, cardinality: 2, stride: 1 },
        ],
        classes: 3,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = Network::build(&arch, &mut rng)?;
    let mut model = HingedModel::attach(net, &HingeOptions { init: HingeInit::Identity, ..Default::default() })?;
    for p in model.net.params_mut() {
        for v in p.data_mut() {
            *v += 0.2 * rng.gen_range(-1.0..1.0);
        }
    }
    Ok(model)
}

/// Central differences with step `h` on `samples` random entries (at least
/// one per tensor), for cross-entropy and for the distillation loss.
/// Deviation is `|analytic − numeric| / (|analytic| + 1e-8)`.
pub fn grad_suite(samples: usize, seed: u64) -> Result<Vec<SuiteReport>> {
    let h = 1e-5;
    let mut out = Vec::new();
    let model = gradient_check_net(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xF00D);
    let shape = model.net.input;
    let batch = 3;
    let x = DenseMatrix::random_normal(batch * shape.height * shape.width, shape.channels, 1.0, &mut rng);
    let x = FeatureMap::new(batch, shape.height, shape.width, x)?;
    let labels: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..model.net.classes())).collect();
    let teacher = DenseMatrix::random_normal(batch, model.net.classes(), 2.0, &mut rng);
    let infos = model.net.param_infos();
    for (name, teacher) in [("grad_cross_entropy", None), ("grad_distillation", Some(&teacher))] {
        let mut rep = SuiteReport::new(name, 1e-4);
        let (logits, cache) = model.net.forward(&x)?;
        let dlogits = match teacher {
            None => cross_entropy(&logits, &labels)?.1,
            Some(t) => distill_loss(&logits, t, &labels, &DistillConfig::default())?.1,
        };
        let grads = model.net.backward(&cache, &dlogits)?;
        let mut picks: Vec<(usize, usize)> =
            grads.iter().enumerate().map(|(i, g)| (i, rng.gen_range(0..g.data().len()))).collect();
        while picks.len() < samples {
            let i = rng.gen_range(0..grads.len());
            picks.push((i, rng.gen_range(0..grads[i].data().len())));
        }
        for (i, j) in picks {
            let mut net = model.net.clone();
            net.params_mut()[i].data_mut()[j] += h;
            let up = loss_of(&net, &x, &labels, teacher)?;
            net.params_mut()[i].data_mut()[j] -= 2.0 * h;
            let down = loss_of(&net, &x, &labels, teacher)?;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads[i].data()[j];
            let dev = (analytic - numeric).abs() / (analytic.abs() + 1e-8);
            rep.record(dev, || format!("{}[{j}]: analytic {analytic:e}, numeric {numeric:e}", infos[i].name));
        }
        out.push(rep);
    }
    Ok(out)
}

/// Architecture mix used for the compaction suite.
pub fn equivalence_arch() -> ArchSpec {
    ArchSpec {
        input: InputShape { channels: 3, height: 6, width: 6 },
        blocks: vec![
            BlockConfig::Plain { out_channels: 6, kernel: 3, stride: 1 },
            BlockConfig::BasicBlock { out_channels: 8, stride: 2 },
            BlockConfig::BasicBlock { out_channels: 8, stride: 1 },
            BlockConfig::Bottleneck { width: 6, out_channels: 8, stride: 1 },
            BlockConfig::GroupedBottleneck { width: 8, out_channels: 10, cardinality: 4, stride: 1 },
            BlockConfig::Plain { out_channels: 6, kernel: 1, stride: 1 },
        ],
        classes: 4,
    }
}

/// Hinged model with perturbed sparsity matrices whose group norms spread
/// over roughly two decades, and a threshold drawn among those norms.
pub fn random_threshold_model(arch: &ArchSpec, seed: u64) -> Result<(HingedModel, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = Network::build(arch, &mut rng)?;
    let init = if rng.gen_bool(0.5) { HingeInit::Svd } else { HingeInit::Identity };
    let mut model = HingedModel::attach(net, &HingeOptions { init, ..Default::default() })?;
    let sparse = model.sparsity_params();
    for (p, is_site) in model.net.params_mut().into_iter().zip(sparse) {
        if is_site {
            for v in p.data_mut() {
                *v += 0.2 * rng.gen_range(-1.0..1.0);
            }
        }
    }
    for s in 0..model.sites.len() {
        let scales: Vec<f64> = (0..model.sites[s].scheme.group_count()).map(|_| 10f64.powf(rng.gen_range(-2.0..0.0))).collect();
        let site = model.sites[s].clone();
        let mut mats = HingedModel::site_members_mut(&site, model.net.params_mut());
        site.scheme.scale_groups(&mut mats, &scales)?;
    }
    let norms: Vec<f64> = model.all_norms()?.concat();
    let threshold = norms[rng.gen_range(0..norms.len())];
    Ok((model, threshold))
}

/// Compacts `cases` random threshold-masked models and compares logits and
/// ratios.
pub fn equiv_suite(cases: usize, seed: u64) -> Result<Vec<SuiteReport>> {
    let arch = equivalence_arch();
    let mut logits = SuiteReport::new("compaction_logits", 1e-10);
    let mut ratio = SuiteReport::new("compaction_ratio", 1e-12);
    for c in 0..cases {
        let case_seed = seed.wrapping_add(c as u64);
        let (mut model, threshold) = random_threshold_model(&arch, case_seed)?;
        let expected = compression_ratio(&model, threshold)?;
        model.nullify_below(threshold)?;
        let compacted = compact(&model)?;
        let dev = verify_equivalence(&model.net, &compacted.net, 32, case_seed)?;
        let case = || format!("model seed {case_seed}, threshold {threshold:e}");
        logits.record(dev, case);
        ratio.record((compacted.report.gamma - expected).abs(), case);
    }
    Ok(vec![logits, ratio])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regularizers::shrink_factors;

    #[test]
    fn prox_suite_passes_and_catches_injected_bug() {
        let reports = prox_suite(200, 1, &shrink_factors);
        assert!(reports.iter().all(|r| r.passed), "{reports:?}");
        assert_eq!(reports.len(), 4);

        // soft threshold shifted by an extra λη
        let broken = |n: &[f64], k: RegularizerKind, le: f64, e: f64| {
            if k == RegularizerKind::L1 {
                shrink_factors(n, k, 2.0 * le, e)
            } else {
                shrink_factors(n, k, le, e)
            }
        };
        let reports = prox_suite(200, 1, &broken);
        let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.suite.as_str()).collect();
        assert_eq!(failed, vec!["prox_l1"]);
        assert!(reports[0].failure.as_ref().unwrap().contains("norm="));
    }

    #[test]
    fn threshold_constants() {
        let r = threshold_suite(&shrink_factors);
        assert!(r.passed, "{r:?}");
        assert!((54f64.cbrt() / 4.0 - 0.944_940_787_421_154_8).abs() < 1e-14);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for r in grad_suite(60, 3).unwrap() {
            assert!(r.passed, "{r:?}");
            assert!(r.cases >= 60);
        }
    }

    #[test]
    fn compaction_suite() {
        for r in equiv_suite(10, 5).unwrap() {
            assert!(r.passed, "{r:?}");
        }
    }
}
