//! Train, compress and finetune steps shared by the CLI and the end-to-end
//! tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compaction::{compact, verify_equivalence, CompactModel};
use crate::config::RunConfig;
use crate::cost::CostReport;
use crate::error::{HingeError, Result};
use crate::hinge::HingedModel;
use crate::net::{evaluate, train, Dataset, EpochMetrics, LossKind, Network};
use crate::solver::{run_compression, search_threshold, CompressionState, EpochRecord, ThresholdSearch};

/// Logit deviation allowed between a masked model and its compaction.
pub const EQUIVALENCE_TOLERANCE: f64 = 1e-9;

/// Soft-term convention recorded with finetune metrics.
pub const SOFT_TERM_CONVENTION: &str =
    "written L_ce(softmax(z_c/T), softmax(z_o/T)); computed as cross-entropy with softmax(z_o/T) as the target";

pub fn datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    cfg.data.generate()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub epochs: Vec<EpochMetrics>,
    pub test_accuracy: f64,
    pub test_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub soft_term_convention: Option<String>,
}

pub fn train_baseline(cfg: &RunConfig, on_epoch: impl FnMut(&EpochMetrics)) -> Result<(Network, TrainMetrics)> {
    cfg.validate()?;
    let (tr, te) = datasets(cfg)?;
    let mut net = Network::build(&cfg.arch(), &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let epochs = train(&mut net, &tr, Some(&te), &cfg.train, &LossKind::CrossEntropy, cfg.seed, on_epoch)?;
    let (test_accuracy, test_loss) = evaluate(&net, &te)?;
    Ok((net, TrainMetrics { epochs, test_accuracy, test_loss, soft_term_convention: None }))
}

/// Everything written to the compression report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub target_ratio: f64,
    pub threshold: f64,
    /// The threshold search met its criterion.
    pub exact: bool,
    pub feasible: bool,
    pub floor_ratio: Option<f64>,
    pub search_iterations: usize,
    pub compression_epochs: usize,
    pub converged: bool,
    pub gamma_after_loop: f64,
    pub equivalence_max_deviation: f64,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
    #[serde(flatten)]
    pub cost: CostReport,
}

pub struct CompressOutcome {
    /// Hinged model with the final masks applied.
    pub masked: HingedModel,
    pub compact: CompactModel,
    pub state: CompressionState,
    pub search: ThresholdSearch,
    pub report: CompressionReport,
}

/// Compression loop, threshold search for `target`, then compaction with an
/// equivalence check. An infeasible target still yields the floor model;
/// `report.feasible` says so.
pub fn compress(
    cfg: &RunConfig,
    net: &Network,
    target: f64,
    on_record: impl FnMut(&EpochRecord),
) -> Result<CompressOutcome> {
    let ccfg = crate::solver::CompressionConfig { target_ratio: target, ..cfg.compress.clone() };
    ccfg.validate()?;
    let (tr, te) = datasets(cfg)?;
    let accuracy_before = evaluate(net, &te)?.0;
    let mut model = HingedModel::attach(net.clone(), &ccfg.hinge)?;
    let state = run_compression(&mut model, &tr, &ccfg, &LossKind::CrossEntropy, on_record)?;
    let search = search_threshold(&model, target, ccfg.search_criterion, ccfg.search_max_iter)?;
    model.nullify_below(search.threshold)?;
    let compact_model = compact(&model)?;
    let dev = verify_equivalence(&model.net, &compact_model.net, 32, ccfg.seed)?;
    if !(dev <= EQUIVALENCE_TOLERANCE) {
        return Err(HingeError::Structural(format!("compacted model deviates by {dev:e}")));
    }
    let accuracy_after = evaluate(&compact_model.net, &te)?.0;
    let report = CompressionReport {
        target_ratio: target,
        threshold: search.threshold,
        exact: search.exact,
        feasible: !search.infeasible(target, ccfg.search_criterion),
        floor_ratio: search.floor,
        search_iterations: search.iterations,
        compression_epochs: state.epoch,
        converged: state.converged,
        gamma_after_loop: state.gamma_c,
        equivalence_max_deviation: dev,
        accuracy_before,
        accuracy_after,
        cost: compact_model.report.clone(),
    };
    Ok(CompressOutcome { masked: model, compact: compact_model, state, search, report })
}

/// Finetunes `student` with cross-entropy, or with distillation from
/// `teacher` when one is given.
pub fn finetune(
    cfg: &RunConfig,
    student: &mut Network,
    teacher: Option<&Network>,
    on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainMetrics> {
    cfg.validate()?;
    let (tr, te) = datasets(cfg)?;
    if let Some(t) = teacher {
        if t.classes() != student.classes() {
            return Err(HingeError::Config(format!(
                "teacher has {} classes, student {}",
                t.classes(),
                student.classes()
            )));
        }
    }
    let loss = match teacher {
        Some(t) => LossKind::Distill { teacher: t, cfg: cfg.distill },
        None => LossKind::CrossEntropy,
    };
    let epochs = train(student, &tr, Some(&te), &cfg.finetune, &loss, cfg.seed.wrapping_add(1), on_epoch)?;
    let (test_accuracy, test_loss) = evaluate(student, &te)?;
    Ok(TrainMetrics {
        epochs,
        test_accuracy,
        test_loss,
        soft_term_convention: teacher.map(|_| SOFT_TERM_CONVENTION.to_string()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::SyntheticConfig;
    use crate::net::TrainConfig;

    fn small() -> RunConfig {
        let mut cfg = RunConfig {
            data: SyntheticConfig { n_train: 64, n_test: 32, height: 8, width: 8, ..Default::default() },
            train: TrainConfig { epochs: 3, ..Default::default() },
            finetune: TrainConfig { epochs: 1, lr: 0.005, ..Default::default() },
            ..Default::default()
        };
        cfg.compress.max_epochs = 2;
        cfg
    }

    #[test]
    fn pipeline_runs_and_is_deterministic() {
        let cfg = small();
        let (net, m) = train_baseline(&cfg, |_| {}).unwrap();
        assert_eq!(m.epochs.len(), 3);
        let (again, _) = train_baseline(&cfg, |_| {}).unwrap();
        assert_eq!(net.to_checkpoint().unwrap().to_bytes(), again.to_checkpoint().unwrap().to_bytes());

        let out = compress(&cfg, &net, 0.6, |_| {}).unwrap();
        assert!(out.report.equivalence_max_deviation <= EQUIVALENCE_TOLERANCE);
        assert!(out.report.feasible);
        assert_eq!(out.report.cost.gamma, out.search.gamma);

        let mut student = out.compact.net.clone();
        let fm = finetune(&cfg, &mut student, Some(&net), |_| {}).unwrap();
        assert!(fm.soft_term_convention.is_some());
        let mut plain = out.compact.net.clone();
        assert!(finetune(&cfg, &mut plain, None, |_| {}).unwrap().soft_term_convention.is_none());
    }

    #[test]
    fn infeasible_target_is_flagged() {
        let cfg = small();
        let (net, _) = train_baseline(&RunConfig { train: TrainConfig { epochs: 0, ..Default::default() }, ..cfg.clone() }, |_| {}).unwrap();
        let out = compress(&cfg, &net, 0.001, |_| {}).unwrap();
        assert!(!out.report.feasible);
        assert!(out.report.floor_ratio.unwrap() > 0.001);
    }
}
