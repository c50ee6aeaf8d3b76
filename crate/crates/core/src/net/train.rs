use serde::{Deserialize, Serialize};

use crate::error::{HingeError, Result};
use crate::net::data::Dataset;
use crate::net::loss::{cross_entropy, distill_loss, DistillConfig};
use crate::net::model::Network;
use crate::tensor::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from the base rate to zero over the run.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 12,
            batch_size: 32,
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 1e-4,
            schedule: LrSchedule::Cosine,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(HingeError::Config("batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0 && (0.0..1.0).contains(&self.momentum) && self.weight_decay >= 0.0) {
            return Err(HingeError::Config("need lr >= 0, momentum in [0,1), weight_decay >= 0".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let t = epoch as f64 / self.epochs.max(1) as f64;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

pub enum LossKind<'a> {
    CrossEntropy,
    Distill { teacher: &'a Network, cfg: DistillConfig },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

fn correct(logits: &DenseMatrix, labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|&(r, &y)| {
            let row = logits.row(r);
            // first maximum wins, so ties resolve deterministically
            let best = row
                .iter()
                .enumerate()
                .fold(0, |best, (j, &v)| if v > row[best] { j } else { best });
            best == y
        })
        .count()
}

/// Loss and gradient with respect to the logits for one batch.
pub fn batch_loss(
    logits: &DenseMatrix,
    input: &crate::net::conv::FeatureMap,
    labels: &[usize],
    loss: &LossKind,
) -> Result<(f64, DenseMatrix)> {
    match loss {
        LossKind::CrossEntropy => cross_entropy(logits, labels),
        LossKind::Distill { teacher, cfg } => {
            let t = teacher.logits(input)?;
            let (l, g, _) = distill_loss(logits, &t, labels, cfg)?;
            Ok((l, g))
        }
    }
}

/// Momentum SGD. Weight decay applies to every tensor except the classifier
/// bias. Batch order is a seeded shuffle per epoch, so equal seeds give
/// bit-identical weights.
pub fn train(
    net: &mut Network,
    data: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
    loss: &LossKind,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if data.classes != net.classes() {
        return Err(HingeError::Config(format!(
            "dataset has {} classes, network {}",
            data.classes,
            net.classes()
        )));
    }
    let decay_mask: Vec<bool> = net.param_infos().iter().map(|p| p.name != "head.b").collect();
    let mut velocity: Vec<DenseMatrix> = net.params().iter().map(|p| DenseMatrix::zeros(p.rows(), p.cols())).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut total_loss = 0.0;
        let mut hits = 0;
        for idx in data.epoch_batches(cfg.batch_size, seed, epoch) {
            let batch = data.batch(&idx)?;
            let (logits, cache) = net.forward(&batch.input)?;
            let (l, dlogits) = batch_loss(&logits, &batch.input, &batch.labels, loss)?;
            if !l.is_finite() {
                return Err(HingeError::numeric(format!("loss diverged at epoch {epoch}")));
            }
            total_loss += l * idx.len() as f64;
            hits += correct(&logits, &batch.labels);
            let grads = net.backward(&cache, &dlogits)?;
            for (((p, g), v), &decay) in net.params_mut().into_iter().zip(&grads).zip(&mut velocity).zip(&decay_mask) {
                g.ensure_finite("gradient")?;
                let wd = if decay { cfg.weight_decay } else { 0.0 };
                for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                    *vv = cfg.momentum * *vv + gv + wd * *pv;
                    *pv -= lr * *vv;
                }
            }
        }
        let metrics = EpochMetrics {
            epoch,
            lr,
            train_loss: total_loss / data.len() as f64,
            train_accuracy: hits as f64 / data.len() as f64,
            test_accuracy: match test {
                Some(t) => Some(evaluate(net, t)?.0),
                None => None,
            },
        };
        on_epoch(&metrics);
        history.push(metrics);
    }
    Ok(history)
}

/// Top-1 accuracy and mean cross-entropy.
pub fn evaluate(net: &Network, data: &Dataset) -> Result<(f64, f64)> {
    let mut hits = 0;
    let mut loss = 0.0;
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(128) {
        let batch = data.batch(idx)?;
        let logits = net.logits(&batch.input)?;
        hits += correct(&logits, &batch.labels);
        loss += cross_entropy(&logits, &batch.labels)?.0 * idx.len() as f64;
    }
    Ok((hits as f64 / data.len() as f64, loss / data.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::data::SyntheticConfig;
    use crate::net::model::{ArchSpec, BlockConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (Network, Dataset, Dataset) {
        let data = SyntheticConfig { n_train: 64, n_test: 400, height: 8, width: 8, ..Default::default() };
        let (tr, te) = data.generate().unwrap();
        let arch = ArchSpec {
            input: data.input_shape(),
            blocks: vec![
                BlockConfig::Plain { out_channels: 8, kernel: 3, stride: 1 },
                BlockConfig::BasicBlock { out_channels: 8, stride: 2 },
            ],
            classes: 4,
        };
        (Network::build(&arch, &mut ChaCha8Rng::seed_from_u64(9)).unwrap(), tr, te)
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let (mut net, tr, _) = setup();
        let before = net.clone();
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        train(&mut net, &tr, None, &cfg, &LossKind::CrossEntropy, 1, |_| {}).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn random_model_is_near_chance() {
        let (net, _, test) = setup();
        let (acc, _) = evaluate(&net, &test).unwrap();
        assert!((acc - 0.25).abs() <= 0.15, "accuracy {acc}");
        assert_eq!(evaluate(&net, &test).unwrap(), (acc, evaluate(&net, &test).unwrap().1));
    }

    #[test]
    fn overfits_small_subset() {
        let (mut net, tr, _) = setup();
        let subset = tr.subset(&(0..16).collect::<Vec<_>>()).unwrap();
        let cfg = TrainConfig { epochs: 200, batch_size: 16, lr: 0.02, schedule: LrSchedule::Constant, ..Default::default() };
        let hist = train(&mut net, &subset, None, &cfg, &LossKind::CrossEntropy, 2, |_| {}).unwrap();
        assert_eq!(hist.last().unwrap().train_accuracy, 1.0);
        assert_eq!(evaluate(&net, &subset).unwrap().0, 1.0);
    }

    #[test]
    fn same_seed_same_weights() {
        let (net0, tr, _) = setup();
        let cfg = TrainConfig { epochs: 2, ..Default::default() };
        let mut a = net0.clone();
        let mut b = net0;
        train(&mut a, &tr, None, &cfg, &LossKind::CrossEntropy, 5, |_| {}).unwrap();
        train(&mut b, &tr, None, &cfg, &LossKind::CrossEntropy, 5, |_| {}).unwrap();
        assert_eq!(a, b);
    }
}
