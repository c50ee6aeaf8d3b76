use serde::{Deserialize, Serialize};

use crate::error::{HingeError, Result};
use crate::tensor::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    /// Weight α of the soft term.
    pub balance: f64,
    pub temperature: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig { balance: 0.4, temperature: 4.0 }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.balance) {
            return Err(HingeError::Config(format!("distill balance {} outside [0, 1]", self.balance)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(HingeError::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }

    pub fn hard_weight(&self) -> f64 {
        1.0 - self.balance
    }

    pub fn soft_weight(&self) -> f64 {
        2.0 * self.balance * self.temperature * self.temperature
    }
}

/// Row-wise softmax of `logits / temperature`.
pub fn softmax_rows(logits: &DenseMatrix, temperature: f64) -> DenseMatrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = ((*v - max) / temperature).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

fn log_sum_exp(row: &[f64], temperature: f64) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max / temperature + row.iter().map(|v| ((v - max) / temperature).exp()).sum::<f64>().ln()
}

fn check_labels(logits: &DenseMatrix, labels: &[usize]) -> Result<()> {
    if labels.len() != logits.rows() {
        return Err(HingeError::dim(format!("{} labels for {} rows of logits", labels.len(), logits.rows())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= logits.cols()) {
        return Err(HingeError::dim(format!("label {bad} outside {} classes", logits.cols())));
    }
    Ok(())
}

/// Mean cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &DenseMatrix, labels: &[usize]) -> Result<(f64, DenseMatrix)> {
    check_labels(logits, labels)?;
    let batch = logits.rows() as f64;
    let mut grad = softmax_rows(logits, 1.0);
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        loss += log_sum_exp(logits.row(r), 1.0) - logits[(r, y)];
        grad[(r, y)] -= 1.0;
    }
    grad.scale(1.0 / batch);
    Ok((loss / batch, grad))
}

/// `(1−α)·CE(y, σ(z_c)) + 2αT²·CE(σ(z_o/T), σ(z_c/T))`, teacher as target.
///
/// Returns the loss, the gradient with respect to the student logits and the
/// soft term's share of that gradient.
pub fn distill_loss(
    student: &DenseMatrix,
    teacher: &DenseMatrix,
    labels: &[usize],
    cfg: &DistillConfig,
) -> Result<(f64, DenseMatrix, DenseMatrix)> {
    cfg.validate()?;
    student.check_same_shape(teacher)?;
    let (hard, mut grad) = cross_entropy(student, labels)?;
    let batch = student.rows() as f64;
    let t = cfg.temperature;
    let p_s = softmax_rows(student, t);
    let p_t = softmax_rows(teacher, t);
    let mut soft = 0.0;
    for r in 0..student.rows() {
        let lse = log_sum_exp(student.row(r), t);
        for (c, &q) in p_t.row(r).iter().enumerate() {
            soft -= q * (student[(r, c)] / t - lse);
        }
    }
    soft /= batch;
    // d/dz_c of T²·CE(σ(z_o/T), σ(z_c/T)) is T·(σ(z_c/T) − σ(z_o/T))
    let mut soft_grad = p_s.sub(&p_t)?;
    soft_grad.scale(cfg.soft_weight() / t / batch);
    grad.scale(cfg.hard_weight());
    grad.add_scaled(&soft_grad, 1.0)?;
    Ok((cfg.hard_weight() * hard + cfg.soft_weight() * soft, grad, soft_grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_logits_give_log_k() {
        let (loss, _) = cross_entropy(&DenseMatrix::zeros(3, 4), &[0, 1, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn confident_correct_logit_has_no_loss() {
        let logits = DenseMatrix::from_rows(&[&[800.0, 0.0, 0.0]]);
        let (loss, grad) = cross_entropy(&logits, &[0]).unwrap();
        assert!(loss.abs() < 1e-300);
        assert!(grad.max_abs() < 1e-300);
    }

    #[test]
    fn matches_direct_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = DenseMatrix::random_normal(6, 5, 3.0, &mut rng);
        let labels = [0, 4, 2, 2, 1, 3];
        let (loss, _) = cross_entropy(&logits, &labels).unwrap();
        let mut direct = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let z: f64 = logits.row(r).iter().map(|v| v.exp()).sum();
            direct += -(logits[(r, y)].exp() / z).ln();
        }
        assert!((loss - direct / 6.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = softmax_rows(&DenseMatrix::random_normal(8, 7, 10.0, &mut rng), 3.0);
        for r in 0..8 {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn distill_weights() {
        let cfg = DistillConfig::default();
        assert!((cfg.hard_weight() - 0.6).abs() < 1e-15);
        assert!((cfg.soft_weight() - 12.8).abs() < 1e-12);
    }

    #[test]
    fn identical_logits_have_no_soft_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = DenseMatrix::random_normal(4, 3, 2.0, &mut rng);
        let (_, _, soft) = distill_loss(&z, &z, &[0, 1, 2, 0], &DistillConfig::default()).unwrap();
        assert_eq!(soft.max_abs(), 0.0);
    }

    #[test]
    fn zero_balance_is_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let zc = DenseMatrix::random_normal(4, 3, 2.0, &mut rng);
        let zo = DenseMatrix::random_normal(4, 3, 2.0, &mut rng);
        let labels = [2, 1, 0, 0];
        let cfg = DistillConfig { balance: 0.0, temperature: 4.0 };
        let (l, g, _) = distill_loss(&zc, &zo, &labels, &cfg).unwrap();
        let (lc, gc) = cross_entropy(&zc, &labels).unwrap();
        assert!((l - lc).abs() < 1e-12);
        assert!(g.sub(&gc).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn full_balance_ignores_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let zc = DenseMatrix::random_normal(3, 4, 1.0, &mut rng);
        let zo = DenseMatrix::random_normal(3, 4, 1.0, &mut rng);
        let cfg = DistillConfig { balance: 1.0, temperature: 2.0 };
        let (_, g1, _) = distill_loss(&zc, &zo, &[0, 0, 0], &cfg).unwrap();
        let (_, g2, _) = distill_loss(&zc, &zo, &[3, 1, 2], &cfg).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn bad_label() {
        assert!(cross_entropy(&DenseMatrix::zeros(1, 3), &[3]).is_err());
    }
}
