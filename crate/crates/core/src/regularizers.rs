//! Group-sparsity regularizers and their proximal operators.
//!
//! Every operator acts on groups through their ℓ2 norms only: a group `v` is
//! mapped to `f(‖v‖₂) · v / ‖v‖₂`, so the vector problem reduces to a scalar
//! one on the norm. The closed forms below are authoritative for the solver;
//! [`prox_oracle`] solves the same scalar problems by brute force and is only
//! used for verification.

use serde::{Deserialize, Serialize};

use crate::error::{HingeError, Result};
use crate::tensor::{DenseMatrix, GroupScheme};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegularizerKind {
    #[serde(rename = "l1")]
    L1,
    #[serde(rename = "l_half")]
    LHalf,
    #[serde(rename = "l1_minus_2")]
    L1Minus2,
    #[serde(rename = "logsum")]
    Logsum,
}

impl RegularizerKind {
    pub const ALL: [RegularizerKind; 4] = [
        RegularizerKind::L1,
        RegularizerKind::LHalf,
        RegularizerKind::L1Minus2,
        RegularizerKind::Logsum,
    ];

    /// Regularization factor used when a config names the kind but no λ.
    pub fn default_lambda(self) -> f64 {
        match self {
            RegularizerKind::L1 => 2e-4,
            RegularizerKind::L1Minus2 => 2e-4,
            RegularizerKind::LHalf => 4e-4,
            RegularizerKind::Logsum => 9e-5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RegularizerKind::L1 => "l1",
            RegularizerKind::LHalf => "l_half",
            RegularizerKind::L1Minus2 => "l1_minus_2",
            RegularizerKind::Logsum => "logsum",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularizerSpec {
    pub kind: RegularizerKind,
    pub lambda: f64,
    /// Logsum only. `None` means `0.5·√(λη)` at every call.
    #[serde(default)]
    pub epsilon: Option<f64>,
}

impl RegularizerSpec {
    pub fn new(kind: RegularizerKind, lambda: f64) -> Self {
        RegularizerSpec {
            kind,
            lambda,
            epsilon: None,
        }
    }

    pub fn with_default_lambda(kind: RegularizerKind) -> Self {
        Self::new(kind, kind.default_lambda())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(HingeError::Parameter(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if let Some(eps) = self.epsilon {
            if !(eps > 0.0) {
                return Err(HingeError::Parameter(format!("epsilon must be > 0, got {eps}")));
            }
        }
        Ok(())
    }

    /// ε for a prox with threshold `lambda_eta`.
    pub fn epsilon_for(&self, lambda_eta: f64) -> f64 {
        self.epsilon.unwrap_or(0.5 * lambda_eta.sqrt())
    }
}

/// Norms at or below this value are zeroed by the half-thresholding operator.
pub fn half_threshold_cutoff(lambda_eta: f64) -> f64 {
    54f64.cbrt() / 4.0 * lambda_eta.powf(2.0 / 3.0)
}

fn check_step(step: f64) -> Result<()> {
    if step >= 0.0 && step.is_finite() {
        Ok(())
    } else {
        Err(HingeError::Parameter(format!("prox step must be >= 0, got {step}")))
    }
}

/// Per-group multipliers `‖new‖ / ‖old‖` for threshold `lambda_eta = λη`.
///
/// ℓ1−2 couples all groups through `‖c‖₂`, so the whole norm vector of one
/// layer (or concatenated site) must be passed at once.
pub fn shrink_factors(
    norms: &[f64],
    kind: RegularizerKind,
    lambda_eta: f64,
    epsilon: f64,
) -> Result<Vec<f64>> {
    check_step(lambda_eta)?;
    if lambda_eta == 0.0 {
        return Ok(vec![1.0; norms.len()]);
    }
    let factors = match kind {
        RegularizerKind::L1 => norms.iter().map(|&n| soft_factor(n, lambda_eta)).collect(),
        RegularizerKind::LHalf => {
            let cutoff = half_threshold_cutoff(lambda_eta);
            norms
                .iter()
                .map(|&n| {
                    if n > cutoff {
                        let phi = (lambda_eta / 8.0 * (n / 3.0).powf(-1.5)).acos();
                        2.0 / 3.0
                            * (1.0 + (2.0 * std::f64::consts::PI / 3.0 - 2.0 / 3.0 * phi).cos())
                    } else {
                        0.0
                    }
                })
                .collect()
        }
        RegularizerKind::L1Minus2 => {
            let c_norm = norms
                .iter()
                .map(|&n| (n - lambda_eta).max(0.0).powi(2))
                .sum::<f64>()
                .sqrt();
            if c_norm == 0.0 {
                return Err(HingeError::DegenerateInput(format!(
                    "l1_minus_2 prox: every group norm is <= {lambda_eta:e}"
                )));
            }
            let expand = 1.0 + lambda_eta / c_norm;
            norms
                .iter()
                .map(|&n| expand * soft_factor(n, lambda_eta))
                .collect()
        }
        RegularizerKind::Logsum => {
            if !(epsilon > 0.0 && epsilon < lambda_eta.sqrt()) {
                return Err(HingeError::Parameter(format!(
                    "logsum needs 0 < epsilon < sqrt(lambda*eta) = {:e}, got {epsilon:e}",
                    lambda_eta.sqrt()
                )));
            }
            norms
                .iter()
                .map(|&n| logsum_norm(n, lambda_eta, epsilon).map_or(0.0, |t| t / n))
                .collect()
        }
    };
    Ok(factors)
}

fn soft_factor(norm: f64, lambda_eta: f64) -> f64 {
    if norm <= lambda_eta {
        0.0
    } else {
        1.0 - lambda_eta / norm
    }
}

/// Root `(c₁ + √c₂)/2` of the stationarity condition, kept only when it beats
/// the zero solution on the prox objective.
fn logsum_norm(norm: f64, lambda_eta: f64, epsilon: f64) -> Option<f64> {
    let c1 = norm - epsilon;
    let c2 = c1 * c1 - 4.0 * (lambda_eta - epsilon * norm);
    if c2 <= 0.0 {
        return None;
    }
    let root = 0.5 * (c1 + c2.sqrt());
    if root <= 0.0 {
        return None;
    }
    // Beyond the stationarity test the root must also beat t = 0:
    // λη·log(1 + t/ε) + (t − n)²/2 ≤ n²/2  ⇔  λη·log(1 + t/ε) ≤ t·(n − t/2)
    let lhs = lambda_eta * (root / epsilon).ln_1p();
    let rhs = root * (norm - 0.5 * root);
    (lhs <= rhs).then_some(root)
}

fn apply_single(a: &DenseMatrix, scheme: &GroupScheme, factors: &[f64]) -> Result<DenseMatrix> {
    let mut out = a.clone();
    scheme.scale_groups(&mut [&mut out], factors)?;
    Ok(out)
}

/// Group soft-thresholding: every group is scaled by `[1 − λη/‖A_g‖₂]₊`.
pub fn prox_l1(a: &DenseMatrix, scheme: &GroupScheme, step: f64) -> Result<DenseMatrix> {
    let norms = scheme.norms_of(&[a])?;
    apply_single(a, scheme, &shrink_factors(&norms, RegularizerKind::L1, step, 0.0)?)
}

/// Group half-thresholding.
pub fn prox_l_half(a: &DenseMatrix, scheme: &GroupScheme, step: f64) -> Result<DenseMatrix> {
    let norms = scheme.norms_of(&[a])?;
    apply_single(a, scheme, &shrink_factors(&norms, RegularizerKind::LHalf, step, 0.0)?)
}

/// Group ℓ1−2 operator; fails when no group norm exceeds `step`.
pub fn prox_l1_minus_2(a: &DenseMatrix, scheme: &GroupScheme, step: f64) -> Result<DenseMatrix> {
    let norms = scheme.norms_of(&[a])?;
    apply_single(a, scheme, &shrink_factors(&norms, RegularizerKind::L1Minus2, step, 0.0)?)
}

pub fn prox_logsum(a: &DenseMatrix, scheme: &GroupScheme, step: f64, epsilon: f64) -> Result<DenseMatrix> {
    let norms = scheme.norms_of(&[a])?;
    apply_single(a, scheme, &shrink_factors(&norms, RegularizerKind::Logsum, step, epsilon)?)
}

/// In-place prox over the matrices of a (possibly multi-matrix) scheme with
/// threshold `λη = spec.lambda · eta`.
pub fn prox_in_place(
    mats: &mut [&mut DenseMatrix],
    scheme: &GroupScheme,
    spec: &RegularizerSpec,
    eta: f64,
) -> Result<()> {
    spec.validate()?;
    let lambda_eta = spec.lambda * eta;
    let norms = {
        let views: Vec<&DenseMatrix> = mats.iter().map(|m| &**m).collect();
        scheme.norms_of(&views)?
    };
    let factors = shrink_factors(&norms, spec.kind, lambda_eta, spec.epsilon_for(lambda_eta))?;
    scheme.scale_groups(mats, &factors)
}

/// Φ applied to the group norms. The ℓ1−2 and logsum values are monitoring
/// conventions; only the prox operators drive optimization.
pub fn regularizer_value(a: &DenseMatrix, scheme: &GroupScheme, spec: &RegularizerSpec) -> Result<f64> {
    let norms = scheme.norms_of(&[a])?;
    Ok(penalty_of_norms(&norms, spec.kind, spec.epsilon.unwrap_or(1.0)))
}

pub fn penalty_of_norms(norms: &[f64], kind: RegularizerKind, epsilon: f64) -> f64 {
    match kind {
        RegularizerKind::L1 => norms.iter().sum(),
        RegularizerKind::LHalf => norms.iter().map(|n| n.sqrt()).sum(),
        RegularizerKind::L1Minus2 => {
            norms.iter().sum::<f64>() - norms.iter().map(|n| n * n).sum::<f64>().sqrt()
        }
        RegularizerKind::Logsum => norms.iter().map(|n| (n / epsilon).ln_1p()).sum(),
    }
}

/// Scalar penalty used by the brute-force oracle, scaled so that
/// `argmin λη·penalty(t) + (t − y)²/2` is the problem the closed forms solve.
///
/// The half-thresholding formula solves `(t − y)² + λη·√t`, which is weight
/// ½ on `√t` under the ½-scaled quadratic.
fn oracle_penalty(kind: RegularizerKind, t: f64, epsilon: f64) -> f64 {
    match kind {
        RegularizerKind::L1 => t,
        RegularizerKind::LHalf => 0.5 * t.sqrt(),
        // a single group carries no ℓ1−2 penalty: |t| − √(t²) = 0
        RegularizerKind::L1Minus2 => 0.0,
        RegularizerKind::Logsum => (t / epsilon).ln_1p(),
    }
}

const ORACLE_GRID: usize = 100_000;

/// Brute-force scalar prox: `argmin_{t ≥ 0} λ·penalty(t) + (t − y)²/(2·step)`
/// by a dense grid over `[0, 2y + 1]` refined with ternary search.
pub fn prox_oracle(group_norm: f64, spec: &RegularizerSpec, step: f64) -> f64 {
    let y = group_norm;
    let lambda_eta = spec.lambda * step;
    if spec.lambda == 0.0 || step == 0.0 {
        return y;
    }
    let epsilon = spec.epsilon_for(lambda_eta);
    let objective = |t: f64| lambda_eta * oracle_penalty(spec.kind, t, epsilon) + 0.5 * (t - y) * (t - y);
    minimize_on_grid(objective, 2.0 * y + 1.0)
}

fn minimize_on_grid(objective: impl Fn(f64) -> f64, upper: f64) -> f64 {
    let h = upper / ORACLE_GRID as f64;
    let mut best_t = 0.0;
    let mut best_f = objective(0.0);
    for i in 1..=ORACLE_GRID {
        let t = i as f64 * h;
        let f = objective(t);
        if f < best_f {
            best_f = f;
            best_t = t;
        }
    }
    let mut lo = (best_t - h).max(0.0);
    let mut hi = best_t + h;
    while hi - lo > 1e-10 {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if objective(m1) <= objective(m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    let refined = 0.5 * (lo + hi);
    // the bracket may have walked off an isolated minimum at zero
    if objective(0.0) <= objective(refined) {
        0.0
    } else {
        refined
    }
}

/// Joint oracle for the coupled ℓ1−2 operator over all group norms of a
/// layer: projected gradient descent on `t ≥ 0` from several starts.
pub fn l1_minus_2_joint_oracle(norms: &[f64], lambda_eta: f64) -> Vec<f64> {
    let y = norms;
    let objective = |t: &[f64]| {
        let l1: f64 = t.iter().sum();
        let l2 = t.iter().map(|v| v * v).sum::<f64>().sqrt();
        let fit: f64 = t.iter().zip(y).map(|(a, b)| 0.5 * (a - b) * (a - b)).sum();
        lambda_eta * (l1 - l2) + fit
    };
    let g = y.len();
    let mut starts: Vec<Vec<f64>> = vec![y.to_vec(), y.iter().map(|v| 0.5 * v).collect()];
    for axis in 0..g {
        let mut s = vec![0.0; g];
        s[axis] = y[axis].max(lambda_eta);
        starts.push(s);
    }
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mut t in starts {
        for _ in 0..20_000 {
            let norm = t.iter().map(|v| v * v).sum::<f64>().sqrt();
            let mut moved = 0.0f64;
            for k in 0..g {
                let grad_l2 = if norm > 0.0 { t[k] / norm } else { 0.0 };
                let grad = lambda_eta * (1.0 - grad_l2) + (t[k] - y[k]);
                let next = (t[k] - 0.5 * grad).max(0.0);
                moved = moved.max((next - t[k]).abs());
                t[k] = next;
            }
            if moved < 1e-14 {
                break;
            }
        }
        let f = objective(&t);
        if best.as_ref().map_or(true, |(bf, _)| f < *bf) {
            best = Some((f, t));
        }
    }
    best.expect("at least one start").1
}
