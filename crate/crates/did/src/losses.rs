//! Scalar training objectives: the pairwise AUC surrogate, BCE, the blended
//! classification loss, domain cross-entropy, and the Jensen-Shannon mutual
//! information objective.
//!
//! Every loss comes as a pair: a value function and an analytic gradient with
//! respect to the real-vector inputs. The autodiff graph wraps these, and the
//! tests check each gradient against central finite differences.

use serde::{Deserialize, Serialize};

use crate::error::{DidError, Result};

/// Hyperparameters of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Margin of the pairwise AUC penalty, in (0, 1].
    pub gamma: f64,
    /// Exponent of the pairwise AUC penalty, > 1.
    pub p: f64,
    /// BCE/AUC blend: l_cls = alpha * bce + (1 - alpha) * auc.
    pub alpha: f64,
    pub lambda_dec: f64,
    pub lambda_cls: f64,
    pub lambda_dom: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma: 0.15,
            p: 2.0,
            alpha: 0.5,
            lambda_dec: 0.01,
            lambda_cls: 1.0,
            lambda_dom: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(DidError::Config(format!(
                "gamma must be in (0, 1], got {}",
                self.gamma
            )));
        }
        if !(self.p > 1.0) {
            return Err(DidError::Config(format!("p must be > 1, got {}", self.p)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(DidError::Config(format!(
                "alpha must be in [0, 1], got {}",
                self.alpha
            )));
        }
        for (name, v) in [
            ("lambda_dec", self.lambda_dec),
            ("lambda_cls", self.lambda_cls),
            ("lambda_dom", self.lambda_dom),
        ] {
            if !(v >= 0.0) {
                return Err(DidError::Config(format!(
                    "{name} must be nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-batch loss values. `l_dom` and `mi_estimate` are absent when the
/// corresponding branch is ablated away.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_auc: f64,
    pub l_bce: f64,
    pub l_cls: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_dom: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mi_estimate: Option<f64>,
    pub l_total: f64,
}

/// ln(1 + e^x) without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic sigmoid, evaluated on the stable branch.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(sigmoid(x)) = -softplus(-x).
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// Hinge-power penalty for one fake/real score pair: nonzero exactly when the
/// fake score fails to clear the real score by the margin.
pub fn auc_pair_penalty(si: f64, sj: f64, gamma: f64, p: f64) -> f64 {
    let diff = si - sj;
    if diff < gamma {
        // On this branch -(diff - gamma) > 0, so the real power is well-defined.
        pow_pos(gamma - diff, p)
    } else {
        0.0
    }
}

fn pow_pos(base: f64, p: f64) -> f64 {
    if p == 2.0 {
        base * base
    } else {
        base.powf(p)
    }
}

fn split_classes(labels: &[u8]) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut fakes = Vec::new();
    let mut reals = Vec::new();
    for (i, &y) in labels.iter().enumerate() {
        match y {
            0 => reals.push(i),
            1 => fakes.push(i),
            other => {
                return Err(DidError::Data(format!(
                    "label must be 0 or 1, got {other} at index {i}"
                )))
            }
        }
    }
    if fakes.is_empty() || reals.is_empty() {
        return Err(DidError::Data(
            "AUC loss needs at least one fake and one real sample in the batch".into(),
        ));
    }
    Ok((fakes, reals))
}

/// Mean pairwise penalty over all fake/real score pairs in the batch.
pub fn auc_loss(scores: &[f64], labels: &[u8], gamma: f64, p: f64) -> Result<f64> {
    assert_eq!(scores.len(), labels.len(), "scores/labels length mismatch");
    let (fakes, reals) = split_classes(labels)?;
    let mut sum = 0.0;
    for &i in &fakes {
        for &j in &reals {
            sum += auc_pair_penalty(scores[i], scores[j], gamma, p);
        }
    }
    Ok(sum / (fakes.len() * reals.len()) as f64)
}

/// d auc_loss / d scores.
pub fn auc_loss_grad(scores: &[f64], labels: &[u8], gamma: f64, p: f64) -> Result<Vec<f64>> {
    let (fakes, reals) = split_classes(labels)?;
    let scale = 1.0 / (fakes.len() * reals.len()) as f64;
    let mut grad = vec![0.0; scores.len()];
    for &i in &fakes {
        for &j in &reals {
            let diff = scores[i] - scores[j];
            if diff < gamma {
                // d/d_diff (gamma - diff)^p = -p (gamma - diff)^(p-1)
                let d = -p * pow_pos(gamma - diff, p - 1.0) * scale;
                grad[i] += d;
                grad[j] -= d;
            }
        }
    }
    Ok(grad)
}

/// Mean binary cross-entropy over logits, stabilized through softplus.
pub fn bce_loss(logits: &[f64], labels: &[u8]) -> Result<f64> {
    assert_eq!(logits.len(), labels.len(), "logits/labels length mismatch");
    if logits.is_empty() {
        return Err(DidError::Data("BCE loss over an empty batch".into()));
    }
    let sum: f64 = logits
        .iter()
        .zip(labels)
        .map(|(&s, &y)| if y == 1 { softplus(-s) } else { softplus(s) })
        .sum();
    Ok(sum / logits.len() as f64)
}

/// d bce_loss / d logits = (sigmoid(s) - y) / n.
pub fn bce_grad(logits: &[f64], labels: &[u8]) -> Vec<f64> {
    let n = logits.len() as f64;
    logits
        .iter()
        .zip(labels)
        .map(|(&s, &y)| (sigmoid(s) - f64::from(y)) / n)
        .collect()
}

/// Blended classification loss: (l_cls, l_bce, l_auc).
pub fn cls_loss(
    logits: &[f64],
    labels: &[u8],
    config: &LossConfig,
) -> Result<(f64, f64, f64)> {
    let l_bce = bce_loss(logits, labels)?;
    let l_auc = auc_loss(logits, labels, config.gamma, config.p)?;
    let l_cls = config.alpha * l_bce + (1.0 - config.alpha) * l_auc;
    Ok((l_cls, l_bce, l_auc))
}

fn one_hot_index(row: &[u8], row_idx: usize) -> Result<usize> {
    let mut hit = None;
    for (j, &v) in row.iter().enumerate() {
        match v {
            0 => {}
            1 => {
                if hit.is_some() {
                    return Err(DidError::Data(format!(
                        "domain row {row_idx} has more than one active entry"
                    )));
                }
                hit = Some(j);
            }
            other => {
                return Err(DidError::Data(format!(
                    "domain row {row_idx} has non-binary entry {other}"
                )))
            }
        }
    }
    hit.ok_or_else(|| DidError::Data(format!("domain row {row_idx} has no active entry")))
}

/// Mean cross-entropy of domain logits against one-hot domain rows.
///
/// `domain_logits` is row-major n x (k+1).
pub fn domain_loss(domain_logits: &[f64], domains: &[Vec<u8>]) -> Result<f64> {
    let n = domains.len();
    if n == 0 {
        return Err(DidError::Data("domain loss over an empty batch".into()));
    }
    let cols = domain_logits.len() / n;
    assert_eq!(cols * n, domain_logits.len(), "logit matrix is not n x (k+1)");
    let mut targets = Vec::with_capacity(n);
    for (i, row) in domains.iter().enumerate() {
        if row.len() != cols {
            return Err(DidError::Data(format!(
                "domain row {i} has length {} but logits have {cols} columns",
                row.len()
            )));
        }
        targets.push(one_hot_index(row, i)?);
    }
    Ok(cross_entropy(domain_logits, cols, &targets))
}

/// Cross-entropy with integer targets; logits row-major n x cols.
pub(crate) fn cross_entropy(logits: &[f64], cols: usize, targets: &[usize]) -> f64 {
    let n = targets.len();
    let mut sum = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let row = &logits[i * cols..(i + 1) * cols];
        sum += log_sum_exp(row) - row[t];
    }
    sum / n as f64
}

/// d cross_entropy / d logits = (softmax - one_hot) / n.
pub(crate) fn cross_entropy_grad(logits: &[f64], cols: usize, targets: &[usize]) -> Vec<f64> {
    let n = targets.len();
    let mut grad = vec![0.0; logits.len()];
    for (i, &t) in targets.iter().enumerate() {
        let row = &logits[i * cols..(i + 1) * cols];
        let out = &mut grad[i * cols..(i + 1) * cols];
        softmax_into(row, out);
        out[t] -= 1.0;
        for v in out.iter_mut() {
            *v /= n as f64;
        }
    }
    grad
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_into(row: &[f64], out: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - m).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

/// Jensen-Shannon mutual-information objective.
///
/// `t_joint` holds statistic values on aligned pairs, `t_marginal` on pairs
/// with the second feature permuted within the batch. Always strictly
/// negative: both log-sigmoid terms are.
pub fn mi_objective(t_joint: &[f64], t_marginal: &[f64]) -> Result<f64> {
    if t_joint.is_empty() || t_marginal.is_empty() {
        return Err(DidError::Data("MI objective over an empty batch".into()));
    }
    let joint: f64 = t_joint.iter().map(|&t| log_sigmoid(t)).sum::<f64>() / t_joint.len() as f64;
    let marg: f64 =
        t_marginal.iter().map(|&t| -softplus(t)).sum::<f64>() / t_marginal.len() as f64;
    Ok(joint + marg)
}

/// Gradients of the MI objective w.r.t. the joint and marginal statistics.
pub fn mi_objective_grads(t_joint: &[f64], t_marginal: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let nj = t_joint.len() as f64;
    let nm = t_marginal.len() as f64;
    let gj = t_joint.iter().map(|&t| (1.0 - sigmoid(t)) / nj).collect();
    let gm = t_marginal.iter().map(|&t| -sigmoid(t) / nm).collect();
    (gj, gm)
}

/// Scalar inputs to the weighted total.
#[derive(Debug, Clone, Copy)]
pub struct TotalLossInputs {
    pub l_bce: f64,
    pub l_auc: f64,
    pub l_dom: Option<f64>,
    pub mi_estimate: Option<f64>,
}

/// Assembles the weighted total: lambda_dec * (-MI) + lambda_cls * l_cls +
/// lambda_dom * l_dom, with absent terms contributing zero.
pub fn total_loss(inputs: TotalLossInputs, config: &LossConfig) -> LossBreakdown {
    let l_cls = config.alpha * inputs.l_bce + (1.0 - config.alpha) * inputs.l_auc;
    let dec_term = inputs.mi_estimate.map_or(0.0, |mi| -mi);
    let dom_term = inputs.l_dom.unwrap_or(0.0);
    let l_total =
        config.lambda_dec * dec_term + config.lambda_cls * l_cls + config.lambda_dom * dom_term;
    LossBreakdown {
        l_auc: inputs.l_auc,
        l_bce: inputs.l_bce,
        l_cls,
        l_dom: inputs.l_dom,
        mi_estimate: inputs.mi_estimate,
        l_total,
    }
}
