//! Cross-entropy, Jensen-Shannon prediction distillation and the weighted
//! four-term objective.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diffcore::{jsd_row, softmax_rows, Tape, Tensor, Var};
use crate::error::{Error, Result};

const SIMPLEX_TOL: f64 = 1e-9;

/// Weights of the structural, contrastive and JSD terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.5,
            lambda2: 1.0,
            lambda3: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_ce: f64,
    pub l_d: f64,
    pub l_c: f64,
    pub l_jsd: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

/// `l_ce + lambda1 * l_d + lambda2 * l_c + lambda3 * l_jsd`.
pub fn total_loss(l_ce: f64, l_d: f64, l_c: f64, l_jsd: f64, w: LossWeights) -> Result<LossReport> {
    for (component, v) in [("l_ce", l_ce), ("l_d", l_d), ("l_c", l_c), ("l_jsd", l_jsd)] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                component: component.to_string(),
                step: 0,
            });
        }
    }
    Ok(LossReport {
        l_ce,
        l_d,
        l_c,
        l_jsd,
        total: l_ce + w.lambda1 * l_d + w.lambda2 * l_c + w.lambda3 * l_jsd,
        lambda1: w.lambda1,
        lambda2: w.lambda2,
        lambda3: w.lambda3,
    })
}

fn check_labels(labels: &[u8], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Shape {
            op: "cross_entropy",
            lhs: vec![rows, classes],
            rhs: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y as usize >= classes) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: &[f64], label: u8) -> Result<f64> {
    check_labels(&[label], 1, logits.len())?;
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[label as usize])
}

/// Batch-mean cross-entropy on the tape; `logits` is `N x C`.
pub fn cross_entropy_loss(tape: &mut Tape, logits: Var, labels: &[u8]) -> Result<Var> {
    let t = tape.value(logits);
    let (rows, classes) = (t.rows(), t.cols());
    check_labels(labels, rows, classes)?;
    let idx: Arc<[usize]> = labels
        .iter()
        .enumerate()
        .map(|(n, &y)| n * classes + y as usize)
        .collect();
    let lp = tape.log_softmax(logits)?;
    let picked = tape.gather_flat(lp, idx)?;
    let mean = tape.mean(picked);
    Ok(tape.scale(mean, -1.0))
}

fn check_distribution(name: &str, p: &[f64]) -> Result<()> {
    if p.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::invalid(format!("{name} has a negative or NaN entry")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::invalid(format!("{name} sums to {s}, not 1")));
    }
    Ok(())
}

/// Jensen-Shannon divergence in nats, with `0 log 0 = 0`.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape {
            op: "jsd",
            lhs: vec![p.len()],
            rhs: vec![q.len()],
        });
    }
    check_distribution("p", p)?;
    check_distribution("q", q)?;
    Ok(jsd_row(p, q))
}

/// Batch-mean JSD between the softmax of two logit matrices.
pub fn jsd_loss(tape: &mut Tape, logits_a: Var, logits_b: Var) -> Result<Var> {
    let p = tape.softmax(logits_a)?;
    let q = tape.softmax(logits_b)?;
    let rows = tape.jsd_rows(p, q)?;
    Ok(tape.mean(rows))
}

/// Row-wise softmax of a logit matrix, off the tape.
pub fn probabilities(logits: &Tensor) -> Tensor {
    softmax_rows(logits)
}
