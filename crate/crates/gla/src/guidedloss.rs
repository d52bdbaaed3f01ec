//! Measurement-guided class weighting and the losses built on it.
//!
//! The classifier's per-pair loss splits positive and negative instances into
//! two separately weighted log-loss terms. The scheduler here picks the pair
//! of weights (λ, μ), λ + μ = 1, so that a decrease of the loss implies an
//! increase of the target F-score: it equates the weight ratio of the two
//! terms with the ratio of the F-score's partial derivatives with respect to
//! the two misclassification counts. Fixed-weight cost-sensitive loss and
//! focal loss are provided for comparison.

use crate::diffcore::{Matrix, NodeId, Tape};
use crate::error::{Error, Result};

/// λ and μ are clamped into [WEIGHT_CLAMP, 1 − WEIGHT_CLAMP] so both gradient
/// pathways stay alive under degenerate counts.
pub const WEIGHT_CLAMP: f64 = 1e-3;

/// Probabilities are clipped to [PROB_CLIP, 1 − PROB_CLIP] before logarithms.
pub const PROB_CLIP: f64 = 1e-7;

/// Per-pair classification outcome counts. `x` is the number of misclassified
/// positives (missed inliers), `y` the number of misclassified negatives
/// (outliers let through).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassCounts {
    pub n_pos: usize,
    pub n_neg: usize,
    pub x: usize,
    pub y: usize,
}

impl ClassCounts {
    pub fn new(n_pos: usize, n_neg: usize, x: usize, y: usize) -> Result<Self> {
        if x > n_pos || y > n_neg {
            return Err(Error::contract(format!(
                "class counts out of range: x={x} > n_pos={n_pos} or y={y} > n_neg={n_neg}"
            )));
        }
        Ok(ClassCounts { n_pos, n_neg, x, y })
    }

    /// Tally counts from ground-truth labels and a predicted inlier mask.
    pub fn from_predictions(labels: &[u8], predicted: &[bool]) -> Result<Self> {
        if labels.len() != predicted.len() {
            return Err(Error::contract(format!(
                "labels ({}) and predictions ({}) differ in length",
                labels.len(),
                predicted.len()
            )));
        }
        let mut c = ClassCounts {
            n_pos: 0,
            n_neg: 0,
            x: 0,
            y: 0,
        };
        for (&l, &p) in labels.iter().zip(predicted.iter()) {
            if l != 0 {
                c.n_pos += 1;
                if !p {
                    c.x += 1;
                }
            } else {
                c.n_neg += 1;
                if p {
                    c.y += 1;
                }
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.n_pos + self.n_neg
    }

    /// True positives after classification.
    pub fn true_positives(&self) -> usize {
        self.n_pos - self.x
    }
}

/// Which F-score guides the schedule: n = 1 balances precision and recall,
/// n = 2 favors recall, n = 0.5 favors precision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FnSpec {
    pub n: f64,
}

impl FnSpec {
    pub fn new(n: f64) -> Result<Self> {
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::contract(format!(
                "Fn exponent must be positive, got {n}"
            )));
        }
        Ok(FnSpec { n })
    }

    pub const F1: FnSpec = FnSpec { n: 1.0 };
}

/// Class weights of the two-term log loss; λ weighs positives, μ negatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
    pub mu: f64,
}

impl LossWeights {
    pub fn balanced() -> Self {
        LossWeights {
            lambda: 0.5,
            mu: 0.5,
        }
    }
}

/// Scheduler output: the weights plus whether the clamp fired (degenerate
/// counts; the weight-ratio identity does not hold when it did).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduledWeights {
    pub weights: LossWeights,
    pub clamped: bool,
}

/// Fixed weights of the cost-sensitive loss, reciprocal to the class sizes:
/// α = N_neg/N on positives, β = N_pos/N on negatives, so α·N_pos = β·N_neg.
/// Single-class inputs fall back to unit weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LLossConfig {
    pub alpha: f64,
    pub beta: f64,
}

impl LLossConfig {
    pub fn from_class_sizes(n_pos: usize, n_neg: usize) -> Self {
        let n = (n_pos + n_neg) as f64;
        if n_pos == 0 || n_neg == 0 {
            LLossConfig {
                alpha: 1.0,
                beta: 1.0,
            }
        } else {
            LLossConfig {
                alpha: n_neg as f64 / n,
                beta: n_pos as f64 / n,
            }
        }
    }

    pub fn from_labels(labels: &[u8]) -> Self {
        let n_pos = labels.iter().filter(|&&l| l != 0).count();
        LLossConfig::from_class_sizes(n_pos, labels.len() - n_pos)
    }
}

/// How [`fn_derivatives`] evaluates the partials.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DerivativeMethod {
    /// Unit-step numeric scheme: probe X by one instance, invert the score
    /// in Y to find the equivalent real-valued Y step.
    Algorithm1,
    /// Exact partial derivatives of the composed precision/recall form.
    Analytic,
}

/// Partial derivatives of the F-score with respect to the misclassification
/// counts, both ≤ 0, and their ratio ∂F_X / ∂F_Y ≥ 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FnDerivatives {
    pub d_x: f64,
    pub d_y: f64,
    pub ratio: f64,
}

/// Precision and recall from outcome counts:
/// P = TP/(TP + Y), R = TP/N_pos, with the 0/0 → 0 convention.
pub fn counts_to_pr(c: &ClassCounts) -> Result<(f64, f64)> {
    if c.n_pos == 0 {
        return Err(Error::contract(
            "recall undefined with zero positives; skip the pair",
        ));
    }
    let tp = c.true_positives() as f64;
    let denom = tp + c.y as f64;
    let p = if denom == 0.0 { 0.0 } else { tp / denom };
    let r = tp / c.n_pos as f64;
    Ok((p, r))
}

/// Fn = (1 + n²)·P·R / (n²·P + R), zero when the denominator vanishes.
pub fn fn_score(p: f64, r: f64, spec: FnSpec) -> f64 {
    let n2 = spec.n * spec.n;
    let denom = n2 * p + r;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + n2) * p * r / denom
    }
}

/// F-score straight from counts (precision/recall composition).
pub fn fn_from_counts(c: &ClassCounts, spec: FnSpec) -> Result<f64> {
    let (p, r) = counts_to_pr(c)?;
    Ok(fn_score(p, r, spec))
}

/// Real-valued continuation of the score in (x, y), used by the derivative
/// schemes: Fn = (1+n²)·T / (n²·N_pos + T + y) with T = N_pos − x.
fn fn_real(n_pos: f64, x: f64, y: f64, n2: f64) -> f64 {
    let t = n_pos - x;
    (1.0 + n2) * t / (n2 * n_pos + t + y)
}

/// Partial derivatives of the F-score in the misclassification counts.
///
/// Requires at least one true positive (N_pos − x ≥ 1); the caller clamps
/// the schedule instead when that fails.
pub fn fn_derivatives(
    c: &ClassCounts,
    spec: FnSpec,
    method: DerivativeMethod,
) -> Result<FnDerivatives> {
    if c.n_pos == 0 || c.true_positives() == 0 {
        return Err(Error::contract(
            "F-score derivatives need at least one true positive",
        ));
    }
    let n2 = spec.n * spec.n;
    let n_pos = c.n_pos as f64;
    let x = c.x as f64;
    let y = c.y as f64;
    let t = n_pos - x;

    match method {
        DerivativeMethod::Analytic => {
            let denom = n2 * n_pos + t + y;
            let d_x = -(1.0 + n2) * (n2 * n_pos + y) / (denom * denom);
            let d_y = -(1.0 + n2) * t / (denom * denom);
            Ok(FnDerivatives {
                d_x,
                d_y,
                ratio: (n2 * n_pos + y) / t,
            })
        }
        DerivativeMethod::Algorithm1 => {
            // Probe step in X: one fewer misclassified positive.
            let f0 = fn_real(n_pos, x, y, n2);
            let f_step = fn_real(n_pos, x - 1.0, y, n2);
            let delta_fn = f_step - f0;
            let d_x = -delta_fn;

            // Matching step in Y: invert the score in y for the same gain.
            // y' = (1+n²)·T / F_target − n²·N_pos − T.
            let f_target = f0 + delta_fn;
            let y_prime = (1.0 + n2) * t / f_target - n2 * n_pos - t;
            if y_prime.is_finite() && y_prime >= 0.0 && y_prime <= c.n_neg as f64 {
                let delta_y = y_prime - y;
                let d_y = delta_fn / delta_y;
                Ok(FnDerivatives {
                    d_x,
                    d_y,
                    ratio: -delta_y,
                })
            } else {
                // Required score gain is unreachable within y ∈ [0, N_neg];
                // fall back to the exact ratio.
                let analytic = fn_derivatives(c, spec, DerivativeMethod::Analytic)?;
                Ok(FnDerivatives {
                    d_x,
                    d_y: d_x / analytic.ratio,
                    ratio: analytic.ratio,
                })
            }
        }
    }
}

/// Schedule (λ, μ) so the weighted 0-1 loss and the target F-score are
/// perfectly negatively correlated: (λ/N_pos)/(μ/N_neg) = ∂F_X/∂F_Y, with
/// λ + μ = 1 and both clamped into [1e-3, 1 − 1e-3].
pub fn guided_weights(c: &ClassCounts, spec: FnSpec) -> Result<ScheduledWeights> {
    if c.n_pos == 0 || c.n_neg == 0 {
        return Err(Error::contract(
            "weight schedule needs both classes present; use the single-class loss fallback",
        ));
    }
    let (lambda_raw, derivable) = if c.true_positives() == 0 {
        // Every positive missed: the derivative ratio diverges.
        (f64::INFINITY, false)
    } else {
        let d = fn_derivatives(c, spec, DerivativeMethod::Analytic)?;
        (
            {
                let t = d.ratio * c.n_pos as f64 / c.n_neg as f64;
                t / (1.0 + t)
            },
            true,
        )
    };
    let lambda = if lambda_raw.is_finite() {
        lambda_raw.clamp(WEIGHT_CLAMP, 1.0 - WEIGHT_CLAMP)
    } else {
        1.0 - WEIGHT_CLAMP
    };
    let clamped = !derivable || lambda != lambda_raw;
    Ok(ScheduledWeights {
        weights: LossWeights {
            lambda,
            mu: 1.0 - lambda,
        },
        clamped,
    })
}

/// Check dloss·dFn ≤ 0 over the integer differential grid
/// (dX, dY) ∈ {−3..3}², using ∂l_X = λ/N_pos, ∂l_Y = μ/N_neg and the
/// analytic F-score partials. Meaningful for unclamped weights.
pub fn verify_negative_correlation(c: &ClassCounts, spec: FnSpec, w: &LossWeights) -> Result<bool> {
    let d = fn_derivatives(c, spec, DerivativeMethod::Analytic)?;
    let dl_x = w.lambda / c.n_pos as f64;
    let dl_y = w.mu / c.n_neg as f64;
    for dx in -3..=3 {
        for dy in -3..=3 {
            let (dx, dy) = (dx as f64, dy as f64);
            let dloss = dl_x * dx + dl_y * dy;
            let dfn = d.d_x * dx + d.d_y * dy;
            if dloss * dfn > 1e-12 {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

fn check_prob_labels(probs: &[f64], labels: &[u8]) -> Result<()> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(Error::contract(format!(
            "probs ({}) and labels ({}) must be non-empty and equal length",
            probs.len(),
            labels.len()
        )));
    }
    Ok(())
}

fn clip(p: f64) -> f64 {
    p.clamp(PROB_CLIP, 1.0 - PROB_CLIP)
}

/// Two-term weighted log loss:
/// −(λ·mean over positives of log p + μ·mean over negatives of log(1−p)).
/// A missing class drops its term and the present term gets weight 1.
pub fn guided_bce_loss(probs: &[f64], labels: &[u8], w: &LossWeights) -> Result<f64> {
    check_prob_labels(probs, labels)?;
    let mut pos_sum = 0.0;
    let mut neg_sum = 0.0;
    let mut n_pos = 0usize;
    let mut n_neg = 0usize;
    for (&p, &l) in probs.iter().zip(labels.iter()) {
        let p = clip(p);
        if l != 0 {
            pos_sum += p.ln();
            n_pos += 1;
        } else {
            neg_sum += (1.0 - p).ln();
            n_neg += 1;
        }
    }
    Ok(match (n_pos, n_neg) {
        (0, n) => -neg_sum / n as f64,
        (n, 0) => -pos_sum / n as f64,
        (np, nn) => -(w.lambda * pos_sum / np as f64 + w.mu * neg_sum / nn as f64),
    })
}

/// Cost-sensitive loss with fixed class weights reciprocal to class sizes:
/// −(1/N)(α·Σ_pos log p + β·Σ_neg log(1−p)), α = N_neg/N, β = N_pos/N.
/// Single-class pairs fall back to α = β = 1.
pub fn l_loss(probs: &[f64], labels: &[u8]) -> Result<f64> {
    check_prob_labels(probs, labels)?;
    let n = probs.len() as f64;
    let w = LLossConfig::from_labels(labels);
    let mut total = 0.0;
    for (&p, &l) in probs.iter().zip(labels.iter()) {
        let p = clip(p);
        total += if l != 0 {
            w.alpha * p.ln()
        } else {
            w.beta * (1.0 - p).ln()
        };
    }
    Ok(-total / n)
}

/// Focal loss: −(1/N)·Σ (1 − p_t)^γ·log p_t with p_t the probability of the
/// true class. γ = 0 reduces to unweighted binary cross-entropy.
pub fn focal_loss(probs: &[f64], labels: &[u8], gamma: f64) -> Result<f64> {
    check_prob_labels(probs, labels)?;
    if !(gamma >= 0.0) {
        return Err(Error::contract(format!("gamma must be ≥ 0, got {gamma}")));
    }
    let n = probs.len() as f64;
    let mut total = 0.0;
    for (&p, &l) in probs.iter().zip(labels.iter()) {
        let pt = if l != 0 { clip(p) } else { 1.0 - clip(p) };
        total += (1.0 - pt).powf(gamma) * pt.ln();
    }
    Ok(-total / n)
}

// ── Differentiable graph builders ───────────────────────────────────────
//
// The training path needs the same losses as tape nodes so gradients flow
// into the network. λ, μ, α, β are constants with respect to differentiation;
// gradients reach the probabilities only through the log terms.

/// 0/1 label masks as constant leaves: (positives, negatives).
fn label_masks(tape: &mut Tape, labels: &[u8]) -> (NodeId, NodeId) {
    let pos: Vec<f64> = labels
        .iter()
        .map(|&l| if l != 0 { 1.0 } else { 0.0 })
        .collect();
    let m_pos = tape.leaf(Matrix::column_vector(&pos));
    let m_neg = tape.affine(m_pos, -1.0, 1.0);
    (m_pos, m_neg)
}

struct LogTerms {
    pos_sum: NodeId,
    neg_sum: NodeId,
    n_pos: usize,
    n_neg: usize,
}

fn log_terms(tape: &mut Tape, probs: NodeId, labels: &[u8]) -> Result<LogTerms> {
    let (m_pos, m_neg) = label_masks(tape, labels);
    let p = tape.clamp(probs, PROB_CLIP, 1.0 - PROB_CLIP);
    let ln_p = tape.ln(p);
    let one_minus = tape.affine(p, -1.0, 1.0);
    let ln_q = tape.ln(one_minus);
    let pos = tape.mul(m_pos, ln_p)?;
    let neg = tape.mul(m_neg, ln_q)?;
    Ok(LogTerms {
        pos_sum: tape.sum_all(pos),
        neg_sum: tape.sum_all(neg),
        n_pos: labels.iter().filter(|&&l| l != 0).count(),
        n_neg: labels.iter().filter(|&&l| l == 0).count(),
    })
}

/// Tape version of [`guided_bce_loss`]; `probs` is an N×1 node.
pub fn guided_bce_loss_node(
    tape: &mut Tape,
    probs: NodeId,
    labels: &[u8],
    w: &LossWeights,
) -> Result<NodeId> {
    if tape.value(probs).shape() != (labels.len(), 1) || labels.is_empty() {
        return Err(Error::contract("probs node must be N×1 matching labels"));
    }
    let t = log_terms(tape, probs, labels)?;
    Ok(match (t.n_pos, t.n_neg) {
        (0, n) => tape.affine(t.neg_sum, -1.0 / n as f64, 0.0),
        (n, 0) => tape.affine(t.pos_sum, -1.0 / n as f64, 0.0),
        (np, nn) => {
            let a = tape.affine(t.pos_sum, -w.lambda / np as f64, 0.0);
            let b = tape.affine(t.neg_sum, -w.mu / nn as f64, 0.0);
            tape.add(a, b)?
        }
    })
}

/// Tape version of [`l_loss`].
pub fn l_loss_node(tape: &mut Tape, probs: NodeId, labels: &[u8]) -> Result<NodeId> {
    if tape.value(probs).shape() != (labels.len(), 1) || labels.is_empty() {
        return Err(Error::contract("probs node must be N×1 matching labels"));
    }
    let t = log_terms(tape, probs, labels)?;
    let n = labels.len() as f64;
    let w = LLossConfig::from_labels(labels);
    let a = tape.affine(t.pos_sum, -w.alpha / n, 0.0);
    let b = tape.affine(t.neg_sum, -w.beta / n, 0.0);
    tape.add(a, b)
}

/// Tape version of [`focal_loss`].
pub fn focal_loss_node(
    tape: &mut Tape,
    probs: NodeId,
    labels: &[u8],
    gamma: f64,
) -> Result<NodeId> {
    if tape.value(probs).shape() != (labels.len(), 1) || labels.is_empty() {
        return Err(Error::contract("probs node must be N×1 matching labels"));
    }
    let (m_pos, m_neg) = label_masks(tape, labels);
    let p = tape.clamp(probs, PROB_CLIP, 1.0 - PROB_CLIP);
    let q = tape.affine(p, -1.0, 1.0);
    let pos_part = tape.mul(m_pos, p)?;
    let neg_part = tape.mul(m_neg, q)?;
    let pt = tape.add(pos_part, neg_part)?;
    let miss = tape.affine(pt, -1.0, 1.0);
    let focus = tape.pow_const(miss, gamma);
    let ln_pt = tape.ln(pt);
    let term = tape.mul(focus, ln_pt)?;
    let sum = tape.sum_all(term);
    Ok(tape.affine(sum, -1.0 / labels.len() as f64, 0.0))
}
