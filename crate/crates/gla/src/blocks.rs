//! Permutation-equivariant building blocks.
//!
//! Context normalization (CN) standardizes each channel across the N
//! instances of one pair, injecting global context without imposing an
//! order. Inlier attention normalization (IAN) keeps CN's per-channel
//! standard deviation but replaces the mean with an attention-weighted mean,
//! so instances ranked as likely outliers contribute less to the context.
//! The attention block stacks two shared linear layers around IAN with a
//! residual skip.

use crate::diffcore::{Matrix, NodeId, Tape};
use crate::error::{Error, Result};

/// Added under the variance square root so constant channels normalize to
/// zero instead of NaN.
pub const VAR_EPS: f64 = 1e-8;

/// Per-instance attention state actually used by a block: raw logits r and
/// the positive weights softmax(r)·N, which sum to N and are all 1 for
/// uniform logits.
#[derive(Debug, Clone)]
pub struct IndicatingMatrix {
    pub logits: Matrix,
    pub weights: Matrix,
}

/// Where a block's attention logits come from.
#[derive(Debug, Clone, Copy)]
pub enum BlockAttention {
    /// Projected from the block's own first linear layer output (C → 1).
    Learned { w: NodeId },
    /// Supplied by the caller (a previous stage's result).
    External,
}

/// One attention block's parameters, bound to a tape as leaf nodes.
///
/// The block's linear maps and its attention projection carry no bias: the
/// normalization subtracts a (weighted) per-channel mean, which cancels any
/// per-channel shift, and softmax ignores a constant added to all logits, so
/// such biases would be exactly gradient-free dead weight.
#[derive(Debug, Clone, Copy)]
pub struct IaBlockParams {
    pub w1: NodeId,
    pub w2: NodeId,
    pub attention: BlockAttention,
}

fn require_instances(tape: &Tape, x: NodeId, what: &str) -> Result<usize> {
    let n = tape.value(x).rows();
    if n < 2 {
        return Err(Error::contract(format!(
            "{what} needs at least 2 instances, got {n}"
        )));
    }
    Ok(n)
}

/// Per-channel population standard deviation as a 1×C row, with the ε guard
/// inside the square root.
fn channel_sigma(tape: &mut Tape, x: NodeId, n: usize) -> Result<NodeId> {
    let inv_n = 1.0 / n as f64;
    let sums = tape.sum_rows(x);
    let mean = tape.affine(sums, inv_n, 0.0);
    let mean_b = tape.repeat_rows(mean, n)?;
    let centered = tape.sub(x, mean_b)?;
    let squared = tape.mul(centered, centered)?;
    let var_sums = tape.sum_rows(squared);
    let var = tape.affine(var_sums, inv_n, VAR_EPS);
    Ok(tape.sqrt(var))
}

/// Context normalization: per channel, (x − mean) / sqrt(var + ε) over the
/// N instances, population variance.
pub fn context_normalize(tape: &mut Tape, x: NodeId) -> Result<NodeId> {
    let n = require_instances(tape, x, "context_normalize")?;
    let inv_n = 1.0 / n as f64;
    let sums = tape.sum_rows(x);
    let mean = tape.affine(sums, inv_n, 0.0);
    let mean_b = tape.repeat_rows(mean, n)?;
    let centered = tape.sub(x, mean_b)?;
    let sigma = channel_sigma(tape, x, n)?;
    let sigma_b = tape.repeat_rows(sigma, n)?;
    tape.div(centered, sigma_b)
}

/// IAN with the softmax of the logits already taken (N×1, summing to 1).
/// σ is the plain per-channel deviation; only the mean is weighted:
/// μ_c = Σ_i softmax(r)_i · x[i, c].
fn ian_with_softmax(tape: &mut Tape, x: NodeId, softmax: NodeId) -> Result<NodeId> {
    let n = require_instances(tape, x, "inlier_attention_normalize")?;
    let weighted = tape.scale_rows(x, softmax)?;
    let mu = tape.sum_rows(weighted);
    let mu_b = tape.repeat_rows(mu, n)?;
    let centered = tape.sub(x, mu_b)?;
    let sigma = channel_sigma(tape, x, n)?;
    let sigma_b = tape.repeat_rows(sigma, n)?;
    tape.div(centered, sigma_b)
}

/// Inlier attention normalization from raw logits r (N×1). Uniform logits
/// reduce it exactly to [`context_normalize`].
pub fn inlier_attention_normalize(tape: &mut Tape, x: NodeId, r: NodeId) -> Result<NodeId> {
    require_instances(tape, x, "inlier_attention_normalize")?;
    let s = tape.softmax_instances(r)?;
    ian_with_softmax(tape, x, s)
}

/// One attention block:
/// `out = relu(IAN(lin2(relu(IAN(lin1(x), r))), r)) + x`, with r either
/// projected from lin1(x) (learned) or supplied (external). Returns the
/// block output and the indicating matrix it used.
pub fn ia_block_forward(
    tape: &mut Tape,
    x: NodeId,
    params: &IaBlockParams,
    external_r: Option<NodeId>,
) -> Result<(NodeId, IndicatingMatrix)> {
    let n = require_instances(tape, x, "ia_block_forward")?;
    let z1 = tape.matmul(x, params.w1)?;
    let r = match (params.attention, external_r) {
        (BlockAttention::Learned { w }, None) => tape.matmul(z1, w)?,
        (BlockAttention::External, Some(r)) => r,
        (BlockAttention::Learned { .. }, Some(_)) => {
            return Err(Error::contract(
                "learned-attention block must not receive external logits",
            ))
        }
        (BlockAttention::External, None) => {
            return Err(Error::contract(
                "external-attention block requires external logits",
            ))
        }
    };
    if tape.value(r).shape() != (n, 1) {
        return Err(Error::contract(format!(
            "attention logits must be {n}×1, got {:?}",
            tape.value(r).shape()
        )));
    }
    let s = tape.softmax_instances(r)?;
    let indicating = IndicatingMatrix {
        logits: tape.value(r).clone(),
        weights: tape.value(s).scale(n as f64),
    };

    let n1 = ian_with_softmax(tape, z1, s)?;
    let h = tape.relu(n1);
    let z2 = tape.matmul(h, params.w2)?;
    let n2 = ian_with_softmax(tape, z2, s)?;
    let a2 = tape.relu(n2);
    let out = tape.add(a2, x)?;
    Ok((out, indicating))
}

/// Mean attention weight of inliers divided by mean attention weight of
/// outliers. Needs both classes present.
pub fn attention_ratio(ind: &IndicatingMatrix, labels: &[u8]) -> Result<f64> {
    if ind.weights.rows() != labels.len() {
        return Err(Error::contract(format!(
            "indicating matrix has {} instances, labels {}",
            ind.weights.rows(),
            labels.len()
        )));
    }
    let mut pos_sum = 0.0;
    let mut neg_sum = 0.0;
    let mut n_pos = 0usize;
    let mut n_neg = 0usize;
    for (i, &l) in labels.iter().enumerate() {
        let w = ind.weights[(i, 0)];
        if l != 0 {
            pos_sum += w;
            n_pos += 1;
        } else {
            neg_sum += w;
            n_neg += 1;
        }
    }
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::contract(
            "attention ratio needs at least one inlier and one outlier",
        ));
    }
    Ok((pos_sum / n_pos as f64) / (neg_sum / n_neg as f64))
}
