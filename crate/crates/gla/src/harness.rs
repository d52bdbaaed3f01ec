//! Training, evaluation and comparison orchestration.
//!
//! Training processes batches of pairs sequentially (instance counts vary
//! per pair, so there is no tensor batching): forward, threshold the final
//! probabilities, tally outcome counts, schedule the guided weights, build
//! the three-stage loss, backprop, and average gradients over the batch for
//! one Adam step. Everything is a pure function of (seed, config, dataset);
//! reruns are bitwise identical.
//!
//! Metrics are per-pair precision/recall/F-scores plus the deviation of the
//! essential matrix estimated from predicted inliers; dataset aggregates are
//! arithmetic means of per-pair values, never pooled counts.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::data::PairRecord;
use crate::diffcore::{adam_step, grad_check, AdamConfig, AdamState, Matrix, Tape};
use crate::error::{Error, Result};
use crate::geometry::{
    e_deviation, eight_point, ransac, Correspondence, RansacConfig, E_DEVIATION_SENTINEL,
};
use crate::guidedloss::{
    counts_to_pr, fn_derivatives, fn_score, guided_weights, ClassCounts, DerivativeMethod, FnSpec,
    LossWeights,
};
use crate::network::{forward, predict, total_loss, GlaNetConfig, GlaNetParams, MainLoss};
use crate::util::mix_seed;
use crate::{blocks, guidedloss};

/// Which loss supervises the final stage during training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossSelector {
    /// Scheduled weights guided by the configured Fn target.
    Guided,
    /// Fixed class-size-reciprocal weights.
    CostSensitive,
    /// Focal loss with the given focusing exponent.
    Focal { gamma: f64 },
}

#[derive(Debug, Clone, Copy)]
pub struct TrainRunConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub loss: LossSelector,
    pub net: GlaNetConfig,
}

impl TrainRunConfig {
    pub fn new(net: GlaNetConfig, loss: LossSelector, epochs: usize, seed: u64) -> Self {
        TrainRunConfig {
            epochs,
            batch_size: 16,
            learning_rate: 1e-3,
            seed,
            loss,
            net,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be ≥ 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if let LossSelector::Focal { gamma } = self.loss {
            if !(gamma >= 0.0) {
                return Err(Error::Config("focal gamma must be ≥ 0".into()));
            }
        }
        Ok(())
    }
}

/// One training-log entry per pair per iteration. `counts` feeds the replay
/// check and is not part of the CSV schema.
#[derive(Debug, Clone)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub iter: usize,
    pub pair_id: usize,
    pub loss1: f64,
    pub loss2: f64,
    pub loss3: f64,
    pub total: f64,
    pub lambda: f64,
    pub mu: f64,
    pub clamped: bool,
    pub counts: Option<ClassCounts>,
}

pub struct TrainOutcome {
    pub params: GlaNetParams,
    pub log: Vec<TrainLogRow>,
    /// Pairs whose guided weights hit the clamp.
    pub clamp_events: usize,
    /// Mean total loss per epoch, in epoch order.
    pub epoch_mean_loss: Vec<f64>,
}

/// Attach dataset indices to a subset of pairs (split selection).
pub fn indexed<'a>(pairs: &'a [PairRecord], ids: &[usize]) -> Result<Vec<(usize, &'a PairRecord)>> {
    ids.iter()
        .map(|&i| {
            pairs
                .get(i)
                .map(|p| (i, p))
                .ok_or_else(|| Error::contract(format!("pair index {i} out of range")))
        })
        .collect()
}

/// Deterministic in-place Fisher-Yates with a dedicated stream per epoch.
fn shuffled_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xE70C + epoch as u64));
    let mut order: Vec<usize> = (0..len).collect();
    for i in (1..len).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Train on the given (dataset-id, pair) list.
pub fn train(pairs: &[(usize, &PairRecord)], config: &TrainRunConfig) -> Result<TrainOutcome> {
    train_with_checkpoints(pairs, config, |_, _| Ok(()))
}

/// [`train`] with a per-epoch callback (checkpoint cadence lives in the
/// caller).
pub fn train_with_checkpoints(
    pairs: &[(usize, &PairRecord)],
    config: &TrainRunConfig,
    mut on_epoch: impl FnMut(usize, &GlaNetParams) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::contract("training split is empty"));
    }

    let mut params = GlaNetParams::init(&config.net, mix_seed(config.seed, 1))?;
    let shapes = params.shapes();
    let mut adam = AdamState::new(&shapes, AdamConfig::default());
    let fn_spec = FnSpec::new(config.net.fn_n)?;

    let mut log = Vec::new();
    let mut clamp_events = 0usize;
    let mut epoch_mean_loss = Vec::with_capacity(config.epochs);
    let mut iter = 0usize;

    for epoch in 0..config.epochs {
        let order = shuffled_order(pairs.len(), config.seed, epoch);
        let mut epoch_loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grad_accum: Vec<Matrix> =
                shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect();

            for &slot in batch {
                let (pair_id, pair) = pairs[slot];
                let coords = pair.coords_matrix();
                let mut tape = Tape::new();
                let (trace, bound) = forward(&mut tape, &params, &config.net, &coords)?;

                let mask = predict(&trace.final_probs, config.net.threshold)?;
                let counts = ClassCounts::from_predictions(&pair.labels, &mask)?;
                let (main, lambda, mu, clamped) = match config.loss {
                    LossSelector::Guided => {
                        if counts.n_pos == 0 || counts.n_neg == 0 {
                            // Single-class pair: the loss drops the missing
                            // term; the weights are inert.
                            let w = LossWeights::balanced();
                            (MainLoss::Guided(w), w.lambda, w.mu, false)
                        } else {
                            let sched = guided_weights(&counts, fn_spec)?;
                            (
                                MainLoss::Guided(sched.weights),
                                sched.weights.lambda,
                                sched.weights.mu,
                                sched.clamped,
                            )
                        }
                    }
                    LossSelector::CostSensitive => (MainLoss::CostSensitive, 0.5, 0.5, false),
                    LossSelector::Focal { gamma } => (MainLoss::Focal { gamma }, 0.5, 0.5, false),
                };
                clamp_events += usize::from(clamped);

                let (total_node, breakdown) =
                    total_loss(&mut tape, &trace, &pair.labels, &config.net, &main).map_err(
                        |e| match e {
                            Error::NonFinite(_) => {
                                Error::NonFinite(format!("training loss on pair {pair_id}"))
                            }
                            other => other,
                        },
                    )?;
                tape.backward(total_node)?;
                for (acc, g) in grad_accum.iter_mut().zip(bound.gradients(&tape)) {
                    acc.add_assign(&g);
                }
                epoch_loss_sum += breakdown.total;

                log.push(TrainLogRow {
                    epoch,
                    iter,
                    pair_id,
                    loss1: breakdown.loss1,
                    loss2: breakdown.loss2,
                    loss3: breakdown.loss3,
                    total: breakdown.total,
                    lambda,
                    mu,
                    clamped,
                    counts: Some(counts),
                });
            }

            let inv = 1.0 / batch.len() as f64;
            for g in &mut grad_accum {
                for v in g.data_mut() {
                    *v *= inv;
                }
            }
            let mut named = params.named_tensors_mut();
            let mut refs: Vec<(&str, &mut Matrix)> = named
                .iter_mut()
                .map(|(n, m)| (n.as_str(), &mut **m))
                .collect();
            adam_step(&mut refs, &grad_accum, &mut adam, config.learning_rate)?;
            iter += 1;
        }
        epoch_mean_loss.push(epoch_loss_sum / pairs.len() as f64);
        on_epoch(epoch, &params)?;
    }

    Ok(TrainOutcome {
        params,
        log,
        clamp_events,
        epoch_mean_loss,
    })
}

/// Replay the guided-weight identity against the logged counts: every
/// unclamped two-class row must satisfy the weight-ratio equation within
/// 1e-9 relative.
pub fn replay_check(log: &[TrainLogRow], fn_n: f64) -> Result<bool> {
    let spec = FnSpec::new(fn_n)?;
    for row in log {
        let Some(counts) = row.counts else { continue };
        if row.clamped || counts.n_pos == 0 || counts.n_neg == 0 {
            continue;
        }
        if (row.lambda + row.mu - 1.0).abs() > 1e-12 {
            return Ok(false);
        }
        let d = fn_derivatives(&counts, spec, DerivativeMethod::Analytic)?;
        let lhs = (row.lambda / counts.n_pos as f64) / (row.mu / counts.n_neg as f64);
        if (lhs - d.ratio).abs() / d.ratio > 1e-9 {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Per-pair classification and geometry quality.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairMetrics {
    pub pair_id: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub fn_score: f64,
    pub e_dev: f64,
}

/// Arithmetic means of per-pair metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsSummary {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub fn_score: f64,
    pub e_dev: f64,
}

pub struct EvalReport {
    pub rows: Vec<PairMetrics>,
    pub mean: MetricsSummary,
}

/// Score one predicted mask against a pair's labels and geometry. Pairs with
/// fewer than 8 predicted inliers get the sentinel deviation.
pub fn metrics_from_mask(
    pair_id: usize,
    pair: &PairRecord,
    mask: &[bool],
    fn_n: f64,
) -> Result<PairMetrics> {
    let counts = ClassCounts::from_predictions(&pair.labels, mask)?;
    let (p, r) = counts_to_pr(&counts)?;
    let f1 = fn_score(p, r, FnSpec::F1);
    let fscore = fn_score(p, r, FnSpec::new(fn_n)?);

    let corrs = pair.correspondences();
    let selected: Vec<Correspondence> = corrs
        .iter()
        .zip(mask.iter())
        .filter_map(|(c, &m)| m.then_some(*c))
        .collect();
    let e_dev = if selected.len() < 8 {
        E_DEVIATION_SENTINEL
    } else {
        match (eight_point(&selected), pair.e_gt_matrix()) {
            (Ok(e_hat), Ok(e_gt)) => e_deviation(&e_hat, &e_gt),
            _ => E_DEVIATION_SENTINEL,
        }
    };
    Ok(PairMetrics {
        pair_id,
        precision: p,
        recall: r,
        f1,
        fn_score: fscore,
        e_dev,
    })
}

pub fn summarize(rows: &[PairMetrics]) -> MetricsSummary {
    let n = rows.len().max(1) as f64;
    MetricsSummary {
        precision: rows.iter().map(|r| r.precision).sum::<f64>() / n,
        recall: rows.iter().map(|r| r.recall).sum::<f64>() / n,
        f1: rows.iter().map(|r| r.f1).sum::<f64>() / n,
        fn_score: rows.iter().map(|r| r.fn_score).sum::<f64>() / n,
        e_dev: rows.iter().map(|r| r.e_dev).sum::<f64>() / n,
    }
}

/// Evaluate trained parameters over a split: predict at the configured
/// threshold, score every pair, average per-pair metrics. Pairs without any
/// positive label are skipped (precision/recall undefined).
pub fn evaluate(
    params: &GlaNetParams,
    config: &GlaNetConfig,
    pairs: &[(usize, &PairRecord)],
) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::contract("evaluation split is empty"));
    }
    let rows: Vec<Option<PairMetrics>> = pairs
        .par_iter()
        .map(|&(pair_id, pair)| -> Result<Option<PairMetrics>> {
            if pair.inlier_count() == 0 {
                log::warn!("pair {pair_id} has no positive labels; skipped");
                return Ok(None);
            }
            let coords = pair.coords_matrix();
            let mut tape = Tape::new();
            let (trace, _) = forward(&mut tape, params, config, &coords)?;
            let mask = predict(&trace.final_probs, config.threshold)?;
            metrics_from_mask(pair_id, pair, &mask, config.fn_n).map(Some)
        })
        .collect::<Result<_>>()?;
    let rows: Vec<PairMetrics> = rows.into_iter().flatten().collect();
    if rows.is_empty() {
        return Err(Error::contract("every pair in the split was skipped"));
    }
    let mean = summarize(&rows);
    Ok(EvalReport { rows, mean })
}

/// Mean attention weight-ratio (inliers over outliers) per block, averaged
/// over pairs: index 0..crude_block_count are the crude subnet blocks.
pub fn attention_ratios(
    params: &GlaNetParams,
    config: &GlaNetConfig,
    pairs: &[(usize, &PairRecord)],
) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(Error::contract("attention diagnostic needs pairs"));
    }
    let per_pair: Vec<Vec<f64>> = pairs
        .par_iter()
        .map(|&(_, pair)| -> Result<Vec<f64>> {
            let coords = pair.coords_matrix();
            let mut tape = Tape::new();
            let (trace, _) = forward(&mut tape, params, config, &coords)?;
            trace
                .indicating
                .iter()
                .map(|ind| blocks::attention_ratio(ind, &pair.labels))
                .collect()
        })
        .collect::<Result<_>>()?;
    let blocks_count = per_pair[0].len();
    let mut means = vec![0.0; blocks_count];
    for ratios in &per_pair {
        for (m, &r) in means.iter_mut().zip(ratios.iter()) {
            *m += r;
        }
    }
    for m in &mut means {
        *m /= per_pair.len() as f64;
    }
    Ok(means)
}

/// One point of the retained-correspondence curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrfPoint {
    pub k: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub struct PrfSweep {
    pub points: Vec<PrfPoint>,
    /// Retention count with the highest F1 (ties take the smallest k).
    pub best_k: usize,
}

/// Sort instances by descending probability and score every top-k retention.
pub fn prf_sweep(probs: &[f64], labels: &[u8]) -> Result<PrfSweep> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(Error::contract(
            "probs and labels must be non-empty and equal length",
        ));
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    // Stable sort: ties keep index order, making the sweep deterministic.
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).expect("finite probs"));

    let n_pos = labels.iter().filter(|&&l| l != 0).count();
    let mut points = Vec::with_capacity(probs.len());
    let mut tp = 0usize;
    let mut best = (0usize, -1.0f64);
    for (rank, &idx) in order.iter().enumerate() {
        let k = rank + 1;
        tp += usize::from(labels[idx] != 0);
        let p = tp as f64 / k as f64;
        let r = if n_pos == 0 {
            0.0
        } else {
            tp as f64 / n_pos as f64
        };
        let f1 = fn_score(p, r, FnSpec::F1);
        if f1 > best.1 {
            best = (k, f1);
        }
        points.push(PrfPoint {
            k,
            precision: p,
            recall: r,
            f1,
        });
    }
    Ok(PrfSweep {
        points,
        best_k: best.0,
    })
}

/// One method's evaluation over a split.
pub struct MethodMetrics {
    pub method: String,
    pub rows: Vec<PairMetrics>,
    pub mean: MetricsSummary,
}

/// Run the RANSAC baseline and the network over the same pairs and score
/// both masks through the identical metrics path.
pub fn baseline_compare(
    pairs: &[(usize, &PairRecord)],
    params: &GlaNetParams,
    config: &GlaNetConfig,
    ransac_config: &RansacConfig,
) -> Result<Vec<MethodMetrics>> {
    if pairs.is_empty() {
        return Err(Error::contract("baseline comparison needs pairs"));
    }
    let ransac_rows: Vec<PairMetrics> = pairs
        .par_iter()
        .map(|&(pair_id, pair)| -> Result<PairMetrics> {
            let corrs = pair.correspondences();
            let per_pair = RansacConfig {
                seed: mix_seed(ransac_config.seed, pair_id as u64),
                ..*ransac_config
            };
            let result = ransac(&corrs, &per_pair)?;
            metrics_from_mask(pair_id, pair, &result.inliers, config.fn_n)
        })
        .collect::<Result<_>>()?;
    let network = evaluate(params, config, pairs)?;

    Ok(vec![
        MethodMetrics {
            method: "ransac".into(),
            mean: summarize(&ransac_rows),
            rows: ransac_rows,
        },
        MethodMetrics {
            method: "network".into(),
            mean: network.mean,
            rows: network.rows,
        },
    ])
}

// ── CSV output ──────────────────────────────────────────────────────────
//
// RFC-4180-style, LF line endings, '.' decimal separator, 17 significant
// digits so doubles roundtrip.

/// A float formatted with 17 significant digits.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_metrics_csv(path: impl AsRef<Path>, report: &EvalReport) -> Result<()> {
    let mut out = String::from("pair_id,precision,recall,f1,fn,e_dev\n");
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.pair_id,
            format_float(r.precision),
            format_float(r.recall),
            format_float(r.f1),
            format_float(r.fn_score),
            format_float(r.e_dev)
        ));
    }
    let m = &report.mean;
    out.push_str(&format!(
        "mean,{},{},{},{},{}\n",
        format_float(m.precision),
        format_float(m.recall),
        format_float(m.f1),
        format_float(m.fn_score),
        format_float(m.e_dev)
    ));
    fs::write(path, out)?;
    Ok(())
}

pub fn write_training_log_csv(path: impl AsRef<Path>, log: &[TrainLogRow]) -> Result<()> {
    let mut out = String::from("epoch,iter,pair_id,loss1,loss2,loss3,total,lambda,mu,clamped\n");
    for r in log {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.epoch,
            r.iter,
            r.pair_id,
            format_float(r.loss1),
            format_float(r.loss2),
            format_float(r.loss3),
            format_float(r.total),
            format_float(r.lambda),
            format_float(r.mu),
            u8::from(r.clamped)
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_baseline_csv(path: impl AsRef<Path>, methods: &[MethodMetrics]) -> Result<()> {
    let mut out = String::from("method,pair_id,precision,recall,f1,fn,e_dev\n");
    for m in methods {
        for r in &m.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                m.method,
                r.pair_id,
                format_float(r.precision),
                format_float(r.recall),
                format_float(r.f1),
                format_float(r.fn_score),
                format_float(r.e_dev)
            ));
        }
        out.push_str(&format!(
            "{},mean,{},{},{},{},{}\n",
            m.method,
            format_float(m.mean.precision),
            format_float(m.mean.recall),
            format_float(m.mean.f1),
            format_float(m.mean.fn_score),
            format_float(m.mean.e_dev)
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_curves_csv(path: impl AsRef<Path>, sweeps: &[(usize, PrfSweep)]) -> Result<()> {
    let mut out = String::from("pair_id,k,precision,recall,f1,best\n");
    for (pair_id, sweep) in sweeps {
        for p in &sweep.points {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                pair_id,
                p.k,
                format_float(p.precision),
                format_float(p.recall),
                format_float(p.f1),
                u8::from(p.k == sweep.best_k)
            ));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

// ── Gradient verification suite ─────────────────────────────────────────

pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
}

/// Finite-difference checks of each building block and of the end-to-end
/// network at the given config. Inputs are fixed and chosen away from relu
/// kinks; every entry's error should stay below 1e-4.
pub fn gradient_suite(config: &GlaNetConfig, seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut reports = Vec::new();
    let n = 12usize;
    let c = 3usize;
    let fixed = |r: usize, ch: usize, salt: u64| -> f64 {
        let k = (r as u64 + 1)
            .wrapping_mul(6364136223846793005)
            .wrapping_add((ch as u64 + 1).wrapping_mul(1442695040888963407))
            .wrapping_add(salt.wrapping_mul(mix_seed(seed, 3)));
        let v = ((k >> 33) % 2000) as f64 / 1000.0 - 1.0;
        // keep pre-activations clear of the relu kink
        if v.abs() < 0.05 {
            v + 0.1
        } else {
            v
        }
    };
    let x0 = Matrix::from_fn(n, c, |r, ch| fixed(r, ch, 1));
    let cot: Vec<f64> = (0..n * c).map(|i| 0.25 + fixed(i, 0, 2).abs()).collect();

    // pointwise linear: gradient in the weights
    {
        let w0: Vec<f64> = (0..c * c).map(|i| fixed(i, 1, 4) * 0.6).collect();
        let eval = |wv: &[f64]| {
            let mut t = Tape::new();
            let x = t.leaf(x0.clone());
            let w = t.trainable(Matrix::from_vec(c, c, wv.to_vec()).unwrap());
            let b = t.leaf(Matrix::zeros(1, c));
            let y = t.pointwise_linear(x, w, b).unwrap();
            let s = t.sigmoid(y);
            let wts = t.leaf(Matrix::from_vec(n, c, cot.clone()).unwrap());
            let prod = t.mul(s, wts).unwrap();
            let loss = t.sum_all(prod);
            (t, w, loss)
        };
        reports.push(check_one("pointwise_linear", &w0, eval)?);
    }

    // context normalization: gradient in the input
    {
        let flat: Vec<f64> = x0.data().to_vec();
        let eval = |xv: &[f64]| {
            let mut t = Tape::new();
            let x = t.trainable(Matrix::from_vec(n, c, xv.to_vec()).unwrap());
            let y = blocks::context_normalize(&mut t, x).unwrap();
            let wts = t.leaf(Matrix::from_vec(n, c, cot.clone()).unwrap());
            let prod = t.mul(y, wts).unwrap();
            let loss = t.sum_all(prod);
            (t, x, loss)
        };
        reports.push(check_one("context_normalize", &flat, eval)?);
    }

    // attention normalization: gradient in the logits
    {
        let r0: Vec<f64> = (0..n).map(|i| fixed(i, 2, 5) * 0.8).collect();
        let eval = |rv: &[f64]| {
            let mut t = Tape::new();
            let x = t.leaf(x0.clone());
            let r = t.trainable(Matrix::column_vector(rv));
            let y = blocks::inlier_attention_normalize(&mut t, x, r).unwrap();
            let wts = t.leaf(Matrix::from_vec(n, c, cot.clone()).unwrap());
            let prod = t.mul(y, wts).unwrap();
            let loss = t.sum_all(prod);
            (t, r, loss)
        };
        reports.push(check_one("inlier_attention_normalize", &r0, eval)?);
    }

    // softmax over instances
    {
        let r0: Vec<f64> = (0..n).map(|i| fixed(i, 3, 6)).collect();
        let eval = |rv: &[f64]| {
            let mut t = Tape::new();
            let r = t.trainable(Matrix::column_vector(rv));
            let s = t.softmax_instances(r).unwrap();
            let wts = t.leaf(Matrix::column_vector(&cot[..n]));
            let prod = t.mul(s, wts).unwrap();
            let loss = t.sum_all(prod);
            (t, r, loss)
        };
        reports.push(check_one("softmax_over_instances", &r0, eval)?);
    }

    // the three losses: gradient in the probabilities
    {
        let labels: Vec<u8> = (0..n).map(|i| u8::from(i % 3 == 0)).collect();
        let p0: Vec<f64> = (0..n)
            .map(|i| 0.15 + 0.7 * ((i * 7 % 10) as f64 / 10.0))
            .collect();
        let w = LossWeights {
            lambda: 0.35,
            mu: 0.65,
        };
        type LossBuilder<'a> =
            Box<dyn Fn(&mut Tape, crate::diffcore::NodeId) -> crate::diffcore::NodeId + 'a>;
        let builders: Vec<(&str, LossBuilder)> = vec![
            (
                "guided_bce_loss",
                Box::new(|t: &mut Tape, p| {
                    guidedloss::guided_bce_loss_node(t, p, &labels, &w).unwrap()
                }),
            ),
            (
                "cost_sensitive_loss",
                Box::new(|t: &mut Tape, p| guidedloss::l_loss_node(t, p, &labels).unwrap()),
            ),
            (
                "focal_loss",
                Box::new(|t: &mut Tape, p| {
                    guidedloss::focal_loss_node(t, p, &labels, 2.0).unwrap()
                }),
            ),
        ];
        for (name, build) in &builders {
            let eval = |pv: &[f64]| {
                let mut t = Tape::new();
                let p = t.trainable(Matrix::column_vector(pv));
                let loss = build(&mut t, p);
                (t, p, loss)
            };
            reports.push(check_one(name, &p0, eval)?);
        }
    }

    // learned-attention block, all parameters at once
    {
        let weights = GlaNetParams::init(
            &GlaNetConfig {
                channels: c,
                crude_blocks: 1,
                fine_blocks_per_pass: 1,
                ..GlaNetConfig::tiny()
            },
            mix_seed(seed, 7),
        )?;
        let block = weights.crude[0].clone();
        let flat0: Vec<f64> = [
            block.lin1.data(),
            block.lin2.data(),
            block.attn.as_ref().unwrap().data(),
        ]
        .concat();
        let eval = |flat: &[f64]| {
            let mut t = Tape::new();
            let x = t.leaf(x0.clone());
            let mut offset = 0;
            let mut next = |t: &mut Tape, rows: usize, cols: usize| {
                let m = Matrix::from_vec(rows, cols, flat[offset..offset + rows * cols].to_vec())
                    .unwrap();
                offset += rows * cols;
                t.trainable(m)
            };
            let w1 = next(&mut t, c, c);
            let w2 = next(&mut t, c, c);
            let aw = next(&mut t, c, 1);
            let params = blocks::IaBlockParams {
                w1,
                w2,
                attention: blocks::BlockAttention::Learned { w: aw },
            };
            let (out, _) = blocks::ia_block_forward(&mut t, x, &params, None).unwrap();
            let wts = t.leaf(Matrix::from_vec(n, c, cot.clone()).unwrap());
            let prod = t.mul(out, wts).unwrap();
            let loss = t.sum_all(prod);
            (t, (w1, w2, aw), loss)
        };
        let (mut t, ids, loss) = eval(&flat0);
        t.backward(loss)?;
        let analytic: Vec<f64> = [
            t.grad_or_zeros(ids.0),
            t.grad_or_zeros(ids.1),
            t.grad_or_zeros(ids.2),
        ]
        .iter()
        .flat_map(|m| m.data().to_vec())
        .collect();
        let err = grad_check(
            |flat| {
                let (t, _, loss) = eval(flat);
                t.scalar(loss).unwrap()
            },
            &analytic,
            &flat0,
            1e-5,
        )?;
        reports.push(GradCheckReport {
            name: "ia_block_learned".into(),
            max_rel_err: err,
        });
    }

    // end-to-end network at the requested config
    {
        let params = GlaNetParams::init(config, mix_seed(seed, 9))?;
        let coords = Matrix::from_fn(n, 4, |r, ch| fixed(r, ch, 11));
        let labels: Vec<u8> = (0..n).map(|i| u8::from(i % 2 == 0)).collect();
        let w = LossWeights {
            lambda: 0.4,
            mu: 0.6,
        };
        let flat0: Vec<f64> = params
            .named_tensors()
            .iter()
            .flat_map(|(_, m)| m.data().to_vec())
            .collect();
        let rebuild = |flat: &[f64]| {
            let mut p = params.clone();
            let mut offset = 0;
            for (_, m) in p.named_tensors_mut() {
                let len = m.data().len();
                m.data_mut().copy_from_slice(&flat[offset..offset + len]);
                offset += len;
            }
            p
        };
        let loss_of = |flat: &[f64]| -> f64 {
            let p = rebuild(flat);
            let mut tape = Tape::new();
            let (trace, _) = forward(&mut tape, &p, config, &coords).unwrap();
            let (total, _) =
                total_loss(&mut tape, &trace, &labels, config, &MainLoss::Guided(w)).unwrap();
            tape.scalar(total).unwrap()
        };
        let mut tape = Tape::new();
        let (trace, bound) = forward(&mut tape, &params, config, &coords)?;
        let (total, _) = total_loss(&mut tape, &trace, &labels, config, &MainLoss::Guided(w))?;
        tape.backward(total)?;
        let analytic: Vec<f64> = bound
            .gradients(&tape)
            .iter()
            .flat_map(|g| g.data().to_vec())
            .collect();
        let err = grad_check(loss_of, &analytic, &flat0, 1e-5)?;
        reports.push(GradCheckReport {
            name: "network_end_to_end".into(),
            max_rel_err: err,
        });
    }

    Ok(reports)
}

fn check_one(
    name: &str,
    x0: &[f64],
    eval: impl Fn(&[f64]) -> (Tape, crate::diffcore::NodeId, crate::diffcore::NodeId),
) -> Result<GradCheckReport> {
    let (mut tape, target, loss) = eval(x0);
    tape.backward(loss)?;
    let analytic = tape.grad_or_zeros(target).data().to_vec();
    let err = grad_check(
        |xv| {
            let (t, _, loss) = eval(xv);
            t.scalar(loss).unwrap()
        },
        &analytic,
        x0,
        1e-5,
    )?;
    Ok(GradCheckReport {
        name: name.into(),
        max_rel_err: err,
    })
}
