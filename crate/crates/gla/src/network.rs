//! The coarse-to-fine correspondence classifier.
//!
//! A crude context subnet of attention blocks with learned indicating logits
//! produces preliminary inlier probabilities. A fine optimization subnet then
//! runs twice: its blocks take the previous stage's probabilities as external
//! attention (logits log(p + 1e-6)), refining the result. Each stage has a
//! 1-channel head with a logistic sigmoid; training supervises all three
//! stages (the first two with the fixed cost-sensitive loss, the last with
//! the scheduled guided loss), combined as ρ·loss1 + η·loss2 + loss3.
//!
//! Gradients flow through the external attention logits into earlier stages;
//! there is no stop-gradient anywhere.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{ia_block_forward, BlockAttention, IaBlockParams, IndicatingMatrix};
use crate::diffcore::{Matrix, NodeId, Tape};
use crate::error::{Error, Result};
use crate::guidedloss::{focal_loss_node, guided_bce_loss_node, l_loss_node, LossWeights};
use crate::util::checksum8;

/// Shift added to stage probabilities before the log that produces external
/// attention logits, keeping them finite at p = 0.
pub const ATTENTION_LOG_SHIFT: f64 = 1e-6;

const CHECKPOINT_MAGIC: &[u8; 4] = b"GLAC";
const CHECKPOINT_VERSION: u32 = 1;

/// Architecture and loss-combination hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlaNetConfig {
    /// Channel width C of every block.
    pub channels: usize,
    /// Blocks in the crude context subnet (learned attention).
    pub crude_blocks: usize,
    /// Blocks per fine optimization pass (external attention).
    pub fine_blocks_per_pass: usize,
    /// Fine passes; the three-stage supervision fixes this at 2.
    pub fine_passes: usize,
    /// Weight of the first auxiliary loss.
    pub rho: f64,
    /// Weight of the second auxiliary loss.
    pub eta: f64,
    /// F-score exponent guiding the main loss schedule.
    pub fn_n: f64,
    /// Probability threshold for predictions.
    pub threshold: f64,
    /// Reuse one set of fine-pass parameters for both passes.
    pub share_fine_passes: bool,
}

impl Default for GlaNetConfig {
    fn default() -> Self {
        GlaNetConfig {
            channels: 32,
            crude_blocks: 6,
            fine_blocks_per_pass: 3,
            fine_passes: 2,
            rho: 0.1,
            eta: 0.1,
            fn_n: 1.0,
            threshold: 0.5,
            share_fine_passes: false,
        }
    }
}

impl GlaNetConfig {
    /// Smallest useful configuration, for gradient checks and smoke tests.
    pub fn tiny() -> Self {
        GlaNetConfig {
            channels: 4,
            crude_blocks: 1,
            fine_blocks_per_pass: 1,
            ..GlaNetConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels < 1 || self.crude_blocks < 1 || self.fine_blocks_per_pass < 1 {
            return Err(Error::Config(
                "channels and block counts must be at least 1".into(),
            ));
        }
        if self.fine_passes != 2 {
            return Err(Error::Config(
                "three-stage supervision requires exactly 2 fine passes".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.rho) || !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config("rho and eta must lie in [0, 1]".into()));
        }
        if !(self.fn_n > 0.0) {
            return Err(Error::Config("fn_n must be positive".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config("threshold must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// One shared linear layer: weights plus a bias row.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub w: Matrix,
    pub b: Matrix,
}

/// Stored weights of one attention block; `attn` is present only for
/// learned-attention (crude subnet) blocks. Block linears and the attention
/// projection are bias-free: the normalization inside the block cancels
/// per-channel shifts, so such biases would never receive gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub lin1: Matrix,
    pub lin2: Matrix,
    pub attn: Option<Matrix>,
}

/// All trainable weights. The layout is a pure function of the config.
#[derive(Debug, Clone, PartialEq)]
pub struct GlaNetParams {
    pub embed: LinearParams,
    pub crude: Vec<BlockWeights>,
    /// One inner vec per fine pass (a single shared one when configured).
    pub fine: Vec<Vec<BlockWeights>>,
    /// Stage heads: preliminary, mid, final.
    pub heads: Vec<LinearParams>,
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-limit..limit))
}

fn init_linear(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> LinearParams {
    LinearParams {
        w: glorot(rng, rows, cols),
        b: Matrix::zeros(1, cols),
    }
}

fn init_block(rng: &mut ChaCha8Rng, c: usize, learned: bool) -> BlockWeights {
    let lin1 = glorot(rng, c, c);
    let lin2 = glorot(rng, c, c);
    BlockWeights {
        lin1,
        lin2,
        attn: learned.then(|| glorot(rng, c, 1)),
    }
}

impl GlaNetParams {
    /// Deterministic initialization from a seed: Glorot-uniform weights,
    /// zero biases, drawn in canonical parameter order.
    pub fn init(config: &GlaNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.channels;
        let embed = init_linear(&mut rng, 4, c);
        let crude = (0..config.crude_blocks)
            .map(|_| init_block(&mut rng, c, true))
            .collect();
        let pass_count = if config.share_fine_passes {
            1
        } else {
            config.fine_passes
        };
        let fine = (0..pass_count)
            .map(|_| {
                (0..config.fine_blocks_per_pass)
                    .map(|_| init_block(&mut rng, c, false))
                    .collect()
            })
            .collect();
        let heads = (0..3).map(|_| init_linear(&mut rng, c, 1)).collect();
        Ok(GlaNetParams {
            embed,
            crude,
            fine,
            heads,
        })
    }

    /// Tensors with their canonical names, in the fixed training order.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = Vec::new();
        out.push(("embed.w".into(), &self.embed.w));
        out.push(("embed.b".into(), &self.embed.b));
        for (i, b) in self.crude.iter().enumerate() {
            out.push((format!("crude{i}.w1"), &b.lin1));
            out.push((format!("crude{i}.w2"), &b.lin2));
            let attn = b.attn.as_ref().expect("crude blocks learn attention");
            out.push((format!("crude{i}.attn"), attn));
        }
        for (p, pass) in self.fine.iter().enumerate() {
            for (i, b) in pass.iter().enumerate() {
                out.push((format!("fine{p}.{i}.w1"), &b.lin1));
                out.push((format!("fine{p}.{i}.w2"), &b.lin2));
            }
        }
        for (k, h) in self.heads.iter().enumerate() {
            out.push((format!("head{k}.w"), &h.w));
            out.push((format!("head{k}.b"), &h.b));
        }
        out
    }

    /// Mutable tensors in the same canonical order as
    /// [`GlaNetParams::named_tensors`].
    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out: Vec<(String, &mut Matrix)> = Vec::new();
        out.push(("embed.w".into(), &mut self.embed.w));
        out.push(("embed.b".into(), &mut self.embed.b));
        for (i, b) in self.crude.iter_mut().enumerate() {
            out.push((format!("crude{i}.w1"), &mut b.lin1));
            out.push((format!("crude{i}.w2"), &mut b.lin2));
            let attn = b.attn.as_mut().expect("crude blocks learn attention");
            out.push((format!("crude{i}.attn"), attn));
        }
        for (p, pass) in self.fine.iter_mut().enumerate() {
            for (i, b) in pass.iter_mut().enumerate() {
                out.push((format!("fine{p}.{i}.w1"), &mut b.lin1));
                out.push((format!("fine{p}.{i}.w2"), &mut b.lin2));
            }
        }
        for (k, h) in self.heads.iter_mut().enumerate() {
            out.push((format!("head{k}.w"), &mut h.w));
            out.push((format!("head{k}.b"), &mut h.b));
        }
        out
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.named_tensors()
            .iter()
            .map(|(_, m)| m.shape())
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors()
            .iter()
            .map(|(_, m)| m.data().len())
            .sum()
    }
}

/// Leaf node ids of every parameter on a tape, in canonical order.
pub struct BoundParams {
    ids: Vec<NodeId>,
}

impl BoundParams {
    /// Gradients in canonical parameter order, zeros where no gradient
    /// reached the leaf.
    pub fn gradients(&self, tape: &Tape) -> Vec<Matrix> {
        self.ids.iter().map(|&id| tape.grad_or_zeros(id)).collect()
    }
}

struct Binder<'a> {
    tape: &'a mut Tape,
    ids: Vec<NodeId>,
}

impl Binder<'_> {
    fn linear(&mut self, p: &LinearParams) -> (NodeId, NodeId) {
        let w = self.tape.trainable(p.w.clone());
        let b = self.tape.trainable(p.b.clone());
        self.ids.push(w);
        self.ids.push(b);
        (w, b)
    }

    fn matrix(&mut self, m: &Matrix) -> NodeId {
        let id = self.tape.trainable(m.clone());
        self.ids.push(id);
        id
    }

    fn block(&mut self, p: &BlockWeights) -> IaBlockParams {
        let w1 = self.matrix(&p.lin1);
        let w2 = self.matrix(&p.lin2);
        let attention = match &p.attn {
            Some(a) => BlockAttention::Learned { w: self.matrix(a) },
            None => BlockAttention::External,
        };
        IaBlockParams { w1, w2, attention }
    }
}

/// Everything one forward pass produces: the three stage probability nodes
/// (for building losses on the same tape), value snapshots, and the
/// indicating matrices of every block in execution order.
pub struct ForwardTrace {
    pub prelim_node: NodeId,
    pub mid_node: NodeId,
    pub final_node: NodeId,
    pub prelim_probs: Vec<f64>,
    pub mid_probs: Vec<f64>,
    pub final_probs: Vec<f64>,
    pub indicating: Vec<IndicatingMatrix>,
    /// How many leading entries of `indicating` belong to the crude subnet.
    pub crude_block_count: usize,
}

/// Run the classifier over one pair's N×4 normalized correspondences.
pub fn forward(
    tape: &mut Tape,
    params: &GlaNetParams,
    config: &GlaNetConfig,
    coords: &Matrix,
) -> Result<(ForwardTrace, BoundParams)> {
    config.validate()?;
    if coords.rows() < 8 {
        return Err(Error::contract(format!(
            "forward needs at least 8 correspondences, got {}",
            coords.rows()
        )));
    }
    if coords.cols() != 4 {
        return Err(Error::contract(format!(
            "correspondences must be N×4, got N×{}",
            coords.cols()
        )));
    }
    if !coords.all_finite() {
        return Err(Error::NonFinite("input correspondences".into()));
    }

    let mut binder = Binder {
        tape,
        ids: Vec::new(),
    };
    let input = binder.tape.leaf(coords.clone());
    let (ew, eb) = binder.linear(&params.embed);
    let crude_blocks: Vec<IaBlockParams> = params.crude.iter().map(|b| binder.block(b)).collect();
    let fine_blocks: Vec<Vec<IaBlockParams>> = params
        .fine
        .iter()
        .map(|pass| pass.iter().map(|b| binder.block(b)).collect())
        .collect();
    let heads: Vec<(NodeId, NodeId)> = params.heads.iter().map(|h| binder.linear(h)).collect();
    let bound = BoundParams { ids: binder.ids };

    let head_probs = |tape: &mut Tape, x: NodeId, head: (NodeId, NodeId)| -> Result<NodeId> {
        let logits = tape.pointwise_linear(x, head.0, head.1)?;
        Ok(tape.sigmoid(logits))
    };

    let mut indicating = Vec::new();
    let mut x = tape.pointwise_linear(input, ew, eb)?;
    for block in &crude_blocks {
        let (out, ind) = ia_block_forward(tape, x, block, None)?;
        indicating.push(ind);
        x = out;
    }
    let crude_block_count = indicating.len();
    let prelim_node = head_probs(tape, x, heads[0])?;

    let mut stage_probs = prelim_node;
    let mut stage_nodes = Vec::new();
    for pass_idx in 0..config.fine_passes {
        let blocks = if config.share_fine_passes {
            &fine_blocks[0]
        } else {
            &fine_blocks[pass_idx]
        };
        let shifted = tape.affine(stage_probs, 1.0, ATTENTION_LOG_SHIFT);
        let r = tape.ln(shifted);
        for block in blocks {
            let (out, ind) = ia_block_forward(tape, x, block, Some(r))?;
            indicating.push(ind);
            x = out;
        }
        stage_probs = head_probs(tape, x, heads[pass_idx + 1])?;
        stage_nodes.push(stage_probs);
    }

    let trace = ForwardTrace {
        prelim_node,
        mid_node: stage_nodes[0],
        final_node: stage_nodes[1],
        prelim_probs: tape.value(prelim_node).data().to_vec(),
        mid_probs: tape.value(stage_nodes[0]).data().to_vec(),
        final_probs: tape.value(stage_nodes[1]).data().to_vec(),
        indicating,
        crude_block_count,
    };
    Ok((trace, bound))
}

/// Main-loss selection for the final stage; the two auxiliary stages always
/// use the fixed cost-sensitive loss.
pub enum MainLoss {
    Guided(LossWeights),
    CostSensitive,
    Focal { gamma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub loss1: f64,
    pub loss2: f64,
    pub loss3: f64,
    pub total: f64,
}

/// total = ρ·loss1 + η·loss2 + loss3 on the tape.
pub fn combine_losses(
    tape: &mut Tape,
    loss1: NodeId,
    loss2: NodeId,
    loss3: NodeId,
    rho: f64,
    eta: f64,
) -> Result<NodeId> {
    let a = tape.affine(loss1, rho, 0.0);
    let b = tape.affine(loss2, eta, 0.0);
    let partial = tape.add(a, b)?;
    tape.add(partial, loss3)
}

/// Build the three-stage training loss on the trace's tape.
pub fn total_loss(
    tape: &mut Tape,
    trace: &ForwardTrace,
    labels: &[u8],
    config: &GlaNetConfig,
    main: &MainLoss,
) -> Result<(NodeId, LossBreakdown)> {
    let loss1 = l_loss_node(tape, trace.prelim_node, labels)?;
    let loss2 = l_loss_node(tape, trace.mid_node, labels)?;
    let loss3 = match main {
        MainLoss::Guided(w) => guided_bce_loss_node(tape, trace.final_node, labels, w)?,
        MainLoss::CostSensitive => l_loss_node(tape, trace.final_node, labels)?,
        MainLoss::Focal { gamma } => focal_loss_node(tape, trace.final_node, labels, *gamma)?,
    };
    let total = combine_losses(tape, loss1, loss2, loss3, config.rho, config.eta)?;
    let breakdown = LossBreakdown {
        loss1: tape.scalar(loss1)?,
        loss2: tape.scalar(loss2)?,
        loss3: tape.scalar(loss3)?,
        total: tape.scalar(total)?,
    };
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    Ok((total, breakdown))
}

/// Threshold probabilities into an inlier mask; the boundary is inclusive
/// (p == threshold predicts inlier).
pub fn predict(probs: &[f64], threshold: f64) -> Result<Vec<bool>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::contract(format!(
            "threshold must lie in (0, 1), got {threshold}"
        )));
    }
    Ok(probs.iter().map(|&p| p >= threshold).collect())
}

// ── Checkpoint format ───────────────────────────────────────────────────
//
// Little-endian container: magic "GLAC", u32 version, u64 config JSON
// length, config JSON, u32 tensor count, then per tensor: u32 name length,
// name bytes, u32 rows, u32 cols, rows·cols f64 values. Footer: 8-byte
// truncated SHA-256 of everything before it.

/// Serialize parameters plus their config into the checkpoint container.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    params: &GlaNetParams,
    config: &GlaNetConfig,
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    let config_json = serde_json::to_vec(config)?;
    buf.write_u64::<LittleEndian>(config_json.len() as u64)?;
    buf.extend_from_slice(&config_json);

    let tensors = params.named_tensors();
    buf.write_u32::<LittleEndian>(tensors.len() as u32)?;
    for (name, m) in &tensors {
        buf.write_u32::<LittleEndian>(name.len() as u32)?;
        buf.extend_from_slice(name.as_bytes());
        buf.write_u32::<LittleEndian>(m.rows() as u32)?;
        buf.write_u32::<LittleEndian>(m.cols() as u32)?;
        for &v in m.data() {
            buf.write_f64::<LittleEndian>(v)?;
        }
    }
    let sum = checksum8(&buf);
    buf.extend_from_slice(&sum);
    fs::write(path, buf)?;
    Ok(())
}

/// Read a checkpoint back into parameters and config, verifying layout and
/// checksum.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(GlaNetParams, GlaNetConfig)> {
    let bytes = fs::read(&path)?;
    if bytes.len() < CHECKPOINT_MAGIC.len() + 4 + 8 + 4 + 8 {
        return Err(Error::Format("checkpoint file truncated".into()));
    }
    let (body, stored_sum) = bytes.split_at(bytes.len() - 8);
    if checksum8(body) != stored_sum {
        return Err(Error::Format("checkpoint checksum mismatch".into()));
    }
    let mut cur = Cursor::new(body);
    let mut magic = [0u8; 4];
    std::io::Read::read_exact(&mut cur, &mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = cur.read_u32::<LittleEndian>()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let json_len = cur.read_u64::<LittleEndian>()? as usize;
    if json_len > body.len() {
        return Err(Error::Format(
            "checkpoint config length out of range".into(),
        ));
    }
    let mut json = vec![0u8; json_len];
    std::io::Read::read_exact(&mut cur, &mut json)?;
    let config: GlaNetConfig = serde_json::from_slice(&json)?;
    config.validate()?;

    let count = cur.read_u32::<LittleEndian>()? as usize;
    let mut tensors: Vec<(String, Matrix)> = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = cur.read_u32::<LittleEndian>()? as usize;
        let mut name = vec![0u8; name_len];
        std::io::Read::read_exact(&mut cur, &mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rows = cur.read_u32::<LittleEndian>()? as usize;
        let cols = cur.read_u32::<LittleEndian>()? as usize;
        if rows == 0 || cols == 0 || rows.saturating_mul(cols) > body.len() {
            return Err(Error::Format(format!("tensor {name} has invalid shape")));
        }
        let mut data = vec![0.0f64; rows * cols];
        for v in &mut data {
            *v = cur.read_f64::<LittleEndian>()?;
        }
        let m = Matrix::from_vec(rows, cols, data)
            .map_err(|_| Error::Format(format!("tensor {name} has invalid shape")))?;
        tensors.push((name, m));
    }

    let params = rebuild_params(&config, tensors)?;
    Ok((params, config))
}

fn rebuild_params(config: &GlaNetConfig, tensors: Vec<(String, Matrix)>) -> Result<GlaNetParams> {
    // The template gives the expected names and shapes; the file must match
    // the canonical order exactly.
    let mut params = GlaNetParams::init(config, 0)?;
    {
        let mut slots = params.named_tensors_mut();
        if tensors.len() != slots.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, config implies {}",
                tensors.len(),
                slots.len()
            )));
        }
        for ((got_name, value), (want_name, slot)) in tensors.into_iter().zip(slots.iter_mut()) {
            if got_name != *want_name || value.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "checkpoint tensor {got_name} {:?} does not match expected {want_name} {:?}",
                    value.shape(),
                    slot.shape()
                )));
            }
            if !value.all_finite() {
                return Err(Error::Format(format!(
                    "checkpoint tensor {got_name} contains non-finite values"
                )));
            }
            **slot = value;
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::grad_check;

    fn demo_coords(n: usize, salt: u64) -> Matrix {
        Matrix::from_fn(n, 4, |r, c| {
            let k = (r as u64 + 1)
                .wrapping_mul(2654435761)
                .wrapping_add((c as u64 + 1).wrapping_mul(40503))
                .wrapping_add(salt.wrapping_mul(104729));
            ((k % 2000) as f64) / 1000.0 - 1.0
        })
    }

    #[test]
    fn forward_produces_probabilities_in_open_interval() {
        let config = GlaNetConfig::tiny();
        let params = GlaNetParams::init(&config, 7).unwrap();
        let coords = demo_coords(20, 3);
        let mut tape = Tape::new();
        let (trace, _) = forward(&mut tape, &params, &config, &coords).unwrap();
        for probs in [&trace.prelim_probs, &trace.mid_probs, &trace.final_probs] {
            assert_eq!(probs.len(), 20);
            for &p in probs.iter() {
                assert!(p > 0.0 && p < 1.0, "probability out of range: {p}");
            }
        }
        assert_eq!(trace.crude_block_count, config.crude_blocks);
        assert_eq!(
            trace.indicating.len(),
            config.crude_blocks + config.fine_passes * config.fine_blocks_per_pass
        );
    }

    #[test]
    fn forward_rejects_small_or_malformed_input() {
        let config = GlaNetConfig::tiny();
        let params = GlaNetParams::init(&config, 7).unwrap();
        let mut tape = Tape::new();
        assert!(forward(&mut tape, &params, &config, &demo_coords(7, 0)).is_err());
        let mut tape = Tape::new();
        let bad = Matrix::zeros(10, 3);
        assert!(forward(&mut tape, &params, &config, &bad).is_err());
    }

    #[test]
    fn forward_is_permutation_equivariant() {
        let config = GlaNetConfig::tiny();
        let params = GlaNetParams::init(&config, 11).unwrap();
        let coords = demo_coords(17, 5);
        let perm: Vec<usize> = {
            let mut p: Vec<usize> = (0..17).collect();
            for i in (1..17).rev() {
                p.swap(i, (i * 7 + 3) % (i + 1));
            }
            p
        };

        let run = |c: &Matrix| {
            let mut tape = Tape::new();
            let (trace, _) = forward(&mut tape, &params, &config, c).unwrap();
            trace
        };
        let base = run(&coords);
        let permuted = run(&coords.permute_rows(&perm));
        for (a, b) in [
            (&base.prelim_probs, &permuted.prelim_probs),
            (&base.mid_probs, &permuted.mid_probs),
            (&base.final_probs, &permuted.final_probs),
        ] {
            for (i, &src) in perm.iter().enumerate() {
                assert!(
                    (a[src] - b[i]).abs() < 1e-9,
                    "stage output not equivariant at {i}"
                );
            }
        }
    }

    #[test]
    fn duplicate_rows_get_identical_probabilities() {
        let config = GlaNetConfig::tiny();
        let params = GlaNetParams::init(&config, 13).unwrap();
        let mut coords = demo_coords(12, 9);
        for c in 0..4 {
            let v = coords[(3, c)];
            coords[(9, c)] = v;
        }
        let mut tape = Tape::new();
        let (trace, _) = forward(&mut tape, &params, &config, &coords).unwrap();
        for probs in [&trace.prelim_probs, &trace.mid_probs, &trace.final_probs] {
            assert!((probs[3] - probs[9]).abs() < 1e-9);
        }
    }

    #[test]
    fn combine_losses_weighted_sum() {
        let mut tape = Tape::new();
        let l1 = tape.leaf(Matrix::filled(1, 1, 1.0));
        let l2 = tape.leaf(Matrix::filled(1, 1, 2.0));
        let l3 = tape.leaf(Matrix::filled(1, 1, 3.0));
        let total = combine_losses(&mut tape, l1, l2, l3, 0.1, 0.1).unwrap();
        assert!((tape.scalar(total).unwrap() - 3.3).abs() < 1e-12);

        let zero = combine_losses(&mut tape, l1, l2, l3, 0.0, 0.0).unwrap();
        assert_eq!(tape.scalar(zero).unwrap(), 3.0);
    }

    #[test]
    fn zero_aux_weights_reduce_total_loss_to_main_gradient() {
        let mut config = GlaNetConfig::tiny();
        config.rho = 0.0;
        config.eta = 0.0;
        let params = GlaNetParams::init(&config, 21).unwrap();
        let coords = demo_coords(10, 1);
        let labels = [1u8, 0, 1, 1, 0, 0, 1, 0, 1, 0];
        let w = LossWeights {
            lambda: 0.3,
            mu: 0.7,
        };

        let mut tape_a = Tape::new();
        let (trace_a, bound_a) = forward(&mut tape_a, &params, &config, &coords).unwrap();
        let (total, breakdown) = total_loss(
            &mut tape_a,
            &trace_a,
            &labels,
            &config,
            &MainLoss::Guided(w),
        )
        .unwrap();
        assert_eq!(breakdown.total, breakdown.loss3);
        tape_a.backward(total).unwrap();
        let grads_a = bound_a.gradients(&tape_a);

        let mut tape_b = Tape::new();
        let (trace_b, bound_b) = forward(&mut tape_b, &params, &config, &coords).unwrap();
        let main_only = guided_bce_loss_node(&mut tape_b, trace_b.final_node, &labels, &w).unwrap();
        tape_b.backward(main_only).unwrap();
        let grads_b = bound_b.gradients(&tape_b);

        for (a, b) in grads_a.iter().zip(grads_b.iter()) {
            assert!(a.max_abs_diff(b) == 0.0, "gradient paths differ");
        }
    }

    #[test]
    fn predict_threshold_is_inclusive() {
        let mask = predict(&[0.4, 0.5, 0.6], 0.5).unwrap();
        assert_eq!(mask, vec![false, true, true]);
        let below = predict(&[0.5], 0.5 - 1e-9).unwrap();
        assert_eq!(below, vec![true]);
        let none = predict(&[0.1, 0.2], 0.9).unwrap();
        assert_eq!(none, vec![false, false]);
        assert!(predict(&[0.5], 0.0).is_err());
    }

    #[test]
    fn tiny_end_to_end_gradient_matches_finite_differences() {
        // Flatten every parameter, rebuild the net from the flat vector, and
        // sweep all coordinates with central differences.
        let config = GlaNetConfig::tiny();
        let base_params = GlaNetParams::init(&config, 33).unwrap();
        let coords = demo_coords(12, 17);
        let labels = [1u8, 0, 1, 1, 0, 0, 1, 0, 1, 0, 1, 0];
        let w = LossWeights {
            lambda: 0.4,
            mu: 0.6,
        };

        let flat0: Vec<f64> = base_params
            .named_tensors()
            .iter()
            .flat_map(|(_, m)| m.data().to_vec())
            .collect();

        let rebuild = |flat: &[f64]| {
            let mut p = base_params.clone();
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
            let (trace, _) = forward(&mut tape, &p, &config, &coords).unwrap();
            let (total, _) =
                total_loss(&mut tape, &trace, &labels, &config, &MainLoss::Guided(w)).unwrap();
            tape.scalar(total).unwrap()
        };

        let mut tape = Tape::new();
        let (trace, bound) = forward(&mut tape, &base_params, &config, &coords).unwrap();
        let (total, _) =
            total_loss(&mut tape, &trace, &labels, &config, &MainLoss::Guided(w)).unwrap();
        tape.backward(total).unwrap();
        let analytic: Vec<f64> = bound
            .gradients(&tape)
            .iter()
            .flat_map(|g| g.data().to_vec())
            .collect();

        let err = grad_check(loss_of, &analytic, &flat0, 1e-5).unwrap();
        assert!(err < 1e-4, "end-to-end gradient mismatch: {err}");
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.glac");
        let config = GlaNetConfig::tiny();
        let params = GlaNetParams::init(&config, 5).unwrap();
        save_checkpoint(&path, &params, &config).unwrap();
        let (loaded, loaded_config) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded_config, config);
        for ((na, a), (nb, b)) in params
            .named_tensors()
            .iter()
            .zip(loaded.named_tensors().iter())
        {
            assert_eq!(na, nb);
            let bits_a: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "tensor {na} changed in roundtrip");
        }

        // Re-saving produces identical bytes.
        let path2 = dir.path().join("net2.glac");
        save_checkpoint(&path2, &loaded, &loaded_config).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn checkpoint_corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.glac");
        let config = GlaNetConfig::tiny();
        let params = GlaNetParams::init(&config, 5).unwrap();
        save_checkpoint(&path, &params, &config).unwrap();
        let original = fs::read(&path).unwrap();

        let mut corrupted = original.clone();
        let mid = corrupted.len() / 2;
        corrupted[mid] ^= 0x01;
        fs::write(&path, &corrupted).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));

        let mut bad_magic = original;
        bad_magic[0] = b'X';
        fs::write(&path, &bad_magic).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }

    #[test]
    fn shared_fine_passes_halve_fine_parameters() {
        let mut config = GlaNetConfig::tiny();
        let unshared = GlaNetParams::init(&config, 1).unwrap();
        config.share_fine_passes = true;
        let shared = GlaNetParams::init(&config, 1).unwrap();
        assert_eq!(shared.fine.len(), 1);
        assert_eq!(unshared.fine.len(), 2);
        assert!(shared.param_count() < unshared.param_count());

        let coords = demo_coords(10, 2);
        let mut tape = Tape::new();
        let (trace, _) = forward(&mut tape, &shared, &config, &coords).unwrap();
        assert_eq!(trace.final_probs.len(), 10);
    }
}
