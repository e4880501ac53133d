//! Differentiable segmentation losses.
//!
//! The composite loss is `lambda * dice + (1 - lambda) * contrastive`,
//! where the dice term is a smoothed soft Dice over the whole batch and
//! the contrastive term compares the current batch's embedding against a
//! detached copy of the previous batch's. Two standard contrastive
//! baselines (NT-Xent and InfoNCE) operate on the same per-sample
//! embedding blocks and differ only in how the negative set is built.
//!
//! Embedding convention: rank-5 `(n, i, j, k, l)` with the batch first
//! and the feature index last. Each sample's `(i, j, k, l)` block is
//! flattened to one vector, normalized to unit L2 norm, and compared
//! per coordinate.

use thiserror::Error;

use serde::{Deserialize, Serialize};

use crate::grad::{normalize_blocks, CustomVjp, GradError, Node, Tape};
use crate::volume::{BinaryMask, Volume, VolumeError};

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("{0}")]
    InvalidConfig(String),
    #[error("contrastive baseline needs a batch of at least 2, got {batch}")]
    BatchTooSmall { batch: usize },
    #[error("non-finite value while building the {term} term (op {op})")]
    NonFiniteTerm { term: &'static str, op: &'static str },
}

impl From<VolumeError> for LossError {
    fn from(e: VolumeError) -> Self {
        LossError::Grad(GradError::Volume(e))
    }
}

/// Which loss drives training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    Fess,
    DiceOnly,
    Ntxent,
    Infonce,
}

impl LossVariant {
    pub fn name(&self) -> &'static str {
        match self {
            LossVariant::Fess => "fess",
            LossVariant::DiceOnly => "dice_only",
            LossVariant::Ntxent => "ntxent",
            LossVariant::Infonce => "infonce",
        }
    }
}

/// Scalar hyperparameters of the composite loss.
///
/// `lambda` weights the dice term against the contrastive term, `epsilon`
/// smooths the dice ratio, `delta` is the contrastive temperature and
/// `eta` scales the contrastive term. The baselines reuse `delta` as
/// their softmax temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub eta: f64,
    pub variant: LossVariant,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.9,
            epsilon: 1e-5,
            delta: 0.5,
            eta: 1e-5,
            variant: LossVariant::Fess,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(LossError::InvalidConfig(
                "lambda must lie in [0,1]".to_string(),
            ));
        }
        for (name, value) in [
            ("epsilon", self.epsilon),
            ("delta", self.delta),
            ("eta", self.eta),
        ] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(LossError::InvalidConfig(format!(
                    "{name} must be strictly positive, got {value}"
                )));
            }
        }
        Ok(())
    }
}

/// Current batch embedding (attached) paired with the previous batch's
/// (detached), identically shaped.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingPair {
    pub current: Node,
    pub previous: Node,
}

impl EmbeddingPair {
    /// Validates equal shapes and that `previous` is detached.
    pub fn new(tape: &Tape, current: Node, previous: Node) -> Result<Self, LossError> {
        let cs = tape.shape(current)?;
        let ps = tape.shape(previous)?;
        if cs != ps {
            return Err(VolumeError::ShapeMismatch {
                op: "embedding_pair",
                left: cs,
                right: ps,
            }
            .into());
        }
        if !tape.is_detached(previous)? {
            return Err(LossError::InvalidConfig(
                "previous embedding must be detached".to_string(),
            ));
        }
        Ok(EmbeddingPair { current, previous })
    }
}

/// Smoothed soft Dice loss over the whole batch:
/// `1 - (2 * sum(pred * truth) + eps) / (sum(truth) + sum(pred) + eps)`.
///
/// Sums run over every axis including the batch. `pred` holds soft
/// probabilities in [0, 1]; `truth` is binary. Perfect overlap on binary
/// predictions gives exactly 0.
pub fn loss_dice(
    tape: &Tape,
    pred: Node,
    truth: &BinaryMask,
    epsilon: f64,
) -> Result<Node, LossError> {
    if !(epsilon > 0.0) {
        return Err(LossError::InvalidConfig(format!(
            "epsilon must be strictly positive, got {epsilon}"
        )));
    }
    let pred_shape = tape.shape(pred)?;
    if pred_shape != truth.shape() {
        return Err(VolumeError::ShapeMismatch {
            op: "loss_dice",
            left: pred_shape,
            right: truth.shape().to_vec(),
        }
        .into());
    }
    let truth_node = tape.constant(truth.as_volume().clone());
    let intersection = tape.sum_all(tape.mul(pred, truth_node)?)?;
    let pred_sum = tape.sum_all(pred)?;
    let truth_sum = tape.constant(Volume::scalar(truth.as_volume().sum_all()));
    // Both ratio operands are built as `eps + x` so identical inputs give
    // bit-identical numerator and denominator; the loss is then formed as
    // (den - num) / den, which is 0.0 exactly on perfect overlap.
    let numerator = tape.add_scalar(tape.scalar_mul(intersection, 2.0)?, epsilon)?;
    let denominator = tape.add_scalar(tape.add(pred_sum, truth_sum)?, epsilon)?;
    let gap = tape.sub(denominator, numerator)?;
    Ok(tape.mul(gap, tape.recip(denominator)?)?)
}

/// Scales each sample's flattened `(i, j, k, l)` block to unit L2 norm.
/// Blocks with norm below `epsilon` are scaled by `1/epsilon`, so
/// degenerate embeddings stay near zero instead of blowing up.
pub fn normalize_embedding(tape: &Tape, embedding: Node, epsilon: f64) -> Result<Node, LossError> {
    let shape = tape.shape(embedding)?;
    if shape.len() != 5 {
        return Err(GradError::InvalidShape {
            op: "normalize_embedding",
            detail: format!("embedding must have rank 5, got {shape:?}"),
        }
        .into());
    }
    Ok(tape.l2_normalize_per_sample(embedding, epsilon)?)
}

/// Cosine of the angle between two unit-normalized blocks of equal
/// length: the sum of element-wise products.
pub fn similarity(u: &[f64], v: &[f64]) -> Result<f64, LossError> {
    if u.len() != v.len() {
        return Err(VolumeError::ShapeMismatch {
            op: "similarity",
            left: vec![u.len()],
            right: vec![v.len()],
        }
        .into());
    }
    Ok(u.iter().zip(v).map(|(a, b)| a * b).sum())
}

/// Previous-batch contrastive loss.
///
/// Per sample, with unit blocks `u` (current, attached) and `v`
/// (previous, detached) of length `D`:
/// numerator `exp(similarity(u, v) / delta)`, denominator
/// `sum_d exp(u_d * v_d / delta)`, per-sample loss
/// `-log(numerator / denominator)`. The total is `eta` times the mean
/// over the batch. Gradient reaches the current embedding only.
pub fn loss_contrastive_fess(
    tape: &Tape,
    pair: &EmbeddingPair,
    cfg: &LossConfig,
) -> Result<Node, LossError> {
    cfg.validate()?;
    let current = normalize_embedding(tape, pair.current, cfg.epsilon)?;
    let previous = normalize_embedding(tape, pair.previous, cfg.epsilon)?;
    let products = tape.mul(current, previous)?;
    let sim = tape.sum_per_sample(products)?;
    let scaled = tape.scalar_mul(products, 1.0 / cfg.delta)?;
    let denominator = tape.sum_per_sample(tape.exp(scaled)?)?;
    // -log(num/den) = -sim/delta + log(den)
    let neg_sim = tape.scalar_mul(sim, -1.0 / cfg.delta)?;
    let per_sample = tape.add(neg_sim, tape.log(denominator)?)?;
    Ok(tape.scalar_mul(tape.mean_all(per_sample)?, cfg.eta)?)
}

/// Components of one composite-loss evaluation, kept separate for
/// logging and auditing.
#[derive(Debug, Clone, Copy)]
pub struct CompositeLoss {
    pub total: Node,
    pub dice: Node,
    /// Absent when the variant or a missing previous batch leaves the
    /// term defined as zero.
    pub contrastive: Option<Node>,
}

/// The weighted combination `lambda * dice + (1 - lambda) * contrastive`.
///
/// With no previous batch (`pair` is `None`) the contrastive term is
/// defined as 0 and the total reduces to `lambda * dice`. At
/// `lambda == 1` the contrastive graph is skipped entirely so a run is
/// bit-identical to a dice-only run.
pub fn loss_fess(
    tape: &Tape,
    pred: Node,
    truth: &BinaryMask,
    pair: Option<&EmbeddingPair>,
    cfg: &LossConfig,
) -> Result<CompositeLoss, LossError> {
    composite_loss(tape, pred, truth, pair, cfg, LossVariant::Fess)
}

/// Composite loss for any variant. `dice_only` is the unweighted dice
/// loss; the contrastive variants weight their term by `1 - lambda` per
/// the combination rule. A `lambda == 1` run therefore updates
/// identically to a `dice_only` run: `1.0 * dice` is bit-exact.
pub fn composite_loss(
    tape: &Tape,
    pred: Node,
    truth: &BinaryMask,
    pair: Option<&EmbeddingPair>,
    cfg: &LossConfig,
    variant: LossVariant,
) -> Result<CompositeLoss, LossError> {
    cfg.validate()?;
    let dice = loss_dice(tape, pred, truth, cfg.epsilon)
        .map_err(|e| tag_term(e, "dice"))?;
    if variant == LossVariant::DiceOnly {
        return Ok(CompositeLoss {
            total: dice,
            dice,
            contrastive: None,
        });
    }
    let contrastive = match (cfg.lambda < 1.0, pair) {
        (true, Some(pair)) => Some(
            match variant {
                LossVariant::Fess => loss_contrastive_fess(tape, pair, cfg),
                LossVariant::Ntxent => loss_ntxent(tape, pair, cfg.delta),
                LossVariant::Infonce => loss_infonce(tape, pair, cfg.delta),
                LossVariant::DiceOnly => unreachable!(),
            }
            .map_err(|e| tag_term(e, "contrastive"))?,
        ),
        _ => None,
    };
    let total = match contrastive {
        Some(con) => tape.add(
            tape.scalar_mul(dice, cfg.lambda)?,
            tape.scalar_mul(con, 1.0 - cfg.lambda)?,
        )?,
        None => tape.scalar_mul(dice, cfg.lambda)?,
    };
    Ok(CompositeLoss {
        total,
        dice,
        contrastive,
    })
}

/// Attaches the loss-term name to numerical failures so training aborts
/// with a diagnostic naming the offending term.
fn tag_term(e: LossError, term: &'static str) -> LossError {
    match e {
        LossError::Grad(GradError::NumericalFailure { op }) => {
            LossError::NonFiniteTerm { term, op }
        }
        other => other,
    }
}

/// Normalized per-sample blocks of both embeddings plus the flattened
/// dimensions, shared by the two fused baselines.
fn normalized_pair(
    tape: &Tape,
    pair: &EmbeddingPair,
) -> Result<(Node, Volume, Volume, usize, usize), LossError> {
    let shape = tape.shape(pair.current)?;
    let batch = shape[0];
    let block = shape[1..].iter().product::<usize>();
    // Matches the fess term's normalization guard.
    let eps = 1e-12;
    let current = tape.l2_normalize_per_sample(pair.current, eps)?;
    let current_val = tape.value(current)?;
    let prev_raw = tape.value(pair.previous)?;
    let (prev_data, _) = normalize_blocks(prev_raw.data(), batch, eps);
    let previous = Volume::new(prev_raw.shape().to_vec(), prev_data)?;
    Ok((current, current_val, previous, batch, block))
}

struct NtXentVjp {
    /// Row-softmax over previous-batch candidates, `n x n`.
    probs: Vec<f64>,
    previous: Volume,
    tau: f64,
    batch: usize,
    block: usize,
}

impl CustomVjp for NtXentVjp {
    fn name(&self) -> &'static str {
        "loss_ntxent"
    }

    fn backward(&self, grad_out: &Volume) -> Vec<Volume> {
        let g = grad_out.as_scalar().expect("scalar loss") / (self.batch as f64 * self.tau);
        let (n, d) = (self.batch, self.block);
        let prev = self.previous.data();
        let mut gu = vec![0.0; n * d];
        for a in 0..n {
            let out = &mut gu[a * d..(a + 1) * d];
            for b in 0..n {
                let p = self.probs[a * n + b];
                let coeff = g * (p - if a == b { 1.0 } else { 0.0 });
                let vb = &prev[b * d..(b + 1) * d];
                for (o, &v) in out.iter_mut().zip(vb) {
                    *o += coeff * v;
                }
            }
        }
        vec![Volume::new(vec![n, d], gu).expect("finite gradient")]
    }
}

/// NT-Xent baseline: current-batch blocks are anchors, the same-index
/// previous-batch block is the positive and the other previous-batch
/// blocks are negatives; temperature-scaled cross-entropy averaged over
/// the batch.
pub fn loss_ntxent(tape: &Tape, pair: &EmbeddingPair, temperature: f64) -> Result<Node, LossError> {
    if !(temperature > 0.0) {
        return Err(LossError::InvalidConfig(format!(
            "temperature must be strictly positive, got {temperature}"
        )));
    }
    let (current, current_val, previous, batch, block) = normalized_pair(tape, pair)?;
    if batch < 2 {
        return Err(LossError::BatchTooSmall { batch });
    }
    let u = current_val.data();
    let v = previous.data();
    let mut probs = vec![0.0; batch * batch];
    let mut total = 0.0;
    for a in 0..batch {
        let ua = &u[a * block..(a + 1) * block];
        let row = &mut probs[a * batch..(a + 1) * batch];
        for (b, slot) in row.iter_mut().enumerate() {
            let vb = &v[b * block..(b + 1) * block];
            *slot = similarity(ua, vb)? / temperature;
        }
        total += neg_log_softmax_at(row, a);
    }
    let value = Volume::scalar(total / batch as f64);
    let flat = tape.reshape(current, &[batch, block])?;
    let vjp = NtXentVjp {
        probs,
        previous,
        tau: temperature,
        batch,
        block,
    };
    let node = tape.custom(&[flat], value, Box::new(vjp))?;
    Ok(node)
}

struct InfoNceVjp {
    /// Row-softmax over candidates, `n x (2n - 1)`. Candidate 0 is the
    /// positive, then the other previous blocks, then the other current
    /// blocks.
    probs: Vec<f64>,
    current: Volume,
    previous: Volume,
    tau: f64,
    batch: usize,
    block: usize,
}

impl InfoNceVjp {
    /// Previous-batch index of candidate `c` for anchor `a`, if it is a
    /// previous-batch candidate; otherwise the current-batch index.
    fn candidate(&self, a: usize, c: usize) -> (bool, usize) {
        let n = self.batch;
        if c == 0 {
            return (true, a);
        }
        let others: Vec<usize> = (0..n).filter(|&b| b != a).collect();
        if c <= n - 1 {
            (true, others[c - 1])
        } else {
            (false, others[c - n])
        }
    }
}

impl CustomVjp for InfoNceVjp {
    fn name(&self) -> &'static str {
        "loss_infonce"
    }

    fn backward(&self, grad_out: &Volume) -> Vec<Volume> {
        let g = grad_out.as_scalar().expect("scalar loss") / (self.batch as f64 * self.tau);
        let (n, d) = (self.batch, self.block);
        let cand_count = 2 * n - 1;
        let u = self.current.data();
        let v = self.previous.data();
        let mut gu = vec![0.0; n * d];
        for a in 0..n {
            let ua = &u[a * d..(a + 1) * d];
            for c in 0..cand_count {
                let p = self.probs[a * cand_count + c];
                let (from_previous, idx) = self.candidate(a, c);
                let coeff = g * (p - if c == 0 { 1.0 } else { 0.0 });
                let cand = if from_previous {
                    &v[idx * d..(idx + 1) * d]
                } else {
                    &u[idx * d..(idx + 1) * d]
                };
                {
                    let out = &mut gu[a * d..(a + 1) * d];
                    for (o, &cv) in out.iter_mut().zip(cand) {
                        *o += coeff * cv;
                    }
                }
                if !from_previous {
                    // The score u_a . u_idx also depends on the negative itself.
                    let out = &mut gu[idx * d..(idx + 1) * d];
                    for (o, &uv) in out.iter_mut().zip(ua) {
                        *o += g * p * uv;
                    }
                }
            }
        }
        vec![Volume::new(vec![n, d], gu).expect("finite gradient")]
    }
}

/// InfoNCE baseline: like NT-Xent, but negatives come from both the
/// current and previous batches, excluding the anchor and its positive.
pub fn loss_infonce(
    tape: &Tape,
    pair: &EmbeddingPair,
    temperature: f64,
) -> Result<Node, LossError> {
    if !(temperature > 0.0) {
        return Err(LossError::InvalidConfig(format!(
            "temperature must be strictly positive, got {temperature}"
        )));
    }
    let (current, current_val, previous, batch, block) = normalized_pair(tape, pair)?;
    if batch < 2 {
        return Err(LossError::BatchTooSmall { batch });
    }
    let u = current_val.data();
    let v = previous.data();
    let cand_count = 2 * batch - 1;
    let mut probs = vec![0.0; batch * cand_count];
    let mut total = 0.0;
    for a in 0..batch {
        let ua = &u[a * block..(a + 1) * block];
        let others: Vec<usize> = (0..batch).filter(|&b| b != a).collect();
        let row = &mut probs[a * cand_count..(a + 1) * cand_count];
        row[0] = similarity(ua, &v[a * block..(a + 1) * block])? / temperature;
        for (i, &b) in others.iter().enumerate() {
            row[1 + i] = similarity(ua, &v[b * block..(b + 1) * block])? / temperature;
            row[batch + i] = similarity(ua, &u[b * block..(b + 1) * block])? / temperature;
        }
        total += neg_log_softmax_at(row, 0);
    }
    let value = Volume::scalar(total / batch as f64);
    let flat = tape.reshape(current, &[batch, block])?;
    let vjp = InfoNceVjp {
        probs,
        current: current_val.reshape(&[batch, block])?,
        previous,
        tau: temperature,
        batch,
        block,
    };
    let node = tape.custom(&[flat], value, Box::new(vjp))?;
    Ok(node)
}

/// Replaces `scores` with its softmax and returns `-log(softmax[target])`.
fn neg_log_softmax_at(scores: &mut [f64], target: usize) -> f64 {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
    -(scores[target].ln())
}
