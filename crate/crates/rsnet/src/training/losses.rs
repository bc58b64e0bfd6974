//! The three training losses, built as tape graphs so gradients flow to
//! every upstream parameter: a cross-entropy object-classification loss, a
//! multi-label margin loss over predicate logits, and a class-balanced
//! focal loss on the relation scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{NodeId, Tape};
use crate::scenegraph::types::{PredCategory, PredicateVocabulary};

/// Numerical floor inside every log to keep saturated probabilities finite.
pub const LOG_FLOOR: f64 = 1e-12;

/// How far a probability row may drift from summing to one before it is
/// rejected as non-normalized.
const SIMPLEX_TOL: f64 = 1e-6;

/// Class-balanced focal loss settings for the relation-score loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalLossConfig {
    /// Balance factor for the meaningful-relation class.
    pub alpha0: f64,
    /// Balance factor for the irrelevant-relation class.
    pub alpha1: f64,
    /// Focusing exponent; 0 recovers plain cross entropy.
    pub gamma: f64,
}

impl Default for FocalLossConfig {
    fn default() -> Self {
        FocalLossConfig { alpha0: 0.5, alpha1: 0.5, gamma: 2.0 }
    }
}

impl FocalLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha0 > 0.0 && self.alpha1 > 0.0) {
            return Err(Error::Config(format!(
                "focal balance factors must be positive, got ({}, {})",
                self.alpha0, self.alpha1
            )));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::Config(format!(
                "focal exponent must be ≥ 0, got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

fn check_rows_normalized(tape: &Tape, probs: NodeId, what: &str) -> Result<(usize, usize)> {
    let shape = tape.shape(probs);
    if shape.len() != 2 {
        return Err(Error::Shape { op: "loss probabilities", lhs: shape.to_vec(), rhs: vec![0, 0] });
    }
    let (n, c) = (shape[0], shape[1]);
    let values = tape.values(probs);
    for i in 0..n {
        let s: f64 = values[i * c..(i + 1) * c].iter().sum();
        if (s - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Numerical(format!(
                "{what} row {i} sums to {s}, expected a normalized distribution"
            )));
        }
    }
    Ok((n, c))
}

/// Cross-entropy object classification loss: −Σᵢ log d[i, gᵢ] over the rows
/// of `probs` whose entry in `gt_class` is `Some`, with the log floored at
/// 1e-12. Rows without a ground-truth label contribute nothing.
pub fn object_loss(tape: &mut Tape, probs: NodeId, gt_class: &[Option<usize>]) -> Result<NodeId> {
    let (n, c) = check_rows_normalized(tape, probs, "object class distribution")?;
    if gt_class.len() != n {
        return Err(Error::Shape { op: "object_loss", lhs: vec![gt_class.len()], rhs: vec![n] });
    }
    let mut onehot = vec![0.0; n * c];
    for (i, g) in gt_class.iter().enumerate() {
        if let Some(g) = *g {
            if g >= c {
                return Err(Error::Data(format!(
                    "object {i} has ground-truth class {g}, model has {c} classes"
                )));
            }
            onehot[i * c + g] = 1.0;
        }
    }
    let mask = tape.constant(vec![n, c], onehot)?;
    let logp = tape.log_floor(probs, LOG_FLOOR)?;
    let picked = tape.mul(mask, logp)?;
    let total = tape.sum_all(picked);
    Ok(tape.scale(total, -1.0))
}

/// Multi-label margin loss over one flat logit node:
/// Σ_{m∈pos} Σ_{n∈neg} max(0, 1 − s[m] + s[n]). The index sets must be
/// disjoint; an empty set gives an exact zero.
pub fn margin_loss(tape: &mut Tape, logits: NodeId, pos: &[usize], neg: &[usize]) -> Result<NodeId> {
    if pos.iter().any(|m| neg.contains(m)) {
        return Err(Error::Data(
            "margin loss index sets overlap; a predicate cannot be both annotated and not".into(),
        ));
    }
    tape.margin_pairs(logits, pos, neg)
}

/// The annotated-predicate sets of one candidate pair, as global predicate
/// ids, paired with the logit row the pair occupies.
pub struct AnnotatedRow<'a> {
    pub row: usize,
    pub predicates: &'a [usize],
}

/// Margin loss summed per category per annotated pair. Each category's
/// positive set is the pair's annotated predicates of that category and the
/// negative set is the category's remaining predicates; categories in which
/// a pair has no annotation contribute nothing.
pub fn predicate_margin_loss(
    tape: &mut Tape,
    att: NodeId,
    spa: NodeId,
    con: NodeId,
    vocab: &PredicateVocabulary,
    rows: &[AnnotatedRow<'_>],
) -> Result<NodeId> {
    let mut parts = Vec::new();
    for ar in rows {
        for (cat, node) in [
            (PredCategory::Attention, att),
            (PredCategory::Spatial, spa),
            (PredCategory::Contact, con),
        ] {
            let len = vocab.category_len(cat);
            let offset = vocab.category_offset(cat);
            let pos_local: Vec<usize> = ar
                .predicates
                .iter()
                .filter(|&&p| vocab.category_of(p).ok() == Some(cat))
                .map(|&p| ar.row * len + (p - offset))
                .collect();
            if pos_local.is_empty() {
                continue;
            }
            let in_pos = |j: usize| pos_local.contains(&(ar.row * len + j));
            let neg_local: Vec<usize> =
                (0..len).filter(|&j| !in_pos(j)).map(|j| ar.row * len + j).collect();
            parts.push(margin_loss(tape, node, &pos_local, &neg_local)?);
        }
    }
    sum_losses(tape, &parts)
}

/// Class-balanced focal loss on relation scores. `scores` is `[K, 2]` with
/// column 0 the meaningful-relation probability; a pair labeled positive
/// has true class 0, a negative true class 1. Per row:
/// −α_{c*} (1 − p_{c*})^γ log p_{c*}, summed over rows.
pub fn focal_loss(
    tape: &mut Tape,
    scores: NodeId,
    positive: &[bool],
    cfg: &FocalLossConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    let (k, c) = check_rows_normalized(tape, scores, "relation score")?;
    if c != 2 {
        return Err(Error::Shape { op: "focal_loss", lhs: vec![k, c], rhs: vec![k, 2] });
    }
    if positive.len() != k {
        return Err(Error::Shape { op: "focal_loss", lhs: vec![positive.len()], rhs: vec![k] });
    }
    let mut alpha_mask = vec![0.0; k * 2];
    for (i, &is_pos) in positive.iter().enumerate() {
        let (col, alpha) = if is_pos { (0, cfg.alpha0) } else { (1, cfg.alpha1) };
        alpha_mask[i * 2 + col] = alpha;
    }
    let mask = tape.constant(vec![k, 2], alpha_mask)?;
    let neg_p = tape.scale(scores, -1.0);
    let one_minus_p = tape.add_const(neg_p, 1.0);
    let focus = tape.pow_const(one_minus_p, cfg.gamma);
    let logp = tape.log_floor(scores, LOG_FLOOR)?;
    let weighted = tape.mul(focus, logp)?;
    let gated = tape.mul(mask, weighted)?;
    let total = tape.sum_all(gated);
    Ok(tape.scale(total, -1.0))
}

/// Unweighted sum of the enabled loss components. No components yields an
/// exact-zero scalar with no gradient.
pub fn sum_losses(tape: &mut Tape, parts: &[NodeId]) -> Result<NodeId> {
    match parts.split_first() {
        None => tape.constant(vec![1], vec![0.0]),
        Some((&first, rest)) => {
            let mut acc = first;
            for &p in rest {
                acc = tape.add(acc, p)?;
            }
            Ok(acc)
        }
    }
}
