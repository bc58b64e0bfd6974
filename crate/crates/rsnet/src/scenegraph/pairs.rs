//! Candidate-pair enumeration, positive/negative labeling against ground
//! truth, and the negative sampling strategy used during training.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::scenegraph::geometry::iou;
use crate::scenegraph::types::Frame;

/// Entity class id of the person subject in person-centric enumeration.
pub const PERSON_CLASS: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidatePair {
    pub subject: usize,
    pub object: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Positivity {
    Positive,
    Negative,
    Excluded,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledPair {
    pub pair: CandidatePair,
    pub positivity: Positivity,
    /// Index into the frame's GT relation list when positive.
    pub gt_relation: Option<usize>,
}

/// All ordered detection pairs, or person-subject pairs only when
/// `person_centric` (a person is any detection whose top-1 class is the
/// person class). Order: subject ascending, then object ascending. Fewer
/// than two detections yield an empty list.
pub fn enumerate_candidate_pairs(frame: &Frame, person_centric: bool) -> Vec<CandidatePair> {
    let n = frame.detections.len();
    if n < 2 {
        return Vec::new();
    }
    let mut pairs = Vec::new();
    for i in 0..n {
        if person_centric && frame.detections[i].top_class() != PERSON_CLASS {
            continue;
        }
        for j in 0..n {
            if i != j {
                pairs.push(CandidatePair { subject: i, object: j });
            }
        }
    }
    pairs
}

/// Label candidates against GT. A pair is positive iff both endpoints match
/// a GT object (top-1 class equal and IoU ≥ `iou_thresh`) and that GT pair
/// is annotated; each GT relation claims at most one candidate — the one
/// with the highest subject·object IoU product, ties broken by candidate
/// index, processed in GT-relation index order so no candidate is claimed
/// twice. Everything unclaimed is negative.
pub fn label_candidates(frame: &Frame, pairs: &[CandidatePair], iou_thresh: f64) -> Vec<LabeledPair> {
    let gt = &frame.gt;
    // detection → GT-object IoU where class matches, else 0
    let overlap = |det: usize, gobj: usize| -> f64 {
        let d = &frame.detections[det];
        let g = &gt.objects[gobj];
        if d.top_class() != g.class {
            return 0.0;
        }
        let v = iou(&d.bbox, &g.bbox);
        if v >= iou_thresh {
            v
        } else {
            0.0
        }
    };
    let mut labels: Vec<LabeledPair> = pairs
        .iter()
        .map(|&pair| LabeledPair {
            pair,
            positivity: Positivity::Negative,
            gt_relation: None,
        })
        .collect();
    for (rid, rel) in gt.relations.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (ci, lp) in labels.iter().enumerate() {
            if lp.positivity == Positivity::Positive {
                continue;
            }
            let s = overlap(lp.pair.subject, rel.subject);
            let o = overlap(lp.pair.object, rel.object);
            if s == 0.0 || o == 0.0 {
                continue;
            }
            let score = s * o;
            if best.map_or(true, |(_, b)| score > b) {
                best = Some((ci, score));
            }
        }
        if let Some((ci, _)) = best {
            labels[ci].positivity = Positivity::Positive;
            labels[ci].gt_relation = Some(rid);
        }
    }
    labels
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    /// Kept negatives are capped at ⌊ratio · positives⌋.
    pub ratio: f64,
    /// Both-box IoU threshold of the exclusion rule.
    pub iou_thresh: f64,
    /// Negatives kept on frames with zero positives.
    pub min_negatives: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            ratio: 1.2,
            iou_thresh: 0.5,
            min_negatives: 4,
        }
    }
}

/// Training-time negative sampling. First marks as excluded every negative
/// whose (subject class, object class) equals some same-frame positive's
/// with both boxes overlapping that positive's at IoU > threshold; then
/// uniformly subsamples remaining negatives down to ⌊ratio·positives⌋ (or
/// `min_negatives` when the frame has no positives). Mutates exclusions in
/// place and returns retained training indices (all positives plus kept
/// negatives) in enumeration order.
pub fn negative_sampling(
    labels: &mut [LabeledPair],
    frame: &Frame,
    cfg: &SamplingConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let classes: Vec<usize> = frame.detections.iter().map(|d| d.top_class()).collect();
    let positives: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, l)| l.positivity == Positivity::Positive)
        .map(|(i, _)| i)
        .collect();
    for ni in 0..labels.len() {
        if labels[ni].positivity != Positivity::Negative {
            continue;
        }
        let np = labels[ni].pair;
        let excluded = positives.iter().any(|&pi| {
            let pp = labels[pi].pair;
            classes[np.subject] == classes[pp.subject]
                && classes[np.object] == classes[pp.object]
                && iou(&frame.detections[np.subject].bbox, &frame.detections[pp.subject].bbox)
                    > cfg.iou_thresh
                && iou(&frame.detections[np.object].bbox, &frame.detections[pp.object].bbox)
                    > cfg.iou_thresh
        });
        if excluded {
            labels[ni].positivity = Positivity::Excluded;
        }
    }
    let negatives: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, l)| l.positivity == Positivity::Negative)
        .map(|(i, _)| i)
        .collect();
    let cap = if positives.is_empty() {
        cfg.min_negatives
    } else {
        (cfg.ratio * positives.len() as f64).floor() as usize
    };
    let kept_negatives: Vec<usize> = if negatives.len() > cap {
        let mut picks: Vec<usize> = rand::seq::index::sample(rng, negatives.len(), cap)
            .into_iter()
            .map(|i| negatives[i])
            .collect();
        picks.sort_unstable();
        picks
    } else {
        negatives
    };
    let mut retained = positives;
    retained.extend(kept_negatives);
    retained.sort_unstable();
    retained
}
