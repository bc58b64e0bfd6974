//! Triplet matching and ranking metrics: Recall@k, Precision@k, and mean
//! Recall@k for the SGDET and SGCLS tasks, evaluated "with constraint"
//! (one predicate per ordered pair).
//!
//! Matching unit and aggregation (documented because several conventions
//! coexist in the literature):
//! - A ground-truth relation is one annotated (subject, object) entry with
//!   its predicate set. A prediction matches an unclaimed GT relation when
//!   subject and object classes agree, its predicate lies in the GT set,
//!   and the boxes correspond (SGDET: both-box IoU ≥ threshold; SGCLS:
//!   index equality, the detections being the GT boxes).
//! - R@k and P@k are unweighted per-frame means (frames without GT are
//!   excluded from R@k; frames without predictions are excluded from P@k).
//! - mR@k uses corpus-level per-predicate tallies; a GT relation counts
//!   toward every predicate it carries, and a match credits exactly the
//!   predicate that made it.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dsgg::{apply_constraint, predict_video, EvalMode, PredictionRecord, TripletPrediction};
use crate::error::{Error, Result};
use crate::model::{Models, Variant};
use crate::numerics::ParamStore;
use crate::scenegraph::geometry::iou;
use crate::scenegraph::types::{Frame, VideoSample};

/// Evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub mode: EvalMode,
    /// Ranking cutoffs, ascending.
    pub ks: Vec<usize>,
    /// SGDET box-matching threshold.
    pub iou_thresh: f64,
    /// Keep only the best predicate per pair before ranking.
    pub constraint: bool,
    /// Analysis hook: clamp every relation score to 1 (the ranking then
    /// collapses onto the baseline's).
    pub force_unit_scores: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mode: EvalMode::Sgdet,
            ks: vec![10, 20, 50],
            iou_thresh: 0.5,
            constraint: true,
            force_unit_scores: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ks.is_empty() {
            return Err(Error::Config("at least one k cutoff is required".into()));
        }
        if self.ks[0] == 0 {
            return Err(Error::Config("k cutoffs must be positive".into()));
        }
        if !self.ks.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config(format!(
                "k cutoffs must be strictly ascending, got {:?}",
                self.ks
            )));
        }
        if !(0.0..=1.0).contains(&self.iou_thresh) {
            return Err(Error::Config(format!(
                "IoU threshold must lie in [0, 1], got {}",
                self.iou_thresh
            )));
        }
        Ok(())
    }
}

/// One accepted (prediction, ground truth) correspondence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Match {
    /// 0-based position in the ranked prediction list.
    pub rank: usize,
    /// Index into the frame's GT relation list.
    pub gt: usize,
    /// The predicate that made the match (an element of the GT set).
    pub predicate: usize,
}

/// Per-frame matching outcome, self-contained for aggregation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub matches: Vec<Match>,
    pub unmatched_gt: Vec<usize>,
    pub n_predictions: usize,
    /// Predicate sets of the frame's GT relations, by relation index.
    pub gt_predicates: Vec<Vec<usize>>,
}

impl MatchResult {
    pub fn n_gt(&self) -> usize {
        self.gt_predicates.len()
    }
}

/// Greedy rank-order matching of a constrained, score-sorted prediction
/// list against one frame's ground truth.
pub fn match_frame(
    preds: &[TripletPrediction],
    frame: &Frame,
    mode: EvalMode,
    iou_thresh: f64,
) -> Result<MatchResult> {
    if preds.windows(2).any(|w| w[0].combined < w[1].combined) {
        return Err(Error::Data(
            "predictions must be sorted by combined score descending".into(),
        ));
    }
    let gt = &frame.gt;
    let mut claimed = vec![false; gt.relations.len()];
    let mut matches = Vec::new();
    for (rank, p) in preds.iter().enumerate() {
        let hit = gt.relations.iter().enumerate().position(|(g, rel)| {
            if claimed[g]
                || gt.objects[rel.subject].class != p.subject_class
                || gt.objects[rel.object].class != p.object_class
                || !rel.predicates.contains(&p.predicate)
            {
                return false;
            }
            match mode {
                EvalMode::Sgcls => p.subject_idx == rel.subject && p.object_idx == rel.object,
                EvalMode::Sgdet => {
                    p.subject_idx < frame.detections.len()
                        && p.object_idx < frame.detections.len()
                        && iou(&frame.detections[p.subject_idx].bbox, &gt.objects[rel.subject].bbox)
                            >= iou_thresh
                        && iou(&frame.detections[p.object_idx].bbox, &gt.objects[rel.object].bbox)
                            >= iou_thresh
                }
            }
        });
        if let Some(g) = hit {
            claimed[g] = true;
            matches.push(Match { rank, gt: g, predicate: p.predicate });
        }
    }
    let unmatched_gt = (0..gt.relations.len()).filter(|&g| !claimed[g]).collect();
    Ok(MatchResult {
        matches,
        unmatched_gt,
        n_predictions: preds.len(),
        gt_predicates: gt.relations.iter().map(|r| r.predicates.clone()).collect(),
    })
}

/// Unweighted mean, over frames with ≥ 1 GT relation, of the fraction of GT
/// relations matched at rank < k. `None` when no frame has GT.
pub fn recall_at_k(results: &[MatchResult], k: usize) -> Option<f64> {
    let per_frame: Vec<f64> = results
        .iter()
        .filter(|r| r.n_gt() > 0)
        .map(|r| {
            let hit = r.matches.iter().filter(|m| m.rank < k).count();
            hit as f64 / r.n_gt() as f64
        })
        .collect();
    (!per_frame.is_empty()).then(|| per_frame.iter().sum::<f64>() / per_frame.len() as f64)
}

/// Unweighted mean, over frames with ≥ 1 prediction, of
/// (matched predictions at rank < k) / min(k, #predictions).
/// `None` when no frame has predictions.
pub fn precision_at_k(results: &[MatchResult], k: usize) -> Option<f64> {
    let per_frame: Vec<f64> = results
        .iter()
        .filter(|r| r.n_predictions > 0)
        .map(|r| {
            let hit = r.matches.iter().filter(|m| m.rank < k).count();
            hit as f64 / k.min(r.n_predictions) as f64
        })
        .collect();
    (!per_frame.is_empty()).then(|| per_frame.iter().sum::<f64>() / per_frame.len() as f64)
}

/// Corpus-level per-predicate tallies at rank < k: every GT relation counts
/// toward each predicate it carries; a match credits the predicate that
/// made it. Returns (total, matched) per global predicate id.
pub fn predicate_tallies(
    results: &[MatchResult],
    k: usize,
    n_predicates: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut total = vec![0usize; n_predicates];
    let mut matched = vec![0usize; n_predicates];
    for r in results {
        for preds in &r.gt_predicates {
            for &p in preds {
                *total.get_mut(p).ok_or_else(|| {
                    Error::Data(format!("GT predicate {p} outside vocabulary of {n_predicates}"))
                })? += 1;
            }
        }
        for m in &r.matches {
            if m.rank < k {
                *matched.get_mut(m.predicate).ok_or_else(|| {
                    Error::Data(format!(
                        "matched predicate {} outside vocabulary of {n_predicates}",
                        m.predicate
                    ))
                })? += 1;
            }
        }
    }
    Ok((total, matched))
}

/// Unweighted mean of per-predicate corpus recalls over predicates with
/// ≥ 1 GT instance. `None` when nothing has GT.
pub fn mean_recall_at_k(
    results: &[MatchResult],
    k: usize,
    n_predicates: usize,
) -> Result<Option<f64>> {
    let (total, matched) = predicate_tallies(results, k, n_predicates)?;
    let recalls: Vec<f64> = total
        .iter()
        .zip(&matched)
        .filter(|(t, _)| **t > 0)
        .map(|(t, m)| *m as f64 / *t as f64)
        .collect();
    Ok((!recalls.is_empty()).then(|| recalls.iter().sum::<f64>() / recalls.len() as f64))
}

/// Per-predicate corpus row of the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredicateRow {
    pub predicate: usize,
    pub name: String,
    pub total: usize,
    /// Matched counts, parallel to the report's `ks`.
    pub matched: Vec<usize>,
}

/// The full evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: EvalMode,
    pub constraint: bool,
    pub videos: usize,
    pub frames: usize,
    pub ks: Vec<usize>,
    /// R@k, parallel to `ks`; `None` when undefined (no frame with GT).
    pub recall: Vec<Option<f64>>,
    /// P@k, parallel to `ks`; `None` when undefined (no predictions).
    pub precision: Vec<Option<f64>>,
    /// mR@k, parallel to `ks`; `None` when undefined.
    pub mean_recall: Vec<Option<f64>>,
    pub per_predicate: Vec<PredicateRow>,
}

impl MetricsReport {
    /// Internal consistency: values in [0,1], parallel lengths, mR@k
    /// reproducible from the per-predicate table.
    pub fn validate(&self) -> Result<()> {
        let n = self.ks.len();
        if self.recall.len() != n || self.precision.len() != n || self.mean_recall.len() != n {
            return Err(Error::Data("report columns not parallel to k cutoffs".into()));
        }
        for series in [&self.recall, &self.precision, &self.mean_recall] {
            for v in series.iter().flatten() {
                if !(0.0..=1.0).contains(v) {
                    return Err(Error::Data(format!("metric value {v} outside [0, 1]")));
                }
            }
        }
        for row in &self.per_predicate {
            if row.matched.len() != n {
                return Err(Error::Data("per-predicate row not parallel to k cutoffs".into()));
            }
            if row.matched.iter().any(|&m| m > row.total) {
                return Err(Error::Data(format!(
                    "predicate `{}` has more matches than GT instances",
                    row.name
                )));
            }
        }
        Ok(())
    }

    /// Human-readable fixed-width table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "mode {}  constraint {}  videos {}  frames {}",
            self.mode.name(),
            if self.constraint { "on" } else { "off" },
            self.videos,
            self.frames
        );
        let fmt = |v: &Option<f64>| match v {
            Some(v) => format!("{v:.4}"),
            None => "  —  ".to_string(),
        };
        let _ = writeln!(out, "{:<8}{:>10}{:>10}{:>10}", "k", "R@k", "P@k", "mR@k");
        for (i, k) in self.ks.iter().enumerate() {
            let _ = writeln!(
                out,
                "{:<8}{:>10}{:>10}{:>10}",
                k,
                fmt(&self.recall[i]),
                fmt(&self.precision[i]),
                fmt(&self.mean_recall[i])
            );
        }
        let _ = writeln!(out, "per-predicate recall (total GT instances):");
        for row in &self.per_predicate {
            if row.total == 0 {
                continue;
            }
            let recalls: Vec<String> = row
                .matched
                .iter()
                .map(|&m| format!("{:.4}", m as f64 / row.total as f64))
                .collect();
            let _ = writeln!(out, "  {:<16} n={:<5} {}", row.name, row.total, recalls.join("  "));
        }
        out
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("failed to serialize report: {e}")))?;
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, body + "\n").map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&body)
            .map_err(|e| Error::Data(format!("{}: malformed report: {e}", path.display())))
    }
}

/// Order triplets for unconstrained ranking: combined score descending,
/// ties by (subject, object, predicate) ascending.
fn sort_ranked(triplets: &[TripletPrediction]) -> Vec<TripletPrediction> {
    let mut out = triplets.to_vec();
    out.sort_by(|a, b| {
        b.combined
            .total_cmp(&a.combined)
            .then(a.subject_idx.cmp(&b.subject_idx))
            .then(a.object_idx.cmp(&b.object_idx))
            .then(a.predicate.cmp(&b.predicate))
    });
    out
}

fn assemble_report(
    results: &[MatchResult],
    cfg: &EvalConfig,
    videos: usize,
    names: &[String],
) -> Result<MetricsReport> {
    let n_predicates = names.len();
    let mut recall = Vec::with_capacity(cfg.ks.len());
    let mut precision = Vec::with_capacity(cfg.ks.len());
    let mut mean_recall = Vec::with_capacity(cfg.ks.len());
    let mut per_k_matched: Vec<Vec<usize>> = Vec::with_capacity(cfg.ks.len());
    let mut totals = vec![0usize; n_predicates];
    for &k in &cfg.ks {
        recall.push(recall_at_k(results, k));
        precision.push(precision_at_k(results, k));
        mean_recall.push(mean_recall_at_k(results, k, n_predicates)?);
        let (t, m) = predicate_tallies(results, k, n_predicates)?;
        totals = t;
        per_k_matched.push(m);
    }
    let per_predicate = (0..n_predicates)
        .map(|p| PredicateRow {
            predicate: p,
            name: names[p].clone(),
            total: totals[p],
            matched: per_k_matched.iter().map(|m| m[p]).collect(),
        })
        .collect();
    let report = MetricsReport {
        mode: cfg.mode,
        constraint: cfg.constraint,
        videos,
        frames: results.len(),
        ks: cfg.ks.clone(),
        recall,
        precision,
        mean_recall,
        per_predicate,
    };
    report.validate()?;
    Ok(report)
}

fn predicate_names(dataset: &[VideoSample]) -> Result<Vec<String>> {
    let vocab = &dataset
        .first()
        .ok_or_else(|| Error::Data("cannot evaluate an empty dataset".into()))?
        .vocab;
    (0..vocab.n_predicates())
        .map(|p| vocab.predicate_name(p).map(str::to_string))
        .collect()
}

/// Rank one frame's triplets under the config's constraint setting.
pub fn rank_triplets(triplets: &[TripletPrediction], constraint: bool) -> Vec<TripletPrediction> {
    if constraint {
        apply_constraint(triplets)
    } else {
        sort_ranked(triplets)
    }
}

/// Full evaluation of a model variant over a dataset split.
pub fn evaluate(
    store: &ParamStore,
    models: &Models,
    variant: Variant,
    dataset: &[VideoSample],
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    cfg.validate()?;
    let names = predicate_names(dataset)?;
    let mut results = Vec::new();
    for video in dataset {
        let per_frame =
            predict_video(store, models, variant, cfg.mode, video, cfg.force_unit_scores)?;
        for (t, triplets) in per_frame.iter().enumerate() {
            let ranked = rank_triplets(triplets, cfg.constraint);
            results.push(match_frame(&ranked, &video.frames[t], cfg.mode, cfg.iou_thresh)?);
        }
    }
    assemble_report(&results, cfg, dataset.len(), &names)
}

/// Score an external prediction dump against a dataset. Records are grouped
/// by (video, frame); the same constraint/ranking rules then apply.
pub fn evaluate_records(
    records: &[PredictionRecord],
    dataset: &[VideoSample],
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    cfg.validate()?;
    let names = predicate_names(dataset)?;
    let mut grouped: BTreeMap<(usize, usize), Vec<TripletPrediction>> = BTreeMap::new();
    for rec in records {
        let video = dataset.get(rec.video).ok_or_else(|| {
            Error::Data(format!("prediction references video {} outside the dataset", rec.video))
        })?;
        if rec.triplet.frame_t >= video.frames.len() {
            return Err(Error::Data(format!(
                "prediction references frame {} of video {} which has {} frames",
                rec.triplet.frame_t,
                rec.video,
                video.frames.len()
            )));
        }
        grouped
            .entry((rec.video, rec.triplet.frame_t))
            .or_default()
            .push(rec.triplet.clone());
    }
    let mut results = Vec::new();
    for (vi, video) in dataset.iter().enumerate() {
        for (t, frame) in video.frames.iter().enumerate() {
            let triplets = grouped.remove(&(vi, t)).unwrap_or_default();
            let ranked = rank_triplets(&triplets, cfg.constraint);
            results.push(match_frame(&ranked, frame, cfg.mode, cfg.iou_thresh)?);
        }
    }
    assemble_report(&results, cfg, dataset.len(), &names)
}
