//! End-to-end training: per-video batching with negative sampling, the
//! joint objective, and the serial optimization loop (batch = one video).

pub mod losses;
pub mod optim;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward_video, Models, Variant};
use crate::numerics::{NodeId, ParamStore, Tape};
use crate::scenegraph::generator::derive_seed;
use crate::scenegraph::pairs::{
    enumerate_candidate_pairs, label_candidates, negative_sampling, LabeledPair, Positivity,
    SamplingConfig,
};
use crate::scenegraph::types::VideoSample;

use losses::{AnnotatedRow, FocalLossConfig};
use optim::{AdamW, AdamWConfig};

/// Training schedule and objective settings. The batch is always one video.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub seed: u64,
    pub variant: Variant,
    /// Toggle for the object-classification loss.
    pub use_object_loss: bool,
    /// Toggle for the predicate margin loss.
    pub use_predicate_loss: bool,
    /// Toggle for the relation-score focal loss.
    pub use_score_loss: bool,
    pub focal: FocalLossConfig,
    pub sampling: SamplingConfig,
    pub optim: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            seed: 0,
            variant: Variant::RsNetFusion,
            use_object_loss: true,
            use_predicate_loss: true,
            use_score_loss: true,
            focal: FocalLossConfig::default(),
            sampling: SamplingConfig::default(),
            optim: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.focal.validate()?;
        self.optim.validate()?;
        if !(self.sampling.ratio.is_finite() && self.sampling.ratio >= 0.0) {
            return Err(Error::Config(format!(
                "negative sampling ratio must be ≥ 0, got {}",
                self.sampling.ratio
            )));
        }
        if !(0.0..=1.0).contains(&self.sampling.iou_thresh) {
            return Err(Error::Config(format!(
                "sampling IoU threshold must lie in [0, 1], got {}",
                self.sampling.iou_thresh
            )));
        }
        Ok(())
    }
}

/// One row of the loss trace: component values at the step's start.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTraceRow {
    pub epoch: usize,
    pub video: usize,
    pub l_od: f64,
    pub l_rel: f64,
    pub l_rsn: f64,
    pub total: f64,
}

/// A video's sampled training pairs: per-frame labels over the full
/// candidate enumeration plus the retained row subsets.
pub struct VideoBatch {
    pub subsets: Vec<Vec<usize>>,
    pub labels: Vec<Vec<LabeledPair>>,
}

/// Deterministic per-(seed, epoch, video) stream for negative sampling.
pub fn sampling_rng(seed: u64, epoch: usize, video: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(seed, epoch as u64), video as u64))
}

/// Label every candidate pair of every frame and negative-sample the
/// training subset.
pub fn prepare_batch(
    video: &VideoSample,
    sampling: &SamplingConfig,
    rng: &mut ChaCha8Rng,
) -> VideoBatch {
    let mut subsets = Vec::with_capacity(video.frames.len());
    let mut all_labels = Vec::with_capacity(video.frames.len());
    for frame in &video.frames {
        let pairs = enumerate_candidate_pairs(frame, video.person_centric);
        let mut labels = label_candidates(frame, &pairs, sampling.iou_thresh);
        let retained = negative_sampling(&mut labels, frame, sampling, rng);
        subsets.push(retained);
        all_labels.push(labels);
    }
    VideoBatch { subsets, labels: all_labels }
}

/// Scalar loss nodes of one video batch. Disabled or inapplicable
/// components are exact-zero constants, so `total` always equals the sum of
/// the enabled ones.
pub struct LossNodes {
    pub od: NodeId,
    pub rel: NodeId,
    pub rsn: NodeId,
    pub total: NodeId,
}

/// Build the joint objective for one video on the caller's tape.
pub fn video_loss(
    tape: &mut Tape,
    store: &ParamStore,
    models: &Models,
    video: &VideoSample,
    batch: &VideoBatch,
    cfg: &TrainConfig,
) -> Result<LossNodes> {
    let fwd = forward_video(tape, store, models, cfg.variant, video, &batch.subsets)?;
    let mut od_parts = Vec::new();
    let mut rel_parts = Vec::new();
    let mut rsn_parts = Vec::new();
    for (t, ff) in fwd.frames.iter().enumerate() {
        let frame = &video.frames[t];
        if cfg.use_object_loss {
            let gt: Vec<Option<usize>> = frame
                .detections
                .iter()
                .map(|d| d.matched_gt.map(|g| frame.gt.objects[g].class))
                .collect();
            od_parts.push(losses::object_loss(tape, ff.object_probs, &gt)?);
        }
        if ff.subset.is_empty() {
            continue;
        }
        if cfg.use_predicate_loss {
            let rows: Vec<AnnotatedRow<'_>> = ff
                .subset
                .iter()
                .enumerate()
                .filter_map(|(row, &pi)| {
                    let lp = &batch.labels[t][pi];
                    (lp.positivity == Positivity::Positive).then(|| AnnotatedRow {
                        row,
                        predicates: &frame.gt.relations
                            [lp.gt_relation.expect("positive pairs carry a GT relation id")]
                        .predicates,
                    })
                })
                .collect();
            if !rows.is_empty() {
                let att = ff.att_logits.expect("nonempty subset has logits");
                let spa = ff.spa_logits.expect("nonempty subset has logits");
                let con = ff.con_logits.expect("nonempty subset has logits");
                rel_parts.push(losses::predicate_margin_loss(
                    tape,
                    att,
                    spa,
                    con,
                    &video.vocab,
                    &rows,
                )?);
            }
        }
        if cfg.use_score_loss {
            if let Some(scores) = ff.scores {
                let positive: Vec<bool> = ff
                    .subset
                    .iter()
                    .map(|&pi| batch.labels[t][pi].positivity == Positivity::Positive)
                    .collect();
                rsn_parts.push(losses::focal_loss(tape, scores, &positive, &cfg.focal)?);
            }
        }
    }
    let od = losses::sum_losses(tape, &od_parts)?;
    let rel = losses::sum_losses(tape, &rel_parts)?;
    let rsn = losses::sum_losses(tape, &rsn_parts)?;
    let total = losses::sum_losses(tape, &[od, rel, rsn])?;
    Ok(LossNodes { od, rel, rsn, total })
}

/// Serial training over the dataset: one optimizer step per video. Calls
/// `on_epoch` after each completed epoch (checkpointing hook); a non-finite
/// loss or gradient aborts with the last completed epoch's state intact at
/// the hook's side.
pub fn train(
    store: &mut ParamStore,
    models: &Models,
    dataset: &[VideoSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &ParamStore) -> Result<()>,
) -> Result<Vec<LossTraceRow>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    let mut opt = AdamW::new(cfg.optim, store)?;
    let mut trace = Vec::with_capacity(cfg.epochs * dataset.len());
    for epoch in 0..cfg.epochs {
        for (vi, video) in dataset.iter().enumerate() {
            let mut rng = sampling_rng(cfg.seed, epoch, vi);
            let batch = prepare_batch(video, &cfg.sampling, &mut rng);
            let mut tape = Tape::new();
            let nodes = video_loss(&mut tape, store, models, video, &batch, cfg)?;
            let row = LossTraceRow {
                epoch,
                video: vi,
                l_od: tape.value_scalar(nodes.od)?,
                l_rel: tape.value_scalar(nodes.rel)?,
                l_rsn: tape.value_scalar(nodes.rsn)?,
                total: tape.value_scalar(nodes.total)?,
            };
            tape.backward(nodes.total)?;
            store.zero_grad();
            tape.apply_grads(store);
            opt.step(store)?;
            trace.push(row);
        }
        on_epoch(epoch, store)?;
    }
    Ok(trace)
}
