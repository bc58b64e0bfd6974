//! Pairwise relation representations: five learned linear projections
//! (subject visual, object visual, union-region visual, subject class
//! distribution, object class distribution) concatenated into one vector of
//! length 5·d_p per candidate pair.

use crate::error::{Error, Result};
use crate::numerics::nn::Linear;
use crate::numerics::{NodeId, ParamStore, Tape};
use crate::scenegraph::pairs::{enumerate_candidate_pairs, CandidatePair, Positivity};
use crate::scenegraph::types::Frame;

/// The five learned projections that build a pair's relation vector.
pub struct RelationProjections {
    pub subj_v: Linear,
    pub obj_v: Linear,
    pub union_v: Linear,
    pub subj_d: Linear,
    pub obj_d: Linear,
    pub d_p: usize,
}

impl RelationProjections {
    pub fn new<R: rand::Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        d_v: usize,
        n_classes: usize,
        d_p: usize,
    ) -> Result<Self> {
        if d_p == 0 {
            return Err(Error::Config("projection dim d_p must be ≥ 1".into()));
        }
        Ok(RelationProjections {
            subj_v: Linear::new(store, rng, "rel_proj.subj_v", d_v, d_p)?,
            obj_v: Linear::new(store, rng, "rel_proj.obj_v", d_v, d_p)?,
            union_v: Linear::new(store, rng, "rel_proj.union_v", d_v, d_p)?,
            subj_d: Linear::new(store, rng, "rel_proj.subj_d", n_classes, d_p)?,
            obj_d: Linear::new(store, rng, "rel_proj.obj_d", n_classes, d_p)?,
            d_p,
        })
    }

    /// Length of one relation vector (five concatenated projections).
    pub fn output_dim(&self) -> usize {
        5 * self.d_p
    }

    /// Batched tape forward: builds the relation vectors of the selected
    /// candidate pairs as one `[K, 5·d_p]` node.
    ///
    /// `pairs` must be the frame's full canonical enumeration (so it lines
    /// up with `frame.union_features`); `subset` selects rows of it.
    pub fn project_pairs(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        frame: &Frame,
        pairs: &[CandidatePair],
        subset: &[usize],
    ) -> Result<NodeId> {
        if subset.is_empty() {
            return Err(Error::Data("cannot project an empty pair subset".into()));
        }
        if frame.union_features.len() != pairs.len() {
            return Err(Error::Data(format!(
                "frame has {} union features for {} candidate pairs",
                frame.union_features.len(),
                pairs.len()
            )));
        }
        let k = subset.len();
        let d_v = self.subj_v.in_dim;
        let n_classes = self.subj_d.in_dim;
        let mut subj_v = Vec::with_capacity(k * d_v);
        let mut obj_v = Vec::with_capacity(k * d_v);
        let mut union_v = Vec::with_capacity(k * d_v);
        let mut subj_d = Vec::with_capacity(k * n_classes);
        let mut obj_d = Vec::with_capacity(k * n_classes);
        for &idx in subset {
            let pair = pairs.get(idx).ok_or_else(|| {
                Error::Data(format!("pair index {idx} out of range ({} pairs)", pairs.len()))
            })?;
            let sub = &frame.detections[pair.subject];
            let obj = &frame.detections[pair.object];
            let uni = &frame.union_features[idx];
            if sub.visual_feature.len() != d_v
                || obj.visual_feature.len() != d_v
                || uni.len() != d_v
            {
                return Err(Error::Data(format!(
                    "feature length mismatch: projections expect d_v = {d_v}"
                )));
            }
            if sub.class_distribution.len() != n_classes
                || obj.class_distribution.len() != n_classes
            {
                return Err(Error::Data(format!(
                    "class distribution length mismatch: projections expect {n_classes} classes"
                )));
            }
            subj_v.extend_from_slice(&sub.visual_feature);
            obj_v.extend_from_slice(&obj.visual_feature);
            union_v.extend_from_slice(uni);
            subj_d.extend_from_slice(&sub.class_distribution);
            obj_d.extend_from_slice(&obj.class_distribution);
        }
        let n_sv = tape.constant(vec![k, d_v], subj_v)?;
        let n_ov = tape.constant(vec![k, d_v], obj_v)?;
        let n_uv = tape.constant(vec![k, d_v], union_v)?;
        let n_sd = tape.constant(vec![k, n_classes], subj_d)?;
        let n_od = tape.constant(vec![k, n_classes], obj_d)?;
        let p_sv = self.subj_v.forward(tape, store, n_sv)?;
        let p_ov = self.obj_v.forward(tape, store, n_ov)?;
        let p_uv = self.union_v.forward(tape, store, n_uv)?;
        let p_sd = self.subj_d.forward(tape, store, n_sd)?;
        let p_od = self.obj_d.forward(tape, store, n_od)?;
        tape.concat(&[p_sv, p_ov, p_uv, p_sd, p_od], 1)
    }
}

/// One candidate pair's concatenated relation vector plus provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationRepresentation {
    /// Concatenated projected features; length 5·d_p.
    pub x: Vec<f64>,
    pub subject_idx: usize,
    pub object_idx: usize,
    pub frame_t: usize,
    /// Assigned only after labeling; `None` until then.
    pub positivity: Option<Positivity>,
    /// Index into the frame's GT relation list, when labeled positive.
    pub matched_gt: Option<usize>,
}

/// Build the relation vector of the ordered pair (i, j) of one frame.
///
/// The pair must exist in the frame's canonical candidate enumeration
/// (which `person_centric` controls); i = j or unknown pairs are data
/// errors.
pub fn build_relation_representation(
    frame: &Frame,
    frame_t: usize,
    i: usize,
    j: usize,
    proj: &RelationProjections,
    store: &ParamStore,
    person_centric: bool,
) -> Result<RelationRepresentation> {
    if i == j {
        return Err(Error::Data(format!("invalid pair ({i}, {j}): subject equals object")));
    }
    let n = frame.detections.len();
    if i >= n || j >= n {
        return Err(Error::Data(format!(
            "pair ({i}, {j}) out of range: frame has {n} detections"
        )));
    }
    let pairs = enumerate_candidate_pairs(frame, person_centric);
    let idx = pairs
        .iter()
        .position(|p| p.subject == i && p.object == j)
        .ok_or_else(|| {
            Error::Data(format!("pair ({i}, {j}) is not a candidate in this frame"))
        })?;
    let mut tape = Tape::new();
    let node = proj.project_pairs(&mut tape, store, frame, &pairs, &[idx])?;
    Ok(RelationRepresentation {
        x: tape.values(node).to_vec(),
        subject_idx: i,
        object_idx: j,
        frame_t,
        positivity: None,
        matched_gt: None,
    })
}
