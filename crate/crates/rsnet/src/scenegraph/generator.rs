//! Seeded synthetic video generator standing in for a detector + dataset
//! front end.
//!
//! Feature design: every entity class, ordered class pair, and predicate
//! owns a fixed pseudo-random code vector (derived from salted seeds, so the
//! codes are shared across datasets and master seeds). A detection's visual
//! feature is its class code plus noise. A pair's union-region feature is
//! its class-pair code, plus — only in *emission* frames, drawn per frame
//! with probability `p_emit` — the predicate codes of its active relation,
//! plus noise. Every pair additionally shows a random "decoy" predicate
//! code at a per-video clutter rate, independent of its relation state.
//! An active pair outside its emission frames is therefore distributed
//! exactly like an inactive pair: single-frame evidence is genuinely
//! ambiguous, and only context from the rest of the video can recover the
//! relation (mirroring occlusion and motion blur in real footage).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenegraph::geometry::BoundingBox;
use crate::scenegraph::pairs::enumerate_candidate_pairs;
use crate::scenegraph::types::{
    Frame, GtObject, GtRelation, ObjectDetection, PredicateVocabulary, SceneGraphGT, VideoSample,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Number of videos a dataset generation run produces.
    pub n_videos: usize,
    /// Frames per video.
    pub t_frames: usize,
    /// Inclusive object-count range, person included.
    pub min_objects: usize,
    pub max_objects: usize,
    pub n_entity_classes: usize,
    pub n_attention: usize,
    pub n_spatial: usize,
    pub n_contact: usize,
    /// Visual / union feature dimension.
    pub d_v: usize,
    /// Std of Gaussian noise added to every feature entry.
    pub feature_noise: f64,
    /// Std of the jitter applied to detection box corners.
    pub box_jitter: f64,
    /// Scale of the true-class logit before noise.
    pub class_logit_scale: f64,
    /// Std of noise on class logits.
    pub class_logit_noise: f64,
    /// P(pair active at t = 0).
    pub p_init: f64,
    /// P(active stays active at t+1).
    pub p_persist: f64,
    /// P(inactive becomes active at t+1).
    pub p_birth: f64,
    /// P(an active pair's predicate codes appear in a given frame). Outside
    /// emission frames the pair's features match an inactive pair's exactly.
    pub p_emit: f64,
    /// Per-video clutter rate range: every pair shows a random predicate
    /// code with a rate drawn uniformly from [decoy_min, decoy_max),
    /// regardless of whether its relation is active.
    pub decoy_min: f64,
    pub decoy_max: f64,
    pub person_centric: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_videos: 100,
            t_frames: 8,
            min_objects: 15,
            max_objects: 17,
            n_entity_classes: 8,
            n_attention: 3,
            n_spatial: 3,
            n_contact: 4,
            d_v: 32,
            feature_noise: 0.1,
            box_jitter: 0.02,
            class_logit_scale: 8.0,
            class_logit_noise: 1.0,
            p_init: 0.35,
            p_persist: 0.9,
            p_birth: 0.05,
            p_emit: 0.5,
            decoy_min: 0.2,
            decoy_max: 0.7,
            person_centric: true,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_frames == 0 {
            return Err(Error::Config("t_frames must be ≥ 1".into()));
        }
        if self.min_objects < 2 || self.max_objects < self.min_objects {
            return Err(Error::Config(format!(
                "object range [{}, {}] invalid (need 2 ≤ min ≤ max)",
                self.min_objects, self.max_objects
            )));
        }
        if self.n_entity_classes < 2 {
            return Err(Error::Config("need ≥ 2 entity classes".into()));
        }
        if self.n_attention == 0 || self.n_spatial == 0 || self.n_contact == 0 {
            return Err(Error::Config("every predicate category needs ≥ 1 predicate".into()));
        }
        if self.d_v == 0 {
            return Err(Error::Config("d_v must be ≥ 1".into()));
        }
        for (name, p) in [
            ("p_init", self.p_init),
            ("p_persist", self.p_persist),
            ("p_birth", self.p_birth),
            ("p_emit", self.p_emit),
            ("decoy_min", self.decoy_min),
            ("decoy_max", self.decoy_max),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if self.decoy_max < self.decoy_min {
            return Err(Error::Config("decoy_max < decoy_min".into()));
        }
        for (name, v) in [
            ("feature_noise", self.feature_noise),
            ("box_jitter", self.box_jitter),
            ("class_logit_noise", self.class_logit_noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} = {v} must be ≥ 0")));
            }
        }
        if !(self.class_logit_scale.is_finite() && self.class_logit_scale > 0.0) {
            return Err(Error::Config("class_logit_scale must be > 0".into()));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Result<PredicateVocabulary> {
        PredicateVocabulary::synthetic(
            self.n_entity_classes,
            self.n_attention,
            self.n_spatial,
            self.n_contact,
        )
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic per-stream seed derivation (video i gets
/// `derive_seed(master, i)`).
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    splitmix64(master ^ splitmix64(stream.wrapping_add(0xA076_1D64_78BD_642F)))
}

const SALT_CLASS: u64 = 0x5253_0001;
const SALT_PAIR: u64 = 0x5253_0002;
const SALT_PREDICATE: u64 = 0x5253_0003;

fn code(salt: u64, a: u64, b: u64, d: usize) -> Vec<f64> {
    let seed = derive_seed(salt, a.wrapping_mul(0x1_0000_0001).wrapping_add(b));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..d).map(|_| normal.sample(&mut rng)).collect()
}

/// Fixed latent code of an entity class.
pub fn class_code(class: usize, d_v: usize) -> Vec<f64> {
    code(SALT_CLASS, class as u64, 0, d_v)
}

/// Fixed latent code of an ordered class pair.
pub fn pair_code(subject_class: usize, object_class: usize, d_v: usize) -> Vec<f64> {
    code(SALT_PAIR, subject_class as u64, object_class as u64, d_v)
}

/// Fixed latent code of a global predicate id.
pub fn predicate_code(pred: usize, d_v: usize) -> Vec<f64> {
    code(SALT_PREDICATE, pred as u64, 0, d_v)
}

/// Re-establish box validity after jitter: clamp into [0,1] and enforce a
/// minimum extent, deterministically.
fn clamp_box(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
    const MIN_EXTENT: f64 = 0.01;
    let fix = |lo: f64, hi: f64| -> (f64, f64) {
        let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
        let mut lo = lo.clamp(0.0, 1.0 - MIN_EXTENT);
        let mut hi = hi.clamp(MIN_EXTENT, 1.0);
        if hi - lo < MIN_EXTENT {
            let mid = 0.5 * (lo + hi);
            lo = (mid - MIN_EXTENT / 2.0).clamp(0.0, 1.0 - MIN_EXTENT);
            hi = lo + MIN_EXTENT;
        }
        (lo, hi)
    };
    let (x1, x2) = fix(x1, x2);
    let (y1, y2) = fix(y1, y2);
    BoundingBox::new(x1, y1, x2, y2).expect("clamped box is valid")
}

/// Relation episode state for one eligible (person, object) pair.
struct PairState {
    active: bool,
    /// Global predicate ids (one per category, sorted) for the current
    /// episode.
    predicates: Vec<usize>,
}

/// Generate one video. Pure function of (cfg, seed).
pub fn generate_synthetic_video(cfg: &GeneratorConfig, seed: u64) -> Result<VideoSample> {
    cfg.validate()?;
    let vocab = cfg.vocab()?;
    let n_pred = vocab.n_predicates();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
    // object 0 is the person; the rest draw distractor classes uniformly
    let mut classes = vec![0usize];
    for _ in 1..n {
        classes.push(rng.random_range(1..cfg.n_entity_classes));
    }
    // base boxes: person slightly larger, everything inside the frame
    let mut base: Vec<(f64, f64, f64, f64)> = Vec::with_capacity(n);
    for i in 0..n {
        let (wlo, whi) = if i == 0 { (0.2, 0.35) } else { (0.08, 0.2) };
        let w = rng.random_range(wlo..whi);
        let h = rng.random_range(wlo..whi);
        let x = rng.random_range(0.0..(1.0 - w));
        let y = rng.random_range(0.0..(1.0 - h));
        base.push((x, y, x + w, y + h));
    }
    let decoy_rate = if cfg.decoy_max > cfg.decoy_min {
        rng.random_range(cfg.decoy_min..cfg.decoy_max)
    } else {
        cfg.decoy_min
    };

    let sample_predicates = |rng: &mut ChaCha8Rng| -> Vec<usize> {
        vec![
            rng.random_range(0..cfg.n_attention),
            cfg.n_attention + rng.random_range(0..cfg.n_spatial),
            cfg.n_attention + cfg.n_spatial + rng.random_range(0..cfg.n_contact),
        ]
    };

    // one eligible relation slot per non-person object: (person → object i+1)
    let mut states: Vec<PairState> = Vec::with_capacity(n - 1);
    for _ in 1..n {
        let active = rng.random_bool(cfg.p_init);
        let predicates = if active { sample_predicates(&mut rng) } else { Vec::new() };
        states.push(PairState { active, predicates });
    }

    let mut frames = Vec::with_capacity(cfg.t_frames);
    for t in 0..cfg.t_frames {
        if t > 0 {
            for st in states.iter_mut() {
                if st.active {
                    st.active = rng.random_bool(cfg.p_persist);
                    if !st.active {
                        st.predicates.clear();
                    }
                } else if rng.random_bool(cfg.p_birth) {
                    st.active = true;
                    st.predicates = sample_predicates(&mut rng);
                }
            }
            // boxes drift with a small random walk
            for b in base.iter_mut() {
                let dx = normal.sample(&mut rng) * 0.01;
                let dy = normal.sample(&mut rng) * 0.01;
                *b = (b.0 + dx, b.1 + dy, b.2 + dx, b.3 + dy);
            }
        }
        let gt_boxes: Vec<BoundingBox> =
            base.iter().map(|&(x1, y1, x2, y2)| clamp_box(x1, y1, x2, y2)).collect();
        let objects: Vec<GtObject> = classes
            .iter()
            .zip(&gt_boxes)
            .map(|(&class, &bbox)| GtObject { class, bbox })
            .collect();
        let relations: Vec<GtRelation> = states
            .iter()
            .enumerate()
            .filter(|(_, st)| st.active)
            .map(|(i, st)| GtRelation {
                subject: 0,
                object: i + 1,
                predicates: st.predicates.clone(),
            })
            .collect();

        let mut detections = Vec::with_capacity(n);
        for i in 0..n {
            let mean = class_code(classes[i], cfg.d_v);
            let visual_feature: Vec<f64> = mean
                .iter()
                .map(|m| m + normal.sample(&mut rng) * cfg.feature_noise)
                .collect();
            let gb = &gt_boxes[i];
            let j = |rng: &mut ChaCha8Rng| normal.sample(rng) * cfg.box_jitter;
            let bbox = clamp_box(
                gb.x1 + j(&mut rng),
                gb.y1 + j(&mut rng),
                gb.x2 + j(&mut rng),
                gb.y2 + j(&mut rng),
            );
            let mut logits = vec![0.0; cfg.n_entity_classes];
            for (c, l) in logits.iter_mut().enumerate() {
                let mean = if c == classes[i] { cfg.class_logit_scale } else { 0.0 };
                *l = mean + normal.sample(&mut rng) * cfg.class_logit_noise;
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut dist: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let sum: f64 = dist.iter().sum();
            for p in dist.iter_mut() {
                *p /= sum;
            }
            detections.push(ObjectDetection {
                visual_feature,
                bbox,
                class_distribution: dist,
                matched_gt: Some(i),
            });
        }

        let gt = SceneGraphGT { objects, relations };
        let mut frame = Frame { detections, union_features: Vec::new(), gt };
        // union features parallel the canonical candidate enumeration so the
        // evaluation path finds one feature per enumerated pair
        let pairs = enumerate_candidate_pairs(&frame, cfg.person_centric);
        let mut union_features = Vec::with_capacity(pairs.len());
        for pair in &pairs {
            // the latent interaction is defined by the underlying GT objects
            let (si, oi) = (pair.subject, pair.object);
            let mut u = pair_code(classes[si], classes[oi], cfg.d_v);
            let active_rel = frame
                .gt
                .relations
                .iter()
                .find(|r| r.subject == si && r.object == oi);
            if let Some(rel) = active_rel {
                if rng.random_bool(cfg.p_emit) {
                    for &p in &rel.predicates {
                        let pc = predicate_code(p, cfg.d_v);
                        for (uv, cv) in u.iter_mut().zip(&pc) {
                            *uv += cv;
                        }
                    }
                }
            }
            // background clutter, independent of the relation state
            if rng.random_bool(decoy_rate) {
                let decoy = rng.random_range(0..n_pred);
                let pc = predicate_code(decoy, cfg.d_v);
                for (uv, cv) in u.iter_mut().zip(&pc) {
                    *uv += cv;
                }
            }
            for uv in u.iter_mut() {
                *uv += normal.sample(&mut rng) * cfg.feature_noise;
            }
            union_features.push(u);
        }
        frame.union_features = union_features;
        frames.push(frame);
    }

    Ok(VideoSample {
        seed,
        person_centric: cfg.person_centric,
        vocab,
        frames,
    })
}
