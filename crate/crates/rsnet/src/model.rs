//! The full parameter bundle (baseline branch + relation scoring network)
//! and the shared per-video forward pass used by both training and
//! evaluation.
//!
//! Every variant shares one parameter set; variants differ only in which
//! branches run and where the video context token comes from, so one
//! checkpoint serves the whole ablation grid.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dsgg::{BaselineParams, FusionParams};
use crate::error::{Error, Result};
use crate::numerics::nn::Linear;
use crate::numerics::{NodeId, ParamStore, Tape};
use crate::scenegraph::generator::GeneratorConfig;
use crate::scenegraph::pairs::{enumerate_candidate_pairs, CandidatePair};
use crate::scenegraph::relation::RelationProjections;
use crate::scenegraph::types::VideoSample;
use crate::scoring::{
    relation_score_node, spatial_encode_node, temporal_encode_node, ScoringDecoderParams,
    SpatialEncoderParams, TemporalEncoderParams,
};

/// Architecture hyperparameters. The first five fields mirror the dataset;
/// the rest size the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_v: usize,
    pub n_entity_classes: usize,
    pub n_attention: usize,
    pub n_spatial: usize,
    pub n_contact: usize,
    /// Per-component projection width; relation vectors are 5·d_p long.
    pub d_p: usize,
    /// Model width of every encoder and head.
    pub d_m: usize,
    /// Longest video the temporal encoder accepts.
    pub t_max: usize,
    pub spatial_blocks: usize,
    pub temporal_blocks: usize,
    pub baseline_blocks: usize,
    pub heads: usize,
}

impl ModelConfig {
    /// Default architecture for a dataset produced by `gen`.
    pub fn for_data(gen: &GeneratorConfig) -> Self {
        ModelConfig {
            d_v: gen.d_v,
            n_entity_classes: gen.n_entity_classes,
            n_attention: gen.n_attention,
            n_spatial: gen.n_spatial,
            n_contact: gen.n_contact,
            d_p: 24,
            d_m: 64,
            t_max: 64,
            spatial_blocks: 2,
            temporal_blocks: 4,
            baseline_blocks: 2,
            heads: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_v == 0 || self.d_p == 0 || self.d_m < 2 {
            return Err(Error::Config("model widths must be positive (d_m ≥ 2)".into()));
        }
        if self.n_entity_classes < 2 {
            return Err(Error::Config("need ≥ 2 entity classes".into()));
        }
        if self.n_attention == 0 || self.n_spatial == 0 || self.n_contact == 0 {
            return Err(Error::Config("every predicate category needs ≥ 1 predicate".into()));
        }
        if self.heads == 0 || self.d_m % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_m = {} must divide into {} heads",
                self.d_m, self.heads
            )));
        }
        if self.spatial_blocks == 0 || self.temporal_blocks == 0 || self.baseline_blocks == 0 {
            return Err(Error::Config("encoder block counts must be ≥ 1".into()));
        }
        if self.t_max == 0 {
            return Err(Error::Config("t_max must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn n_predicates(&self) -> usize {
        self.n_attention + self.n_spatial + self.n_contact
    }
}

/// Which branches run and where the video context token comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Predicate heads only; every relation score fixed to 1.
    #[serde(rename = "baseline")]
    Baseline,
    /// Adds the relation scoring network (spatial + temporal + decoder).
    #[serde(rename = "+rsnet")]
    RsNet,
    /// RS-Net plus context fusion into the predicate heads.
    #[serde(rename = "+rsnet+fusion")]
    RsNetFusion,
    /// Fusion wiring, but the temporal encoder is bypassed: each frame
    /// consumes its own spatial token where the video token would go.
    #[serde(rename = "no-temporal")]
    NoTemporal,
    /// Fusion wiring, but the video token is the mean of the frame tokens
    /// instead of the learnable-token encoder output.
    #[serde(rename = "mean-token")]
    MeanToken,
}

pub const VARIANT_NAMES: [&str; 5] =
    ["baseline", "+rsnet", "+rsnet+fusion", "no-temporal", "mean-token"];

impl Variant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "+rsnet" => Ok(Variant::RsNet),
            "+rsnet+fusion" => Ok(Variant::RsNetFusion),
            "no-temporal" => Ok(Variant::NoTemporal),
            "mean-token" => Ok(Variant::MeanToken),
            other => Err(Error::Config(format!(
                "unknown variant `{other}`; expected one of {}",
                VARIANT_NAMES.join(", ")
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::RsNet => "+rsnet",
            Variant::RsNetFusion => "+rsnet+fusion",
            Variant::NoTemporal => "no-temporal",
            Variant::MeanToken => "mean-token",
        }
    }

    pub fn all() -> [Variant; 5] {
        [
            Variant::Baseline,
            Variant::RsNet,
            Variant::RsNetFusion,
            Variant::NoTemporal,
            Variant::MeanToken,
        ]
    }

    /// Whether relation scores p₀ are computed (vs. fixed to 1).
    pub fn uses_rsnet(self) -> bool {
        !matches!(self, Variant::Baseline)
    }

    /// Whether predicate logits come from the fusion heads.
    pub fn uses_fusion(self) -> bool {
        matches!(self, Variant::RsNetFusion | Variant::NoTemporal | Variant::MeanToken)
    }
}

/// How the video context token is produced for scoring/fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ContextSource {
    Learned,
    CurrentFrame,
    MeanPooled,
}

impl Variant {
    fn context_source(self) -> Option<ContextSource> {
        match self {
            Variant::Baseline => None,
            Variant::RsNet | Variant::RsNetFusion => Some(ContextSource::Learned),
            Variant::NoTemporal => Some(ContextSource::CurrentFrame),
            Variant::MeanToken => Some(ContextSource::MeanPooled),
        }
    }
}

/// All learnable components. Construction order fixes the parameter
/// registration order, which checkpoints rely on.
pub struct Models {
    pub cfg: ModelConfig,
    pub proj: RelationProjections,
    /// Object classifier over detection visual features.
    pub object_head: Linear,
    pub baseline: BaselineParams,
    pub fusion: FusionParams,
    pub spatial: SpatialEncoderParams,
    pub temporal: TemporalEncoderParams,
    pub decoder: ScoringDecoderParams,
}

impl Models {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let proj = RelationProjections::new(store, rng, cfg.d_v, cfg.n_entity_classes, cfg.d_p)?;
        let object_head =
            Linear::new(store, rng, "object_head", cfg.d_v, cfg.n_entity_classes)?;
        let baseline = BaselineParams::new(store, rng, &cfg)?;
        let fusion = FusionParams::new(store, rng, &cfg)?;
        let spatial = SpatialEncoderParams::new(
            store,
            rng,
            5 * cfg.d_p,
            cfg.d_m,
            cfg.spatial_blocks,
            cfg.heads,
        )?;
        let temporal = TemporalEncoderParams::new(
            store,
            rng,
            cfg.d_m,
            cfg.t_max,
            cfg.temporal_blocks,
            cfg.heads,
        )?;
        let decoder = ScoringDecoderParams::new(store, rng, cfg.d_m)?;
        Ok(Models { cfg, proj, object_head, baseline, fusion, spatial, temporal, decoder })
    }
}

/// Per-frame node handles from a video forward pass. Branches that a
/// variant does not run (or that an empty pair subset makes impossible)
/// are `None`.
#[derive(Debug)]
pub struct FrameForward {
    /// The frame's full canonical candidate enumeration.
    pub pairs: Vec<CandidatePair>,
    /// Indices into `pairs` actually fed through the network, in row order.
    pub subset: Vec<usize>,
    /// `[K, d_m]` contextualized relations (RS-Net branch).
    pub x_hat: Option<NodeId>,
    /// `[1, d_m]` spatial context token (RS-Net branch).
    pub c_hat: Option<NodeId>,
    /// `[K, d_m]` baseline relation features.
    pub rel_feat: Option<NodeId>,
    /// `[K, n_attention]`, `[K, n_spatial]`, `[K, n_contact]` logits.
    pub att_logits: Option<NodeId>,
    pub spa_logits: Option<NodeId>,
    pub con_logits: Option<NodeId>,
    /// `[K, 2]` relation score probabilities (p₀, p₁) per row.
    pub scores: Option<NodeId>,
    /// `[N, n_entity_classes]` object-head class probabilities.
    pub object_probs: NodeId,
}

#[derive(Debug)]
pub struct VideoForward {
    pub frames: Vec<FrameForward>,
    /// `[1, d_m]` video context token, for variants that have a single one.
    pub c_tmp: Option<NodeId>,
}

/// Run one video through the variant's branches on the caller's tape.
///
/// `subsets[t]` selects rows of frame t's canonical pair enumeration
/// (training passes the sampled pairs, evaluation passes all of them).
pub fn forward_video(
    tape: &mut Tape,
    store: &ParamStore,
    models: &Models,
    variant: Variant,
    video: &VideoSample,
    subsets: &[Vec<usize>],
) -> Result<VideoForward> {
    if subsets.len() != video.frames.len() {
        return Err(Error::Data(format!(
            "{} pair subsets for {} frames",
            subsets.len(),
            video.frames.len()
        )));
    }
    let cfg = &models.cfg;
    let rsnet = variant.uses_rsnet();
    let fusion = variant.uses_fusion();

    // per-frame: Eq.-style pairwise features, baseline branch, spatial branch
    let mut frames = Vec::with_capacity(video.frames.len());
    let mut c_hats = Vec::with_capacity(video.frames.len());
    for (frame, subset) in video.frames.iter().zip(subsets) {
        let pairs = enumerate_candidate_pairs(frame, video.person_centric);
        let x = if subset.is_empty() {
            None
        } else {
            Some(models.proj.project_pairs(tape, store, frame, &pairs, subset)?)
        };
        let (rel_feat, baseline_logits) = match x {
            Some(x) => {
                let (r, logits) = models.baseline.forward_node(tape, store, x)?;
                (Some(r), Some(logits))
            }
            None => (None, None),
        };
        let (c_hat, x_hat) = if rsnet {
            let (c, xs) = spatial_encode_node(tape, store, &models.spatial, x)?;
            (Some(c), xs)
        } else {
            (None, None)
        };
        if let Some(c) = c_hat {
            c_hats.push(c);
        }
        // detections → object-class probabilities
        let n = frame.detections.len();
        let mut flat = Vec::with_capacity(n * cfg.d_v);
        for det in &frame.detections {
            if det.visual_feature.len() != cfg.d_v {
                return Err(Error::Data(format!(
                    "detection feature length {} ≠ model d_v {}",
                    det.visual_feature.len(),
                    cfg.d_v
                )));
            }
            flat.extend_from_slice(&det.visual_feature);
        }
        let feats = tape.constant(vec![n, cfg.d_v], flat)?;
        let obj_logits = models.object_head.forward(tape, store, feats)?;
        let object_probs = tape.softmax(obj_logits, 1)?;

        let (att, spa, con) = match baseline_logits {
            Some(l) => (Some(l.0), Some(l.1), Some(l.2)),
            None => (None, None, None),
        };
        frames.push(FrameForward {
            pairs,
            subset: subset.clone(),
            x_hat,
            c_hat,
            rel_feat,
            att_logits: att,
            spa_logits: spa,
            con_logits: con,
            scores: None,
            object_probs,
        });
    }

    // video context token
    let c_tmp = match variant.context_source() {
        Some(ContextSource::Learned) => {
            let tokens = tape.concat(&c_hats, 0)?;
            Some(temporal_encode_node(tape, store, &models.temporal, tokens)?)
        }
        Some(ContextSource::MeanPooled) => {
            let tokens = tape.concat(&c_hats, 0)?;
            let mean = tape.mean_rows(tokens)?;
            Some(tape.reshape(mean, vec![1, cfg.d_m])?)
        }
        Some(ContextSource::CurrentFrame) | None => None,
    };

    // relation scores and fused logits, per frame
    if rsnet {
        for ff in frames.iter_mut() {
            let ctx = match variant.context_source() {
                Some(ContextSource::CurrentFrame) => ff.c_hat.expect("rsnet ran"),
                _ => c_tmp.expect("video context exists"),
            };
            if let Some(x_hat) = ff.x_hat {
                ff.scores =
                    Some(relation_score_node(tape, store, &models.decoder, x_hat, ctx)?);
            }
            if fusion {
                if let Some(r) = ff.rel_feat {
                    let (att, spa, con) =
                        models.fusion.forward_node(tape, store, r, ctx)?;
                    ff.att_logits = Some(att);
                    ff.spa_logits = Some(spa);
                    ff.con_logits = Some(con);
                }
            }
        }
    }

    Ok(VideoForward { frames, c_tmp })
}
