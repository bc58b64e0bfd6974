//! Flat `key = value` configuration files.
//!
//! One pair per line, `#` starts a comment, blank lines are ignored. Every
//! key is typed, unknown keys are rejected by name, and missing keys fall
//! back to defaults — so a config file only needs the keys it changes,
//! while the manifest records the complete effective snapshot.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::dsgg::EvalMode;
use crate::error::{Error, Result};
use crate::metrics::EvalConfig;
use crate::model::{ModelConfig, Variant};
use crate::scenegraph::generator::GeneratorConfig;
use crate::scenegraph::pairs::SamplingConfig;
use crate::training::losses::FocalLossConfig;
use crate::training::optim::AdamWConfig;
use crate::training::TrainConfig;

/// Parse flat key=value text into a map. Duplicate keys are rejected.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("config line {}: expected `key = value`, got `{line}`", i + 1))
        })?;
        let key = k.trim().to_string();
        if key.is_empty() {
            return Err(Error::Config(format!("config line {}: empty key", i + 1)));
        }
        let value = v.trim().to_string();
        if map.insert(key.clone(), value).is_some() {
            return Err(Error::Config(format!("duplicate config key `{key}`")));
        }
    }
    Ok(map)
}

/// Typed reader over parsed pairs. Call `finish` after taking every known
/// key; any leftover key is rejected by name.
pub struct KvReader {
    map: BTreeMap<String, String>,
}

impl KvReader {
    pub fn from_text(text: &str) -> Result<Self> {
        Ok(KvReader { map: parse_kv(text)? })
    }

    pub fn from_map(map: BTreeMap<String, String>) -> Self {
        KvReader { map }
    }

    /// Take `key` parsed as `T`; absent keys yield `default`.
    pub fn take<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        match self.map.remove(key) {
            None => Ok(default),
            Some(raw) => raw
                .parse()
                .map_err(|_| Error::Config(format!("config key `{key}`: cannot parse `{raw}`"))),
        }
    }

    /// Take `key` through a custom parser; absent keys yield `default`.
    pub fn take_with<T>(
        &mut self,
        key: &str,
        default: T,
        parse: impl FnOnce(&str) -> Result<T>,
    ) -> Result<T> {
        match self.map.remove(key) {
            None => Ok(default),
            Some(raw) => {
                parse(&raw).map_err(|e| Error::Config(format!("config key `{key}`: {e}")))
            }
        }
    }

    /// Reject any key that was never consumed.
    pub fn finish(self) -> Result<()> {
        if let Some(key) = self.map.keys().next() {
            return Err(Error::Config(format!("unknown config key `{key}`")));
        }
        Ok(())
    }
}

fn render(pairs: &[(&str, String)]) -> String {
    let mut out = String::new();
    for (k, v) in pairs {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(v);
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------- generator

pub fn generator_to_kv(c: &GeneratorConfig) -> String {
    render(&[
        ("n_videos", c.n_videos.to_string()),
        ("t_frames", c.t_frames.to_string()),
        ("min_objects", c.min_objects.to_string()),
        ("max_objects", c.max_objects.to_string()),
        ("n_entity_classes", c.n_entity_classes.to_string()),
        ("n_attention", c.n_attention.to_string()),
        ("n_spatial", c.n_spatial.to_string()),
        ("n_contact", c.n_contact.to_string()),
        ("d_v", c.d_v.to_string()),
        ("feature_noise", c.feature_noise.to_string()),
        ("box_jitter", c.box_jitter.to_string()),
        ("class_logit_scale", c.class_logit_scale.to_string()),
        ("class_logit_noise", c.class_logit_noise.to_string()),
        ("p_init", c.p_init.to_string()),
        ("p_persist", c.p_persist.to_string()),
        ("p_birth", c.p_birth.to_string()),
        ("p_emit", c.p_emit.to_string()),
        ("decoy_min", c.decoy_min.to_string()),
        ("decoy_max", c.decoy_max.to_string()),
        ("person_centric", c.person_centric.to_string()),
    ])
}

pub fn generator_from_kv(text: &str) -> Result<GeneratorConfig> {
    let mut r = KvReader::from_text(text)?;
    let d = GeneratorConfig::default();
    let cfg = GeneratorConfig {
        n_videos: r.take("n_videos", d.n_videos)?,
        t_frames: r.take("t_frames", d.t_frames)?,
        min_objects: r.take("min_objects", d.min_objects)?,
        max_objects: r.take("max_objects", d.max_objects)?,
        n_entity_classes: r.take("n_entity_classes", d.n_entity_classes)?,
        n_attention: r.take("n_attention", d.n_attention)?,
        n_spatial: r.take("n_spatial", d.n_spatial)?,
        n_contact: r.take("n_contact", d.n_contact)?,
        d_v: r.take("d_v", d.d_v)?,
        feature_noise: r.take("feature_noise", d.feature_noise)?,
        box_jitter: r.take("box_jitter", d.box_jitter)?,
        class_logit_scale: r.take("class_logit_scale", d.class_logit_scale)?,
        class_logit_noise: r.take("class_logit_noise", d.class_logit_noise)?,
        p_init: r.take("p_init", d.p_init)?,
        p_persist: r.take("p_persist", d.p_persist)?,
        p_birth: r.take("p_birth", d.p_birth)?,
        p_emit: r.take("p_emit", d.p_emit)?,
        decoy_min: r.take("decoy_min", d.decoy_min)?,
        decoy_max: r.take("decoy_max", d.decoy_max)?,
        person_centric: r.take("person_centric", d.person_centric)?,
    };
    r.finish()?;
    cfg.validate()?;
    Ok(cfg)
}

// ---------------------------------------------------------------- training

/// Architecture knobs of the training config file; dataset-dependent model
/// fields come from the dataset itself.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArchParams {
    pub d_p: usize,
    pub d_m: usize,
    pub t_max: usize,
    pub spatial_blocks: usize,
    pub temporal_blocks: usize,
    pub baseline_blocks: usize,
    pub heads: usize,
}

impl Default for ArchParams {
    fn default() -> Self {
        let m = ModelConfig::for_data(&GeneratorConfig::default());
        ArchParams {
            d_p: m.d_p,
            d_m: m.d_m,
            t_max: m.t_max,
            spatial_blocks: m.spatial_blocks,
            temporal_blocks: m.temporal_blocks,
            baseline_blocks: m.baseline_blocks,
            heads: m.heads,
        }
    }
}

impl ArchParams {
    /// Complete model configuration for a dataset generated under `gen`.
    pub fn model_config(&self, gen: &GeneratorConfig) -> ModelConfig {
        ModelConfig {
            d_p: self.d_p,
            d_m: self.d_m,
            t_max: self.t_max,
            spatial_blocks: self.spatial_blocks,
            temporal_blocks: self.temporal_blocks,
            baseline_blocks: self.baseline_blocks,
            heads: self.heads,
            ..ModelConfig::for_data(gen)
        }
    }
}

/// Everything a training run reads from its config file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainFile {
    pub train: TrainConfig,
    pub arch: ArchParams,
}

impl Default for TrainFile {
    fn default() -> Self {
        TrainFile { train: TrainConfig::default(), arch: ArchParams::default() }
    }
}

pub fn train_to_kv(f: &TrainFile) -> String {
    let t = &f.train;
    let a = &f.arch;
    render(&[
        ("epochs", t.epochs.to_string()),
        ("seed", t.seed.to_string()),
        ("variant", t.variant.name().to_string()),
        ("use_object_loss", t.use_object_loss.to_string()),
        ("use_predicate_loss", t.use_predicate_loss.to_string()),
        ("use_score_loss", t.use_score_loss.to_string()),
        ("focal_alpha0", t.focal.alpha0.to_string()),
        ("focal_alpha1", t.focal.alpha1.to_string()),
        ("focal_gamma", t.focal.gamma.to_string()),
        ("sampling_ratio", t.sampling.ratio.to_string()),
        ("sampling_iou", t.sampling.iou_thresh.to_string()),
        ("min_negatives", t.sampling.min_negatives.to_string()),
        ("lr", t.optim.lr.to_string()),
        ("beta1", t.optim.beta1.to_string()),
        ("beta2", t.optim.beta2.to_string()),
        ("eps", t.optim.eps.to_string()),
        ("weight_decay", t.optim.weight_decay.to_string()),
        ("clip_norm", t.optim.clip_norm.to_string()),
        ("d_p", a.d_p.to_string()),
        ("d_m", a.d_m.to_string()),
        ("t_max", a.t_max.to_string()),
        ("spatial_blocks", a.spatial_blocks.to_string()),
        ("temporal_blocks", a.temporal_blocks.to_string()),
        ("baseline_blocks", a.baseline_blocks.to_string()),
        ("heads", a.heads.to_string()),
    ])
}

pub fn train_from_kv(text: &str) -> Result<TrainFile> {
    let mut r = KvReader::from_text(text)?;
    let d = TrainFile::default();
    let file = TrainFile {
        train: TrainConfig {
            epochs: r.take("epochs", d.train.epochs)?,
            seed: r.take("seed", d.train.seed)?,
            variant: r.take_with("variant", d.train.variant, Variant::parse)?,
            use_object_loss: r.take("use_object_loss", d.train.use_object_loss)?,
            use_predicate_loss: r.take("use_predicate_loss", d.train.use_predicate_loss)?,
            use_score_loss: r.take("use_score_loss", d.train.use_score_loss)?,
            focal: FocalLossConfig {
                alpha0: r.take("focal_alpha0", d.train.focal.alpha0)?,
                alpha1: r.take("focal_alpha1", d.train.focal.alpha1)?,
                gamma: r.take("focal_gamma", d.train.focal.gamma)?,
            },
            sampling: SamplingConfig {
                ratio: r.take("sampling_ratio", d.train.sampling.ratio)?,
                iou_thresh: r.take("sampling_iou", d.train.sampling.iou_thresh)?,
                min_negatives: r.take("min_negatives", d.train.sampling.min_negatives)?,
            },
            optim: AdamWConfig {
                lr: r.take("lr", d.train.optim.lr)?,
                beta1: r.take("beta1", d.train.optim.beta1)?,
                beta2: r.take("beta2", d.train.optim.beta2)?,
                eps: r.take("eps", d.train.optim.eps)?,
                weight_decay: r.take("weight_decay", d.train.optim.weight_decay)?,
                clip_norm: r.take("clip_norm", d.train.optim.clip_norm)?,
            },
        },
        arch: ArchParams {
            d_p: r.take("d_p", d.arch.d_p)?,
            d_m: r.take("d_m", d.arch.d_m)?,
            t_max: r.take("t_max", d.arch.t_max)?,
            spatial_blocks: r.take("spatial_blocks", d.arch.spatial_blocks)?,
            temporal_blocks: r.take("temporal_blocks", d.arch.temporal_blocks)?,
            baseline_blocks: r.take("baseline_blocks", d.arch.baseline_blocks)?,
            heads: r.take("heads", d.arch.heads)?,
        },
    };
    r.finish()?;
    file.train.validate()?;
    Ok(file)
}

// ---------------------------------------------------------------- model

/// Full model configuration sidecar written next to every checkpoint, so
/// evaluation can rebuild the exact architecture.
pub fn model_to_kv(c: &ModelConfig) -> String {
    render(&[
        ("d_v", c.d_v.to_string()),
        ("n_entity_classes", c.n_entity_classes.to_string()),
        ("n_attention", c.n_attention.to_string()),
        ("n_spatial", c.n_spatial.to_string()),
        ("n_contact", c.n_contact.to_string()),
        ("d_p", c.d_p.to_string()),
        ("d_m", c.d_m.to_string()),
        ("t_max", c.t_max.to_string()),
        ("spatial_blocks", c.spatial_blocks.to_string()),
        ("temporal_blocks", c.temporal_blocks.to_string()),
        ("baseline_blocks", c.baseline_blocks.to_string()),
        ("heads", c.heads.to_string()),
    ])
}

pub fn model_from_kv(text: &str) -> Result<ModelConfig> {
    let mut r = KvReader::from_text(text)?;
    let d = ModelConfig::for_data(&GeneratorConfig::default());
    let cfg = ModelConfig {
        d_v: r.take("d_v", d.d_v)?,
        n_entity_classes: r.take("n_entity_classes", d.n_entity_classes)?,
        n_attention: r.take("n_attention", d.n_attention)?,
        n_spatial: r.take("n_spatial", d.n_spatial)?,
        n_contact: r.take("n_contact", d.n_contact)?,
        d_p: r.take("d_p", d.d_p)?,
        d_m: r.take("d_m", d.d_m)?,
        t_max: r.take("t_max", d.t_max)?,
        spatial_blocks: r.take("spatial_blocks", d.spatial_blocks)?,
        temporal_blocks: r.take("temporal_blocks", d.temporal_blocks)?,
        baseline_blocks: r.take("baseline_blocks", d.baseline_blocks)?,
        heads: r.take("heads", d.heads)?,
    };
    r.finish()?;
    cfg.validate()?;
    Ok(cfg)
}

// ---------------------------------------------------------------- eval

/// Everything an evaluation run reads from its config file (or flags).
#[derive(Debug, Clone, PartialEq)]
pub struct EvalFile {
    pub eval: EvalConfig,
    pub variants: Vec<Variant>,
}

impl Default for EvalFile {
    fn default() -> Self {
        EvalFile { eval: EvalConfig::default(), variants: Variant::all().to_vec() }
    }
}

pub fn parse_ks(raw: &str) -> Result<Vec<usize>> {
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("cannot parse k cutoff `{}`", s.trim())))
        })
        .collect()
}

pub fn parse_variants(raw: &str) -> Result<Vec<Variant>> {
    let mut out = Vec::new();
    for name in raw.split(',') {
        let v = Variant::parse(name.trim())?;
        if out.contains(&v) {
            return Err(Error::Config(format!("variant `{}` listed twice", v.name())));
        }
        out.push(v);
    }
    Ok(out)
}

pub fn eval_to_kv(f: &EvalFile) -> String {
    let names: Vec<&str> = f.variants.iter().map(|v| v.name()).collect();
    let ks: Vec<String> = f.eval.ks.iter().map(|k| k.to_string()).collect();
    render(&[
        ("mode", f.eval.mode.name().to_string()),
        ("k", ks.join(",")),
        ("iou_thresh", f.eval.iou_thresh.to_string()),
        ("constraint", f.eval.constraint.to_string()),
        ("variants", names.join(",")),
    ])
}

pub fn eval_from_map(map: BTreeMap<String, String>) -> Result<EvalFile> {
    let mut r = KvReader::from_map(map);
    let d = EvalFile::default();
    let file = EvalFile {
        eval: EvalConfig {
            mode: r.take_with("mode", d.eval.mode, EvalMode::parse)?,
            ks: r.take_with("k", d.eval.ks.clone(), parse_ks)?,
            iou_thresh: r.take("iou_thresh", d.eval.iou_thresh)?,
            constraint: r.take("constraint", d.eval.constraint)?,
            force_unit_scores: false,
        },
        variants: r.take_with("variants", d.variants.clone(), parse_variants)?,
    };
    r.finish()?;
    file.eval.validate()?;
    Ok(file)
}

pub fn eval_from_kv(text: &str) -> Result<EvalFile> {
    eval_from_map(parse_kv(text)?)
}
