//! Domain types for frames, detections, and ground-truth scene graphs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenegraph::geometry::BoundingBox;

/// The three predicate categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PredCategory {
    Attention,
    Spatial,
    Contact,
}

pub const CATEGORIES: [PredCategory; 3] = [
    PredCategory::Attention,
    PredCategory::Spatial,
    PredCategory::Contact,
];

/// Entity class names plus predicate names partitioned into the three
/// categories. Predicates carry global ids: attention block first, then
/// spatial, then contact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredicateVocabulary {
    pub entity_classes: Vec<String>,
    pub attention: Vec<String>,
    pub spatial: Vec<String>,
    pub contact: Vec<String>,
}

impl PredicateVocabulary {
    pub fn synthetic(n_entity: usize, n_att: usize, n_spa: usize, n_con: usize) -> Result<Self> {
        if n_entity < 2 || n_att == 0 || n_spa == 0 || n_con == 0 {
            return Err(Error::Config(format!(
                "vocabulary needs ≥2 entity classes and ≥1 predicate per category, \
                 got {n_entity}/{n_att}/{n_spa}/{n_con}"
            )));
        }
        let mut entity_classes = vec!["person".to_string()];
        entity_classes.extend((1..n_entity).map(|i| format!("thing_{i}")));
        Ok(PredicateVocabulary {
            entity_classes,
            attention: (0..n_att).map(|i| format!("att_{i}")).collect(),
            spatial: (0..n_spa).map(|i| format!("spa_{i}")).collect(),
            contact: (0..n_con).map(|i| format!("con_{i}")).collect(),
        })
    }

    pub fn n_entity_classes(&self) -> usize {
        self.entity_classes.len()
    }

    pub fn n_predicates(&self) -> usize {
        self.attention.len() + self.spatial.len() + self.contact.len()
    }

    pub fn category_len(&self, cat: PredCategory) -> usize {
        match cat {
            PredCategory::Attention => self.attention.len(),
            PredCategory::Spatial => self.spatial.len(),
            PredCategory::Contact => self.contact.len(),
        }
    }

    /// Global id of the first predicate in a category.
    pub fn category_offset(&self, cat: PredCategory) -> usize {
        match cat {
            PredCategory::Attention => 0,
            PredCategory::Spatial => self.attention.len(),
            PredCategory::Contact => self.attention.len() + self.spatial.len(),
        }
    }

    pub fn category_of(&self, pred: usize) -> Result<PredCategory> {
        for cat in CATEGORIES {
            let off = self.category_offset(cat);
            if pred >= off && pred < off + self.category_len(cat) {
                return Ok(cat);
            }
        }
        Err(Error::Data(format!(
            "predicate id {pred} outside vocabulary of {}",
            self.n_predicates()
        )))
    }

    pub fn predicate_name(&self, pred: usize) -> Result<&str> {
        let cat = self.category_of(pred)?;
        let local = pred - self.category_offset(cat);
        Ok(match cat {
            PredCategory::Attention => &self.attention[local],
            PredCategory::Spatial => &self.spatial[local],
            PredCategory::Contact => &self.contact[local],
        })
    }
}

/// One detected object: feature, box, class distribution, and (for synthetic
/// provenance only) the generating GT object index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectDetection {
    pub visual_feature: Vec<f64>,
    pub bbox: BoundingBox,
    pub class_distribution: Vec<f64>,
    pub matched_gt: Option<usize>,
}

impl ObjectDetection {
    pub fn validate(&self, n_classes: usize) -> Result<()> {
        if self.class_distribution.len() != n_classes {
            return Err(Error::Data(format!(
                "class distribution of length {} (vocabulary has {n_classes})",
                self.class_distribution.len()
            )));
        }
        let sum: f64 = self.class_distribution.iter().sum();
        if self.class_distribution.iter().any(|p| *p < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Data(format!(
                "class distribution not normalized (sum {sum})"
            )));
        }
        if !self.visual_feature.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: "detection visual feature".into(),
            });
        }
        Ok(())
    }

    /// Index of the most probable class (first maximum).
    pub fn top_class(&self) -> usize {
        let mut best = 0;
        for (i, p) in self.class_distribution.iter().enumerate() {
            if *p > self.class_distribution[best] {
                best = i;
            }
        }
        best
    }

    /// Probability of the most probable class.
    pub fn top_confidence(&self) -> f64 {
        self.class_distribution[self.top_class()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    pub class: usize,
    pub bbox: BoundingBox,
}

/// An annotated subject→object pair with its predicate set (global ids,
/// sorted, at most one per category here since the generator assigns one
/// predicate per applicable category).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtRelation {
    pub subject: usize,
    pub object: usize,
    pub predicates: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGraphGT {
    pub objects: Vec<GtObject>,
    pub relations: Vec<GtRelation>,
}

impl SceneGraphGT {
    pub fn validate(&self, vocab: &PredicateVocabulary) -> Result<()> {
        let n = self.objects.len();
        let mut seen = std::collections::HashSet::new();
        for rel in &self.relations {
            if rel.subject >= n || rel.object >= n || rel.subject == rel.object {
                return Err(Error::Data(format!(
                    "relation endpoints ({}, {}) invalid for {n} objects",
                    rel.subject, rel.object
                )));
            }
            if !seen.insert((rel.subject, rel.object)) {
                return Err(Error::Data(format!(
                    "pair ({}, {}) annotated twice",
                    rel.subject, rel.object
                )));
            }
            if rel.predicates.is_empty() {
                return Err(Error::Data("relation without predicates".into()));
            }
            let mut cats = std::collections::HashSet::new();
            for &p in &rel.predicates {
                let cat = vocab.category_of(p)?;
                if !cats.insert(format!("{cat:?}")) {
                    return Err(Error::Data(format!(
                        "relation ({}, {}) carries two predicates in one category",
                        rel.subject, rel.object
                    )));
                }
            }
            if rel.predicates.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Data("relation predicates not sorted".into()));
            }
        }
        for obj in &self.objects {
            if obj.class >= vocab.n_entity_classes() {
                return Err(Error::Data(format!("object class {} out of range", obj.class)));
            }
        }
        Ok(())
    }
}

/// One frame: detections, per-candidate-pair union-region features (parallel
/// to the frame's candidate-pair enumeration order), and ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub detections: Vec<ObjectDetection>,
    pub union_features: Vec<Vec<f64>>,
    pub gt: SceneGraphGT,
}

/// A generated video: the seed it came from, the pair-enumeration mode it
/// was generated under, its vocabulary, and its frames in temporal order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoSample {
    pub seed: u64,
    pub person_centric: bool,
    pub vocab: PredicateVocabulary,
    pub frames: Vec<Frame>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_partitions_global_predicate_ids() {
        let v = PredicateVocabulary::synthetic(5, 2, 3, 4).unwrap();
        assert_eq!(v.n_predicates(), 9);
        assert_eq!(v.category_of(0).unwrap(), PredCategory::Attention);
        assert_eq!(v.category_of(1).unwrap(), PredCategory::Attention);
        assert_eq!(v.category_of(2).unwrap(), PredCategory::Spatial);
        assert_eq!(v.category_of(4).unwrap(), PredCategory::Spatial);
        assert_eq!(v.category_of(5).unwrap(), PredCategory::Contact);
        assert_eq!(v.category_of(8).unwrap(), PredCategory::Contact);
        assert!(v.category_of(9).is_err());
        assert_eq!(v.predicate_name(2).unwrap(), "spa_0");
        assert_eq!(v.category_offset(PredCategory::Contact), 5);
    }

    #[test]
    fn detection_validation_enforces_simplex() {
        let bbox = BoundingBox::new(0.1, 0.1, 0.3, 0.3).unwrap();
        let mut det = ObjectDetection {
            visual_feature: vec![0.0; 4],
            bbox,
            class_distribution: vec![0.7, 0.2, 0.1],
            matched_gt: None,
        };
        assert!(det.validate(3).is_ok());
        assert_eq!(det.top_class(), 0);
        assert_eq!(det.top_confidence(), 0.7);
        det.class_distribution = vec![0.7, 0.2, 0.2];
        assert!(det.validate(3).is_err());
        det.class_distribution = vec![1.2, -0.1, -0.1];
        assert!(det.validate(3).is_err());
    }

    #[test]
    fn gt_validation_rejects_duplicates_and_bad_endpoints() {
        let v = PredicateVocabulary::synthetic(3, 1, 1, 1).unwrap();
        let bbox = BoundingBox::new(0.1, 0.1, 0.3, 0.3).unwrap();
        let objects = vec![
            GtObject { class: 0, bbox },
            GtObject { class: 1, bbox },
        ];
        let ok = SceneGraphGT {
            objects: objects.clone(),
            relations: vec![GtRelation { subject: 0, object: 1, predicates: vec![0, 1, 2] }],
        };
        assert!(ok.validate(&v).is_ok());
        let self_loop = SceneGraphGT {
            objects: objects.clone(),
            relations: vec![GtRelation { subject: 1, object: 1, predicates: vec![0] }],
        };
        assert!(self_loop.validate(&v).is_err());
        let dup = SceneGraphGT {
            objects,
            relations: vec![
                GtRelation { subject: 0, object: 1, predicates: vec![0] },
                GtRelation { subject: 0, object: 1, predicates: vec![1] },
            ],
        };
        assert!(dup.validate(&v).is_err());
    }
}
