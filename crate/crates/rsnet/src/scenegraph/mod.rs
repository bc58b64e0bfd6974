//! Scene-graph data layer: geometry, ground truth and detection types, the
//! synthetic video generator, candidate pair enumeration/labeling/sampling,
//! pairwise relation representations, and dataset serialization.

pub mod dataset;
pub mod generator;
pub mod geometry;
pub mod pairs;
pub mod relation;
pub mod types;
