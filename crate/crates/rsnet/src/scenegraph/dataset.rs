//! Dataset serialization: one JSON file per video, versioned, embedding the
//! generator config and seed so any file can be regenerated bit-exactly.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenegraph::generator::GeneratorConfig;
use crate::scenegraph::pairs::enumerate_candidate_pairs;
use crate::scenegraph::types::VideoSample;

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// On-disk representation of one video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoFile {
    pub format_version: u32,
    pub config: GeneratorConfig,
    pub video: VideoSample,
}

/// Canonical file name of video `index` inside a dataset directory.
pub fn video_file_name(index: usize) -> String {
    format!("video_{index:05}.json")
}

/// Atomically write `video` (with the config that produced it) into `dir`.
pub fn save_video(
    dir: &Path,
    index: usize,
    cfg: &GeneratorConfig,
    video: &VideoSample,
) -> Result<PathBuf> {
    let file = VideoFile {
        format_version: DATASET_FORMAT_VERSION,
        config: cfg.clone(),
        video: video.clone(),
    };
    let mut body = serde_json::to_string(&file)
        .map_err(|e| Error::Data(format!("failed to serialize video {index}: {e}")))?;
    body.push('\n');
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(video_file_name(index));
    let tmp = dir.join(format!(".{}.tmp", video_file_name(index)));
    fs::write(&tmp, body).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Load and fully validate one video file.
pub fn load_video(path: &Path) -> Result<VideoFile> {
    let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: VideoFile = serde_json::from_str(&body).map_err(|e| {
        Error::Data(format!("{}: malformed video file: {e}", path.display()))
    })?;
    if file.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Data(format!(
            "{}: dataset format version {} unsupported (expected {})",
            path.display(),
            file.format_version,
            DATASET_FORMAT_VERSION
        )));
    }
    file.config.validate()?;
    validate_video(&file.video, &file.config)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(file)
}

fn validate_video(video: &VideoSample, cfg: &GeneratorConfig) -> Result<()> {
    if video.person_centric != cfg.person_centric {
        return Err(Error::Data("video person_centric flag disagrees with config".into()));
    }
    let expected_vocab = cfg.vocab()?;
    if video.vocab != expected_vocab {
        return Err(Error::Data("video vocabulary disagrees with config".into()));
    }
    if video.frames.len() != cfg.t_frames {
        return Err(Error::Data(format!(
            "video has {} frames, config says {}",
            video.frames.len(),
            cfg.t_frames
        )));
    }
    for (t, frame) in video.frames.iter().enumerate() {
        frame
            .gt
            .validate(&video.vocab)
            .map_err(|e| Error::Data(format!("frame {t}: {e}")))?;
        if frame.detections.len() != frame.gt.objects.len() {
            return Err(Error::Data(format!(
                "frame {t}: {} detections for {} GT objects",
                frame.detections.len(),
                frame.gt.objects.len()
            )));
        }
        for (d, det) in frame.detections.iter().enumerate() {
            det.validate(cfg.n_entity_classes)
                .map_err(|e| Error::Data(format!("frame {t} detection {d}: {e}")))?;
            if det.visual_feature.len() != cfg.d_v {
                return Err(Error::Data(format!(
                    "frame {t} detection {d}: visual feature length {} ≠ d_v {}",
                    det.visual_feature.len(),
                    cfg.d_v
                )));
            }
        }
        let pairs = enumerate_candidate_pairs(frame, video.person_centric);
        if frame.union_features.len() != pairs.len() {
            return Err(Error::Data(format!(
                "frame {t}: {} union features for {} candidate pairs",
                frame.union_features.len(),
                pairs.len()
            )));
        }
        for (k, u) in frame.union_features.iter().enumerate() {
            if u.len() != cfg.d_v {
                return Err(Error::Data(format!(
                    "frame {t} union feature {k}: length {} ≠ d_v {}",
                    u.len(),
                    cfg.d_v
                )));
            }
            if u.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!(
                    "frame {t} union feature {k}: non-finite entry"
                )));
            }
        }
    }
    Ok(())
}

/// Load every `video_*.json` in `dir`, sorted by file name. All files must
/// share one config. Returns the config and the videos in file order.
pub fn load_dataset(dir: &Path) -> Result<(GeneratorConfig, Vec<VideoSample>)> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if name.starts_with("video_") && name.ends_with(".json") {
            paths.push(path);
        }
    }
    if paths.is_empty() {
        return Err(Error::Data(format!(
            "{}: no video_*.json files found",
            dir.display()
        )));
    }
    paths.sort();
    let mut config: Option<GeneratorConfig> = None;
    let mut videos = Vec::with_capacity(paths.len());
    for path in &paths {
        let file = load_video(path)?;
        match &config {
            None => config = Some(file.config),
            Some(cfg) if *cfg != file.config => {
                return Err(Error::Data(format!(
                    "{}: config disagrees with the rest of the dataset",
                    path.display()
                )));
            }
            Some(_) => {}
        }
        videos.push(file.video);
    }
    Ok((config.expect("at least one file"), videos))
}
