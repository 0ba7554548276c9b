//! Serialization, clip storage, frame sampling and preprocessing.
//!
//! A dataset directory holds `annotations.jsonl`, `detections.jsonl` and one
//! `clips/<clip_id>.clip` container per clip.

mod clipfile;
mod preprocess;
mod records;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

pub use clipfile::{decode_clip, encode_clip, read_clip, write_clip};
pub use preprocess::{
    preprocess, preprocess_eval, preprocess_train, sample_frames, Geometry, Mode, ModelInputs, PreprocessConfig,
};
pub use records::{
    load_annotations, load_detections, load_predictions, read_annotation_records, save_annotations, save_detections,
    save_predictions, AnnotationRecord, DetectionRecord, PredictionRecord, TOP_K,
};

use crate::error::{Error, Result};
use crate::types::{detection_frame_violations, DetectionSet, StaAnnotation, VideoClip, Vocab};
use crate::world::SyntheticSample;

pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const DETECTIONS_FILE: &str = "detections.jsonl";
pub const CLIPS_DIR: &str = "clips";
pub const VOCAB_FILE: &str = "vocab.json";

/// A clip with its detections and ground truth, before preprocessing.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub clip_id: String,
    pub clip: VideoClip,
    pub detections: DetectionSet,
    pub annotations: Vec<StaAnnotation>,
}

impl From<SyntheticSample> for Sample {
    fn from(s: SyntheticSample) -> Self {
        Sample {
            clip_id: s.clip_id,
            clip: s.clip,
            detections: s.detections,
            annotations: vec![s.annotation],
        }
    }
}

impl From<&SyntheticSample> for Sample {
    fn from(s: &SyntheticSample) -> Self {
        s.clone().into()
    }
}

pub fn annotation_records(samples: &[Sample]) -> Vec<AnnotationRecord> {
    samples
        .iter()
        .flat_map(|s| {
            s.annotations.iter().map(|a| AnnotationRecord {
                clip_id: s.clip_id.clone(),
                bbox: a.bbox,
                noun_id: a.noun_id,
                verb_id: a.verb_id,
                ttc_seconds: a.ttc_seconds,
                frame_count: s.clip.num_frames(),
                fps: s.clip.fps,
            })
        })
        .collect()
}

/// Ground truth keyed by clip id.
pub fn ground_truth(samples: &[Sample]) -> BTreeMap<String, Vec<StaAnnotation>> {
    samples.iter().map(|s| (s.clip_id.clone(), s.annotations.clone())).collect()
}

pub fn write_dataset(dir: &Path, samples: &[Sample], vocab: &Vocab) -> Result<()> {
    let clips = dir.join(CLIPS_DIR);
    fs::create_dir_all(&clips).map_err(|e| Error::io(&clips, e))?;
    let vocab_path = dir.join(VOCAB_FILE);
    let text = serde_json::to_string(vocab).expect("vocab serializes");
    fs::write(&vocab_path, text + "\n").map_err(|e| Error::io(&vocab_path, e))?;
    save_annotations(&dir.join(ANNOTATIONS_FILE), &annotation_records(samples))?;
    let dets: Vec<DetectionRecord> = samples
        .iter()
        .map(|s| DetectionRecord {
            clip_id: s.clip_id.clone(),
            reference_size: s.detections.reference_size,
            detections: s.detections.detections.clone(),
        })
        .collect();
    save_detections(&dir.join(DETECTIONS_FILE), &dets)?;
    for s in samples {
        write_clip(&clips.join(format!("{}.clip", s.clip_id)), &s.clip)?;
    }
    Ok(())
}

/// Label vocabulary stored with a dataset.
pub fn read_vocab(dir: &Path) -> Result<Vocab> {
    let path = dir.join(VOCAB_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path,
        line: e.line(),
        field: "vocab".into(),
        message: e.to_string(),
    })
}

/// Loads every clip listed in the detection file, in file order.
pub fn read_dataset(dir: &Path, vocab: &Vocab) -> Result<Vec<Sample>> {
    let annotations = load_annotations(&dir.join(ANNOTATIONS_FILE), vocab)?;
    let detections = load_detections(&dir.join(DETECTIONS_FILE), vocab)?;
    detections
        .into_iter()
        .map(|rec| {
            let clip = read_clip(&dir.join(CLIPS_DIR).join(format!("{}.clip", rec.clip_id)))?;
            let set = rec.detection_set();
            let bad = detection_frame_violations(&set, clip.num_frames());
            if !bad.is_empty() {
                return Err(Error::Validation(
                    bad.into_iter().map(|v| format!("clip {}: {v}", rec.clip_id)).collect(),
                ));
            }
            Ok(Sample {
                annotations: annotations.get(&rec.clip_id).cloned().unwrap_or_default(),
                clip_id: rec.clip_id,
                clip,
                detections: set,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{generate_dataset, WorldConfig};

    #[test]
    fn dataset_directory_round_trip() {
        let cfg = WorldConfig {
            detection_jitter: 0.7,
            ..WorldConfig::default()
        };
        let samples: Vec<Sample> = generate_dataset(&cfg, 3).unwrap().into_iter().map(Sample::from).collect();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &samples, &cfg.vocab).unwrap();
        assert_eq!(read_vocab(dir.path()).unwrap(), cfg.vocab);
        let loaded = read_dataset(dir.path(), &cfg.vocab).unwrap();
        assert_eq!(loaded, samples);
    }
}
