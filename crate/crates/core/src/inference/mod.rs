//! Per-frame decoding and online video-level association.

pub mod decode;
pub mod track;

pub use decode::{box_iou, decode_detections, nms, DecodeParams, Detection};
pub use track::{associate, finalize_tracks, AssocParams, Matcher, MemoryBank, TrackPrediction, VideoTracker};

use serde::{Deserialize, Serialize};

use crate::datagen::{encode_rle, PredictionRecord, VideoSample};
use crate::error::Result;
use crate::model::Model;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub decode: DecodeParams,
    pub assoc: AssocParams,
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        self.decode.validate()?;
        self.assoc.validate()
    }
}

/// Detections of one frame as written by the debug dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionDump {
    pub frame: usize,
    pub track_id: u64,
    pub category: u32,
    pub score: f32,
    #[serde(rename = "box")]
    pub bbox: [f32; 4],
    pub embedding: Vec<f32>,
}

/// Runs the detector frame by frame and associates online.
pub fn infer_video(model: &Model, video: &VideoSample, cfg: &InferenceConfig) -> Result<(Vec<TrackPrediction>, Vec<DetectionDump>)> {
    cfg.validate()?;
    let layout = model.config().kernel_layout();
    let normalizer = model.config().normalizer_for(video.height(), video.width());
    let mut tracker = VideoTracker::new(cfg.assoc.clone());
    let mut dump = Vec::new();
    for (t, frame) in video.frames.iter().enumerate() {
        let out = model.forward_frames(&[frame])?;
        let dets = decode_detections(&out, &layout, normalizer, &cfg.decode)?;
        let ids = tracker.push(&dets);
        dump.extend(dets.iter().zip(&ids).map(|(d, &id)| DetectionDump {
            frame: t,
            track_id: id,
            category: d.category,
            score: d.score,
            bbox: d.bbox.into(),
            embedding: d.embedding.clone(),
        }));
    }
    Ok((tracker.finish(), dump))
}

pub fn to_record(video_id: &str, track: &TrackPrediction) -> PredictionRecord {
    PredictionRecord {
        video_id: video_id.to_string(),
        category_id: track.category,
        score: track.score,
        segmentations: track.masks.iter().map(|m| m.as_ref().map(encode_rle)).collect(),
    }
}
