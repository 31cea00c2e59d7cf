//! On-disk dataset and prediction formats.
//!
//! ```text
//! <root>/manifest.json
//! <root>/<video_id>/frame_00000.png ...
//! <root>/<video_id>/annotations.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb, RgbImage};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use super::{decode_rle, encode_rle, Frame, GenConfig, InstanceAnn, Rle, VideoSample, CATEGORY_NAMES};
use crate::error::{Error, Result};
use crate::geometry::{BBox, Mask};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ANNOTATION_FILE: &str = "annotations.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub config: GenConfig,
    pub videos: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoryEntry {
    pub id: u32,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameEntry {
    pub t: usize,
    pub rle: Rle,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceEntry {
    pub instance_id: u32,
    pub category_id: u32,
    pub frames: Vec<FrameEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationFile {
    pub video_id: String,
    pub height: usize,
    pub width: usize,
    pub length: usize,
    pub categories: Vec<CategoryEntry>,
    pub instances: Vec<InstanceEntry>,
}

/// One predicted instance track, in the YouTube-VIS submission shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub video_id: String,
    pub category_id: u32,
    pub score: f64,
    pub segmentations: Vec<Option<Rle>>,
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn frame_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("frame_{t:05}.png"))
}

impl AnnotationFile {
    pub fn from_video(video: &VideoSample) -> Self {
        let categories = CATEGORY_NAMES
            .iter()
            .enumerate()
            .map(|(i, name)| CategoryEntry {
                id: i as u32 + 1,
                name: (*name).to_string(),
            })
            .collect();
        let mut instances: Vec<InstanceEntry> = Vec::new();
        for (t, anns) in video.annotations.iter().enumerate() {
            for ann in anns {
                let idx = match instances.iter().position(|e| e.instance_id == ann.instance_id) {
                    Some(i) => i,
                    None => {
                        instances.push(InstanceEntry {
                            instance_id: ann.instance_id,
                            category_id: ann.category_id,
                            frames: Vec::new(),
                        });
                        instances.len() - 1
                    }
                };
                if let Some(bbox) = ann.bbox {
                    instances[idx].frames.push(FrameEntry {
                        t,
                        rle: encode_rle(&ann.mask),
                        bbox,
                    });
                }
            }
        }
        instances.sort_by_key(|e| e.instance_id);
        AnnotationFile {
            video_id: video.video_id.clone(),
            height: video.height(),
            width: video.width(),
            length: video.len(),
            categories,
            instances,
        }
    }

    /// Expands the sparse per-instance records into per-frame annotations.
    pub fn to_annotations(&self, origin: &str) -> Result<Vec<Vec<InstanceAnn>>> {
        let (h, w) = (self.height, self.width);
        let mut out: Vec<Vec<InstanceAnn>> = vec![Vec::new(); self.length];
        let mut ids: Vec<u32> = self.instances.iter().map(|i| i.instance_id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|p| p[0] == p[1]) {
            return Err(Error::format(origin, "duplicate instance_id"));
        }
        for inst in &self.instances {
            let mut per_frame: Vec<Option<Mask>> = vec![None; self.length];
            for fe in &inst.frames {
                if fe.t >= self.length {
                    return Err(Error::format(
                        origin,
                        format!("instance {} frame t={} beyond length {}", inst.instance_id, fe.t, self.length),
                    ));
                }
                if fe.rle.size != [h, w] {
                    return Err(Error::format(origin, format!("instance {} t={}: rle size mismatch", inst.instance_id, fe.t)));
                }
                let mask = decode_rle(&fe.rle).map_err(|e| Error::format(origin, e.to_string()))?;
                if mask.tight_box() != Some(fe.bbox) {
                    return Err(Error::format(
                        origin,
                        format!("instance {} t={}: box does not match mask", inst.instance_id, fe.t),
                    ));
                }
                per_frame[fe.t] = Some(mask);
            }
            for (t, mask) in per_frame.into_iter().enumerate() {
                let mask = mask.unwrap_or_else(|| Mask::zeros(h, w));
                out[t].push(InstanceAnn::from_mask(inst.instance_id, inst.category_id, mask));
            }
        }
        for anns in &mut out {
            anns.sort_by_key(|a| a.instance_id);
        }
        Ok(out)
    }
}

pub fn write_video(dir: &Path, video: &VideoSample) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (t, frame) in video.frames.iter().enumerate() {
        let (h, w) = (frame.height, frame.width);
        let img: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let px = |c| (frame.pixel(c, y as usize, x as usize) * 255.0).round().clamp(0.0, 255.0) as u8;
            Rgb([px(0), px(1), px(2)])
        });
        img.save(frame_path(dir, t))?;
    }
    write_json(&dir.join(ANNOTATION_FILE), &AnnotationFile::from_video(video))
}

pub fn read_video(dir: &Path) -> Result<VideoSample> {
    let ann_path = dir.join(ANNOTATION_FILE);
    let file: AnnotationFile = read_json(&ann_path)?;
    let origin = ann_path.display().to_string();
    let annotations = file.to_annotations(&origin)?;
    let mut frames = Vec::with_capacity(file.length);
    for t in 0..file.length {
        let path = frame_path(dir, t);
        let img = image::open(&path)?.to_rgb8();
        if img.width() as usize != file.width || img.height() as usize != file.height {
            return Err(Error::format(path.display().to_string(), "frame size differs from annotations"));
        }
        let (h, w) = (file.height, file.width);
        let mut data = vec![0f32; 3 * h * w];
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = f32::from(p.0[c]) / 255.0;
            }
        }
        frames.push(Frame { height: h, width: w, data });
    }
    Ok(VideoSample {
        video_id: file.video_id,
        frames,
        annotations,
    })
}

pub fn write_dataset(root: &Path, config: &GenConfig, seed: u64, videos: &[VideoSample]) -> Result<DatasetManifest> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for video in videos {
        write_video(&root.join(&video.video_id), video)?;
    }
    let manifest = DatasetManifest {
        format_version: 1,
        seed,
        config: config.clone(),
        videos: videos.iter().map(|v| v.video_id.clone()).collect(),
    };
    write_json(&root.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn load_dataset(root: &Path) -> Result<(DatasetManifest, Vec<VideoSample>)> {
    let manifest: DatasetManifest = read_json(&root.join(MANIFEST_FILE))?;
    let videos = manifest
        .videos
        .iter()
        .map(|id| read_video(&root.join(id)))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, videos))
}

pub fn save_predictions(path: &Path, preds: &[PredictionRecord]) -> Result<()> {
    write_json(path, &preds)
}

pub fn load_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let preds: Vec<PredictionRecord> = read_json(path)?;
    let origin = path.display().to_string();
    for (i, p) in preds.iter().enumerate() {
        if !(p.score.is_finite()) {
            return Err(Error::format(&origin, format!("[{i}].score is not finite")));
        }
        for (t, seg) in p.segmentations.iter().enumerate() {
            if let Some(rle) = seg {
                let total: u64 = rle.counts.iter().sum();
                if total != (rle.size[0] * rle.size[1]) as u64 {
                    return Err(Error::format(&origin, format!("[{i}].segmentations[{t}]: counts do not sum to size")));
                }
            }
        }
    }
    Ok(preds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_dataset, GenConfig};

    #[test]
    fn video_roundtrips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GenConfig {
            num_frames: 3,
            num_instances: 3,
            enter_exit_prob: 0.5,
            ..GenConfig::default()
        };
        let videos = generate_dataset(&cfg, 5, 2).unwrap();
        write_dataset(dir.path(), &cfg, 5, &videos).unwrap();
        let (manifest, back) = load_dataset(dir.path()).unwrap();
        assert_eq!(manifest.videos, vec!["video_0000", "video_0001"]);
        assert_eq!(back, videos);
    }

    #[test]
    fn bad_box_is_rejected_with_path() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GenConfig { num_frames: 2, num_instances: 1, ..GenConfig::default() };
        let videos = generate_dataset(&cfg, 1, 1).unwrap();
        write_dataset(dir.path(), &cfg, 1, &videos).unwrap();
        let path = dir.path().join("video_0000").join(ANNOTATION_FILE);
        let mut file: AnnotationFile = read_json(&path).unwrap();
        file.instances[0].frames[0].bbox.x2 += 1.0;
        write_json(&path, &file).unwrap();
        match read_video(&dir.path().join("video_0000")) {
            Err(Error::Format { path: p, .. }) => assert!(p.ends_with(ANNOTATION_FILE)),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn prediction_schema_violation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        fs::write(&path, r#"[{"video_id": "a", "category_id": 1, "segmentations": []}]"#).unwrap();
        assert!(matches!(load_predictions(&path), Err(Error::Format { .. })));
        fs::write(
            &path,
            r#"[{"video_id": "a", "category_id": 1, "score": 0.5, "segmentations": [null, {"counts": [3], "size": [2, 2]}]}]"#,
        )
        .unwrap();
        assert!(matches!(load_predictions(&path), Err(Error::Format { .. })));
    }
}
