//! Frame sampling and train/eval geometry.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::sparse::bilinear_resize;
use crate::nn::Tensor;
use crate::types::{BoundingBox, DetectionSet, Frame, StaAnnotation, VideoClip};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Sampled clip length.
    pub frames: usize,
    /// Train-time target height range for the video stream, inclusive.
    pub train_scale: (f64, f64),
    /// Eval-time target height.
    pub eval_scale: f64,
    /// Square crop side for the video stream.
    pub crop: usize,
    pub mean: [f64; 3],
    pub std: [f64; 3],
    /// Boxes keeping less than this fraction of their area after cropping are dropped.
    pub min_box_retention: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            frames: 32,
            train_scale: (248.0, 280.0),
            eval_scale: 256.0,
            crop: 224,
            mean: [0.45, 0.45, 0.45],
            std: [0.225, 0.225, 0.225],
            min_box_retention: 0.25,
        }
    }
}

impl PreprocessConfig {
    /// Desk-scale preset matching the default synthetic world.
    pub fn toy() -> Self {
        Self {
            frames: 8,
            train_scale: (32.0, 36.0),
            eval_scale: 32.0,
            crop: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.train_scale;
        if self.frames == 0 || self.crop == 0 || !(lo > 0.0 && hi >= lo) || !(self.eval_scale > 0.0) {
            return Err(Error::Config("preprocess: sizes must be positive and ordered".into()));
        }
        if self.std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("preprocess: std must be positive".into()));
        }
        Ok(())
    }
}

/// Keeps the last `t` frames, left-padding with the first frame when short.
pub fn sample_frames(raw: &[Frame], t: usize) -> Result<Vec<Frame>> {
    if raw.is_empty() {
        return Err(Error::Shape("cannot sample frames from an empty clip".into()));
    }
    if raw.len() >= t {
        return Ok(raw[raw.len() - t..].to_vec());
    }
    let pad = t - raw.len();
    let mut out = Vec::with_capacity(t);
    out.extend(std::iter::repeat_n(raw[0].clone(), pad));
    out.extend_from_slice(raw);
    Ok(out)
}

/// Scale-then-crop transform, expressed in video-stream pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometry {
    /// Video frame size before the transform.
    pub source: (usize, usize),
    /// Video frame size after scaling.
    pub scaled: (usize, usize),
    /// Crop offset `(y, x)` in scaled pixels.
    pub offset: (usize, usize),
    pub crop: usize,
    /// Still-frame size over video-frame size.
    pub still_ratio: f64,
}

impl Geometry {
    fn scale_factors(&self) -> (f64, f64) {
        (
            self.scaled.0 as f64 / self.source.0 as f64,
            self.scaled.1 as f64 / self.source.1 as f64,
        )
    }

    /// Maps a box in source video coordinates into the crop, unclipped.
    pub fn forward_video(&self, b: &BoundingBox) -> BoundingBox {
        let (sy, sx) = self.scale_factors();
        b.scale(sx, sy).translate(-(self.offset.1 as f64), -(self.offset.0 as f64))
    }

    /// Maps a box in source still coordinates into the still crop, unclipped.
    pub fn forward_still(&self, b: &BoundingBox) -> BoundingBox {
        let r = self.still_ratio;
        let (sy, sx) = self.scale_factors();
        b.scale(sx, sy)
            .translate(-(self.offset.1 as f64) * r, -(self.offset.0 as f64) * r)
    }

    /// Maps a box in still-crop coordinates back to source still coordinates.
    pub fn inverse_still(&self, b: &BoundingBox) -> BoundingBox {
        let r = self.still_ratio;
        let (sy, sx) = self.scale_factors();
        b.translate(self.offset.1 as f64 * r, self.offset.0 as f64 * r)
            .scale(1.0 / sx, 1.0 / sy)
    }

    pub fn still_crop(&self) -> usize {
        (self.crop as f64 * self.still_ratio).round() as usize
    }

    pub fn still_source(&self) -> (f64, f64) {
        (
            self.source.0 as f64 * self.still_ratio,
            self.source.1 as f64 * self.still_ratio,
        )
    }
}

/// Everything the model consumes for one clip.
#[derive(Debug, Clone)]
pub struct ModelInputs {
    pub clip_id: String,
    /// `(C, T, crop, crop)`
    pub video: Tensor,
    /// `(C, S, S)` with `S = crop * still_ratio`
    pub still: Tensor,
    /// Boxes in video-crop coordinates.
    pub detections: DetectionSet,
    /// Boxes in still-crop coordinates.
    pub annotations: Vec<StaAnnotation>,
    pub geometry: Geometry,
    pub fps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn plan(cfg: &PreprocessConfig, source: (usize, usize), still_ratio: f64, mode: Mode, rng: &mut impl Rng) -> Geometry {
    let (h, w) = (source.0 as f64, source.1 as f64);
    let target = match mode {
        Mode::Train => {
            let (lo, hi) = cfg.train_scale;
            if hi > lo {
                rng.gen_range(lo..=hi)
            } else {
                lo
            }
        }
        Mode::Eval => cfg.eval_scale,
    };
    let crop = cfg.crop as f64;
    // Never scale below the crop on either axis.
    let target = target.max(crop).max(crop * h / w);
    let scaled_h = target.round().max(crop) as usize;
    let scaled_w = ((w * scaled_h as f64 / h).round() as usize).max(cfg.crop);
    let (max_y, max_x) = (scaled_h - cfg.crop, scaled_w - cfg.crop);
    let offset = match mode {
        Mode::Train => (rng.gen_range(0..=max_y), rng.gen_range(0..=max_x)),
        Mode::Eval => (max_y / 2, max_x / 2),
    };
    Geometry {
        source,
        scaled: (scaled_h, scaled_w),
        offset,
        crop: cfg.crop,
        still_ratio,
    }
}

fn transform_frame(
    frame: &Frame,
    scaled: (usize, usize),
    offset: (usize, usize),
    crop: usize,
    cfg: &PreprocessConfig,
) -> Vec<f64> {
    let c = frame.channels;
    let resized = if frame.size() == scaled {
        frame.pixels.clone()
    } else {
        bilinear_resize(c, frame.size(), scaled, false).apply(&frame.pixels)
    };
    let (sh, sw) = scaled;
    let mut out = Vec::with_capacity(c * crop * crop);
    for ch in 0..c {
        let (m, s) = (cfg.mean[ch % 3], cfg.std[ch % 3]);
        for y in 0..crop {
            let row = (ch * sh + offset.0 + y) * sw + offset.1;
            out.extend(resized[row..row + crop].iter().map(|v| (v - m) / s));
        }
    }
    out
}

fn keep_cropped(original: BoundingBox, bounds: (f64, f64), min_retention: f64) -> Option<BoundingBox> {
    let clipped = original.clip(bounds);
    let area = original.area();
    (area > 0.0 && clipped.area() >= min_retention * area && clipped.is_valid()).then_some(clipped)
}

/// Applies scaling, cropping and normalization to a clip and its labels.
pub fn preprocess(
    clip_id: &str,
    clip: &VideoClip,
    detections: &DetectionSet,
    annotations: &[StaAnnotation],
    cfg: &PreprocessConfig,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<ModelInputs> {
    cfg.validate()?;
    let frames = sample_frames(&clip.frames, cfg.frames)?;
    let source = frames[0].size();
    let still_ratio = clip.last_frame_hi.height as f64 / source.0 as f64;
    if still_ratio < 1.0 {
        return Err(Error::Shape(
            "still frame must be at least as large as the video frames".into(),
        ));
    }
    let geo = plan(cfg, source, still_ratio, mode, rng);
    let c = frames[0].channels;
    let crop = cfg.crop;
    let mut video = Vec::with_capacity(c * cfg.frames * crop * crop);
    let per_frame: Vec<Vec<f64>> = frames
        .iter()
        .map(|f| transform_frame(f, geo.scaled, geo.offset, crop, cfg))
        .collect();
    // (T, C, h, w) -> (C, T, h, w)
    for ch in 0..c {
        for f in &per_frame {
            video.extend_from_slice(&f[ch * crop * crop..(ch + 1) * crop * crop]);
        }
    }
    let still_scaled = (
        (geo.scaled.0 as f64 * still_ratio).round() as usize,
        (geo.scaled.1 as f64 * still_ratio).round() as usize,
    );
    let still_offset = (
        (geo.offset.0 as f64 * still_ratio).round() as usize,
        (geo.offset.1 as f64 * still_ratio).round() as usize,
    );
    let still_crop = geo.still_crop();
    let still = transform_frame(&clip.last_frame_hi, still_scaled, still_offset, still_crop, cfg);

    let crop_bounds = (crop as f64, crop as f64);
    let source_f = (source.0 as f64, source.1 as f64);
    let in_video = detections.rescaled(source_f)?;
    let kept = in_video
        .detections
        .iter()
        .filter_map(|d| {
            keep_cropped(geo.forward_video(&d.bbox), crop_bounds, cfg.min_box_retention)
                .map(|bbox| crate::types::Detection { bbox, ..d.clone() })
        })
        .collect();
    let still_bounds = (still_crop as f64, still_crop as f64);
    let annotations = annotations
        .iter()
        .filter_map(|a| {
            keep_cropped(geo.forward_still(&a.bbox), still_bounds, cfg.min_box_retention)
                .map(|bbox| StaAnnotation { bbox, ..a.clone() })
        })
        .collect();
    Ok(ModelInputs {
        clip_id: clip_id.to_string(),
        video: Tensor::new([c, cfg.frames, crop, crop], video),
        still: Tensor::new([c, still_crop, still_crop], still),
        detections: DetectionSet {
            detections: kept,
            reference_size: crop_bounds,
        },
        annotations,
        geometry: geo,
        fps: clip.fps,
    })
}

pub fn preprocess_train(
    clip_id: &str,
    clip: &VideoClip,
    detections: &DetectionSet,
    annotations: &[StaAnnotation],
    cfg: &PreprocessConfig,
    rng: &mut impl Rng,
) -> Result<ModelInputs> {
    preprocess(clip_id, clip, detections, annotations, cfg, Mode::Train, rng)
}

pub fn preprocess_eval(
    clip_id: &str,
    clip: &VideoClip,
    detections: &DetectionSet,
    annotations: &[StaAnnotation],
    cfg: &PreprocessConfig,
) -> Result<ModelInputs> {
    // Eval geometry never draws from the generator.
    let mut unused = rand::rngs::mock::StepRng::new(0, 0);
    preprocess(clip_id, clip, detections, annotations, cfg, Mode::Eval, &mut unused)
}
