//! Core data model and box geometry.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box with continuous corner coordinates.
///
/// Boxes are half-open rectangles: area is `(x2 - x1) * (y2 - y1)` with no
/// pixel "+1" convention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<[f64; 4]> for BoundingBox {
    fn from([x1, y1, x2, y2]: [f64; 4]) -> Self {
        Self { x1, y1, x2, y2 }
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl BoundingBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    /// Area, zero for degenerate or inverted boxes.
    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn is_finite(&self) -> bool {
        self.x1.is_finite() && self.y1.is_finite() && self.x2.is_finite() && self.y2.is_finite()
    }

    pub fn is_valid(&self) -> bool {
        self.is_finite() && self.x1 < self.x2 && self.y1 < self.y2
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Clips to `[0, width] × [0, height]`.
    pub fn clip(&self, (height, width): (f64, f64)) -> BoundingBox {
        BoundingBox {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        }
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BoundingBox {
        BoundingBox::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }

    pub fn scale(&self, sx: f64, sy: f64) -> BoundingBox {
        BoundingBox::new(self.x1 * sx, self.y1 * sy, self.x2 * sx, self.y2 * sy)
    }

    fn violations(&self, out: &mut Vec<String>) {
        if !self.is_finite() {
            out.push("box has non-finite coordinates".into());
            return;
        }
        if self.x1 >= self.x2 {
            out.push(if self.x1 == self.x2 {
                "box has zero width".into()
            } else {
                "box has negative width".into()
            });
        }
        if self.y1 >= self.y2 {
            out.push(if self.y1 == self.y2 {
                "box has zero height".into()
            } else {
                "box has negative height".into()
            });
        }
    }
}

/// Intersection over union; 0 for disjoint or degenerate boxes.
pub fn box_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Maps a box between frame sizes `(h, w)` and clips it to the target frame.
pub fn rescale_box(b: &BoundingBox, from_size: (f64, f64), to_size: (f64, f64)) -> Result<BoundingBox> {
    let ((fh, fw), (th, tw)) = (from_size, to_size);
    if !(fh > 0.0 && fw > 0.0) {
        return Err(Error::Config(format!("source size ({fh}, {fw}) must be positive")));
    }
    if !(th > 0.0 && tw > 0.0) {
        return Err(Error::Config(format!("target size ({th}, {tw}) must be positive")));
    }
    Ok(b.scale(tw / fw, th / fh).clip(to_size))
}

/// Noun and verb vocabulary sizes of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Vocab {
    pub nouns: usize,
    pub verbs: usize,
}

impl Default for Vocab {
    fn default() -> Self {
        Self { nouns: 16, verbs: 4 }
    }
}

impl Vocab {
    /// Detection classes: every noun plus one reserved class for the actor.
    pub fn detection_classes(&self) -> usize {
        self.nouns + 1
    }

    pub fn actor_class(&self) -> usize {
        self.nouns
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub class_id: usize,
    pub frame_index: usize,
    pub score: f64,
}

/// Per-clip detections and the `(height, width)` frame their boxes refer to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub detections: Vec<Detection>,
    pub reference_size: (f64, f64),
}

impl DetectionSet {
    pub fn empty(reference_size: (f64, f64)) -> Self {
        Self {
            detections: Vec::new(),
            reference_size,
        }
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    /// Re-expresses every box in a new frame size (boxes are clipped).
    pub fn rescaled(&self, to_size: (f64, f64)) -> Result<DetectionSet> {
        let detections = self
            .detections
            .iter()
            .map(|d| {
                Ok(Detection {
                    bbox: rescale_box(&d.bbox, self.reference_size, to_size)?,
                    ..d.clone()
                })
            })
            .collect::<Result<_>>()?;
        Ok(DetectionSet {
            detections,
            reference_size: to_size,
        })
    }
}

/// Channel-first image, `C × H × W` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl Frame {
    pub fn new(channels: usize, height: usize, width: usize, pixels: Vec<f64>) -> Self {
        assert_eq!(pixels.len(), channels * height * width);
        Self {
            channels,
            height,
            width,
            pixels,
        }
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::new(channels, height, width, vec![0.0; channels * height * width])
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels[(c * self.height + y) * self.width + x]
    }
}

/// High-resolution last observed frame.
pub type StillFrame = Frame;

/// Low-resolution sampled clip plus its high-resolution last frame.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub frames: Vec<Frame>,
    pub fps: f64,
    pub last_frame_hi: StillFrame,
}

impl VideoClip {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn frame_size(&self) -> (usize, usize) {
        self.frames.first().map_or((0, 0), Frame::size)
    }

    /// Checks the clip against a configured sample count and low resolution.
    pub fn check(&self, frames: usize, low_res: (usize, usize)) -> Result<()> {
        if self.frames.len() != frames {
            return Err(Error::Shape(format!(
                "clip has {} frames, expected {frames}",
                self.frames.len()
            )));
        }
        if let Some(f) = self.frames.iter().find(|f| f.size() != low_res) {
            return Err(Error::Shape(format!("clip frame is {:?}, expected {low_res:?}", f.size())));
        }
        let (h, w) = low_res;
        if self.last_frame_hi.height < h || self.last_frame_hi.width < w {
            return Err(Error::Shape("still frame is smaller than the video frames".into()));
        }
        Ok(())
    }
}

/// Ground-truth next-active-object annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaAnnotation {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub noun_id: usize,
    pub verb_id: usize,
    pub ttc_seconds: f64,
}

/// One model prediction for a clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaPrediction {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub noun_id: usize,
    pub verb_id: usize,
    pub ttc_seconds: f64,
    pub score: f64,
}

impl From<&StaPrediction> for StaAnnotation {
    fn from(p: &StaPrediction) -> Self {
        StaAnnotation {
            bbox: p.bbox,
            noun_id: p.noun_id,
            verb_id: p.verb_id,
            ttc_seconds: p.ttc_seconds,
        }
    }
}

/// Anything with checkable invariants. Validation never fails; it reports.
pub trait Validate {
    fn violations(&self, vocab: &Vocab) -> Vec<String>;
}

fn check_labels(noun: usize, verb: usize, vocab: &Vocab, out: &mut Vec<String>) {
    if noun >= vocab.nouns {
        out.push(format!("noun_id {noun} outside vocabulary of {}", vocab.nouns));
    }
    if verb >= vocab.verbs {
        out.push(format!("verb_id {verb} outside vocabulary of {}", vocab.verbs));
    }
}

fn check_ttc(ttc: f64, out: &mut Vec<String>) {
    if !ttc.is_finite() || ttc <= 0.0 {
        out.push("ttc must be positive".into());
    }
}

impl Validate for StaAnnotation {
    fn violations(&self, vocab: &Vocab) -> Vec<String> {
        let mut out = Vec::new();
        self.bbox.violations(&mut out);
        check_labels(self.noun_id, self.verb_id, vocab, &mut out);
        check_ttc(self.ttc_seconds, &mut out);
        out
    }
}

impl Validate for StaPrediction {
    fn violations(&self, vocab: &Vocab) -> Vec<String> {
        let mut out = Vec::new();
        self.bbox.violations(&mut out);
        check_labels(self.noun_id, self.verb_id, vocab, &mut out);
        check_ttc(self.ttc_seconds, &mut out);
        if !self.score.is_finite() || !(0.0..=1.0).contains(&self.score) {
            out.push(format!("score {} outside [0, 1]", self.score));
        }
        out
    }
}

impl Validate for Detection {
    fn violations(&self, vocab: &Vocab) -> Vec<String> {
        let mut out = Vec::new();
        self.bbox.violations(&mut out);
        if self.class_id >= vocab.detection_classes() {
            out.push(format!(
                "class_id {} outside detection vocabulary of {}",
                self.class_id,
                vocab.detection_classes()
            ));
        }
        if !(0.0..=1.0).contains(&self.score) {
            out.push(format!("score {} outside [0, 1]", self.score));
        }
        out
    }
}

/// Returns every violation of `record`; empty means valid.
pub fn validate<T: Validate>(record: &T, vocab: &Vocab) -> Vec<String> {
    record.violations(vocab)
}

/// Frame-index bound check for a detection set of a `frames`-long clip.
pub fn detection_frame_violations(set: &DetectionSet, frames: usize) -> Vec<String> {
    set.detections
        .iter()
        .filter(|d| d.frame_index >= frames)
        .map(|d| format!("frame_index {} outside clip of {frames} frames", d.frame_index))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ann(b: BoundingBox, ttc: f64) -> StaAnnotation {
        StaAnnotation {
            bbox: b,
            noun_id: 1,
            verb_id: 2,
            ttc_seconds: ttc,
        }
    }

    #[test]
    fn iou_examples() {
        let a = BoundingBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(box_iou(&a, &a), 1.0);
        assert_eq!(
            box_iou(&BoundingBox::new(0.0, 0.0, 1.0, 1.0), &BoundingBox::new(5.0, 5.0, 6.0, 6.0)),
            0.0
        );
        let b = BoundingBox::new(1.0, 0.0, 3.0, 2.0);
        assert!((box_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn iou_of_degenerate_box_is_zero() {
        let flat = BoundingBox::new(1.0, 1.0, 1.0, 3.0);
        assert_eq!(box_iou(&flat, &flat), 0.0);
        assert_eq!(box_iou(&flat, &BoundingBox::new(0.0, 0.0, 4.0, 4.0)), 0.0);
    }

    #[test]
    fn rescale_examples() {
        let b = BoundingBox::new(10.0, 10.0, 20.0, 20.0);
        assert_eq!(rescale_box(&b, (100.0, 100.0), (100.0, 100.0)).unwrap(), b);
        assert_eq!(
            rescale_box(&b, (100.0, 100.0), (50.0, 50.0)).unwrap(),
            BoundingBox::new(5.0, 5.0, 10.0, 10.0)
        );
        let full = BoundingBox::new(0.0, 0.0, 100.0, 100.0);
        let r = rescale_box(&full, (100.0, 100.0), (224.0, 224.0)).unwrap();
        assert!((r.x2 - 224.0).abs() < 1e-12 && (r.y2 - 224.0).abs() < 1e-12);
        assert_eq!((r.x1, r.y1), (0.0, 0.0));
    }

    #[test]
    fn rescale_rejects_non_positive_sizes() {
        let b = BoundingBox::new(1.0, 1.0, 2.0, 2.0);
        assert!(matches!(rescale_box(&b, (10.0, 10.0), (0.0, 10.0)), Err(Error::Config(_))));
        assert!(matches!(rescale_box(&b, (-1.0, 10.0), (10.0, 10.0)), Err(Error::Config(_))));
    }

    #[test]
    fn validate_examples() {
        let vocab = Vocab::default();
        let good = ann(BoundingBox::new(0.0, 0.0, 2.0, 2.0), 0.5);
        assert!(validate(&good, &vocab).is_empty());
        let flat = ann(BoundingBox::new(1.0, 0.0, 1.0, 2.0), 0.5);
        assert_eq!(validate(&flat, &vocab), vec!["box has zero width".to_string()]);
        let neg = ann(BoundingBox::new(0.0, 0.0, 2.0, 2.0), -1.0);
        assert_eq!(validate(&neg, &vocab), vec!["ttc must be positive".to_string()]);
    }

    #[test]
    fn validate_reports_every_violation() {
        let vocab = Vocab::default();
        let bad = StaPrediction {
            bbox: BoundingBox::new(3.0, 3.0, 3.0, 3.0),
            noun_id: 99,
            verb_id: 9,
            ttc_seconds: 0.0,
            score: 1.5,
        };
        assert_eq!(validate(&bad, &vocab).len(), 6);
        let det = Detection {
            bbox: BoundingBox::new(0.0, 0.0, 1.0, 1.0),
            class_id: vocab.actor_class(),
            frame_index: 0,
            score: 1.0,
        };
        assert!(validate(&det, &vocab).is_empty());
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (-50.0..50.0f64, -50.0..50.0f64, 0.1..40.0f64, 0.1..40.0f64).prop_map(|(x, y, w, h)| BoundingBox::new(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = box_iou(&a, &b);
            prop_assert_eq!(ab, box_iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn iou_with_self_is_one(a in arb_box()) {
            prop_assert!((box_iou(&a, &a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn rescale_round_trip(
            x in 0.0..50.0f64, y in 0.0..50.0f64, w in 0.5..40.0f64, h in 0.5..40.0f64,
            th in 100.0..400.0f64, tw in 100.0..400.0f64,
        ) {
            let b = BoundingBox::new(x, y, x + w, y + h);
            let s = (100.0, 100.0);
            let there = rescale_box(&b, s, (th, tw)).unwrap();
            let back = rescale_box(&there, (th, tw), s).unwrap();
            for (p, q) in <[f64; 4]>::from(b).iter().zip(<[f64; 4]>::from(back).iter()) {
                prop_assert!((p - q).abs() <= 1e-9 * p.abs().max(1.0));
            }
        }
    }
}
