//! Line-delimited JSON annotation, prediction and detection files.
//!
//! One record per line. Field order on write is fixed, so saving and loading
//! reproduces files exactly. Parse failures name the line and field.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::types::{validate, BoundingBox, Detection, DetectionSet, StaAnnotation, StaPrediction, Vocab};

/// Maximum number of predictions kept per clip.
pub const TOP_K: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnnotationRecord {
    pub clip_id: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub noun_id: usize,
    pub verb_id: usize,
    pub ttc_seconds: f64,
    pub frame_count: usize,
    pub fps: f64,
}

impl AnnotationRecord {
    pub fn annotation(&self) -> StaAnnotation {
        StaAnnotation {
            bbox: self.bbox,
            noun_id: self.noun_id,
            verb_id: self.verb_id,
            ttc_seconds: self.ttc_seconds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictionRecord {
    pub clip_id: String,
    pub predictions: Vec<StaPrediction>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectionRecord {
    pub clip_id: String,
    pub reference_size: (f64, f64),
    pub detections: Vec<Detection>,
}

impl DetectionRecord {
    pub fn detection_set(&self) -> DetectionSet {
        DetectionSet {
            detections: self.detections.clone(),
            reference_size: self.reference_size,
        }
    }
}

struct LineCtx<'a> {
    path: &'a Path,
    line: usize,
}

impl LineCtx<'_> {
    fn err(&self, field: &str, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            line: self.line,
            field: field.to_string(),
            message: message.into(),
        }
    }

    fn object<'v>(&self, v: &'v Value, field: &str) -> Result<&'v Map<String, Value>> {
        v.as_object().ok_or_else(|| self.err(field, "expected an object"))
    }

    fn get<'v>(&self, obj: &'v Map<String, Value>, prefix: &str, field: &str) -> Result<&'v Value> {
        obj.get(field)
            .ok_or_else(|| self.err(&format!("{prefix}{field}"), "missing field"))
    }

    fn f64(&self, obj: &Map<String, Value>, prefix: &str, field: &str) -> Result<f64> {
        self.get(obj, prefix, field)?
            .as_f64()
            .ok_or_else(|| self.err(&format!("{prefix}{field}"), "expected a number"))
    }

    fn usize(&self, obj: &Map<String, Value>, prefix: &str, field: &str) -> Result<usize> {
        self.get(obj, prefix, field)?
            .as_u64()
            .map(|v| v as usize)
            .ok_or_else(|| self.err(&format!("{prefix}{field}"), "expected a non-negative integer"))
    }

    fn string(&self, obj: &Map<String, Value>, prefix: &str, field: &str) -> Result<String> {
        self.get(obj, prefix, field)?
            .as_str()
            .map(str::to_owned)
            .ok_or_else(|| self.err(&format!("{prefix}{field}"), "expected a string"))
    }

    fn numbers<const N: usize>(&self, obj: &Map<String, Value>, prefix: &str, field: &str) -> Result<[f64; N]> {
        let name = format!("{prefix}{field}");
        let arr = self
            .get(obj, prefix, field)?
            .as_array()
            .filter(|a| a.len() == N)
            .ok_or_else(|| self.err(&name, format!("expected an array of {N} numbers")))?;
        let mut out = [0.0; N];
        for (o, v) in out.iter_mut().zip(arr) {
            *o = v.as_f64().ok_or_else(|| self.err(&name, "expected numbers"))?;
        }
        Ok(out)
    }

    fn bbox(&self, obj: &Map<String, Value>, prefix: &str) -> Result<BoundingBox> {
        Ok(BoundingBox::from(self.numbers::<4>(obj, prefix, "box")?))
    }

    fn check(&self, violations: Vec<String>) -> Result<()> {
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(
                violations
                    .into_iter()
                    .map(|v| format!("{}:{}: {v}", self.path.display(), self.line))
                    .collect(),
            ))
        }
    }
}

fn for_each_line(path: &Path, mut f: impl FnMut(&LineCtx<'_>, Value) -> Result<()>) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ctx = LineCtx { path, line: i + 1 };
        let value: Value = serde_json::from_str(line).map_err(|e| ctx.err("<record>", e.to_string()))?;
        f(&ctx, value)?;
    }
    Ok(())
}

fn write_lines<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("records serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_annotation_records(path: &Path, vocab: &Vocab) -> Result<Vec<AnnotationRecord>> {
    let mut out = Vec::new();
    for_each_line(path, |ctx, v| {
        let obj = ctx.object(&v, "<record>")?;
        let rec = AnnotationRecord {
            clip_id: ctx.string(obj, "", "clip_id")?,
            bbox: ctx.bbox(obj, "")?,
            noun_id: ctx.usize(obj, "", "noun_id")?,
            verb_id: ctx.usize(obj, "", "verb_id")?,
            ttc_seconds: ctx.f64(obj, "", "ttc_seconds")?,
            frame_count: ctx.usize(obj, "", "frame_count")?,
            fps: ctx.f64(obj, "", "fps")?,
        };
        let mut violations = validate(&rec.annotation(), vocab);
        if !(rec.fps > 0.0) {
            violations.push("fps must be positive".into());
        }
        ctx.check(violations)?;
        out.push(rec);
        Ok(())
    })?;
    Ok(out)
}

/// Loads annotations grouped by clip id.
pub fn load_annotations(path: &Path, vocab: &Vocab) -> Result<BTreeMap<String, Vec<StaAnnotation>>> {
    let mut map: BTreeMap<String, Vec<StaAnnotation>> = BTreeMap::new();
    for rec in read_annotation_records(path, vocab)? {
        map.entry(rec.clip_id.clone()).or_default().push(rec.annotation());
    }
    Ok(map)
}

pub fn save_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    write_lines(path, records)
}

pub fn load_predictions(path: &Path, vocab: &Vocab) -> Result<Vec<PredictionRecord>> {
    let mut out = Vec::new();
    for_each_line(path, |ctx, v| {
        let obj = ctx.object(&v, "<record>")?;
        let clip_id = ctx.string(obj, "", "clip_id")?;
        let entries = ctx
            .get(obj, "", "predictions")?
            .as_array()
            .ok_or_else(|| ctx.err("predictions", "expected an array"))?;
        if entries.len() > TOP_K {
            return Err(ctx.err("predictions", format!("top-5 cap exceeded ({} entries)", entries.len())));
        }
        let mut predictions = Vec::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            let prefix = format!("predictions[{i}].");
            let e = ctx.object(e, &prefix)?;
            let p = StaPrediction {
                bbox: ctx.bbox(e, &prefix)?,
                noun_id: ctx.usize(e, &prefix, "noun_id")?,
                verb_id: ctx.usize(e, &prefix, "verb_id")?,
                ttc_seconds: ctx.f64(e, &prefix, "ttc_seconds")?,
                score: ctx.f64(e, &prefix, "score")?,
            };
            ctx.check(validate(&p, vocab))?;
            predictions.push(p);
        }
        if predictions.windows(2).any(|w| w[1].score > w[0].score) {
            return Err(ctx.err("predictions", "scores must be non-increasing"));
        }
        out.push(PredictionRecord { clip_id, predictions });
        Ok(())
    })?;
    Ok(out)
}

pub fn save_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    for r in records {
        if r.predictions.len() > TOP_K {
            return Err(Error::Protocol(format!(
                "clip {}: top-5 cap exceeded ({} entries)",
                r.clip_id,
                r.predictions.len()
            )));
        }
    }
    write_lines(path, records)
}

pub fn load_detections(path: &Path, vocab: &Vocab) -> Result<Vec<DetectionRecord>> {
    let mut out = Vec::new();
    for_each_line(path, |ctx, v| {
        let obj = ctx.object(&v, "<record>")?;
        let clip_id = ctx.string(obj, "", "clip_id")?;
        let [h, w] = ctx.numbers::<2>(obj, "", "reference_size")?;
        let entries = ctx
            .get(obj, "", "detections")?
            .as_array()
            .ok_or_else(|| ctx.err("detections", "expected an array"))?;
        let mut detections = Vec::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            let prefix = format!("detections[{i}].");
            let e = ctx.object(e, &prefix)?;
            let d = Detection {
                bbox: ctx.bbox(e, &prefix)?,
                class_id: ctx.usize(e, &prefix, "class_id")?,
                frame_index: ctx.usize(e, &prefix, "frame_index")?,
                score: ctx.f64(e, &prefix, "score")?,
            };
            ctx.check(validate(&d, vocab))?;
            detections.push(d);
        }
        out.push(DetectionRecord {
            clip_id,
            reference_size: (h, w),
            detections,
        });
        Ok(())
    })?;
    Ok(out)
}

pub fn save_detections(path: &Path, records: &[DetectionRecord]) -> Result<()> {
    write_lines(path, records)
}
