//! Two-stage detection head.
//!
//! An RPN scores anchors on every pyramid level and yields proposals. RoIAlign
//! pools each proposal, a box head flattens it to a representation, a global
//! context vector from the top pyramid level is fused in residually, and four
//! linear heads predict noun (plus background), class-specific box deltas,
//! verb and raw time to contact.

use std::rc::Rc;

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::sparse::{global_average_pool, roi_align, LevelLayout, RoiRequest};
use crate::nn::{softplus, Conv, ConvSpec, Graph, Init, Linear, ParamStore, Tensor, Var};
use crate::pyramid::FeaturePyramid;
use crate::types::{box_iou, BoundingBox, StaAnnotation, StaPrediction, Vocab};

/// Scale applied to a loss component before summation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub rpn_objectness: f64,
    pub rpn_box: f64,
    pub roi_class: f64,
    pub roi_box: f64,
    pub verb: f64,
    pub ttc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rpn_objectness: 1.0,
            rpn_box: 1.0,
            roi_class: 1.0,
            roi_box: 1.0,
            verb: 1.0,
            ttc: 1.0,
        }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 6] {
        [
            self.rpn_objectness,
            self.rpn_box,
            self.roi_class,
            self.roi_box,
            self.verb,
            self.ttc,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    /// Anchor side at scale 1 is `stride * anchor_base`.
    pub anchor_base: f64,
    pub anchor_scales: Vec<f64>,
    /// Height over width.
    pub aspect_ratios: Vec<f64>,
    /// Highest-scoring anchors kept per level before NMS.
    pub rpn_pre_nms_top_k: usize,
    pub rpn_nms_iou: f64,
    pub rpn_post_nms_train: usize,
    pub rpn_post_nms_eval: usize,
    pub rpn_min_size: f64,
    pub rpn_batch: usize,
    pub rpn_positive_fraction: f64,
    pub rpn_box_weights: [f64; 4],
    pub roi_output: usize,
    pub roi_sampling: usize,
    pub roi_canonical_size: f64,
    pub roi_canonical_level: usize,
    pub roi_batch: usize,
    pub roi_positive_fraction: f64,
    pub roi_box_weights: [f64; 4],
    pub representation_dim: usize,
    pub positive_iou: f64,
    pub negative_iou: f64,
    pub add_gt_proposals: bool,
    pub box_beta: f64,
    pub ttc_beta: f64,
    pub score_threshold: f64,
    pub final_nms_iou: f64,
    pub detections_per_clip: usize,
    pub loss_weights: LossWeights,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            anchor_base: 2.0,
            anchor_scales: vec![1.0, std::f64::consts::SQRT_2, 2.0],
            aspect_ratios: vec![0.5, 1.0, 2.0],
            rpn_pre_nms_top_k: 300,
            rpn_nms_iou: 0.7,
            rpn_post_nms_train: 256,
            rpn_post_nms_eval: 64,
            rpn_min_size: 1.0,
            rpn_batch: 256,
            rpn_positive_fraction: 0.5,
            rpn_box_weights: [1.0, 1.0, 1.0, 1.0],
            roi_output: 7,
            roi_sampling: 1,
            roi_canonical_size: 16.0,
            roi_canonical_level: 0,
            roi_batch: 64,
            roi_positive_fraction: 0.25,
            roi_box_weights: [10.0, 10.0, 5.0, 5.0],
            representation_dim: 128,
            positive_iou: 0.5,
            negative_iou: 0.4,
            add_gt_proposals: true,
            box_beta: 1.0 / 9.0,
            ttc_beta: 1.0,
            score_threshold: 0.05,
            final_nms_iou: 0.5,
            detections_per_clip: 5,
            loss_weights: LossWeights::default(),
        }
    }
}

impl HeadConfig {
    pub fn anchors_per_location(&self) -> usize {
        self.anchor_scales.len() * self.aspect_ratios.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.anchors_per_location() == 0 {
            return Err(Error::Config("at least one anchor scale and aspect ratio is required".into()));
        }
        if !(self.negative_iou <= self.positive_iou && self.positive_iou > 0.0 && self.positive_iou <= 1.0) {
            return Err(Error::Config(format!(
                "IoU bands must satisfy 0 <= negative ({}) <= positive ({}) <= 1",
                self.negative_iou, self.positive_iou
            )));
        }
        if self.roi_output == 0 || self.roi_sampling == 0 || self.representation_dim == 0 {
            return Err(Error::Config(
                "RoI output, sampling and representation sizes must be positive".into(),
            ));
        }
        if self.detections_per_clip == 0 || self.detections_per_clip > 5 {
            return Err(Error::Config("detections_per_clip must be in 1..=5".into()));
        }
        Ok(())
    }
}

/// A region proposal in still-frame coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub bbox: BoundingBox,
    pub objectness: f64,
}

/// Encodes `target` relative to `reference` as `(dx, dy, dw, dh)`.
pub fn encode_box(reference: &BoundingBox, target: &BoundingBox, weights: [f64; 4]) -> [f64; 4] {
    let (rw, rh) = (reference.width(), reference.height());
    let (rx, ry) = reference.center();
    let (tx, ty) = target.center();
    [
        weights[0] * (tx - rx) / rw,
        weights[1] * (ty - ry) / rh,
        weights[2] * (target.width() / rw).ln(),
        weights[3] * (target.height() / rh).ln(),
    ]
}

const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// Inverse of [`encode_box`], with the log-scale clamped against overflow.
pub fn decode_box(reference: &BoundingBox, deltas: [f64; 4], weights: [f64; 4]) -> BoundingBox {
    let (rw, rh) = (reference.width(), reference.height());
    let (rx, ry) = reference.center();
    let cx = rx + deltas[0] / weights[0] * rw;
    let cy = ry + deltas[1] / weights[1] * rh;
    let w = rw * (deltas[2] / weights[2]).min(MAX_LOG_SCALE).exp();
    let h = rh * (deltas[3] / weights[3]).min(MAX_LOG_SCALE).exp();
    BoundingBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
}

/// Greedy non-maximum suppression. Returns kept indices, highest score first.
/// A box is suppressed when its IoU with a kept box exceeds `iou`.
pub fn nms(boxes: &[BoundingBox], scores: &[f64], iou: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| box_iou(&boxes[k], &boxes[i]) <= iou) {
            keep.push(i);
        }
    }
    keep
}

/// Anchors for every pyramid location, in the RPN output order.
#[derive(Debug, Clone, Default)]
pub struct AnchorSet {
    pub boxes: Vec<BoundingBox>,
    pub levels: Vec<usize>,
    /// Flat index of `dx` in the delta buffer and the stride between coordinates.
    pub delta_index: Vec<(usize, usize)>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn delta_positions(&self, anchor: usize) -> [usize; 4] {
        let (base, plane) = self.delta_index[anchor];
        [base, base + plane, base + 2 * plane, base + 3 * plane]
    }
}

/// Anchor layout: level, then anchor shape `(scale, ratio)`, then `(y, x)`.
pub fn generate_anchors(sizes: &[(usize, usize)], strides: &[usize], cfg: &HeadConfig) -> AnchorSet {
    let a = cfg.anchors_per_location();
    let mut set = AnchorSet::default();
    let mut delta_offset = 0;
    for (level, (&(h, w), &stride)) in sizes.iter().zip(strides).enumerate() {
        let s = stride as f64;
        let plane = h * w;
        let mut k = 0;
        for &scale in &cfg.anchor_scales {
            for &ratio in &cfg.aspect_ratios {
                let side = s * cfg.anchor_base * scale;
                let (aw, ah) = (side / ratio.sqrt(), side * ratio.sqrt());
                for y in 0..h {
                    for x in 0..w {
                        let (cx, cy) = ((x as f64 + 0.5) * s, (y as f64 + 0.5) * s);
                        set.boxes
                            .push(BoundingBox::new(cx - aw / 2.0, cy - ah / 2.0, cx + aw / 2.0, cy + ah / 2.0));
                        set.levels.push(level);
                        set.delta_index.push((delta_offset + 4 * k * plane + y * w + x, plane));
                    }
                }
                k += 1;
            }
        }
        delta_offset += 4 * a * plane;
    }
    set
}

/// Region proposal network weights shared across levels.
#[derive(Debug, Clone)]
pub struct Rpn {
    conv: Conv,
    objectness: Conv,
    deltas: Conv,
}

/// Differentiable RPN outputs, flat over all anchors.
#[derive(Debug, Clone)]
pub struct RpnOutputs {
    pub objectness: Var,
    pub deltas: Var,
    pub anchors: AnchorSet,
}

impl Rpn {
    pub fn new(store: &mut ParamStore, channels: usize, cfg: &HeadConfig) -> Self {
        let a = cfg.anchors_per_location();
        let one = ConvSpec::conv2d(1, 1, 0);
        Self {
            conv: Conv::new(store, "rpn.conv", channels, channels, ConvSpec::conv2d(3, 1, 1)),
            objectness: Conv::with_init(store, "rpn.objectness", channels, a, one, Init::Uniform(0.01)),
            deltas: Conv::with_init(store, "rpn.deltas", channels, 4 * a, one, Init::Uniform(0.01)),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, pyramid: &FeaturePyramid, cfg: &HeadConfig) -> RpnOutputs {
        let mut logits = Vec::new();
        let mut deltas = Vec::new();
        let mut sizes = Vec::new();
        for &p in &pyramid.levels {
            let s = g.shape(p);
            sizes.push((s[1], s[2]));
            let t = self.conv.forward(g, store, p);
            let t = g.silu(t);
            logits.push(self.objectness.forward(g, store, t));
            deltas.push(self.deltas.forward(g, store, t));
        }
        RpnOutputs {
            objectness: g.concat(&logits),
            deltas: g.concat(&deltas),
            anchors: generate_anchors(&sizes, &pyramid.strides, cfg),
        }
    }
}

/// Turns RPN scores into clipped, NMS-reduced proposals.
pub fn propose(
    logits: &[f64],
    deltas: &[f64],
    anchors: &AnchorSet,
    image: (f64, f64),
    cfg: &HeadConfig,
    top_k: usize,
) -> Vec<Proposal> {
    let levels = anchors.levels.iter().copied().max().map_or(0, |l| l + 1);
    let mut boxes = Vec::new();
    let mut scores = Vec::new();
    for level in 0..levels {
        let mut idx: Vec<usize> = (0..anchors.len()).filter(|&i| anchors.levels[i] == level).collect();
        idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
        idx.truncate(cfg.rpn_pre_nms_top_k);
        for i in idx {
            let d = anchors.delta_positions(i).map(|p| deltas[p]);
            let b = decode_box(&anchors.boxes[i], d, cfg.rpn_box_weights).clip(image);
            if b.is_finite() && b.width() >= cfg.rpn_min_size && b.height() >= cfg.rpn_min_size {
                boxes.push(b);
                scores.push(logits[i]);
            }
        }
    }
    let mut keep = nms(&boxes, &scores, cfg.rpn_nms_iou);
    keep.truncate(top_k);
    keep.into_iter()
        .map(|i| Proposal {
            bbox: boxes[i],
            objectness: 1.0 / (1.0 + (-scores[i]).exp()),
        })
        .collect()
}

/// Runs the RPN and extracts proposals from its current values.
pub fn rpn_forward(
    g: &mut Graph,
    store: &ParamStore,
    rpn: &Rpn,
    pyramid: &FeaturePyramid,
    image: (f64, f64),
    cfg: &HeadConfig,
    top_k: usize,
) -> (RpnOutputs, Vec<Proposal>) {
    let out = rpn.forward(g, store, pyramid, cfg);
    let proposals = propose(
        g.value(out.objectness).data(),
        g.value(out.deltas).data(),
        &out.anchors,
        image,
        cfg,
        top_k,
    );
    (out, proposals)
}

/// Pyramid level for a box under the `log2(size / canonical)` rule.
pub fn roi_level(b: &BoundingBox, cfg: &HeadConfig, levels: usize) -> usize {
    let size = b.area().sqrt();
    let k = cfg.roi_canonical_level as f64 + (size / cfg.roi_canonical_size + 1e-8).log2().floor();
    k.clamp(0.0, (levels - 1) as f64) as usize
}

/// RoIAlign over the pyramid. Returns `R × (C_p · out · out)` features and the
/// indices of the boxes that were pooled (degenerate boxes are skipped).
pub fn roi_extract(
    g: &mut Graph,
    pyramid: &FeaturePyramid,
    boxes: &[BoundingBox],
    cfg: &HeadConfig,
) -> Result<(Var, Vec<usize>)> {
    let mut layouts = Vec::with_capacity(pyramid.levels.len());
    let mut offset = 0;
    for (&p, &stride) in pyramid.levels.iter().zip(&pyramid.strides) {
        let s = g.shape(p);
        layouts.push(LevelLayout {
            offset,
            channels: s[0],
            height: s[1],
            width: s[2],
            stride: stride as f64,
        });
        offset += s[0] * s[1] * s[2];
    }
    let mut kept = Vec::with_capacity(boxes.len());
    let mut requests = Vec::with_capacity(boxes.len());
    for (i, b) in boxes.iter().enumerate() {
        if !b.is_valid() {
            warn!("skipping degenerate proposal {b:?}");
            continue;
        }
        kept.push(i);
        requests.push(RoiRequest {
            x1: b.x1,
            y1: b.y1,
            x2: b.x2,
            y2: b.y2,
            level: roi_level(b, cfg, layouts.len()),
        });
    }
    if requests.is_empty() {
        return Err(Error::Shape("no valid proposals to pool".into()));
    }
    let flat = g.concat(&pyramid.levels);
    let map = roi_align(&layouts, offset, &requests, cfg.roi_output, cfg.roi_sampling);
    Ok((g.sparse(flat, Rc::new(map)), kept))
}

/// Differentiable per-proposal head outputs.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutputs {
    /// `R × (nouns + 1)`; the last column is background.
    pub noun_logits: Var,
    /// `R × 4·nouns`, deltas for class `c` at columns `4c..4c+4`.
    pub box_deltas: Var,
    pub verb_logits: Var,
    /// `R × 1`, pre-softplus.
    pub ttc_raw: Var,
}

impl HeadOutputs {
    pub fn values(&self, g: &Graph) -> HeadValues {
        HeadValues {
            noun_logits: g.value(self.noun_logits).clone(),
            box_deltas: g.value(self.box_deltas).clone(),
            verb_logits: g.value(self.verb_logits).clone(),
            ttc_raw: g.value(self.ttc_raw).clone(),
        }
    }
}

/// Plain values of [`HeadOutputs`].
#[derive(Debug, Clone, PartialEq)]
pub struct HeadValues {
    pub noun_logits: Tensor,
    pub box_deltas: Tensor,
    pub verb_logits: Tensor,
    pub ttc_raw: Tensor,
}

impl HeadValues {
    pub fn rows(&self) -> usize {
        self.noun_logits.dim(0)
    }

    pub fn is_finite(&self) -> bool {
        self.noun_logits.is_finite() && self.box_deltas.is_finite() && self.verb_logits.is_finite() && self.ttc_raw.is_finite()
    }
}

/// Box head, global-local fusion and the four prediction heads.
#[derive(Debug, Clone)]
pub struct RoiHead {
    pub box_head: Linear,
    pub fuse: Linear,
    pub noun: Linear,
    pub deltas: Linear,
    pub verb: Linear,
    pub ttc: Linear,
    pub nouns: usize,
}

impl RoiHead {
    pub fn new(store: &mut ParamStore, channels: usize, cfg: &HeadConfig, vocab: &Vocab) -> Self {
        let pooled = channels * cfg.roi_output * cfg.roi_output;
        let rep = cfg.representation_dim;
        Self {
            box_head: Linear::new(store, "roi.box_head", pooled, rep, true),
            fuse: Linear::new(store, "roi.global_fuse", rep + channels, rep, true),
            noun: Linear::with_init(store, "roi.noun", rep, vocab.nouns + 1, true, Init::Uniform(0.01)),
            deltas: Linear::with_init(store, "roi.deltas", rep, 4 * vocab.nouns, true, Init::Uniform(0.001)),
            verb: Linear::with_init(store, "roi.verb", rep, vocab.verbs, true, Init::Uniform(0.01)),
            ttc: Linear::with_init(store, "roi.ttc", rep, 1, true, Init::Uniform(0.01)),
            nouns: vocab.nouns,
        }
    }

    /// Flattened RoI features to the per-proposal representation.
    pub fn represent(&self, g: &mut Graph, store: &ParamStore, pooled: Var) -> Var {
        let x = self.box_head.forward(g, store, pooled);
        g.silu(x)
    }

    /// `local + dense(local ∥ gap(P_t))`, one global vector shared by all rows.
    pub fn global_local_fuse(&self, g: &mut Graph, store: &ParamStore, local: Var, pyramid: &FeaturePyramid) -> Var {
        let top = pyramid.top();
        let s = g.shape(top).to_vec();
        let global = g.sparse(top, Rc::new(global_average_pool(s[0], s[1], s[2])));
        let rows = g.shape(local)[0];
        let global = g.repeat_rows(global, rows);
        let both = g.concat_cols(&[local, global]);
        let dense = self.fuse.forward(g, store, both);
        g.add(local, dense)
    }

    pub fn predict_heads(&self, g: &mut Graph, store: &ParamStore, fused: Var) -> HeadOutputs {
        HeadOutputs {
            noun_logits: self.noun.forward(g, store, fused),
            box_deltas: self.deltas.forward(g, store, fused),
            verb_logits: self.verb.forward(g, store, fused),
            ttc_raw: self.ttc.forward(g, store, fused),
        }
    }

    /// Pooling through prediction for a fixed list of boxes.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        pyramid: &FeaturePyramid,
        boxes: &[BoundingBox],
        cfg: &HeadConfig,
    ) -> Result<(HeadOutputs, Vec<usize>)> {
        let (pooled, kept) = roi_extract(g, pyramid, boxes, cfg)?;
        let local = self.represent(g, store, pooled);
        let fused = self.global_local_fuse(g, store, local, pyramid);
        Ok((self.predict_heads(g, store, fused), kept))
    }
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
        )
        .0
}

/// Decodes head values into at most `detections_per_clip` predictions.
pub fn postprocess(values: &HeadValues, proposals: &[BoundingBox], image: (f64, f64), cfg: &HeadConfig) -> Vec<StaPrediction> {
    let classes = values.noun_logits.dim(1);
    let nouns = classes - 1;
    let verbs = values.verb_logits.dim(1);
    let mut candidates: Vec<StaPrediction> = Vec::new();
    for (r, proposal) in proposals.iter().enumerate().take(values.rows()) {
        let probs = softmax(&values.noun_logits.data()[r * classes..(r + 1) * classes]);
        let verb_id = argmax(&values.verb_logits.data()[r * verbs..(r + 1) * verbs]);
        let ttc_seconds = softplus(values.ttc_raw.data()[r]);
        for (c, &p) in probs.iter().enumerate().take(nouns) {
            if p <= cfg.score_threshold {
                continue;
            }
            let d = &values.box_deltas.data()[r * 4 * nouns + 4 * c..r * 4 * nouns + 4 * c + 4];
            let b = decode_box(proposal, [d[0], d[1], d[2], d[3]], cfg.roi_box_weights).clip(image);
            if !b.is_valid() {
                continue;
            }
            candidates.push(StaPrediction {
                bbox: b,
                noun_id: c,
                verb_id,
                ttc_seconds,
                score: p,
            });
        }
    }
    let mut kept = Vec::new();
    for c in 0..nouns {
        let idx: Vec<usize> = (0..candidates.len()).filter(|&i| candidates[i].noun_id == c).collect();
        if idx.is_empty() {
            continue;
        }
        let boxes: Vec<BoundingBox> = idx.iter().map(|&i| candidates[i].bbox).collect();
        let scores: Vec<f64> = idx.iter().map(|&i| candidates[i].score).collect();
        kept.extend(nms(&boxes, &scores, cfg.final_nms_iou).into_iter().map(|k| idx[k]));
    }
    kept.sort_by(|&a, &b| candidates[b].score.total_cmp(&candidates[a].score).then(a.cmp(&b)));
    kept.truncate(cfg.detections_per_clip);
    kept.into_iter().map(|i| candidates[i].clone()).collect()
}

/// Training label of an anchor or proposal. `Positive` carries the GT index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Positive(usize),
    Negative,
    Ignored,
}

/// IoU-band labelling; every GT also claims the boxes with its highest IoU.
pub fn assign_targets(boxes: &[BoundingBox], gts: &[BoundingBox], cfg: &HeadConfig) -> Vec<Label> {
    if gts.is_empty() {
        return vec![Label::Negative; boxes.len()];
    }
    let ious: Vec<Vec<f64>> = boxes.iter().map(|b| gts.iter().map(|t| box_iou(b, t)).collect()).collect();
    let mut labels: Vec<Label> = ious
        .iter()
        .map(|row| {
            let (best, iou) = row.iter().enumerate().fold(
                (0, f64::NEG_INFINITY),
                |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
            );
            if iou >= cfg.positive_iou {
                Label::Positive(best)
            } else if iou < cfg.negative_iou {
                Label::Negative
            } else {
                Label::Ignored
            }
        })
        .collect();
    for j in 0..gts.len() {
        let best = ious.iter().map(|row| row[j]).fold(0.0, f64::max);
        if best <= 0.0 {
            continue;
        }
        for (i, row) in ious.iter().enumerate() {
            if row[j] == best && !matches!(labels[i], Label::Positive(_)) {
                labels[i] = Label::Positive(j);
            }
        }
    }
    labels
}

/// Draws up to `batch` labelled items with at most `positive_fraction`
/// positives. Returns sorted indices.
pub fn sample_labels(labels: &[Label], batch: usize, positive_fraction: f64, rng: &mut impl Rng) -> Vec<usize> {
    let mut pos: Vec<usize> = (0..labels.len())
        .filter(|&i| matches!(labels[i], Label::Positive(_)))
        .collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == Label::Negative).collect();
    pos.shuffle(rng);
    neg.shuffle(rng);
    pos.truncate(((batch as f64) * positive_fraction) as usize);
    neg.truncate(batch - pos.len());
    let mut out: Vec<usize> = pos.into_iter().chain(neg).collect();
    out.sort_unstable();
    out
}

/// Sampled anchors with their labels.
#[derive(Debug, Clone, Default)]
pub struct RpnTargets {
    pub anchors: Vec<usize>,
    pub labels: Vec<Label>,
}

/// Sampled proposals with their labels.
#[derive(Debug, Clone, Default)]
pub struct RoiTargets {
    pub boxes: Vec<BoundingBox>,
    pub labels: Vec<Label>,
}

pub fn rpn_targets(anchors: &AnchorSet, gts: &[StaAnnotation], cfg: &HeadConfig, rng: &mut impl Rng) -> RpnTargets {
    let gt_boxes: Vec<BoundingBox> = gts.iter().map(|a| a.bbox).collect();
    let labels = assign_targets(&anchors.boxes, &gt_boxes, cfg);
    let picked = sample_labels(&labels, cfg.rpn_batch, cfg.rpn_positive_fraction, rng);
    RpnTargets {
        labels: picked.iter().map(|&i| labels[i]).collect(),
        anchors: picked,
    }
}

pub fn roi_targets(proposals: &[Proposal], gts: &[StaAnnotation], cfg: &HeadConfig, rng: &mut impl Rng) -> RoiTargets {
    let mut boxes: Vec<BoundingBox> = proposals.iter().map(|p| p.bbox).collect();
    if cfg.add_gt_proposals {
        boxes.extend(gts.iter().map(|a| a.bbox));
    }
    let gt_boxes: Vec<BoundingBox> = gts.iter().map(|a| a.bbox).collect();
    let labels = assign_targets(&boxes, &gt_boxes, cfg);
    let picked = sample_labels(&labels, cfg.roi_batch, cfg.roi_positive_fraction, rng);
    RoiTargets {
        boxes: picked.iter().map(|&i| boxes[i]).collect(),
        labels: picked.iter().map(|&i| labels[i]).collect(),
    }
}

/// Loss components as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub parts: [Var; 6],
    pub total: Var,
}

/// Loss component values.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBundle {
    pub rpn_objectness: f64,
    pub rpn_box: f64,
    pub roi_class: f64,
    pub roi_box: f64,
    pub verb_ce: f64,
    pub ttc_reg: f64,
    pub total: f64,
}

impl LossBundle {
    pub const NAMES: [&'static str; 6] = ["rpn_objectness", "rpn_box", "roi_class", "roi_box", "verb_ce", "ttc_reg"];

    pub fn components(&self) -> [f64; 6] {
        [
            self.rpn_objectness,
            self.rpn_box,
            self.roi_class,
            self.roi_box,
            self.verb_ce,
            self.ttc_reg,
        ]
    }

    pub fn from_components(c: [f64; 6], total: f64) -> Self {
        Self {
            rpn_objectness: c[0],
            rpn_box: c[1],
            roi_class: c[2],
            roi_box: c[3],
            verb_ce: c[4],
            ttc_reg: c[5],
            total,
        }
    }

    /// Elementwise sum, for averaging over a batch.
    pub fn accumulate(&mut self, other: &LossBundle, scale: f64) {
        let mut c = self.components();
        for (a, b) in c.iter_mut().zip(other.components()) {
            *a += scale * b;
        }
        *self = Self::from_components(c, self.total + scale * other.total);
    }
}

impl LossVars {
    pub fn bundle(&self, g: &Graph) -> LossBundle {
        LossBundle::from_components(self.parts.map(|v| g.value(v).item()), g.value(self.total).item())
    }
}

/// RPN losses only: objectness BCE over sampled anchors, box smooth-L1 on positives.
fn rpn_losses(g: &mut Graph, rpn: &RpnOutputs, targets: &RpnTargets, gts: &[StaAnnotation], cfg: &HeadConfig) -> (Var, Var) {
    let mut obj = Vec::with_capacity(targets.anchors.len());
    let mut reg = Vec::new();
    let mut positives = 0;
    for (&a, label) in targets.anchors.iter().zip(&targets.labels) {
        match *label {
            Label::Positive(j) => {
                obj.push((a, 1.0));
                positives += 1;
                let t = encode_box(&rpn.anchors.boxes[a], &gts[j].bbox, cfg.rpn_box_weights);
                for (p, v) in rpn.anchors.delta_positions(a).into_iter().zip(t) {
                    reg.push((p, v));
                }
            }
            Label::Negative => obj.push((a, 0.0)),
            Label::Ignored => {}
        }
    }
    let n = obj.len().max(1) as f64;
    let objectness = g.bce_with_logits(rpn.objectness, Rc::new(obj), n);
    let boxes = g.smooth_l1(rpn.deltas, Rc::new(reg), cfg.box_beta, positives.max(1) as f64);
    (objectness, boxes)
}

/// RoI classification, class-specific box, verb and ttc losses.
fn roi_losses(
    g: &mut Graph,
    heads: &HeadOutputs,
    boxes: &[BoundingBox],
    labels: &[Label],
    gts: &[StaAnnotation],
    cfg: &HeadConfig,
) -> [Var; 4] {
    let classes = g.shape(heads.noun_logits)[1];
    let nouns = classes - 1;
    let mut cls = Vec::with_capacity(labels.len());
    let mut reg = Vec::new();
    let mut verb = Vec::new();
    let mut ttc = Vec::new();
    for (r, (label, b)) in labels.iter().zip(boxes).enumerate() {
        match *label {
            Label::Positive(j) => {
                let gt = &gts[j];
                cls.push((r, gt.noun_id));
                let t = encode_box(b, &gt.bbox, cfg.roi_box_weights);
                for (k, v) in t.into_iter().enumerate() {
                    reg.push((r * 4 * nouns + 4 * gt.noun_id + k, v));
                }
                verb.push((r, gt.verb_id));
                ttc.push((r, gt.ttc_seconds));
            }
            Label::Negative => cls.push((r, nouns)),
            Label::Ignored => {}
        }
    }
    let positives = verb.len().max(1) as f64;
    let n = cls.len().max(1) as f64;
    let class_loss = g.softmax_cross_entropy(heads.noun_logits, Rc::new(cls), n);
    let box_loss = g.smooth_l1(heads.box_deltas, Rc::new(reg), cfg.box_beta, positives);
    let verb_loss = g.softmax_cross_entropy(heads.verb_logits, Rc::new(verb), positives);
    let ttc_pos = g.softplus(heads.ttc_raw);
    let ttc_loss = g.smooth_l1(ttc_pos, Rc::new(ttc), cfg.ttc_beta, positives);
    [class_loss, box_loss, verb_loss, ttc_loss]
}

/// All six losses and their weighted total. `roi_boxes` and `roi_labels`
/// are aligned with the rows of `heads`.
pub fn compute_losses(
    g: &mut Graph,
    rpn: &RpnOutputs,
    rpn_targets: &RpnTargets,
    heads: &HeadOutputs,
    roi_boxes: &[BoundingBox],
    roi_labels: &[Label],
    gts: &[StaAnnotation],
    cfg: &HeadConfig,
) -> LossVars {
    let (obj, rbox) = rpn_losses(g, rpn, rpn_targets, gts, cfg);
    let [cls, bbox, verb, ttc] = roi_losses(g, heads, roi_boxes, roi_labels, gts, cfg);
    let parts = [obj, rbox, cls, bbox, verb, ttc];
    let weighted: Vec<Var> = parts
        .iter()
        .zip(cfg.loss_weights.as_array())
        .map(|(&p, w)| g.scale(p, w))
        .collect();
    let stacked = g.concat(&weighted);
    let total = g.sum(stacked);
    LossVars { parts, total }
}
