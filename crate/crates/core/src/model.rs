//! The assembled anticipation model.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{guided_fuse_stack, AttentionConfig, GuidedAttentionLevel};
use crate::backbones::{BackboneConfig, FastBackbone, ObjectEmbedder, StillBackbone};
use crate::dataset::ModelInputs;
use crate::error::{Error, Result};
use crate::head::{
    compute_losses, postprocess, roi_targets, rpn_forward, rpn_targets, HeadConfig, LossVars, Proposal, RoiHead, Rpn,
};
use crate::nn::{Graph, ParamStore};
use crate::pyramid::{FeaturePyramid, PyramidConfig, PyramidFusion};
use crate::types::{StaPrediction, Vocab};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub attention: AttentionConfig,
    pub pyramid: PyramidConfig,
    pub head: HeadConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.attention.validate()?;
        self.head.validate()?;
        if self.pyramid.channels == 0 {
            return Err(Error::Config("pyramid channels must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GanoModel {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub still: StillBackbone,
    pub fast: FastBackbone,
    pub objects: ObjectEmbedder,
    pub attention: Vec<GuidedAttentionLevel>,
    pub pyramid: PyramidFusion,
    pub rpn: Rpn,
    pub roi: RoiHead,
    strides: Vec<usize>,
}

impl GanoModel {
    /// Registers every parameter in `store`.
    pub fn new(store: &mut ParamStore, config: &ModelConfig, vocab: &Vocab, frames: usize, channels: usize) -> Result<Self> {
        config.validate()?;
        let b = &config.backbone;
        let n = b.levels;
        let still = StillBackbone::new(store, b, channels);
        let fast = FastBackbone::new(store, b, channels, frames);
        let objects = ObjectEmbedder::new(store, b, vocab, frames);
        let attention = (0..n)
            .map(|i| {
                GuidedAttentionLevel::new(
                    store,
                    &format!("attention.level{i}"),
                    &config.attention,
                    b.fast_widths[i],
                    b.object_dim,
                )
            })
            .collect();
        let pyramid = PyramidFusion::new(store, &config.pyramid, &b.still_widths[..n], &b.fast_widths[..n])?;
        let rpn = Rpn::new(store, config.pyramid.channels, &config.head);
        let roi = RoiHead::new(store, config.pyramid.channels, &config.head, vocab);
        Ok(Self {
            config: config.clone(),
            vocab: *vocab,
            still,
            fast,
            objects,
            attention,
            pyramid,
            rpn,
            roi,
            strides: (0..n).map(|i| b.stride(i)).collect(),
        })
    }

    /// Backbones, object-guided fusion and the combined pyramid.
    pub fn features(&self, g: &mut Graph, store: &ParamStore, inputs: &ModelInputs) -> Result<FeaturePyramid> {
        let still_in = g.constant(inputs.still.clone());
        let video_in = g.constant(inputs.video.clone());
        let psi = self.still.forward(g, store, still_in)?;
        let big_psi = self.fast.forward(g, store, video_in)?;
        let objects = self.objects.forward(g, store, &inputs.detections, &self.vocab)?;
        let fused = guided_fuse_stack(g, store, &self.attention, &big_psi, &objects, &self.config.attention)?;
        self.pyramid.forward(g, store, &psi, &fused, &self.strides)
    }

    fn image_size(inputs: &ModelInputs) -> (f64, f64) {
        (inputs.still.dim(1) as f64, inputs.still.dim(2) as f64)
    }

    /// Training losses for one clip. Requires at least one annotation.
    pub fn loss(&self, g: &mut Graph, store: &ParamStore, inputs: &ModelInputs, rng: &mut impl Rng) -> Result<LossVars> {
        if inputs.annotations.is_empty() {
            return Err(Error::Validation(vec![format!("clip {} has no annotations", inputs.clip_id)]));
        }
        let cfg = &self.config.head;
        let pyramid = self.features(g, store, inputs)?;
        let image = Self::image_size(inputs);
        let (rpn, proposals) = rpn_forward(g, store, &self.rpn, &pyramid, image, cfg, cfg.rpn_post_nms_train);
        let rpn_t = rpn_targets(&rpn.anchors, &inputs.annotations, cfg, rng);
        let roi_t = roi_targets(&proposals, &inputs.annotations, cfg, rng);
        if roi_t.boxes.is_empty() {
            return Err(Error::Shape(format!("clip {}: no RoIs sampled", inputs.clip_id)));
        }
        let (heads, kept) = self.roi.forward(g, store, &pyramid, &roi_t.boxes, cfg)?;
        let boxes: Vec<_> = kept.iter().map(|&i| roi_t.boxes[i]).collect();
        let labels: Vec<_> = kept.iter().map(|&i| roi_t.labels[i]).collect();
        Ok(compute_losses(
            g,
            &rpn,
            &rpn_t,
            &heads,
            &boxes,
            &labels,
            &inputs.annotations,
            cfg,
        ))
    }

    /// Proposals for one clip in still-crop coordinates.
    pub fn proposals(&self, store: &ParamStore, inputs: &ModelInputs) -> Result<Vec<Proposal>> {
        let cfg = &self.config.head;
        let mut g = Graph::new();
        let pyramid = self.features(&mut g, store, inputs)?;
        Ok(rpn_forward(
            &mut g,
            store,
            &self.rpn,
            &pyramid,
            Self::image_size(inputs),
            cfg,
            cfg.rpn_post_nms_eval,
        )
        .1)
    }

    /// At most five predictions in still-crop coordinates, highest score first.
    pub fn predict(&self, store: &ParamStore, inputs: &ModelInputs) -> Result<Vec<StaPrediction>> {
        let cfg = &self.config.head;
        let mut g = Graph::new();
        let pyramid = self.features(&mut g, store, inputs)?;
        let image = Self::image_size(inputs);
        let (_, proposals) = rpn_forward(&mut g, store, &self.rpn, &pyramid, image, cfg, cfg.rpn_post_nms_eval);
        if proposals.is_empty() {
            return Ok(Vec::new());
        }
        let boxes: Vec<_> = proposals.iter().map(|p| p.bbox).collect();
        let (heads, kept) = self.roi.forward(&mut g, store, &pyramid, &boxes, cfg)?;
        let kept_boxes: Vec<_> = kept.iter().map(|&i| boxes[i]).collect();
        let values = heads.values(&g);
        if !values.is_finite() {
            return Err(Error::NonFinite {
                component: "head outputs".into(),
                step: 0,
            });
        }
        Ok(postprocess(&values, &kept_boxes, image, cfg))
    }
}
