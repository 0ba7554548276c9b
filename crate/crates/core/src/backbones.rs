//! Two-branch feature extractors and the detection embedding MLP.
//!
//! The still branch maps the high-resolution last frame to a 2-D stack ψ; the
//! fast branch maps the sampled clip to a 3-D stack Ψ. Both follow the stride
//! ladder `4, 8, 16, 32` (one stride-2 stem plus one stride-2 conv per level).

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv, ConvSpec, Graph, Linear, ParamStore, Tensor, Var};
use crate::types::{validate, DetectionSet, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackbonePreset {
    /// Small CPU-trainable convolution stacks.
    Toy,
    /// ResNet-50 still branch and X3D-M fast branch. Named only; not built.
    Reference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub preset: BackbonePreset,
    /// Number of feature levels `N`, 1 to 4.
    pub levels: usize,
    pub still_widths: Vec<usize>,
    pub fast_widths: Vec<usize>,
    pub temporal_strides: Vec<usize>,
    /// Object embedding width `d_obj`.
    pub object_dim: usize,
    pub max_objects: usize,
    pub class_embedding_dim: usize,
    pub object_hidden_dim: usize,
    /// Appends the normalized frame index to the detection features.
    pub frame_index_feature: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            preset: BackbonePreset::Toy,
            levels: 4,
            still_widths: vec![16, 32, 64, 128],
            fast_widths: vec![8, 16, 32, 64],
            temporal_strides: vec![1, 1, 2, 2],
            object_dim: 32,
            max_objects: 16,
            class_embedding_dim: 8,
            object_hidden_dim: 32,
            frame_index_feature: false,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.preset == BackbonePreset::Reference {
            return Err(Error::Config(
                "backbone preset `reference` (ResNet-50 / X3D-M) is not available; use `toy`".into(),
            ));
        }
        if !(1..=4).contains(&self.levels) {
            return Err(Error::Config(format!(
                "backbone levels must be in 1..=4, got {}",
                self.levels
            )));
        }
        for (name, v) in [
            ("still_widths", &self.still_widths),
            ("fast_widths", &self.fast_widths),
            ("temporal_strides", &self.temporal_strides),
        ] {
            if v.len() < self.levels || v[..self.levels].contains(&0) {
                return Err(Error::Config(format!(
                    "backbone {name} needs {} positive entries",
                    self.levels
                )));
            }
        }
        if self.object_dim == 0 || self.class_embedding_dim == 0 || self.object_hidden_dim == 0 {
            return Err(Error::Config("object embedding widths must be positive".into()));
        }
        Ok(())
    }

    /// Stride of level `i` (zero-based).
    pub fn stride(&self, level: usize) -> usize {
        4 << level
    }

    pub fn max_stride(&self) -> usize {
        self.stride(self.levels - 1)
    }
}

fn level_dims(g: &Graph, v: Var) -> Vec<usize> {
    g.shape(v).to_vec()
}

#[derive(Debug, Clone)]
pub struct StillBackbone {
    stem: Conv,
    stages: Vec<Conv>,
    max_stride: usize,
}

impl StillBackbone {
    pub fn new(store: &mut ParamStore, cfg: &BackboneConfig, in_channels: usize) -> Self {
        let w = &cfg.still_widths;
        let stem = Conv::new(store, "still.stem", in_channels, w[0], ConvSpec::conv2d(3, 2, 1));
        let stages = (0..cfg.levels)
            .map(|i| {
                let cin = if i == 0 { w[0] } else { w[i - 1] };
                Conv::new(store, &format!("still.stage{}", i + 1), cin, w[i], ConvSpec::conv2d(3, 2, 1))
            })
            .collect();
        Self {
            stem,
            stages,
            max_stride: cfg.max_stride(),
        }
    }

    /// `(C, H, W)` frame to `N` levels of shape `(C_i, H / s_i, W / s_i)`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, frame: Var) -> Result<Vec<Var>> {
        let dims = level_dims(g, frame);
        let [_, h, w] = dims[..] else {
            return Err(Error::Shape(format!("still frame must be (C, H, W), got {dims:?}")));
        };
        if h % self.max_stride != 0 || w % self.max_stride != 0 {
            return Err(Error::Shape(format!(
                "still frame {h}x{w} is not divisible by the maximum stride {}",
                self.max_stride
            )));
        }
        let stem = self.stem.forward(g, store, frame);
        let mut x = g.silu(stem);
        let mut out = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let y = stage.forward(g, store, x);
            x = g.silu(y);
            out.push(x);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct FastBackbone {
    stem: Conv,
    stages: Vec<Conv>,
    frames: usize,
    max_stride: usize,
}

impl FastBackbone {
    pub fn new(store: &mut ParamStore, cfg: &BackboneConfig, in_channels: usize, frames: usize) -> Self {
        let w = &cfg.fast_widths;
        let stem = Conv::new(store, "fast.stem", in_channels, w[0], ConvSpec::conv3d(3, 1, 2, 1));
        let stages = (0..cfg.levels)
            .map(|i| {
                let cin = if i == 0 { w[0] } else { w[i - 1] };
                let spec = ConvSpec::conv3d(3, cfg.temporal_strides[i], 2, 1);
                Conv::new(store, &format!("fast.stage{}", i + 1), cin, w[i], spec)
            })
            .collect();
        Self {
            stem,
            stages,
            frames,
            max_stride: cfg.max_stride(),
        }
    }

    /// `(C, T, H, W)` clip to `N` levels of shape `(C'_i, T_i, H / s_i, W / s_i)`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, clip: Var) -> Result<Vec<Var>> {
        let dims = level_dims(g, clip);
        let [_, t, h, w] = dims[..] else {
            return Err(Error::Shape(format!("clip must be (C, T, H, W), got {dims:?}")));
        };
        if t != self.frames {
            return Err(Error::Shape(format!("clip has {t} frames, expected {}", self.frames)));
        }
        if h % self.max_stride != 0 || w % self.max_stride != 0 {
            return Err(Error::Shape(format!(
                "clip frames {h}x{w} are not divisible by the maximum stride {}",
                self.max_stride
            )));
        }
        let stem = self.stem.forward(g, store, clip);
        let mut x = g.silu(stem);
        let mut out = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let y = stage.forward(g, store, x);
            x = g.silu(y);
            out.push(x);
        }
        Ok(out)
    }
}

/// Object embeddings padded to `max_objects` rows, with a validity mask.
#[derive(Debug, Clone)]
pub struct ObjectEmbeddings {
    /// `max_objects × d_obj`; padded rows are zero.
    pub values: Var,
    pub mask: Rc<Vec<bool>>,
    /// Indices into the input detection list, one per valid row.
    pub source: Vec<usize>,
}

impl ObjectEmbeddings {
    pub fn count(&self) -> usize {
        self.source.len()
    }
}

/// Class embedding plus normalized box through a two-layer MLP.
#[derive(Debug, Clone)]
pub struct ObjectEmbedder {
    class_table: crate::nn::ParamId,
    hidden: Linear,
    output: Linear,
    classes: usize,
    max_objects: usize,
    frame_index_feature: bool,
    frames: usize,
}

impl ObjectEmbedder {
    pub fn new(store: &mut ParamStore, cfg: &BackboneConfig, vocab: &Vocab, frames: usize) -> Self {
        let classes = vocab.detection_classes();
        let class_table = store.add(
            "objects.class_embedding",
            [classes, cfg.class_embedding_dim],
            crate::nn::Init::Uniform(1.0),
        );
        let feat = cfg.class_embedding_dim + 4 + usize::from(cfg.frame_index_feature);
        Self {
            class_table,
            hidden: Linear::new(store, "objects.hidden", feat, cfg.object_hidden_dim, true),
            output: Linear::new(store, "objects.output", cfg.object_hidden_dim, cfg.object_dim, true),
            classes,
            max_objects: cfg.max_objects,
            frame_index_feature: cfg.frame_index_feature,
            frames,
        }
    }

    pub fn max_objects(&self) -> usize {
        self.max_objects
    }

    pub fn dim(&self) -> usize {
        self.output.out_dim
    }

    /// Indices of the detections kept under the `max_objects` cap, in input order.
    pub fn select(&self, dets: &DetectionSet) -> Vec<usize> {
        let mut order: Vec<usize> = (0..dets.len()).collect();
        order.sort_by(|&a, &b| dets.detections[b].score.total_cmp(&dets.detections[a].score));
        order.truncate(self.max_objects);
        order.sort_unstable();
        order
    }

    /// Raw per-detection features `(class one-hot, normalized box[, frame])`.
    pub fn features(&self, dets: &DetectionSet, keep: &[usize]) -> (Tensor, Tensor) {
        let (h, w) = dets.reference_size;
        let extra = usize::from(self.frame_index_feature);
        let mut onehot = Tensor::zeros([keep.len(), self.classes]);
        let mut coords = Tensor::zeros([keep.len(), 4 + extra]);
        for (row, &i) in keep.iter().enumerate() {
            let d = &dets.detections[i];
            onehot.data_mut()[row * self.classes + d.class_id] = 1.0;
            let c = &mut coords.data_mut()[row * (4 + extra)..(row + 1) * (4 + extra)];
            c[0] = d.bbox.x1 / w;
            c[1] = d.bbox.y1 / h;
            c[2] = d.bbox.x2 / w;
            c[3] = d.bbox.y2 / h;
            if extra == 1 {
                c[4] = d.frame_index as f64 / (self.frames.max(2) - 1) as f64;
            }
        }
        (onehot, coords)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, dets: &DetectionSet, vocab: &Vocab) -> Result<ObjectEmbeddings> {
        for d in &dets.detections {
            let v = validate(d, vocab);
            if !v.is_empty() {
                return Err(Error::Validation(v));
            }
        }
        let keep = self.select(dets);
        let m = keep.len();
        let dim = self.dim();
        let pad = self.max_objects - m;
        let mut mask = vec![true; m];
        mask.resize(self.max_objects, false);
        let values = if m == 0 {
            g.constant(Tensor::zeros([self.max_objects, dim]))
        } else {
            let (onehot, coords) = self.features(dets, &keep);
            let onehot = g.constant(onehot);
            let coords = g.constant(coords);
            let table = g.param(store, self.class_table);
            let class_vec = g.matmul(onehot, table);
            let x = g.concat_cols(&[class_vec, coords]);
            let hdn = self.hidden.forward(g, store, x);
            let hdn = g.silu(hdn);
            let out = self.output.forward(g, store, hdn);
            if pad == 0 {
                out
            } else {
                let zeros = g.constant(Tensor::zeros([pad, dim]));
                let flat = g.concat(&[out, zeros]);
                g.reshape(flat, [self.max_objects, dim])
            }
        };
        Ok(ObjectEmbeddings {
            values,
            mask: Rc::new(mask),
            source: keep,
        })
    }
}
