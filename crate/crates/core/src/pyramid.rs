//! Combined feature pyramid: temporal collapse of the fused 3-D levels,
//! residual merge into the 2-D levels, then a top-down FPN.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::sparse::{bilinear_resize, nearest_resize, temporal_mean};
use crate::nn::{Conv, ConvSpec, Graph, ParamStore, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PyramidConfig {
    /// Uniform pyramid width `C_p`.
    pub channels: usize,
    /// Corner convention for the 3-D to 2-D bilinear resize.
    pub align_corners: bool,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            align_corners: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    /// `P_1..P_N`, finest first, each `(C_p, H_i, W_i)`.
    pub levels: Vec<Var>,
    pub strides: Vec<usize>,
    pub channels: usize,
}

impl FeaturePyramid {
    /// Coarsest level, the source of the global context vector.
    pub fn top(&self) -> Var {
        *self.levels.last().expect("pyramid has at least one level")
    }
}

/// Mean over the temporal axis: `(C, T, H, W)` to `(C, H, W)`.
pub fn temporal_collapse(g: &mut Graph, level: Var) -> Var {
    let s = g.shape(level).to_vec();
    let map = temporal_mean(s[0], s[1], s[2], s[3]);
    g.sparse(level, Rc::new(map))
}

#[derive(Debug, Clone)]
pub struct PyramidFusion {
    pre: Vec<Conv>,
    post: Vec<Conv>,
    lateral: Vec<Conv>,
    output: Vec<Conv>,
    still_widths: Vec<usize>,
    fast_widths: Vec<usize>,
    align_corners: bool,
    channels: usize,
}

impl PyramidFusion {
    pub fn new(store: &mut ParamStore, cfg: &PyramidConfig, still_widths: &[usize], fast_widths: &[usize]) -> Result<Self> {
        if still_widths.len() != fast_widths.len() || still_widths.is_empty() {
            return Err(Error::Config(format!(
                "pyramid needs matching level counts, got {} still and {} fast",
                still_widths.len(),
                fast_widths.len()
            )));
        }
        if cfg.channels == 0 {
            return Err(Error::Config("pyramid channels must be positive".into()));
        }
        let conv3 = ConvSpec::conv2d(3, 1, 1);
        let conv1 = ConvSpec::conv2d(1, 1, 0);
        let mut s = Self {
            pre: Vec::new(),
            post: Vec::new(),
            lateral: Vec::new(),
            output: Vec::new(),
            still_widths: still_widths.to_vec(),
            fast_widths: fast_widths.to_vec(),
            align_corners: cfg.align_corners,
            channels: cfg.channels,
        };
        for (i, (&c, &cf)) in still_widths.iter().zip(fast_widths).enumerate() {
            s.pre.push(Conv::new(store, &format!("pyramid.fuse{i}.pre"), cf, c, conv3));
            s.post.push(Conv::new(store, &format!("pyramid.fuse{i}.post"), c, c, conv3));
            s.lateral
                .push(Conv::new(store, &format!("pyramid.lateral{i}"), c, cfg.channels, conv1));
            s.output.push(Conv::new(
                store,
                &format!("pyramid.output{i}"),
                cfg.channels,
                cfg.channels,
                conv3,
            ));
        }
        Ok(s)
    }

    pub fn levels(&self) -> usize {
        self.pre.len()
    }

    /// Resizes the collapsed 3-D map to ψ's size, convolves, adds ψ, convolves again.
    pub fn fuse_level(&self, g: &mut Graph, store: &ParamStore, i: usize, still: Var, collapsed: Var) -> Result<Var> {
        let s = g.shape(still).to_vec();
        let c = g.shape(collapsed).to_vec();
        if s.len() != 3 || c.len() != 3 || s[0] != self.still_widths[i] || c[0] != self.fast_widths[i] {
            return Err(Error::Config(format!(
                "level {i}: expected still width {} and fast width {}, got {s:?} and {c:?}",
                self.still_widths[i], self.fast_widths[i]
            )));
        }
        let aligned = if (c[1], c[2]) == (s[1], s[2]) {
            collapsed
        } else {
            let map = bilinear_resize(c[0], (c[1], c[2]), (s[1], s[2]), self.align_corners);
            g.sparse(collapsed, Rc::new(map))
        };
        let pre = self.pre[i].forward(g, store, aligned);
        let sum = g.add(still, pre);
        Ok(self.post[i].forward(g, store, sum))
    }

    /// Standard FPN: lateral 1×1, nearest top-down upsampling with addition, 3×3 outputs.
    pub fn build_pyramid(&self, g: &mut Graph, store: &ParamStore, fused: &[Var], strides: &[usize]) -> Result<FeaturePyramid> {
        if fused.len() != self.levels() {
            return Err(Error::Config(format!(
                "pyramid built for {} levels, got {}",
                self.levels(),
                fused.len()
            )));
        }
        let lateral: Vec<Var> = fused
            .iter()
            .zip(&self.lateral)
            .map(|(&x, conv)| conv.forward(g, store, x))
            .collect();
        let n = lateral.len();
        let mut merged = vec![lateral[n - 1]; n];
        for i in (0..n - 1).rev() {
            let coarse = g.shape(merged[i + 1]).to_vec();
            let fine = g.shape(lateral[i]).to_vec();
            let map = nearest_resize(coarse[0], (coarse[1], coarse[2]), (fine[1], fine[2]));
            let up = g.sparse(merged[i + 1], Rc::new(map));
            merged[i] = g.add(lateral[i], up);
        }
        let levels = merged
            .iter()
            .zip(&self.output)
            .map(|(&x, conv)| conv.forward(g, store, x))
            .collect();
        Ok(FeaturePyramid {
            levels,
            strides: strides.to_vec(),
            channels: self.channels,
        })
    }

    /// Collapses, fuses and builds the pyramid from both stacks.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        still: &[Var],
        fast: &[Var],
        strides: &[usize],
    ) -> Result<FeaturePyramid> {
        if still.len() != self.levels() || fast.len() != self.levels() {
            return Err(Error::Config(format!(
                "pyramid built for {} levels, got {} still and {} fast",
                self.levels(),
                still.len(),
                fast.len()
            )));
        }
        let mut fused = Vec::with_capacity(still.len());
        for (i, (&s, &f)) in still.iter().zip(fast).enumerate() {
            let collapsed = temporal_collapse(g, f);
            fused.push(self.fuse_level(g, store, i, s, collapsed)?);
        }
        self.build_pyramid(g, store, &fused, strides)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_params, max_relative_error};
    use crate::nn::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn collapse_of_single_frame_is_squeeze() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = rand_tensor(&[3, 1, 2, 2], &mut rng);
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let c = temporal_collapse(&mut g, v);
        assert_eq!(g.shape(c), &[3, 2, 2]);
        assert_eq!(g.value(c).data(), x.data());
    }

    #[test]
    fn collapse_averages_frames() {
        let mut g = Graph::new();
        // channel 0: frame values 1 then 3; channel 1 constant 5
        let x = Tensor::new([2, 2, 1, 1], vec![1.0, 3.0, 5.0, 5.0]);
        let v = g.constant(x);
        let c = temporal_collapse(&mut g, v);
        assert_eq!(g.value(c).data(), &[2.0, 5.0]);
    }

    #[test]
    fn collapse_commutes_with_affine_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&[2, 4, 3, 3], &mut rng);
        let (a, b) = (1.7, -0.3);
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let c = temporal_collapse(&mut g, v);
        let lhs_in = g.constant(x.map(|v| a * v + b));
        let lhs = temporal_collapse(&mut g, lhs_in);
        let rhs = g.value(c).map(|v| a * v + b);
        assert!(g.value(lhs).max_abs_diff(&rhs) < 1e-6);
    }

    fn fusion(channels: usize, still: &[usize], fast: &[usize]) -> (ParamStore, PyramidFusion) {
        let mut store = ParamStore::new(2);
        let cfg = PyramidConfig {
            channels,
            ..PyramidConfig::default()
        };
        let p = PyramidFusion::new(&mut store, &cfg, still, fast).unwrap();
        (store, p)
    }

    #[test]
    fn zero_convs_give_zero_fused_map() {
        let (mut store, p) = fusion(4, &[3], &[2]);
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(shape));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let s = g.constant(rand_tensor(&[3, 4, 4], &mut rng));
        let c = g.constant(rand_tensor(&[2, 2, 2], &mut rng));
        let out = p.fuse_level(&mut g, &store, 0, s, c).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fuse_uses_collapsed_directly_at_matching_size() {
        let (mut store, p) = fusion(4, &[2], &[2]);
        // pre conv = identity on the centre tap, post conv = identity
        let eye = |c: usize| {
            Tensor::from_fn([c, c, 1, 3, 3], move |i| {
                let (o, rest) = (i / (c * 9), i % (c * 9));
                if rest / 9 == o && rest % 9 == 4 {
                    1.0
                } else {
                    0.0
                }
            })
        };
        let pre = store.id("pyramid.fuse0.pre.weight").unwrap();
        let post = store.id("pyramid.fuse0.post.weight").unwrap();
        store.set(pre, eye(2));
        store.set(post, eye(2));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (st, co) = (rand_tensor(&[2, 3, 3], &mut rng), rand_tensor(&[2, 3, 3], &mut rng));
        let mut g = Graph::new();
        let s = g.constant(st.clone());
        let c = g.constant(co.clone());
        let out = p.fuse_level(&mut g, &store, 0, s, c).unwrap();
        let mut expected = st;
        expected.axpy(1.0, &co);
        assert!(g.value(out).max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn upsampled_corners_are_preserved() {
        let x = Tensor::new([1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        for align in [true, false] {
            let map = bilinear_resize(1, (2, 2), (4, 4), align);
            let y = map.apply(x.data());
            // evaluated by hand at the four corner sample points
            assert_eq!([y[0], y[3], y[12], y[15]], [1.0, 2.0, 3.0, 4.0]);
        }
    }

    #[test]
    fn channel_mismatch_is_a_config_error() {
        let (store, p) = fusion(4, &[3], &[2]);
        let mut g = Graph::new();
        let s = g.constant(Tensor::zeros([3, 4, 4]));
        let c = g.constant(Tensor::zeros([5, 2, 2]));
        assert!(matches!(p.fuse_level(&mut g, &store, 0, s, c), Err(Error::Config(_))));
    }

    #[test]
    fn pyramid_shapes_for_full_resolution_input() {
        let widths = [4, 5, 6, 7];
        let (store, p) = fusion(64, &widths, &widths);
        let mut g = Graph::new();
        let fused: Vec<Var> = widths
            .iter()
            .zip([56, 28, 14, 7])
            .map(|(&c, s)| g.constant(Tensor::zeros([c, s, s])))
            .collect();
        let pyr = p.build_pyramid(&mut g, &store, &fused, &[4, 8, 16, 32]).unwrap();
        let shapes: Vec<Vec<usize>> = pyr.levels.iter().map(|&l| g.shape(l).to_vec()).collect();
        assert_eq!(
            shapes,
            vec![vec![64, 56, 56], vec![64, 28, 28], vec![64, 14, 14], vec![64, 7, 7]]
        );
        assert!(pyr.levels.iter().all(|&l| g.value(l).data().iter().all(|&v| v == 0.0)));
        assert_eq!(pyr.top(), pyr.levels[3]);
    }

    #[test]
    fn single_level_pyramid_is_lateral_then_output() {
        let (store, p) = fusion(3, &[2], &[2]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&[2, 4, 4], &mut rng);
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let pyr = p.build_pyramid(&mut g, &store, &[v], &[4]).unwrap();
        let mut g2 = Graph::new();
        let v2 = g2.constant(x);
        let l = p.lateral[0].forward(&mut g2, &store, v2);
        let o = p.output[0].forward(&mut g2, &store, l);
        assert_eq!(g.value(pyr.levels[0]), g2.value(o));
    }

    #[test]
    fn fusion_gradients_match_finite_differences() {
        let (store, p) = fusion(3, &[2, 3], &[2, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let still = [rand_tensor(&[2, 4, 4], &mut rng), rand_tensor(&[3, 2, 2], &mut rng)];
        let fast = [rand_tensor(&[2, 2, 2, 2], &mut rng), rand_tensor(&[2, 1, 1, 1], &mut rng)];
        let ids: Vec<_> = store.ids().collect();
        let checks = check_params(
            &store,
            &ids,
            |s, g| {
                let sv: Vec<Var> = still.iter().map(|t| g.constant(t.clone())).collect();
                let fv: Vec<Var> = fast.iter().map(|t| g.constant(t.clone())).collect();
                let pyr = p.forward(g, s, &sv, &fv, &[4, 8]).unwrap();
                let parts: Vec<Var> = pyr
                    .levels
                    .iter()
                    .map(|&l| {
                        let sq = g.mul(l, l);
                        g.sum(sq)
                    })
                    .collect();
                let all = g.concat(&parts);
                g.sum(all)
            },
            20,
            1e-5,
            &mut rng,
        );
        assert!(max_relative_error(&checks) < 1e-4);
    }
}
