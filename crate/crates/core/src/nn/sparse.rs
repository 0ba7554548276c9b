//! Fixed linear resampling maps.
//!
//! Interpolation, pooling, temporal averaging and RoI sampling are all linear
//! in the feature values with coefficients that depend only on geometry, so a
//! single sparse operator (and its transpose for the backward pass) covers
//! all of them.

/// CSR matrix mapping a flat input of `in_len` values to a flat output.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMap {
    in_len: usize,
    out_shape: Vec<usize>,
    offsets: Vec<usize>,
    index: Vec<u32>,
    weight: Vec<f64>,
}

impl SparseMap {
    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }

    pub fn out_len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn apply(&self, input: &[f64]) -> Vec<f64> {
        assert_eq!(input.len(), self.in_len);
        (0..self.out_len())
            .map(|row| {
                let span = self.offsets[row]..self.offsets[row + 1];
                self.index[span.clone()]
                    .iter()
                    .zip(&self.weight[span])
                    .map(|(&i, &w)| w * input[i as usize])
                    .sum()
            })
            .collect()
    }

    /// Accumulates the transpose product `grad_in += Mᵀ grad_out`.
    pub fn apply_transpose(&self, grad_out: &[f64], grad_in: &mut [f64]) {
        assert_eq!(grad_out.len(), self.out_len());
        assert_eq!(grad_in.len(), self.in_len);
        for (row, &g) in grad_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let span = self.offsets[row]..self.offsets[row + 1];
            for (&i, &w) in self.index[span.clone()].iter().zip(&self.weight[span]) {
                grad_in[i as usize] += w * g;
            }
        }
    }
}

/// Row-by-row construction of a [`SparseMap`].
#[derive(Debug)]
pub struct SparseMapBuilder {
    in_len: usize,
    offsets: Vec<usize>,
    index: Vec<u32>,
    weight: Vec<f64>,
}

impl SparseMapBuilder {
    pub fn new(in_len: usize) -> Self {
        Self {
            in_len,
            offsets: vec![0],
            index: Vec::new(),
            weight: Vec::new(),
        }
    }

    pub fn push(&mut self, index: usize, weight: f64) {
        debug_assert!(index < self.in_len);
        if weight != 0.0 {
            self.index.push(index as u32);
            self.weight.push(weight);
        }
    }

    pub fn end_row(&mut self) {
        self.offsets.push(self.index.len());
    }

    pub fn finish(self, out_shape: impl Into<Vec<usize>>) -> SparseMap {
        let out_shape = out_shape.into();
        assert_eq!(out_shape.iter().product::<usize>(), self.offsets.len() - 1);
        SparseMap {
            in_len: self.in_len,
            out_shape,
            offsets: self.offsets,
            index: self.index,
            weight: self.weight,
        }
    }
}

/// Source coordinate and the two taps of a 1-D linear interpolation.
fn linear_taps(dst: usize, src_len: usize, dst_len: usize, align_corners: bool) -> (usize, usize, f64) {
    let src = if align_corners {
        if dst_len > 1 {
            dst as f64 * (src_len as f64 - 1.0) / (dst_len as f64 - 1.0)
        } else {
            0.0
        }
    } else {
        ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5).max(0.0)
    };
    let lo = (src.floor() as usize).min(src_len - 1);
    let hi = (lo + 1).min(src_len - 1);
    let frac = if lo == hi { 0.0 } else { src - lo as f64 };
    (lo, hi, frac)
}

/// Bilinear resize of a `(C, H, W)` map to `(C, out_h, out_w)`.
pub fn bilinear_resize(
    channels: usize,
    (h, w): (usize, usize),
    (out_h, out_w): (usize, usize),
    align_corners: bool,
) -> SparseMap {
    let mut b = SparseMapBuilder::new(channels * h * w);
    let ys: Vec<_> = (0..out_h).map(|y| linear_taps(y, h, out_h, align_corners)).collect();
    let xs: Vec<_> = (0..out_w).map(|x| linear_taps(x, w, out_w, align_corners)).collect();
    for c in 0..channels {
        let base = c * h * w;
        for &(y0, y1, ly) in &ys {
            for &(x0, x1, lx) in &xs {
                b.push(base + y0 * w + x0, (1.0 - ly) * (1.0 - lx));
                b.push(base + y0 * w + x1, (1.0 - ly) * lx);
                b.push(base + y1 * w + x0, ly * (1.0 - lx));
                b.push(base + y1 * w + x1, ly * lx);
                b.end_row();
            }
        }
    }
    b.finish([channels, out_h, out_w])
}

/// Nearest-neighbour resize of a `(C, H, W)` map (`src = floor(dst * in / out)`).
pub fn nearest_resize(channels: usize, (h, w): (usize, usize), (out_h, out_w): (usize, usize)) -> SparseMap {
    let mut b = SparseMapBuilder::new(channels * h * w);
    for c in 0..channels {
        for y in 0..out_h {
            let sy = (y * h / out_h).min(h - 1);
            for x in 0..out_w {
                let sx = (x * w / out_w).min(w - 1);
                b.push(c * h * w + sy * w + sx, 1.0);
                b.end_row();
            }
        }
    }
    b.finish([channels, out_h, out_w])
}

/// Mean over the temporal axis: `(C, T, H, W)` to `(C, H, W)`.
pub fn temporal_mean(channels: usize, t: usize, h: usize, w: usize) -> SparseMap {
    let mut b = SparseMapBuilder::new(channels * t * h * w);
    let inv = 1.0 / t as f64;
    for c in 0..channels {
        for y in 0..h {
            for x in 0..w {
                for f in 0..t {
                    b.push(((c * t + f) * h + y) * w + x, inv);
                }
                b.end_row();
            }
        }
    }
    b.finish([channels, h, w])
}

/// Global average pool `(C, H, W)` to a `1 × C` row.
pub fn global_average_pool(channels: usize, h: usize, w: usize) -> SparseMap {
    let mut b = SparseMapBuilder::new(channels * h * w);
    let inv = 1.0 / (h * w) as f64;
    for c in 0..channels {
        for i in 0..h * w {
            b.push(c * h * w + i, inv);
        }
        b.end_row();
    }
    b.finish([1, channels])
}

/// One level of a flattened multi-level feature buffer.
#[derive(Debug, Clone, Copy)]
pub struct LevelLayout {
    pub offset: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub stride: f64,
}

/// An RoI to sample: box in image coordinates plus the level to read from.
#[derive(Debug, Clone, Copy)]
pub struct RoiRequest {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub level: usize,
}

/// Pixel-aligned RoIAlign: each proposal becomes a `C × out × out` grid of
/// bilinear samples, `sampling` samples per bin and axis, averaged.
///
/// Output rows are proposals; each row is `C * out * out` wide.
pub fn roi_align(levels: &[LevelLayout], total_len: usize, rois: &[RoiRequest], out: usize, sampling: usize) -> SparseMap {
    let channels = levels.first().map_or(0, |l| l.channels);
    let mut b = SparseMapBuilder::new(total_len);
    let mut taps: Vec<(usize, f64)> = Vec::with_capacity(4 * sampling * sampling);
    for roi in rois {
        let lvl = levels[roi.level];
        assert_eq!(lvl.channels, channels, "RoI levels must share channel width");
        let scale = 1.0 / lvl.stride;
        let x0 = roi.x1 * scale - 0.5;
        let y0 = roi.y1 * scale - 0.5;
        let bin_w = (roi.x2 - roi.x1) * scale / out as f64;
        let bin_h = (roi.y2 - roi.y1) * scale / out as f64;
        let area = lvl.height * lvl.width;
        for c in 0..channels {
            let base = lvl.offset + c * area;
            for by in 0..out {
                for bx in 0..out {
                    taps.clear();
                    for sy in 0..sampling {
                        let y = y0 + (by as f64 + (sy as f64 + 0.5) / sampling as f64) * bin_h;
                        for sx in 0..sampling {
                            let x = x0 + (bx as f64 + (sx as f64 + 0.5) / sampling as f64) * bin_w;
                            bilinear_point(lvl.height, lvl.width, y, x, &mut taps);
                        }
                    }
                    let norm = 1.0 / (sampling * sampling) as f64;
                    for &(idx, w) in &taps {
                        b.push(base + idx, w * norm);
                    }
                    b.end_row();
                }
            }
        }
    }
    b.finish([rois.len(), channels * out * out])
}

/// Bilinear taps at continuous `(y, x)` with cell centres on integers.
/// Points more than one cell outside the map contribute nothing.
fn bilinear_point(h: usize, w: usize, y: f64, x: f64, taps: &mut Vec<(usize, f64)>) {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return;
    }
    let (y, x) = (y.max(0.0), x.max(0.0));
    let (mut y0, mut x0) = (y.floor() as usize, x.floor() as usize);
    let (mut y1, mut x1) = (y0 + 1, x0 + 1);
    let (mut ly, mut lx) = (y - y0 as f64, x - x0 as f64);
    if y0 >= h - 1 {
        y0 = h - 1;
        y1 = h - 1;
        ly = 0.0;
    }
    if x0 >= w - 1 {
        x0 = w - 1;
        x1 = w - 1;
        lx = 0.0;
    }
    taps.push((y0 * w + x0, (1.0 - ly) * (1.0 - lx)));
    taps.push((y0 * w + x1, (1.0 - ly) * lx));
    taps.push((y1 * w + x0, ly * (1.0 - lx)));
    taps.push((y1 * w + x1, ly * lx));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_identity_at_same_size() {
        let input: Vec<f64> = (0..2 * 3 * 4).map(|i| i as f64).collect();
        for align in [false, true] {
            let m = bilinear_resize(2, (3, 4), (3, 4), align);
            assert_eq!(m.apply(&input), input);
        }
    }

    #[test]
    fn bilinear_upscale_preserves_corners() {
        // 2x2 -> 4x4: corners must reproduce the source corners under both conventions.
        let input = vec![1.0, 2.0, 3.0, 4.0];
        for align in [false, true] {
            let out = bilinear_resize(1, (2, 2), (4, 4), align).apply(&input);
            assert_eq!(out[0], 1.0);
            assert_eq!(out[3], 2.0);
            assert_eq!(out[12], 3.0);
            assert_eq!(out[15], 4.0);
        }
        // align-corners interior point (1,1) sits at source (1/3, 1/3).
        let out = bilinear_resize(1, (2, 2), (4, 4), true).apply(&input);
        let (ly, lx) = (1.0 / 3.0, 1.0 / 3.0);
        let want = (1.0 - ly) * (1.0 - lx) * 1.0 + (1.0 - ly) * lx * 2.0 + ly * (1.0 - lx) * 3.0 + ly * lx * 4.0;
        assert!((out[5] - want).abs() < 1e-12);
    }

    #[test]
    fn transpose_is_adjoint() {
        let m = bilinear_resize(2, (3, 3), (5, 4), false);
        let x: Vec<f64> = (0..m.in_len()).map(|i| (i as f64).sin()).collect();
        let y: Vec<f64> = (0..m.out_len()).map(|i| (i as f64 * 0.7).cos()).collect();
        let mx = m.apply(&x);
        let mut mty = vec![0.0; m.in_len()];
        m.apply_transpose(&y, &mut mty);
        let lhs: f64 = mx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&mty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn nearest_doubles_each_cell() {
        let out = nearest_resize(1, (2, 2), (4, 4)).apply(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(
            out,
            vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
    }

    #[test]
    fn roi_align_on_constant_field_is_constant() {
        let lvl = LevelLayout {
            offset: 0,
            channels: 2,
            height: 8,
            width: 8,
            stride: 4.0,
        };
        let input = vec![3.5; 2 * 64];
        let rois = [RoiRequest {
            x1: 3.0,
            y1: 5.0,
            x2: 20.0,
            y2: 27.0,
            level: 0,
        }];
        for sampling in [1, 2] {
            let out = roi_align(&[lvl], input.len(), &rois, 7, sampling).apply(&input);
            assert!(out.iter().all(|&v| (v - 3.5).abs() < 1e-12));
        }
    }

    #[test]
    fn roi_align_reads_cells_of_an_aligned_box() {
        // Box spanning cells 1..8 (stride 2) of a 10x10 map: with one sample per
        // bin the sample lands on each cell centre exactly.
        let lvl = LevelLayout {
            offset: 0,
            channels: 1,
            height: 10,
            width: 10,
            stride: 2.0,
        };
        let input: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let rois = [RoiRequest {
            x1: 2.0,
            y1: 2.0,
            x2: 16.0,
            y2: 16.0,
            level: 0,
        }];
        let out = roi_align(&[lvl], 100, &rois, 7, 1).apply(&input);
        for by in 0..7 {
            for bx in 0..7 {
                assert_eq!(out[by * 7 + bx], input[(by + 1) * 10 + bx + 1]);
            }
        }
    }
}
