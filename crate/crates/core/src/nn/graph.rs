//! Reverse-mode automatic differentiation on an explicit tape.
//!
//! Every operation computes its value eagerly and records what its backward
//! pass needs. Parameters enter a graph as cached leaves so one graph can
//! hold a whole batch and accumulate parameter gradients across samples.

use std::collections::HashMap;
use std::rc::Rc;

use super::params::{ParamId, ParamStore};
use super::sparse::SparseMap;
use super::tensor::{gemm, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Geometry of a (up to) 3-D convolution over `(C, T, H, W)` inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvSpec {
    pub fn conv2d(kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel: [1, kernel, kernel],
            stride: [1, stride, stride],
            pad: [0, pad, pad],
        }
    }

    pub fn conv3d(kernel: usize, temporal_stride: usize, spatial_stride: usize, pad: usize) -> Self {
        Self {
            kernel: [kernel; 3],
            stride: [temporal_stride, spatial_stride, spatial_stride],
            pad: [pad; 3],
        }
    }

    pub fn output_dims(&self, input: [usize; 3]) -> [usize; 3] {
        let mut out = [0; 3];
        for a in 0..3 {
            out[a] = (input[a] + 2 * self.pad[a] - self.kernel[a]) / self.stride[a] + 1;
        }
        out
    }
}

#[derive(Debug)]
struct ConvCache {
    cols: Vec<f64>,
    in_dims: [usize; 4],
    out_dims: [usize; 3],
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Silu(Var),
    Softplus(Var),
    MaskedSoftmax(Var, Rc<Vec<bool>>),
    Sparse(Var, Rc<SparseMap>),
    Concat(Vec<Var>),
    ConcatCols(Vec<Var>),
    RepeatRows(Var),
    Sum(Var),
    Conv {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: ConvSpec,
        cache: Box<ConvCache>,
    },
    SoftmaxCe {
        logits: Var,
        entries: Rc<Vec<(usize, usize)>>,
        denom: f64,
        probs: Vec<f64>,
    },
    Bce {
        logits: Var,
        entries: Rc<Vec<(usize, f64)>>,
        denom: f64,
    },
    SmoothL1 {
        pred: Var,
        entries: Rc<Vec<(usize, f64)>>,
        beta: f64,
        denom: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Tape of recorded operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

fn smooth_l1(diff: f64, beta: f64) -> (f64, f64) {
    let a = diff.abs();
    if a < beta {
        (0.5 * diff * diff / beta, diff / beta)
    } else {
        (a - 0.5 * beta, diff.signum())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input (no gradient tracked).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Input whose gradient should be available after backward.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Parameter leaf, created once per graph.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    /// Parameters that entered this graph, with their leaf handles.
    pub fn param_vars(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().map(|(&p, &v)| (p, v))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(va.shape().to_vec(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let t = Tensor::new(va.shape().to_vec(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(va.shape().to_vec(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, c), ng)
    }

    /// Adds a length-`n` vector to every row of an `m × n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        let n = *va.shape().last().expect("add_row on scalar");
        assert_eq!(vr.len(), n, "add_row width mismatch");
        let mut t = va.clone();
        for chunk in t.data_mut().chunks_mut(n) {
            for (x, b) in chunk.iter_mut().zip(vr.data()) {
                *x += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(t, Op::AddRow(a, row), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = (va.dim(0), va.dim(1));
        assert_eq!(vb.dim(0), k, "matmul inner dimension mismatch");
        let n = vb.dim(1);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, va.data(), false, vb.data(), false, &mut out, false);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new([m, n], out), Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = (va.dim(0), va.dim(1));
        assert_eq!(vb.dim(1), k, "matmul_bt inner dimension mismatch");
        let n = vb.dim(0);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, va.data(), false, vb.data(), true, &mut out, false);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new([m, n], out), Op::MatMulBt(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (m, n) = (va.dim(0), va.dim(1));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = va.data()[i * n + j];
            }
        }
        let ng = self.ng(a);
        self.push(Tensor::new([n, m], out), Op::Transpose(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Var {
        let t = self.value(a).clone().reshape(shape);
        let ng = self.ng(a);
        self.push(t, Op::Reshape(a), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(silu);
        let ng = self.ng(a);
        self.push(t, Op::Silu(a), ng)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let t = self.value(a).map(softplus);
        let ng = self.ng(a);
        self.push(t, Op::Softplus(a), ng)
    }

    /// Row softmax of an `m × n` matrix over columns where `mask` is true.
    /// Masked-out columns get probability 0; at least one column must be valid.
    pub fn masked_softmax(&mut self, a: Var, mask: Rc<Vec<bool>>) -> Var {
        let va = self.value(a);
        let (m, n) = (va.dim(0), va.dim(1));
        assert_eq!(mask.len(), n);
        assert!(mask.iter().any(|&v| v), "softmax over an all-masked row");
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &va.data()[i * n..(i + 1) * n];
            let max = row
                .iter()
                .zip(mask.iter())
                .filter(|(_, &ok)| ok)
                .map(|(&x, _)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..n {
                if mask[j] {
                    let e = (row[j] - max).exp();
                    out[i * n + j] = e;
                    total += e;
                }
            }
            for j in 0..n {
                out[i * n + j] /= total;
            }
        }
        let ng = self.ng(a);
        self.push(Tensor::new([m, n], out), Op::MaskedSoftmax(a, mask), ng)
    }

    pub fn sparse(&mut self, a: Var, map: Rc<SparseMap>) -> Var {
        let out = map.apply(self.value(a).data());
        let t = Tensor::new(map.out_shape().to_vec(), out);
        let ng = self.ng(a);
        self.push(t, Op::Sparse(a, map), ng)
    }

    /// Flattens and concatenates every part into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let n = data.len();
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::new([n], data), Op::Concat(parts.to_vec()), ng)
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let m = self.value(parts[0]).dim(0);
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let v = self.value(p);
                assert_eq!(v.dim(0), m, "concat_cols row mismatch");
                v.dim(1)
            })
            .collect();
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::new([m, n], out), Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Repeats a `1 × n` row `rows` times.
    pub fn repeat_rows(&mut self, a: Var, rows: usize) -> Var {
        let va = self.value(a);
        let n = va.len();
        let mut out = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            out.extend_from_slice(va.data());
        }
        let ng = self.ng(a);
        self.push(Tensor::new([rows, n], out), Op::RepeatRows(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    /// Convolution of a `(C, T, H, W)` input with a `(O, C, kt, kh, kw)` weight.
    /// 2-D inputs `(C, H, W)` are handled with `T = 1` and keep their rank.
    pub fn conv(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: ConvSpec) -> Var {
        let vi = self.value(input);
        let vw = self.value(weight);
        let (in_dims, rank3) = match *vi.shape() {
            [c, h, w] => ([c, 1, h, w], true),
            [c, t, h, w] => ([c, t, h, w], false),
            ref s => panic!("conv input must be rank 3 or 4, got {s:?}"),
        };
        let [c, t, h, w] = in_dims;
        let o = vw.dim(0);
        let [kt, kh, kw] = spec.kernel;
        assert_eq!(vw.shape(), &[o, c, kt, kh, kw], "conv weight shape mismatch");
        let out_dims = spec.output_dims([t, h, w]);
        let [to, ho, wo] = out_dims;
        let p = to * ho * wo;
        let r = c * kt * kh * kw;
        let mut cols = vec![0.0; r * p];
        let x = vi.data();
        for ci in 0..c {
            for dt in 0..kt {
                for dy in 0..kh {
                    for dx in 0..kw {
                        let row = ((ci * kt + dt) * kh + dy) * kw + dx;
                        let dst = &mut cols[row * p..(row + 1) * p];
                        for ot in 0..to {
                            let it = (ot * spec.stride[0] + dt) as isize - spec.pad[0] as isize;
                            if it < 0 || it >= t as isize {
                                continue;
                            }
                            for oy in 0..ho {
                                let iy = (oy * spec.stride[1] + dy) as isize - spec.pad[1] as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let src_base = ((ci * t + it as usize) * h + iy as usize) * w;
                                let dst_base = (ot * ho + oy) * wo;
                                for ox in 0..wo {
                                    let ix = (ox * spec.stride[2] + dx) as isize - spec.pad[2] as isize;
                                    if ix >= 0 && ix < w as isize {
                                        dst[dst_base + ox] = x[src_base + ix as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut out = vec![0.0; o * p];
        gemm(o, r, p, vw.data(), false, &cols, false, &mut out, false);
        if let Some(b) = bias {
            let vb = self.value(b);
            assert_eq!(vb.len(), o, "conv bias length mismatch");
            for (oc, chunk) in out.chunks_mut(p).enumerate() {
                let bv = vb.data()[oc];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
        let shape = if rank3 { vec![o, ho, wo] } else { vec![o, to, ho, wo] };
        let ng = self.ng(input) || self.ng(weight) || bias.is_some_and(|b| self.ng(b));
        self.push(
            Tensor::new(shape, out),
            Op::Conv {
                input,
                weight,
                bias,
                spec,
                cache: Box::new(ConvCache { cols, in_dims, out_dims }),
            },
            ng,
        )
    }

    /// Mean softmax cross-entropy over `(row, class)` entries of an `m × k`
    /// logit matrix, divided by `denom`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, entries: Rc<Vec<(usize, usize)>>, denom: f64) -> Var {
        let vl = self.value(logits);
        let k = vl.dim(1);
        let mut probs = Vec::with_capacity(entries.len() * k);
        let mut loss = 0.0;
        for &(row, class) in entries.iter() {
            let r = &vl.data()[row * k..(row + 1) * k];
            let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + r.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - r[class];
            probs.extend(r.iter().map(|x| (x - lse).exp()));
        }
        let value = if entries.is_empty() { 0.0 } else { loss / denom };
        let ng = self.ng(logits);
        self.push(
            Tensor::scalar(value),
            Op::SoftmaxCe {
                logits,
                entries,
                denom,
                probs,
            },
            ng,
        )
    }

    /// Binary cross-entropy with logits over `(flat index, target)` entries.
    pub fn bce_with_logits(&mut self, logits: Var, entries: Rc<Vec<(usize, f64)>>, denom: f64) -> Var {
        let vl = self.value(logits).data();
        let mut loss = 0.0;
        for &(i, y) in entries.iter() {
            let x = vl[i];
            loss += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
        }
        let value = if entries.is_empty() { 0.0 } else { loss / denom };
        let ng = self.ng(logits);
        self.push(Tensor::scalar(value), Op::Bce { logits, entries, denom }, ng)
    }

    /// Smooth-L1 over `(flat index, target)` entries, summed and divided by `denom`.
    pub fn smooth_l1(&mut self, pred: Var, entries: Rc<Vec<(usize, f64)>>, beta: f64, denom: f64) -> Var {
        let vp = self.value(pred).data();
        let loss: f64 = entries.iter().map(|&(i, y)| smooth_l1(vp[i] - y, beta).0).sum();
        let value = if entries.is_empty() { 0.0 } else { loss / denom };
        let ng = self.ng(pred);
        self.push(
            Tensor::scalar(value),
            Op::SmoothL1 {
                pred,
                entries,
                beta,
                denom,
            },
            ng,
        )
    }

    /// Backpropagates from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).len(), 1, "backward from non-scalar output");
        let seed = Tensor::full(self.value(output).shape().to_vec(), 1.0);
        self.backward_with(output, seed)
    }

    /// Backpropagates an explicit output cotangent.
    pub fn backward_with(&self, output: Var, seed: Tensor) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(seed.shape(), self.value(output).shape());
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.ng(v) {
            return;
        }
        let slot = &mut grads[v.0];
        let t = slot.get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape().to_vec()));
        f(t.data_mut());
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let out_val = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |d| add_into(d, gd));
                self.accumulate(grads, *b, |d| add_into(d, gd));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |d| add_into(d, gd));
                self.accumulate(grads, *b, |d| d.iter_mut().zip(gd).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |d| {
                    for ((x, y), z) in d.iter_mut().zip(gd).zip(vb) {
                        *x += y * z;
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for ((x, y), z) in d.iter_mut().zip(gd).zip(va) {
                        *x += y * z;
                    }
                });
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, |d| d.iter_mut().zip(gd).for_each(|(x, y)| *x += c * y));
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, |d| add_into(d, gd));
                let n = self.value(*row).len();
                self.accumulate(grads, *row, |d| {
                    for chunk in gd.chunks(n) {
                        add_into(d, chunk);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.dim(0), va.dim(1), vb.dim(1));
                // dA = G Bᵀ, dB = Aᵀ G
                self.accumulate(grads, *a, |d| gemm(m, n, k, gd, false, vb.data(), true, d, true));
                self.accumulate(grads, *b, |d| gemm(k, m, n, va.data(), true, gd, false, d, true));
            }
            Op::MatMulBt(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.dim(0), va.dim(1), vb.dim(0));
                // C = A Bᵀ: dA = G B, dB = Gᵀ A
                self.accumulate(grads, *a, |d| gemm(m, n, k, gd, false, vb.data(), false, d, true));
                self.accumulate(grads, *b, |d| gemm(n, m, k, gd, true, va.data(), false, d, true));
            }
            Op::Transpose(a) => {
                let (n, m) = (out_val.dim(0), out_val.dim(1));
                self.accumulate(grads, *a, |d| {
                    for i in 0..m {
                        for j in 0..n {
                            d[i * n + j] += gd[j * m + i];
                        }
                    }
                });
            }
            Op::Reshape(a) => self.accumulate(grads, *a, |d| add_into(d, gd)),
            Op::Silu(a) => {
                let va = self.value(*a).data();
                self.accumulate(grads, *a, |d| {
                    for ((x, y), &z) in d.iter_mut().zip(gd).zip(va) {
                        let s = sigmoid(z);
                        *x += y * s * (1.0 + z * (1.0 - s));
                    }
                });
            }
            Op::Softplus(a) => {
                let va = self.value(*a).data();
                self.accumulate(grads, *a, |d| {
                    for ((x, y), &z) in d.iter_mut().zip(gd).zip(va) {
                        *x += y * sigmoid(z);
                    }
                });
            }
            Op::MaskedSoftmax(a, mask) => {
                let (m, n) = (out_val.dim(0), out_val.dim(1));
                let p = out_val.data();
                self.accumulate(grads, *a, |d| {
                    for r in 0..m {
                        let pr = &p[r * n..(r + 1) * n];
                        let gr = &gd[r * n..(r + 1) * n];
                        let dot: f64 = pr.iter().zip(gr).map(|(x, y)| x * y).sum();
                        for j in 0..n {
                            if mask[j] {
                                d[r * n + j] += pr[j] * (gr[j] - dot);
                            }
                        }
                    }
                });
            }
            Op::Sparse(a, map) => self.accumulate(grads, *a, |d| map.apply_transpose(gd, d)),
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.accumulate(grads, p, |d| add_into(d, &gd[off..off + len]));
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let m = out_val.dim(0);
                let n = out_val.dim(1);
                let mut col = 0;
                for &p in parts {
                    let w = self.value(p).dim(1);
                    self.accumulate(grads, p, |d| {
                        for r in 0..m {
                            add_into(&mut d[r * w..(r + 1) * w], &gd[r * n + col..r * n + col + w]);
                        }
                    });
                    col += w;
                }
            }
            Op::RepeatRows(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, |d| {
                    for chunk in gd.chunks(n) {
                        add_into(d, chunk);
                    }
                });
            }
            Op::Sum(a) => {
                let s = gd[0];
                self.accumulate(grads, *a, |d| d.iter_mut().for_each(|x| *x += s));
            }
            Op::Conv {
                input,
                weight,
                bias,
                spec,
                cache,
            } => self.conv_backward(*input, *weight, *bias, spec, cache, gd, grads),
            Op::SoftmaxCe {
                logits,
                entries,
                denom,
                probs,
            } => {
                let k = self.value(*logits).dim(1);
                let s = gd[0] / denom;
                self.accumulate(grads, *logits, |d| {
                    for (e, &(row, class)) in entries.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == class { 1.0 } else { 0.0 };
                            d[row * k + j] += s * (probs[e * k + j] - onehot);
                        }
                    }
                });
            }
            Op::Bce { logits, entries, denom } => {
                let vl = self.value(*logits).data();
                let s = gd[0] / denom;
                self.accumulate(grads, *logits, |d| {
                    for &(i, y) in entries.iter() {
                        d[i] += s * (sigmoid(vl[i]) - y);
                    }
                });
            }
            Op::SmoothL1 {
                pred,
                entries,
                beta,
                denom,
            } => {
                let vp = self.value(*pred).data();
                let s = gd[0] / denom;
                self.accumulate(grads, *pred, |d| {
                    for &(i, y) in entries.iter() {
                        d[i] += s * smooth_l1(vp[i] - y, *beta).1;
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: &ConvSpec,
        cache: &ConvCache,
        gd: &[f64],
        grads: &mut [Option<Tensor>],
    ) {
        let vw = self.value(weight);
        let [c, t, h, w] = cache.in_dims;
        let [to, ho, wo] = cache.out_dims;
        let [kt, kh, kw] = spec.kernel;
        let o = vw.dim(0);
        let p = to * ho * wo;
        let r = c * kt * kh * kw;
        if let Some(b) = bias {
            self.accumulate(grads, b, |d| {
                for (oc, chunk) in gd.chunks(p).enumerate() {
                    d[oc] += chunk.iter().sum::<f64>();
                }
            });
        }
        // dW = G colsᵀ
        self.accumulate(grads, weight, |d| gemm(o, p, r, gd, false, &cache.cols, true, d, true));
        if !self.ng(input) {
            return;
        }
        // dcols = Wᵀ G, then scatter back (col2im).
        let mut dcols = vec![0.0; r * p];
        gemm(r, o, p, vw.data(), true, gd, false, &mut dcols, false);
        self.accumulate(grads, input, |d| {
            for ci in 0..c {
                for dt in 0..kt {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let row = ((ci * kt + dt) * kh + dy) * kw + dx;
                            let src = &dcols[row * p..(row + 1) * p];
                            for ot in 0..to {
                                let it = (ot * spec.stride[0] + dt) as isize - spec.pad[0] as isize;
                                if it < 0 || it >= t as isize {
                                    continue;
                                }
                                for oy in 0..ho {
                                    let iy = (oy * spec.stride[1] + dy) as isize - spec.pad[1] as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let dst_base = ((ci * t + it as usize) * h + iy as usize) * w;
                                    let src_base = (ot * ho + oy) * wo;
                                    for ox in 0..wo {
                                        let ix = (ox * spec.stride[2] + dx) as isize - spec.pad[2] as isize;
                                        if ix >= 0 && ix < w as isize {
                                            d[dst_base + ix as usize] += src[src_base + ox];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (x, y) in dst.iter_mut().zip(src) {
        *x += y;
    }
}
