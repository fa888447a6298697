//! Tape-based reverse-mode automatic differentiation over `ndarray`.
//!
//! The models in this crate are small enough that a hand-rolled engine beats
//! pulling in a framework: every operation the networks need is one enum
//! variant with an explicit backward rule, all arithmetic is `f64`, and the
//! evaluation order is fixed, so gradients are reproducible bit for bit and
//! easy to validate against finite differences.
//!
//! A [`Tape`] records operations as they execute. [`Var`] is an index into
//! the tape. Parameters live in a [`ParamStore`] outside the tape; each
//! forward pass copies the current parameter values into leaf nodes, and
//! [`Tape::backward`] returns gradients keyed by parameter slot.

use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Handle to a parameter slot in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable arrays.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<(String, ArrayD<f64>)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique; they key checkpoint
    /// entries and optimizer state.
    pub fn add(&mut self, name: &str, value: ArrayD<f64>) -> ParamId {
        assert!(
            self.find(name).is_none(),
            "duplicate parameter name {name:?}"
        );
        self.entries.push((name.to_string(), value));
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<f64> {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|(n, _)| n == name)
            .map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    /// Total number of scalar elements across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by parameter slot.
#[derive(Debug)]
pub struct Grads {
    by_slot: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    pub fn of(&self, id: ParamId) -> Option<&ArrayD<f64>> {
        self.by_slot.get(id.0).and_then(|g| g.as_ref())
    }
}

enum Op {
    /// Constant leaf.
    Input,
    /// Leaf bound to a parameter slot.
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// Adds a constant array (gradient passes through unchanged).
    AddConst(Var),
    /// 2-D matrix product.
    MatMul(Var, Var),
    /// Batched 3-D matrix product `[b,m,k] x [b,k,n]`.
    BatchMatMul(Var, Var),
    /// Swaps the last two axes of a 2-D or 3-D array.
    TransposeLast2(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        /// Per-sample im2col matrices saved for the backward pass.
        cols: Vec<Array2<f64>>,
    },
    /// `[B,C,H,W] + [C]`.
    BiasChannel(Var, Var),
    /// `[B,C,H,W] + [B,C]`, the conditioning injection used by residual blocks.
    BiasPerSample(Var, Var),
    /// `x + b` where `b`'s shape is a suffix of `x`'s shape.
    BroadcastAdd(Var, Var),
    /// Nearest-neighbor 2x upsampling of `[B,C,H,W]`.
    Upsample2(Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        /// `(mean, invstd)` per `(batch, group)`.
        stats: Vec<(f64, f64)>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        /// `(mean, invstd)` per row of the flattened leading axes.
        stats: Vec<(f64, f64)>,
    },
    Swish(Var),
    Sigmoid(Var),
    SoftmaxLast(Var),
    /// Channel concatenation of two `[B,C,H,W]` arrays.
    ConcatChannels(Var, Var),
    /// Channel slice of a `[B,C,H,W]` array starting at `start`.
    SliceChannels { x: Var, start: usize },
    /// Row gather from a `[V,D]` table.
    Embed { table: Var, indices: Vec<usize> },
    MeanAll(Var),
    MseLoss(Var, Var),
    CrossEntropyLogits {
        logits: Var,
        targets: Vec<usize>,
        probs: Array2<f64>,
    },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation and differentiates it in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = &self.nodes[v.0].value;
        assert_eq!(val.len(), 1, "expected scalar, got shape {:?}", val.shape());
        *val.iter().next().unwrap()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn input(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Input, false)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id), true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let value = va + vb;
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "sub: shape mismatch");
        let value = va - vb;
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Sub(a, b), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
        let value = va * vb;
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul(a, b), needs)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| v * c);
        let needs = self.needs(a);
        self.push(value, Op::Scale(a, c), needs)
    }

    pub fn add_const(&mut self, a: Var, c: &ArrayD<f64>) -> Var {
        let va = &self.nodes[a.0].value;
        assert_eq!(va.shape(), c.shape(), "add_const: shape mismatch");
        let value = va + c;
        let needs = self.needs(a);
        self.push(value, Op::AddConst(a), needs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let va = as_2d(&self.nodes[a.0].value);
        let vb = as_2d(&self.nodes[b.0].value);
        assert_eq!(va.ncols(), vb.nrows(), "matmul: inner dim mismatch");
        let value = va.dot(&vb).into_dyn();
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), needs)
    }

    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        assert_eq!(va.ndim(), 3, "batch_matmul: lhs must be 3-D");
        assert_eq!(vb.ndim(), 3, "batch_matmul: rhs must be 3-D");
        let (bs, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        let (bs2, k2, n) = (vb.shape()[0], vb.shape()[1], vb.shape()[2]);
        assert_eq!(bs, bs2, "batch_matmul: batch mismatch");
        assert_eq!(k, k2, "batch_matmul: inner dim mismatch");
        let mut out = ArrayD::zeros(IxDyn(&[bs, m, n]));
        for i in 0..bs {
            let ai = slice_2d(va, i, m, k);
            let bi = slice_2d(vb, i, k, n);
            let ci = ai.dot(&bi);
            out.index_axis_mut(Axis(0), i).assign(&ci);
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::BatchMatMul(a, b), needs)
    }

    pub fn transpose_last2(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let nd = va.ndim();
        assert!(
            nd == 2 || nd == 3,
            "transpose_last2: expected 2-D or 3-D, got {nd}-D"
        );
        let mut view = va.view();
        view.swap_axes(nd - 2, nd - 1);
        let value = view.as_standard_layout().to_owned();
        let needs = self.needs(a);
        self.push(value, Op::TransposeLast2(a), needs)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let va = &self.nodes[a.0].value;
        let n: usize = shape.iter().product();
        assert_eq!(va.len(), n, "reshape: element count mismatch");
        let value = va
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape on standard layout");
        let needs = self.needs(a);
        self.push(value, Op::Reshape(a), needs)
    }

    /// 2-D convolution: `x [B,C,H,W]`, `w [O,C,k,k]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let vx = &self.nodes[x.0].value;
        let vw = &self.nodes[w.0].value;
        assert_eq!(vx.ndim(), 4, "conv2d: input must be [B,C,H,W]");
        assert_eq!(vw.ndim(), 4, "conv2d: weight must be [O,C,k,k]");
        let (b, c, h, wd) = dims4(vx);
        let (o, cw, kh, kw) = dims4(vw);
        assert_eq!(c, cw, "conv2d: channel mismatch");
        assert_eq!(kh, kw, "conv2d: kernel must be square");
        let k = kh;
        assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "conv2d: kernel larger than padded input");
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;

        let w_mat = vw
            .view()
            .into_shape_with_order((o, c * k * k))
            .expect("weight standard layout");
        let mut out = ArrayD::zeros(IxDyn(&[b, o, oh, ow]));
        let mut cols = Vec::with_capacity(b);
        for bi in 0..b {
            let col = im2col(vx, bi, c, h, wd, k, stride, pad, oh, ow);
            let y = w_mat.dot(&col); // [O, OH*OW]
            let y4 = y
                .into_shape_with_order((o, oh, ow))
                .expect("conv output reshape");
            out.index_axis_mut(Axis(0), bi).assign(&y4);
            cols.push(col);
        }
        let needs = self.needs(x) || self.needs(w);
        self.push(
            out,
            Op::Conv2d {
                x,
                w,
                stride,
                pad,
                cols,
            },
            needs,
        )
    }

    /// `[B,C,H,W] + [C]` channel bias.
    pub fn bias_channel(&mut self, x: Var, b: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let vb = &self.nodes[b.0].value;
        assert_eq!(vx.ndim(), 4, "bias_channel: input must be [B,C,H,W]");
        assert_eq!(vb.ndim(), 1, "bias_channel: bias must be [C]");
        let (_, c, _, _) = dims4(vx);
        assert_eq!(vb.len(), c, "bias_channel: channel mismatch");
        let mut value = vx.clone();
        for (ci, &bv) in vb.iter().enumerate() {
            value
                .index_axis_mut(Axis(1), ci)
                .mapv_inplace(|v| v + bv);
        }
        let needs = self.needs(x) || self.needs(b);
        self.push(value, Op::BiasChannel(x, b), needs)
    }

    /// `[B,C,H,W] + [B,C]` per-sample channel bias.
    pub fn bias_per_sample(&mut self, x: Var, b: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let vb = &self.nodes[b.0].value;
        assert_eq!(vx.ndim(), 4, "bias_per_sample: input must be [B,C,H,W]");
        assert_eq!(vb.ndim(), 2, "bias_per_sample: bias must be [B,C]");
        let (bs, c, _, _) = dims4(vx);
        assert_eq!(vb.shape(), &[bs, c], "bias_per_sample: shape mismatch");
        let mut value = vx.clone();
        for bi in 0..bs {
            for ci in 0..c {
                let bv = vb[[bi, ci]];
                value
                    .index_axis_mut(Axis(0), bi)
                    .index_axis_mut(Axis(0), ci)
                    .mapv_inplace(|v| v + bv);
            }
        }
        let needs = self.needs(x) || self.needs(b);
        self.push(value, Op::BiasPerSample(x, b), needs)
    }

    /// `x + b` where `b.shape()` is a suffix of `x.shape()`.
    pub fn broadcast_add(&mut self, x: Var, b: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let vb = &self.nodes[b.0].value;
        let (nx, nb) = (vx.ndim(), vb.ndim());
        assert!(nb <= nx, "broadcast_add: bias rank exceeds input rank");
        assert_eq!(
            &vx.shape()[nx - nb..],
            vb.shape(),
            "broadcast_add: bias shape must be a suffix of input shape"
        );
        let value = vx + vb;
        let needs = self.needs(x) || self.needs(b);
        self.push(value, Op::BroadcastAdd(x, b), needs)
    }

    /// Nearest-neighbor 2x spatial upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        assert_eq!(vx.ndim(), 4, "upsample2: input must be [B,C,H,W]");
        let (b, c, h, w) = dims4(vx);
        let mut out = ArrayD::zeros(IxDyn(&[b, c, 2 * h, 2 * w]));
        for bi in 0..b {
            for ci in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let v = vx[[bi, ci, i, j]];
                        out[[bi, ci, 2 * i, 2 * j]] = v;
                        out[[bi, ci, 2 * i, 2 * j + 1]] = v;
                        out[[bi, ci, 2 * i + 1, 2 * j]] = v;
                        out[[bi, ci, 2 * i + 1, 2 * j + 1]] = v;
                    }
                }
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::Upsample2(x), needs)
    }

    /// Group normalization over `[B,C,H,W]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let vx = &self.nodes[x.0].value;
        assert_eq!(vx.ndim(), 4, "group_norm: input must be [B,C,H,W]");
        let (b, c, h, w) = dims4(vx);
        assert!(groups > 0 && c % groups == 0, "group_norm: groups must divide channels");
        assert_eq!(self.nodes[gamma.0].value.shape(), &[c], "group_norm: gamma must be [C]");
        assert_eq!(self.nodes[beta.0].value.shape(), &[c], "group_norm: beta must be [C]");
        let cs = c / groups;
        let n = (cs * h * w) as f64;
        let mut stats = Vec::with_capacity(b * groups);
        let mut value = ArrayD::zeros(IxDyn(&[b, c, h, w]));
        {
            let vg = &self.nodes[gamma.0].value;
            let vb = &self.nodes[beta.0].value;
            for bi in 0..b {
                for gi in 0..groups {
                    let mut sum = 0.0;
                    let mut sq = 0.0;
                    for ci in gi * cs..(gi + 1) * cs {
                        for i in 0..h {
                            for j in 0..w {
                                let v = vx[[bi, ci, i, j]];
                                sum += v;
                                sq += v * v;
                            }
                        }
                    }
                    let mean = sum / n;
                    let var = (sq / n - mean * mean).max(0.0);
                    let invstd = 1.0 / (var + eps).sqrt();
                    stats.push((mean, invstd));
                    for ci in gi * cs..(gi + 1) * cs {
                        let (g, be) = (vg[ci], vb[ci]);
                        for i in 0..h {
                            for j in 0..w {
                                let xh = (vx[[bi, ci, i, j]] - mean) * invstd;
                                value[[bi, ci, i, j]] = g * xh + be;
                            }
                        }
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            value,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
            needs,
        )
    }

    /// Layer normalization over the last axis with affine parameters `[D]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let vx = &self.nodes[x.0].value;
        let d = *vx.shape().last().expect("layer_norm: scalar input");
        assert_eq!(self.nodes[gamma.0].value.shape(), &[d], "layer_norm: gamma must be [D]");
        assert_eq!(self.nodes[beta.0].value.shape(), &[d], "layer_norm: beta must be [D]");
        let rows = vx.len() / d;
        let flat = vx
            .view()
            .into_shape_with_order((rows, d))
            .expect("layer_norm standard layout");
        let vg = &self.nodes[gamma.0].value;
        let vb = &self.nodes[beta.0].value;
        let mut out = Array2::<f64>::zeros((rows, d));
        let mut stats = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = flat.row(r);
            let mean = row.sum() / d as f64;
            let var = row.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / d as f64;
            let invstd = 1.0 / (var + eps).sqrt();
            stats.push((mean, invstd));
            for j in 0..d {
                out[[r, j]] = vg[j] * (row[j] - mean) * invstd + vb[j];
            }
        }
        let value = out
            .into_shape_with_order(IxDyn(vx.shape()))
            .expect("layer_norm output reshape");
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            },
            needs,
        )
    }

    pub fn swish(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.mapv(|v| v * sigmoid(v));
        let needs = self.needs(x);
        self.push(value, Op::Swish(x), needs)
    }

    pub fn sigmoid_op(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.mapv(sigmoid);
        let needs = self.needs(x);
        self.push(value, Op::Sigmoid(x), needs)
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let d = *vx.shape().last().expect("softmax_last: scalar input");
        let rows = vx.len() / d;
        let flat = vx
            .view()
            .into_shape_with_order((rows, d))
            .expect("softmax standard layout");
        let mut out = Array2::<f64>::zeros((rows, d));
        for r in 0..rows {
            let row = flat.row(r);
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut sum = 0.0;
            for j in 0..d {
                let e = (row[j] - max).exp();
                out[[r, j]] = e;
                sum += e;
            }
            for j in 0..d {
                out[[r, j]] /= sum;
            }
        }
        let value = out
            .into_shape_with_order(IxDyn(vx.shape()))
            .expect("softmax output reshape");
        let needs = self.needs(x);
        self.push(value, Op::SoftmaxLast(x), needs)
    }

    /// Concatenates two `[B,C,H,W]` arrays along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        assert_eq!(va.ndim(), 4, "concat_channels: inputs must be [B,C,H,W]");
        assert_eq!(vb.ndim(), 4, "concat_channels: inputs must be [B,C,H,W]");
        let (ba, ca, ha, wa) = dims4(va);
        let (bb, cb, hb, wb) = dims4(vb);
        assert_eq!((ba, ha, wa), (bb, hb, wb), "concat_channels: non-channel dims differ");
        let mut out = ArrayD::zeros(IxDyn(&[ba, ca + cb, ha, wa]));
        out.slice_mut(ndarray::s![.., ..ca, .., ..]).assign(va);
        out.slice_mut(ndarray::s![.., ca.., .., ..]).assign(vb);
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::ConcatChannels(a, b), needs)
    }

    /// Channel slice `[start, start+len)` of a `[B,C,H,W]` array.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let vx = &self.nodes[x.0].value;
        assert_eq!(vx.ndim(), 4, "slice_channels: input must be [B,C,H,W]");
        let c = vx.shape()[1];
        assert!(
            len > 0 && start + len <= c,
            "slice_channels: [{start}, {}) out of range for {c} channels",
            start + len
        );
        let out = vx
            .slice(ndarray::s![.., start..start + len, .., ..])
            .to_owned()
            .into_dyn();
        let needs = self.needs(x);
        self.push(out, Op::SliceChannels { x, start }, needs)
    }

    /// Gathers rows of a `[V,D]` table: output `[N,D]`.
    pub fn embed(&mut self, table: Var, indices: &[usize]) -> Var {
        let vt = &self.nodes[table.0].value;
        assert_eq!(vt.ndim(), 2, "embed: table must be [V,D]");
        let (v, d) = (vt.shape()[0], vt.shape()[1]);
        let mut out = Array2::<f64>::zeros((indices.len(), d));
        for (r, &ix) in indices.iter().enumerate() {
            assert!(ix < v, "embed: index {ix} out of range for table of {v}");
            for j in 0..d {
                out[[r, j]] = vt[[ix, j]];
            }
        }
        let needs = self.needs(table);
        self.push(
            out.into_dyn(),
            Op::Embed {
                table,
                indices: indices.to_vec(),
            },
            needs,
        )
    }

    /// Mean over all elements, as a 0-d array.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let m = vx.sum() / vx.len() as f64;
        let needs = self.needs(x);
        self.push(ArrayD::from_elem(IxDyn(&[]), m), Op::MeanAll(x), needs)
    }

    /// Mean squared error between same-shaped arrays, as a 0-d array.
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        assert_eq!(va.shape(), vb.shape(), "mse_loss: shape mismatch");
        let n = va.len() as f64;
        let mut acc = 0.0;
        for (x, y) in va.iter().zip(vb.iter()) {
            let d = x - y;
            acc += d * d;
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(
            ArrayD::from_elem(IxDyn(&[]), acc / n),
            Op::MseLoss(a, b),
            needs,
        )
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits [N,K]`, fused for numerical stability.
    pub fn cross_entropy_logits(&mut self, logits: Var, targets: &[usize]) -> Var {
        let vl = &self.nodes[logits.0].value;
        assert_eq!(vl.ndim(), 2, "cross_entropy_logits: logits must be [N,K]");
        let (n, k) = (vl.shape()[0], vl.shape()[1]);
        assert_eq!(targets.len(), n, "cross_entropy_logits: target count mismatch");
        let flat = as_2d(vl);
        let mut probs = Array2::<f64>::zeros((n, k));
        let mut loss = 0.0;
        for r in 0..n {
            assert!(targets[r] < k, "cross_entropy_logits: target out of range");
            let row = flat.row(r);
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut sum = 0.0;
            for j in 0..k {
                let e = (row[j] - max).exp();
                probs[[r, j]] = e;
                sum += e;
            }
            for j in 0..k {
                probs[[r, j]] /= sum;
            }
            loss -= probs[[r, targets[r]]].max(1e-300).ln();
        }
        let needs = self.needs(logits);
        self.push(
            ArrayD::from_elem(IxDyn(&[]), loss / n as f64),
            Op::CrossEntropyLogits {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            needs,
        )
    }

    /// Reverse pass from a scalar loss. Returns gradients for every
    /// parameter slot of `store` that participated in the computation.
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Grads {
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward: loss must be scalar"
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::from_elem(self.nodes[loss.0].value.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }

        let mut by_slot: Vec<Option<ArrayD<f64>>> = (0..store.len()).map(|_| None).collect();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(g) = &grads[i] {
                    match &mut by_slot[id.0] {
                        Some(acc) => *acc += g,
                        slot => *slot = Some(g.clone()),
                    }
                }
            }
        }
        Grads { by_slot }
    }

    fn propagate(&self, i: usize, g: &ArrayD<f64>, grads: &mut Vec<Option<ArrayD<f64>>>) {
        let acc = |grads: &mut Vec<Option<ArrayD<f64>>>, v: Var, contrib: ArrayD<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &contrib,
                slot => *slot = Some(contrib),
            }
        };

        match &self.nodes[i].op {
            Op::Input | Op::Param(_) => {
                // Leaves: Param grads stay in `grads` for collection; restore
                // the taken gradient.
                acc(grads, Var(i), g.clone());
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.mapv(|v| -v));
            }
            Op::Mul(a, b) => {
                let ga = g * &self.nodes[b.0].value;
                let gb = g * &self.nodes[a.0].value;
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::Scale(a, c) => {
                acc(grads, *a, g.mapv(|v| v * c));
            }
            Op::AddConst(a) => {
                acc(grads, *a, g.clone());
            }
            Op::MatMul(a, b) => {
                let va = as_2d(&self.nodes[a.0].value);
                let vb = as_2d(&self.nodes[b.0].value);
                let gg = as_2d(g);
                acc(grads, *a, gg.dot(&vb.t()).into_dyn());
                acc(grads, *b, va.t().dot(&gg).into_dyn());
            }
            Op::BatchMatMul(a, b) => {
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                let (bs, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                let n = vb.shape()[2];
                let mut ga = ArrayD::zeros(va.raw_dim());
                let mut gb = ArrayD::zeros(vb.raw_dim());
                for bi in 0..bs {
                    let gi = slice_2d(g, bi, m, n);
                    let ai = slice_2d(va, bi, m, k);
                    let bi2 = slice_2d(vb, bi, k, n);
                    ga.index_axis_mut(Axis(0), bi).assign(&gi.dot(&bi2.t()));
                    gb.index_axis_mut(Axis(0), bi).assign(&ai.t().dot(&gi));
                }
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::TransposeLast2(a) => {
                let nd = g.ndim();
                let mut view = g.view();
                view.swap_axes(nd - 2, nd - 1);
                acc(grads, *a, view.as_standard_layout().to_owned());
            }
            Op::Reshape(a) => {
                let shape = self.nodes[a.0].value.shape().to_vec();
                let ga = g
                    .clone()
                    .into_shape_with_order(IxDyn(&shape))
                    .expect("reshape grad");
                acc(grads, *a, ga);
            }
            Op::Conv2d {
                x,
                w,
                stride,
                pad,
                cols,
            } => {
                let vx = &self.nodes[x.0].value;
                let vw = &self.nodes[w.0].value;
                let (b, c, h, wd) = dims4(vx);
                let (o, _, k, _) = dims4(vw);
                let (oh, ow) = (g.shape()[2], g.shape()[3]);
                let w_mat = vw
                    .view()
                    .into_shape_with_order((o, c * k * k))
                    .expect("weight layout");
                let mut gw = Array2::<f64>::zeros((o, c * k * k));
                let mut gx = ArrayD::zeros(vx.raw_dim());
                for bi in 0..b {
                    let gy = slice_2d_from4(g, bi, o, oh * ow);
                    gw = gw + gy.dot(&cols[bi].t());
                    let gcols = w_mat.t().dot(&gy);
                    col2im_acc(&mut gx, bi, &gcols, c, h, wd, k, *stride, *pad, oh, ow);
                }
                let gw = gw
                    .into_shape_with_order(IxDyn(&[o, c, k, k]))
                    .expect("weight grad reshape");
                acc(grads, *x, gx);
                acc(grads, *w, gw);
            }
            Op::BiasChannel(x, bias) => {
                let (b, c, h, w) = dims4(g);
                let mut gb = Array1::<f64>::zeros(c);
                for bi in 0..b {
                    for ci in 0..c {
                        for i in 0..h {
                            for j in 0..w {
                                gb[ci] += g[[bi, ci, i, j]];
                            }
                        }
                    }
                }
                acc(grads, *x, g.clone());
                acc(grads, *bias, gb.into_dyn());
            }
            Op::BiasPerSample(x, bias) => {
                let (b, c, h, w) = dims4(g);
                let mut gb = Array2::<f64>::zeros((b, c));
                for bi in 0..b {
                    for ci in 0..c {
                        for i in 0..h {
                            for j in 0..w {
                                gb[[bi, ci]] += g[[bi, ci, i, j]];
                            }
                        }
                    }
                }
                acc(grads, *x, g.clone());
                acc(grads, *bias, gb.into_dyn());
            }
            Op::BroadcastAdd(x, bias) => {
                let vb_shape = self.nodes[bias.0].value.shape().to_vec();
                let d: usize = vb_shape.iter().product();
                let rows = g.len() / d.max(1);
                let flat = g
                    .view()
                    .into_shape_with_order((rows, d))
                    .expect("broadcast grad layout");
                let mut gb = Array1::<f64>::zeros(d);
                for r in 0..rows {
                    for j in 0..d {
                        gb[j] += flat[[r, j]];
                    }
                }
                let gb = gb
                    .into_shape_with_order(IxDyn(&vb_shape))
                    .expect("broadcast grad reshape");
                acc(grads, *x, g.clone());
                acc(grads, *bias, gb);
            }
            Op::Upsample2(x) => {
                let vx = &self.nodes[x.0].value;
                let (b, c, h, w) = dims4(vx);
                let mut gx = ArrayD::zeros(vx.raw_dim());
                for bi in 0..b {
                    for ci in 0..c {
                        for i in 0..h {
                            for j in 0..w {
                                gx[[bi, ci, i, j]] = g[[bi, ci, 2 * i, 2 * j]]
                                    + g[[bi, ci, 2 * i, 2 * j + 1]]
                                    + g[[bi, ci, 2 * i + 1, 2 * j]]
                                    + g[[bi, ci, 2 * i + 1, 2 * j + 1]];
                            }
                        }
                    }
                }
                acc(grads, *x, gx);
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            } => {
                let vx = &self.nodes[x.0].value;
                let vg = &self.nodes[gamma.0].value;
                let (b, c, h, w) = dims4(vx);
                let cs = c / groups;
                let n = (cs * h * w) as f64;
                let mut gx = ArrayD::zeros(vx.raw_dim());
                let mut ggamma = Array1::<f64>::zeros(c);
                let mut gbeta = Array1::<f64>::zeros(c);
                for bi in 0..b {
                    for gi in 0..*groups {
                        let (mean, invstd) = stats[bi * groups + gi];
                        // First pass: affine grads plus the two group means
                        // needed for the input gradient.
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for ci in gi * cs..(gi + 1) * cs {
                            for i in 0..h {
                                for j in 0..w {
                                    let xh = (vx[[bi, ci, i, j]] - mean) * invstd;
                                    let gy = g[[bi, ci, i, j]];
                                    ggamma[ci] += gy * xh;
                                    gbeta[ci] += gy;
                                    let gi2 = gy * vg[ci];
                                    m1 += gi2;
                                    m2 += gi2 * xh;
                                }
                            }
                        }
                        m1 /= n;
                        m2 /= n;
                        for ci in gi * cs..(gi + 1) * cs {
                            for i in 0..h {
                                for j in 0..w {
                                    let xh = (vx[[bi, ci, i, j]] - mean) * invstd;
                                    let gi2 = g[[bi, ci, i, j]] * vg[ci];
                                    gx[[bi, ci, i, j]] = invstd * (gi2 - m1 - xh * m2);
                                }
                            }
                        }
                    }
                }
                acc(grads, *x, gx);
                acc(grads, *gamma, ggamma.into_dyn());
                acc(grads, *beta, gbeta.into_dyn());
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let vx = &self.nodes[x.0].value;
                let vg = &self.nodes[gamma.0].value;
                let d = *vx.shape().last().unwrap();
                let rows = vx.len() / d;
                let xf = vx
                    .view()
                    .into_shape_with_order((rows, d))
                    .expect("layer_norm layout");
                let gf = g
                    .view()
                    .into_shape_with_order((rows, d))
                    .expect("layer_norm grad layout");
                let mut gx = Array2::<f64>::zeros((rows, d));
                let mut ggamma = Array1::<f64>::zeros(d);
                let mut gbeta = Array1::<f64>::zeros(d);
                for r in 0..rows {
                    let (mean, invstd) = stats[r];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..d {
                        let xh = (xf[[r, j]] - mean) * invstd;
                        let gy = gf[[r, j]];
                        ggamma[j] += gy * xh;
                        gbeta[j] += gy;
                        let gi2 = gy * vg[j];
                        m1 += gi2;
                        m2 += gi2 * xh;
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        let xh = (xf[[r, j]] - mean) * invstd;
                        let gi2 = gf[[r, j]] * vg[j];
                        gx[[r, j]] = invstd * (gi2 - m1 - xh * m2);
                    }
                }
                let gx = gx
                    .into_shape_with_order(IxDyn(vx.shape()))
                    .expect("layer_norm grad reshape");
                acc(grads, *x, gx);
                acc(grads, *gamma, ggamma.into_dyn());
                acc(grads, *beta, gbeta.into_dyn());
            }
            Op::Swish(x) => {
                let vx = &self.nodes[x.0].value;
                let mut gx = g.clone();
                for (gv, &xv) in gx.iter_mut().zip(vx.iter()) {
                    let s = sigmoid(xv);
                    *gv *= s * (1.0 + xv * (1.0 - s));
                }
                acc(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let vy = &self.nodes[i].value;
                let mut gx = g.clone();
                for (gv, &yv) in gx.iter_mut().zip(vy.iter()) {
                    *gv *= yv * (1.0 - yv);
                }
                acc(grads, *x, gx);
            }
            Op::SoftmaxLast(x) => {
                let vy = &self.nodes[i].value;
                let d = *vy.shape().last().unwrap();
                let rows = vy.len() / d;
                let yf = vy
                    .view()
                    .into_shape_with_order((rows, d))
                    .expect("softmax layout");
                let gf = g
                    .view()
                    .into_shape_with_order((rows, d))
                    .expect("softmax grad layout");
                let mut gx = Array2::<f64>::zeros((rows, d));
                for r in 0..rows {
                    let mut dot = 0.0;
                    for j in 0..d {
                        dot += gf[[r, j]] * yf[[r, j]];
                    }
                    for j in 0..d {
                        gx[[r, j]] = yf[[r, j]] * (gf[[r, j]] - dot);
                    }
                }
                let gx = gx
                    .into_shape_with_order(IxDyn(vy.shape()))
                    .expect("softmax grad reshape");
                acc(grads, *x, gx);
            }
            Op::ConcatChannels(a, b) => {
                let ca = self.nodes[a.0].value.shape()[1];
                let ga = g.slice(ndarray::s![.., ..ca, .., ..]).to_owned().into_dyn();
                let gb = g.slice(ndarray::s![.., ca.., .., ..]).to_owned().into_dyn();
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::SliceChannels { x, start } => {
                let vx = &self.nodes[x.0].value;
                let len = g.shape()[1];
                let mut gx = ArrayD::zeros(vx.raw_dim());
                gx.slice_mut(ndarray::s![.., *start..*start + len, .., ..])
                    .assign(g);
                acc(grads, *x, gx);
            }
            Op::Embed { table, indices } => {
                let vt = &self.nodes[table.0].value;
                let d = vt.shape()[1];
                let mut gt = ArrayD::zeros(vt.raw_dim());
                for (r, &ix) in indices.iter().enumerate() {
                    for j in 0..d {
                        gt[[ix, j]] += g[[r, j]];
                    }
                }
                acc(grads, *table, gt);
            }
            Op::MeanAll(x) => {
                let vx = &self.nodes[x.0].value;
                let s = g.iter().next().unwrap() / vx.len() as f64;
                acc(grads, *x, ArrayD::from_elem(vx.raw_dim(), s));
            }
            Op::MseLoss(a, b) => {
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                let s = 2.0 * g.iter().next().unwrap() / va.len() as f64;
                let diff = (va - vb).mapv(|v| v * s);
                acc(grads, *a, diff.clone());
                acc(grads, *b, diff.mapv(|v| -v));
            }
            Op::CrossEntropyLogits {
                logits,
                targets,
                probs,
            } => {
                let n = targets.len();
                let s = g.iter().next().unwrap() / n as f64;
                let mut gl = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    gl[[r, t]] -= 1.0;
                }
                acc(grads, *logits, gl.mapv(|v| v * s).into_dyn());
            }
        }
    }
}

/// Central finite difference of a scalar-valued computation with respect to
/// one element of one parameter. Used by gradient-check tests.
pub fn central_difference(
    store: &mut ParamStore,
    build: &dyn Fn(&mut Tape, &ParamStore) -> Var,
    id: ParamId,
    elem: usize,
    h: f64,
) -> f64 {
    let orig = store.get(id).as_slice().expect("standard layout")[elem];

    store.get_mut(id).as_slice_mut().unwrap()[elem] = orig + h;
    let mut tp = Tape::new();
    let lp = build(&mut tp, store);
    let fp = tp.scalar(lp);

    store.get_mut(id).as_slice_mut().unwrap()[elem] = orig - h;
    let mut tm = Tape::new();
    let lm = build(&mut tm, store);
    let fm = tm.scalar(lm);

    store.get_mut(id).as_slice_mut().unwrap()[elem] = orig;
    (fp - fm) / (2.0 * h)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn dims4(a: &ArrayD<f64>) -> (usize, usize, usize, usize) {
    let s = a.shape();
    (s[0], s[1], s[2], s[3])
}

fn as_2d(a: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    assert_eq!(a.ndim(), 2, "expected 2-D array, got shape {:?}", a.shape());
    a.view()
        .into_shape_with_order((a.shape()[0], a.shape()[1]))
        .expect("standard layout")
}

fn slice_2d(a: &ArrayD<f64>, b: usize, m: usize, n: usize) -> ndarray::ArrayView2<'_, f64> {
    a.index_axis(Axis(0), b)
        .into_shape_with_order((m, n))
        .expect("standard layout")
}

fn slice_2d_from4(a: &ArrayD<f64>, b: usize, c: usize, hw: usize) -> Array2<f64> {
    a.index_axis(Axis(0), b)
        .to_owned()
        .into_shape_with_order((c, hw))
        .expect("standard layout")
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &ArrayD<f64>,
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let mut cols = Array2::<f64>::zeros((c * k * k, oh * ow));
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                for i in 0..oh {
                    let ih = (i * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for j in 0..ow {
                        let iw = (j * stride + kj) as isize - pad as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        cols[[row, i * ow + j]] = x[[b, ci, ih as usize, iw as usize]];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im_acc(
    gx: &mut ArrayD<f64>,
    b: usize,
    gcols: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                for i in 0..oh {
                    let ih = (i * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for j in 0..ow {
                        let iw = (j * stride + kj) as isize - pad as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        gx[[b, ci, ih as usize, iw as usize]] += gcols[[row, i * ow + j]];
                    }
                }
            }
        }
    }
}
