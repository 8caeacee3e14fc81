//! The tape: an eagerly evaluated, topologically ordered computation graph.

use crate::conv::{conv_bwd_input, conv_bwd_weight, conv_fwd, ConvGeom};
use crate::Scalar;
use ndarray::{ArrayD, Axis, IxDyn, Slice};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

enum Op<S: Scalar> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, S),
    AddScalar(NodeId),
    LeakyRelu(NodeId, S),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Abs(NodeId),
    Conv {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeom,
    },
    ConvTranspose {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeom,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    ResizeNearest {
        x: NodeId,
    },
    Concat {
        inputs: Vec<NodeId>,
        axis: usize,
    },
    Reshape(NodeId),
    SliceRow {
        x: NodeId,
        row: usize,
    },
    ScaleShiftChannels {
        x: NodeId,
        scale: NodeId,
        shift: NodeId,
    },
    L2NormalizeAxis0 {
        x: NodeId,
        eps: S,
    },
    MeanPerChannel(NodeId),
    DotVec(NodeId, NodeId),
    MeanAll(NodeId),
}

struct Node<S: Scalar> {
    value: ArrayD<S>,
    op: Op<S>,
    requires: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Grads<S: Scalar> {
    slots: Vec<Option<ArrayD<S>>>,
}

impl<S: Scalar> Grads<S> {
    pub fn get(&self, id: NodeId) -> Option<&ArrayD<S>> {
        self.slots.get(id.0).and_then(|g| g.as_ref())
    }
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn nearest_index(out: usize, out_len: usize, in_len: usize) -> usize {
    debug_assert!(out < out_len);
    out * in_len / out_len
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<S> {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> S {
        let v = &self.nodes[id.0].value;
        assert_eq!(v.len(), 1, "scalar_value on non-scalar node");
        *v.iter().next().unwrap()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<S>, op: Op<S>, requires: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn req(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires
    }

    /// Non-trainable leaf: gradients never flow past it.
    pub fn constant(&mut self, value: ArrayD<S>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf: `backward` will produce a gradient slot for it.
    pub fn var(&mut self, value: ArrayD<S>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let r = self.req(a) || self.req(b);
        self.push(v, Op::Add(a, b), r)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let r = self.req(a) || self.req(b);
        self.push(v, Op::Sub(a, b), r)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let r = self.req(a) || self.req(b);
        self.push(v, Op::Mul(a, b), r)
    }

    pub fn scale(&mut self, a: NodeId, c: S) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        let r = self.req(a);
        self.push(v, Op::Scale(a, c), r)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: S) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        let r = self.req(a);
        self.push(v, Op::AddScalar(a), r)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: S) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| if x >= S::zero() { x } else { x * slope });
        let r = self.req(a);
        self.push(v, Op::LeakyRelu(a, slope), r)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(stable_sigmoid);
        let r = self.req(a);
        self.push(v, Op::Sigmoid(a), r)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x.tanh());
        let r = self.req(a);
        self.push(v, Op::Tanh(a), r)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x.abs());
        let r = self.req(a);
        self.push(v, Op::Abs(a), r)
    }

    /// 3D convolution on `(C,D,H,W)` with weight `(O,C,kD,kH,kW)`.
    pub fn conv3d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, geom: ConvGeom) -> NodeId {
        let mut v = conv_fwd(&self.nodes[x.0].value, &self.nodes[w.0].value, &geom);
        if let Some(bi) = b {
            add_channel_bias(&mut v, &self.nodes[bi.0].value);
        }
        let r = self.req(x) || self.req(w) || b.map(|bi| self.req(bi)).unwrap_or(false);
        self.push(v, Op::Conv { x, w, b, geom }, r)
    }

    /// Transposed 3D convolution; weight layout `(Cin,Cout,kD,kH,kW)`.
    pub fn conv3d_transpose(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeom,
    ) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let ws = wv.shape();
        let k = [ws[2], ws[3], ws[4]];
        let xin = [xv.shape()[1], xv.shape()[2], xv.shape()[3]];
        let od = geom.transpose_out_dims(xin, k);
        let out_dims = [ws[1], od[0], od[1], od[2]];
        let mut v = conv_bwd_input(xv, wv, &geom, out_dims);
        if let Some(bi) = b {
            add_channel_bias(&mut v, &self.nodes[bi.0].value);
        }
        let r = self.req(x) || self.req(w) || b.map(|bi| self.req(bi)).unwrap_or(false);
        self.push(v, Op::ConvTranspose { x, w, b, geom }, r)
    }

    /// 2D convolution on `(C,H,W)` with weight `(O,C,kH,kW)`, realized as a
    /// depth-1 volume.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad_lo: usize,
        pad_hi: usize,
    ) -> NodeId {
        let xs = self.nodes[x.0].value.shape().to_vec();
        assert_eq!(xs.len(), 3, "conv2d input must be (C,H,W)");
        let ws = self.nodes[w.0].value.shape().to_vec();
        assert_eq!(ws.len(), 4, "conv2d weight must be (O,C,kH,kW)");
        let x4 = self.reshape(x, &[xs[0], 1, xs[1], xs[2]]);
        let w5 = self.reshape(w, &[ws[0], ws[1], 1, ws[2], ws[3]]);
        let geom = ConvGeom {
            stride: [1, stride, stride],
            pad_lo: [0, pad_lo, pad_lo],
            pad_hi: [0, pad_hi, pad_hi],
        };
        let y = self.conv3d(x4, w5, b, geom);
        let ys = self.nodes[y.0].value.shape().to_vec();
        self.reshape(y, &[ys[0], ys[2], ys[3]])
    }

    /// y = w·x + b for 1-D x.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();
        let wv = self.nodes[w.0].value.view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
        let bv = self.nodes[b.0].value.view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();
        let v = (wv.dot(&xv) + bv).into_dyn();
        let r = self.req(x) || self.req(w) || self.req(b);
        self.push(v, Op::Linear { x, w, b }, r)
    }

    /// Nearest-neighbor resize of `(C,D,H,W)` to `(C, target)`.
    pub fn resize_nearest(&mut self, x: NodeId, target: [usize; 3]) -> NodeId {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.ndim(), 4, "resize_nearest input must be (C,D,H,W)");
        let c = xv.shape()[0];
        let ind = [xv.shape()[1], xv.shape()[2], xv.shape()[3]];
        let v = ArrayD::from_shape_fn(IxDyn(&[c, target[0], target[1], target[2]]), |ix| {
            xv[[
                ix[0],
                nearest_index(ix[1], target[0], ind[0]),
                nearest_index(ix[2], target[1], ind[1]),
                nearest_index(ix[3], target[2], ind[2]),
            ]]
        });
        let r = self.req(x);
        self.push(v, Op::ResizeNearest { x }, r)
    }

    /// Nearest-neighbor 2x upsample of `(C,H,W)`.
    pub fn upsample2x(&mut self, x: NodeId) -> NodeId {
        let xs = self.nodes[x.0].value.shape().to_vec();
        assert_eq!(xs.len(), 3, "upsample2x input must be (C,H,W)");
        let x4 = self.reshape(x, &[xs[0], 1, xs[1], xs[2]]);
        let y = self.resize_nearest(x4, [1, xs[1] * 2, xs[2] * 2]);
        self.reshape(y, &[xs[0], xs[1] * 2, xs[2] * 2])
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> NodeId {
        let views: Vec<_> = inputs.iter().map(|id| self.nodes[id.0].value.view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
        let r = inputs.iter().any(|id| self.req(*id));
        self.push(
            v,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            r,
        )
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let v = self.nodes[x.0]
            .value
            .view()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape element count mismatch");
        let r = self.req(x);
        self.push(v, Op::Reshape(x), r)
    }

    /// Extract row `row` of a 2-D node as a 1-D node.
    pub fn slice_row(&mut self, x: NodeId, row: usize) -> NodeId {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.ndim(), 2, "slice_row input must be 2-D");
        let v = xv.index_axis(Axis(0), row).to_owned().into_dyn();
        let r = self.req(x);
        self.push(v, Op::SliceRow { x, row }, r)
    }

    /// y[c, ...] = x[c, ...] * scale[c] + shift[c] for a `(C, ...)` tensor.
    pub fn scale_shift_channels(&mut self, x: NodeId, scale: NodeId, shift: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let sc = &self.nodes[scale.0].value;
        let sh = &self.nodes[shift.0].value;
        let c = xv.shape()[0];
        assert_eq!(sc.len(), c, "scale length mismatch");
        assert_eq!(sh.len(), c, "shift length mismatch");
        let scs = sc.as_slice().unwrap();
        let shs = sh.as_slice().unwrap();
        let mut v = xv.clone();
        for (ci, mut lane) in v.axis_iter_mut(Axis(0)).enumerate() {
            lane.mapv_inplace(|t| t * scs[ci] + shs[ci]);
        }
        let r = self.req(x) || self.req(scale) || self.req(shift);
        self.push(v, Op::ScaleShiftChannels { x, scale, shift }, r)
    }

    /// Normalize over axis 0: y = x / sqrt(sum_axis0(x^2) + eps).
    pub fn l2_normalize_axis0(&mut self, x: NodeId, eps: S) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let norm = axis0_norm(xv, eps);
        let mut v = xv.clone();
        for mut lane in v.axis_iter_mut(Axis(0)) {
            lane.zip_mut_with(&norm, |t, n| *t = *t / *n);
        }
        let r = self.req(x);
        self.push(v, Op::L2NormalizeAxis0 { x, eps }, r)
    }

    /// `(C, ...)` -> `(C,)` mean over all non-channel axes.
    pub fn mean_per_channel(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let c = xv.shape()[0];
        let inner = xv.len() / c;
        let scale = S::lit(1.0 / inner as f64);
        let v = ArrayD::from_shape_vec(
            IxDyn(&[c]),
            xv.axis_iter(Axis(0))
                .map(|lane| lane.iter().cloned().sum::<S>() * scale)
                .collect(),
        )
        .unwrap();
        let r = self.req(x);
        self.push(v, Op::MeanPerChannel(x), r)
    }

    /// Dot product of two 1-D nodes, as a 0-d node.
    pub fn dot_vec(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(av.len(), bv.len(), "dot_vec length mismatch");
        let s: S = av.iter().zip(bv.iter()).map(|(x, y)| *x * *y).sum();
        let r = self.req(a) || self.req(b);
        self.push(ArrayD::from_elem(IxDyn(&[]), s), Op::DotVec(a, b), r)
    }

    /// Mean of all entries, as a 0-d node.
    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let av = &self.nodes[a.0].value;
        let scale = S::lit(1.0 / av.len() as f64);
        let s: S = av.iter().cloned().sum::<S>() * scale;
        let r = self.req(a);
        self.push(ArrayD::from_elem(IxDyn(&[]), s), Op::MeanAll(a), r)
    }

    // ----- composite helpers -----

    /// Mean squared difference, as a 0-d node.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    /// Mean absolute difference, as a 0-d node.
    pub fn mean_abs_diff(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.sub(a, b);
        let ab = self.abs(d);
        self.mean_all(ab)
    }

    /// Reverse pass from a scalar root. Returns per-node gradients (only
    /// nodes on a trainable path have slots filled in).
    pub fn backward(&self, root: NodeId) -> Grads<S> {
        let mut slots: Vec<Option<ArrayD<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires {
            return Grads { slots };
        }
        assert_eq!(
            self.nodes[root.0].value.len(),
            1,
            "backward root must be scalar"
        );
        slots[root.0] = Some(ArrayD::from_elem(self.nodes[root.0].value.raw_dim(), S::one()));
        for idx in (0..=root.0).rev() {
            if slots[idx].is_none() || !self.nodes[idx].requires {
                continue;
            }
            let g = if matches!(self.nodes[idx].op, Op::Leaf) {
                continue; // leaf gradient stays in its slot
            } else {
                slots[idx].take().unwrap()
            };
            self.propagate(idx, g, &mut slots);
        }
        Grads { slots }
    }

    fn propagate(&self, idx: usize, g: ArrayD<S>, slots: &mut Vec<Option<ArrayD<S>>>) {
        let node = &self.nodes[idx];
        let acc = |slots: &mut Vec<Option<ArrayD<S>>>, id: NodeId, contrib: ArrayD<S>| {
            if !self.nodes[id.0].requires {
                return;
            }
            match &mut slots[id.0] {
                Some(a) => *a = &*a + &contrib,
                s @ None => *s = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::Add(a, b) => {
                acc(slots, *a, g.clone());
                acc(slots, *b, g);
            }
            Op::Sub(a, b) => {
                acc(slots, *b, g.mapv(|x| -x));
                acc(slots, *a, g);
            }
            Op::Mul(a, b) => {
                acc(slots, *a, &g * &self.nodes[b.0].value);
                acc(slots, *b, &g * &self.nodes[a.0].value);
            }
            Op::Scale(a, c) => acc(slots, *a, g.mapv(|x| x * *c)),
            Op::AddScalar(a) => acc(slots, *a, g),
            Op::LeakyRelu(a, slope) => {
                let xv = &self.nodes[a.0].value;
                let mut d = g;
                d.zip_mut_with(xv, |gi, xi| {
                    if *xi < S::zero() {
                        *gi *= *slope;
                    }
                });
                acc(slots, *a, d);
            }
            Op::Sigmoid(a) => {
                let mut d = g;
                d.zip_mut_with(&node.value, |gi, yi| *gi *= *yi * (S::one() - *yi));
                acc(slots, *a, d);
            }
            Op::Tanh(a) => {
                let mut d = g;
                d.zip_mut_with(&node.value, |gi, yi| *gi *= S::one() - *yi * *yi);
                acc(slots, *a, d);
            }
            Op::Abs(a) => {
                let mut d = g;
                d.zip_mut_with(&self.nodes[a.0].value, |gi, xi| {
                    if *xi < S::zero() {
                        *gi = -*gi;
                    } else if *xi == S::zero() {
                        *gi = S::zero();
                    }
                });
                acc(slots, *a, d);
            }
            Op::Conv { x, w, b, geom } => {
                let xv = &self.nodes[x.0].value;
                let wv = &self.nodes[w.0].value;
                if self.nodes[x.0].requires {
                    let in_dims = [
                        xv.shape()[0],
                        xv.shape()[1],
                        xv.shape()[2],
                        xv.shape()[3],
                    ];
                    acc(slots, *x, conv_bwd_input(&g, wv, geom, in_dims));
                }
                if self.nodes[w.0].requires {
                    let ws = wv.shape();
                    acc(
                        slots,
                        *w,
                        conv_bwd_weight(&g, xv, geom, [ws[2], ws[3], ws[4]]),
                    );
                }
                if let Some(bi) = b {
                    if self.nodes[bi.0].requires {
                        acc(slots, *bi, channel_bias_grad(&g));
                    }
                }
            }
            Op::ConvTranspose { x, w, b, geom } => {
                let xv = &self.nodes[x.0].value;
                let wv = &self.nodes[w.0].value;
                if self.nodes[x.0].requires {
                    acc(slots, *x, conv_fwd(&g, wv, geom));
                }
                if self.nodes[w.0].requires {
                    let ws = wv.shape();
                    // For y = A(w)^T x the weight gradient is the ordinary
                    // conv weight gradient with the roles of x and gy swapped.
                    acc(
                        slots,
                        *w,
                        conv_bwd_weight(xv, &g, geom, [ws[2], ws[3], ws[4]]),
                    );
                }
                if let Some(bi) = b {
                    if self.nodes[bi.0].requires {
                        acc(slots, *bi, channel_bias_grad(&g));
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let xv = self.nodes[x.0]
                    .value
                    .view()
                    .into_dimensionality::<ndarray::Ix1>()
                    .unwrap();
                let wv = self.nodes[w.0]
                    .value
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap();
                let gv = g.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                if self.nodes[x.0].requires {
                    acc(slots, *x, wv.t().dot(&gv).into_dyn());
                }
                if self.nodes[w.0].requires {
                    let m = gv.len();
                    let n = xv.len();
                    let gw = ndarray::Array2::from_shape_fn((m, n), |(i, j)| gv[i] * xv[j]);
                    acc(slots, *w, gw.into_dyn());
                }
                if self.nodes[b.0].requires {
                    acc(slots, *b, g.clone());
                }
            }
            Op::ResizeNearest { x } => {
                let xv = &self.nodes[x.0].value;
                let ind = [xv.shape()[1], xv.shape()[2], xv.shape()[3]];
                let t = g.shape().to_vec();
                let mut gx = ArrayD::<S>::zeros(xv.raw_dim());
                for (ix, gi) in g.indexed_iter() {
                    gx[[
                        ix[0],
                        nearest_index(ix[1], t[1], ind[0]),
                        nearest_index(ix[2], t[2], ind[1]),
                        nearest_index(ix[3], t[3], ind[2]),
                    ]] += *gi;
                }
                acc(slots, *x, gx);
            }
            Op::Concat { inputs, axis } => {
                let mut start = 0isize;
                for id in inputs {
                    let len = self.nodes[id.0].value.shape()[*axis] as isize;
                    let part = g
                        .slice_axis(Axis(*axis), Slice::new(start, Some(start + len), 1))
                        .to_owned();
                    acc(slots, *id, part);
                    start += len;
                }
            }
            Op::Reshape(x) => {
                let shape = self.nodes[x.0].value.raw_dim();
                acc(slots, *x, g.into_shape_with_order(shape).unwrap());
            }
            Op::SliceRow { x, row } => {
                let mut gx = ArrayD::<S>::zeros(self.nodes[x.0].value.raw_dim());
                gx.index_axis_mut(Axis(0), *row).assign(&g);
                acc(slots, *x, gx);
            }
            Op::ScaleShiftChannels { x, scale, shift } => {
                let xv = &self.nodes[x.0].value;
                let scv = &self.nodes[scale.0].value;
                let c = xv.shape()[0];
                if self.nodes[x.0].requires {
                    let scs = scv.as_slice().unwrap();
                    let mut gx = g.clone();
                    for (ci, mut lane) in gx.axis_iter_mut(Axis(0)).enumerate() {
                        lane.mapv_inplace(|t| t * scs[ci]);
                    }
                    acc(slots, *x, gx);
                }
                if self.nodes[scale.0].requires {
                    let gs: Vec<S> = (0..c)
                        .map(|ci| {
                            g.index_axis(Axis(0), ci)
                                .iter()
                                .zip(xv.index_axis(Axis(0), ci).iter())
                                .map(|(gi, xi)| *gi * *xi)
                                .sum()
                        })
                        .collect();
                    acc(slots, *scale, ArrayD::from_shape_vec(IxDyn(&[c]), gs).unwrap());
                }
                if self.nodes[shift.0].requires {
                    let gb: Vec<S> = (0..c)
                        .map(|ci| g.index_axis(Axis(0), ci).iter().cloned().sum())
                        .collect();
                    acc(slots, *shift, ArrayD::from_shape_vec(IxDyn(&[c]), gb).unwrap());
                }
            }
            Op::L2NormalizeAxis0 { x, eps } => {
                let xv = &self.nodes[x.0].value;
                let norm = axis0_norm(xv, *eps);
                // gx = g/n - x * sum_c(x*g) / n^3
                let mut inner = ArrayD::<S>::zeros(norm.raw_dim());
                for (gl, xl) in g.axis_iter(Axis(0)).zip(xv.axis_iter(Axis(0))) {
                    let prod = &gl.to_owned() * &xl;
                    inner.zip_mut_with(&prod, |a, p| *a += *p);
                }
                let mut gx = ArrayD::<S>::zeros(xv.raw_dim());
                for (ci, mut lane) in gx.axis_iter_mut(Axis(0)).enumerate() {
                    let gl = g.index_axis(Axis(0), ci);
                    let xl = xv.index_axis(Axis(0), ci);
                    ndarray::Zip::from(&mut lane)
                        .and(&gl)
                        .and(&xl)
                        .and(&norm)
                        .and(&inner)
                        .for_each(|o, gi, xi, n, s| {
                            *o = *gi / *n - *xi * *s / (*n * *n * *n);
                        });
                }
                acc(slots, *x, gx);
            }
            Op::MeanPerChannel(x) => {
                let xv = &self.nodes[x.0].value;
                let c = xv.shape()[0];
                let inner = xv.len() / c;
                let scale = S::lit(1.0 / inner as f64);
                let gvec = g.as_slice().unwrap();
                let mut gx = ArrayD::<S>::zeros(xv.raw_dim());
                for (ci, mut lane) in gx.axis_iter_mut(Axis(0)).enumerate() {
                    lane.fill(gvec[ci] * scale);
                }
                acc(slots, *x, gx);
            }
            Op::DotVec(a, b) => {
                let gs = *g.iter().next().unwrap();
                acc(slots, *a, self.nodes[b.0].value.mapv(|x| x * gs));
                acc(slots, *b, self.nodes[a.0].value.mapv(|x| x * gs));
            }
            Op::MeanAll(a) => {
                let av = &self.nodes[a.0].value;
                let gs = *g.iter().next().unwrap() * S::lit(1.0 / av.len() as f64);
                acc(slots, *a, ArrayD::from_elem(av.raw_dim(), gs));
            }
        }
    }
}

fn stable_sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn add_channel_bias<S: Scalar>(v: &mut ArrayD<S>, b: &ArrayD<S>) {
    assert_eq!(b.len(), v.shape()[0], "bias length mismatch");
    let bs = b.as_slice().unwrap();
    for (ci, mut lane) in v.axis_iter_mut(Axis(0)).enumerate() {
        lane.mapv_inplace(|t| t + bs[ci]);
    }
}

fn channel_bias_grad<S: Scalar>(g: &ArrayD<S>) -> ArrayD<S> {
    let c = g.shape()[0];
    ArrayD::from_shape_vec(
        IxDyn(&[c]),
        g.axis_iter(Axis(0))
            .map(|lane| lane.iter().cloned().sum())
            .collect(),
    )
    .unwrap()
}

fn axis0_norm<S: Scalar>(x: &ArrayD<S>, eps: S) -> ArrayD<S> {
    let inner_shape: Vec<usize> = x.shape()[1..].to_vec();
    let mut sq = ArrayD::<S>::from_elem(IxDyn(&inner_shape), eps);
    for lane in x.axis_iter(Axis(0)) {
        sq.zip_mut_with(&lane.to_owned(), |a, v| *a += *v * *v);
    }
    sq.mapv_inplace(|v| v.sqrt());
    sq
}
