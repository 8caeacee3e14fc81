//! Trainable layer primitives shared by every network in the crate.
//!
//! Each layer owns its parameter arrays and knows how to do three things:
//! initialize deterministically from an RNG, enumerate its parameters by name
//! (`visit` / `visit_mut`), and `bind` itself onto an autodiff [`Tape`],
//! yielding a lightweight bound mirror whose `apply` builds the forward graph.
//! A [`Binder`] records the bound leaf ids in visit order, so gradients read
//! back after `backward` line up one-to-one with the flattened parameter list.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tapegrad::{ConvGeom, NodeId, Scalar, Tape};

/// Negative slope of the leaky rectifier used throughout.
pub const LEAK: f64 = 0.2;

/// Records parameter leaves pushed onto a tape, in visit order.
pub struct Binder<'t, S: Scalar> {
    pub tape: &'t mut Tape<S>,
    pub ids: Vec<NodeId>,
    trainable: bool,
}

impl<'t, S: Scalar> Binder<'t, S> {
    pub fn new(tape: &'t mut Tape<S>, trainable: bool) -> Self {
        Binder {
            tape,
            ids: Vec::new(),
            trainable,
        }
    }

    pub fn leaf(&mut self, a: &ArrayD<S>) -> NodeId {
        let id = if self.trainable {
            self.tape.var(a.clone())
        } else {
            self.tape.constant(a.clone())
        };
        self.ids.push(id);
        id
    }
}

/// Uniform init on (−limit, limit) with limit = 1/sqrt(fan_in). Values are
/// drawn in f64 and narrowed, so both precisions see the same draw sequence.
fn fan_in_uniform<S: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<S> {
    let limit = 1.0 / (fan_in.max(1) as f64).sqrt();
    ArrayD::from_shape_simple_fn(IxDyn(shape), || S::lit(rng.gen_range(-limit..limit)))
}

fn zeros<S: Scalar>(shape: &[usize]) -> ArrayD<S> {
    ArrayD::zeros(IxDyn(shape))
}

// ---------------------------------------------------------------------------
// 2D convolution
// ---------------------------------------------------------------------------

pub struct Conv2d<S: Scalar> {
    pub w: ArrayD<S>,
    pub b: ArrayD<S>,
    pub stride: usize,
    pub pad_lo: usize,
    pub pad_hi: usize,
}

impl<S: Scalar> Conv2d<S> {
    /// Odd-kernel convolution with symmetric "same" padding.
    pub fn new(rng: &mut ChaCha8Rng, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        assert!(k % 2 == 1, "use with_pads for even kernels");
        Self::with_pads(rng, cin, cout, k, stride, (k - 1) / 2, (k - 1) / 2)
    }

    pub fn with_pads(
        rng: &mut ChaCha8Rng,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad_lo: usize,
        pad_hi: usize,
    ) -> Self {
        Conv2d {
            w: fan_in_uniform(rng, &[cout, cin, k, k], cin * k * k),
            b: zeros(&[cout]),
            stride,
            pad_lo,
            pad_hi,
        }
    }

    /// All-zero weights and biases (residual heads that start as identities).
    pub fn zeroed(cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        Conv2d {
            w: zeros(&[cout, cin, k, k]),
            b: zeros(&[cout]),
            stride,
            pad_lo: (k - 1) / 2,
            pad_hi: (k - 1) / 2,
        }
    }

    pub fn visit(&self, name: &str, f: &mut dyn FnMut(&str, &ArrayD<S>)) {
        f(&format!("{name}.w"), &self.w);
        f(&format!("{name}.b"), &self.b);
    }

    pub fn visit_mut(&mut self, name: &str, f: &mut dyn FnMut(&str, &mut ArrayD<S>)) {
        f(&format!("{name}.w"), &mut self.w);
        f(&format!("{name}.b"), &mut self.b);
    }

    pub fn bind(&self, b: &mut Binder<S>) -> BoundConv2d {
        BoundConv2d {
            w: b.leaf(&self.w),
            b: b.leaf(&self.b),
            stride: self.stride,
            pad_lo: self.pad_lo,
            pad_hi: self.pad_hi,
        }
    }
}

#[derive(Clone, Copy)]
pub struct BoundConv2d {
    pub w: NodeId,
    pub b: NodeId,
    pub stride: usize,
    pub pad_lo: usize,
    pub pad_hi: usize,
}

impl BoundConv2d {
    pub fn apply<S: Scalar>(&self, t: &mut Tape<S>, x: NodeId) -> NodeId {
        t.conv2d(x, self.w, Some(self.b), self.stride, self.pad_lo, self.pad_hi)
    }
}

// ---------------------------------------------------------------------------
// 3D convolution and its transpose
// ---------------------------------------------------------------------------

pub struct Conv3d<S: Scalar> {
    pub w: ArrayD<S>,
    pub b: ArrayD<S>,
    pub geom: ConvGeom,
}

impl<S: Scalar> Conv3d<S> {
    pub fn new(
        rng: &mut ChaCha8Rng,
        cin: usize,
        cout: usize,
        k: [usize; 3],
        geom: ConvGeom,
    ) -> Self {
        Conv3d {
            w: fan_in_uniform(rng, &[cout, cin, k[0], k[1], k[2]], cin * k[0] * k[1] * k[2]),
            b: zeros(&[cout]),
            geom,
        }
    }

    pub fn visit(&self, name: &str, f: &mut dyn FnMut(&str, &ArrayD<S>)) {
        f(&format!("{name}.w"), &self.w);
        f(&format!("{name}.b"), &self.b);
    }

    pub fn visit_mut(&mut self, name: &str, f: &mut dyn FnMut(&str, &mut ArrayD<S>)) {
        f(&format!("{name}.w"), &mut self.w);
        f(&format!("{name}.b"), &mut self.b);
    }

    pub fn bind(&self, b: &mut Binder<S>) -> BoundConv3d {
        BoundConv3d {
            w: b.leaf(&self.w),
            b: b.leaf(&self.b),
            geom: self.geom,
        }
    }
}

#[derive(Clone, Copy)]
pub struct BoundConv3d {
    pub w: NodeId,
    pub b: NodeId,
    pub geom: ConvGeom,
}

impl BoundConv3d {
    pub fn apply<S: Scalar>(&self, t: &mut Tape<S>, x: NodeId) -> NodeId {
        t.conv3d(x, self.w, Some(self.b), self.geom)
    }
}

/// Transposed 3D convolution; weight layout `(Cin, Cout, kD, kH, kW)`.
pub struct ConvT3d<S: Scalar> {
    pub w: ArrayD<S>,
    pub b: ArrayD<S>,
    pub geom: ConvGeom,
}

impl<S: Scalar> ConvT3d<S> {
    pub fn new(
        rng: &mut ChaCha8Rng,
        cin: usize,
        cout: usize,
        k: [usize; 3],
        geom: ConvGeom,
    ) -> Self {
        ConvT3d {
            w: fan_in_uniform(rng, &[cin, cout, k[0], k[1], k[2]], cin * k[0] * k[1] * k[2]),
            b: zeros(&[cout]),
            geom,
        }
    }

    pub fn visit(&self, name: &str, f: &mut dyn FnMut(&str, &ArrayD<S>)) {
        f(&format!("{name}.w"), &self.w);
        f(&format!("{name}.b"), &self.b);
    }

    pub fn visit_mut(&mut self, name: &str, f: &mut dyn FnMut(&str, &mut ArrayD<S>)) {
        f(&format!("{name}.w"), &mut self.w);
        f(&format!("{name}.b"), &mut self.b);
    }

    pub fn bind(&self, b: &mut Binder<S>) -> BoundConvT3d {
        BoundConvT3d {
            w: b.leaf(&self.w),
            b: b.leaf(&self.b),
            geom: self.geom,
        }
    }
}

#[derive(Clone, Copy)]
pub struct BoundConvT3d {
    pub w: NodeId,
    pub b: NodeId,
    pub geom: ConvGeom,
}

impl BoundConvT3d {
    pub fn apply<S: Scalar>(&self, t: &mut Tape<S>, x: NodeId) -> NodeId {
        t.conv3d_transpose(x, self.w, Some(self.b), self.geom)
    }
}

// ---------------------------------------------------------------------------
// Dense (fully connected) layer on 1-D inputs
// ---------------------------------------------------------------------------

pub struct Dense<S: Scalar> {
    pub w: ArrayD<S>,
    pub b: ArrayD<S>,
}

impl<S: Scalar> Dense<S> {
    pub fn new(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Self {
        Dense {
            w: fan_in_uniform(rng, &[fan_out, fan_in], fan_in),
            b: zeros(&[fan_out]),
        }
    }

    pub fn zeroed(fan_in: usize, fan_out: usize) -> Self {
        Dense {
            w: zeros(&[fan_out, fan_in]),
            b: zeros(&[fan_out]),
        }
    }

    pub fn visit(&self, name: &str, f: &mut dyn FnMut(&str, &ArrayD<S>)) {
        f(&format!("{name}.w"), &self.w);
        f(&format!("{name}.b"), &self.b);
    }

    pub fn visit_mut(&mut self, name: &str, f: &mut dyn FnMut(&str, &mut ArrayD<S>)) {
        f(&format!("{name}.w"), &mut self.w);
        f(&format!("{name}.b"), &mut self.b);
    }

    pub fn bind(&self, b: &mut Binder<S>) -> BoundDense {
        BoundDense {
            w: b.leaf(&self.w),
            b: b.leaf(&self.b),
        }
    }
}

#[derive(Clone, Copy)]
pub struct BoundDense {
    pub w: NodeId,
    pub b: NodeId,
}

impl BoundDense {
    pub fn apply<S: Scalar>(&self, t: &mut Tape<S>, x: NodeId) -> NodeId {
        t.linear(x, self.w, self.b)
    }
}

thread_local! {
    static KINK_SIGNS: std::cell::Cell<Option<u64>> = const { std::cell::Cell::new(None) };
}

/// Start recording the sign pattern at every kinked (piecewise-smooth)
/// operation on this thread: rectifier inputs and absolute-value arguments.
/// Used by the finite-difference gradient check to detect evaluation pairs
/// that straddle a kink, where a central difference is not a valid
/// derivative estimate.
pub fn kink_signs_start() {
    KINK_SIGNS.with(|h| h.set(Some(0xcbf2_9ce4_8422_2325)));
}

/// Stop recording and return the accumulated sign-pattern hash.
pub fn kink_signs_take() -> Option<u64> {
    KINK_SIGNS.with(|h| h.take())
}

/// Whether a kink-sign recording is active on this thread. Call sites use
/// this to skip assembling the sign stream during ordinary training.
pub fn kink_signs_active() -> bool {
    KINK_SIGNS.with(|h| h.get().is_some())
}

/// Fold a stream of kink-side indicators into the recording, if one is
/// active. No-op (and near-free) otherwise.
pub fn record_kink_signs(bits: impl Iterator<Item = bool>) {
    KINK_SIGNS.with(|cell| {
        if let Some(mut hash) = cell.get() {
            for b in bits {
                hash = (hash ^ (b as u64)).wrapping_mul(0x0000_0100_0000_01b3);
            }
            cell.set(Some(hash));
        }
    });
}

/// Leaky rectifier with the crate-wide slope.
pub fn lrelu<S: Scalar>(t: &mut Tape<S>, x: NodeId) -> NodeId {
    if kink_signs_active() {
        let bits: Vec<bool> = t.value(x).iter().map(|v| v.to_f64_lossy() >= 0.0).collect();
        record_kink_signs(bits.into_iter());
    }
    t.leaky_relu(x, S::lit(LEAK))
}
