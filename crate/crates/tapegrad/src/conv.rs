//! im2col-based 3D convolution kernels.
//!
//! Layouts: input `(C, D, H, W)`, weight `(O, C, kD, kH, kW)`, output
//! `(O, Do, Ho, Wo)`. 2D convolutions are expressed by the caller as depth-1
//! volumes with a depth-1 kernel. The column matrix is materialized in chunks
//! of whole output scan lines so peak memory stays bounded regardless of the
//! spatial size; the heavy lifting is a matrix product per chunk. The fill
//! and scatter loops precompute the in-bounds tap range per scan line so the
//! inner loop is a bounds-check-free strided copy.

use crate::Scalar;
use ndarray::{Array2, ArrayD, IxDyn};

/// Stride and (possibly asymmetric) zero padding of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: [usize; 3],
    pub pad_lo: [usize; 3],
    pub pad_hi: [usize; 3],
}

impl ConvGeom {
    pub fn isotropic(stride: usize, pad: usize) -> Self {
        ConvGeom {
            stride: [stride; 3],
            pad_lo: [pad; 3],
            pad_hi: [pad; 3],
        }
    }

    pub fn out_dims(&self, input: [usize; 3], kernel: [usize; 3]) -> [usize; 3] {
        let mut out = [0usize; 3];
        for i in 0..3 {
            let padded = input[i] + self.pad_lo[i] + self.pad_hi[i];
            assert!(
                padded >= kernel[i],
                "conv input {}+pad smaller than kernel {}",
                input[i],
                kernel[i]
            );
            out[i] = (padded - kernel[i]) / self.stride[i] + 1;
        }
        out
    }

    /// Output dims of the transposed convolution that inverts this geometry.
    pub fn transpose_out_dims(&self, input: [usize; 3], kernel: [usize; 3]) -> [usize; 3] {
        let mut out = [0usize; 3];
        for i in 0..3 {
            out[i] = (input[i] - 1) * self.stride[i] + kernel[i] - self.pad_lo[i] - self.pad_hi[i];
        }
        out
    }
}

// Chunk size target for the column matrix, in elements.
const COL_CHUNK_ELEMS: usize = 1 << 21;

struct Shapes {
    c: usize,
    din: [usize; 3],
    o: usize,
    k: [usize; 3],
    dout: [usize; 3],
    ck: usize,
}

fn shapes(x_dims: &[usize], w_dims: &[usize], geom: &ConvGeom) -> Shapes {
    assert_eq!(x_dims.len(), 4, "conv input must be (C,D,H,W)");
    assert_eq!(w_dims.len(), 5, "conv weight must be (O,C,kD,kH,kW)");
    assert_eq!(x_dims[0], w_dims[1], "conv channel mismatch");
    let din = [x_dims[1], x_dims[2], x_dims[3]];
    let k = [w_dims[2], w_dims[3], w_dims[4]];
    let dout = geom.out_dims(din, k);
    Shapes {
        c: x_dims[0],
        din,
        o: w_dims[0],
        k,
        dout,
        ck: w_dims[1] * k[0] * k[1] * k[2],
    }
}

/// In-bounds output range `[lo, hi)` along one axis for kernel offset `off`:
/// the positions `p` with `0 <= p*stride + off - pad < len`.
fn tap_range(out_len: usize, stride: usize, off: usize, pad: usize, len: usize) -> (usize, usize) {
    let lo = if off >= pad {
        0
    } else {
        (pad - off).div_ceil(stride)
    };
    let top = len + pad;
    if off >= top {
        return (0, 0);
    }
    let hi = ((top - 1 - off) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

/// One im2col pass over output scan lines `[line0, line1)`.
/// `forward`: col[row, pos] = x[tap] (col pre-zeroed).
/// Otherwise: x[tap] += col[row, pos] (scatter for the input gradient).
fn col_pass<S: Scalar, const FORWARD: bool>(
    sh: &Shapes,
    geom: &ConvGeom,
    line0: usize,
    line1: usize,
    x: &mut [S],
    col: &mut [S],
) {
    let ho = sh.dout[1];
    let wo = sh.dout[2];
    let n = (line1 - line0) * wo;
    let [sd, shh, sw] = geom.stride;
    let [pd, ph, pw] = geom.pad_lo;
    let [din_d, din_h, din_w] = sh.din;
    let mut row = 0usize;
    for c in 0..sh.c {
        for a in 0..sh.k[0] {
            for b in 0..sh.k[1] {
                for e in 0..sh.k[2] {
                    let (w_lo, w_hi) = tap_range(wo, sw, e, pw, din_w);
                    for line in line0..line1 {
                        let od = line / ho;
                        let oh = line % ho;
                        let di = (od * sd + a) as isize - pd as isize;
                        let hi = (oh * shh + b) as isize - ph as isize;
                        if di < 0
                            || di as usize >= din_d
                            || hi < 0
                            || hi as usize >= din_h
                            || w_lo >= w_hi
                        {
                            continue;
                        }
                        let src_base =
                            ((c * din_d + di as usize) * din_h + hi as usize) * din_w;
                        let dst_base = row * n + (line - line0) * wo;
                        if FORWARD {
                            if sw == 1 {
                                let wi0 = w_lo + e - pw;
                                col[dst_base + w_lo..dst_base + w_hi].copy_from_slice(
                                    &x[src_base + wi0..src_base + wi0 + (w_hi - w_lo)],
                                );
                            } else {
                                for ow in w_lo..w_hi {
                                    let wi = ow * sw + e - pw;
                                    col[dst_base + ow] = x[src_base + wi];
                                }
                            }
                        } else {
                            for ow in w_lo..w_hi {
                                let wi = ow * sw + e - pw;
                                x[src_base + wi] += col[dst_base + ow];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn chunk_lines(sh: &Shapes) -> usize {
    let wo = sh.dout[2];
    (COL_CHUNK_ELEMS / (sh.ck * wo).max(1)).max(1)
}

fn standard_vec<S: Scalar>(a: &ArrayD<S>) -> Vec<S> {
    if let Some(s) = a.as_slice() {
        s.to_vec()
    } else {
        a.iter().cloned().collect()
    }
}

/// y = conv(x, w), no bias.
pub fn conv_fwd<S: Scalar>(x: &ArrayD<S>, w: &ArrayD<S>, geom: &ConvGeom) -> ArrayD<S> {
    let sh = shapes(x.shape(), w.shape(), geom);
    let mut xs = standard_vec(x);
    let w_mat = w
        .view()
        .into_shape_with_order((sh.o, sh.ck))
        .expect("weight reshape")
        .to_owned();
    let n_lines = sh.dout[0] * sh.dout[1];
    let wo = sh.dout[2];
    let mut y = Array2::<S>::zeros((sh.o, n_lines * wo));
    let lines_per_chunk = chunk_lines(&sh);
    let mut line0 = 0usize;
    while line0 < n_lines {
        let line1 = (line0 + lines_per_chunk).min(n_lines);
        let n = (line1 - line0) * wo;
        let mut col = Array2::<S>::zeros((sh.ck, n));
        col_pass::<S, true>(
            &sh,
            geom,
            line0,
            line1,
            &mut xs,
            col.as_slice_mut().unwrap(),
        );
        let out = w_mat.dot(&col);
        y.slice_mut(ndarray::s![.., line0 * wo..line1 * wo])
            .assign(&out);
        line0 = line1;
    }
    y.into_shape_with_order(IxDyn(&[sh.o, sh.dout[0], sh.dout[1], sh.dout[2]]))
        .unwrap()
}

/// Gradient of `conv_fwd` with respect to its input, given `gy` and the
/// original input dims. Also the forward map of a transposed convolution.
pub fn conv_bwd_input<S: Scalar>(
    gy: &ArrayD<S>,
    w: &ArrayD<S>,
    geom: &ConvGeom,
    in_dims: [usize; 4],
) -> ArrayD<S> {
    let sh = shapes(&in_dims, w.shape(), geom);
    assert_eq!(
        gy.shape(),
        &[sh.o, sh.dout[0], sh.dout[1], sh.dout[2]],
        "conv_bwd_input gy shape"
    );
    let gys = standard_vec(gy);
    let w_mat = w
        .view()
        .into_shape_with_order((sh.o, sh.ck))
        .unwrap()
        .to_owned();
    let w_t = w_mat.t().to_owned();
    let n_lines = sh.dout[0] * sh.dout[1];
    let wo = sh.dout[2];
    let p_total = n_lines * wo;
    let mut gx = vec![S::zero(); in_dims.iter().product()];
    let lines_per_chunk = chunk_lines(&sh);
    let mut line0 = 0usize;
    while line0 < n_lines {
        let line1 = (line0 + lines_per_chunk).min(n_lines);
        let n = (line1 - line0) * wo;
        let mut g_chunk = Array2::<S>::zeros((sh.o, n));
        for o in 0..sh.o {
            g_chunk
                .row_mut(o)
                .as_slice_mut()
                .unwrap()
                .copy_from_slice(&gys[o * p_total + line0 * wo..o * p_total + line1 * wo]);
        }
        let mut colg = w_t.dot(&g_chunk);
        col_pass::<S, false>(
            &sh,
            geom,
            line0,
            line1,
            &mut gx,
            colg.as_slice_mut().unwrap(),
        );
        line0 = line1;
    }
    ArrayD::from_shape_vec(IxDyn(&in_dims), gx).unwrap()
}

/// Gradient of `conv_fwd` with respect to the weight.
pub fn conv_bwd_weight<S: Scalar>(
    gy: &ArrayD<S>,
    x: &ArrayD<S>,
    geom: &ConvGeom,
    kernel: [usize; 3],
) -> ArrayD<S> {
    let o = gy.shape()[0];
    let c = x.shape()[0];
    let w_dims = [o, c, kernel[0], kernel[1], kernel[2]];
    let sh = shapes(x.shape(), &w_dims, geom);
    assert_eq!(gy.shape(), &[sh.o, sh.dout[0], sh.dout[1], sh.dout[2]]);
    let mut xs = standard_vec(x);
    let gys = standard_vec(gy);
    let n_lines = sh.dout[0] * sh.dout[1];
    let wo = sh.dout[2];
    let p_total = n_lines * wo;
    let mut gw = Array2::<S>::zeros((sh.o, sh.ck));
    let lines_per_chunk = chunk_lines(&sh);
    let mut line0 = 0usize;
    while line0 < n_lines {
        let line1 = (line0 + lines_per_chunk).min(n_lines);
        let n = (line1 - line0) * wo;
        let mut col = Array2::<S>::zeros((sh.ck, n));
        col_pass::<S, true>(
            &sh,
            geom,
            line0,
            line1,
            &mut xs,
            col.as_slice_mut().unwrap(),
        );
        let mut g_chunk = Array2::<S>::zeros((sh.o, n));
        for oi in 0..sh.o {
            g_chunk
                .row_mut(oi)
                .as_slice_mut()
                .unwrap()
                .copy_from_slice(&gys[oi * p_total + line0 * wo..oi * p_total + line1 * wo]);
        }
        gw = gw + g_chunk.dot(&col.t());
        line0 = line1;
    }
    gw.into_shape_with_order(IxDyn(&w_dims)).unwrap()
}
