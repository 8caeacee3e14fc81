//! Forward convolution against a naive loop reference.

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tapegrad::{ConvGeom, Tape};

fn naive_conv3d(
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    b: &ArrayD<f64>,
    geom: &ConvGeom,
) -> ArrayD<f64> {
    let (c, d, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, kd, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3], w.shape()[4]);
    let out = geom.out_dims([d, h, wd], [kd, kh, kw]);
    let mut y = ArrayD::<f64>::zeros(IxDyn(&[o, out[0], out[1], out[2]]));
    for oc in 0..o {
        for od in 0..out[0] {
            for oh in 0..out[1] {
                for ow in 0..out[2] {
                    let mut acc = b[[oc]];
                    for ic in 0..c {
                        for a in 0..kd {
                            for bb in 0..kh {
                                for e in 0..kw {
                                    let di = (od * geom.stride[0] + a) as isize
                                        - geom.pad_lo[0] as isize;
                                    let hi = (oh * geom.stride[1] + bb) as isize
                                        - geom.pad_lo[1] as isize;
                                    let wi = (ow * geom.stride[2] + e) as isize
                                        - geom.pad_lo[2] as isize;
                                    if di < 0
                                        || hi < 0
                                        || wi < 0
                                        || di as usize >= d
                                        || hi as usize >= h
                                        || wi as usize >= wd
                                    {
                                        continue;
                                    }
                                    acc += x[[ic, di as usize, hi as usize, wi as usize]]
                                        * w[[oc, ic, a, bb, e]];
                                }
                            }
                        }
                    }
                    y[[oc, od, oh, ow]] = acc;
                }
            }
        }
    }
    y
}

#[test]
fn matches_naive_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for (stride, pad) in [(1usize, 1usize), (2, 1), (2, 2), (1, 0)] {
        let x = ArrayD::from_shape_fn(IxDyn(&[3, 4, 6, 5]), |_| rng.gen_range(-1.0..1.0));
        let w = ArrayD::from_shape_fn(IxDyn(&[2, 3, 3, 3, 3]), |_| rng.gen_range(-1.0..1.0));
        let b = ArrayD::from_shape_fn(IxDyn(&[2]), |_| rng.gen_range(-1.0..1.0));
        let geom = ConvGeom::isotropic(stride, pad);
        let expected = naive_conv3d(&x, &w, &b, &geom);
        let mut t = Tape::new();
        let xi = t.constant(x);
        let wi = t.constant(w);
        let bi = t.constant(b);
        let y = t.conv3d(xi, wi, Some(bi), geom);
        let got = t.value(y);
        assert_eq!(got.shape(), expected.shape());
        for (a, e) in got.iter().zip(expected.iter()) {
            assert!((a - e).abs() < 1e-10, "mismatch {a} vs {e}");
        }
    }
}

#[test]
fn transpose_doubles_spatial_size() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(ArrayD::zeros(IxDyn(&[4, 2, 3, 5])));
    let w = t.constant(ArrayD::zeros(IxDyn(&[4, 2, 4, 4, 4])));
    let y = t.conv3d_transpose(x, w, None, ConvGeom::isotropic(2, 1));
    assert_eq!(t.value(y).shape(), &[2, 4, 6, 10]);
}

#[test]
fn transpose_is_adjoint_of_conv() {
    // <conv(x), y> == <x, conv_transpose(y)> for matching geometries.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let geom = ConvGeom::isotropic(2, 1);
    let x = ArrayD::from_shape_fn(IxDyn(&[2, 4, 4, 4]), |_| rng.gen_range(-1.0..1.0));
    let w = ArrayD::from_shape_fn(IxDyn(&[3, 2, 4, 4, 4]), |_| rng.gen_range(-1.0..1.0));
    let y = ArrayD::from_shape_fn(IxDyn(&[3, 2, 2, 2]), |_| rng.gen_range(-1.0..1.0));
    let mut t = Tape::new();
    let xi = t.constant(x.clone());
    let wi = t.constant(w.clone());
    let yi = t.constant(y.clone());
    let cx = t.conv3d(xi, wi, None, geom);
    let ty = t.conv3d_transpose(yi, wi, None, geom);
    let lhs: f64 = t.value(cx).iter().zip(y.iter()).map(|(a, b)| a * b).sum();
    let rhs: f64 = x.iter().zip(t.value(ty).iter()).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
}
