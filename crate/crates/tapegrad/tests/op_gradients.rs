//! Per-operator gradient verification against central finite differences.

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tapegrad::check::{central_difference, relative_error};
use tapegrad::{ConvGeom, NodeId, Tape};

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
}

/// Check d(loss)/d(inputs[vary]) where `build` assembles the graph from
/// leaves and returns a scalar root.
fn check_grad(
    inputs: &[ArrayD<f64>],
    vary: usize,
    build: impl Fn(&mut Tape<f64>, &[NodeId]) -> NodeId,
    tol: f64,
) {
    let run = |arrays: &[ArrayD<f64>]| -> (f64, Option<ArrayD<f64>>) {
        let mut t = Tape::new();
        let ids: Vec<NodeId> = arrays.iter().map(|a| t.var(a.clone())).collect();
        let root = build(&mut t, &ids);
        let loss = t.scalar_value(root);
        let grads = t.backward(root);
        (loss, grads.get(ids[vary]).cloned())
    };
    let (_, grad) = run(inputs);
    let grad = grad.expect("gradient missing for varied input");
    let n = inputs[vary].len();
    for flat in 0..n {
        let mut f = |a: &ArrayD<f64>| {
            let mut arrays = inputs.to_vec();
            arrays[vary] = a.clone();
            run(&arrays).0
        };
        let num = central_difference(&mut f, &inputs[vary], flat, 1e-5);
        let ana = grad.as_slice().unwrap()[flat];
        let err = relative_error(ana, num, 1e-6);
        assert!(
            err <= tol,
            "coord {flat}: analytic {ana} vs numeric {num} (rel err {err})"
        );
    }
}

#[test]
fn pointwise_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = randn(&mut rng, &[3, 4]);
    check_grad(
        &[x],
        0,
        |t, ids| {
            let a = t.leaky_relu(ids[0], 0.2);
            let b = t.sigmoid(a);
            let c = t.tanh(b);
            let d = t.mul(c, c);
            t.mean_all(d)
        },
        1e-5,
    );
}

#[test]
fn add_sub_mul_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = randn(&mut rng, &[2, 3]);
    let b = randn(&mut rng, &[2, 3]);
    for vary in 0..2 {
        check_grad(
            &[a.clone(), b.clone()],
            vary,
            |t, ids| {
                let s = t.add(ids[0], ids[1]);
                let d = t.sub(s, ids[1]);
                let m = t.mul(d, ids[0]);
                let sc = t.scale(m, 0.7);
                let sh = t.add_scalar(sc, 0.3);
                t.mean_all(sh)
            },
            1e-5,
        );
    }
}

#[test]
fn abs_l1() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = randn(&mut rng, &[5]);
    let b = randn(&mut rng, &[5]);
    check_grad(
        &[a, b],
        0,
        |t, ids| t.mean_abs_diff(ids[0], ids[1]),
        1e-5,
    );
}

#[test]
fn conv3d_all_parents() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = randn(&mut rng, &[2, 3, 5, 5]);
    let w = randn(&mut rng, &[3, 2, 3, 3, 3]);
    let b = randn(&mut rng, &[3]);
    for vary in 0..3 {
        check_grad(
            &[x.clone(), w.clone(), b.clone()],
            vary,
            |t, ids| {
                let y = t.conv3d(ids[0], ids[1], Some(ids[2]), ConvGeom::isotropic(2, 1));
                let sq = t.mul(y, y);
                t.mean_all(sq)
            },
            1e-4,
        );
    }
}

#[test]
fn conv3d_transpose_all_parents() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = randn(&mut rng, &[3, 2, 3, 3]);
    let w = randn(&mut rng, &[3, 2, 4, 4, 4]);
    let b = randn(&mut rng, &[2]);
    for vary in 0..3 {
        check_grad(
            &[x.clone(), w.clone(), b.clone()],
            vary,
            |t, ids| {
                let y = t.conv3d_transpose(ids[0], ids[1], Some(ids[2]), ConvGeom::isotropic(2, 1));
                let sq = t.mul(y, y);
                t.mean_all(sq)
            },
            1e-4,
        );
    }
}

#[test]
fn conv2d_asymmetric_pad() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = randn(&mut rng, &[2, 6, 6]);
    let w = randn(&mut rng, &[3, 2, 4, 4]);
    let b = randn(&mut rng, &[3]);
    for vary in 0..3 {
        check_grad(
            &[x.clone(), w.clone(), b.clone()],
            vary,
            |t, ids| {
                let y = t.conv2d(ids[0], ids[1], Some(ids[2]), 1, 1, 2);
                let sq = t.mul(y, y);
                t.mean_all(sq)
            },
            1e-4,
        );
    }
}

#[test]
fn linear_and_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = randn(&mut rng, &[4, 3]);
    let w = randn(&mut rng, &[2, 3]);
    let b = randn(&mut rng, &[2]);
    for vary in 0..3 {
        check_grad(
            &[x.clone(), w.clone(), b.clone()],
            vary,
            |t, ids| {
                let row = t.slice_row(ids[0], 2);
                let y = t.linear(row, ids[1], ids[2]);
                let sq = t.mul(y, y);
                t.mean_all(sq)
            },
            1e-5,
        );
    }
}

#[test]
fn resize_concat_reshape() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let a = randn(&mut rng, &[2, 2, 3, 3]);
    let b = randn(&mut rng, &[2, 4, 6, 6]);
    for vary in 0..2 {
        check_grad(
            &[a.clone(), b.clone()],
            vary,
            |t, ids| {
                let up = t.resize_nearest(ids[0], [4, 6, 6]);
                let cat = t.concat(&[up, ids[1]], 0);
                let flat = t.reshape(cat, &[4 * 4 * 6 * 6]);
                let sq = t.mul(flat, flat);
                t.mean_all(sq)
            },
            1e-5,
        );
    }
}

#[test]
fn modulation_and_normalization() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = randn(&mut rng, &[3, 4, 4]);
    let sc = randn(&mut rng, &[3]);
    let sh = randn(&mut rng, &[3]);
    for vary in 0..3 {
        check_grad(
            &[x.clone(), sc.clone(), sh.clone()],
            vary,
            |t, ids| {
                let m = t.scale_shift_channels(ids[0], ids[1], ids[2]);
                let n = t.l2_normalize_axis0(m, 1e-8);
                let sq = t.mul(n, n);
                t.mean_all(sq)
            },
            1e-4,
        );
    }
}

#[test]
fn embedding_cosine() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let a = randn(&mut rng, &[3, 4, 4]);
    let b = randn(&mut rng, &[3, 4, 4]);
    for vary in 0..2 {
        check_grad(
            &[a.clone(), b.clone()],
            vary,
            |t, ids| {
                let ea = t.mean_per_channel(ids[0]);
                let eb = t.mean_per_channel(ids[1]);
                let na = t.l2_normalize_axis0(ea, 1e-8);
                let nb = t.l2_normalize_axis0(eb, 1e-8);
                let d = t.dot_vec(na, nb);
                t.scale(d, -1.0)
            },
            1e-4,
        );
    }
}

#[test]
fn constants_block_gradients() {
    let mut t = Tape::<f64>::new();
    let c = t.constant(ArrayD::from_elem(IxDyn(&[2, 2]), 1.5));
    let v = t.var(ArrayD::from_elem(IxDyn(&[2, 2]), 2.0));
    let m = t.mul(c, v);
    let root = t.mean_all(m);
    let grads = t.backward(root);
    assert!(grads.get(c).is_none());
    assert!(grads.get(v).is_some());
}
