use std::rc::Rc;

use proptest::prelude::*;

use super::gradcheck::op_error;
use super::*;
use crate::rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn grad_error<F>(inputs: Vec<Tensor>, build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> crate::Result<Var>,
{
    op_error(inputs, build).unwrap()
}

fn randn(seed: u64, shape: &[usize]) -> Tensor {
    rng::normal_tensor(&mut rng::stream(seed, 0), shape, 1.0)
}

const GRAD_TOL: f64 = 1e-4;

// ---- matmul ---------------------------------------------------------------

#[test]
fn matmul_identity_and_hand_example() {
    let mut tape = Tape::new();
    let i2 = tape.constant(Tensor::eye(2));
    let b = tape.constant(t(&[2, 1], &[5.0, 6.0]));
    let out = tape.matmul(i2, b).unwrap();
    assert_eq!(tape.value(out).data(), &[5.0, 6.0]);

    let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let out = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(out).shape(), &[2, 1]);
    assert_eq!(tape.value(out).data(), &[17.0, 39.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros([2, 3]));
    let b = tape.constant(Tensor::zeros([2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, crate::Error::Dimension(_)));
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn matmul_gradients_match_finite_differences() {
    let e = grad_error(vec![randn(1, &[3, 3]), randn(2, &[3, 3])], |tp, v| {
        tp.matmul(v[0], v[1])
    });
    assert!(e < 1e-6, "relative error {e}");
    // batched with a shared right operand, and the transposed variant
    let e = grad_error(vec![randn(3, &[2, 3, 4]), randn(4, &[4, 2])], |tp, v| {
        tp.matmul(v[0], v[1])
    });
    assert!(e < 1e-6, "relative error {e}");
    let e = grad_error(vec![randn(5, &[2, 3, 4]), randn(6, &[2, 5, 4])], |tp, v| {
        tp.matmul_nt(v[0], v[1])
    });
    assert!(e < 1e-6, "relative error {e}");
}

#[test]
fn matmul_by_identity_is_bitwise() {
    let a = randn(11, &[5, 5]);
    let mut tape = Tape::new();
    let av = tape.constant(a.clone());
    let i = tape.constant(Tensor::eye(5));
    let out = tape.matmul(av, i).unwrap();
    assert_eq!(tape.value(out), &a);
}

// ---- softmax ----------------------------------------------------------------

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
    let y = tape.softmax(x, 0).unwrap();
    for v in tape.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = tape.constant(t(&[2], &[0.0, 3f64.ln()]));
    let y = tape.softmax(x, 0).unwrap();
    let d = tape.value(y).data();
    assert!((d[0] - 0.25).abs() < 1e-15 && (d[1] - 0.75).abs() < 1e-15);
}

#[test]
fn softmax_rejects_non_finite_input() {
    let mut tape = Tape::new();
    // bypass Tensor::new validation the way a corrupted upstream op would
    let x = tape.constant(Tensor::from_parts(vec![2], vec![0.0, f64::INFINITY]));
    assert!(matches!(tape.softmax(x, 0), Err(crate::Error::Numeric(_))));
}

#[test]
fn softmax_gradient_on_inner_axis() {
    let e = grad_error(vec![randn(7, &[3, 4, 2])], |tp, v| tp.softmax(v[0], 1));
    assert!(e < GRAD_TOL, "relative error {e}");
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(data in prop::collection::vec(-50.0f64..50.0, 12), axis in 0usize..2) {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3, 4], &data));
        let y = tape.softmax(x, axis).unwrap();
        let yv = tape.value(y);
        let (outer, len) = if axis == 1 { (3, 4) } else { (4, 3) };
        for o in 0..outer {
            let s: f64 = (0..len)
                .map(|j| if axis == 1 { yv.at(&[o, j]) } else { yv.at(&[j, o]) })
                .sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
        prop_assert!(yv.data().iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn softmax_is_shift_invariant(data in prop::collection::vec(-20.0f64..20.0, 6), c in -100.0f64..100.0) {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[6], &data));
        let xs = tape.add_scalar(x, c);
        let a = tape.softmax(x, 0).unwrap();
        let b = tape.softmax(xs, 0).unwrap();
        prop_assert!(tape.value(a).max_abs_diff(tape.value(b)) < 1e-12);
    }
}

// ---- pooling / norm ---------------------------------------------------------

#[test]
fn average_pool_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full([3, 2, 4], 0.7));
    let y = average_pool_spatial(&mut tape, x).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 4]);
    assert!(tape.value(y).data().iter().all(|&v| (v - 0.7).abs() < 1e-15));

    let x = tape.constant(t(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0]));
    let y = average_pool_spatial(&mut tape, x).unwrap();
    assert_eq!(tape.value(y).data(), &[2.5]);
}

#[test]
fn average_pool_gradient_is_uniform_share() {
    let mut tape = Tape::new();
    let x = tape.param(randn(8, &[3, 5, 2]));
    let y = average_pool_spatial(&mut tape, x).unwrap();
    let s = tape.sum_all(y);
    let g = tape.backward(s).unwrap();
    for &v in g.get(x).unwrap().data() {
        assert!((v - 1.0 / 15.0).abs() < 1e-15);
    }
    let e = grad_error(vec![randn(9, &[3, 5, 2])], |tp, v| average_pool_spatial(tp, v[0]));
    assert!(e < GRAD_TOL, "relative error {e}");
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::new();
    let gamma = tape.constant(Tensor::full([3], 1.0));
    let beta = tape.constant(Tensor::zeros([3]));
    let x = tape.constant(Tensor::full([2, 3], 4.2));
    let y = tape.layer_norm(x, gamma, beta).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    let gamma = tape.constant(Tensor::full([2], 1.0));
    let beta = tape.constant(Tensor::zeros([2]));
    let x = tape.constant(t(&[2], &[1.0, -1.0]));
    let y = tape.layer_norm(x, gamma, beta).unwrap();
    let d = tape.value(y).data();
    assert!((d[0] - 1.0).abs() < 1e-4 && (d[1] + 1.0).abs() < 1e-4);
}

#[test]
fn layer_norm_gradients() {
    let mut gamma = randn(21, &[5]);
    gamma.data_mut().iter_mut().for_each(|v| *v += 1.0);
    let e = grad_error(vec![randn(20, &[3, 5]), gamma, randn(22, &[5])], |tp, v| {
        tp.layer_norm(v[0], v[1], v[2])
    });
    assert!(e < 1e-5, "relative error {e}");
}

// ---- remaining differentiable ops ------------------------------------------

#[test]
fn elementwise_and_broadcast_gradients() {
    let e = grad_error(vec![randn(30, &[2, 3, 4]), randn(31, &[4])], |tp, v| tp.add(v[0], v[1]));
    assert!(e < GRAD_TOL, "add {e}");
    let e = grad_error(vec![randn(32, &[2, 3, 4]), randn(33, &[2, 1, 4])], |tp, v| {
        tp.mul(v[0], v[1])
    });
    assert!(e < GRAD_TOL, "mul {e}");
    let e = grad_error(vec![randn(34, &[3, 4]), randn(35, &[3, 4])], |tp, v| tp.sub(v[0], v[1]));
    assert!(e < GRAD_TOL, "sub {e}");
    let e = grad_error(vec![randn(36, &[3, 4])], |tp, v| Ok(tp.gelu(v[0])));
    assert!(e < GRAD_TOL, "gelu {e}");
    let e = grad_error(vec![randn(37, &[3, 4])], |tp, v| Ok(tp.sigmoid(v[0])));
    assert!(e < GRAD_TOL, "sigmoid {e}");
    let e = grad_error(vec![randn(38, &[3, 4])], |tp, v| Ok(tp.scale(v[0], -2.5)));
    assert!(e < GRAD_TOL, "scale {e}");
    let e = grad_error(vec![randn(39, &[3, 4, 2])], |tp, v| tp.mean_axis(v[0], 1));
    assert!(e < GRAD_TOL, "mean_axis {e}");
    let e = grad_error(vec![randn(40, &[3, 4]), randn(41, &[3, 4])], |tp, v| tp.mse(v[0], v[1]));
    assert!(e < GRAD_TOL, "mse {e}");
}

#[test]
fn data_movement_gradients() {
    let e = grad_error(vec![randn(50, &[2, 3, 4])], |tp, v| tp.permute(v[0], &[2, 0, 1]));
    assert!(e < GRAD_TOL, "permute {e}");
    let e = grad_error(vec![randn(51, &[2, 3, 4])], |tp, v| tp.narrow(v[0], 2, 1, 2));
    assert!(e < GRAD_TOL, "narrow {e}");
    let e = grad_error(vec![randn(52, &[2, 3]), randn(53, &[2, 2])], |tp, v| {
        tp.concat(&[v[0], v[1]], 1)
    });
    assert!(e < GRAD_TOL, "concat {e}");
    // repeated indices accumulate
    let e = grad_error(vec![randn(54, &[4])], |tp, v| {
        tp.gather(v[0], Rc::new(vec![0, 0, 3, 1, 3, 3]), &[2, 3])
    });
    assert!(e < GRAD_TOL, "gather {e}");
}

#[test]
fn conv2d_gradients() {
    let e = grad_error(
        vec![randn(60, &[4, 5, 2]), randn(61, &[3, 3, 2, 3]), randn(62, &[3])],
        |tp, v| tp.conv2d(v[0], v[1], v[2]),
    );
    assert!(e < GRAD_TOL, "conv2d {e}");
}

#[test]
fn conv2d_identity_kernel_and_mac_count() {
    let x = randn(63, &[3, 4, 2]);
    let mut w = Tensor::zeros([3, 3, 2, 2]);
    w.set(&[1, 1, 0, 0], 1.0);
    w.set(&[1, 1, 1, 1], 1.0);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w);
    let bv = tape.constant(Tensor::zeros([2]));
    let y = tape.conv2d(xv, wv, bv).unwrap();
    assert_eq!(tape.value(y), &x);
    assert_eq!(tape.macs(), 3 * 4 * 9 * 2 * 2);
}

// ---- backward contract ------------------------------------------------------

#[test]
fn backward_linear_and_quadratic_cases() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
    let s = tape.sum_all(x);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

    let mut tape = Tape::new();
    let x = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum_all(sq);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn backward_usage_errors() {
    let mut tape = Tape::new();
    let dummy = {
        let mut other = Tape::new();
        other.constant(Tensor::scalar(0.0))
    };
    assert!(matches!(tape.backward(dummy), Err(crate::Error::Usage(_))));

    let x = tape.param(t(&[2], &[1.0, 2.0]));
    assert!(matches!(tape.backward(x), Err(crate::Error::Usage(_))));

    let s = tape.sum_all(x);
    tape.backward(s).unwrap();
    assert!(matches!(tape.backward(s), Err(crate::Error::Usage(_))));
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut tape = Tape::new();
        let a = tape.constant(randn(70, &[4, 6, 5]));
        let b = tape.constant(randn(71, &[5, 7]));
        let c = tape.matmul(a, b).unwrap();
        let d = tape.softmax(c, 2).unwrap();
        let e = tape.mean_axis(d, 1).unwrap();
        tape.value(e).checksum()
    };
    assert_eq!(run(), run());
}
