use midband_autodiff::{compare_gradients, grad_check, Real, Result, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const INSTANCES: u64 = 10;
const TOL_F64: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Projects `y` onto fixed pseudo-random weights so every output coordinate
/// contributes to the scalar under test.
fn project<T: Real>(tape: &mut Tape<T>, y: Var, seed: u64) -> Result<Var> {
    let w = Tensor::randn(tape.shape(y), 1.0, &mut rng(seed ^ 0x9e37));
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum_all(p)
}

fn check_unary<F>(name: &str, shape: &[usize], op: F)
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    for seed in 0..INSTANCES {
        let x = Tensor::<f64>::randn(shape, 1.0, &mut rng(seed));
        let report = grad_check(
            |tape, v| {
                let y = op(tape, v)?;
                project(tape, y, seed)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(
            report.passes(TOL_F64),
            "{name} seed {seed}: rel err {}",
            report.rel_err
        );
    }
}

/// Gradient with respect to the second operand, the first held constant.
fn check_second<F>(name: &str, lhs: &[usize], rhs: &[usize], op: F)
where
    F: Fn(&mut Tape<f64>, Var, Var) -> Result<Var>,
{
    for seed in 0..INSTANCES {
        let a = Tensor::<f64>::randn(lhs, 1.0, &mut rng(seed + 100));
        let b = Tensor::<f64>::randn(rhs, 1.0, &mut rng(seed + 200));
        let report = grad_check(
            |tape, v| {
                let c = tape.constant(a.clone());
                let y = op(tape, c, v)?;
                project(tape, y, seed)
            },
            &b,
            1e-6,
        )
        .unwrap();
        assert!(report.passes(TOL_F64), "{name} seed {seed}: {}", report.rel_err);
        let report = grad_check(
            |tape, v| {
                let c = tape.constant(b.clone());
                let y = op(tape, v, c)?;
                project(tape, y, seed)
            },
            &a,
            1e-6,
        )
        .unwrap();
        assert!(report.passes(TOL_F64), "{name} (lhs) seed {seed}: {}", report.rel_err);
    }
}

#[test]
fn elementwise_gradients() {
    check_second("add", &[3, 4], &[3, 4], |t, a, b| t.add(a, b));
    check_second("sub", &[3, 4], &[3, 4], |t, a, b| t.sub(a, b));
    check_second("mul", &[3, 4], &[3, 4], |t, a, b| t.mul(a, b));
    check_second("mul broadcast", &[2, 3, 4], &[4], |t, a, b| t.mul(a, b));
    check_second("sub broadcast", &[2, 3, 4], &[3, 4], |t, a, b| t.sub(a, b));
    check_unary("scale", &[3, 4], |t, x| t.scale(x, -1.7));
    check_unary("relu", &[3, 4], |t, x| t.relu(x));
}

#[test]
fn matrix_product_gradients() {
    check_second("matmul", &[5, 7], &[7, 3], |t, a, b| t.matmul(a, b));
    check_second("matmul batched rows", &[2, 5, 7], &[7, 3], |t, a, b| t.matmul(a, b));
    check_second("bmm", &[2, 3, 4], &[2, 4, 5], |t, a, b| t.bmm(a, b, false));
    check_second("bmm transposed", &[2, 3, 4], &[2, 5, 4], |t, a, b| t.bmm(a, b, true));
}

#[test]
fn convolution_gradients_f64() {
    for (stride, pad) in [((1, 1), (1, 1)), ((2, 2), (1, 1)), ((1, 2), (1, 1)), ((2, 1), (0, 0))] {
        check_second("conv2d", &[2, 3, 5, 5], &[4, 3, 3, 3], move |t, x, k| {
            t.conv2d(x, k, None, stride, pad)
        });
    }
    check_second("conv2d bias", &[2, 4, 1, 1], &[3], |t, x, b| {
        let k = t.constant(Tensor::randn(&[3, 4, 1, 1], 1.0, &mut rng(7)));
        let y = t.conv2d(x, k, Some(b), (1, 1), (0, 0))?;
        Ok(y)
    });
    check_second("conv_transpose2d", &[2, 3, 2, 3], &[3, 2, 2, 2], |t, x, k| {
        t.conv_transpose2d(x, k, None, (2, 2), (0, 0))
    });
    check_second("conv_transpose2d overlap", &[1, 2, 3, 3], &[2, 3, 3, 3], |t, x, k| {
        t.conv_transpose2d(x, k, None, (2, 2), (1, 1))
    });
    check_second("conv_transpose2d bias", &[1, 2, 2, 2], &[3], |t, x, b| {
        let k = t.constant(Tensor::randn(&[2, 3, 1, 2], 1.0, &mut rng(8)));
        t.conv_transpose2d(x, k, Some(b), (1, 2), (0, 0))
    });
}

#[test]
fn conv2d_gradient_tolerances_by_precision() {
    let x64 = Tensor::<f64>::randn(&[2, 3, 5, 5], 1.0, &mut rng(1));
    let k64 = Tensor::<f64>::randn(&[2, 3, 3, 3], 1.0, &mut rng(2));
    let k = k64.clone();
    let r64 = grad_check(
        move |t, x| {
            let k = t.constant(k.clone());
            let y = t.conv2d(x, k, None, (1, 1), (1, 1))?;
            project(t, y, 3)
        },
        &x64,
        1e-5,
    )
    .unwrap();
    assert!(r64.rel_err < 1e-5, "f64 conv2d rel err {}", r64.rel_err);

    let x32 = x64.cast::<f32>();
    let k32 = k64.cast::<f32>();
    let r32 = grad_check(
        move |t, x| {
            let k = t.constant(k32.clone());
            let y = t.conv2d(x, k, None, (1, 1), (1, 1))?;
            project(t, y, 3)
        },
        &x32,
        1e-2,
    )
    .unwrap();
    assert!(r32.rel_err < 1e-3, "f32 conv2d rel err {}", r32.rel_err);
}

#[test]
fn pooling_gradients() {
    // continuous random inputs are tie-free almost surely
    check_unary("max_pool2d", &[2, 2, 4, 5], |t, x| t.max_pool2d(x));
    check_unary("adaptive_avg_pool2d", &[2, 2, 5, 7], |t, x| t.adaptive_avg_pool2d(x, (2, 3)));
    check_unary("adaptive_avg_pool2d upsample", &[1, 1, 2, 3], |t, x| {
        t.adaptive_avg_pool2d(x, (3, 4))
    });
}

#[test]
fn normalization_gradients() {
    check_unary("softmax last", &[3, 5], |t, x| t.softmax(x, 1));
    check_unary("softmax middle", &[2, 4, 3], |t, x| t.softmax(x, 1));
    check_unary("layer_norm x", &[3, 4, 2], |t, x| {
        let g = t.constant(Tensor::randn(&[4], 1.0, &mut rng(5)));
        let b = t.constant(Tensor::randn(&[4], 1.0, &mut rng(6)));
        t.layer_norm(x, 1, g, b)
    });
    check_second("layer_norm gain", &[3, 4, 2], &[4], |t, x, g| {
        let b = t.constant(Tensor::zeros(&[4]));
        t.layer_norm(x, 1, g, b)
    });
    check_second("layer_norm bias", &[3, 5], &[5], |t, x, b| {
        let g = t.constant(Tensor::full(&[5], 1.3));
        t.layer_norm(x, 1, g, b)
    });
}

#[test]
fn structural_gradients() {
    check_second("concat", &[2, 3, 2], &[2, 1, 2], |t, a, b| t.concat(&[a, b], 1));
    check_unary("reshape", &[2, 6], |t, x| t.reshape(x, &[3, 4]));
    check_unary("permute", &[2, 3, 4], |t, x| t.permute(x, &[1, 2, 0]));
    check_unary("sum_trailing", &[2, 3, 4], |t, x| t.sum_trailing(x, 1));
    check_unary("mean_all", &[2, 3], |t, x| {
        let m = t.mean_all(x)?;
        let sq = t.mul(m, m)?;
        t.reshape(sq, &[1])
    });
}

#[test]
fn composite_attention_gradient() {
    // softmax(Q K^T / sqrt(d)) V with shared input
    check_unary("attention", &[2, 3, 4], |t, x| {
        let wq = t.constant(Tensor::randn(&[4, 4], 0.5, &mut rng(11)));
        let q = t.matmul(x, wq)?;
        let s = t.bmm(q, x, true)?;
        let s = t.scale(s, 0.5)?;
        let p = t.softmax(s, 2)?;
        t.bmm(p, x, false)
    });
}

#[test]
fn grad_check_sanity() {
    let x = Tensor::<f64>::randn(&[4, 3], 1.0, &mut rng(21));
    let sum = grad_check(|t, v| t.sum_all(v), &x, 1e-4).unwrap();
    assert!(sum.rel_err < 1e-10, "sum: {}", sum.rel_err);
    let sq = grad_check(
        |t, v| {
            let p = t.mul(v, v)?;
            t.sum_all(p)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(sq.rel_err < 1e-7, "square norm: {}", sq.rel_err);
    assert_eq!(sq.checked, 12);
}

#[test]
fn grad_check_flags_a_wrong_gradient() {
    let x = Tensor::<f64>::randn(&[6], 1.0, &mut rng(22));
    let value = |p: &Tensor<f64>| -> Result<f64> { Ok(p.sq_norm_f64()) };
    // claims d/dx ||x||^2 = x instead of 2x
    let report = compare_gradients(value, &x, &x, 1e-5, None).unwrap();
    assert!(report.rel_err > 1e-1, "negative control: {}", report.rel_err);
}

#[test]
fn square_norm_gradient_is_twice_input() {
    let x = Tensor::<f64>::from_vec(vec![3], vec![0.5, -1.5, 2.0]).unwrap();
    let mut tape = Tape::new();
    let v = tape.param(x);
    let p = tape.mul(v, v).unwrap();
    let l = tape.sum_all(p).unwrap();
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(v).unwrap().data(), &[1.0, -3.0, 4.0]);
}

#[test]
fn one_by_one_conv_equals_matmul() {
    let x = Tensor::<f64>::randn(&[2, 3, 4, 5], 1.0, &mut rng(31));
    let k = Tensor::<f64>::randn(&[6, 3, 1, 1], 1.0, &mut rng(32));
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let kv = tape.constant(k.clone());
    let conv = tape.conv2d(xv, kv, None, (1, 1), (0, 0)).unwrap();
    // [b, c, h, w] -> [b, h, w, c] x [c, c_out] -> [b, c_out, h, w]
    let xp = tape.permute(xv, &[0, 2, 3, 1]).unwrap();
    let km = tape.reshape(kv, &[6, 3]).unwrap();
    let kt = tape.permute(km, &[1, 0]).unwrap();
    let mm = tape.matmul(xp, kt).unwrap();
    let back = tape.permute(mm, &[0, 3, 1, 2]).unwrap();
    for (a, b) in tape.value(conv).data().iter().zip(tape.value(back).data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn transposed_conv_restores_decoder_widths() {
    let mut tape = Tape::<f32>::new();
    let mut x = tape.constant(Tensor::zeros(&[1, 4, 1, 72]));
    let mut dims = Vec::new();
    for stride in [(1, 2), (2, 2), (2, 2)] {
        let k = tape.constant(Tensor::zeros(&[4, 4, stride.0, stride.1]));
        x = tape.conv_transpose2d(x, k, None, stride, (0, 0)).unwrap();
        dims.push((tape.shape(x)[2], tape.shape(x)[3]));
    }
    assert_eq!(dims, vec![(1, 144), (2, 288), (4, 576)]);
}

#[test]
fn replay_is_bit_identical() {
    let run = || {
        let mut r = rng(77);
        let x = Tensor::<f32>::randn(&[2, 3, 6, 8], 1.0, &mut r);
        let k = Tensor::<f32>::randn(&[4, 3, 3, 3], 0.3, &mut r);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let kv = tape.param(k);
        let y = tape.conv2d(xv, kv, None, (2, 2), (1, 1)).unwrap();
        let y = tape.relu(y).unwrap();
        let y = tape.softmax(y, 3).unwrap();
        let l = tape.sum_all(y).unwrap();
        tape.backward(l).unwrap();
        (tape.value(y).clone(), tape.grad(kv).unwrap().clone())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a.data(), b.data());
    assert_eq!(ga.data(), gb.data());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(
        values in prop::collection::vec(-30.0f32..30.0, 12),
    ) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![3, 4], values).unwrap());
        let y = tape.softmax(x, 1).unwrap();
        for row in tape.value(y).data().chunks(4) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            let s: f64 = row.iter().map(|&p| p as f64).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn conv_and_transpose_are_adjoint(
        seed in 0u64..1000,
        stride in 1usize..3,
        pad in 0usize..2,
        out_h in 1usize..4,
        out_w in 1usize..4,
    ) {
        let (kh, kw) = (3, 3);
        let h = (out_h - 1) * stride + kh - 2 * pad;
        let w = (out_w - 1) * stride + kw - 2 * pad;
        let mut r = rng(seed);
        let x = Tensor::<f64>::randn(&[2, 3, h, w], 1.0, &mut r);
        let y = Tensor::<f64>::randn(&[2, 4, out_h, out_w], 1.0, &mut r);
        let k = Tensor::<f64>::randn(&[4, 3, kh, kw], 1.0, &mut r);
        let mut tape = Tape::new();
        let (xv, yv, kv) = (tape.constant(x.clone()), tape.constant(y.clone()), tape.constant(k));
        let cx = tape.conv2d(xv, kv, None, (stride, stride), (pad, pad)).unwrap();
        let ty = tape.conv_transpose2d(yv, kv, None, (stride, stride), (pad, pad)).unwrap();
        prop_assert_eq!(tape.shape(ty), x.shape());
        let lhs: f64 = tape.value(cx).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(tape.value(ty).data()).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-4 * lhs.abs().max(rhs.abs()).max(1e-12));
    }
}
