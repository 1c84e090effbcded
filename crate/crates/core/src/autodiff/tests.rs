use super::*;
use crate::error::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mat(rows: usize, cols: usize, data: &[f64]) -> Tensor {
    Tensor::matrix(rows, cols, data.to_vec()).unwrap()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-scale..scale))
}

#[test]
fn matmul_identity_and_hand_case() {
    let mut tape = Tape::new();
    let eye = tape.constant(mat(2, 2, &[1.0, 0.0, 0.0, 1.0]));
    let b = tape.constant(mat(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let out = tape.matmul(eye, b).unwrap();
    assert_eq!(tape.value(out), tape.value(b));

    let a = tape.constant(mat(2, 2, &[1.0, 2.0, 3.0, 4.0]));
    let ones = tape.constant(mat(2, 1, &[1.0, 1.0]));
    let out = tape.matmul(a, ones).unwrap();
    assert_eq!(tape.value(out).data(), &[3.0, 7.0]);
}

#[test]
fn matmul_mismatch_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(vec![2, 3]));
    let b = tape.constant(Tensor::zeros(vec![4, 2]));
    match tape.matmul(a, b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![4, 2]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn softmax_rows_examples() {
    let mut tape = Tape::new();
    let m = tape.constant(mat(3, 2, &[0.0, 0.0, 1f64.ln(), 3f64.ln(), 1000.0, 0.0]));
    let s = tape.softmax_rows(m).unwrap();
    let v = tape.value(s).data();
    assert_eq!(&v[0..2], &[0.5, 0.5]);
    assert!((v[2] - 0.25).abs() < 1e-15 && (v[3] - 0.75).abs() < 1e-15);
    assert!((v[4] - 1.0).abs() < 1e-15 && v[5] < 1e-300 && v[5].is_finite());
}

#[test]
fn conv2d_examples() {
    let mut tape = Tape::new();
    // 1×1 identity channel map
    let x = Tensor::from_fn(vec![3, 4, 2], |i| i as f64 * 0.37 - 1.1);
    let xv = tape.constant(x.clone());
    let eye = tape.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let y = tape.conv2d(xv, eye, 1, 0).unwrap();
    assert_eq!(tape.value(y), &x);

    let ones = tape.constant(Tensor::full(vec![3, 3, 1], 1.0));
    let k = tape.constant(Tensor::full(vec![3, 3, 1, 1], 1.0));
    let y = tape.conv2d(ones, k, 1, 0).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 1, 1]);
    assert_eq!(tape.value(y).item(), 9.0);

    let big = tape.constant(Tensor::zeros(vec![5, 5, 1]));
    let y = tape.conv2d(big, k, 2, 0).unwrap();
    assert_eq!(tape.value(y).shape(), &[2, 2, 1]);

    let odd = tape.constant(Tensor::zeros(vec![6, 6, 1]));
    assert!(matches!(tape.conv2d(odd, k, 2, 0), Err(Error::Dimension { .. })));
}

#[test]
fn elementwise_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![0.0, -2.0, 0.0]));
    let s = tape.sigmoid(x);
    assert_eq!(tape.value(s).data()[0], 0.5);
    let r = tape.relu(x);
    assert_eq!(tape.value(r).data()[1], 0.0);
    let l = tape.log(x);
    assert!(tape.value(l).all_finite());
    assert_eq!(tape.value(l).data()[0], LOG_EPS.ln());

    let extreme = tape.constant(Tensor::vector(vec![-800.0, 800.0, 36.0]));
    let s = tape.sigmoid(extreme);
    let v = tape.value(s).data();
    assert!(v.iter().all(|&y| y > 0.0 && y < 1.0), "{v:?}");

    let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
    let b = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    assert!(tape.add(a, b).is_err());
    assert!(tape.mul(a, b).is_err());
}

#[test]
fn pooling_examples() {
    let mut tape = Tape::new();
    let m = tape.constant(Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let avg = tape.global_avg_pool(m).unwrap();
    assert_eq!(tape.value(avg).data(), &[2.5]);

    let c = tape.constant(Tensor::full(vec![3, 2, 4], 0.7));
    let avg = tape.global_avg_pool(c).unwrap();
    assert!(tape.value(avg).data().iter().all(|&v| (v - 0.7).abs() < 1e-15));

    let single = tape.constant(Tensor::new(vec![1, 1, 3], vec![4.0, -1.0, 2.0]).unwrap());
    let avg = tape.global_avg_pool(single).unwrap();
    assert_eq!(tape.value(avg).data(), &[4.0, -1.0, 2.0]);
    let max = tape.global_max_pool(single).unwrap();
    assert_eq!(tape.value(max).data(), &[4.0, -1.0, 2.0]);

    let p = tape.constant(Tensor::new(vec![2, 2, 1], vec![0.1, 0.7, 0.1, 0.1]).unwrap());
    let max = tape.global_max_pool(p).unwrap();
    assert_eq!(tape.value(max).data(), &[0.7]);
}

#[test]
fn max_pool_tie_routes_gradient_to_first_cell() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full(vec![2, 2, 1], 0.25));
    let m = tape.global_max_pool(x).unwrap();
    let loss = tape.sum(m);
    tape.backward(loss).unwrap();
    assert_eq!(tape.value(m).item(), 0.25);
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let w = tape.leaf(Tensor::from_fn(vec![2, 3], |i| i as f64));
    let loss = tape.sum(w);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(w).unwrap().data(), &[1.0; 6]);

    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0));
    let sq = tape.mul(x, x).unwrap();
    tape.backward(sq).unwrap();
    assert_eq!(tape.grad(x).unwrap().item(), 6.0);
    // a second sweep accumulates
    tape.backward(sq).unwrap();
    assert_eq!(tape.grad(x).unwrap().item(), 12.0);
    tape.zero_grad();
    assert!(tape.grad(x).is_none());

    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(2.0));
    let frozen = tape.detach(x);
    let c = tape.constant(Tensor::scalar(5.0));
    let y = tape.mul(frozen, c).unwrap();
    let z = tape.add(y, x).unwrap();
    tape.backward(z).unwrap();
    assert!(tape.grad(frozen).is_none());
    assert!(tape.grad(c).is_none());
    assert_eq!(tape.grad(x).unwrap().item(), 1.0);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
}

// Chain-rule micro-cases with gradients derived by hand.

#[test]
fn chain_rule_sigmoid_of_affine() {
    // L = sigmoid(w·x + b), x = 2, w = 0.5, b = -1 → z = 0, dL/dw = σ'(0)·x = 0.5
    let mut tape = Tape::new();
    let w = tape.leaf(Tensor::scalar(0.5));
    let b = tape.leaf(Tensor::scalar(-1.0));
    let x = tape.constant(Tensor::scalar(2.0));
    let wx = tape.mul(w, x).unwrap();
    let z = tape.add(wx, b).unwrap();
    let l = tape.sigmoid(z);
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(w).unwrap().item(), 0.5);
    assert_eq!(tape.grad(b).unwrap().item(), 0.25);
}

#[test]
fn chain_rule_log_of_relu_sum() {
    // L = ln(relu(a) + relu(b)), a = 3, b = -1 → dL/da = 1/3, dL/db = 0
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::scalar(3.0));
    let b = tape.leaf(Tensor::scalar(-1.0));
    let ra = tape.relu(a);
    let rb = tape.relu(b);
    let s = tape.add(ra, rb).unwrap();
    let l = tape.log(s);
    tape.backward(l).unwrap();
    assert!((tape.grad(a).unwrap().item() - 1.0 / 3.0).abs() < 1e-16);
    assert_eq!(tape.grad(b).unwrap().item(), 0.0);
}

#[test]
fn chain_rule_cross_entropy_of_matmul() {
    // logits = x·W with x = [1, 2], W = 0 → uniform softmax over 2 classes, target 0.
    // dL/dlogits = [-0.5, 0.5], dL/dW = xᵀ·dlogits = [[-0.5, 0.5], [-1, 1]]
    let mut tape = Tape::new();
    let x = tape.constant(mat(1, 2, &[1.0, 2.0]));
    let w = tape.leaf(Tensor::zeros(vec![2, 2]));
    let logits = tape.matmul(x, w).unwrap();
    let l = tape.cross_entropy_rows(logits, &[0]).unwrap();
    tape.backward(l).unwrap();
    assert!((tape.value(l).item() - 2f64.ln()).abs() < 1e-15);
    assert_eq!(tape.grad(w).unwrap().data(), &[-0.5, 0.5, -1.0, 1.0]);
}

#[test]
fn stack_and_mean() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::scalar(1.0));
    let b = tape.leaf(Tensor::scalar(3.0));
    let s = tape.stack(&[a, b]).unwrap();
    assert_eq!(tape.shape(s), &[2]);
    let m = tape.mean(s);
    assert_eq!(tape.value(m).item(), 2.0);
    tape.backward(m).unwrap();
    assert_eq!(tape.grad(a).unwrap().item(), 0.5);
}

#[test]
fn finite_diff_check_quadratic_form() {
    let q = mat(3, 3, &[2.0, 0.5, 0.0, 0.5, 1.0, -0.3, 0.0, -0.3, 3.0]);
    let x = mat(3, 1, &[0.4, -1.2, 0.9]);
    let report = finite_diff_check(
        |tape, p| {
            let qv = tape.constant(q.clone());
            let qx = tape.matmul(qv, p[0])?;
            let xt = tape.transpose(p[0])?;
            let form = tape.matmul(xt, qx)?;
            Ok(tape.sum(form))
        },
        &[x],
        DEFAULT_STEP,
    )
    .unwrap();
    assert_eq!(report.checked, 3);
    assert!(report.max_rel_error <= 1e-7, "{report:?}");
}

#[test]
fn finite_diff_check_excludes_tie_flips() {
    let report = finite_diff_check(
        |tape, p| {
            let m = tape.global_max_pool(p[0])?;
            Ok(tape.sum(m))
        },
        &[Tensor::full(vec![2, 2, 1], 0.3)],
        DEFAULT_STEP,
    )
    .unwrap();
    // raising any later cell moves the argmax away from the first cell
    assert!(report.excluded >= 3, "{report:?}");
}

#[test]
fn corrupted_gradient_is_reported() {
    let report = check_gradients(
        |tape, p| {
            let sq = tape.mul(p[0], p[0])?;
            Ok(tape.sum(sq))
        },
        &[Tensor::vector(vec![1.0, 2.0])],
        CheckOptions {
            corrupt: true,
            ..CheckOptions::default()
        },
    )
    .unwrap();
    assert!(!report.passes(1e-5));
    assert_eq!(report.worst, Some((0, 0)));
}

/// Every differentiable op, checked at 100 random points.
#[test]
fn every_op_passes_finite_differences() {
    type Build = fn(&mut Tape, &[Var]) -> crate::error::Result<Var>;
    let cases: Vec<(&str, Vec<Vec<usize>>, Build)> = vec![
        ("matmul", vec![vec![2, 3], vec![3, 2]], |t, p| {
            let m = t.matmul(p[0], p[1])?;
            let s = t.sigmoid(m);
            Ok(t.sum(s))
        }),
        ("transpose+mul", vec![vec![2, 3], vec![3, 2]], |t, p| {
            let tr = t.transpose(p[0])?;
            let m = t.mul(tr, p[1])?;
            let s = t.sigmoid(m);
            Ok(t.sum(s))
        }),
        ("add/sub/scale", vec![vec![4], vec![4]], |t, p| {
            let a = t.add(p[0], p[1])?;
            let b = t.sub(a, p[1])?;
            let c = t.mul(b, a)?;
            let d = t.scale(c, -0.7);
            let e = t.sigmoid(d);
            Ok(t.mean(e))
        }),
        ("scale_by", vec![vec![3], vec![1]], |t, p| {
            let s = t.scale_by(p[0], p[1])?;
            let e = t.sigmoid(s);
            Ok(t.sum(e))
        }),
        ("add_bias+relu", vec![vec![2, 2, 3], vec![3]], |t, p| {
            let a = t.add_bias(p[0], p[1])?;
            let r = t.relu(a);
            let s = t.sigmoid(r);
            Ok(t.sum(s))
        }),
        ("log", vec![vec![3]], |t, p| {
            let s = t.sigmoid(p[0]);
            let l = t.log(s);
            Ok(t.sum(l))
        }),
        ("softmax_rows", vec![vec![3, 4], vec![3, 4]], |t, p| {
            let s = t.softmax_rows(p[0])?;
            let m = t.mul(s, p[1])?;
            Ok(t.sum(m))
        }),
        ("conv2d", vec![vec![5, 5, 2], vec![3, 3, 2, 3]], |t, p| {
            let c = t.conv2d(p[0], p[1], 2, 1)?;
            let s = t.sigmoid(c);
            Ok(t.sum(s))
        }),
        ("avg_pool", vec![vec![3, 2, 2]], |t, p| {
            let s = t.sigmoid(p[0]);
            let a = t.global_avg_pool(s)?;
            let sq = t.mul(a, a)?;
            Ok(t.sum(sq))
        }),
        ("max_pool", vec![vec![3, 3, 2]], |t, p| {
            let m = t.global_max_pool(p[0])?;
            let s = t.sigmoid(m);
            Ok(t.sum(s))
        }),
        ("normalize_rows", vec![vec![2, 3], vec![2, 3]], |t, p| {
            let n = t.normalize_rows(p[0])?;
            let m = t.mul(n, p[1])?;
            Ok(t.sum(m))
        }),
        ("cross_entropy_rows", vec![vec![2, 4]], |t, p| {
            t.cross_entropy_rows(p[0], &[1, 3])
        }),
        ("bce", vec![vec![2, 3]], |t, p| {
            let s = t.sigmoid(p[0]);
            let target = Tensor::from_fn(vec![2, 3], |i| (i as f64 * 0.31) % 1.0);
            t.bce(s, &target)
        }),
        ("stack", vec![vec![2], vec![2]], |t, p| {
            let s = t.stack(&[p[0], p[1]])?;
            let r = t.reshape(s, &[4])?;
            let q = t.sigmoid(r);
            let sq = t.mul(q, r)?;
            Ok(t.sum(sq))
        }),
    ];

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (name, shapes, build) in cases {
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let params: Vec<Tensor> = shapes.iter().map(|s| random_tensor(&mut rng, s, 2.0)).collect();
            let report = finite_diff_check(build, &params, DEFAULT_STEP).unwrap();
            worst = worst.max(report.max_rel_error);
        }
        assert!(worst <= 1e-5, "{name}: worst relative error {worst:e}");
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(values in prop::collection::vec(-50.0f64..50.0, 12)) {
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::matrix(3, 4, values).unwrap());
        let s = tape.softmax_rows(m).unwrap();
        for r in 0..3 {
            let total: f64 = tape.value(s).row(r).iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn conv_identity_kernel_is_exact(values in prop::collection::vec(-10.0f64..10.0, 4 * 3 * 3)) {
        let x = Tensor::new(vec![4, 3, 3], values).unwrap();
        let kernel = Tensor::from_fn(vec![1, 1, 3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let kv = tape.constant(kernel);
        let y = tape.conv2d(xv, kv, 1, 0).unwrap();
        prop_assert_eq!(tape.value(y), &x);
    }
}

#[test]
fn relu_kink_is_excluded() {
    let x = Tensor::vector(vec![5e-7, 1.0, -1.0]);
    let report = finite_diff_check(
        |t, p| {
            let r = t.relu(p[0]);
            Ok(t.sum(r))
        },
        &[x],
        DEFAULT_STEP,
    )
    .unwrap();
    assert_eq!((report.checked, report.excluded), (2, 1));
    assert!(report.max_rel_error < 1e-9, "{report:?}");

    let mut plain = Tape::new();
    let a = plain.constant(Tensor::vector(vec![1.0, -1.0]));
    plain.relu(a);
    assert!(plain.selections().is_empty());
}
