use proptest::prelude::*;

use super::*;

fn row(v: &[f64]) -> Array {
    Array::row(v.to_vec())
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn matmul_identity_and_hand_product() {
    let mut t = Tape::new();
    let i2 = t.constant(Array::identity(2));
    let m = t.constant(Array::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let p = t.matmul(i2, m).unwrap();
    assert_eq!(t.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = t.constant(row(&[1.0, 2.0]));
    let b = t.constant(Array::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
    let p = t.matmul(a, b).unwrap();
    assert_eq!(t.value(p).data(), &[11.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut t = Tape::new();
    let a = t.constant(Array::zeros(2, 3));
    let b = t.constant(Array::zeros(2, 3));
    let err = t.matmul(a, b).unwrap_err();
    assert_eq!(
        err,
        DiffError::Shape {
            op: "matmul",
            left: (2, 3),
            right: (2, 3)
        }
    );
    assert!(err.to_string().contains("(2, 3)"));
}

#[test]
fn matmul_backward_matches_finite_differences() {
    let a = Array::from_rows(&[vec![0.3, -1.2, 0.7], vec![1.5, 0.2, -0.4]]).unwrap();
    let b = Array::from_rows(&[vec![0.5, -0.1], vec![1.1, 0.9], vec![-0.6, 0.4]]).unwrap();
    let report = check_gradients(
        |t: &mut Tape, p: &[Var]| {
            let m = t.matmul(p[0], p[1])?;
            t.sum(m)
        },
        &[a, b.clone()],
        1e-5,
        1e-6,
        Selection::All,
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.worst());
    // d sum(a·b) / d a[i][k] = Σ_j b[k][j]
    for e in report.entries.iter().filter(|e| e.param == 0) {
        let k = e.index % 3;
        let expected: f64 = b.row_slice(k).iter().sum();
        assert!(close(e.analytic, expected, 1e-12));
    }
}

#[test]
fn elementwise_fixed_points() {
    let mut t = Tape::new();
    let z = t.param(Array::scalar(0.0));
    let s = t.sigmoid(z);
    let th = t.tanh(z);
    assert_eq!(t.value(s).item(), Some(0.5));
    assert_eq!(t.value(th).item(), Some(0.0));
    t.backward(s).unwrap();
    assert!(close(t.grad(z).unwrap().item().unwrap(), 0.25, 1e-15));

    let report = check_gradients(
        |t: &mut Tape, p: &[Var]| Ok::<_, DiffError>(t.sigmoid(p[0])),
        &[Array::scalar(0.0)],
        1e-5,
        1e-6,
        Selection::All,
    )
    .unwrap();
    assert!(close(report.entries[0].numeric, 0.25, 1e-9));
}

#[test]
fn log_rejects_non_positive() {
    let mut t = Tape::new();
    let a = t.constant(row(&[0.5, 0.0]));
    assert!(matches!(t.log(a), Err(DiffError::Domain { op: "log", .. })));
    let b = t.constant(row(&[-1.0]));
    assert!(t.log(b).is_err());
}

#[test]
fn softmax_examples() {
    let mut t = Tape::new();
    let u = t.constant(row(&[0.0, 0.0, 0.0]));
    let su = t.softmax(u).unwrap();
    for &p in t.value(su).data() {
        assert!(close(p, 1.0 / 3.0, 1e-15));
    }

    let big = t.constant(row(&[1000.0, 0.0]));
    let sb = t.softmax(big).unwrap();
    let v = t.value(sb).data();
    assert!(v.iter().all(|x| x.is_finite()));
    assert!(close(v[0], 1.0, 1e-12) && v[1] < 1e-300);

    // direct formula e^k / Σ e^j, no max shift
    let denom = 1f64.exp() + 2f64.exp() + 3f64.exp();
    let expected = [1f64.exp() / denom, 2f64.exp() / denom, 3f64.exp() / denom];
    let l = t.constant(row(&[1.0, 2.0, 3.0]));
    let sl = t.softmax(l).unwrap();
    for (a, b) in t.value(sl).data().iter().zip(expected) {
        assert!(close(*a, b, 1e-15));
    }
    assert!(close(expected[0], 0.090_030_573_170_380_46, 1e-15));

    let bad = t.constant(row(&[f64::NAN, 0.0]));
    assert_eq!(t.softmax(bad), Err(DiffError::NonFinite { op: "softmax" }));
}

#[test]
fn reductions() {
    let mut t = Tape::new();
    let a = t.param(row(&[2.0, 4.0]));
    let m = t.mean(a).unwrap();
    assert_eq!(t.value(m).item(), Some(3.0));
    t.backward(m).unwrap();
    assert_eq!(t.grad(a).unwrap().data(), &[0.5, 0.5]);

    let e = t.constant(Array::zeros(1, 0));
    assert_eq!(t.sum(e), Err(DiffError::Empty { op: "sum" }));
    assert_eq!(t.mean(e), Err(DiffError::Empty { op: "mean" }));
}

#[test]
fn backward_constant_and_sum() {
    let mut t = Tape::new();
    let w = t.param(Array::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap());
    let c = t.constant(Array::scalar(4.2));
    t.backward(c).unwrap();
    assert!(t.grad(w).is_none());

    let s = t.sum(w).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.grad(w).unwrap().data(), &[1.0; 4]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut t = Tape::new();
    let w = t.param(row(&[1.0, 2.0]));
    assert_eq!(t.backward(w), Err(DiffError::NotScalar { shape: (1, 2) }));
}

#[test]
fn repeated_backward_accumulates_until_zero_grad() {
    let mut t = Tape::new();
    let w = t.param(row(&[1.0, 2.0]));
    let sq = t.mul(w, w).unwrap();
    let s = t.sum(sq).unwrap();
    t.backward(s).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.grad(w).unwrap().data(), &[4.0, 8.0]);
    t.zero_grad();
    assert_eq!(t.grad(w).unwrap().data(), &[0.0, 0.0]);
}

#[test]
fn fan_out_accumulates_both_paths() {
    // y = sigmoid(x) + x·x  →  dy/dx = σ(x)(1−σ(x)) + 2x
    let x0 = 0.7;
    let mut t = Tape::new();
    let x = t.param(Array::scalar(x0));
    let s = t.sigmoid(x);
    let sq = t.mul(x, x).unwrap();
    let y = t.add(s, sq).unwrap();
    t.backward(y).unwrap();
    let sig = 1.0 / (1.0 + (-x0).exp());
    let expected = sig * (1.0 - sig) + 2.0 * x0;
    assert!(close(t.grad(x).unwrap().item().unwrap(), expected, 1e-14));
}

#[test]
fn quadratic_gradcheck_is_tight() {
    let report = check_gradients(
        |t: &mut Tape, p: &[Var]| t.mul(p[0], p[0]),
        &[Array::scalar(3.0)],
        1e-4,
        1e-6,
        Selection::All,
    )
    .unwrap();
    let e = &report.entries[0];
    assert_eq!(e.analytic, 6.0);
    assert!(e.rel_error < 1e-6, "{e:?}");
}

#[test]
fn zero_function_reports_zero_error() {
    let report = check_gradients(
        |t: &mut Tape, p: &[Var]| Ok::<_, DiffError>(t.scale(p[0], 0.0)),
        &[Array::scalar(1.3)],
        1e-4,
        1e-6,
        Selection::All,
    )
    .unwrap();
    let e = &report.entries[0];
    assert_eq!((e.analytic, e.numeric, e.rel_error), (0.0, 0.0, 0.0));
}

#[test]
fn sampled_selection_is_deterministic_and_bounded() {
    let p = Array::from_rows(&[vec![0.1, 0.2, 0.3], vec![0.4, 0.5, 0.6]]).unwrap();
    let f = |t: &mut Tape, v: &[Var]| {
        let s = t.tanh(v[0]);
        t.sum(s)
    };
    let sel = Selection::Sample { count: 4, seed: 9 };
    let r1 = check_gradients(f, &[p.clone()], 1e-4, 1e-3, sel).unwrap();
    let r2 = check_gradients(f, &[p], 1e-4, 1e-3, sel).unwrap();
    assert_eq!(r1.entries, r2.entries);
    assert_eq!(r1.entries.len(), 4);
}

#[test]
fn layer_norm_constant_row_is_zero() {
    let mut t = Tape::new();
    let x = t.constant(row(&[2.5; 4]));
    let g = t.constant(Array::ones(1, 4));
    let o = t.constant(Array::zeros(1, 4));
    let y = t.layer_norm(x, g, o).unwrap();
    assert!(t.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn slice_and_gather_route_gradients() {
    let mut t = Tape::new();
    let x = t.param(Array::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap());
    let mid = t.slice_cols(x, 1, 2).unwrap();
    assert_eq!(t.value(mid).data(), &[2.0, 3.0, 5.0, 6.0]);
    let picked = t.gather_cols(x, &[2, 0]).unwrap();
    assert_eq!(t.value(picked).data(), &[3.0, 4.0]);
    let a = t.sum(mid).unwrap();
    let b = t.sum(picked).unwrap();
    let total = t.add(a, b).unwrap();
    t.backward(total).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[0.0, 1.0, 2.0, 1.0, 1.0, 1.0]);
    assert!(t.gather_cols(x, &[3, 0]).is_err());
    assert!(t.slice_cols(x, 2, 2).is_err());
}

fn entries(rows: usize, cols: usize) -> impl Strategy<Value = Array> {
    prop::collection::vec(-2.0f64..2.0, rows * cols)
        .prop_map(move |d| Array::new(rows, cols, d).unwrap())
}

fn fd_check<F>(f: F, params: &[Array])
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, DiffError>,
{
    let r = check_gradients(f, params, 1e-4, 1e-3, Selection::All).unwrap();
    assert!(r.passed(), "worst {:?}", r.worst());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn primitive_gradients_match_finite_differences(
        a in entries(3, 4),
        b in entries(3, 4),
        w in entries(4, 2),
        bias in entries(1, 4),
        gain in entries(1, 4),
    ) {
        // Weighted sums keep each check sensitive to every entry.
        let weights = Array::new(3, 4, (0..12).map(|i| 0.3 + 0.1 * i as f64).collect()).unwrap();
        let weighted = move |t: &mut Tape, v: Var| -> Result<Var, DiffError> {
            let wv = t.constant(weights.clone());
            let m = t.mul(v, wv)?;
            t.sum(m)
        };
        fd_check(|t, p| { let x = t.add(p[0], p[1])?; weighted(t, x) }, &[a.clone(), b.clone()]);
        fd_check(|t, p| { let x = t.sub(p[0], p[1])?; weighted(t, x) }, &[a.clone(), b.clone()]);
        fd_check(|t, p| { let x = t.mul(p[0], p[1])?; weighted(t, x) }, &[a.clone(), b.clone()]);
        fd_check(|t, p| { let x = t.sigmoid(p[0]); weighted(t, x) }, &[a.clone()]);
        fd_check(|t, p| { let x = t.tanh(p[0]); weighted(t, x) }, &[a.clone()]);
        fd_check(|t, p| { let x = t.neg(p[0]); weighted(t, x) }, &[a.clone()]);
        fd_check(|t, p| { let x = t.scale(p[0], -1.7); weighted(t, x) }, &[a.clone()]);
        fd_check(|t, p| { let x = t.one_minus(p[0]); weighted(t, x) }, &[a.clone()]);
        fd_check(|t, p| {
            let s = t.sigmoid(p[0]);
            let x = t.log(s)?;
            weighted(t, x)
        }, &[a.clone()]);
        fd_check(|t, p| { let x = t.softmax(p[0])?; weighted(t, x) }, &[a.clone()]);
        fd_check(|t, p| { let x = t.add_row(p[0], p[1])?; weighted(t, x) }, &[a.clone(), bias.clone()]);
        fd_check(|t, p| { let x = t.layer_norm(p[0], p[1], p[2])?; weighted(t, x) },
            &[a.clone(), gain.clone(), bias.clone()]);
        fd_check(|t, p| {
            let m = t.matmul(p[0], p[1])?;
            let s = t.tanh(m);
            t.mean(s)
        }, &[a.clone(), w.clone()]);
    }

    #[test]
    fn softmax_normalized_and_shift_invariant(
        logits in prop::collection::vec(-20.0f64..20.0, 1..12),
        shift in -50.0f64..50.0,
    ) {
        let mut t = Tape::new();
        let l = t.constant(Array::row(logits.clone()));
        let s = t.softmax(l).unwrap();
        let shifted = t.constant(Array::row(logits.iter().map(|x| x + shift).collect()));
        let s2 = t.softmax(shifted).unwrap();
        let total: f64 = t.value(s).data().iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-6);
        prop_assert!(t.value(s).data().iter().all(|&p| p > 0.0));
        for (x, y) in t.value(s).data().iter().zip(t.value(s2).data()) {
            prop_assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn zero_grad_clears_every_leaf(vals in entries(2, 3)) {
        let mut t = Tape::new();
        let w = t.param(vals);
        let s = t.tanh(w);
        let l = t.sum(s).unwrap();
        t.backward(l).unwrap();
        t.zero_grad();
        prop_assert!(t.grad(w).unwrap().data().iter().all(|&g| g == 0.0));
        prop_assert_eq!(t.grad(w).unwrap().shape(), t.value(w).shape());
    }
}
