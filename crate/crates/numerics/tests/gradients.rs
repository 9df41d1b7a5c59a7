use iskg_numerics::{
    grad_check, CustomOp, GradCheckOptions, ParamId, ParamStore, Rng, Tape, Tensor, Var,
};
use proptest::prelude::*;

const TOL: f64 = 1e-4;

fn random(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.normal(0.0, 1.0)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

/// A fixed random projection turns any tensor into a scalar loss with a
/// non-trivial upstream gradient.
fn project(tape: &mut Tape, x: Var, seed: u64) -> Var {
    let shape = tape.value(x).shape().to_vec();
    let mut rng = Rng::new(seed);
    let w = random(&mut rng, shape[0], shape[1]);
    let w = tape.constant(w);
    let prod = tape.mul(x, w);
    tape.sum(prod)
}

fn check(store: &mut ParamStore, f: impl for<'a> Fn(&mut Tape<'a>) -> Var) -> f64 {
    let report = grad_check(store, f, &GradCheckOptions::default());
    assert!(report.checked > 0);
    report.max_rel_error
}

fn two(rows_a: usize, cols_a: usize, rows_b: usize, cols_b: usize, seed: u64) -> (ParamStore, ParamId, ParamId) {
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    let a = store.add("a", random(&mut rng, rows_a, cols_a));
    let b = store.add("b", random(&mut rng, rows_b, cols_b));
    (store, a, b)
}

#[test]
fn matmul_weight_gradient_is_input_transpose_times_upstream() {
    let mut rng = Rng::new(1);
    let x = random(&mut rng, 3, 4);
    let mut store = ParamStore::new();
    let w_id = store.add("w", random(&mut rng, 4, 2));
    let upstream = random(&mut rng, 3, 2);
    let mut tape = Tape::with_params(&store);
    let xv = tape.constant(x.clone());
    let w = tape.param(w_id);
    let y = tape.matmul(xv, w);
    let u = tape.constant(upstream.clone());
    let prod = tape.mul(y, u);
    let loss = tape.sum(prod);
    let grads = tape.backward(loss);
    let expected = x.transpose().matmul(&upstream).unwrap();
    assert!(grads.params().get(w_id).unwrap().max_abs_diff(&expected) < 1e-12);
}

#[test]
fn binary_ops_pass_grad_check() {
    let (mut s, a, b) = two(3, 4, 4, 5, 2);
    assert!(check(&mut s, |t| {
        let (x, y) = (t.param(a), t.param(b));
        let z = t.matmul(x, y);
        project(t, z, 10)
    }) <= TOL);

    let (mut s, a, b) = two(3, 4, 5, 4, 3);
    assert!(check(&mut s, |t| {
        let (x, y) = (t.param(a), t.param(b));
        let z = t.matmul_nt(x, y);
        project(t, z, 11)
    }) <= TOL);

    let (mut s, a, b) = two(3, 4, 3, 4, 4);
    assert!(check(&mut s, |t| {
        let (x, y) = (t.param(a), t.param(b));
        let p = t.mul(x, y);
        let q = t.sub(p, y);
        let r = t.add(q, x);
        let z = t.scale(r, -0.7);
        project(t, z, 12)
    }) <= TOL);

    let (mut s, a, b) = two(3, 4, 1, 4, 5);
    assert!(check(&mut s, |t| {
        let (x, y) = (t.param(a), t.param(b));
        let z = t.add_row(x, y);
        project(t, z, 13)
    }) <= TOL);
}

#[test]
fn activations_pass_grad_check() {
    for (k, seed) in [(0usize, 20u64), (1, 21), (2, 22), (3, 23)] {
        let mut rng = Rng::new(seed);
        let mut s = ParamStore::new();
        let a = s.add("a", random(&mut rng, 3, 5));
        let err = check(&mut s, |t| {
            let x = t.param(a);
            let y = match k {
                0 => t.sigmoid(x),
                1 => t.tanh(x),
                2 => t.relu(x),
                _ => t.softmax(x),
            };
            project(t, y, seed)
        });
        assert!(err <= TOL, "activation {k}: {err}");
    }
}

#[test]
fn softmax_grad_check_tight() {
    let mut rng = Rng::new(31);
    let mut s = ParamStore::new();
    let a = s.add("a", random(&mut rng, 1, 4));
    let err = check(&mut s, |t| {
        let x = t.param(a);
        let y = t.softmax(x);
        project(t, y, 32)
    });
    assert!(err <= 1e-6, "{err}");
}

#[test]
fn layer_norm_passes_grad_check() {
    let mut rng = Rng::new(40);
    let mut s = ParamStore::new();
    let x = s.add("x", random(&mut rng, 3, 6));
    let g = s.add("g", random(&mut rng, 1, 6));
    let b = s.add("b", random(&mut rng, 1, 6));
    let err = check(&mut s, |t| {
        let (xv, gv, bv) = (t.param(x), t.param(g), t.param(b));
        let y = t.layer_norm(xv, gv, bv);
        project(t, y, 41)
    });
    assert!(err <= TOL, "{err}");
}

#[test]
fn shape_ops_pass_grad_check() {
    let mut rng = Rng::new(50);
    let mut s = ParamStore::new();
    let a = s.add("a", random(&mut rng, 3, 4));
    let b = s.add("b", random(&mut rng, 3, 2));
    let table = s.add("table", random(&mut rng, 5, 3));
    let err = check(&mut s, |t| {
        let (av, bv, tv) = (t.param(a), t.param(b), t.param(table));
        let c = t.concat_cols(&[av, bv]);
        let d = t.slice_cols(c, 1, 5);
        let e = t.slice_rows(d, 0, 2);
        let f = t.concat_rows(&[e, d]);
        let g = t.transpose(f);
        let rows = t.gather_rows(tv, &[4, 0, 4, 2, 1]);
        let h = t.matmul(g, rows);
        let h = t.tanh(h);
        project(t, h, 51)
    });
    assert!(err <= TOL, "{err}");
}

#[test]
fn linear_function_is_exact() {
    let mut rng = Rng::new(60);
    let mut s = ParamStore::new();
    let a = s.add("a", random(&mut rng, 4, 4));
    let err = check(&mut s, |t| {
        let x = t.param(a);
        t.sum(x)
    });
    assert!(err < 1e-10, "{err}");
}

#[test]
fn two_layer_mlp() {
    let mut rng = Rng::new(70);
    let mut s = ParamStore::new();
    let w1 = s.add_glorot("w1", 6, 8, &mut rng);
    let b1 = s.add_normal("b1", 1, 8, 0.1, &mut rng);
    let w2 = s.add_glorot("w2", 8, 3, &mut rng);
    let x = random(&mut rng, 5, 6);
    let report = grad_check(
        &mut s,
        |t| {
            let xv = t.constant(x.clone());
            let (w1, b1, w2) = (t.param(w1), t.param(b1), t.param(w2));
            let h = t.matmul(xv, w1);
            let h = t.add_row(h, b1);
            let h = t.relu(h);
            let o = t.matmul(h, w2);
            let o = t.softmax(o);
            project(t, o, 71)
        },
        &GradCheckOptions::default(),
    );
    assert!(report.max_rel_error <= TOL, "{report:?}");
}

/// Squares its input but claims the derivative is `x` instead of `2x`.
struct BrokenSquare;

impl CustomOp for BrokenSquare {
    fn name(&self) -> &'static str {
        "broken_square"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        inputs[0].map(|v| v * v)
    }
    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, upstream: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(upstream.mul(inputs[0]).unwrap())]
    }
}

#[test]
fn checker_detects_corrupted_backward() {
    let mut rng = Rng::new(80);
    let mut s = ParamStore::new();
    let a = s.add("a", random(&mut rng, 2, 3));
    let report = grad_check(
        &mut s,
        |t| {
            let x = t.param(a);
            let y = t.custom(Box::new(BrokenSquare), &[x]);
            t.sum(y)
        },
        &GradCheckOptions::default(),
    );
    assert!(report.max_rel_error > 1e-2, "{report:?}");
}

#[test]
fn leaf_gradients_are_reported() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::row_vector(vec![1.0, 2.0, 3.0]));
    let y = tape.mul(x, x);
    let loss = tape.sum(y);
    let g = tape.backward(loss);
    assert_eq!(g.wrt(x).unwrap().data(), &[2.0, 4.0, 6.0]);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(values in prop::collection::vec(-50.0f64..50.0, 1..40), rows in 1usize..4) {
        let cols = values.len();
        let data: Vec<f64> = (0..rows).flat_map(|r| values.iter().map(move |v| v * (r as f64 + 1.0))).collect();
        let t = Tensor::new(vec![rows, cols], data).unwrap().softmax(1);
        for r in 0..rows {
            let sum: f64 = t.row(r).iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            prop_assert!(t.row(r).iter().all(|&p| p >= 0.0 && p <= 1.0));
        }
    }

    #[test]
    fn softmax_is_shift_invariant(values in prop::collection::vec(-20.0f64..20.0, 1..16), c in -100.0f64..100.0) {
        let a = Tensor::row_vector(values.clone()).softmax(1);
        let b = Tensor::row_vector(values.iter().map(|v| v + c).collect()).softmax(1);
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
    }
}
