use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn store_of(tensors: &[(&str, Tensor<f64>)]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (n, t) in tensors {
        s.insert(*n, t.clone());
    }
    s
}

fn p(s: &ParamStore<f64>, name: &str) -> ParamId {
    s.id(name).unwrap()
}

#[test]
fn matmul_identity_and_hand_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = rand_tensor(&mut rng, &[3, 3]);
    let eye = Tensor::from_fn(vec![3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
    let mut g = Graph::new();
    let (a, b) = (g.input(&eye), g.input(&x));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c), x.data());

    let a = Tensor::new(vec![2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
    let b = Tensor::new(vec![2, 1], vec![1.0f32, 1.0]).unwrap();
    let mut g = Graph::new();
    let (va, vb) = (g.input(&a), g.input(&b));
    let c = g.matmul(va, vb).unwrap();
    assert_eq!(g.shape(c), [2, 1]);
    assert_eq!(g.value(c), [3.0, 7.0]);
    assert!(matches!(g.matmul(vb, vb), Err(TensorError::ShapeMismatch(_))));
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = store_of(&[("a", rand_tensor(&mut rng, &[3, 4])), ("b", rand_tensor(&mut rng, &[4, 2]))]);
    let r = grad_check(&s, 1e-5, Coords::All, |g, s| {
        let a = g.param(s, p(s, "a"));
        let b = g.param(s, p(s, "b"));
        let c = g.matmul(a, b)?;
        Ok::<_, TensorError>(g.sum(c))
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
    assert_eq!(r.checked, 20);
}

#[test]
fn softmax_values() {
    let t = Tensor::new(vec![1, 2], vec![0.0f64, 0.0]).unwrap();
    let mut g = Graph::new();
    let x = g.input(&t);
    let y = g.softmax(x);
    assert_eq!(g.value(y), [0.5, 0.5]);

    let t = Tensor::new(vec![1, 2], vec![1000.0f32, 0.0]).unwrap();
    let mut g = Graph::new();
    let x = g.input(&t);
    let y = g.softmax(x);
    assert!((g.value(y)[0] - 1.0).abs() < 1e-6);
    assert!(g.value(y)[1] >= 0.0 && g.value(y)[1] < 1e-6);
    assert!(g.value(y).iter().all(|v| v.is_finite()));
}

#[test]
fn masked_softmax_zeroes_masked_columns() {
    let t = Tensor::new(vec![2, 3], vec![1.0f64, 2.0, 3.0, -1.0, 0.5, 9.0]).unwrap();
    let mut g = Graph::new();
    let x = g.input(&t);
    let y = g.masked_softmax(x, &[true, true, false]).unwrap();
    let v = g.value(y);
    assert_eq!(v[2], 0.0);
    assert_eq!(v[5], 0.0);
    assert!((v[0] + v[1] - 1.0).abs() < 1e-12);
    let e = 1f64.exp() / (1f64.exp() + 2f64.exp());
    assert!((v[0] - e).abs() < 1e-12);
}

/// Weighted sum keeps softmax-like ops from having a constant total.
fn weighted<'a>(g: &mut Graph<'a, f64>, s: &'a ParamStore<f64>, y: Var, w: &str) -> Result<Var, TensorError> {
    let w = g.param(s, p(s, w));
    let m = g.mul(y, w)?;
    Ok(g.sum(m))
}

#[test]
fn softmax_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut s = store_of(&[("x", rand_tensor(&mut rng, &[1, 5])), ("w", rand_tensor(&mut rng, &[1, 5]))]);
    s.get_mut(p(&s, "w")).set_requires_grad(false);
    let r = grad_check(&s, 1e-5, Coords::All, |g, s| {
        let x = g.param(s, p(s, "x"));
        let y = g.softmax(x);
        weighted(g, s, y, "w")
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");

    let s = store_of(&[("x", rand_tensor(&mut rng, &[3, 4])), ("w", rand_tensor(&mut rng, &[3, 4]))]);
    let r = grad_check(&s, 1e-5, Coords::All, |g, s| {
        let x = g.param(s, p(s, "x"));
        let y = g.masked_softmax(x, &[true, false, true, true])?;
        weighted(g, s, y, "w")
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn layer_norm_constant_row_and_statistics() {
    let mut g = Graph::new();
    let x = g.constant(vec![1, 4], vec![3.0f64; 4]).unwrap();
    let gain = g.constant(vec![4], vec![1.0; 4]).unwrap();
    let bias = g.constant(vec![4], vec![0.0; 4]).unwrap();
    let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
    assert!(g.value(y).iter().all(|&v| v == 0.0));

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = 64;
    let xs: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
    let gs: Vec<f64> = (0..d).map(|_| rng.random_range(0.5..2.0)).collect();
    let bs: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut g = Graph::new();
    let x = g.constant(vec![1, d], xs.clone()).unwrap();
    let one = g.constant(vec![d], vec![1.0; d]).unwrap();
    let zero = g.constant(vec![d], vec![0.0; d]).unwrap();
    let y = g.layer_norm(x, one, zero, 1e-5).unwrap();
    let yv = g.value(y).to_vec();
    let mean = yv.iter().sum::<f64>() / d as f64;
    let var = yv.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
    assert!(mean.abs() < 1e-9);
    assert!((var - 1.0).abs() < 1e-4);
    // affine part, checked coordinate by coordinate against the unit-gain output
    let gv = g.constant(vec![d], gs.clone()).unwrap();
    let bv = g.constant(vec![d], bs.clone()).unwrap();
    let z = g.layer_norm(x, gv, bv, 1e-5).unwrap();
    let zv = g.value(z);
    for j in 0..d {
        assert!((zv[j] - (gs[j] * yv[j] + bs[j])).abs() < 1e-12);
    }
}

#[test]
fn layer_norm_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s = store_of(&[
        ("x", rand_tensor(&mut rng, &[3, 6])),
        ("g", rand_tensor(&mut rng, &[6])),
        ("b", rand_tensor(&mut rng, &[6])),
        ("w", rand_tensor(&mut rng, &[3, 6])),
    ]);
    let r = grad_check(&s, 1e-5, Coords::All, |g, s| {
        let x = g.param(s, p(s, "x"));
        let gain = g.param(s, p(s, "g"));
        let bias = g.param(s, p(s, "b"));
        let y = g.layer_norm(x, gain, bias, 1e-5)?;
        weighted(g, s, y, "w")
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

/// Straight-line reference: mean over kept rows of logsumexp(row) − row[t].
fn reference_cross_entropy(logits: &[f64], v: usize, targets: &[i64]) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for (r, &t) in targets.iter().enumerate() {
        if t < 0 {
            continue;
        }
        let row = &logits[r * v..(r + 1) * v];
        let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
        total += lse - row[t as usize];
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

#[test]
fn cross_entropy_values() {
    let mut g = Graph::new();
    let l = g.constant(vec![1, 2], vec![0.0f64, 0.0]).unwrap();
    let ce = g.cross_entropy(l, &[0]).unwrap();
    assert!((g.scalar(ce) - std::f64::consts::LN_2).abs() < 1e-12);

    let t = Tensor::from_fn(vec![2, 3], |i| i as f64).with_requires_grad(true);
    let mut g = Graph::new();
    let l = g.input(&t);
    let ce = g.cross_entropy(l, &[-1, -1]).unwrap();
    assert_eq!(g.scalar(ce), 0.0);
    let grads = g.backward(ce).unwrap();
    assert!(grads.wrt(l).is_none_or(|d| d.iter().all(|&v| v == 0.0)));
    assert!(matches!(
        g.cross_entropy(l, &[0, 3]),
        Err(TensorError::TargetOutOfRange { target: 3, classes: 3 })
    ));

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits = rand_tensor(&mut rng, &[4, 7]);
    let targets = [3, -1, 0, 6];
    let mut g = Graph::new();
    let l = g.input(&logits);
    let ce = g.cross_entropy(l, &targets).unwrap();
    let reference = reference_cross_entropy(logits.data(), 7, &targets);
    assert!((g.scalar(ce) - reference).abs() < 1e-6);

    let s = store_of(&[("x", logits)]);
    let r = grad_check(&s, 1e-5, Coords::All, |g, s| {
        let x = g.param(s, p(s, "x"));
        g.cross_entropy(x, &targets)
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn backward_sum_and_accumulation() {
    let mut store = ParamStore::<f64>::new();
    let id = store.insert("x", Tensor::from_fn(vec![2, 3], |i| i as f64));
    let mut g = Graph::new();
    let x = g.param(&store, id);
    let s = g.sum(x);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(x).unwrap(), [1.0; 6]);
    let once = grads.param_grads(1);
    let twice = g.backward(s).unwrap().param_grads(1);
    drop(g);
    store.accumulate_grads(&once);
    store.accumulate_grads(&twice);
    assert_eq!(store.get(id).grad().unwrap(), [2.0; 6]);

    let g = {
        let mut g = Graph::<f64>::new();
        let x = g.param(&store, id);
        let _ = g.sum(x);
        g.backward(x).err()
    };
    assert_eq!(g, Some(TensorError::NotScalar(vec![2, 3])));
}

#[test]
fn two_layer_mlp_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let s = store_of(&[
        ("x", rand_tensor(&mut rng, &[4, 5])),
        ("w1", rand_tensor(&mut rng, &[5, 8])),
        ("b1", rand_tensor(&mut rng, &[8])),
        ("w2", rand_tensor(&mut rng, &[8, 3])),
        ("b2", rand_tensor(&mut rng, &[3])),
    ]);
    let r = grad_check(&s, 1e-5, Coords::All, |g, s| {
        let x = g.param(s, p(s, "x"));
        let w1 = g.param(s, p(s, "w1"));
        let b1 = g.param(s, p(s, "b1"));
        let w2 = g.param(s, p(s, "w2"));
        let b2 = g.param(s, p(s, "b2"));
        let h = g.matmul(x, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.gelu(h);
        let o = g.matmul(h, w2)?;
        let o = g.add_row(o, b2)?;
        g.cross_entropy(o, &[0, 2, -1, 1])
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn structural_ops_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let s = store_of(&[
        ("a", rand_tensor(&mut rng, &[3, 4])),
        ("b", rand_tensor(&mut rng, &[2, 4])),
        ("c", rand_tensor(&mut rng, &[5, 4])),
        ("r", rand_tensor(&mut rng, &[5])),
        ("w", rand_tensor(&mut rng, &[4, 5])),
    ]);
    let r = grad_check(&s, 1e-5, Coords::All, |g, s| {
        let a = g.param(s, p(s, "a"));
        let b = g.param(s, p(s, "b"));
        let c = g.param(s, p(s, "c"));
        let row = g.param(s, p(s, "r"));
        let ab = g.concat_rows(&[a, b])?; // 5x4
        let picked = g.gather_rows(ab, &[4, 0, 0, 2])?; // 4x4, row 0 used twice
        let left = g.slice_cols(picked, 0, 1)?;
        let right = g.slice_cols(picked, 1, 3)?;
        let swapped = g.concat_cols(&[right, left])?;
        let t = g.tanh(swapped);
        let ct = g.transpose(c)?; // 4x5
        let sc = g.scale(ct, 0.7);
        let prod = g.matmul(t, sc)?; // 4x5
        let prod = g.add(prod, prod)?;
        let prod = g.add_row(prod, row)?;
        weighted(g, s, prod, "w")
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn shared_leaf_gradients_sum() {
    let mut store = ParamStore::<f64>::new();
    let id = store.insert("x", Tensor::from_fn(vec![1, 3], |i| i as f64 + 1.0));
    let mut g = Graph::new();
    let a = g.param(&store, id);
    let b = g.param(&store, id);
    let m = g.mul(a, b).unwrap();
    let s = g.sum(m);
    let pg = g.backward(s).unwrap().param_grads(1);
    assert_eq!(pg.get(id).unwrap(), [2.0, 4.0, 6.0]);
}

#[test]
fn dropout_is_seeded_and_scaled() {
    let t = Tensor::from_fn(vec![4, 8], |_| 1.0f64);
    let run = |seed| {
        let mut g = Graph::new();
        let x = g.input(&t);
        let y = g.dropout(x, 0.5, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        g.value(y).to_vec()
    };
    let a = run(3);
    assert_eq!(a, run(3));
    assert!(a.iter().all(|&v| v == 0.0 || v == 2.0));
    let mut g = Graph::new();
    let x = g.input(&t);
    let y = g.dropout(x, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(x, y);
}

#[test]
fn adam_examples() {
    let mut store = ParamStore::<f32>::new();
    let id = store.insert("w", Tensor::new(vec![1], vec![0.5]).unwrap());
    let mut state = AdamState::new(&store, AdamConfig::default());
    state.step(&mut store, &ParamGrads(vec![Some(vec![0.0])]), 0.1).unwrap();
    assert_eq!(store.get(id).data(), [0.5]);
    assert_eq!(state.step, 1);

    let mut store = ParamStore::<f64>::new();
    let id = store.insert("w", Tensor::new(vec![1], vec![0.5]).unwrap());
    let mut state = AdamState::new(&store, AdamConfig::default());
    state.step(&mut store, &ParamGrads(vec![Some(vec![1.0])]), 0.1).unwrap();
    // m̂ = 1, v̂ = 1, so the update is lr / (1 + ε)
    let expected = 0.5 - 0.1 / (1.0 + 1e-8);
    assert!((store.get(id).data()[0] - expected).abs() < 1e-15);

    let run = || {
        let mut s = ParamStore::<f32>::new();
        s.insert("w", Tensor::from_fn(vec![3], |i| i as f32 * 0.3));
        let mut st = AdamState::new(&s, AdamConfig::default());
        for k in 0..5 {
            let g = ParamGrads(vec![Some(vec![0.1 * k as f32, -0.2, 0.7])]);
            st.step(&mut s, &g, 0.01).unwrap();
        }
        (s, st)
    };
    let (s1, st1) = run();
    let (s2, st2) = run();
    assert!(s1.bit_eq(&s2));
    assert_eq!(st1, st2);

    let mut s = ParamStore::<f32>::new();
    s.insert("w", Tensor::from_fn(vec![3], |_| 0.0));
    let mut st = AdamState::new(&s, AdamConfig::default());
    assert!(matches!(
        st.step(&mut s, &ParamGrads(vec![Some(vec![1.0])]), 0.1),
        Err(TensorError::ShapeMismatch(_))
    ));
}

#[test]
fn grad_check_on_linear_function_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut s = store_of(&[("x", rand_tensor(&mut rng, &[2, 3])), ("w", rand_tensor(&mut rng, &[2, 3]))]);
    s.get_mut(p(&s, "w")).set_requires_grad(false);
    let r = grad_check(&s, 1e-5, Coords::All, |g, s| {
        let x = g.param(s, p(s, "x"));
        weighted(g, s, x, "w")
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-9, "{r:?}");
}

#[test]
fn grad_check_detects_corrupted_backward_rule() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let s = store_of(&[("x", rand_tensor(&mut rng, &[1, 6]))]);
    let honest = grad_check(&s, 1e-5, Coords::All, |g, s| {
        let x = g.param(s, p(s, "x"));
        let y = g.map(x, f64::sin, f64::cos);
        Ok::<_, TensorError>(g.sum(y))
    })
    .unwrap();
    assert!(honest.max_rel_error < 1e-6, "{honest:?}");
    let corrupted = grad_check(&s, 1e-5, Coords::All, |g, s| {
        let x = g.param(s, p(s, "x"));
        let y = g.map(x, f64::sin, |v| 1.1 * v.cos());
        Ok::<_, TensorError>(g.sum(y))
    })
    .unwrap();
    assert!(corrupted.max_rel_error > 1e-2, "{corrupted:?}");
}

#[test]
fn sampled_coordinates_are_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let s = store_of(&[("x", rand_tensor(&mut rng, &[10, 10])), ("y", rand_tensor(&mut rng, &[3]))]);
    let r = grad_check(&s, 1e-5, Coords::Sample { per_param: 7, seed: 1 }, |g, s| {
        let x = g.param(s, p(s, "x"));
        let y = g.param(s, p(s, "y"));
        let a = g.tanh(x);
        let a = g.sum(a);
        let b = g.gelu(y);
        let b = g.sum(b);
        g.add(a, b)
    })
    .unwrap();
    assert_eq!(r.checked, 10);
    assert!(r.max_rel_error < 1e-4);
}

#[test]
fn operations_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&mut rng, &[6, 9]).cast::<f32>().with_requires_grad(true);
    let run = || {
        let mut g = Graph::new();
        let v = g.input(&x);
        let sm = g.softmax(v);
        let t = g.transpose(sm).unwrap();
        let m = g.matmul(sm, t).unwrap();
        let s = g.sum(m);
        let grads = g.backward(s).unwrap();
        (g.value(m).to_vec(), grads.wrt(v).unwrap().to_vec())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(ga.iter().zip(&gb).all(|(x, y)| x.to_bits() == y.to_bits()));
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-50.0f64..50.0, 12)) {
        let t = Tensor::new(vec![3, 4], vals).unwrap();
        let mut g = Graph::new();
        let x = g.input(&t);
        let y = g.softmax(x);
        for row in g.value(y).chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_ignores_row_shift(vals in proptest::collection::vec(-5.0f64..5.0, 8), shift in -100.0f64..100.0) {
        let run = |offset: f64| {
            let mut g = Graph::new();
            let x = g.constant(vec![1, 8], vals.iter().map(|v| v + offset).collect()).unwrap();
            let gain = g.constant(vec![8], (0..8).map(|i| 0.5 + i as f64 * 0.1).collect()).unwrap();
            let bias = g.constant(vec![8], (0..8).map(|i| i as f64 * -0.2).collect()).unwrap();
            let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
            g.value(y).to_vec()
        };
        for (a, b) in run(0.0).iter().zip(run(shift)) {
            prop_assert!((a - b).abs() < 1e-5);
        }
    }
}
