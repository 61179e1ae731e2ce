use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn empty_store() -> ParamStore<f64> {
    ParamStore::init(&ParamRegistry::new(), &mut ChaCha8Rng::seed_from_u64(0))
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Central differences of a scalar function of several inputs.
fn numeric_grads(inputs: &[Tensor<f64>], f: &dyn Fn(&[Tensor<f64>]) -> f64, h: f64) -> Vec<Tensor<f64>> {
    inputs
        .iter()
        .enumerate()
        .map(|(which, t)| {
            Tensor::from_fn(t.shape(), |i| {
                let mut plus = inputs.to_vec();
                plus[which].data_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[which].data_mut()[i] -= h;
                (f(&plus) - f(&minus)) / (2.0 * h)
            })
        })
        .collect()
}

fn rel_err(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let num: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den = a.data().iter().map(|x| x * x).sum::<f64>().sqrt().max(b.data().iter().map(|x| x * x).sum::<f64>().sqrt());
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

/// Builds `loss = sum(w ⊙ op(inputs))` with a fixed random weighting so
/// every output element contributes a distinct gradient.
fn check_op(
    shapes: &[&[usize]],
    seed: u64,
    tol: f64,
    op: &dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, NumericsError>,
) {
    let store = empty_store();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| random(s, &mut rng)).collect();
    let probe_seed = rng.random::<u64>();
    let eval = |xs: &[Tensor<f64>], track: bool| -> (f64, Vec<Tensor<f64>>) {
        let mut g = Graph::new(&store);
        let vars: Vec<Var> = xs.iter().map(|t| if track { g.variable(t.clone()) } else { g.constant(t.clone()) }).collect();
        let out = op(&mut g, &vars).unwrap();
        let mut wr = ChaCha8Rng::seed_from_u64(probe_seed);
        let w = Tensor::from_fn(g.shape(out), |_| wr.random_range(-1.0..1.0));
        let wv = g.constant(w);
        let prod = g.mul(out, wv).unwrap();
        let loss = g.sum(prod).unwrap();
        let value = g.value(loss).item();
        if !track {
            return (value, vec![]);
        }
        let grads = g.backward(loss).unwrap();
        (value, vars.iter().map(|v| grads.wrt(*v).unwrap().clone()).collect())
    };
    let (_, analytic) = eval(&inputs, true);
    let numeric = numeric_grads(&inputs, &|xs| eval(xs, false).0, 1e-5);
    for (a, n) in analytic.iter().zip(&numeric) {
        let e = rel_err(a, n);
        assert!(e <= tol, "relative error {e} above {tol}");
    }
}

#[test]
fn matmul_identity_and_hand_case() {
    let store = ParamStore::<f32>::init(&ParamRegistry::new(), &mut ChaCha8Rng::seed_from_u64(0));
    let mut g = Graph::new(&store);
    let i2 = g.constant(Tensor::identity(2));
    let m = g.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let out = g.matmul(i2, m).unwrap();
    assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
    let col = g.constant(Tensor::from_rows(&[&[5.0], &[6.0]]));
    let out = g.matmul(m, col).unwrap();
    assert_eq!(g.shape(out), &[2, 1]);
    assert_eq!(g.value(out).data(), &[17.0, 39.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let store = empty_store();
    let mut g = Graph::new(&store);
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    assert_eq!(err, NumericsError::ShapeMismatch { op: "matmul", lhs: vec![2, 3], rhs: vec![2, 3] });
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    for seed in 0..10 {
        check_op(&[&[3, 4], &[4, 2]], seed, 1e-5, &|g, v| g.matmul(v[0], v[1]));
    }
}

#[test]
fn layer_norm_constant_row_is_zero() {
    let store = empty_store();
    let mut g = Graph::new(&store);
    let x = g.constant(Tensor::full(&[1, 4], 3.5));
    let gamma = g.constant(Tensor::ones(&[4]));
    let beta = g.constant(Tensor::zeros(&[4]));
    let y = g.layer_norm(x, gamma, beta, 1e-6).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn layer_norm_two_point_row() {
    let store = empty_store();
    let mut g = Graph::new(&store);
    let x = g.constant(Tensor::from_rows(&[&[1.0, 3.0]]));
    let gamma = g.constant(Tensor::ones(&[2]));
    let beta = g.constant(Tensor::zeros(&[2]));
    let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
    let v = g.value(y).data();
    assert!((v[0] + 1.0).abs() < 1e-9 && (v[1] - 1.0).abs() < 1e-9, "{v:?}");
}

#[test]
fn layer_norm_rejects_nonpositive_eps() {
    let store = empty_store();
    let mut g = Graph::new(&store);
    let x = g.constant(Tensor::zeros(&[1, 2]));
    let gamma = g.constant(Tensor::ones(&[2]));
    let beta = g.constant(Tensor::zeros(&[2]));
    assert!(matches!(g.layer_norm(x, gamma, beta, 0.0), Err(NumericsError::Invalid { .. })));
}

#[test]
fn layer_norm_gradient_matches_finite_differences() {
    for seed in 0..10 {
        check_op(&[&[3, 5], &[5], &[5]], seed, 1e-5, &|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5));
    }
}

#[test]
fn softmax_hand_cases() {
    let store = empty_store();
    let mut g = Graph::new(&store);
    let x = g.constant(Tensor::from_rows(&[&[0.0, 3f64.ln()]]));
    let y = g.softmax(x, 1).unwrap();
    let v = g.value(y).data();
    assert!((v[0] - 0.25).abs() < 1e-12 && (v[1] - 0.75).abs() < 1e-12);

    let u = g.constant(Tensor::full(&[1, 4], 7.0));
    let y = g.softmax(u, 1).unwrap();
    assert!(g.value(y).data().iter().all(|&p| (p - 0.25).abs() < 1e-12));
}

#[test]
fn softmax_shift_invariance_and_axis_error() {
    let store = empty_store();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t = random(&[4, 6], &mut rng);
    let shifted = t.map(|x| x + 11.0);
    let mut g = Graph::new(&store);
    let a = g.constant(t);
    let b = g.constant(shifted);
    let ya = g.softmax(a, 1).unwrap();
    let yb = g.softmax(b, 1).unwrap();
    assert!(g.value(ya).max_abs_diff(g.value(yb)) < 1e-12);
    assert!(g.softmax(a, 2).is_err());
}

#[test]
fn softmax_gradient_on_each_axis() {
    for seed in 0..10 {
        check_op(&[&[2, 3, 4]], seed, 1e-5, &|g, v| g.softmax(v[0], (seed % 3) as usize));
    }
}

#[test]
fn gelu_values_and_asymptotes() {
    use super::graph::gelu_scalar;
    assert_eq!(gelu_scalar(0.0f64), 0.0);
    assert!((gelu_scalar(30.0f64) - 30.0).abs() < 1e-9);
    assert!(gelu_scalar(-10.0f64).abs() < 1e-6);
}

#[test]
fn gelu_gradient_matches_finite_differences() {
    for seed in 0..10 {
        check_op(&[&[4, 4]], seed, 1e-4, &|g, v| {
            let s = g.scale(v[0], 3.0)?;
            g.gelu(s)
        });
    }
}

#[test]
fn attention_single_key_returns_value_row() {
    let store = empty_store();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::new(&store);
    let q = g.constant(random(&[2, 5, 3], &mut rng));
    let k = g.constant(random(&[2, 1, 3], &mut rng));
    let vt = random(&[2, 1, 3], &mut rng);
    let v = g.constant(vt.clone());
    let o = g.attention(q, k, v).unwrap();
    let out = g.value(o);
    for h in 0..2 {
        for r in 0..5 {
            for c in 0..3 {
                assert!((out.data()[h * 15 + r * 3 + c] - vt.data()[h * 3 + c]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn attention_identical_keys_average_values() {
    let store = empty_store();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut g = Graph::new(&store);
    let q = g.constant(random(&[1, 3, 2], &mut rng));
    let key = [0.3, -0.7];
    let k = g.constant(Tensor::from_fn(&[1, 4, 2], |i| key[i % 2]));
    let vt = random(&[1, 4, 2], &mut rng);
    let v = g.constant(vt.clone());
    let o = g.attention(q, k, v).unwrap();
    for r in 0..3 {
        for c in 0..2 {
            let mean = (0..4).map(|j| vt.data()[j * 2 + c]).sum::<f64>() / 4.0;
            assert!((g.value(o).data()[r * 2 + c] - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_two_token_hand_case() {
    // q = [1, 0], keys [1, 0] and [0, 0], dh = 2: scores 1/√2 and 0.
    let store = empty_store();
    let mut g = Graph::new(&store);
    let q = g.constant(Tensor::new(vec![1, 1, 2], vec![1.0, 0.0]).unwrap());
    let k = g.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap());
    let v = g.constant(Tensor::new(vec![1, 2, 2], vec![2.0, 0.0, 0.0, 4.0]).unwrap());
    let o = g.attention(q, k, v).unwrap();
    let s = 1.0 / 2f64.sqrt();
    let p0 = s.exp() / (s.exp() + 1.0);
    let expected = [2.0 * p0, 4.0 * (1.0 - p0)];
    let got = g.value(o).data();
    assert!((got[0] - expected[0]).abs() < 1e-12 && (got[1] - expected[1]).abs() < 1e-12, "{got:?}");
}

#[test]
fn attention_gradient_matches_finite_differences() {
    for seed in 0..10 {
        check_op(&[&[2, 3, 4], &[2, 5, 4], &[2, 5, 4]], seed, 1e-5, &|g, v| g.attention(v[0], v[1], v[2]));
        check_op(&[&[3, 8], &[5, 8], &[5, 8]], seed, 1e-5, &|g, v| g.multi_head_attention(v[0], v[1], v[2], 2));
    }
}

#[test]
fn segmented_attention_matches_separate_sequences() {
    let store = empty_store();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (segs, lq, lk, d) = (3, 4, 2, 6);
    let q = random(&[segs * lq, d], &mut rng);
    let k = random(&[segs * lk, d], &mut rng);
    let v = random(&[segs * lk, d], &mut rng);
    let mut g = Graph::new(&store);
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let joint = g.segmented_attention(qv, kv, vv, 2, segs).unwrap();
    let probs = g.attention_probs(joint).unwrap();
    assert_eq!(probs.shape(), &[segs * 2, lq, lk]);
    for s in 0..segs {
        let qs = g.constant(q.gather_rows(&(s * lq..(s + 1) * lq).collect::<Vec<_>>()));
        let ks = g.constant(k.gather_rows(&(s * lk..(s + 1) * lk).collect::<Vec<_>>()));
        let vs = g.constant(v.gather_rows(&(s * lk..(s + 1) * lk).collect::<Vec<_>>()));
        let alone = g.multi_head_attention(qs, ks, vs, 2).unwrap();
        let rows = g.value(joint).gather_rows(&(s * lq..(s + 1) * lq).collect::<Vec<_>>());
        assert!(rows.max_abs_diff(g.value(alone)) < 1e-12);
    }
    for seed in 0..5 {
        check_op(&[&[6, 4], &[4, 4], &[4, 4]], seed, 1e-5, &|g, v| g.segmented_attention(v[0], v[1], v[2], 2, 2));
    }
    let mut g = Graph::new(&store);
    let (qv, kv) = (g.constant(q), g.constant(k));
    assert!(g.segmented_attention(qv, kv, kv, 2, 5).is_err());
}

#[test]
fn packed_and_split_attention_agree() {
    let store = empty_store();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (heads, lq, lk, dh) = (3, 4, 5, 2);
    let q = random(&[lq, heads * dh], &mut rng);
    let k = random(&[lk, heads * dh], &mut rng);
    let v = random(&[lk, heads * dh], &mut rng);
    let split = |t: &Tensor<f64>, len: usize| {
        Tensor::from_fn(&[heads, len, dh], |i| {
            let (h, r, c) = (i / (len * dh), (i / dh) % len, i % dh);
            t.data()[r * heads * dh + h * dh + c]
        })
    };
    let mut g = Graph::new(&store);
    let (qp, kp, vp) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let packed = g.multi_head_attention(qp, kp, vp, heads).unwrap();
    let (qs, ks, vs) = (g.constant(split(&q, lq)), g.constant(split(&k, lk)), g.constant(split(&v, lk)));
    let out = g.attention(qs, ks, vs).unwrap();
    let repacked = split(g.value(packed), lq);
    assert!(repacked.max_abs_diff(g.value(out)) < 1e-12);
}

#[test]
fn row_ops_gradients() {
    for seed in 0..10 {
        check_op(&[&[4, 3]], seed, 1e-5, &|g, v| g.gather_rows(v[0], &[2, 0, 2, 3]));
        check_op(&[&[2, 3], &[1, 3]], seed, 1e-5, &|g, v| g.concat_rows(&[v[0], v[1], v[0]]));
        check_op(&[&[3, 4], &[4]], seed, 1e-5, &|g, v| g.add_row(v[0], v[1]));
        check_op(&[&[3, 4], &[3, 4]], seed, 1e-5, &|g, v| {
            let d = g.sub(v[0], v[1])?;
            let p = g.mul(d, v[0])?;
            g.add(p, v[1])
        });
        check_op(&[&[2, 3], &[2, 3]], seed, 1e-5, &|g, v| g.mse(v[0], v[1]));
        check_op(&[&[2, 6]], seed, 1e-5, &|g, v| {
            let r = g.reshape(v[0], &[3, 4])?;
            g.mean(r)
        });
    }
}

#[test]
fn backward_of_sum_is_ones() {
    let store = empty_store();
    let mut g = Graph::new(&store);
    let x = g.variable(Tensor::from_rows(&[&[1.0, -2.0, 5.0]]));
    let s = g.sum(x).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(x).unwrap().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn backward_of_mean_square() {
    let store = empty_store();
    let mut g = Graph::new(&store);
    let x = g.variable(Tensor::from_rows(&[&[1.0, 2.0]]));
    let zero = g.constant(Tensor::zeros(&[1, 2]));
    let l = g.mse(x, zero).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.wrt(x).unwrap().data(), &[1.0, 2.0]);
}

#[test]
fn backward_requires_scalar() {
    let store = empty_store();
    let mut g = Graph::new(&store);
    let x = g.variable(Tensor::zeros(&[2, 2]));
    assert_eq!(g.backward(x).unwrap_err(), NumericsError::NotScalar(vec![2, 2]));
}

#[test]
fn non_finite_results_are_errors() {
    let store = empty_store();
    let mut g = Graph::new(&store);
    let x = g.constant(Tensor::full(&[1, 2], 1e300));
    let y = g.constant(Tensor::full(&[2, 1], 1e300));
    assert_eq!(g.matmul(x, y).unwrap_err(), NumericsError::NonFinite { op: "matmul" });
}

#[test]
fn parameters_share_one_node_and_collect_grads() {
    let mut reg = ParamRegistry::new();
    let w = reg.declare("w", &[2, 2], Init::Normal { std: 1.0 }, ParamKind::Weight);
    let mut store: ParamStore<f64> = ParamStore::init(&reg, &mut ChaCha8Rng::seed_from_u64(4));
    let (grad, same) = {
        let mut g = Graph::new(&store);
        let a = g.param(w);
        let b = g.param(w);
        let p = g.matmul(a, b).unwrap();
        let l = g.sum(p).unwrap();
        let grads = g.backward(l).unwrap();
        let grad = grads.param(w).unwrap().clone();
        grads.accumulate_into(&mut store);
        (grad, a == b)
    };
    assert!(same);
    // d/dW sum(W·W) = 1·Wᵀ + Wᵀ·1
    let wv = store.value(w).clone();
    let expected = Tensor::from_fn(&[2, 2], |i| {
        let (r, c) = (i / 2, i % 2);
        (0..2).map(|j| wv.data()[c * 2 + j]).sum::<f64>() + (0..2).map(|j| wv.data()[j * 2 + r]).sum::<f64>()
    });
    assert!(grad.max_abs_diff(&expected) < 1e-12);
    assert_eq!(store.get(w).grad.as_ref().unwrap(), &grad);
}

#[test]
fn frozen_parameters_get_no_gradient() {
    let mut reg = ParamRegistry::new();
    let w = reg.declare("w", &[2], Init::Ones, ParamKind::Bias);
    let mut store: ParamStore<f64> = ParamStore::init(&reg, &mut ChaCha8Rng::seed_from_u64(0));
    store.set_requires_grad(false);
    let mut g = Graph::new(&store);
    let x = g.variable(Tensor::ones(&[3, 2]));
    let p = g.param(w);
    let y = g.add_row(x, p).unwrap();
    let l = g.sum(y).unwrap();
    let grads = g.backward(l).unwrap();
    assert!(grads.param(w).is_none());
    assert!(grads.wrt(x).is_some());
}

#[test]
fn backward_is_bit_deterministic() {
    let run = || {
        let store = empty_store();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut g = Graph::new(&store);
        let q = g.variable(random(&[6, 8], &mut rng));
        let k = g.variable(random(&[6, 8], &mut rng));
        let a = g.multi_head_attention(q, k, k, 2).unwrap();
        let b = g.gelu(a).unwrap();
        let l = g.sum(b).unwrap();
        let gr = g.backward(l).unwrap();
        (gr.wrt(q).unwrap().clone(), gr.wrt(k).unwrap().clone())
    };
    assert_eq!(run(), run());
}

mod props {
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..9, seed in any::<u64>()) {
            let store = empty_store();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::new(&store);
            let x = g.constant(Tensor::from_fn(&[rows, cols], |_| rng.random_range(-5.0..5.0)));
            let y = g.softmax(x, 1).unwrap();
            for r in 0..rows {
                let row = g.value(y).row(r);
                prop_assert!(row.iter().all(|&p| p > 0.0 && p < 1.0 || cols == 1));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
}
