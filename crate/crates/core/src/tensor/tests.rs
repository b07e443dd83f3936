use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn t2(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, p) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        for j in 0..p {
            let mut s = 0.0;
            for kk in 0..k {
                s += a.data()[i * k + kk] * b.data()[kk * p + j];
            }
            out[i * p + j] = s;
        }
    }
    out
}

#[test]
fn matmul_identity_and_selector() {
    let g = Graph::inference();
    let i2 = g.constant(Tensor::identity(2));
    let m = g.constant(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
    assert_eq!(&*g.data(g.matmul(i2, m).unwrap()), &[1.0, 2.0, 3.0, 4.0]);
    let sel = g.constant(t2(&[&[1.0, 0.0]]));
    let col = g.constant(t2(&[&[5.0], &[7.0]]));
    let out = g.matmul(sel, col).unwrap();
    assert_eq!(g.shape(out), vec![1, 1]);
    assert_eq!(g.scalar(out), 5.0);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10 {
        let a = random(&mut rng, &[3, 3], 2.0);
        let b = random(&mut rng, &[3, 3], 2.0);
        let g = Graph::inference();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let got = g.matmul(va, vb).unwrap();
        for (x, y) in g.data(got).iter().zip(naive_matmul(&a, &b)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn matmul_shape_mismatch() {
    let g = Graph::inference();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(g.matmul(a, b), Err(TensorError::Shape { .. })));
}

#[test]
fn matmul_records_flops() {
    let g = Graph::inference();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[3, 5]));
    let (_, f) = flops::measure(|| g.matmul(a, b).unwrap());
    assert_eq!(f, 2 * 2 * 3 * 5);
}

#[test]
fn softmax_examples() {
    let g = Graph::inference();
    let x = g.constant(t2(&[&[0.0, 0.0], &[1000.0, 0.0]]));
    let y = g.softmax_rows(x, 1.0).unwrap();
    let d = g.data(y).to_vec();
    assert_eq!(&d[..2], &[0.5, 0.5]);
    assert!((d[2] - 1.0).abs() < 1e-12 && d[3].abs() < 1e-12);

    let x = g.constant(t2(&[&[1.0, 2.0, 3.0]]));
    let y = g.softmax_rows(x, 1.0).unwrap();
    let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    for (i, v) in g.data(y).iter().enumerate() {
        assert!((v - ((i + 1) as f64).exp() / z).abs() < 1e-12);
    }
}

#[test]
fn softmax_rejects_nonpositive_temperature() {
    let g = Graph::inference();
    let x = g.constant(t2(&[&[1.0, 2.0]]));
    assert!(matches!(g.softmax_rows(x, 0.0), Err(TensorError::Param(_))));
    assert!(matches!(g.softmax_rows(x, -1.0), Err(TensorError::Param(_))));
}

#[test]
fn softmax_rows_sum_to_one_for_large_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let g = Graph::inference();
        let x = g.constant(random(&mut rng, &[4, 7], 1e4));
        let y = g.softmax_rows(x, rng.gen_range(0.1..3.0)).unwrap();
        for row in g.data(y).chunks(7) {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn smooth_l1_examples() {
    let g = Graph::inference();
    let eval = |x: f64, y: f64| {
        let (a, b) = (g.constant(Tensor::scalar(x)), g.constant(Tensor::scalar(y)));
        g.scalar(g.smooth_l1(a, b).unwrap())
    };
    assert_eq!(eval(0.7, 0.7), 0.0);
    assert_eq!(eval(0.5, 0.0), 0.125);
    assert_eq!(eval(2.0, 0.0), 1.5);
    let a = g.constant(Tensor::zeros(&[2]));
    let b = g.constant(Tensor::zeros(&[3]));
    assert!(g.smooth_l1(a, b).is_err());
}

#[test]
fn smooth_l1_is_c1_at_the_knee() {
    let h = 1e-12;
    for sign in [1.0, -1.0] {
        let left = graph::smooth_l1_scalar(sign * (1.0 - h));
        let right = graph::smooth_l1_scalar(sign * (1.0 + h));
        assert!((left - right).abs() < 1e-9);
    }
    // slopes on either side of |d| = 1
    let slope = |d: f64| {
        let g = Graph::new();
        let x = g.leaf(Tensor::scalar(d), true);
        let y = g.constant(Tensor::scalar(0.0));
        let l = g.smooth_l1(x, y).unwrap();
        g.backward(l).unwrap().of(x).unwrap()[0]
    };
    assert!((slope(1.0 - 1e-12) - slope(1.0 + 1e-12)).abs() < 1e-9);
    assert!((slope(-1.0 + 1e-12) - slope(-1.0 - 1e-12)).abs() < 1e-9);
}

#[test]
fn kl_examples() {
    let g = Graph::inference();
    let d = g.constant(t2(&[&[0.0, 0.0], &[0.0, 0.0]]));
    let t = g.constant(t2(&[&[3f64.ln(), 0.0], &[3f64.ln(), 0.0]]));
    let kl = g.scalar(g.kl_divergence(d, t).unwrap());
    // p = [1/2, 1/2], q = [3/4, 1/4]
    let expect = 0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln();
    assert!((kl - expect).abs() < 1e-12);
    assert!((kl - 0.1438).abs() < 1e-4);

    let same = g.constant(t2(&[&[0.3, -1.2, 4.0]]));
    assert!(g.scalar(g.kl_divergence(same, same).unwrap()).abs() < 1e-12);
}

#[test]
fn kl_is_nonnegative() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let g = Graph::inference();
        let d = g.constant(random(&mut rng, &[3, 5], 4.0));
        let t = g.constant(random(&mut rng, &[3, 5], 4.0));
        assert!(g.scalar(g.kl_divergence(d, t).unwrap()) >= 0.0);
    }
}

#[test]
fn kl_rejects_bad_shapes() {
    let g = Graph::inference();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 4]));
    assert!(g.kl_divergence(a, b).is_err());
    let c = g.constant(Tensor::zeros(&[2, 1]));
    assert!(g.kl_divergence(c, c).is_err());
}

#[test]
fn backward_of_sum_is_ones() {
    let g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[2, 3]), true);
    let s = g.sum(x);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.of(x).unwrap(), &[1.0; 6]);
}

#[test]
fn backward_of_smooth_l1_in_quadratic_region() {
    let g = Graph::new();
    let x = g.leaf(Tensor::scalar(0.5), true);
    let zero = g.constant(Tensor::scalar(0.0));
    let l = g.smooth_l1(x, zero).unwrap();
    assert_eq!(g.backward(l).unwrap().of(x).unwrap(), &[0.5]);
}

#[test]
fn backward_errors() {
    let g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[2]), true);
    assert!(matches!(g.backward(x), Err(TensorError::NonScalar(_))));
    let g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[2]), true);
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert!(matches!(g.backward(s), Err(TensorError::GraphConsumed)));
}

#[test]
fn non_finite_values_poison_the_graph() {
    let g = Graph::new();
    let x = g.leaf(Tensor::new(vec![1], vec![f64::MAX]).unwrap(), true);
    let y = g.scale(x, 10.0);
    let s = g.sum(y);
    assert!(matches!(g.check_finite(), Err(TensorError::NonFinite("scale"))));
    assert!(g.backward(s).is_err());
}

/// Central differences on each leaf element versus the tape.
fn check_grads(inputs: Vec<Tensor>, f: impl Fn(&Graph, &[Var]) -> Var) {
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = f(&g, &vars);
    let grads = g.backward(loss).unwrap();
    let h = 1e-5;
    for (vi, t) in inputs.iter().enumerate() {
        let analytic = grads.of(vars[vi]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]);
        for e in 0..t.len() {
            let eval = |delta: f64| {
                let g = Graph::inference();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        let mut t = t.clone();
                        if j == vi {
                            t.data_mut()[e] += delta;
                        }
                        g.constant(t)
                    })
                    .collect();
                let l = f(&g, &vars);
                g.scalar(l)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let denom = numeric.abs().max(analytic[e].abs()).max(1e-6);
            let rel = (numeric - analytic[e]).abs() / denom;
            assert!(rel < 1e-4, "input {vi} elem {e}: numeric {numeric} analytic {}", analytic[e]);
        }
    }
}

#[test]
fn gradcheck_primitive_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random(&mut rng, &[3, 4], 1.0);
    let b = random(&mut rng, &[4, 2], 1.0);
    check_grads(vec![a.clone(), b], |g, v| {
        let m = g.matmul(v[0], v[1]).unwrap();
        let s = g.softmax_rows(m, 0.7).unwrap();
        let w = g.constant(Tensor::new(vec![3, 2], vec![1.0, -2.0, 0.5, 3.0, -1.0, 0.25]).unwrap());
        let prod = g.matmul(g.gather_rows(s, &[0, 1, 2]).unwrap(), g.constant(Tensor::identity(2))).unwrap();
        g.sum(g.add(prod, g.scale(w, 0.0)).unwrap())
    });
    let gain = random(&mut rng, &[4], 1.0);
    let bias = random(&mut rng, &[4], 1.0);
    let weights = random(&mut rng, &[3, 4], 1.0);
    check_grads(vec![a, gain, bias], move |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2]).unwrap();
        let y = g.gelu(y);
        let w = g.constant(weights.clone());
        let prod = g.matmul(y, g.constant(Tensor::identity(4))).unwrap();
        let masked = g.add(prod, w).unwrap();
        let sq = g.smooth_l1(masked, g.constant(Tensor::zeros(&[3, 4]))).unwrap();
        sq
    });
}

#[test]
fn gradcheck_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let d = random(&mut rng, &[3, 5], 2.0);
    let t = random(&mut rng, &[3, 5], 2.0);
    check_grads(vec![d.clone(), t.clone()], |g, v| g.kl_divergence(v[0], v[1]).unwrap());
    check_grads(vec![d], |g, v| g.cross_entropy(v[0], &[0, 4, 2]).unwrap());
    let x = random(&mut rng, &[2, 3], 3.0);
    let y = random(&mut rng, &[2, 3], 3.0);
    check_grads(vec![x, y], |g, v| g.smooth_l1(v[0], v[1]).unwrap());
}

#[test]
fn gradcheck_attention_embedding_concat() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let q = random(&mut rng, &[3, 4], 1.0);
    let k_new = random(&mut rng, &[3, 4], 1.0);
    let v_new = random(&mut rng, &[3, 4], 1.0);
    let table = random(&mut rng, &[5, 4], 1.0);
    let k_cached = random(&mut rng, &[2, 4], 1.0);
    check_grads(vec![q, k_new, v_new, table], move |g, v| {
        let kc = g.constant(k_cached.clone());
        let k = g.concat_rows(kc, v[1]).unwrap();
        let vals = g.concat_rows(g.embedding(v[3], &[4, 0]).unwrap(), v[2]).unwrap();
        let mask = Rc::new(AttnMask::causal(2, 3));
        let out = g.attention(v[0], k, vals, 2, mask).unwrap();
        let target = g.constant(Tensor::new(vec![3, 4], (0..12).map(|i| i as f64 * 0.1).collect()).unwrap());
        g.smooth_l1(out, target).unwrap()
    });
}

#[test]
fn attention_rows_are_stochastic_and_masked() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let g = Graph::inference();
    let q = g.constant(random(&mut rng, &[4, 6], 3.0));
    let k = g.constant(random(&mut rng, &[4, 6], 3.0));
    let v = g.constant(random(&mut rng, &[4, 6], 3.0));
    let out = g.attention(q, k, v, 3, Rc::new(AttnMask::causal(0, 4))).unwrap();
    let probs = g.attention_probs(out).unwrap();
    for h in 0..3 {
        for i in 0..4 {
            let row = &probs[(h * 4 + i) * 4..(h * 4 + i + 1) * 4];
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row[i + 1..].iter().all(|&p| p == 0.0));
        }
    }
}

#[test]
fn empty_attention_row_outputs_zero() {
    let g = Graph::inference();
    let q = g.constant(Tensor::new(vec![2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap());
    let k = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let v = g.constant(Tensor::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
    let out = g.attention(q, k, v, 1, Rc::new(AttnMask::strictly_before(2, 2))).unwrap();
    assert_eq!(&*g.data(out), &[0.0, 0.0, 3.0, 4.0]);
}

#[test]
fn param_leaves_route_gradients_by_name() {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap(), true).unwrap();
    store.insert("frozen", Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap(), false).unwrap();
    let grads = {
        let g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap());
        let w = g.param(&store, "w").unwrap();
        let f = g.param(&store, "frozen").unwrap();
        let y = g.add(g.matmul(x, w).unwrap(), g.matmul(x, f).unwrap()).unwrap();
        let l = g.sum(y);
        g.backward(l).unwrap()
    };
    assert_eq!(grads.param("w").unwrap(), &[3.0, 4.0]);
    assert!(grads.param("frozen").is_none());
    store.accumulate(&grads).unwrap();
    store.accumulate(&grads).unwrap();
    assert_eq!(store.get("w").unwrap().grad.as_ref().unwrap().data(), &[6.0, 8.0]);
}

#[test]
fn repeated_evaluation_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let a = random(&mut rng, &[5, 8], 1.0);
    let b = random(&mut rng, &[8, 8], 1.0);
    let run = || {
        let g = Graph::inference();
        let x = g.matmul(g.constant(a.clone()), g.constant(b.clone())).unwrap();
        let y = g.attention(x, x, x, 2, Rc::new(AttnMask::causal(0, 5))).unwrap();
        let bits: Vec<u64> = g.data(y).iter().map(|v| v.to_bits()).collect();
        bits
    };
    assert_eq!(run(), run());
}
