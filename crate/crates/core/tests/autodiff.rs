mod common;

use common::{op_cases, seeded_tensor, weighted_sum};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sceneqa::lm::prefix_causal_mask;
use sceneqa::nn::{EncoderBlock, FeedForward, MultiHeadAttention};
use sceneqa::tensor::{grad_check, grad_check_params, GradCheckOptions, Graph, ParamStore, Precision, Tensor};

#[test]
fn every_operation_passes_finite_differences() {
    for seed in 0..3 {
        for c in op_cases(seed) {
            let r = grad_check(&c.f, &c.inputs).unwrap();
            assert!(r.max_rel_err() < 1e-6, "{} (seed {seed}): {:?}", c.name, r.worst());
        }
    }
}

#[test]
fn attention_modules_pass_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new(Precision::F64);
    let x = store.insert("x", seeded_tensor(&mut rng, &[5, 8], -1.0, 1.0)).unwrap();
    let kv = store.insert("kv", seeded_tensor(&mut rng, &[3, 6], -1.0, 1.0)).unwrap();
    let cross = MultiHeadAttention::with_kv_dim(&mut store, "cross", 8, 6, 2, &mut rng).unwrap();
    let block = EncoderBlock::new(&mut store, "block", 8, 2, &mut rng).unwrap();
    let ffn = FeedForward::new(&mut store, "ffn", 8, &mut rng).unwrap();
    let mask = prefix_causal_mask(2, 3);
    let r = grad_check_params(
        &store,
        |g, s| {
            let xv = g.param(s, x)?;
            let kvv = g.param(s, kv)?;
            let a = cross.forward(g, s, xv, kvv, None)?;
            let h = block.forward(g, s, a.out, Some(&mask))?;
            let y = ffn.forward(g, s, h)?;
            weighted_sum(g, y)
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(r.max_rel_err() < 1e-5, "{:?}", r.worst());
}

#[test]
fn repeated_backward_gives_identical_gradients() {
    let mut g = Graph::new();
    let a = g.variable(Tensor::new(vec![2, 2], vec![0.1, -0.4, 0.9, 0.3]).unwrap()).unwrap();
    let s = g.softmax_rows(a).unwrap();
    let y = weighted_sum(&mut g, s).unwrap();
    g.backward(y).unwrap();
    let first = g.grad(a).unwrap().to_vec();
    g.backward(y).unwrap();
    assert_eq!(g.grad(a).unwrap(), first.as_slice());
}

#[test]
fn non_finite_values_are_rejected() {
    let mut g = Graph::new();
    assert!(g.variable(Tensor::new(vec![1], vec![f64::NAN]).unwrap()).is_err());
    let big = g.variable(Tensor::new(vec![1], vec![800.0]).unwrap()).unwrap();
    let err = g.exp(big).unwrap_err();
    assert!(err.is_numeric(), "{err}");
}

#[test]
fn single_precision_graph_rounds_values() {
    let mut g = Graph::with_precision(Precision::F32);
    let a = g.variable(Tensor::new(vec![1, 1], vec![0.1]).unwrap()).unwrap();
    let b = g.scale(a, 3.0).unwrap();
    let v = g.value(b).item();
    assert_eq!(v, v as f32 as f64);
    assert_eq!(g.value(a).item(), 0.1f32 as f64);
}

fn dims() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..5, 1usize..5, 1usize..5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn matmul_chain_gradients(d in dims(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = seeded_tensor(&mut rng, &[d.0, d.1], -1.0, 1.0);
        let b = seeded_tensor(&mut rng, &[d.1, d.2], -1.0, 1.0);
        let r = grad_check(|g, p| {
            let y = g.matmul(p[0], p[1])?;
            let y = g.tanh(y)?;
            weighted_sum(g, y)
        }, &[a, b]).unwrap();
        prop_assert!(r.max_rel_err() < 1e-6, "{:?}", r.worst());
    }

    #[test]
    fn masked_softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = seeded_tensor(&mut rng, &[rows, cols], -20.0, 20.0);
        let mut mask: Vec<bool> = (0..rows * cols).map(|_| rng.random_bool(0.6)).collect();
        for i in 0..rows {
            mask[i * cols + rng.random_range(0..cols)] = true;
        }
        let mut g = Graph::new();
        let v = g.constant(x).unwrap();
        let s = g.softmax_rows_masked(v, &mask).unwrap();
        let out = g.value(s);
        for i in 0..rows {
            let row = out.row(i);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for j in 0..cols {
                if !mask[i * cols + j] {
                    prop_assert_eq!(row[j], 0.0);
                }
            }
        }
    }

    #[test]
    fn layer_norm_and_cross_entropy_gradients(t in 1usize..4, v in 3usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = seeded_tensor(&mut rng, &[t, v], -2.0, 2.0);
        let gain = seeded_tensor(&mut rng, &[v], 0.5, 1.5);
        let bias = seeded_tensor(&mut rng, &[v], -0.5, 0.5);
        let targets: Vec<usize> = (0..t).map(|_| rng.random_range(0..v)).collect();
        let r = grad_check(|g, p| {
            let y = g.layer_norm(p[0], p[1], p[2])?;
            g.cross_entropy(y, &targets, &vec![true; targets.len()])
        }, &[x, gain, bias]).unwrap();
        prop_assert!(r.max_rel_err() < 1e-5, "{:?}", r.worst());
    }
}
