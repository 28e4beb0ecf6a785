//! Finite-difference validation of every differentiable operation, plus
//! property tests for the tensor engine's structural laws.

mod common;

use common::{check_gradients, rand_tensor, rand_tensor_away_from_zero, FD_REL_TOL};
use fedconv::tensor::{conv_out_dim, tconv_out_dim};
use fedconv::{Graph, Tensor};
use proptest::prelude::*;

#[test]
fn conv2d_gradients() {
    for seed in 0..4 {
        let input = rand_tensor(&[2, 3, 5, 4], -1.0, 1.0, seed);
        let kernel = rand_tensor(&[2, 3, 3, 2], -1.0, 1.0, seed + 50);
        let probe = rand_tensor(&[2, 2, 3, 3], -1.0, 1.0, seed + 100);
        let err = check_gradients(
            |g, vars| {
                let y = g.conv2d(vars[0], vars[1], 1, 0).unwrap();
                let p = g.constant(probe.clone());
                g.dot(y, p).unwrap()
            },
            &[input, kernel],
        );
        assert!(err < FD_REL_TOL, "conv2d seed {seed}: rel err {err}");
    }
}

#[test]
fn strided_padded_conv2d_gradients() {
    let input = rand_tensor(&[1, 2, 6, 6], -1.0, 1.0, 7);
    let kernel = rand_tensor(&[2, 2, 3, 3], -1.0, 1.0, 8);
    let probe = rand_tensor(&[1, 2, 3, 3], -1.0, 1.0, 9);
    let err = check_gradients(
        |g, vars| {
            let y = g.conv2d(vars[0], vars[1], 2, 1).unwrap();
            let p = g.constant(probe.clone());
            g.dot(y, p).unwrap()
        },
        &[input, kernel],
    );
    assert!(err < FD_REL_TOL, "strided conv2d: rel err {err}");
}

#[test]
fn transposed_conv2d_gradients() {
    for seed in 0..4 {
        let input = rand_tensor(&[1, 2, 3, 3], -1.0, 1.0, seed);
        let kernel = rand_tensor(&[2, 3, 2, 3], -1.0, 1.0, seed + 60);
        let probe = rand_tensor(&[1, 3, 4, 5], -1.0, 1.0, seed + 120);
        let err = check_gradients(
            |g, vars| {
                let y = g.transposed_conv2d(vars[0], vars[1], 1, 0).unwrap();
                let p = g.constant(probe.clone());
                g.dot(y, p).unwrap()
            },
            &[input, kernel],
        );
        assert!(err < FD_REL_TOL, "tconv2d seed {seed}: rel err {err}");
    }
}

#[test]
fn mlr_and_relu_gradients() {
    for seed in 0..3 {
        let x = rand_tensor_away_from_zero(&[3, 4], seed);
        let err = check_gradients(
            |g, vars| {
                let y = g.mlr(vars[0], 0.85, 0.001);
                g.sum(y)
            },
            &[x.clone()],
        );
        assert!(err < FD_REL_TOL, "mlr seed {seed}: rel err {err}");
        let err = check_gradients(
            |g, vars| {
                let y = g.relu(vars[0]);
                g.sum(y)
            },
            &[x],
        );
        assert!(err < FD_REL_TOL, "relu seed {seed}: rel err {err}");
    }
}

#[test]
fn weight_norm_gradients() {
    for seed in 0..3 {
        let direction = rand_tensor(&[2, 1, 3, 3], 0.2, 1.0, seed);
        let magnitude = rand_tensor(&[2], 0.5, 2.0, seed + 10);
        let probe = rand_tensor(&[2, 1, 3, 3], -1.0, 1.0, seed + 20);
        let err = check_gradients(
            |g, vars| {
                let w = g.weight_norm(vars[0], vars[1]).unwrap();
                let p = g.constant(probe.clone());
                g.dot(w, p).unwrap()
            },
            &[direction, magnitude],
        );
        assert!(err < FD_REL_TOL, "weight_norm seed {seed}: rel err {err}");
    }
}

#[test]
fn cross_entropy_and_dense_gradients() {
    for seed in 0..3 {
        let x = rand_tensor(&[4, 6], -1.0, 1.0, seed);
        let w = rand_tensor(&[3, 6], -1.0, 1.0, seed + 30);
        let b = rand_tensor(&[3], -0.5, 0.5, seed + 40);
        let labels = vec![0, 2, 1, 2];
        let err = check_gradients(
            |g, vars| {
                let y = g.matmul_nt(vars[0], vars[1]).unwrap();
                let y = g.add_bias(y, vars[2]).unwrap();
                g.cross_entropy(y, &labels).unwrap()
            },
            &[x, w, b],
        );
        assert!(err < FD_REL_TOL, "dense+ce seed {seed}: rel err {err}");
    }
}

#[test]
fn scale_and_structural_op_gradients() {
    let x = rand_tensor(&[4, 1, 3, 2], -1.0, 1.0, 3);
    let s = rand_tensor(&[1], 0.5, 1.5, 4);
    let probe = rand_tensor(&[3, 4], -1.0, 1.0, 5);
    let err = check_gradients(
        |g, vars| {
            let y = g.scale(vars[0], vars[1]).unwrap();
            let a = g.narrow0(y, 0, 2).unwrap();
            let b = g.narrow0(y, 2, 2).unwrap();
            let c = g.concat0(&[a, b]).unwrap();
            let w = g.slices_to_conv_weight(c, 2, 2).unwrap();
            let flat = g.reshape(w, &[2, 3, 4]).unwrap();
            let first = g.narrow0(flat, 0, 1).unwrap();
            let first = g.reshape(first, &[3, 4]).unwrap();
            let p = g.constant(probe.clone());
            g.dot(first, p).unwrap()
        },
        &[x, s],
    );
    assert!(err < FD_REL_TOL, "structural ops: rel err {err}");
}

#[test]
fn quadratic_conv_loss_matches_finite_differences() {
    // loss = <conv(x,K), conv(x,K)>
    let x = rand_tensor(&[1, 1, 5, 5], -1.0, 1.0, 11);
    let k = rand_tensor(&[1, 1, 3, 3], -1.0, 1.0, 12);
    let err = check_gradients(
        |g, vars| {
            let y = g.conv2d(vars[0], vars[1], 1, 0).unwrap();
            g.dot(y, y).unwrap()
        },
        &[x, k],
    );
    assert!(err < FD_REL_TOL, "quadratic conv loss: rel err {err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_shape_law(h in 1usize..12, w in 1usize..12, k1 in 1usize..5, k2 in 1usize..5,
                      s in 1usize..3, p in 0usize..3) {
        prop_assume!(h + 2 * p >= k1 && w + 2 * p >= k2);
        let oh = conv_out_dim(h, k1, s, p).unwrap();
        let ow = conv_out_dim(w, k2, s, p).unwrap();
        prop_assert_eq!(oh, (h + 2 * p - k1) / s + 1);
        prop_assert_eq!(ow, (w + 2 * p - k2) / s + 1);
        // at stride 1 the transposed direction inverts it exactly
        if s == 1 && p == 0 {
            prop_assert_eq!(tconv_out_dim(oh, k1, 1, 0).unwrap(), h);
            prop_assert_eq!(tconv_out_dim(ow, k2, 1, 0).unwrap(), w);
        }
    }

    #[test]
    fn adjoint_identity(seed in 0u64..500, h in 2usize..7, w in 2usize..7,
                        k1 in 1usize..4, k2 in 1usize..4, s in 1usize..3) {
        // only configurations without floor loss admit a same-shaped adjoint
        prop_assume!(h >= k1 && w >= k2 && (h - k1) % s == 0 && (w - k2) % s == 0);
        let a = rand_tensor(&[2, 2, h, w], -1.0, 1.0, seed);
        let k = rand_tensor(&[3, 2, k1, k2], -1.0, 1.0, seed + 1);
        let mut g = Graph::new();
        let av = g.leaf(a);
        let kv = g.leaf(k);
        let conv = g.conv2d(av, kv, s, 0).unwrap();
        let b = rand_tensor(g.value(conv).shape(), -1.0, 1.0, seed + 2);
        let bv = g.leaf(b);
        let lhs = g.dot(conv, bv).unwrap();
        let tconv = g.transposed_conv2d(bv, kv, s, 0).unwrap();
        let rhs = g.dot(av, tconv).unwrap();
        let (l, r) = (g.value(lhs).item().unwrap(), g.value(rhs).item().unwrap());
        prop_assert!((l - r).abs() < 1e-10, "adjoint mismatch {} vs {}", l, r);
    }

    #[test]
    fn determinism_of_conv(seed in 0u64..200) {
        let x = rand_tensor(&[1, 2, 5, 5], -1.0, 1.0, seed);
        let k = rand_tensor(&[2, 2, 3, 3], -1.0, 1.0, seed + 7);
        let run = || {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone());
            let kv = g.leaf(k.clone());
            let y = g.conv2d(xv, kv, 1, 1).unwrap();
            g.value(y).data().to_vec()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn reshape_for_compression_roundtrip(o in 1usize..5, i in 1usize..5,
                                         k1 in 1usize..4, k2 in 1usize..4, seed in 0u64..100) {
        let w = rand_tensor(&[o, i, k1, k2], -1.0, 1.0, seed);
        let slices = fedconv::compress::reshape_for_compression(&w).unwrap();
        prop_assert_eq!(slices.len(), k1 * k2);
        let back = fedconv::compress::assemble_from_slices(&slices, &[o, i, k1, k2]).unwrap();
        prop_assert_eq!(back, w);
    }

    #[test]
    fn container_roundtrip(rows in 1usize..5, cols in 1usize..5, seed in 0u64..100) {
        let t = rand_tensor(&[rows, cols], -10.0, 10.0, seed);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        fedconv::model::write_named_tensors(
            &path,
            fedconv::model::MAGIC_PARAMS,
            &[("x".to_string(), &t)],
        )
        .unwrap();
        let back = fedconv::model::read_named_tensors(&path, fedconv::model::MAGIC_PARAMS).unwrap();
        prop_assert_eq!(&back[0].1, &t);
    }
}

#[test]
fn frozen_leaves_receive_no_gradients_through_pipeline() {
    // mirrors the fine-tuning setup: frozen input, trainable kernel
    let x = rand_tensor(&[1, 1, 4, 4], -1.0, 1.0, 1);
    let k = rand_tensor(&[1, 1, 2, 2], -1.0, 1.0, 2).with_grad();
    let mut g = Graph::new();
    let xv = g.leaf(x);
    let kv = g.leaf(k);
    let y = g.conv2d(xv, kv, 1, 0).unwrap();
    let loss = g.dot(y, y).unwrap();
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(xv).is_none());
    assert!(grads.get(kv).is_some());
    assert_eq!(grads.len(), 1);
}
