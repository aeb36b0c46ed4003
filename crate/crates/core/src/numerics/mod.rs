//! Minimal dense-tensor engine with reverse-mode automatic differentiation.

pub mod check;
pub mod graph;
pub mod kernels;
pub mod scalar;
pub mod tensor;

pub use check::{finite_diff_check, finite_diff_check_multi};
pub use graph::{Graph, GraphError, RowLists, Var};
pub use scalar::Scalar;
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randt(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn matmul_identity_and_zeros() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let eye = g.constant(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let out = g.matmul(a, eye);
        assert_eq!(g.value(out).data(), g.value(a).data());

        let z = g.constant(Tensor::zeros(&[3, 4]));
        let b = g.constant(Tensor::full(&[4, 2], 7.0));
        let zz = g.matmul(z, b);
        assert_eq!(g.value(zz).data(), Tensor::<f64>::zeros(&[3, 2]).data());
    }

    #[test]
    fn matmul_oracle_case() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(Tensor::from_vec(&[2, 1], vec![5.0, 6.0]));
        let out = g.matmul(a, b);
        assert_eq!(g.value(out).data(), &[17.0, 39.0]);
    }

    #[test]
    #[should_panic(expected = "inner dimension mismatch")]
    fn matmul_shape_error() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let _ = g.matmul(a, b);
    }

    #[test]
    fn softmax_uniform_and_closed_form() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_vec(&[1, 4], vec![0.3; 4]));
        let y = g.softmax(x, 1);
        for &v in g.value(y).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        // [0, ln 3] -> [0.25, 0.75]
        let x2 = g.constant(Tensor::from_vec(&[1, 2], vec![0.0, 3.0_f64.ln()]));
        let y2 = g.softmax(x2, 1);
        assert!((g.value(y2).data()[0] - 0.25).abs() < 1e-12);
        assert!((g.value(y2).data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance_and_row_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let x = randt(&[3, 5], &mut rng);
            let shifted = x.map(|v| v + 11.75);
            let mut g = Graph::<f64>::new();
            let a = g.constant(x);
            let b = g.constant(shifted);
            let ya = g.softmax(a, 1);
            let yb = g.softmax(b, 1);
            for (u, v) in g.value(ya).data().iter().zip(g.value(yb).data()) {
                assert!((u - v).abs() < 1e-12);
            }
            for r in 0..3 {
                let s: f64 = g.value(ya).data()[r * 5..(r + 1) * 5].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_axis_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_vec(&[2, 2], vec![0.0, 5.0, 3.0_f64.ln(), 5.0]));
        let y = g.softmax(x, 0);
        // column 0: softmax([0, ln3]) = [0.25, 0.75]
        assert!((g.value(y).data()[0] - 0.25).abs() < 1e-12);
        assert!((g.value(y).data()[2] - 0.75).abs() < 1e-12);
        // column 1: equal values -> 0.5 each
        assert!((g.value(y).data()[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn backward_linear_and_square() {
        // loss = sum(x) -> grad ones
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]), true);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 6]);

        // loss = x^2 at x=3 -> grad 6
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(3.0), true);
        let y = g.mul(x, x);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!((g.grad(x).unwrap().item() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]), true);
        match g.backward(x) {
            Err(GraphError::NonScalarLoss(shape)) => assert_eq!(shape, vec![2]),
            other => panic!("expected NonScalarLoss, got {other:?}"),
        }
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(GraphError::StaleGraph)));

        let mut ng = Graph::<f64>::no_grad();
        let x = ng.leaf(Tensor::scalar(1.0), true);
        assert!(matches!(ng.backward(x), Err(GraphError::NoGrad)));
    }

    #[test]
    #[should_panic(expected = "non-finite values produced by op `exp`")]
    fn nan_guard_panics() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::scalar(1e300));
        let _ = g.exp(x);
    }

    #[test]
    fn finite_diff_trivial_cases() {
        // linear: exact
        let x = Tensor::from_vec(&[3], vec![0.3, -1.2, 2.0]);
        let err = finite_diff_check(|g, v| g.sum(v), &x, 1e-6);
        assert!(err < 1e-10, "sum check err {err}");
        // quadratic
        let x = Tensor::scalar(3.0);
        let err = finite_diff_check(
            |g, v| {
                let y = g.mul(v, v);
                g.sum(y)
            },
            &x,
            1e-6,
        );
        assert!(err < 1e-9, "square check err {err}");
    }

    #[test]
    fn finite_diff_random_composites() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..5 {
            let x = randt(&[3, 4], &mut rng);
            let w = randt(&[4, 3], &mut rng);
            let err = finite_diff_check_multi(
                |g, vs| {
                    let y = g.matmul(vs[0], vs[1]);
                    let z = g.gelu(y);
                    let sm = g.softmax(z, 1);
                    let e = g.exp(sm);
                    let a = g.abs(e);
                    g.sum(a)
                },
                &[x, w],
                1e-6,
            );
            assert!(err < 1e-5, "trial {trial}: composite err {err}");
        }
    }

    #[test]
    fn finite_diff_each_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let h = 1e-6;

        let x = randt(&[4, 6], &mut rng);
        let b = randt(&[6], &mut rng);
        let err = finite_diff_check_multi(
            |g, vs| {
                let y = g.add_bias(vs[0], vs[1]);
                let y = g.softplus(y);
                g.sum(y)
            },
            &[x.clone(), b],
            h,
        );
        assert!(err < 1e-5, "add_bias/softplus {err}");

        let gamma = randt(&[6], &mut rng).map(|v| v + 1.5);
        let beta = randt(&[6], &mut rng);
        let err = finite_diff_check_multi(
            |g, vs| {
                let y = g.layer_norm(vs[0], vs[1], vs[2], 1e-5);
                let z = g.mul(y, y);
                g.sum(z)
            },
            &[x.clone(), gamma, beta],
            h,
        );
        assert!(err < 1e-5, "layer_norm {err}");

        let err = finite_diff_check(
            |g, v| {
                let a0 = g.slice_rows(v, 1, 2);
                let a = g.slice_cols(a0, 0, 3);
                let b = g.slice_cols(v, 2, 3);
                let bc = g.slice_rows(b, 0, 2);
                let m = g.matmul_nt(a, bc);
                let sm = g.causal_softmax(m);
                g.sum(sm)
            },
            &x,
            h,
        );
        assert!(err < 1e-5, "slice/matmul_nt/causal {err}");

        let t = Tensor::scalar(rng.gen_range(0.5..2.0));
        let err = finite_diff_check_multi(
            |g, vs| {
                let y = g.mul_scalar_var(vs[0], vs[1]);
                let o = g.sdf_opacity(y);
                let w = g.survival_weights(o);
                let s = g.sum_cols(w);
                g.sum(s)
            },
            &[randt(&[3, 5], &mut rng), t],
            h,
        );
        assert!(err < 1e-5, "opacity/survival {err}");

        let vol = randt(&[3, 4, 3, 2], &mut rng);
        let pos = Tensor::from_vec(
            &[5, 3],
            (0..15)
                .map(|i| rng.gen_range(0.2..((if i % 3 == 0 { 2.7 } else { 2.2 }) as f64)))
                .collect(),
        );
        let err = finite_diff_check_multi(
            |g, vs| {
                let s = g.trilinear_sample(vs[0], vs[1]);
                let s2 = g.mul(s, s);
                g.sum(s2)
            },
            &[vol, pos],
            h,
        );
        assert!(err < 1e-5, "trilinear {err}");

        let img = randt(&[6, 4, 3], &mut rng);
        let w2 = randt(&[3, 3, 3, 4], &mut rng);
        let b2 = randt(&[4], &mut rng);
        let err = finite_diff_check_multi(
            |g, vs| {
                let y = g.conv2d(vs[0], vs[1], vs[2], 2);
                let y = g.gelu(y);
                g.sum(y)
            },
            &[img, w2, b2],
            h,
        );
        assert!(err < 1e-5, "conv2d {err}");

        let volx = randt(&[3, 3, 2, 2], &mut rng);
        let w3 = randt(&[3, 3, 3, 2, 3], &mut rng);
        let b3 = randt(&[3], &mut rng);
        let err = finite_diff_check_multi(
            |g, vs| {
                let y = g.conv3d(vs[0], vs[1], vs[2]);
                let sq = g.mul(y, y);
                g.sum(sq)
            },
            &[volx, w3, b3],
            h,
        );
        assert!(err < 1e-5, "conv3d {err}");

        let grid = randt(&[4, 4, 3], &mut rng);
        let err = finite_diff_check(
            |g, v| {
                let up = g.upsample2x(v);
                let mx = g.region_max_pool(up, (2, 2));
                let av = g.region_avg_pool(up, (4, 2));
                let s1 = g.sum(mx);
                let s2 = g.sum(av);
                let sq = g.mul(s2, s2);
                g.add(s1, sq)
            },
            &grid,
            h,
        );
        assert!(err < 1e-5, "pooling {err}");

        let table = randt(&[7, 4], &mut rng);
        let err = finite_diff_check(
            |g, v| {
                let rows = g.gather_rows(v, &[0, 3, 3, 6]);
                let sq = g.mul(rows, rows);
                g.sum(sq)
            },
            &table,
            h,
        );
        assert!(err < 1e-5, "gather_rows {err}");

        let feats = randt(&[6, 3], &mut rng);
        let lists: RowLists = std::sync::Arc::new(vec![vec![0, 2, 4], vec![], vec![1, 2]]);
        let err = finite_diff_check(
            move |g, v| {
                let pooled = g.scatter_mean_rows(v, lists.clone());
                let sq = g.mul(pooled, pooled);
                g.sum(sq)
            },
            &feats,
            h,
        );
        assert!(err < 1e-5, "scatter_mean_rows {err}");

        let logits = randt(&[5, 7], &mut rng);
        let targets = vec![2usize, 0, 6, 3, 1];
        let mask = vec![false, true, true, false, true];
        let err = finite_diff_check(
            move |g, v| g.cross_entropy(v, &targets, &mask),
            &logits,
            h,
        );
        assert!(err < 1e-5, "cross_entropy {err}");

        let parts = randt(&[4, 3], &mut rng);
        let err = finite_diff_check(
            |g, v| {
                let a = g.slice_rows(v, 0, 2);
                let bpart = g.slice_rows(v, 2, 2);
                let cat = g.concat_cols(&[a, bpart]);
                let cat2 = g.concat_rows(&[cat, cat]);
                let r = g.reshape(cat2, &[8, 3]);
                let sq = g.mul(r, r);
                g.sum(sq)
            },
            &parts,
            h,
        );
        assert!(err < 1e-5, "concat/reshape {err}");
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = randt(&[5, 5], &mut rng);
        let run = |x: &Tensor<f64>| -> Vec<f64> {
            let mut g = Graph::no_grad();
            let v = g.leaf(x.clone(), false);
            let m = g.matmul(v, v);
            let s = g.softmax(m, 1);
            let e = g.gelu(s);
            g.value(e).data().to_vec()
        };
        let a = run(&x);
        let b = run(&x);
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn trilinear_graph_cases() {
        let mut g = Graph::<f64>::new();
        let vol = g.constant(Tensor::from_vec(
            &[2, 2, 2, 1],
            vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0],
        ));
        // on-node
        let p = g.constant(Tensor::from_vec(&[1, 3], vec![1.0, 1.0, 0.0]));
        let s = g.trilinear_sample(vol, p);
        assert_eq!(g.value(s).data(), &[6.0]);
        // far outside == nearest boundary node
        let pf = g.constant(Tensor::from_vec(&[1, 3], vec![9.0, -9.0, 9.0]));
        let sf = g.trilinear_sample(vol, pf);
        let pb = g.constant(Tensor::from_vec(&[1, 3], vec![1.0, 0.0, 1.0]));
        let sb = g.trilinear_sample(vol, pb);
        assert_eq!(g.value(sf).data(), g.value(sb).data());
    }

    #[test]
    fn region_max_pool_cases() {
        let mut g = Graph::<f64>::new();
        // 2x2 single-channel grid [[1,5],[3,2]] (x-major rows)
        let x = g.constant(Tensor::from_vec(&[2, 2, 1], vec![1.0, 5.0, 3.0, 2.0]));
        let q = g.region_max_pool(x, (1, 1));
        assert_eq!(g.value(q).data(), &[5.0]);

        let cst = g.constant(Tensor::full(&[4, 4, 3], 0.25));
        let qm = g.region_max_pool(cst, (2, 2));
        let qa = g.region_avg_pool(cst, (2, 2));
        assert_eq!(g.value(qm).data(), vec![0.25; 12].as_slice());
        assert_eq!(g.value(qa).data(), vec![0.25; 12].as_slice());
    }

    #[test]
    fn max_pool_matches_exhaustive_region_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let x = randt(&[8, 8, 5], &mut rng);
            let mut g = Graph::<f64>::new();
            let v = g.constant(x.clone());
            let q = g.region_max_pool(v, (2, 2));
            for rx in 0..2 {
                for ry in 0..2 {
                    for ch in 0..5 {
                        let mut best = f64::NEG_INFINITY;
                        for ix in rx * 4..(rx + 1) * 4 {
                            for iy in ry * 4..(ry + 1) * 4 {
                                best = best.max(x.data()[(ix * 8 + iy) * 5 + ch]);
                            }
                        }
                        assert_eq!(g.value(q).data()[(rx * 2 + ry) * 5 + ch], best);
                    }
                }
            }
        }
    }

    #[test]
    fn survival_weight_invariants_hold_on_random_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..200 {
            let st = randt(&[4, 9], &mut rng).map(|v| v * 4.0);
            let mut g = Graph::<f64>::new();
            let v = g.constant(st);
            let alpha = g.sdf_opacity(v);
            let w = g.survival_weights(alpha);
            for &a in g.value(alpha).data() {
                assert!((0.0..=1.0).contains(&a));
            }
            for r in 0..4 {
                let ws = &g.value(w).data()[r * 8..(r + 1) * 8];
                assert!(ws.iter().all(|&x| x >= 0.0));
                let total: f64 = ws.iter().sum();
                assert!(total <= 1.0 + 1e-12, "weight sum {total}");
            }
        }
    }
}
