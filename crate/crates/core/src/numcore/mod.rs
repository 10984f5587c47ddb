//! Deterministic dense-tensor arithmetic with a differentiable-computation
//! contract: every trainable forward pass can produce exact analytic
//! gradients, validated against central finite differences.

pub mod container;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod tensor;

pub use container::{fnv1a_hex, load_from_file, read_container, save_to_file, to_bytes,
                    write_container};
pub use gradcheck::{finite_diff_check, finite_diff_check_all, finite_diff_compare, FdReport,
                    FdSettings};
pub use graph::{DiffGraph, NodeId};
pub use tensor::{cosine, Tensor};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn rand_tensor(rng: &mut Rng, shape: Vec<usize>, scale: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = rng.normals(n).into_iter().map(|v| v * scale).collect();
        Tensor::new(shape, data).unwrap()
    }

    /// Reduces an m x n node to a scalar through two fixed random linear
    /// maps, so every entry influences the output with a distinct weight.
    fn reduce_to_scalar(g: &mut DiffGraph, y: NodeId, rng: &mut Rng) -> NodeId {
        let (m, n) = (g.value(y).rows(), g.value(y).cols());
        let w = g.constant(rand_tensor(rng, vec![n, 1], 1.0));
        let u = g.constant(rand_tensor(rng, vec![1, m], 1.0));
        let col = g.matmul(y, w).unwrap();
        g.matmul(u, col).unwrap()
    }

    fn assert_all_pass(g: &mut DiffGraph, h: f64, seed: u64) {
        let settings = FdSettings {
            h,
            max_coords: 24,
            seed,
        };
        for report in finite_diff_check_all(g, 1e-6, settings).unwrap() {
            assert!(
                report.passed,
                "param {} failed: rel err {:.3e} at h={h}",
                report.param, report.max_rel_err
            );
        }
    }

    fn for_seeds_and_steps(mut build: impl FnMut(&mut Rng) -> DiffGraph) {
        for seed in 0..20u64 {
            for &h in &[1e-6, 1e-5, 1e-4] {
                let mut rng = Rng::for_domain("fd-test", seed);
                let mut g = build(&mut rng);
                g.forward().unwrap();
                assert_all_pass(&mut g, h, seed);
            }
        }
    }

    #[test]
    fn fd_matmul() {
        for_seeds_and_steps(|rng| {
            let mut g = DiffGraph::new();
            let a = rand_tensor(rng, vec![3, 4], 1.0);
            let b = rand_tensor(rng, vec![4, 2], 1.0);
            let pa = g.param("a", a, true);
            let pb = g.param("b", b, true);
            let y = g.matmul(pa, pb).unwrap();
            let out = reduce_to_scalar(&mut g, y, rng);
            g.set_output(out);
            g
        });
    }

    #[test]
    fn fd_softmax_rows() {
        for_seeds_and_steps(|rng| {
            let mut g = DiffGraph::new();
            let x = g.param("x", rand_tensor(rng, vec![3, 5], 2.0), true);
            let y = g.softmax_rows(x);
            let out = reduce_to_scalar(&mut g, y, rng);
            g.set_output(out);
            g
        });
    }

    #[test]
    fn fd_layer_norm() {
        for_seeds_and_steps(|rng| {
            let mut g = DiffGraph::new();
            let x = g.param("x", rand_tensor(rng, vec![3, 6], 1.5), true);
            let gain = g.param("gain", rand_tensor(rng, vec![6], 1.0), true);
            let bias = g.param("bias", rand_tensor(rng, vec![6], 1.0), true);
            let y = g.layer_norm(x, gain, bias).unwrap();
            let out = reduce_to_scalar(&mut g, y, rng);
            g.set_output(out);
            g
        });
    }

    #[test]
    fn fd_cross_entropy() {
        for_seeds_and_steps(|rng| {
            let mut g = DiffGraph::new();
            let x = g.param("logits", rand_tensor(rng, vec![4, 3], 2.0), true);
            let out = g.cross_entropy_mean(x, vec![0, 2, 1, 1]).unwrap();
            g.set_output(out);
            g
        });
    }

    #[test]
    fn fd_elementwise_chain() {
        for_seeds_and_steps(|rng| {
            let mut g = DiffGraph::new();
            let x = g.param("x", rand_tensor(rng, vec![3, 4], 0.8), true);
            let t = g.tanh(x);
            let ge = g.gelu(t);
            let e = g.affine(ge, -0.5, 0.1);
            let ex = g.exp(e);
            let s = g.scale(ex, 1.7);
            let r = g.relu(s);
            let out = reduce_to_scalar(&mut g, r, rng);
            g.set_output(out);
            g
        });
    }

    #[test]
    fn fd_embed_and_structure_ops() {
        for_seeds_and_steps(|rng| {
            let mut g = DiffGraph::new();
            let table = g.param("table", rand_tensor(rng, vec![7, 4], 1.0), true);
            let e = g.embed_rows(table, &[3, 0, 6, 3]).unwrap();
            let head1 = g.slice_cols(e, 0, 2).unwrap();
            let head2 = g.slice_cols(e, 2, 2).unwrap();
            let merged = g.concat_cols(&[head2, head1]).unwrap();
            let top = g.slice_rows(merged, 0, 2).unwrap();
            let bottom = g.slice_rows(merged, 2, 2).unwrap();
            let back = g.concat_rows(&[bottom, top]).unwrap();
            let tr = g.transpose(back);
            let out = reduce_to_scalar(&mut g, tr, rng);
            g.set_output(out);
            g
        });
    }

    #[test]
    fn fd_broadcast_subtract_normalize() {
        for_seeds_and_steps(|rng| {
            let mut g = DiffGraph::new();
            let x = g.param("x", rand_tensor(rng, vec![4, 5], 1.0), true);
            let row = g.param("row", rand_tensor(rng, vec![1, 5], 1.0), true);
            let y = g.add_row_broadcast(x, row).unwrap();
            let anchor = g.constant(rand_tensor(rng, vec![4, 5], 1.0));
            let normed = g.row_l2_normalize(y).unwrap();
            let diff = g.sub(normed, anchor).unwrap();
            let out = g.mean_row_norms(diff);
            g.set_output(out);
            g
        });
    }

    #[test]
    fn fd_attention_composite() {
        // softmax(Q K^T / sqrt(d)) V with every projection trainable
        for_seeds_and_steps(|rng| {
            let mut g = DiffGraph::new();
            let x = g.param("x", rand_tensor(rng, vec![4, 6], 1.0), true);
            let wq = g.param("wq", rand_tensor(rng, vec![6, 6], 0.5), true);
            let wk = g.param("wk", rand_tensor(rng, vec![6, 6], 0.5), true);
            let wv = g.param("wv", rand_tensor(rng, vec![6, 6], 0.5), true);
            let q = g.matmul(x, wq).unwrap();
            let k = g.matmul(x, wk).unwrap();
            let v = g.matmul(x, wv).unwrap();
            let kt = g.transpose(k);
            let scores = g.matmul(q, kt).unwrap();
            let scaled = g.scale(scores, 1.0 / (6.0f64).sqrt());
            let attn = g.softmax_rows(scaled);
            let y = g.matmul(attn, v).unwrap();
            let out = reduce_to_scalar(&mut g, y, rng);
            g.set_output(out);
            g
        });
    }

    #[test]
    fn matmul_gradient_matches_ones_bt() {
        // d sum(A B) / dA = ones * B^T
        let mut rng = Rng::new(11);
        let mut g = DiffGraph::new();
        let a = g.param("a", rand_tensor(&mut rng, vec![3, 4], 1.0), true);
        let bt_t = rand_tensor(&mut rng, vec![4, 2], 1.0);
        let b = g.constant(bt_t.clone());
        let y = g.matmul(a, b).unwrap();
        let ones_r = g.constant(Tensor::new(vec![1, 3], vec![1.0; 3]).unwrap());
        let ones_c = g.constant(Tensor::new(vec![2, 1], vec![1.0; 2]).unwrap());
        let col = g.matmul(y, ones_c).unwrap();
        let out = g.matmul(ones_r, col).unwrap();
        g.set_output(out);
        g.forward().unwrap();
        g.backward().unwrap();
        let grad = g.grad("a").unwrap();
        for r in 0..3 {
            for c in 0..4 {
                let expect: f64 = bt_t.row(c).iter().sum();
                assert!((grad.at(r, c) - expect).abs() < 1e-12);
            }
        }
        // and the numeric check agrees
        let rep = finite_diff_check(&mut g, "a", 1e-6, FdSettings::default()).unwrap();
        assert!(rep.passed, "rel err {}", rep.max_rel_err);
    }

    #[test]
    fn linear_graph_error_is_tiny() {
        let mut rng = Rng::new(5);
        let mut g = DiffGraph::new();
        let a = g.param("a", rand_tensor(&mut rng, vec![2, 3], 1.0), true);
        let w = g.constant(rand_tensor(&mut rng, vec![3, 1], 1.0));
        let u = g.constant(rand_tensor(&mut rng, vec![1, 2], 1.0));
        let col = g.matmul(a, w).unwrap();
        let out = g.matmul(u, col).unwrap();
        g.set_output(out);
        g.forward().unwrap();
        let rep = finite_diff_check(&mut g, "a", 1e-6, FdSettings::default()).unwrap();
        assert!(rep.max_rel_err < 1e-9, "rel err {}", rep.max_rel_err);
    }

    #[test]
    fn corrupted_gradient_fails_check() {
        let mut rng = Rng::new(6);
        let mut g = DiffGraph::new();
        let a = g.param("a", rand_tensor(&mut rng, vec![3, 3], 1.0), true);
        let y = g.softmax_rows(a);
        let out = reduce_to_scalar(&mut g, y, &mut rng);
        g.set_output(out);
        g.forward().unwrap();
        g.backward().unwrap();
        let mut corrupted = g.grad("a").unwrap();
        for v in corrupted.data_mut() {
            *v *= 1.1;
        }
        let rep =
            finite_diff_compare(&mut g, "a", &corrupted, 1e-6, FdSettings::default()).unwrap();
        assert!(!rep.passed, "corrupted gradient should fail");
    }

    #[test]
    fn frozen_params_receive_no_gradient() {
        let mut rng = Rng::new(8);
        let mut g = DiffGraph::new();
        let a = g.param("a", rand_tensor(&mut rng, vec![2, 2], 1.0), true);
        let frozen = g.param("w", rand_tensor(&mut rng, vec![2, 2], 1.0), false);
        let y = g.matmul(a, frozen).unwrap();
        let out = reduce_to_scalar(&mut g, y, &mut rng);
        g.set_output(out);
        g.forward().unwrap();
        g.backward().unwrap();
        assert!(g.grad("a").is_some());
        assert!(g.grad("w").is_none());
        assert!(!g.is_trainable("w"));
    }

    #[test]
    fn backward_is_deterministic() {
        let build = |seed: u64| {
            let mut rng = Rng::new(seed);
            let mut g = DiffGraph::new();
            let x = g.param("x", rand_tensor(&mut rng, vec![4, 6], 1.0), true);
            let gain = g.constant(Tensor::new(vec![6], vec![1.0; 6]).unwrap());
            let bias = g.constant(Tensor::zeros(vec![6]));
            let ln = g.layer_norm(x, gain, bias).unwrap();
            let sm = g.softmax_rows(ln);
            let out = reduce_to_scalar(&mut g, sm, &mut rng);
            g.set_output(out);
            g.forward().unwrap();
            g.backward().unwrap();
            g.grad("x").unwrap()
        };
        let g1 = build(123);
        let g2 = build(123);
        for (a, b) in g1.data().iter().zip(g2.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn non_scalar_output_is_contract_error() {
        let mut g = DiffGraph::new();
        let a = g.param("a", Tensor::zeros(vec![2, 2]), true);
        g.set_output(a);
        g.forward().unwrap();
        assert!(g.backward().is_err());
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = DiffGraph::new();
        let a = g.param("a", Tensor::zeros(vec![2, 3]), true);
        let b = g.param("b", Tensor::zeros(vec![2, 3]), true);
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "got: {msg}");
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_rows_sum_to_one(
                vals in proptest::collection::vec(-1000.0f64..1000.0, 12..=12)
            ) {
                let mut out = vec![0.0; 12];
                kernels::softmax_rows(&vals, 3, 4, &mut out);
                for r in 0..3 {
                    let s: f64 = out[r * 4..(r + 1) * 4].iter().sum();
                    prop_assert!((s - 1.0).abs() < 1e-12);
                    prop_assert!(out[r * 4..(r + 1) * 4].iter().all(|v| *v >= 0.0));
                }
            }

            #[test]
            fn ops_preserve_finiteness(
                vals in proptest::collection::vec(-100.0f64..100.0, 6..=6)
            ) {
                let mut g = DiffGraph::new();
                let x = g.param("x", Tensor::new(vec![2, 3], vals).unwrap(), true);
                let sm = g.softmax_rows(x);
                let gain = g.constant(Tensor::new(vec![3], vec![1.0; 3]).unwrap());
                let bias = g.constant(Tensor::zeros(vec![3]));
                let ln = g.layer_norm(sm, gain, bias).unwrap();
                let t = g.tanh(ln);
                prop_assert!(g.value(t).all_finite());
            }
        }
    }
}
