//! Dense-tensor arithmetic with reverse-mode differentiation.

mod adam;
mod fdcheck;
mod graph;
mod kernels;
mod params;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use fdcheck::{check_grad, rel_err, FdReport, DEFAULT_STEP};
pub use graph::{Graph, Var};
pub use params::{ParamEntry, ParamId, ParamStore};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn t2(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_passes_through() {
        let mut g = Graph::new();
        let a = g.leaf(t2(&[vec![1.0, 0.0], vec![0.0, 1.0]])).unwrap();
        let b = g.leaf(t2(&[vec![3.0, 4.0], vec![5.0, 6.0]])).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_hand_case() {
        let mut g = Graph::new();
        let a = g.leaf(t2(&[vec![1.0, 2.0]])).unwrap();
        let b = g.leaf(t2(&[vec![3.0], vec![4.0]])).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_dim_error() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.leaf(Tensor::zeros(&[2, 2])).unwrap();
        assert!(matches!(g.matmul(a, b), Err(Error::Dim(_))));
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(0.0)).unwrap();
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.value(y).item(), 0.5);
    }

    #[test]
    fn relu_negative_is_zero_with_zero_grad() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(-3.0).with_requires_grad()).unwrap();
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).item(), 0.0);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0]);
    }

    #[test]
    fn log_of_non_positive_is_domain_error() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(-1.0)).unwrap();
        assert!(matches!(g.log(x), Err(Error::Domain(_))));
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap()).unwrap();
        let y = g.softmax(x, 1).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);

        let x = g.leaf(Tensor::new(vec![1, 2], vec![1000.0, 1000.0]).unwrap()).unwrap();
        let y = g.softmax(x, 1).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g
            .leaf(Tensor::new(vec![3, 4], (0..12).map(|v| (v as f64).cos() * 7.0).collect()).unwrap())
            .unwrap();
        let y = g.softmax(x, 1).unwrap();
        for r in 0..3 {
            let s: f64 = g.value(y).data()[r * 4..(r + 1) * 4].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layernorm_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[1, 4], 3.7)).unwrap();
        let gain = g.leaf(Tensor::full(&[4], 1.0)).unwrap();
        let bias = g.leaf(Tensor::zeros(&[4])).unwrap();
        let y = g.layernorm(x, gain, bias, 1e-5).unwrap();
        for v in g.value(y).data() {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn layernorm_two_point_row() {
        // mean 2, var 1, output = +-1/sqrt(1 + 1e-5)
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap()).unwrap();
        let gain = g.leaf(Tensor::full(&[2], 1.0)).unwrap();
        let bias = g.leaf(Tensor::zeros(&[2])).unwrap();
        let y = g.layernorm(x, gain, bias, 1e-5).unwrap();
        let want = 1.0 / (1.0 + 1e-5f64).sqrt();
        assert!((g.value(y).data()[0] + want).abs() < 1e-12);
        assert!((g.value(y).data()[1] - want).abs() < 1e-12);
        // |mean| of normalized rows stays tiny
        let m = (g.value(y).data()[0] + g.value(y).data()[1]) / 2.0;
        assert!(m.abs() < 1e-9);
    }

    #[test]
    fn conv2d_one_by_one_identity() {
        let mut g = Graph::new();
        let x = g
            .leaf(Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let k = g.leaf(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap()).unwrap();
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn conv2d_all_ones_3x3() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[3, 3, 1], 1.0)).unwrap();
        let k = g.leaf(Tensor::full(&[3, 3, 1, 1], 1.0)).unwrap();
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1]);
        assert_eq!(g.value(y).item(), 9.0);
    }

    #[test]
    fn conv2d_kernel_larger_than_padded_input_errors() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2, 2, 1])).unwrap();
        let k = g.leaf(Tensor::zeros(&[5, 5, 1, 1])).unwrap();
        assert!(matches!(g.conv2d(x, k, 1, 1), Err(Error::Dim(_))));
    }

    #[test]
    fn avgpool_hand_cases() {
        let mut g = Graph::new();
        let x = g
            .leaf(Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let y = g.avgpool2d(x, 2, 2).unwrap();
        assert_eq!(g.value(y).item(), 2.5);

        let c = g.leaf(Tensor::full(&[4, 4, 2], 0.3)).unwrap();
        let y = g.avgpool2d(c, 2, 2).unwrap();
        for v in g.value(y).data() {
            assert!((v - 0.3).abs() < 1e-15);
        }

        let small = g.leaf(Tensor::zeros(&[1, 1, 1])).unwrap();
        assert!(matches!(g.avgpool2d(small, 2, 2), Err(Error::Dim(_))));
    }

    #[test]
    fn bilinear_sample_nodes_and_midpoints() {
        let mut g = Graph::new();
        // scale=1 puts grid nodes at integer image coords
        let x = g
            .leaf(Tensor::new(vec![1, 2, 1], vec![0.0, 1.0]).unwrap())
            .unwrap();
        let y = g.bilinear_sample(x, &[(0.0, 0.0), (1.0, 0.0), (0.5, 0.0)], 1.0).unwrap();
        let got = g.value(y).data();
        assert_eq!(got[0], 0.0);
        assert_eq!(got[1], 1.0);
        assert_eq!(got[2], 0.5);

        assert!(matches!(
            g.bilinear_sample(x, &[(5.0, 0.0)], 1.0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut g = Graph::new();
        let w = g
            .leaf(Tensor::new(vec![3], vec![0.3, -1.0, 2.0]).unwrap().with_requires_grad())
            .unwrap();
        let s = g.sum(w).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_square_sum() {
        let mut g = Graph::new();
        let w = g
            .leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_requires_grad())
            .unwrap();
        let sq = g.mul(w, w).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_twice_is_contract_error() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::scalar(1.0).with_requires_grad()).unwrap();
        let s = g.sum(w).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::zeros(&[2]).with_requires_grad()).unwrap();
        assert!(matches!(g.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn same_graph_twice_is_bit_identical() {
        let run = || {
            let mut g = Graph::new();
            let x = g
                .leaf(Tensor::new(vec![2, 2], vec![0.1, -0.7, 2.3, 0.9]).unwrap())
                .unwrap();
            let y = g.softmax(x, 1).unwrap();
            let z = g.matmul(y, x).unwrap();
            g.value(z).data().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b); // exact bit equality
    }

    // ---- finite-difference oracle checks ----

    /// Deterministic pseudo-random values for FD tests.
    fn wiggle(n: usize, salt: u64) -> Vec<f64> {
        (0..n)
            .map(|i| {
                let v = ((i as f64 + 1.3) * 12.9898 + salt as f64 * 78.233).sin() * 43758.5453;
                (v - v.floor()) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn matmul_gradient_matches_fd() {
        let a0 = wiggle(20, 1);
        let b0 = wiggle(12, 2);
        let mut g = Graph::new();
        let a = g.leaf(Tensor::new(vec![5, 4], a0.clone()).unwrap().with_requires_grad()).unwrap();
        let b = g.leaf(Tensor::new(vec![4, 3], b0.clone()).unwrap().with_requires_grad()).unwrap();
        let c = g.matmul(a, b).unwrap();
        let s = g.sum(c).unwrap();
        g.backward(s).unwrap();

        let eval_a = |x: &[f64]| {
            let mut g = Graph::new();
            let a = g.leaf(Tensor::new(vec![5, 4], x.to_vec()).unwrap()).unwrap();
            let b = g.leaf(Tensor::new(vec![4, 3], b0.clone()).unwrap()).unwrap();
            let c = g.matmul(a, b).unwrap();
            let s = g.sum(c).unwrap();
            Ok(g.value(s).item())
        };
        let rep = check_grad(eval_a, &a0, g.grad(a).unwrap(), DEFAULT_STEP).unwrap();
        assert!(rep.max_rel_err < 1e-6, "matmul dA rel err {}", rep.max_rel_err);

        let eval_b = |x: &[f64]| {
            let mut g = Graph::new();
            let a = g.leaf(Tensor::new(vec![5, 4], a0.clone()).unwrap()).unwrap();
            let b = g.leaf(Tensor::new(vec![4, 3], x.to_vec()).unwrap()).unwrap();
            let c = g.matmul(a, b).unwrap();
            let s = g.sum(c).unwrap();
            Ok(g.value(s).item())
        };
        let rep = check_grad(eval_b, &b0, g.grad(b).unwrap(), DEFAULT_STEP).unwrap();
        assert!(rep.max_rel_err < 1e-6, "matmul dB rel err {}", rep.max_rel_err);
    }

    #[test]
    fn sigmoid_gradient_at_one_matches_fd() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(1.0).with_requires_grad()).unwrap();
        let y = g.sigmoid(x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        let eval = |v: &[f64]| {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::scalar(v[0])).unwrap();
            let y = g.sigmoid(x).unwrap();
            Ok(g.value(y).item())
        };
        let rep = check_grad(eval, &[1.0], g.grad(x).unwrap(), DEFAULT_STEP).unwrap();
        assert!(rep.max_rel_err < 1e-7, "sigmoid rel err {}", rep.max_rel_err);
    }

    #[test]
    fn softmax_gradient_matches_fd() {
        let x0 = wiggle(8, 3);
        let probe = wiggle(8, 4);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2, 4], x0.clone()).unwrap().with_requires_grad()).unwrap();
        let y = g.softmax(x, 1).unwrap();
        let p = g.leaf(Tensor::new(vec![2, 4], probe.clone()).unwrap()).unwrap();
        let yp = g.mul(y, p).unwrap();
        let s = g.sum(yp).unwrap();
        g.backward(s).unwrap();

        let eval = |v: &[f64]| {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::new(vec![2, 4], v.to_vec()).unwrap()).unwrap();
            let y = g.softmax(x, 1).unwrap();
            let p = g.leaf(Tensor::new(vec![2, 4], probe.clone()).unwrap()).unwrap();
            let yp = g.mul(y, p).unwrap();
            let s = g.sum(yp).unwrap();
            Ok(g.value(s).item())
        };
        let rep = check_grad(eval, &x0, g.grad(x).unwrap(), DEFAULT_STEP).unwrap();
        assert!(rep.max_rel_err < 1e-6, "softmax rel err {}", rep.max_rel_err);
    }

    #[test]
    fn conv2d_gradient_matches_fd() {
        let x0 = wiggle(4 * 5 * 2, 5);
        let k0 = wiggle(3 * 3 * 2 * 3, 6);
        let run = |xv: &[f64], kv: &[f64]| -> (f64, Option<Vec<f64>>, Option<Vec<f64>>) {
            let mut g = Graph::new();
            let x = g
                .leaf(Tensor::new(vec![4, 5, 2], xv.to_vec()).unwrap().with_requires_grad())
                .unwrap();
            let k = g
                .leaf(Tensor::new(vec![3, 3, 2, 3], kv.to_vec()).unwrap().with_requires_grad())
                .unwrap();
            let y = g.conv2d(x, k, 2, 1).unwrap();
            let s = g.sum(y).unwrap();
            let val = g.value(s).item();
            g.backward(s).unwrap();
            (
                val,
                g.grad(x).map(|v| v.to_vec()),
                g.grad(k).map(|v| v.to_vec()),
            )
        };
        let (_, dx, dk) = run(&x0, &k0);
        let rep = check_grad(
            |v| Ok(run(v, &k0).0),
            &x0,
            dx.as_ref().unwrap(),
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-5, "conv dX rel err {}", rep.max_rel_err);
        let rep = check_grad(
            |v| Ok(run(&x0, v).0),
            &k0,
            dk.as_ref().unwrap(),
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-5, "conv dK rel err {}", rep.max_rel_err);
    }

    #[test]
    fn layernorm_gradient_matches_fd() {
        let x0 = wiggle(12, 7);
        let run = |xv: &[f64]| -> (f64, Option<Vec<f64>>) {
            let mut g = Graph::new();
            let x = g
                .leaf(Tensor::new(vec![3, 4], xv.to_vec()).unwrap().with_requires_grad())
                .unwrap();
            let gain = g.leaf(Tensor::new(vec![4], vec![1.1, 0.9, -0.5, 1.3]).unwrap()).unwrap();
            let bias = g.leaf(Tensor::new(vec![4], vec![0.1, 0.0, -0.2, 0.4]).unwrap()).unwrap();
            let y = g.layernorm(x, gain, bias, 1e-5).unwrap();
            let probe = g.leaf(Tensor::new(vec![3, 4], wiggle(12, 8)).unwrap()).unwrap();
            let yp = g.mul(y, probe).unwrap();
            let s = g.sum(yp).unwrap();
            let val = g.value(s).item();
            g.backward(s).unwrap();
            (val, g.grad(x).map(|v| v.to_vec()))
        };
        let (_, dx) = run(&x0);
        let rep = check_grad(|v| Ok(run(v).0), &x0, dx.as_ref().unwrap(), DEFAULT_STEP).unwrap();
        assert!(rep.max_rel_err < 1e-5, "layernorm rel err {}", rep.max_rel_err);
    }

    #[test]
    fn avgpool_gradient_splits_evenly() {
        let x0 = wiggle(4 * 4 * 1, 9);
        let mut g = Graph::new();
        let x = g
            .leaf(Tensor::new(vec![4, 4, 1], x0.clone()).unwrap().with_requires_grad())
            .unwrap();
        let y = g.avgpool2d(x, 2, 2).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        for v in g.grad(x).unwrap() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn fused_attention_gradient_matches_fd() {
        let (nq, nk, c, heads) = (3usize, 4usize, 6usize, 2usize);
        let q0 = wiggle(nq * c, 21);
        let k0 = wiggle(nk * c, 22);
        let v0 = wiggle(nk * c, 23);
        let probe = wiggle(nq * c, 24);
        let run = |qv: &[f64], kv: &[f64], vv: &[f64]| -> (f64, Vec<Vec<f64>>) {
            let mut g = Graph::new();
            let q = g.leaf(Tensor::new(vec![nq, c], qv.to_vec()).unwrap().with_requires_grad()).unwrap();
            let k = g.leaf(Tensor::new(vec![nk, c], kv.to_vec()).unwrap().with_requires_grad()).unwrap();
            let v = g.leaf(Tensor::new(vec![nk, c], vv.to_vec()).unwrap().with_requires_grad()).unwrap();
            let o = g.multi_head_attn(q, k, v, heads).unwrap();
            let p = g.leaf(Tensor::new(vec![nq, c], probe.clone()).unwrap()).unwrap();
            let op = g.mul(o, p).unwrap();
            let s = g.sum(op).unwrap();
            let val = g.value(s).item();
            g.backward(s).unwrap();
            let grads = [q, k, v]
                .iter()
                .map(|x| g.grad(*x).unwrap().to_vec())
                .collect();
            (val, grads)
        };
        let (_, grads) = run(&q0, &k0, &v0);
        let rep = check_grad(|x| Ok(run(x, &k0, &v0).0), &q0, &grads[0], DEFAULT_STEP).unwrap();
        assert!(rep.max_rel_err < 1e-6, "attn dQ rel err {}", rep.max_rel_err);
        let rep = check_grad(|x| Ok(run(&q0, x, &v0).0), &k0, &grads[1], DEFAULT_STEP).unwrap();
        assert!(rep.max_rel_err < 1e-6, "attn dK rel err {}", rep.max_rel_err);
        let rep = check_grad(|x| Ok(run(&q0, &k0, x).0), &v0, &grads[2], DEFAULT_STEP).unwrap();
        assert!(rep.max_rel_err < 1e-6, "attn dV rel err {}", rep.max_rel_err);
    }

    #[test]
    fn fused_attention_matches_composed_ops() {
        // one head, so softmax(QK^T/sqrt(c)) V is directly expressible
        let (nq, nk, c) = (3usize, 5usize, 4usize);
        let q0 = wiggle(nq * c, 31);
        let k0 = wiggle(nk * c, 32);
        let v0 = wiggle(nk * c, 33);
        let mut g = Graph::new();
        let q = g.leaf(Tensor::new(vec![nq, c], q0.clone()).unwrap()).unwrap();
        let k = g.leaf(Tensor::new(vec![nk, c], k0.clone()).unwrap()).unwrap();
        let v = g.leaf(Tensor::new(vec![nk, c], v0.clone()).unwrap()).unwrap();
        let fused = g.multi_head_attn(q, k, v, 1).unwrap();

        let scores = g.matmul_nt(q, k).unwrap();
        let scaled = g.scale(scores, 1.0 / (c as f64).sqrt()).unwrap();
        let p = g.softmax(scaled, 1).unwrap();
        let composed = g.matmul(p, v).unwrap();

        for (a, b) in g.value(fused).data().iter().zip(g.value(composed).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_gradient_matches_fd() {
        let x0 = wiggle(3 * 4 * 2, 10);
        let pts = vec![(1.3, 0.7), (2.9, 1.9), (0.0, 0.0)];
        let run = |xv: &[f64]| -> (f64, Option<Vec<f64>>) {
            let mut g = Graph::new();
            let x = g
                .leaf(Tensor::new(vec![3, 4, 2], xv.to_vec()).unwrap().with_requires_grad())
                .unwrap();
            let y = g.bilinear_sample(x, &pts, 1.0).unwrap();
            let s = g.sum(y).unwrap();
            let val = g.value(s).item();
            g.backward(s).unwrap();
            (val, g.grad(x).map(|v| v.to_vec()))
        };
        let (_, dx) = run(&x0);
        let rep = check_grad(|v| Ok(run(v).0), &x0, dx.as_ref().unwrap(), DEFAULT_STEP).unwrap();
        assert!(rep.max_rel_err < 1e-5, "bilinear rel err {}", rep.max_rel_err);
    }
}
