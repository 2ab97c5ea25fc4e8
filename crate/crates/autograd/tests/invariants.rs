use gunsight_autograd::{softmax_rows, Graph, Tensor};
use proptest::prelude::*;

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-3.0f64..3.0, n).prop_map(move |d| Tensor::new(shape.clone(), d))
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(t in (1usize..5, 1usize..6).prop_flat_map(|(r, c)| tensor(vec![r, c]))) {
        let s = softmax_rows(&t);
        for r in 0..t.dim(0) {
            let row = s.row(r);
            prop_assert!(row.iter().all(|&p| p > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_transpose_identity(
        (a, b) in (1usize..4, 1usize..4, 1usize..4)
            .prop_flat_map(|(n, k, m)| (tensor(vec![n, k]), tensor(vec![k, m])))
    ) {
        // (AB)^T == B^T A^T
        let mut g = Graph::new();
        let va = g.constant(a);
        let vb = g.constant(b);
        let ab = g.matmul(va, vb);
        let lhs = g.transpose(ab);
        let bt = g.transpose(vb);
        let at = g.transpose(va);
        let rhs = g.matmul(bt, at);
        prop_assert!(close(g.value(lhs).data(), g.value(rhs).data(), 1e-12));
    }

    #[test]
    fn conv_is_linear_in_the_input(
        (x, y, w) in (1usize..3, 3usize..6)
            .prop_flat_map(|(c, s)| (tensor(vec![1, c, s, s]), tensor(vec![1, c, s, s]), tensor(vec![2, c, 3, 3])))
    ) {
        let mut g = Graph::new();
        let zero = g.constant(Tensor::zeros(&[2]));
        let (vx, vy, vw) = (g.constant(x), g.constant(y), g.constant(w));
        let sum = g.add(vx, vy);
        let conv_sum = g.conv2d(sum, vw, zero, 1, 1);
        let cx = g.conv2d(vx, vw, zero, 1, 1);
        let cy = g.conv2d(vy, vw, zero, 1, 1);
        let split = g.add(cx, cy);
        prop_assert!(close(g.value(conv_sum).data(), g.value(split).data(), 1e-10));
    }

    #[test]
    fn backward_of_sum_is_ones(t in (1usize..4, 1usize..4).prop_flat_map(|(r, c)| tensor(vec![r, c]))) {
        let mut g = Graph::new();
        let p = g.param(t.clone());
        let s = g.sum(p);
        let grads = g.backward(s);
        prop_assert!(grads.get(p).unwrap().data().iter().all(|&v| v == 1.0));
    }
}
