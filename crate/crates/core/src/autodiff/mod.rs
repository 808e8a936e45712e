//! Reverse-mode automatic differentiation over [`Tensor`](crate::Tensor)s.

mod gradcheck;
mod graph;

pub use gradcheck::{compare_gradients, grad_check, numeric_gradients, relative_error, GradCheckReport, ParamCheck};
pub use graph::{CustomOp, Graph, Var};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Result;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_cases() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::eye(2)).unwrap();
        let m = g.constant(t(&[&[1., 2.], &[3., 4.]])).unwrap();
        let p = g.matmul(i, m).unwrap();
        assert_eq!(g.value(p).data(), &[1., 2., 3., 4.]);

        let a = g.constant(t(&[&[1., 2.]])).unwrap();
        let b = g.constant(t(&[&[3.], &[4.]])).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, vec![3, 4]);
        let b = rand_tensor(&mut rng, vec![4, 2]);
        let mut expected = vec![0.0; 6];
        for i in 0..3 {
            for j in 0..2 {
                for k in 0..4 {
                    expected[i * 2 + j] += a.at(i, k) * b.at(k, j);
                }
            }
        }
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a).unwrap(), g.constant(b).unwrap());
        let c = g.matmul(va, vb).unwrap();
        for (x, y) in g.value(c).data().iter().zip(&expected) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_rejects_bad_inner_dims() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(vec![2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(vec![2, 3])).unwrap();
        assert!(matches!(g.matmul(a, b), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[&[5.0]])).unwrap();
        let y = g.softmax_rows(x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0]);

        let x = g.constant(t(&[&[0.0, 0.0]])).unwrap();
        let y = g.softmax_rows(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);

        let x = g.constant(t(&[&[1.0, 2.0, 3.0]])).unwrap();
        let y = g.softmax_rows(x).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (i, v) in g.value(y).data().iter().enumerate() {
            assert!((v - ((i + 1) as f64).exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_on_large_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, vec![5, 7]).map(|v| v * 400.0);
        let mut g = Graph::new();
        let vx = g.constant(x).unwrap();
        let y = g.softmax_rows(vx).unwrap();
        for r in 0..5 {
            let row = g.value(y).row(r);
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    fn ln(x: Tensor<f64>, eps: f64) -> Tensor<f64> {
        let n = x.cols();
        let mut g = Graph::new();
        let vx = g.constant(x).unwrap();
        let gain = g.constant(Tensor::full(vec![n], 1.0)).unwrap();
        let bias = g.constant(Tensor::zeros(vec![n])).unwrap();
        let y = g.layer_norm(vx, gain, bias, eps).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn layer_norm_examples() {
        let y = ln(t(&[&[3.0, 3.0, 3.0, 3.0]]), 1e-5);
        assert!(y.data().iter().all(|&v| v == 0.0));

        let y = ln(t(&[&[1.0, -1.0]]), 1e-300);
        assert!((y.data()[0] - 1.0).abs() < 1e-12 && (y.data()[1] + 1.0).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, vec![1, 6]);
        let gain = rand_tensor(&mut rng, vec![6]);
        let bias = rand_tensor(&mut rng, vec![6]);
        let eps = 1e-5;
        let mean = x.data().iter().sum::<f64>() / 6.0;
        let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
        let mut g = Graph::new();
        let (vx, vg, vb) = (
            g.constant(x.clone()).unwrap(),
            g.constant(gain.clone()).unwrap(),
            g.constant(bias.clone()).unwrap(),
        );
        let y = g.layer_norm(vx, vg, vb, eps).unwrap();
        for c in 0..6 {
            let expected = (x.data()[c] - mean) / (var + eps).sqrt() * gain.data()[c] + bias.data()[c];
            assert!((g.value(y).data()[c] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, vec![8, 16]).map(|v| 5.0 * v + 2.0);
        let y = ln(x, 1e-12);
        for r in 0..8 {
            let row = y.row(r);
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn backward_basic_rules() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(4.0)).unwrap();
        g.backward(x).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 1.0);

        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0)).unwrap();
        let y = g.param(Tensor::scalar(3.0)).unwrap();
        let p = g.mul(x, y).unwrap();
        g.backward(p).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 3.0);
        assert_eq!(g.grad(y).unwrap().item(), 2.0);
    }

    #[test]
    fn backward_accumulates_shared_inputs() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(1.5)).unwrap();
        let s = g.add(x, x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 2.0);
        // a second pass adds rather than overwrites
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 4.0);
    }

    #[test]
    fn backward_rejects_non_scalar_and_skips_constants() {
        let mut g = Graph::new();
        let x = g.param(Tensor::<f64>::zeros(vec![2, 2])).unwrap();
        assert!(matches!(g.backward(x), Err(crate::Error::Contract(_))));

        let c = g.constant(Tensor::full(vec![2, 2], 1.0)).unwrap();
        let s = g.add(x, c).unwrap();
        let root = g.sum(s).unwrap();
        g.backward(root).unwrap();
        assert!(g.grad(c).is_none());
        assert!(g.grad(x).is_some());
    }

    #[test]
    fn non_finite_values_are_errors() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(f64::MAX)).unwrap();
        assert!(matches!(g.scale(x, 10.0), Err(crate::Error::Numeric(_))));
    }

    #[test]
    fn gradient_reversal_rules() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(0.7)).unwrap();
        let y = g.grad_reverse(x, 1.0).unwrap();
        assert_eq!(g.value(y).item(), 0.7);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), -1.0);

        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(0.7)).unwrap();
        let y = g.grad_reverse(x, 0.0).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 0.0);
    }

    type Builder = fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

    fn check(name: &str, shapes: &[Vec<usize>], f: Builder) {
        let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
        let params: Vec<_> = shapes.iter().map(|s| rand_tensor(&mut rng, s.clone())).collect();
        let report = grad_check(f, &params, 1e-5, 1e-4).unwrap();
        assert!(report.pass, "{name}: {:?}", report.params);
    }

    fn wsum(g: &mut Graph<f64>, y: Var) -> Result<Var> {
        // weighting by a fixed pattern keeps every output element in play
        let w = Tensor::new(
            g.value(y).shape().to_vec(),
            (0..g.value(y).numel()).map(|i| ((i * 37 % 11) as f64 - 5.0) / 5.0).collect(),
        )?;
        let w = g.constant(w)?;
        let p = g.mul(y, w)?;
        g.sum(p)
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        check("matmul", &[vec![3, 4], vec![4, 2]], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            wsum(g, y)
        });
        check("add", &[vec![2, 3], vec![2, 3]], |g, v| {
            let y = g.add(v[0], v[1])?;
            wsum(g, y)
        });
        check("sub", &[vec![2, 3], vec![2, 3]], |g, v| {
            let y = g.sub(v[0], v[1])?;
            wsum(g, y)
        });
        check("mul", &[vec![2, 3], vec![2, 3]], |g, v| {
            let y = g.mul(v[0], v[1])?;
            wsum(g, y)
        });
        check("add_row", &[vec![4, 3], vec![3]], |g, v| {
            let y = g.add_row(v[0], v[1])?;
            wsum(g, y)
        });
        check("scale", &[vec![2, 2]], |g, v| {
            let y = g.scale(v[0], -1.7)?;
            wsum(g, y)
        });
        check("relu", &[vec![3, 5]], |g, v| {
            let y = g.relu(v[0])?;
            wsum(g, y)
        });
        check("softmax", &[vec![3, 4]], |g, v| {
            let y = g.softmax_rows(v[0])?;
            wsum(g, y)
        });
        check("layer_norm", &[vec![3, 6], vec![6], vec![6]], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            wsum(g, y)
        });
        check("mean_segments", &[vec![6, 3]], |g, v| {
            let y = g.mean_segments(v[0], 3)?;
            wsum(g, y)
        });
        check("repeat_rows", &[vec![2, 3]], |g, v| {
            let y = g.repeat_rows(v[0], 4)?;
            wsum(g, y)
        });
        check("grad_reverse", &[vec![2, 3]], |g, v| {
            // the reversal is a deliberate mismatch against the forward; check the
            // composition with a second reversal, which is an exact identity again
            let y = g.grad_reverse(v[0], 1.0)?;
            let y = g.grad_reverse(y, 1.0)?;
            wsum(g, y)
        });
        check("attention", &[vec![8, 3], vec![8, 3], vec![8, 2]], |g, v| {
            let y = g.attention(v[0], v[1], v[2], 4, 0.6)?;
            wsum(g, y)
        });
        check("concat_cols", &[vec![3, 2], vec![3, 4]], |g, v| {
            let y = g.concat_cols(&[v[0], v[1]])?;
            wsum(g, y)
        });
        check("transpose", &[vec![3, 2]], |g, v| {
            let y = g.transpose(v[0])?;
            wsum(g, y)
        });
        check("mean", &[vec![3, 2]], |g, v| g.mean(v[0]));
        check("cross_entropy", &[vec![4, 3]], |g, v| {
            g.cross_entropy(v[0], &[Some(0), None, Some(2), Some(1)])
        });
    }

    #[test]
    fn grad_check_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = vec![rand_tensor(&mut rng, vec![3, 3]), rand_tensor(&mut rng, vec![4])];
        let report = grad_check(
            |g: &mut Graph<f64>, v: &[Var]| {
                let a = g.mul(v[0], v[0])?;
                let b = g.mul(v[1], v[1])?;
                let (sa, sb) = (g.sum(a)?, g.sum(b)?);
                g.add(sa, sb)
            },
            &p,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.pass);

        let p = vec![rand_tensor(&mut rng, vec![3, 4]), rand_tensor(&mut rng, vec![4, 5])];
        let report = grad_check(
            |g: &mut Graph<f64>, v: &[Var]| {
                let logits = g.matmul(v[0], v[1])?;
                let probs = g.softmax_rows(logits)?;
                let logp = g.custom(&[probs], Box::new(Ln))?;
                let picked = g.cross_entropy(logp, &[Some(1), Some(4), Some(0)])?;
                Ok(picked)
            },
            &p,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "{:?}", report.params);
    }

    #[derive(Debug)]
    struct Ln;

    impl CustomOp<f64> for Ln {
        fn name(&self) -> &str {
            "ln"
        }
        fn forward(&self, inputs: &[&Tensor<f64>]) -> Result<Tensor<f64>> {
            Ok(inputs[0].map(f64::ln))
        }
        fn backward(&self, inputs: &[&Tensor<f64>], _: &Tensor<f64>, g: &Tensor<f64>) -> Vec<Tensor<f64>> {
            vec![g.zip_map(inputs[0], |gv, x| gv / x).unwrap()]
        }
    }

    /// Square with the derivative deliberately off by a factor of two.
    #[derive(Debug)]
    struct BrokenSquare;

    impl CustomOp<f64> for BrokenSquare {
        fn name(&self) -> &str {
            "broken_square"
        }
        fn forward(&self, inputs: &[&Tensor<f64>]) -> Result<Tensor<f64>> {
            Ok(inputs[0].map(|v| v * v))
        }
        fn backward(&self, inputs: &[&Tensor<f64>], _: &Tensor<f64>, g: &Tensor<f64>) -> Vec<Tensor<f64>> {
            vec![g.zip_map(inputs[0], |gv, x| gv * x).unwrap()]
        }
    }

    #[test]
    fn grad_check_catches_wrong_backward() {
        let p = vec![Tensor::from_f64(vec![3], &[0.9, -0.8, 0.5]).unwrap()];
        let report = grad_check(
            |g: &mut Graph<f64>, v: &[Var]| {
                let y = g.custom(&[v[0]], Box::new(BrokenSquare))?;
                g.sum(y)
            },
            &p,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!report.pass);
    }

    #[test]
    fn grad_check_rejects_nondeterministic_functions() {
        use std::cell::Cell;
        let calls = Cell::new(0.0);
        let p = vec![Tensor::scalar(1.0)];
        let result = grad_check(
            |g: &mut Graph<f64>, v: &[Var]| {
                calls.set(calls.get() + 1.0);
                g.scale(v[0], calls.get())
            },
            &p,
            1e-5,
            1e-4,
        );
        assert!(matches!(result, Err(crate::Error::Contract(_))));
    }
}
