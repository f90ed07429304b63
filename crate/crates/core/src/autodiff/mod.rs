//! Minimal dense-tensor reverse-mode automatic differentiation.
//!
//! One [`Tape`] records the primitives of a single forward pass; calling
//! [`Tape::backward`] on a scalar root fills the `grad` buffers of every
//! tensor the root depends on. Parameters are plain [`Tensor`] handles shared
//! between tapes and the [`Optimizer`].

mod optim;
mod tape;
mod tensor;

pub use optim::{Optimizer, OptimizerKind};
pub use tape::Tape;
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn matmul_identity() {
        let tape = Tape::new();
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let out = tape.matmul(&a, &eye).unwrap();
        assert_eq!(out.data(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let tape = Tape::new();
        let x = Tensor::row(vec![0.0, 0.0, 0.0]);
        let s = tape.softmax_rows(&x).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn relu_definition() {
        let tape = Tape::new();
        let x = Tensor::row(vec![-1.0, 0.0, 2.0]);
        assert_eq!(tape.relu(&x).unwrap().data(), vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let tape = Tape::new();
        let a = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        let b = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        let err = tape.matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "missing shapes in: {msg}");
    }

    #[test]
    fn log_and_softmax_reject_bad_input() {
        let tape = Tape::new();
        let nan = Tensor::row(vec![f64::NAN]);
        assert!(tape.log(&nan).is_err());
        assert!(tape.softmax_rows(&nan).is_err());
        let neg = Tensor::row(vec![-1.0]);
        assert!(tape.log(&neg).is_err());
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let tape = Tape::new();
        let x = Tensor::row(vec![1.0, 2.0, 3.0]);
        let sq = tape.mul(&x, &x).unwrap();
        let root = tape.sum(&sq).unwrap();
        tape.backward(&root).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let tape = Tape::new();
        let x = Tensor::row(vec![1.0, 2.0]);
        let y = tape.relu(&x).unwrap();
        assert!(tape.backward(&y).is_err());
    }

    #[test]
    fn backward_rejects_off_tape_root() {
        let tape = Tape::new();
        let x = Tensor::row(vec![1.0]);
        let _ = tape.relu(&x).unwrap();
        let stray = Tensor::scalar(0.0);
        assert!(tape.backward(&stray).is_err());
    }

    #[test]
    fn unreachable_grads_untouched() {
        let tape = Tape::new();
        let x = Tensor::row(vec![2.0]);
        let y = Tensor::row(vec![3.0]);
        let rx = tape.sum(&tape.mul(&x, &x).unwrap()).unwrap();
        let _ry = tape.sum(&y).unwrap();
        tape.backward(&rx).unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0]);
        assert!(y.grad().is_none());
    }

    /// Central finite difference of a scalar-valued rebuild at one coordinate.
    fn fd_grad(eval: &dyn Fn() -> f64, at: &Tensor, idx: usize, h: f64) -> f64 {
        let orig = at.data();
        let mut plus = orig.clone();
        plus[idx] += h;
        at.set_data(plus).unwrap();
        let fp = eval();
        let mut minus = orig.clone();
        minus[idx] -= h;
        at.set_data(minus).unwrap();
        let fm = eval();
        at.set_data(orig).unwrap();
        (fp - fm) / (2.0 * h)
    }

    #[test]
    fn log_sigmoid_grad_at_zero() {
        // d/dw log(sigmoid(w)) = 1 - sigmoid(w) = 0.5 at w = 0.
        let w = Tensor::row(vec![0.0]);
        let run = || {
            let tape = Tape::new();
            let root = tape.sum(&tape.log(&tape.sigmoid(&w).unwrap()).unwrap()).unwrap();
            (tape, root)
        };
        let (tape, root) = run();
        tape.backward(&root).unwrap();
        let analytic = w.grad().unwrap()[0];
        assert!((analytic - 0.5).abs() < 1e-12);
        let fd = fd_grad(&|| run().1.item(), &w, 0, 1e-5);
        assert!((analytic - fd).abs() < 1e-8, "analytic {analytic} vs fd {fd}");
    }

    #[test]
    fn composed_loss_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for _ in 0..5 {
            let w = Tensor::rand_uniform(vec![3, 3], -1.0, 1.0, &mut rng);
            let x = Tensor::rand_uniform(vec![2, 3], 0.5, 1.5, &mut rng);
            let b = Tensor::rand_uniform(vec![3], -0.5, 0.5, &mut rng);
            let build = || {
                let tape = Tape::new();
                let h = tape.add(&tape.matmul(&x, &w).unwrap(), &b).unwrap();
                let s = tape.sigmoid(&h).unwrap();
                let p = tape.softmax_rows(&tape.mul(&s, &s).unwrap()).unwrap();
                let root = tape
                    .mean(&tape.log(&tape.clamp_min(&p, 1e-12).unwrap()).unwrap())
                    .unwrap();
                (tape, root)
            };
            let (tape, root) = build();
            tape.backward(&root).unwrap();
            for t in [&w, &x, &b] {
                let analytic = t.grad().unwrap();
                for i in 0..t.numel() {
                    let fd = fd_grad(&|| build().1.item(), t, i, 1e-5);
                    let denom = analytic[i].abs().max(fd.abs()).max(1.0);
                    assert!(
                        (analytic[i] - fd).abs() / denom < 1e-5,
                        "coord {i}: analytic {} vs fd {}",
                        analytic[i],
                        fd
                    );
                }
            }
        }
    }

    #[test]
    fn select_and_concat_backward() {
        let x = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = Tensor::matrix(2, 1, vec![10.0, 20.0]).unwrap();
        let tape = Tape::new();
        let sel = tape.select_rows(&x, &[2, 0]).unwrap();
        assert_eq!(sel.data(), vec![5.0, 6.0, 1.0, 2.0]);
        let cat = tape.concat_cols(&sel, &y).unwrap();
        assert_eq!(cat.shape(), vec![2, 3]);
        let root = tape.sum(&cat).unwrap();
        tape.backward(&root).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        assert_eq!(y.grad().unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn repeated_operand_accumulates_once_per_use() {
        // root = sum(x * x) + sum(x): grad = 2x + 1.
        let x = Tensor::row(vec![3.0]);
        let tape = Tape::new();
        let a = tape.sum(&tape.mul(&x, &x).unwrap()).unwrap();
        let b = tape.sum(&x).unwrap();
        let root = tape.sum(&tape.concat_cols(&a, &b).unwrap()).unwrap();
        tape.backward(&root).unwrap();
        assert_eq!(x.grad().unwrap(), vec![7.0]);
    }

    #[test]
    fn tape_determinism_is_bitwise() {
        let run = |seed: u64| {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let w = Tensor::rand_uniform(vec![4, 4], -1.0, 1.0, &mut rng);
            let x = Tensor::rand_uniform(vec![3, 4], -1.0, 1.0, &mut rng);
            let tape = Tape::new();
            let h = tape.relu(&tape.matmul(&x, &w).unwrap()).unwrap();
            let p = tape.softmax_rows(&h).unwrap();
            let root = tape.mean(&p).unwrap();
            tape.backward(&root).unwrap();
            (
                root.item().to_bits(),
                w.grad()
                    .unwrap()
                    .iter()
                    .map(|v| v.to_bits())
                    .collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(11), run(11));
    }

    #[test]
    fn sgd_step_matches_definition() {
        let p = Tensor::scalar(1.0);
        p.accumulate_grad(&[2.0]);
        let mut opt = Optimizer::sgd(0.1);
        opt.step(&[&p]).unwrap();
        assert!((p.item() - 0.8).abs() < 1e-15);
        assert!(p.grad().is_none(), "grad must be cleared");
    }

    #[test]
    fn zero_grad_leaves_param_unchanged() {
        for mut opt in [Optimizer::sgd(0.1), Optimizer::adam(0.1)] {
            let p = Tensor::scalar(1.5);
            p.accumulate_grad(&[0.0]);
            opt.step(&[&p]).unwrap();
            assert_eq!(p.item(), 1.5);
        }
    }

    #[test]
    fn missing_grad_rejected() {
        let p = Tensor::scalar(1.0);
        let mut opt = Optimizer::sgd(0.1);
        assert!(opt.step(&[&p]).is_err());
    }

    #[test]
    fn descent_converges_on_quadratic_bowl() {
        let x = Tensor::scalar(1.0);
        let mut opt = Optimizer::sgd(0.1);
        for _ in 0..100 {
            let tape = Tape::new();
            let root = tape.sum(&tape.mul(&x, &x).unwrap()).unwrap();
            tape.backward(&root).unwrap();
            opt.step(&[&x]).unwrap();
        }
        assert!(x.item().abs() < 1e-3);
    }

    #[test]
    fn adam_converges_on_quadratic_bowl() {
        let x = Tensor::scalar(1.0);
        let mut opt = Optimizer::adam(0.05);
        for _ in 0..300 {
            let tape = Tape::new();
            let root = tape.sum(&tape.mul(&x, &x).unwrap()).unwrap();
            tape.backward(&root).unwrap();
            opt.step(&[&x]).unwrap();
        }
        assert!(x.item().abs() < 1e-3);
    }

    #[test]
    fn softmax_rows_sum_to_one_on_random_input() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.gen_range(1..5);
            let d = rng.gen_range(1..6);
            // Spreads beyond ~35 make the dominant entry round to exactly 1.0
            // in f64; stay below that so strict (0,1) membership is testable.
            let x = Tensor::rand_uniform(vec![n, d], -15.0, 15.0, &mut rng);
            let tape = Tape::new();
            let s = tape.softmax_rows(&x).unwrap();
            let data = s.data();
            for i in 0..n {
                let row = &data[i * d..(i + 1) * d];
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
                assert!(row.iter().all(|&v| v > 0.0 && v < 1.0 || d == 1));
            }
        }
    }
}
