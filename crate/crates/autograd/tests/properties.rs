use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stylefat_autograd::{grad, Tensor};

fn random(seed: u64, shape: &[usize]) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(), shape)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn matmul_transpose_identity(m in 1usize..6, k in 1usize..6, n in 1usize..6, seed in any::<u64>()) {
        let a = random(seed, &[m, k]);
        let b = random(seed ^ 1, &[k, n]);
        let lhs = a.matmul(&b).t();
        let rhs = b.t().matmul(&a.t());
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn broadcast_and_sum_to_are_adjoint(rows in 1usize..5, cols in 1usize..5, seed in any::<u64>()) {
        // <broadcast(v), g> = <v, sum_to(g)>
        let v = random(seed, &[1, cols]);
        let g = random(seed ^ 2, &[rows, cols]);
        let lhs: f64 = v.broadcast_to(&[rows, cols]).data().iter().zip(g.data().iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = v.data().iter().zip(g.sum_to(&[1, cols]).data().iter()).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn permute_round_trips(d0 in 1usize..4, d1 in 1usize..4, d2 in 1usize..4, seed in any::<u64>()) {
        let x = random(seed, &[d0, d1, d2]);
        let back = x.permute(&[2, 0, 1]).permute(&[1, 2, 0]);
        prop_assert_eq!(back.shape(), x.shape());
        prop_assert_eq!(back.to_vec(), x.to_vec());
    }

    #[test]
    fn gradient_of_sum_of_squares_is_twice_input(n in 1usize..20, seed in any::<u64>()) {
        let x = Tensor::leaf(random(seed, &[n]).to_vec(), &[n]);
        let g = grad(&x.square().sum(), &[&x], false).remove(0);
        for (gi, xi) in g.data().iter().zip(x.data().iter()) {
            prop_assert!((gi - 2.0 * xi).abs() < 1e-12);
        }
    }
}
