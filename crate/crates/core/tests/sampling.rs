use authguard_core::encoder::{aggregate, gate_weights, reparameterize, EmbeddingDistribution};
use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[test]
fn reparameterized_draws_have_the_right_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let draws = 100_000;
    for _ in 0..10 {
        let dim = 3;
        let d = EmbeddingDistribution {
            mu: Array1::from_shape_fn(dim, |_| rng.random_range(-3.0f32..3.0)),
            sigma: Array1::from_shape_fn(dim, |_| rng.random_range(0.05f32..2.0)),
        };
        let (mut sum, mut sq) = (vec![0.0f64; dim], vec![0.0f64; dim]);
        for _ in 0..draws {
            let eps = Array1::from_shape_fn(dim, |_| StandardNormal.sample(&mut rng));
            let z = reparameterize(&d, &eps).unwrap();
            for k in 0..dim {
                sum[k] += z[k] as f64;
                sq[k] += (z[k] as f64).powi(2);
            }
        }
        let n = draws as f64;
        for k in 0..dim {
            let (mu, var) = (d.mu[k] as f64, (d.sigma[k] as f64).powi(2));
            let mean = sum[k] / n;
            let sample_var = (sq[k] - n * mean * mean) / (n - 1.0);
            let se_mean = (var / n).sqrt();
            // Var of the sample variance for a Gaussian is 2σ⁴/(n−1).
            let se_var = (2.0 * var * var / (n - 1.0)).sqrt();
            assert!((mean - mu).abs() < 4.0 * se_mean, "mean {mean} vs {mu}");
            assert!((sample_var - var).abs() < 4.0 * se_var, "var {sample_var} vs {var}");
        }
    }
}

#[test]
fn gate_and_aggregate_on_random_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..1000 {
        let w = gate_weights([rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)]);
        assert!((w[0] + w[1] - 1.0).abs() < 1e-6);
        assert!(w.iter().all(|&x| x > 0.0 && x < 1.0));
    }
    let v = Array1::from_shape_fn(8, |_| rng.random_range(-2.0f32..2.0));
    let z = Array1::from_shape_fn(8, |_| rng.random_range(-2.0f32..2.0));
    assert_eq!(aggregate(&v, &z, [1.0, 0.0]).unwrap(), v);
    assert_eq!(aggregate(&v, &z, [0.0, 1.0]).unwrap(), z);
    assert!(aggregate(&v, &z, [0.7, 0.7]).is_err());
}
