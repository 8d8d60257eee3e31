//! Monte-Carlo checks of the random components.

use std::f64::consts::PI;

use hashlab_core::hashing::{lsh_encode, make_lsh};
use hashlab_core::nn::{dropout, Mode};
use hashlab_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn lsh_entries_have_zero_mean_unit_variance() {
    let m = make_lsh(1000, 100, 5).unwrap();
    let n = m.projections.len() as f64;
    let mean = m.projections.iter().sum::<f64>() / n;
    let var = m.projections.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    // three standard errors of the mean of 10^5 unit-variance draws
    assert!(mean.abs() < 3.0 / n.sqrt(), "mean {mean}");
    assert!((var - 1.0).abs() < 0.02, "variance {var}");
    assert!(m.thresholds.iter().all(|&t| t == 0.0));
}

/// Two unit vectors at angle `theta` in a random 2-plane of R^dim.
fn pair_at_angle(dim: usize, theta: f64) -> (Vec<f64>, Vec<f64>) {
    let mut u = vec![0.0; dim];
    let mut v = vec![0.0; dim];
    u[0] = 1.0;
    v[0] = theta.cos();
    v[1] = theta.sin();
    (u, v)
}

#[test]
fn lsh_disagreement_tracks_angle() {
    let bits = 10_000;
    let dim = 8;
    let m = make_lsh(dim, bits, 11).unwrap();
    for theta in [PI / 6.0, PI / 4.0, PI / 2.0] {
        let (u, v) = pair_at_angle(dim, theta);
        let d = lsh_encode(&m, &u).unwrap().hamming(&lsh_encode(&m, &v).unwrap()).unwrap();
        let rate = d as f64 / bits as f64;
        let p = theta / PI;
        let se = (p * (1.0 - p) / bits as f64).sqrt();
        assert!((rate - p).abs() < 3.0 * se, "theta {theta}: rate {rate}, expected {p}");
    }
}

#[test]
fn dropout_preserves_expectation() {
    let x = Tensor::from_vec(vec![1.0; 20_000]);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for p in [0.2, 0.5, 0.8] {
        let y = dropout(&x, p, Mode::Train, &mut rng).unwrap();
        let kept = y.data().iter().filter(|&&v| v != 0.0).count() as f64 / 20_000.0;
        let mean = y.data().iter().sum::<f64>() / 20_000.0;
        let se = (p * (1.0 - p) / 20_000.0).sqrt();
        assert!((kept - (1.0 - p)).abs() < 4.0 * se, "p {p}: kept {kept}");
        assert!(y.data().iter().all(|&v| v == 0.0 || (v - 1.0 / (1.0 - p)).abs() < 1e-12));
        assert!((mean - 1.0).abs() < 4.0 * se / (1.0 - p), "p {p}: mean {mean}");
    }
    assert_eq!(dropout(&x, 0.5, Mode::Eval, &mut rng).unwrap(), x);
    assert!(dropout(&x, 1.0, Mode::Train, &mut rng).is_err());
}
