mod common;

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use tumorseg::sampler::{compute_sampling_weights, sample_patch};

#[test]
fn fixture_weights_are_the_expected_classes() {
    let (volume, labels, n) = common::sampler_fixture();
    let w = compute_sampling_weights(&volume, &labels, n).unwrap();
    assert_eq!(w.weights.dim(), (1, 1, 100));
    for k in 0..100 {
        assert_eq!(w.weights[[0, 0, k]] as f64, common::fixture_weight(k), "center {k}");
    }
    assert_eq!(w.total(), 290);
    let p = w.probabilities();
    assert!((p.sum() - 1.0).abs() < 1e-12);
    let fg: f64 = (0..10).map(|k| p[[0, 0, k]]).sum();
    assert!((fg - 60.0 / 290.0).abs() < 1e-15);
}

#[test]
fn center_frequencies_pass_chi_square() {
    let start = Instant::now();
    let (volume, labels, n) = common::sampler_fixture();
    let w = compute_sampling_weights(&volume, &labels, n).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let draws = 100_000;
    let mut counts = [0u64; 100];
    let mut flips = 0u64;
    for _ in 0..draws {
        let p = sample_patch(&mut rng, &w, &volume, &labels).unwrap();
        assert_eq!(&p.center[..2], &[2, 2]);
        counts[p.center[2] - 2] += 1;
        flips += p.flipped as u64;
    }
    let stat: f64 = (0..100)
        .map(|k| {
            let expected = draws as f64 * common::fixture_weight(k) / 290.0;
            (counts[k] as f64 - expected).powi(2) / expected
        })
        .sum();
    let p_value = 1.0 - ChiSquared::new(99.0).unwrap().cdf(stat);
    assert!(p_value > 0.01, "chi-square {stat}, p = {p_value}");

    let fg: u64 = counts[..10].iter().sum();
    let fg_share = fg as f64 / draws as f64;
    let se = (60.0 / 290.0 * (230.0 / 290.0) / draws as f64).sqrt();
    assert!((fg_share - 60.0 / 290.0).abs() < 4.0 * se, "foreground share {fg_share}");

    let flip_share = flips as f64 / draws as f64;
    assert!((flip_share - 0.5).abs() < 4.0 * (0.25 / draws as f64).sqrt());
    assert!(start.elapsed().as_secs_f64() < 30.0);
}
