//! Large-sample statistics of the AWGN channel.

use rand::Rng;

use sehilo::channel::{self, ChannelConfig, NoiseMode};
use sehilo::{rng, AwgnChannel, Tensor};

const N: usize = 1_000_000;

#[test]
fn fixed_sigma_noise_moments() {
    let sigma = 2.0;
    let zeros = Tensor::zeros(vec![N]);
    let tx = channel::transmit(&zeros, NoiseMode::FixedSigma(sigma), &mut rng::stream(1)).unwrap();
    let mean = tx.output.mean();
    let var = tx.output.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (N - 1) as f64;
    assert!(mean.abs() <= 4.0 * sigma / (N as f64).sqrt(), "mean {mean}");
    assert!((var / (sigma * sigma) - 1.0).abs() <= 0.01, "variance {var}");
    assert_eq!(tx.sigma, sigma);
    assert!((tx.noise_power / (sigma * sigma) - 1.0).abs() <= 0.01);
}

#[test]
fn snr_mode_hits_requested_snr() {
    let mut s = rng::stream(2);
    let payload = Tensor::from_fn(vec![1000, 1000], |_| 4.0 * s.random_range(-1.0..1.0));
    for snr in [10.0, 2.5, 0.0, -5.0] {
        let tx = channel::transmit(&payload, NoiseMode::SnrDb(snr), &mut rng::stream(3)).unwrap();
        let noise: Vec<f64> = tx.output.data().iter().zip(payload.data()).map(|(y, x)| y - x).collect();
        let noise_power = noise.iter().map(|n| n * n).sum::<f64>() / N as f64;
        let measured = 10.0 * (payload.mean_square() / noise_power).log10();
        assert!((measured - snr).abs() <= 0.05, "requested {snr} dB, measured {measured}");
        assert!((tx.measured_snr_db() - measured).abs() < 1e-9);
        let expect = channel::sigma_from_snr(payload.mean_square(), snr).unwrap();
        assert_eq!(tx.sigma, expect);
    }
}

#[test]
fn tiny_sigma_is_transparent() {
    let payload = Tensor::from_fn(vec![4096], |i| i as f64 * 1e-3 - 2.0);
    let tx = channel::transmit(&payload, NoiseMode::FixedSigma(1e-300), &mut rng::stream(4)).unwrap();
    for (y, x) in tx.output.data().iter().zip(payload.data()) {
        assert!((y - x).abs() <= 1e-290);
    }
}

#[test]
fn channel_instances_are_reproducible() {
    let payload = Tensor::from_fn(vec![64, 5], |i| (i % 5) as f64 - 2.0);
    let cfg = ChannelConfig::new(NoiseMode::SnrDb(3.0), 99).unwrap();
    let mut a = AwgnChannel::new(cfg);
    let mut b = AwgnChannel::new(cfg);
    for _ in 0..3 {
        assert_eq!(a.transmit(&payload).unwrap(), b.transmit(&payload).unwrap());
    }
    let mut c = AwgnChannel::new(ChannelConfig::new(NoiseMode::SnrDb(3.0), 100).unwrap());
    assert_ne!(a.transmit(&payload).unwrap().output, c.transmit(&payload).unwrap().output);
}

#[test]
fn snr_mode_rejects_silent_payloads() {
    let mut s = rng::stream(5);
    assert!(channel::transmit(&Tensor::zeros(vec![0]), NoiseMode::SnrDb(0.0), &mut s).is_err());
    assert!(channel::transmit(&Tensor::zeros(vec![8]), NoiseMode::SnrDb(0.0), &mut s).is_err());
    assert!(channel::transmit(&Tensor::filled(vec![2], f64::NAN), NoiseMode::FixedSigma(1.0), &mut s).is_err());
}
