//! Welch-averaged cross-spectral estimates at individual frequencies.

use std::f64::consts::PI;

/// Hann-windowed single-bin DFT of `x` at `freq` Hz.
fn windowed_bin(x: &[f64], fs: f64, freq: f64) -> (f64, f64) {
    let n = x.len();
    let w = 2.0 * PI * freq / fs;
    let mut re = 0.0;
    let mut im = 0.0;
    for (k, v) in x.iter().enumerate() {
        let hann = 0.5 - 0.5 * (2.0 * PI * k as f64 / n as f64).cos();
        let (s, c) = (w * k as f64).sin_cos();
        re += hann * v * c;
        im -= hann * v * s;
    }
    (re, im)
}

/// Magnitude-squared coherence between `x` and `y` at `freq` Hz, averaged
/// over Hann-windowed segments of `segment` samples with 50% overlap.
///
/// Returns `None` when the record is shorter than one segment or either
/// signal carries no power at `freq`.
pub fn coherence_at(x: &[f64], y: &[f64], fs: f64, freq: f64, segment: usize) -> Option<f64> {
    let n = x.len().min(y.len());
    if segment < 2 || n < segment {
        return None;
    }
    let hop = segment / 2;
    let (mut sxx, mut syy, mut sxy_re, mut sxy_im) = (0.0, 0.0, 0.0, 0.0);
    let mut start = 0;
    while start + segment <= n {
        let (xr, xi) = windowed_bin(&detrend(&x[start..start + segment]), fs, freq);
        let (yr, yi) = windowed_bin(&detrend(&y[start..start + segment]), fs, freq);
        sxx += xr * xr + xi * xi;
        syy += yr * yr + yi * yi;
        sxy_re += xr * yr + xi * yi;
        sxy_im += xi * yr - xr * yi;
        start += hop;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy_re * sxy_re + sxy_im * sxy_im) / (sxx * syy))
}

fn detrend(x: &[f64]) -> Vec<f64> {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| v - mean).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tone(n: usize, fs: f64, f: f64, phase: f64) -> Vec<f64> {
        (0..n).map(|k| (2.0 * PI * f * k as f64 / fs + phase).sin()).collect()
    }

    #[test]
    fn filtered_copy_is_coherent() {
        let x = tone(4000, 100.0, 1.3, 0.0);
        let y: Vec<f64> = tone(4000, 100.0, 1.3, 0.7).iter().map(|v| 2.5 * v).collect();
        let c = coherence_at(&x, &y, 100.0, 1.3, 1000).unwrap();
        assert!((c - 1.0).abs() < 1e-9, "{c}");
    }

    #[test]
    fn independent_noise_is_incoherent() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..20000).map(|_| r.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..20000).map(|_| r.random_range(-1.0..1.0)).collect();
        let c = coherence_at(&x, &y, 100.0, 3.0, 500).unwrap();
        assert!(c < 0.2, "{c}");
    }

    #[test]
    fn short_record_has_no_estimate() {
        assert_eq!(coherence_at(&[1.0; 10], &[1.0; 10], 1.0, 0.1, 20), None);
    }

    proptest! {
        #[test]
        fn coherence_is_a_fraction(seed in 0u64..500, f in 0.5f64..10.0) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..2000).map(|_| r.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = x.iter().map(|v| v + r.random_range(-1.0..1.0)).collect();
            let c = coherence_at(&x, &y, 100.0, f, 400).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&c));
        }
    }
}
