//! Curve post-processing: Gaussian smoothing, fusion, and resampling to the
//! native frame rate.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scorer::AnomalyCurve;

/// Smoothing width for the coarse anchor curve, in samples.
pub const SIGMA_COARSE: f64 = 2.0;
/// Smoothing width for the MLLM step curve, in samples.
pub const SIGMA_MLLM: f64 = 4.0;
/// Kernel half-width in units of σ.
pub const KERNEL_RADIUS_SIGMAS: f64 = 2.5;

#[derive(Debug, Error, PartialEq)]
pub enum SignalError {
    #[error("sigma must be positive, got {0}")]
    BadSigma(f64),
    #[error("curve is empty")]
    Empty,
    #[error("curves differ in {0}")]
    Mismatch(&'static str),
    #[error("target rate {target} is below source rate {source_rate}")]
    Downsampling { target: f64, source_rate: f64 },
}

pub type Result<T, E = SignalError> = std::result::Result<T, E>;

/// Normalized discrete Gaussian kernel on `-r..=r` with `r = ⌈2.5σ⌉`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(SignalError::BadSigma(sigma));
    }
    let r = (KERNEL_RADIUS_SIGMAS * sigma).ceil() as i64;
    let w: Vec<f64> = (-r..=r).map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / s).collect())
}

/// Maps an out-of-range index into `0..n` by half-sample symmetric
/// reflection (`d c b a | a b c d | d c b a`).
fn reflect(i: i64, n: i64) -> usize {
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

pub fn gaussian_smooth(curve: &AnomalyCurve, sigma: f64) -> Result<AnomalyCurve> {
    let kernel = gaussian_kernel(sigma)?;
    if curve.values.is_empty() {
        return Err(SignalError::Empty);
    }
    let n = curve.values.len() as i64;
    let r = (kernel.len() / 2) as i64;
    let values = (0..n)
        .map(|i| {
            let acc: f64 = kernel
                .iter()
                .enumerate()
                .map(|(j, w)| w * curve.values[reflect(i + j as i64 - r, n)])
                .sum();
            acc.clamp(0.0, 1.0)
        })
        .collect();
    Ok(AnomalyCurve { rate: curve.rate, origin_s: curve.origin_s, values })
}

/// Elementwise mean of two aligned curves.
pub fn fuse_average(a: &AnomalyCurve, b: &AnomalyCurve) -> Result<AnomalyCurve> {
    if a.rate != b.rate {
        return Err(SignalError::Mismatch("rate"));
    }
    if a.origin_s != b.origin_s {
        return Err(SignalError::Mismatch("origin"));
    }
    if a.values.len() != b.values.len() {
        return Err(SignalError::Mismatch("length"));
    }
    let values = a.values.iter().zip(&b.values).map(|(x, y)| (x + y) / 2.0).collect();
    Ok(AnomalyCurve { rate: a.rate, origin_s: a.origin_s, values })
}

fn check_upsample(curve: &AnomalyCurve, target_rate: f64) -> Result<usize> {
    if curve.values.is_empty() {
        return Err(SignalError::Empty);
    }
    if !(target_rate >= curve.rate) {
        return Err(SignalError::Downsampling { target: target_rate, source_rate: curve.rate });
    }
    Ok((curve.values.len() as f64 * target_rate / curve.rate).round() as usize)
}

/// Band-limited interpolation of `values` to `m` samples by zero-padding the
/// spectrum. The Nyquist bin of an even-length input is split evenly
/// between the positive and negative frequency slots. No clipping.
pub fn fourier_resample(values: &[f64], m: usize) -> Vec<f64> {
    let n = values.len();
    if n == 0 || m == 0 {
        return Vec::new();
    }
    if m == n {
        return values.to_vec();
    }
    let mut planner = FftPlanner::<f64>::new();
    let mut spectrum: Vec<Complex64> = values.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut spectrum);

    let mut out = vec![Complex64::new(0.0, 0.0); m];
    let half = n / 2;
    if n % 2 == 0 {
        out[..half].copy_from_slice(&spectrum[..half]);
        for k in 1..half {
            out[m - k] = spectrum[n - k];
        }
        let nyq = spectrum[half] * 0.5;
        out[half] += nyq;
        out[m - half] += nyq;
    } else {
        out[..=half].copy_from_slice(&spectrum[..=half]);
        for k in 1..=half {
            out[m - k] = spectrum[n - k];
        }
    }
    planner.plan_fft_inverse(m).process(&mut out);
    // amplitude scale M/N combined with the 1/M of the unnormalized inverse
    out.into_iter().map(|c| c.re / n as f64).collect()
}

/// Fourier upsampling to `target_rate`; output length round(N × r), clipped to [0, 1].
pub fn fourier_upsample(curve: &AnomalyCurve, target_rate: f64) -> Result<AnomalyCurve> {
    let m = check_upsample(curve, target_rate)?;
    let values = fourier_resample(&curve.values, m).into_iter().map(|x| x.clamp(0.0, 1.0)).collect();
    Ok(AnomalyCurve { rate: target_rate, origin_s: curve.origin_s, values })
}

/// Sample-and-hold upsampling: each output instant takes the latest source
/// sample at or before it.
pub fn fill_forward_upsample(curve: &AnomalyCurve, target_rate: f64) -> Result<AnomalyCurve> {
    let m = check_upsample(curve, target_rate)?;
    let n = curve.values.len();
    let values = (0..m)
        .map(|j| {
            let src = (j as f64 * curve.rate / target_rate + 1e-9).floor() as usize;
            curve.values[src.min(n - 1)]
        })
        .collect();
    Ok(AnomalyCurve { rate: target_rate, origin_s: curve.origin_s, values })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Upsampler {
    #[default]
    Fourier,
    FillForward,
}

pub fn upsample(curve: &AnomalyCurve, target_rate: f64, method: Upsampler) -> Result<AnomalyCurve> {
    match method {
        Upsampler::Fourier => fourier_upsample(curve, target_rate),
        Upsampler::FillForward => fill_forward_upsample(curve, target_rate),
    }
}

/// `time_s,value` rows for plotting.
pub fn to_csv(curve: &AnomalyCurve) -> String {
    let mut s = String::from("time_s,value\n");
    for (k, v) in curve.values.iter().enumerate() {
        s.push_str(&format!("{},{}\n", curve.origin_s + k as f64 / curve.rate, v));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn curve(values: Vec<f64>) -> AnomalyCurve {
        AnomalyCurve { rate: 1.0, origin_s: 0.0, values }
    }

    #[test]
    fn constant_preserved() {
        for sigma in [0.5, 2.0, 4.0, 9.0] {
            let c = gaussian_smooth(&curve(vec![0.7; 13]), sigma).unwrap();
            assert!(c.values.iter().all(|v| (v - 0.7).abs() < 1e-9));
        }
    }

    #[test]
    fn impulse_center_value() {
        let mut v = vec![0.0; 21];
        v[10] = 1.0;
        let out = gaussian_smooth(&curve(v), 2.0).unwrap();
        let denom: f64 = (-5i32..=5).map(|k| (-(k * k) as f64 / 8.0).exp()).sum();
        assert!((out.values[10] - 1.0 / denom).abs() < 1e-15);
        assert!((out.values[10] - 0.200_566).abs() < 1e-6);
        assert!((out.values.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn smoothing_errors_and_short_inputs() {
        assert_eq!(gaussian_smooth(&curve(vec![0.5]), 0.0), Err(SignalError::BadSigma(0.0)));
        assert_eq!(gaussian_smooth(&curve(vec![]), 1.0), Err(SignalError::Empty));
        // kernel wider than the curve still reflects into range
        let c = gaussian_smooth(&curve(vec![0.2, 0.4]), 4.0).unwrap();
        assert_eq!(c.values.len(), 2);
    }

    #[test]
    fn fuse_examples() {
        let a = curve(vec![0.2; 5]);
        assert_eq!(fuse_average(&a, &a).unwrap(), a);
        let f = fuse_average(&a, &curve(vec![0.6; 5])).unwrap();
        assert!(f.values.iter().all(|v| (v - 0.4).abs() < 1e-15));
        assert_eq!(fuse_average(&curve(vec![0.0; 30]), &curve(vec![0.0; 29])), Err(SignalError::Mismatch("length")));
    }

    #[test]
    fn fourier_dc_and_length() {
        for r in [1.0, 2.0, 3.0, 30.0] {
            let up = fourier_upsample(&curve(vec![0.5; 8]), r).unwrap();
            assert_eq!(up.values.len(), (8.0 * r) as usize);
            assert!(up.values.iter().all(|v| (v - 0.5).abs() < 1e-9));
        }
        assert!(matches!(
            fourier_upsample(&AnomalyCurve { rate: 2.0, origin_s: 0.0, values: vec![0.1] }, 1.0),
            Err(SignalError::Downsampling { .. })
        ));
    }

    #[test]
    fn fourier_sinusoid_exact() {
        let x: Vec<f64> = (0..8).map(|n| 0.5 + 0.4 * (2.0 * PI * n as f64 / 8.0).cos()).collect();
        let up = fourier_upsample(&curve(x), 2.0).unwrap();
        for (m, v) in up.values.iter().enumerate() {
            let want = 0.5 + 0.4 * (2.0 * PI * m as f64 / 16.0).cos();
            assert!((v - want).abs() < 1e-6, "m={m}: {v} vs {want}");
        }
    }

    #[test]
    fn fourier_nyquist_cosine_is_split() {
        // alternating sequence: energy only in the Nyquist bin
        let x: Vec<f64> = (0..8).map(|n| 0.5 + 0.2 * if n % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let y = fourier_resample(&x, 16);
        for (m, v) in y.iter().enumerate() {
            let want = 0.5 + 0.2 * (PI * m as f64 / 2.0).cos();
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn fill_forward_examples() {
        let up = fill_forward_upsample(&curve(vec![0.2, 0.8]), 30.0).unwrap();
        assert_eq!(up.values.len(), 60);
        assert!(up.values[..30].iter().all(|&v| v == 0.2));
        assert!(up.values[30..].iter().all(|&v| v == 0.8));
        let c = curve(vec![0.1, 0.5, 0.3]);
        assert_eq!(fill_forward_upsample(&c, 1.0).unwrap(), c);
    }

    #[test]
    fn csv_export() {
        let s = to_csv(&AnomalyCurve { rate: 2.0, origin_s: 0.0, values: vec![0.25, 0.5] });
        assert_eq!(s, "time_s,value\n0,0.25\n0.5,0.5\n");
    }

    proptest! {
        #[test]
        fn smoothing_stays_within_range(v in proptest::collection::vec(0.0f64..=1.0, 1..80), sigma in 0.3f64..6.0) {
            let out = gaussian_smooth(&curve(v.clone()), sigma).unwrap();
            let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
            for y in out.values {
                prop_assert!(y <= hi + 1e-12 && y >= lo - 1e-12);
            }
        }

        #[test]
        fn fourier_preserves_mean(v in proptest::collection::vec(0.0f64..=1.0, 1..64), r in 1usize..5) {
            let m = v.len() * r;
            let y = fourier_resample(&v, m);
            let mx = v.iter().sum::<f64>() / v.len() as f64;
            let my = y.iter().sum::<f64>() / m as f64;
            prop_assert!((mx - my).abs() < 1e-9);
        }

        #[test]
        fn fourier_band_limited_round_trip(
            coeffs in proptest::collection::vec((-0.1f64..0.1, -0.1f64..0.1), 1..6),
            n in 12usize..40,
            r in 2usize..4,
        ) {
            // spectrum confined to bins below n/2 - 1
            let kmax = (n / 2).saturating_sub(2).max(1);
            let x: Vec<f64> = (0..n).map(|t| {
                0.5 + coeffs.iter().enumerate().take(kmax).map(|(k, (a, b))| {
                    let w = 2.0 * PI * (k + 1) as f64 * t as f64 / n as f64;
                    a * w.cos() + b * w.sin()
                }).sum::<f64>()
            }).collect();
            let y = fourier_resample(&x, n * r);
            for t in 0..n {
                prop_assert!((y[t * r] - x[t]).abs() < 1e-6);
            }
        }

        #[test]
        fn fill_forward_block_max_round_trip(v in proptest::collection::vec(0.0f64..=1.0, 1..40), r in 1usize..31) {
            let up = fill_forward_upsample(&curve(v.clone()), r as f64).unwrap();
            let back: Vec<f64> = up.values.chunks(r).map(|c| c.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect();
            prop_assert_eq!(back, v);
        }
    }
}
