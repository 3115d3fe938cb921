//! Real-sequence DFT helpers over `rustfft`, with per-thread plan caching.

use std::cell::RefCell;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// Forward DFT of a real sequence; returns all `n` complex bins.
pub fn fft_real(x: &[f64]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft_in_place(&mut buf);
    buf
}

/// Inverse DFT, keeping the real part. Expects a conjugate-symmetric spectrum.
pub fn ifft_real(spectrum: &[Complex64]) -> Vec<f64> {
    let mut buf = spectrum.to_vec();
    ifft_in_place(&mut buf);
    buf.into_iter().map(|c| c.re).collect()
}

pub(crate) fn fft_in_place(buf: &mut [Complex64]) {
    let n = buf.len();
    if n == 0 {
        return;
    }
    let plan = PLANNER.with(|p| p.borrow_mut().plan_fft_forward(n));
    plan.process(buf);
}

/// Unnormalised inverse followed by the `1/n` scale.
pub(crate) fn ifft_in_place(buf: &mut [Complex64]) {
    let n = buf.len();
    if n == 0 {
        return;
    }
    let plan = PLANNER.with(|p| p.borrow_mut().plan_fft_inverse(n));
    plan.process(buf);
    let scale = 1.0 / n as f64;
    for c in buf.iter_mut() {
        *c *= scale;
    }
}

/// Centre frequency, in Hz, of the non-negative bin `k` of an `n`-point DFT.
pub fn bin_frequency(k: usize, n: usize, sample_rate_hz: f64) -> f64 {
    k as f64 * sample_rate_hz / n as f64
}

/// Smallest 2-3-5-smooth integer `>= n`, a fast transform length.
pub(crate) fn fast_len(n: usize) -> usize {
    let mut m = n.max(1);
    loop {
        let mut r = m;
        for p in [2, 3, 5] {
            while r % p == 0 {
                r /= p;
            }
        }
        if r == 1 {
            return m;
        }
        m += 1;
    }
}

/// Power spectrum `|X_k|^2` for the non-negative bins `0..=n/2`.
pub fn power_spectrum(x: &[f64]) -> Vec<f64> {
    let spec = fft_real(x);
    spec[..x.len() / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    /// O(n^2) reference DFT.
    fn naive_dft(x: &[f64]) -> Vec<Complex64> {
        let n = x.len();
        (0..n)
            .map(|k| {
                x.iter().enumerate().fold(Complex64::new(0.0, 0.0), |acc, (j, &v)| {
                    let ang = -2.0 * std::f64::consts::PI * (k * j) as f64 / n as f64;
                    acc + Complex64::from_polar(v, ang)
                })
            })
            .collect()
    }

    #[test]
    fn impulse_has_flat_spectrum() {
        let s = fft_real(&[1.0, 0.0, 0.0, 0.0]);
        for c in s {
            assert!((c - Complex64::new(1.0, 0.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn constant_has_only_dc() {
        let s = fft_real(&[3.0; 8]);
        assert!((s[0].re - 24.0).abs() < 1e-12);
        assert!(s[1..].iter().all(|c| c.norm() < 1e-12));
    }

    #[test]
    fn round_trip_125() {
        let mut rng = Rng::new(1);
        let x: Vec<f64> = (0..125).map(|_| rng.normal()).collect();
        let y = ifft_real(&fft_real(&x));
        let err = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn matches_naive_dft() {
        let mut rng = Rng::new(2);
        let x: Vec<f64> = (0..37).map(|_| rng.normal()).collect();
        let fast = fft_real(&x);
        let slow = naive_dft(&x);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).norm() < 1e-10);
        }
    }

    #[test]
    fn parseval() {
        let mut rng = Rng::new(3);
        for n in [2usize, 17, 125, 256] {
            let x: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let e_time: f64 = x.iter().map(|v| v * v).sum();
            let e_freq: f64 = fft_real(&x).iter().map(|c| c.norm_sqr()).sum::<f64>() / n as f64;
            assert!(((e_time - e_freq) / e_time).abs() < 1e-6);
        }
    }

    #[test]
    fn fast_len_is_smooth() {
        assert_eq!(fast_len(7), 8);
        assert_eq!(fast_len(125), 125);
        assert_eq!(fast_len(127), 128);
        assert_eq!(fast_len(1), 1);
    }
}
