//! Linear-phase windowed-sinc FIR filters applied with zero phase delay.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;

use super::spectrum::{fast_len, fft_in_place, ifft_in_place};
use crate::error::{Error, Result};
use crate::types::Recording;

/// Width of each rejected line-noise band, Hz.
pub const NOTCH_STOP_WIDTH_HZ: f64 = 2.0;

/// Tap count of the reference low-pass at 1 kHz; other rates scale it.
const REFERENCE_TAPS: f64 = 255.0;
/// Hamming window transition width is about 3.3 fs / N.
const HAMMING_TRANSITION: f64 = 3.3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FilterKind {
    Lowpass { cutoff_hz: f64 },
    Highpass { cutoff_hz: f64 },
    Bandstop { lo_hz: f64, hi_hz: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterSpec {
    pub kind: FilterKind,
    /// Odd, so the filter has an integer group delay and can be applied centred.
    pub num_taps: usize,
}

fn odd(n: f64) -> usize {
    let n = (n.round() as usize).max(3);
    if n % 2 == 0 {
        n + 1
    } else {
        n
    }
}

impl FilterSpec {
    /// Low-pass with 255 taps at 1 kHz, scaled proportionally to the rate.
    pub fn lowpass(cutoff_hz: f64, sample_rate_hz: f64) -> Self {
        FilterSpec {
            kind: FilterKind::Lowpass { cutoff_hz },
            num_taps: odd(REFERENCE_TAPS * sample_rate_hz / 1000.0),
        }
    }

    /// High-pass whose transition band is as wide as the cutoff itself.
    pub fn highpass(cutoff_hz: f64, sample_rate_hz: f64) -> Self {
        let n = (HAMMING_TRANSITION * sample_rate_hz / cutoff_hz.max(1e-6)).ceil();
        FilterSpec { kind: FilterKind::Highpass { cutoff_hz }, num_taps: odd(n) }
    }

    /// Band-stop with transitions half as wide as the stop band.
    pub fn bandstop(lo_hz: f64, hi_hz: f64, sample_rate_hz: f64) -> Self {
        let transition = ((hi_hz - lo_hz) / 2.0).max(1e-6);
        let n = (HAMMING_TRANSITION * sample_rate_hz / transition).ceil();
        FilterSpec { kind: FilterKind::Bandstop { lo_hz, hi_hz }, num_taps: odd(n) }
    }

    pub fn with_taps(mut self, num_taps: usize) -> Self {
        self.num_taps = num_taps;
        self
    }
}

fn check_cutoff(cutoff_hz: f64, nyquist_hz: f64) -> Result<()> {
    if cutoff_hz > 0.0 && cutoff_hz < nyquist_hz {
        Ok(())
    } else {
        Err(Error::Cutoff { cutoff_hz, nyquist_hz })
    }
}

fn hamming(n: usize, len: usize) -> f64 {
    0.54 - 0.46 * (2.0 * PI * n as f64 / (len - 1) as f64).cos()
}

/// Windowed-sinc low-pass normalised to unit DC gain.
fn sinc_lowpass(cutoff_hz: f64, sample_rate_hz: f64, len: usize) -> Vec<f64> {
    let fc = cutoff_hz / sample_rate_hz;
    let mid = (len - 1) / 2;
    let mut h = vec![0.0; len];
    // Computed on one half and mirrored so the taps are exactly symmetric.
    for n in 0..=mid {
        let x = (mid - n) as f64;
        let sinc = if n == mid { 2.0 * fc } else { (2.0 * PI * fc * x).sin() / (PI * x) };
        h[n] = sinc * hamming(n, len);
        h[len - 1 - n] = h[n];
    }
    let dc: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= dc);
    h
}

fn spectral_inversion(mut h: Vec<f64>) -> Vec<f64> {
    h.iter_mut().for_each(|v| *v = -*v);
    let mid = h.len() / 2;
    h[mid] += 1.0;
    h
}

pub fn design_fir(spec: &FilterSpec, sample_rate_hz: f64) -> Result<Vec<f64>> {
    let nyquist = sample_rate_hz / 2.0;
    let len = spec.num_taps;
    if len == 0 || len % 2 == 0 {
        return Err(Error::shape(format!("FIR length {len} must be odd and positive")));
    }
    match spec.kind {
        FilterKind::Lowpass { cutoff_hz } => {
            check_cutoff(cutoff_hz, nyquist)?;
            Ok(sinc_lowpass(cutoff_hz, sample_rate_hz, len))
        }
        FilterKind::Highpass { cutoff_hz } => {
            check_cutoff(cutoff_hz, nyquist)?;
            Ok(spectral_inversion(sinc_lowpass(cutoff_hz, sample_rate_hz, len)))
        }
        FilterKind::Bandstop { lo_hz, hi_hz } => {
            check_cutoff(lo_hz, nyquist)?;
            check_cutoff(hi_hz, nyquist)?;
            if lo_hz >= hi_hz {
                return Err(Error::Cutoff { cutoff_hz: lo_hz, nyquist_hz: hi_hz });
            }
            let lo = sinc_lowpass(lo_hz, sample_rate_hz, len);
            let hi = spectral_inversion(sinc_lowpass(hi_hz, sample_rate_hz, len));
            Ok(lo.iter().zip(&hi).map(|(a, b)| a + b).collect())
        }
    }
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    // A single reflection suffices because the pad is shorter than the signal.
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

/// Centred filtering of one channel with reflect padding. `taps` must be odd-length.
pub fn filter_channel(x: &[f64], taps: &[f64]) -> Vec<f64> {
    let t = x.len();
    let half = taps.len() / 2;
    let padded_len = t + 2 * half;
    let n = fast_len(padded_len + taps.len() - 1);
    let mut sig = vec![Complex64::new(0.0, 0.0); n];
    for (i, slot) in sig.iter_mut().take(padded_len).enumerate() {
        *slot = Complex64::new(x[reflect(i as isize - half as isize, t)], 0.0);
    }
    let mut ker = vec![Complex64::new(0.0, 0.0); n];
    for (slot, &h) in ker.iter_mut().zip(taps) {
        *slot = Complex64::new(h, 0.0);
    }
    fft_in_place(&mut sig);
    fft_in_place(&mut ker);
    for (s, k) in sig.iter_mut().zip(&ker) {
        *s *= k;
    }
    ifft_in_place(&mut sig);
    // Full convolution index i + 2*half lines the kernel centre up with sample i.
    (0..t).map(|i| sig[i + 2 * half].re).collect()
}

pub fn apply_fir_zero_phase(signal: &Recording, taps: &[f64]) -> Result<Recording> {
    if taps.is_empty() || taps.len() % 2 == 0 {
        return Err(Error::shape(format!("FIR length {} must be odd", taps.len())));
    }
    if taps.iter().any(|v| !v.is_finite()) {
        return Err(Error::shape("FIR taps must be finite"));
    }
    if signal.samples <= taps.len() {
        return Err(Error::Length { samples: signal.samples, taps: taps.len() });
    }
    let mut data = Vec::with_capacity(signal.data.len());
    for s in 0..signal.sensors {
        data.extend(filter_channel(signal.channel(s), taps));
    }
    Ok(signal.with_data(data, signal.sample_rate_hz))
}

/// Rejects `base_hz` and each integer multiple strictly below Nyquist, one band-stop stage per harmonic.
pub fn apply_notch_comb(signal: &Recording, base_hz: f64) -> Result<Recording> {
    let fs = signal.sample_rate_hz;
    let nyquist = fs / 2.0;
    check_cutoff(base_hz, nyquist)?;
    let half = NOTCH_STOP_WIDTH_HZ / 2.0;
    let mut out = signal.clone();
    let mut h = 1;
    while (h as f64) * base_hz < nyquist {
        let f = h as f64 * base_hz;
        let lo = (f - half).max(1e-3);
        let hi = (f + half).min(nyquist * 0.999);
        let taps = design_fir(&FilterSpec::bandstop(lo, hi, fs), fs)?;
        out = apply_fir_zero_phase(&out, &taps)?;
        h += 1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::test_util::{rms, tone_recording};

    #[test]
    fn lowpass_has_unit_dc_gain() {
        let taps = design_fir(&FilterSpec::lowpass(125.0, 1000.0), 1000.0).unwrap();
        assert_eq!(taps.len(), 255);
        assert!((taps.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let mirrored: Vec<f64> = taps.iter().rev().copied().collect();
        assert_eq!(taps, mirrored);
    }

    #[test]
    fn highpass_has_zero_dc_gain() {
        let taps = design_fir(&FilterSpec::highpass(0.5, 1000.0), 1000.0).unwrap();
        assert!(taps.iter().sum::<f64>().abs() < 1e-6);
        let fixed = design_fir(&FilterSpec::highpass(0.5, 1000.0).with_taps(255), 1000.0).unwrap();
        assert!(fixed.iter().sum::<f64>().abs() < 1e-6);
    }

    #[test]
    fn cutoff_at_or_above_nyquist_is_rejected() {
        for c in [125.0, 200.0, 0.0] {
            let err = design_fir(&FilterSpec::lowpass(c, 250.0), 250.0).unwrap_err();
            assert!(matches!(err, Error::Cutoff { .. }));
        }
    }

    #[test]
    fn lowpass_rejects_200hz() {
        let fs = 1000.0;
        let taps = design_fir(&FilterSpec::lowpass(125.0, fs), fs).unwrap();
        let x = tone_recording(200.0, fs, 10.0, 1);
        let y = apply_fir_zero_phase(&x, &taps).unwrap();
        let db = 20.0 * (rms(y.channel(0)) / rms(x.channel(0))).log10();
        assert!(db <= -40.0, "{db} dB");
    }

    #[test]
    fn lowpass_passes_10hz() {
        let fs = 1000.0;
        let taps = design_fir(&FilterSpec::lowpass(125.0, fs), fs).unwrap();
        let x = tone_recording(10.0, fs, 10.0, 1);
        let y = apply_fir_zero_phase(&x, &taps).unwrap();
        let db = 20.0 * (rms(y.channel(0)) / rms(x.channel(0))).log10();
        assert!(db.abs() <= 1.0, "{db} dB");
    }

    #[test]
    fn impulse_reproduces_centred_taps() {
        let taps = vec![0.1, 0.2, 0.4, 0.2, 0.1];
        let mut data = vec![0.0; 21];
        data[10] = 1.0;
        let rec = Recording::new(data, 1, 100.0, vec![[0.0; 3]], "d", "s").unwrap();
        let y = apply_fir_zero_phase(&rec, &taps).unwrap();
        for (i, v) in y.data.iter().enumerate() {
            let expect = if (8..=12).contains(&i) { taps[i - 8] } else { 0.0 };
            assert!((v - expect).abs() < 1e-12, "{i}: {v}");
        }
    }

    #[test]
    fn zero_signal_stays_zero() {
        let taps = design_fir(&FilterSpec::lowpass(40.0, 250.0), 250.0).unwrap();
        let rec = Recording::new(vec![0.0; 2 * 500], 2, 250.0, vec![[0.0; 3]; 2], "d", "s").unwrap();
        let y = apply_fir_zero_phase(&rec, &taps).unwrap();
        assert!(y.data.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn too_short_signal_is_rejected() {
        let rec = Recording::new(vec![0.0; 5], 1, 250.0, vec![[0.0; 3]], "d", "s").unwrap();
        let err = apply_fir_zero_phase(&rec, &[0.2; 5]).unwrap_err();
        assert!(matches!(err, Error::Length { samples: 5, taps: 5 }));
    }

    #[test]
    fn zero_phase_peak_lag_is_zero() {
        let fs = 250.0;
        let taps = design_fir(&FilterSpec::lowpass(40.0, fs), fs).unwrap();
        let mut rng = crate::rng::Rng::new(4);
        let raw: Vec<f64> = (0..2000).map(|_| rng.normal()).collect();
        let rec = Recording::new(raw, 1, fs, vec![[0.0; 3]], "d", "s").unwrap();
        // band-limit first so the input is in the passband
        let x = apply_fir_zero_phase(&rec, &taps).unwrap();
        let y = apply_fir_zero_phase(&x, &taps).unwrap();
        let (a, b) = (x.channel(0), y.channel(0));
        let xcorr = |lag: isize| -> f64 {
            (200..1800).map(|i| a[i] * b[(i as isize + lag) as usize]).sum()
        };
        let best = (-20..=20).max_by(|&p, &q| xcorr(p).total_cmp(&xcorr(q))).unwrap();
        assert_eq!(best, 0);
    }

    #[test]
    fn notch_removes_mains_and_harmonic() {
        let fs = 250.0;
        for f in [50.0, 100.0] {
            let x = tone_recording(f, fs, 10.0, 1);
            let y = apply_notch_comb(&x, 50.0).unwrap();
            let db = 20.0 * (rms(y.channel(0)) / rms(x.channel(0))).log10();
            assert!(db <= -40.0, "{f} Hz: {db} dB");
        }
    }

    #[test]
    fn notch_preserves_30hz() {
        let fs = 250.0;
        let x = tone_recording(30.0, fs, 10.0, 1);
        let y = apply_notch_comb(&x, 50.0).unwrap();
        let db = 20.0 * (rms(y.channel(0)) / rms(x.channel(0))).log10();
        assert!(db.abs() <= 1.0, "{db} dB");
    }

    #[test]
    fn notch_above_nyquist_is_rejected() {
        let x = tone_recording(10.0, 250.0, 10.0, 1);
        assert!(matches!(apply_notch_comb(&x, 130.0).unwrap_err(), Error::Cutoff { .. }));
    }
}
