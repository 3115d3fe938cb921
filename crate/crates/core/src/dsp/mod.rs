//! Signal-processing kernels: preprocessing filters, decimation, channel QC
//! and the spectral primitives the pretext transforms build on.

mod channels;
mod fir;
mod pipeline;
pub mod spectrum;

pub use channels::{
    detect_bad_channels, interpolate_channels, ChannelQcReport, DEFAULT_NEIGHBOURS, DEFAULT_Z_THRESHOLD,
};
pub use fir::{
    apply_fir_zero_phase, apply_notch_comb, design_fir, filter_channel, FilterKind, FilterSpec,
    NOTCH_STOP_WIDTH_HZ,
};
pub use pipeline::{decimate, preprocess, PreprocessConfig};
pub use spectrum::{bin_frequency, fft_real, ifft_real, power_spectrum};

#[cfg(test)]
pub(crate) mod test_util {
    use crate::types::Recording;

    pub fn tone_recording(freq_hz: f64, fs: f64, seconds: f64, sensors: usize) -> Recording {
        let t = (fs * seconds).round() as usize;
        let row: Vec<f64> =
            (0..t).map(|i| (2.0 * std::f64::consts::PI * freq_hz * i as f64 / fs).sin()).collect();
        let pos = (0..sensors).map(|s| [s as f64, 0.0, 0.0]).collect();
        Recording::new(row.repeat(sensors), sensors, fs, pos, "d", "s").unwrap()
    }

    /// RMS over the central 80 %, away from edge transients.
    pub fn rms(x: &[f64]) -> f64 {
        let n = x.len();
        let core = &x[n / 10..n - n / 10];
        (core.iter().map(|v| v * v).sum::<f64>() / core.len() as f64).sqrt()
    }
}
