//! Decimation and the full preprocessing chain.

use super::channels::{detect_bad_channels, interpolate_channels, ChannelQcReport};
use super::fir::{apply_fir_zero_phase, apply_notch_comb, design_fir, FilterSpec};
use crate::error::{Error, Result};
use crate::types::Recording;

/// Keeps every `k`-th sample, `k = rate / target_hz`.
pub fn decimate(signal: &Recording, target_hz: f64) -> Result<Recording> {
    let ratio = signal.sample_rate_hz / target_hz;
    let k = ratio.round();
    if !(target_hz > 0.0) || k < 1.0 || (ratio - k).abs() > 1e-9 * ratio.max(1.0) {
        return Err(Error::Factor { from_hz: signal.sample_rate_hz, to_hz: target_hz });
    }
    let k = k as usize;
    if k == 1 {
        return Ok(signal.clone());
    }
    let mut data = Vec::with_capacity(signal.sensors * signal.samples.div_ceil(k));
    for s in 0..signal.sensors {
        data.extend(signal.channel(s).iter().step_by(k));
    }
    Ok(signal.with_data(data, target_hz))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessConfig {
    pub lowpass_hz: Option<f64>,
    pub highpass_hz: Option<f64>,
    pub notch_base_hz: Option<f64>,
    pub target_rate_hz: f64,
    pub z_threshold: f64,
    pub neighbours: usize,
    /// Run bad-channel detection after decimation (default) or before filtering.
    pub qc_after_decimation: bool,
    /// Accept input below 500 Hz; stages that would be invalid at that rate are skipped.
    pub allow_low_rate: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            lowpass_hz: Some(125.0),
            highpass_hz: Some(0.5),
            notch_base_hz: Some(50.0),
            target_rate_hz: 250.0,
            z_threshold: super::channels::DEFAULT_Z_THRESHOLD,
            neighbours: super::channels::DEFAULT_NEIGHBOURS,
            qc_after_decimation: true,
            allow_low_rate: false,
        }
    }
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage { stage: name, source: Box::new(e) })
}

fn qc(signal: &Recording, cfg: &PreprocessConfig) -> Result<(Recording, ChannelQcReport)> {
    let report = match detect_bad_channels(signal, cfg.z_threshold) {
        Ok(r) => r,
        // zero MAD: every deviant channel is treated as bad
        Err(Error::Degenerate { bad }) => ChannelQcReport {
            variance: Vec::new(),
            z: Vec::new(),
            bad,
            threshold: cfg.z_threshold,
        },
        Err(e) => return stage("detect_bad_channels", Err(e)),
    };
    let repaired = stage("interpolate_channels", interpolate_channels(signal, &report.bad, cfg.neighbours))?;
    Ok((repaired, report))
}

/// Low-pass, high-pass, line-noise notch, decimation, then bad-channel repair.
/// Returns the cleaned recording and its QC report.
pub fn preprocess(signal: &Recording, cfg: &PreprocessConfig) -> Result<(Recording, ChannelQcReport)> {
    let fs = signal.sample_rate_hz;
    if fs < 500.0 && !cfg.allow_low_rate {
        return Err(Error::Stage {
            stage: "input",
            source: Box::new(Error::Factor { from_hz: fs, to_hz: cfg.target_rate_hz }),
        });
    }
    let nyquist = fs / 2.0;
    let mut x = signal.clone();
    let mut report = None;
    if !cfg.qc_after_decimation {
        let (y, r) = qc(&x, cfg)?;
        x = y;
        report = Some(r);
    }
    if let Some(c) = cfg.lowpass_hz {
        if !(cfg.allow_low_rate && c >= nyquist) {
            let taps = stage("lowpass", design_fir(&FilterSpec::lowpass(c, fs), fs))?;
            x = stage("lowpass", apply_fir_zero_phase(&x, &taps))?;
        }
    }
    if let Some(c) = cfg.highpass_hz {
        let taps = stage("highpass", design_fir(&FilterSpec::highpass(c, fs), fs))?;
        x = stage("highpass", apply_fir_zero_phase(&x, &taps))?;
    }
    if let Some(b) = cfg.notch_base_hz {
        x = stage("notch", apply_notch_comb(&x, b))?;
    }
    if (fs - cfg.target_rate_hz).abs() > f64::EPSILON * fs {
        x = stage("decimate", decimate(&x, cfg.target_rate_hz))?;
    }
    if cfg.qc_after_decimation {
        let (y, r) = qc(&x, cfg)?;
        x = y;
        report = Some(r);
    }
    let report = report.expect("qc runs in one of the two positions");
    Ok((x, report))
}
