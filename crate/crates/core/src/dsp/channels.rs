//! Bad-channel detection and nearest-neighbour repair.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::types::Recording;

/// Scale factor making the MAD a consistent estimator of the normal sigma.
const MAD_TO_SIGMA: f64 = 1.4826;

pub const DEFAULT_Z_THRESHOLD: f64 = 3.0;
pub const DEFAULT_NEIGHBOURS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelQcReport {
    pub variance: Vec<f64>,
    /// Robust z-score of log-variance; `-inf` for dead channels.
    pub z: Vec<f64>,
    pub bad: Vec<usize>,
    pub threshold: f64,
}

impl ChannelQcReport {
    pub fn is_bad(&self, s: usize) -> bool {
        self.bad.binary_search(&s).is_ok()
    }

    /// One line per channel: `index variance z bad`.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# index variance z bad\n");
        for (i, (v, z)) in self.variance.iter().zip(&self.z).enumerate() {
            let _ = writeln!(out, "{i} {v:e} {z:.6} {}", u8::from(self.is_bad(i)));
        }
        out
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        let (a, b) = (sorted[n / 2 - 1], sorted[n / 2]);
        if a == b {
            a
        } else {
            0.5 * (a + b)
        }
    }
}

fn variance(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

/// Flags channels whose robust log-variance z-score exceeds `z_threshold` in either tail.
///
/// When the MAD is zero but some channels still differ from the median, the
/// deviants are returned in [`Error::Degenerate`].
pub fn detect_bad_channels(signal: &Recording, z_threshold: f64) -> Result<ChannelQcReport> {
    if signal.sensors < 4 {
        return Err(Error::shape(format!(
            "bad-channel detection needs at least 4 sensors, got {}",
            signal.sensors
        )));
    }
    let vars: Vec<f64> = (0..signal.sensors).map(|s| variance(signal.channel(s))).collect();
    let logv: Vec<f64> = vars.iter().map(|v| v.ln()).collect();
    let mut sorted = logv.clone();
    sorted.sort_by(f64::total_cmp);
    let med = median(&sorted);
    let mut dev: Vec<f64> = logv.iter().map(|l| if *l == med { 0.0 } else { (l - med).abs() }).collect();
    dev.sort_by(f64::total_cmp);
    let mad = median(&dev);

    if mad == 0.0 || !mad.is_finite() {
        let bad: Vec<usize> = (0..signal.sensors).filter(|&s| logv[s] != med).collect();
        if !bad.is_empty() {
            return Err(Error::Degenerate { bad });
        }
        return Ok(ChannelQcReport {
            variance: vars,
            z: vec![0.0; signal.sensors],
            bad,
            threshold: z_threshold,
        });
    }

    let z: Vec<f64> = logv.iter().map(|l| (l - med) / (MAD_TO_SIGMA * mad)).collect();
    let bad = (0..signal.sensors).filter(|&s| z[s].is_nan() || z[s].abs() > z_threshold).collect();
    Ok(ChannelQcReport { variance: vars, z, bad, threshold: z_threshold })
}

fn distance2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

/// Replaces each bad channel by the mean of its `k` nearest good sensors.
/// If fewer than `k` good sensors exist, all of them are used.
pub fn interpolate_channels(signal: &Recording, bad: &[usize], k: usize) -> Result<Recording> {
    let sensors = signal.sensors;
    if let Some(&b) = bad.iter().find(|&&b| b >= sensors) {
        return Err(Error::Index { index: b, size: sensors });
    }
    if bad.is_empty() {
        return Ok(signal.clone());
    }
    let mut is_bad = vec![false; sensors];
    bad.iter().for_each(|&b| is_bad[b] = true);
    let good: Vec<usize> = (0..sensors).filter(|&s| !is_bad[s]).collect();
    if good.is_empty() || k == 0 {
        return Err(Error::NoGoodSensors);
    }

    let mut out = signal.clone();
    let t = signal.samples;
    for s in (0..sensors).filter(|&s| is_bad[s]) {
        let pos = &signal.sensor_positions[s];
        let mut near = good.clone();
        // stable sort: equal distances resolve by sensor index
        near.sort_by(|&a, &b| {
            distance2(pos, &signal.sensor_positions[a]).total_cmp(&distance2(pos, &signal.sensor_positions[b]))
        });
        near.truncate(k.min(good.len()));
        let w = 1.0 / near.len() as f64;
        let row = out.channel_mut(s);
        row.iter_mut().for_each(|v| *v = 0.0);
        for &g in &near {
            let src = &signal.data[g * t..(g + 1) * t];
            for (o, v) in row.iter_mut().zip(src) {
                *o += w * v;
            }
        }
    }
    Ok(out)
}
