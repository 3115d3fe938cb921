//! Domain values: recordings, windows and the canonical frequency bands.

use crate::error::{Error, Result};

/// A continuous multi-sensor recording, channel-major (`data[s * samples + i]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub data: Vec<f64>,
    pub sensors: usize,
    pub samples: usize,
    pub sample_rate_hz: f64,
    /// One `[x, y, z]` row per sensor, metres.
    pub sensor_positions: Vec<[f64; 3]>,
    pub dataset_id: String,
    pub subject_id: String,
}

impl Recording {
    pub fn new(
        data: Vec<f64>,
        sensors: usize,
        sample_rate_hz: f64,
        sensor_positions: Vec<[f64; 3]>,
        dataset_id: impl Into<String>,
        subject_id: impl Into<String>,
    ) -> Result<Self> {
        if sensors == 0 || data.is_empty() || data.len() % sensors != 0 {
            return Err(Error::shape(format!(
                "{} values cannot form a recording with {sensors} sensors",
                data.len()
            )));
        }
        if !(sample_rate_hz > 0.0 && sample_rate_hz.is_finite()) {
            return Err(Error::shape(format!("sample rate {sample_rate_hz} must be positive")));
        }
        if sensor_positions.len() != sensors {
            return Err(Error::shape(format!(
                "{} sensor positions for {sensors} sensors",
                sensor_positions.len()
            )));
        }
        let samples = data.len() / sensors;
        Ok(Recording {
            data,
            sensors,
            samples,
            sample_rate_hz,
            sensor_positions,
            dataset_id: dataset_id.into(),
            subject_id: subject_id.into(),
        })
    }

    pub fn channel(&self, s: usize) -> &[f64] {
        &self.data[s * self.samples..(s + 1) * self.samples]
    }

    pub fn channel_mut(&mut self, s: usize) -> &mut [f64] {
        let n = self.samples;
        &mut self.data[s * n..(s + 1) * n]
    }

    pub fn duration_s(&self) -> f64 {
        self.samples as f64 / self.sample_rate_hz
    }

    /// `dataset/subject`, used as the recording identity in window origins.
    pub fn id(&self) -> String {
        format!("{}/{}", self.dataset_id, self.subject_id)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy with the same metadata but new channel-major data of a possibly different length.
    pub fn with_data(&self, data: Vec<f64>, sample_rate_hz: f64) -> Recording {
        let samples = data.len() / self.sensors;
        Recording { data, samples, sample_rate_hz, ..self.clone_meta() }
    }

    fn clone_meta(&self) -> Recording {
        Recording {
            data: Vec::new(),
            sensors: self.sensors,
            samples: 0,
            sample_rate_hz: self.sample_rate_hz,
            sensor_positions: self.sensor_positions.clone(),
            dataset_id: self.dataset_id.clone(),
            subject_id: self.subject_id.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct WindowOrigin {
    pub recording: String,
    pub start_sample: usize,
}

/// An `S × t` slab cut from a recording; the unit of model input.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub data: Vec<f64>,
    pub sensors: usize,
    pub samples: usize,
    pub sample_rate_hz: f64,
    pub origin: WindowOrigin,
    pub dataset_id: String,
    pub subject_id: String,
    pub standardised: bool,
}

impl Window {
    /// A free-standing window, mostly for tests and tooling.
    pub fn from_rows(rows: &[Vec<f64>], sample_rate_hz: f64) -> Window {
        let sensors = rows.len();
        let samples = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == samples), "ragged rows");
        Window {
            data: rows.concat(),
            sensors,
            samples,
            sample_rate_hz,
            origin: WindowOrigin { recording: String::new(), start_sample: 0 },
            dataset_id: String::new(),
            subject_id: String::new(),
            standardised: false,
        }
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.data[s * self.samples..(s + 1) * self.samples]
    }

    pub fn row_mut(&mut self, s: usize) -> &mut [f64] {
        let n = self.samples;
        &mut self.data[s * n..(s + 1) * n]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BandName {
    Delta,
    Theta,
    Alpha,
    Beta,
    Gamma,
    HighGammaLower,
    HighGammaUpper,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandSpec {
    pub name: BandName,
    pub lo_hz: f64,
    pub hi_hz: f64,
}

/// The seven canonical neural frequency bands, in label order.
pub const BANDS: [BandSpec; 7] = [
    BandSpec { name: BandName::Delta, lo_hz: 0.1, hi_hz: 4.0 },
    BandSpec { name: BandName::Theta, lo_hz: 4.0, hi_hz: 8.0 },
    BandSpec { name: BandName::Alpha, lo_hz: 8.0, hi_hz: 12.0 },
    BandSpec { name: BandName::Beta, lo_hz: 12.0, hi_hz: 30.0 },
    BandSpec { name: BandName::Gamma, lo_hz: 30.0, hi_hz: 70.0 },
    BandSpec { name: BandName::HighGammaLower, lo_hz: 70.0, hi_hz: 100.0 },
    BandSpec { name: BandName::HighGammaUpper, lo_hz: 100.0, hi_hz: 150.0 },
];

impl BandSpec {
    pub fn index(&self) -> usize {
        self.name as usize
    }

    pub fn label(&self) -> &'static str {
        match self.name {
            BandName::Delta => "delta",
            BandName::Theta => "theta",
            BandName::Alpha => "alpha",
            BandName::Beta => "beta",
            BandName::Gamma => "gamma",
            BandName::HighGammaLower => "high_gamma_lower",
            BandName::HighGammaUpper => "high_gamma_upper",
        }
    }

    pub fn by_name(name: &str) -> Option<BandSpec> {
        BANDS.iter().copied().find(|b| b.label() == name)
    }

    /// Half-open membership `[lo, hi)`, except the last band which is closed.
    /// DC belongs to delta.
    pub fn contains(&self, freq_hz: f64) -> bool {
        match self.name {
            BandName::Delta => freq_hz < self.hi_hz,
            BandName::HighGammaUpper => freq_hz >= self.lo_hz && freq_hz <= self.hi_hz,
            _ => freq_hz >= self.lo_hz && freq_hz < self.hi_hz,
        }
    }
}
