//! Synthetic multi-sensor recordings with a band-structured background and
//! planted burst events.
//!
//! The background comes from `n_sources` latent sources, each a sum of
//! band-limited noise with the configured per-band power, mixed onto
//! the sensors through a spatially smooth matrix with unit-norm rows. Sensors
//! are therefore correlated the way nearby MEG/EEG channels are, which is what
//! makes phase and amplitude perturbations of a sensor subset observable.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;

use crate::config::KvFile;
use crate::data::io::{Event, EventTrack, TrackKind};
use crate::dsp::{bin_frequency, ifft_real};
use crate::error::{ConfigViolation, Error, Result};
use crate::rng::Rng;
use crate::types::{Recording, BANDS};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub dataset_id: String,
    pub n_subjects: usize,
    pub n_sensors: usize,
    pub n_sources: usize,
    pub duration_s: f64,
    pub sample_rate_hz: f64,
    /// Variance contributed by each of the seven bands, in band order.
    pub background_powers: [f64; 7],
    /// Independent white noise variance per sensor.
    pub sensor_noise_power: f64,
    pub event_rate_hz: f64,
    pub event_duration_s: f64,
    pub event_amplitude: f64,
    /// Frequency of the burst amplitude modulation.
    pub modulation_hz: f64,
    pub voiced_carrier_hz: f64,
    pub voiceless_carrier_hz: f64,
    pub sensor_subset_fraction: f64,
    /// Log-normal spread of per-subject sensor gains.
    pub subject_gain_jitter: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            dataset_id: "synth".into(),
            n_subjects: 8,
            n_sensors: 32,
            n_sources: 6,
            duration_s: 600.0,
            sample_rate_hz: 250.0,
            background_powers: [1.0; 7],
            sensor_noise_power: 0.01,
            event_rate_hz: 0.25,
            event_duration_s: 2.0,
            event_amplitude: 1.0,
            modulation_hz: 4.0,
            voiced_carrier_hz: 20.0,
            voiceless_carrier_hz: 45.0,
            sensor_subset_fraction: 0.25,
            subject_gain_jitter: 0.1,
            seed: 0,
        }
    }
}

/// One generated subject: its recording and the two label tracks.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSubject {
    pub recording: Recording,
    pub detection: EventTrack,
    pub voicing: EventTrack,
}

impl SynthSpec {
    pub fn samples(&self) -> usize {
        (self.duration_s * self.sample_rate_hz).round() as usize
    }

    pub fn event_samples(&self) -> usize {
        (self.event_duration_s * self.sample_rate_hz).round() as usize
    }

    pub fn violations(&self) -> Vec<ConfigViolation> {
        let mut v = Vec::new();
        let mut range = |field: &'static str, value: f64, ok: bool, expected: &'static str| {
            if !ok {
                v.push(ConfigViolation::Range { field, value, expected });
            }
        };
        let nyq = self.sample_rate_hz / 2.0;
        range("n_subjects", self.n_subjects as f64, self.n_subjects >= 1, ">= 1");
        range("n_sensors", self.n_sensors as f64, self.n_sensors >= 1, ">= 1");
        range("n_sources", self.n_sources as f64, self.n_sources >= 1, ">= 1");
        range("sample_rate_hz", self.sample_rate_hz, self.sample_rate_hz > 0.0, "> 0");
        range("duration_s", self.duration_s, self.samples() >= 1, "at least one sample");
        range("voiced_carrier_hz", self.voiced_carrier_hz, self.voiced_carrier_hz > 0.0 && self.voiced_carrier_hz < nyq, "in (0, nyquist)");
        range(
            "voiceless_carrier_hz",
            self.voiceless_carrier_hz,
            self.voiceless_carrier_hz > 0.0 && self.voiceless_carrier_hz < nyq,
            "in (0, nyquist)",
        );
        range("modulation_hz", self.modulation_hz, self.modulation_hz >= 0.0 && self.modulation_hz < nyq, "in [0, nyquist)");
        range(
            "background_powers",
            self.background_powers.iter().cloned().fold(f64::INFINITY, f64::min),
            self.background_powers.iter().all(|p| *p >= 0.0 && p.is_finite()),
            ">= 0",
        );
        range("sensor_noise_power", self.sensor_noise_power, self.sensor_noise_power >= 0.0, ">= 0");
        range("event_rate_hz", self.event_rate_hz, self.event_rate_hz >= 0.0, ">= 0");
        range("event_duration_s", self.event_duration_s, self.event_duration_s > 0.0, "> 0");
        range("event_amplitude", self.event_amplitude, self.event_amplitude >= 0.0, ">= 0");
        range(
            "sensor_subset_fraction",
            self.sensor_subset_fraction,
            self.sensor_subset_fraction > 0.0 && self.sensor_subset_fraction <= 1.0,
            "in (0, 1]",
        );
        range("subject_gain_jitter", self.subject_gain_jitter, self.subject_gain_jitter >= 0.0, ">= 0");
        v
    }

    /// Parses a `key = value` spec; missing keys keep their defaults.
    /// Invariant violations are reported against the offending key's line.
    pub fn parse(text: &str) -> Result<Self> {
        let kv = KvFile::parse(text)?;
        let d = SynthSpec::default();
        let powers = match kv.get_list::<f64>("background_powers")? {
            None => d.background_powers,
            Some(p) if p.len() == 7 => [p[0], p[1], p[2], p[3], p[4], p[5], p[6]],
            Some(p) => {
                return Err(Error::ConfigParse {
                    line: kv.line_of("background_powers"),
                    message: format!("background_powers: expected 7 values, got {}", p.len()),
                })
            }
        };
        let spec = SynthSpec {
            dataset_id: kv.get_or("dataset_id", d.dataset_id)?,
            n_subjects: kv.get_or("n_subjects", d.n_subjects)?,
            n_sensors: kv.get_or("n_sensors", d.n_sensors)?,
            n_sources: kv.get_or("n_sources", d.n_sources)?,
            duration_s: kv.get_or("duration_s", d.duration_s)?,
            sample_rate_hz: kv.get_or("sample_rate_hz", d.sample_rate_hz)?,
            background_powers: powers,
            sensor_noise_power: kv.get_or("sensor_noise_power", d.sensor_noise_power)?,
            event_rate_hz: kv.get_or("event_rate_hz", d.event_rate_hz)?,
            event_duration_s: kv.get_or("event_duration_s", d.event_duration_s)?,
            event_amplitude: kv.get_or("event_amplitude", d.event_amplitude)?,
            modulation_hz: kv.get_or("modulation_hz", d.modulation_hz)?,
            voiced_carrier_hz: kv.get_or("voiced_carrier_hz", d.voiced_carrier_hz)?,
            voiceless_carrier_hz: kv.get_or("voiceless_carrier_hz", d.voiceless_carrier_hz)?,
            sensor_subset_fraction: kv.get_or("sensor_subset_fraction", d.sensor_subset_fraction)?,
            subject_gain_jitter: kv.get_or("subject_gain_jitter", d.subject_gain_jitter)?,
            seed: kv.get_or("seed", d.seed)?,
        };
        kv.finish()?;
        if let Some(first) = spec.violations().into_iter().next() {
            let line = match &first {
                ConfigViolation::Range { field, .. } => kv.line_of(field),
                _ => 0,
            };
            return Err(Error::ConfigParse { line, message: first.to_string() });
        }
        if spec.dataset_id.is_empty() || spec.dataset_id.contains(['/', ',', ' ']) {
            return Err(Error::ConfigParse {
                line: kv.line_of("dataset_id"),
                message: format!("dataset_id `{}` must be non-empty without `/`, `,` or spaces", spec.dataset_id),
            });
        }
        Ok(spec)
    }

    pub fn to_kv_string(&self) -> String {
        let p: Vec<String> = self.background_powers.iter().map(|x| x.to_string()).collect();
        [
            format!("dataset_id = {}", self.dataset_id),
            format!("n_subjects = {}", self.n_subjects),
            format!("n_sensors = {}", self.n_sensors),
            format!("n_sources = {}", self.n_sources),
            format!("duration_s = {}", self.duration_s),
            format!("sample_rate_hz = {}", self.sample_rate_hz),
            format!("background_powers = {}", p.join(", ")),
            format!("sensor_noise_power = {}", self.sensor_noise_power),
            format!("event_rate_hz = {}", self.event_rate_hz),
            format!("event_duration_s = {}", self.event_duration_s),
            format!("event_amplitude = {}", self.event_amplitude),
            format!("modulation_hz = {}", self.modulation_hz),
            format!("voiced_carrier_hz = {}", self.voiced_carrier_hz),
            format!("voiceless_carrier_hz = {}", self.voiceless_carrier_hz),
            format!("sensor_subset_fraction = {}", self.sensor_subset_fraction),
            format!("subject_gain_jitter = {}", self.subject_gain_jitter),
            format!("seed = {}", self.seed),
        ]
        .join("\n")
            + "\n"
    }

    pub fn subject_id(&self, i: usize) -> String {
        format!("sub-{:02}", i + 1)
    }
}

/// Even spread of `n` points on a sphere of radius `r` (golden-angle spiral).
pub fn sphere_positions(n: usize, r: f64) -> Vec<[f64; 3]> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let rho = (1.0 - z * z).sqrt();
            let a = golden * i as f64;
            [r * rho * a.cos(), r * rho * a.sin(), r * z]
        })
        .collect()
}

/// Random-phase noise with a flat magnitude inside each band, scaled so the
/// band's variance is exactly `powers[b]`. Marginally close to Gaussian for
/// long signals. DC and (for even lengths) the Nyquist bin are left empty.
pub fn band_limited_noise(rng: &mut Rng, n: usize, fs: f64, powers: &[f64; 7]) -> Vec<f64> {
    source_bank(rng, n, fs, powers, 1).pop().unwrap_or_default()
}

/// `count` signals of the [`band_limited_noise`] kind whose positive bins are
/// dealt out round-robin within each band, so they are exactly orthogonal and
/// any unit-norm mixture of them keeps the per-band variances.
pub fn source_bank(rng: &mut Rng, n: usize, fs: f64, powers: &[f64; 7], count: usize) -> Vec<Vec<f64>> {
    let half = n.div_ceil(2);
    let band: Vec<Option<usize>> =
        (0..half).map(|k| if k == 0 { None } else { BANDS.iter().position(|b| b.contains(bin_frequency(k, n, fs))) }).collect();
    let mut counts = vec![[0usize; 7]; count];
    let mut seen = [0usize; 7];
    let mut owner = vec![0usize; half];
    for k in 1..half {
        if let Some(b) = band[k] {
            owner[k] = seen[b] % count;
            counts[owner[k]][b] += 1;
            seen[b] += 1;
        }
    }
    let mut specs = vec![vec![Complex64::new(0.0, 0.0); n]; count];
    for k in 1..half {
        let Some(b) = band[k] else { continue };
        let j = owner[k];
        // variance = 2 * sum_k |X_k|^2 / n^2 over positive bins
        let mag = n as f64 * (powers[b] / (2.0 * counts[j][b] as f64)).sqrt();
        let z = Complex64::from_polar(mag, rng.uniform_range(0.0, 2.0 * PI));
        specs[j][k] = z;
        specs[j][n - k] = z.conj();
    }
    specs.iter().map(|s| ifft_real(s)).collect()
}

struct Layout {
    positions: Vec<[f64; 3]>,
    mixing: Vec<f64>,
    subset: Vec<usize>,
    subset_weights: Vec<f64>,
}

fn layout(spec: &SynthSpec, rng: &Rng) -> Layout {
    let positions = sphere_positions(spec.n_sensors, 0.1);
    let mut r = rng.fork("sources");
    let sources: Vec<[f64; 3]> = (0..spec.n_sources)
        .map(|_| {
            let v = [r.normal(), r.normal(), r.normal()];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-12);
            [0.08 * v[0] / n, 0.08 * v[1] / n, 0.08 * v[2] / n]
        })
        .collect();
    let width = 0.06f64;
    let mut mixing = Vec::with_capacity(spec.n_sensors * spec.n_sources);
    for p in &positions {
        let row: Vec<f64> = sources
            .iter()
            .map(|q| {
                let d2: f64 = (0..3).map(|i| (p[i] - q[i]).powi(2)).sum();
                (-d2 / (2.0 * width * width)).exp()
            })
            .collect();
        let norm = row.iter().map(|w| w * w).sum::<f64>().sqrt().max(1e-300);
        mixing.extend(row.iter().map(|w| w / norm));
    }
    let k = ((spec.sensor_subset_fraction * spec.n_sensors as f64).round() as usize).clamp(1, spec.n_sensors);
    let mut r = rng.fork("event-subset");
    let subset = r.sample_indices(spec.n_sensors, k);
    let subset_weights = subset.iter().map(|_| r.uniform_range(0.5, 1.0)).collect();
    Layout { positions, mixing, subset, subset_weights }
}

/// Non-overlapping event onsets: one event placed uniformly inside each of
/// `round(rate * duration)` equal slots.
fn schedule(spec: &SynthSpec, rng: &mut Rng) -> Result<Vec<usize>> {
    let total = spec.samples();
    let n = (spec.event_rate_hz * spec.duration_s).round() as usize;
    if n == 0 {
        return Ok(Vec::new());
    }
    let len = spec.event_samples();
    let slot = total / n;
    if len >= slot {
        return Err(Error::Overlap(format!(
            "{n} events of {len} samples cannot fit without overlap in {total} samples"
        )));
    }
    Ok((0..n).map(|i| i * slot + rng.below(slot - len)).collect())
}

/// Burst waveform: Hann envelope times a raised-sine modulation times the carrier.
fn burst(len: usize, fs: f64, carrier_hz: f64, mod_hz: f64, phase: f64) -> Vec<f64> {
    (0..len)
        .map(|i| {
            let t = i as f64 / fs;
            let hann = (PI * (i as f64 + 0.5) / len as f64).sin().powi(2);
            let m = 0.5 + 0.5 * (2.0 * PI * mod_hz * t).sin();
            hann * m * (2.0 * PI * carrier_hz * t + phase).sin()
        })
        .collect()
}

pub fn generate_subject(spec: &SynthSpec, index: usize) -> Result<SynthSubject> {
    if let Some(v) = spec.violations().into_iter().next() {
        return Err(Error::InvalidConfig(vec![v]));
    }
    let root = Rng::new(spec.seed).fork(&spec.dataset_id);
    let lay = layout(spec, &root);
    let rng = root.fork(&format!("subject/{index}"));
    let n = spec.samples();
    let (s, j) = (spec.n_sensors, spec.n_sources);
    let fs = spec.sample_rate_hz;

    let mut bg_rng = rng.fork("background");
    let sources = source_bank(&mut bg_rng, n, fs, &spec.background_powers, j);
    let mut data = vec![0.0; s * n];
    for si in 0..s {
        let row = &mut data[si * n..(si + 1) * n];
        for (ji, src) in sources.iter().enumerate() {
            let w = lay.mixing[si * j + ji];
            row.iter_mut().zip(src).for_each(|(x, v)| *x += w * v);
        }
    }
    if spec.sensor_noise_power > 0.0 {
        let sd = spec.sensor_noise_power.sqrt();
        let mut r = rng.fork("sensor-noise");
        data.iter_mut().for_each(|x| *x += sd * r.normal());
    }

    let mut ev_rng = rng.fork("events");
    let onsets = schedule(spec, &mut ev_rng)?;
    let len = spec.event_samples();
    let (mut det, mut voi) = (Vec::new(), Vec::new());
    for &onset in &onsets {
        let voiced = ev_rng.uniform() < 0.5;
        let carrier = if voiced { spec.voiced_carrier_hz } else { spec.voiceless_carrier_hz };
        let wave = burst(len, fs, carrier, spec.modulation_hz, ev_rng.uniform_range(0.0, 2.0 * PI));
        for (&si, &w) in lay.subset.iter().zip(&lay.subset_weights) {
            let row = &mut data[si * n + onset..si * n + onset + len];
            row.iter_mut().zip(&wave).for_each(|(x, v)| *x += spec.event_amplitude * w * v);
        }
        det.push(Event { onset_sample: onset, duration_samples: len, class: 1 });
        voi.push(Event { onset_sample: onset, duration_samples: len, class: voiced as u8 });
    }

    let mut g_rng = rng.fork("gains");
    for si in 0..s {
        let gain = (spec.subject_gain_jitter * g_rng.normal()).exp();
        data[si * n..(si + 1) * n].iter_mut().for_each(|x| *x *= gain);
    }
    let recording = Recording::new(data, s, fs, lay.positions, spec.dataset_id.clone(), spec.subject_id(index))?;
    Ok(SynthSubject {
        recording,
        detection: EventTrack::new(TrackKind::Detection, det, n)?,
        voicing: EventTrack::new(TrackKind::Voicing, voi, n)?,
    })
}

/// Every subject of `spec`; a pure function of the spec.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Vec<SynthSubject>> {
    (0..spec.n_subjects).map(|i| generate_subject(spec, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::power_spectrum;

    fn quiet(duration_s: f64) -> SynthSpec {
        SynthSpec {
            n_subjects: 1,
            n_sensors: 6,
            duration_s,
            background_powers: [0.0; 7],
            sensor_noise_power: 0.0,
            subject_gain_jitter: 0.0,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn band_powers_match_spec() {
        let powers = [3.0, 1.0, 2.0, 0.5, 1.5, 0.25, 0.75];
        let n = 60 * 250;
        let mut rng = Rng::new(1);
        let x = band_limited_noise(&mut rng, n, 250.0, &powers);
        let p = power_spectrum(&x);
        let mut got = [0.0; 7];
        for (k, v) in p.iter().enumerate().skip(1).take(n.div_ceil(2) - 1) {
            let b = BANDS.iter().position(|b| b.contains(bin_frequency(k, n, 250.0))).unwrap();
            got[b] += 2.0 * v / (n * n) as f64;
        }
        let var = x.iter().map(|v| v * v).sum::<f64>() / n as f64;
        assert!((got.iter().sum::<f64>() - var).abs() < 1e-9 * var);
        let total: f64 = powers.iter().sum();
        let got_total: f64 = got.iter().sum();
        for b in 0..7 {
            let (want, have) = (powers[b] / total, got[b] / got_total);
            assert!((have / want - 1.0).abs() < 0.1, "band {b}: {have} vs {want}");
        }
    }

    #[test]
    fn mixed_sensors_keep_band_ratios() {
        let spec = SynthSpec {
            n_subjects: 1,
            n_sensors: 4,
            duration_s: 60.0,
            background_powers: [2.0, 1.0, 1.0, 0.5, 0.5, 0.25, 0.25],
            sensor_noise_power: 0.0,
            event_rate_hz: 0.0,
            subject_gain_jitter: 0.0,
            ..SynthSpec::default()
        };
        let rec = generate_subject(&spec, 0).unwrap().recording;
        let n = rec.samples;
        let total: f64 = spec.background_powers.iter().sum();
        for s in 0..4 {
            let p = power_spectrum(rec.channel(s));
            let mut got = [0.0; 7];
            for (k, v) in p.iter().enumerate().skip(1).take(n.div_ceil(2) - 1) {
                let b = BANDS.iter().position(|b| b.contains(bin_frequency(k, n, 250.0))).unwrap();
                got[b] += v;
            }
            let gt: f64 = got.iter().sum();
            for b in 0..7 {
                let r = (got[b] / gt) / (spec.background_powers[b] / total);
                assert!((r - 1.0).abs() < 0.1, "sensor {s} band {b}: ratio {r}");
            }
        }
    }

    #[test]
    fn single_event_is_confined_to_span_and_subset() {
        let spec = SynthSpec { event_rate_hz: 1.0 / 20.0, ..quiet(20.0) };
        let sub = generate_subject(&spec, 0).unwrap();
        assert_eq!(sub.detection.events.len(), 1);
        let e = sub.detection.events[0];
        let rec = &sub.recording;
        let mut active = Vec::new();
        for s in 0..rec.sensors {
            let row = rec.channel(s);
            let outside = row[..e.onset_sample].iter().chain(&row[e.end()..]).all(|v| *v == 0.0);
            assert!(outside);
            if row[e.onset_sample..e.end()].iter().any(|v| *v != 0.0) {
                active.push(s);
            }
        }
        assert_eq!(active.len(), 2); // round(0.25 * 6)
        assert_eq!(sub.voicing.events[0].onset_sample, e.onset_sample);
    }

    #[test]
    fn voicing_classes_are_balanced() {
        let spec = SynthSpec { duration_s: 2000.0, ..quiet(2000.0) };
        let sub = generate_subject(&spec, 0).unwrap();
        let n = sub.voicing.events.len();
        let voiced = sub.voicing.events.iter().filter(|e| e.class == 1).count();
        assert_eq!(n, 500);
        assert!((voiced as f64 / n as f64 - 0.5).abs() < 0.07);
    }

    #[test]
    fn forced_overlap_is_rejected() {
        let spec = SynthSpec { event_rate_hz: 0.6, event_duration_s: 2.0, ..quiet(10.0) };
        assert!(matches!(generate_subject(&spec, 0), Err(Error::Overlap(_))));
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SynthSpec { n_subjects: 2, n_sensors: 5, duration_s: 20.0, ..SynthSpec::default() };
        let a = generate_synthetic(&spec).unwrap();
        assert_eq!(a, generate_synthetic(&spec).unwrap());
        assert_ne!(a[0].recording.data, a[1].recording.data);
        let other = generate_synthetic(&SynthSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a[0].recording.data, other[0].recording.data);
    }

    #[test]
    fn spec_text_round_trip_and_nyquist_check() {
        let spec = SynthSpec { seed: 42, background_powers: [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7], ..SynthSpec::default() };
        assert_eq!(SynthSpec::parse(&spec.to_kv_string()).unwrap(), spec);
        match SynthSpec::parse("n_sensors = 4\nvoiced_carrier_hz = 300\n") {
            Err(Error::ConfigParse { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("voiced_carrier_hz"));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(SynthSpec::parse("bogus = 1\n"), Err(Error::ConfigParse { line: 1, .. })));
    }
}
