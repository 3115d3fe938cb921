//! The three pretext transforms and their implicit labels.
//!
//! Each window yields one band-stopped copy (label: the band), one
//! phase-shifted copy (label: the phase step) and one amplitude-scaled copy
//! (label: the grid index). All transforms act on the window's own DFT, so the
//! stop bands are exact at any window length.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;

use crate::autodiff::{Graph, Scalar, Var};
use crate::config::TrainConfig;
use crate::dsp::{bin_frequency, fft_real, ifft_real};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::types::{BandSpec, Window, BANDS};

pub const BAND_CLASSES: usize = 7;
pub const PHASE_CLASSES: usize = 8;
pub const AMPLITUDE_CLASSES: usize = 16;

/// The discrete phase shifts `k·π/8`, `k = 0..8`.
pub fn phase_of(label: usize) -> f64 {
    label as f64 * PI / PHASE_CLASSES as f64
}

/// Sixteen amplitude factors evenly spaced over `[-2, 2]`, endpoints included.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleGrid {
    pub factors: [f64; AMPLITUDE_CLASSES],
}

impl Default for ScaleGrid {
    fn default() -> Self {
        let mut factors = [0.0; AMPLITUDE_CLASSES];
        for (i, f) in factors.iter_mut().enumerate() {
            *f = -2.0 + i as f64 * 4.0 / 15.0;
        }
        ScaleGrid { factors }
    }
}

impl ScaleGrid {
    pub fn factor(&self, index: usize) -> f64 {
        self.factors[index]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PretextTask {
    Band,
    Phase,
    Amplitude,
}

impl PretextTask {
    pub const ALL: [PretextTask; 3] = [PretextTask::Band, PretextTask::Phase, PretextTask::Amplitude];

    pub fn classes(&self) -> usize {
        match self {
            PretextTask::Band => BAND_CLASSES,
            PretextTask::Phase => PHASE_CLASSES,
            PretextTask::Amplitude => AMPLITUDE_CLASSES,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PretextTask::Band => "band",
            PretextTask::Phase => "phase",
            PretextTask::Amplitude => "amplitude",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TransformMeta {
    Band(BandSpec),
    Phase { phi: f64, subset: Vec<usize> },
    Amplitude { factor: f64, subset: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretextSample {
    pub transformed: Window,
    pub task: PretextTask,
    pub label_index: usize,
    pub meta: TransformMeta,
}

/// Per-task augmented copies of a batch, in the batch's window order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PretextBatch {
    pub band: Vec<PretextSample>,
    pub phase: Vec<PretextSample>,
    pub amplitude: Vec<PretextSample>,
}

impl PretextBatch {
    pub fn task(&self, task: PretextTask) -> &[PretextSample] {
        match task {
            PretextTask::Band => &self.band,
            PretextTask::Phase => &self.phase,
            PretextTask::Amplitude => &self.amplitude,
        }
    }

    pub fn labels(&self, task: PretextTask) -> Vec<usize> {
        self.task(task).iter().map(|s| s.label_index).collect()
    }

    pub fn windows(&self, task: PretextTask) -> Vec<Window> {
        self.task(task).iter().map(|s| s.transformed.clone()).collect()
    }
}

/// `max(1, floor(rho·S))` distinct sensors, uniform without replacement, sorted.
pub fn select_sensor_subset(rng: &mut Rng, sensors: usize, rho: f64) -> Vec<usize> {
    let k = ((rho * sensors as f64).floor() as usize).clamp(1, sensors.max(1));
    rng.sample_indices(sensors, k)
}

fn map_rows(window: &Window, rows: Option<&[usize]>, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> Window {
    let mut out = window.clone();
    let all: Vec<usize>;
    let rows = match rows {
        Some(r) => r,
        None => {
            all = (0..window.sensors).collect();
            &all
        }
    };
    for &s in rows {
        let y = f(window.row(s));
        out.row_mut(s).copy_from_slice(&y);
    }
    out
}

/// Zeroes every DFT bin whose frequency falls in `band`, on all sensors.
pub fn apply_band_stop(window: &Window, band: &BandSpec) -> Window {
    let n = window.samples;
    let fs = window.sample_rate_hz;
    let masked: Vec<usize> = (0..=n / 2).filter(|&k| band.contains(bin_frequency(k, n, fs))).collect();
    map_rows(window, None, |row| {
        let mut spec = fft_real(row);
        for &k in &masked {
            spec[k] = Complex64::new(0.0, 0.0);
            if k != 0 {
                spec[n - k] = Complex64::new(0.0, 0.0);
            }
        }
        ifft_real(&spec)
    })
}

/// Rotates each positive-frequency bin of the `subset` rows by `e^{-i·phi}`
/// and each negative-frequency bin by the conjugate. DC and Nyquist stay put.
pub fn apply_phase_shift(window: &Window, phi: f64, subset: &[usize]) -> Window {
    let n = window.samples;
    let rot = Complex64::from_polar(1.0, -phi);
    map_rows(window, Some(subset), |row| {
        let mut spec = fft_real(row);
        for k in 1..n.div_ceil(2) {
            spec[k] *= rot;
            spec[n - k] *= rot.conj();
        }
        ifft_real(&spec)
    })
}

pub fn apply_amplitude_scale(window: &Window, factor_index: usize, subset: &[usize]) -> Window {
    let factor = ScaleGrid::default().factor(factor_index);
    map_rows(window, Some(subset), |row| row.iter().map(|v| v * factor).collect())
}

/// Draws one transform per task for every window. Window `i` uses its own
/// stream forked from `rng`, so the result does not depend on batch order of evaluation.
pub fn sample_pretext_batch(rng: &Rng, batch: &[Window], cfg: &TrainConfig) -> PretextBatch {
    let grid = ScaleGrid::default();
    let mut out = PretextBatch::default();
    for (i, w) in batch.iter().enumerate() {
        let stream = rng.fork(&format!("window/{i}"));

        let mut r = stream.fork("band");
        let label = r.below(BAND_CLASSES);
        let band = BANDS[label];
        out.band.push(PretextSample {
            transformed: apply_band_stop(w, &band),
            task: PretextTask::Band,
            label_index: label,
            meta: TransformMeta::Band(band),
        });

        let mut r = stream.fork("phase");
        let label = r.below(PHASE_CLASSES);
        let subset = select_sensor_subset(&mut r, w.sensors, cfg.rho_phase);
        let phi = phase_of(label);
        out.phase.push(PretextSample {
            transformed: apply_phase_shift(w, phi, &subset),
            task: PretextTask::Phase,
            label_index: label,
            meta: TransformMeta::Phase { phi, subset },
        });

        let mut r = stream.fork("amplitude");
        let label = r.below(AMPLITUDE_CLASSES);
        let subset = select_sensor_subset(&mut r, w.sensors, cfg.rho_amplitude);
        out.amplitude.push(PretextSample {
            transformed: apply_amplitude_scale(w, label, &subset),
            task: PretextTask::Amplitude,
            label_index: label,
            meta: TransformMeta::Amplitude { factor: grid.factor(label), subset },
        });
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct SslLoss {
    /// Differentiable weighted sum; terms with zero weight are left off the tape.
    pub total: Var,
    /// Unweighted band, phase and amplitude cross-entropies.
    pub components: [f64; 3],
    /// `w1·L_band + w2·L_phase + w3·L_amplitude` computed from `components`.
    pub value: f64,
}

/// Combined pretext loss over per-task logits `(B, 7)`, `(B, 8)`, `(B, 16)`.
pub fn ssl_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: [Var; 3],
    labels: [&[usize]; 3],
    weights: [f64; 3],
) -> Result<SslLoss> {
    let mut components = [0.0; 3];
    let mut total: Option<Var> = None;
    for (i, task) in PretextTask::ALL.iter().enumerate() {
        let k = g.shape(logits[i]).last().copied().unwrap_or(0);
        if k != task.classes() {
            return Err(Error::shape(format!(
                "{} logits have {k} classes, expected {}",
                task.name(),
                task.classes()
            )));
        }
        let ce = g.cross_entropy(logits[i], labels[i])?;
        components[i] = g.value(ce).item().as_f64();
        if weights[i] != 0.0 {
            let term = g.scale(ce, T::cast_from(weights[i]));
            total = Some(match total {
                Some(t) => g.add(t, term)?,
                None => term,
            });
        }
    }
    let total = match total {
        Some(t) => t,
        None => {
            // all weights zero: a constant zero keeps the return type uniform
            let z = g.constant(crate::autodiff::Tensor::scalar(T::zero()));
            g.scale(z, T::zero())
        }
    };
    let value = weights.iter().zip(&components).map(|(w, c)| w * c).sum();
    Ok(SslLoss { total, components, value })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::dsp::power_spectrum;

    const FS: f64 = 250.0;
    const T: usize = 125;

    fn tone(freq: f64, phase: f64, sensors: usize) -> Window {
        let row: Vec<f64> = (0..T).map(|n| (2.0 * PI * freq * n as f64 / FS + phase).cos()).collect();
        Window::from_rows(&vec![row; sensors], FS)
    }

    fn random_window(rng: &mut Rng, sensors: usize) -> Window {
        let rows: Vec<Vec<f64>> = (0..sensors).map(|_| (0..T).map(|_| rng.normal()).collect()).collect();
        Window::from_rows(&rows, FS)
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    fn rms(x: &[f64]) -> f64 {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }

    #[test]
    fn grid_endpoints_and_spacing() {
        let g = ScaleGrid::default();
        assert_eq!(g.factor(0), -2.0);
        assert!((g.factor(15) - 2.0).abs() < 1e-15);
        assert!(g.factors.iter().all(|f| *f != 0.0));
        assert!((g.factor(7) + 2.0 / 15.0).abs() < 1e-15);
        assert!((g.factor(8) - 2.0 / 15.0).abs() < 1e-15);
    }

    #[test]
    fn subset_sizes() {
        let mut rng = Rng::new(1);
        assert_eq!(select_sensor_subset(&mut rng, 269, 0.2).len(), 53);
        assert_eq!(select_sensor_subset(&mut rng, 10, 1.0), (0..10).collect::<Vec<_>>());
        assert_eq!(select_sensor_subset(&mut rng, 3, 0.1).len(), 1);
        let s = select_sensor_subset(&mut rng, 50, 0.5);
        assert!(s.windows(2).all(|w| w[0] < w[1]) && s.len() == 25);
    }

    #[test]
    fn alpha_stop_removes_ten_hz() {
        let w = tone(10.0, 0.0, 2);
        let out = apply_band_stop(&w, &BANDS[2]);
        assert!(rms(out.row(0)) < 1e-6 * rms(w.row(0)));
        let kept = apply_band_stop(&w, &BANDS[4]);
        assert!(max_abs_diff(&kept.data, &w.data) < 1e-9);
        let zero = Window::from_rows(&[vec![0.0; T]], FS);
        assert!(apply_band_stop(&zero, &BANDS[0]).data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn band_stop_masks_exactly_its_bins() {
        let mut rng = Rng::new(2);
        let w = random_window(&mut rng, 3);
        for band in &BANDS {
            let out = apply_band_stop(&w, band);
            for s in 0..3 {
                let p = power_spectrum(out.row(s));
                let total: f64 = power_spectrum(w.row(s)).iter().sum();
                for (k, pk) in p.iter().enumerate() {
                    let f = bin_frequency(k, T, FS);
                    if band.contains(f) {
                        assert!(pk / total < 1e-10, "{} bin {k}", band.label());
                    }
                }
            }
        }
    }

    #[test]
    fn delta_owns_dc_and_two_hz_only() {
        let masked: Vec<usize> = (0..=T / 2).filter(|&k| BANDS[0].contains(bin_frequency(k, T, FS))).collect();
        assert_eq!(masked, vec![0, 1]);
    }

    #[test]
    fn quarter_turn_turns_cosine_into_sine() {
        let w = tone(20.0, 0.0, 3);
        let out = apply_phase_shift(&w, PI / 2.0, &[0, 1, 2]);
        let sine: Vec<f64> = (0..T).map(|n| (2.0 * PI * 20.0 * n as f64 / FS).sin()).collect();
        for s in 0..3 {
            assert!(max_abs_diff(out.row(s), &sine) < 1e-9);
        }
        assert!(max_abs_diff(&apply_phase_shift(&w, 0.0, &[0, 1, 2]).data, &w.data) < 1e-12);
    }

    #[test]
    fn phase_shifts_compose() {
        let mut rng = Rng::new(3);
        let mut w = random_window(&mut rng, 2);
        for s in 0..2 {
            let row = w.row_mut(s);
            let mean = row.iter().sum::<f64>() / T as f64;
            row.iter_mut().for_each(|v| *v -= mean);
        }
        let twice = apply_phase_shift(&apply_phase_shift(&w, PI / 4.0, &[0, 1]), PI / 4.0, &[0, 1]);
        let once = apply_phase_shift(&w, PI / 2.0, &[0, 1]);
        assert!(max_abs_diff(&twice.data, &once.data) < 1e-9);
    }

    #[test]
    fn phase_shift_leaves_other_rows_and_magnitudes() {
        let mut rng = Rng::new(4);
        let w = random_window(&mut rng, 4);
        let out = apply_phase_shift(&w, 3.0 * PI / 8.0, &[1, 3]);
        assert_eq!(out.row(0), w.row(0));
        assert_eq!(out.row(2), w.row(2));
        for s in [1, 3] {
            let (a, b) = (fft_real(w.row(s)), fft_real(out.row(s)));
            for (x, y) in a.iter().zip(&b) {
                assert!((x.norm() - y.norm()).abs() <= 1e-9 * x.norm().max(1e-12));
            }
        }
    }

    #[test]
    fn amplitude_endpoints() {
        let mut rng = Rng::new(5);
        let w = random_window(&mut rng, 3);
        let up = apply_amplitude_scale(&w, 15, &[1]);
        assert!(up.row(1).iter().zip(w.row(1)).all(|(a, b)| (a - 2.0 * b).abs() < 1e-15 * b.abs().max(1.0)));
        assert_eq!(up.row(0), w.row(0));
        let down = apply_amplitude_scale(&w, 0, &[0, 1, 2]);
        assert!(down.data.iter().zip(&w.data).all(|(a, b)| *a == -2.0 * b));
    }

    /// Recovers each label by trying every candidate transform on the original.
    #[test]
    fn labels_are_recoverable_by_brute_force() {
        let mut rng = Rng::new(6);
        let batch: Vec<Window> = (0..12).map(|_| random_window(&mut rng, 6)).collect();
        let pb = sample_pretext_batch(&Rng::new(60), &batch, &TrainConfig::default());
        let grid = ScaleGrid::default();
        for (i, w) in batch.iter().enumerate() {
            let hits: Vec<usize> = (0..BAND_CLASSES)
                .filter(|&b| max_abs_diff(&apply_band_stop(w, &BANDS[b]).data, &pb.band[i].transformed.data) < 1e-9)
                .collect();
            assert_eq!(hits, vec![pb.band[i].label_index]);

            let TransformMeta::Phase { subset, .. } = &pb.phase[i].meta else { panic!() };
            let hits: Vec<usize> = (0..PHASE_CLASSES)
                .filter(|&k| {
                    max_abs_diff(&apply_phase_shift(w, phase_of(k), subset).data, &pb.phase[i].transformed.data) < 1e-9
                })
                .collect();
            assert_eq!(hits, vec![pb.phase[i].label_index]);

            let TransformMeta::Amplitude { subset, factor } = &pb.amplitude[i].meta else { panic!() };
            assert_eq!(*factor, grid.factor(pb.amplitude[i].label_index));
            let hits: Vec<usize> = (0..AMPLITUDE_CLASSES)
                .filter(|&k| apply_amplitude_scale(w, k, subset).data == pb.amplitude[i].transformed.data)
                .collect();
            assert_eq!(hits, vec![pb.amplitude[i].label_index]);
        }
    }

    #[test]
    fn batch_cardinality_and_determinism() {
        let mut rng = Rng::new(7);
        let batch: Vec<Window> = (0..8).map(|_| random_window(&mut rng, 5)).collect();
        let cfg = TrainConfig::default();
        let a = sample_pretext_batch(&Rng::new(1), &batch, &cfg);
        assert_eq!((a.band.len(), a.phase.len(), a.amplitude.len()), (8, 8, 8));
        assert_eq!(a, sample_pretext_batch(&Rng::new(1), &batch, &cfg));
        assert_ne!(a.labels(PretextTask::Band), sample_pretext_batch(&Rng::new(2), &batch, &cfg).labels(PretextTask::Band));
        for s in &a.phase {
            let TransformMeta::Phase { subset, .. } = &s.meta else { panic!() };
            assert_eq!(subset.len(), 2);
        }
        for s in &a.amplitude {
            let TransformMeta::Amplitude { subset, .. } = &s.meta else { panic!() };
            assert_eq!(subset.len(), 1);
        }
    }

    #[test]
    fn band_labels_are_uniform() {
        let w = vec![Window::from_rows(&[vec![0.0; 8]], FS)];
        let cfg = TrainConfig::default();
        let n = 10_000;
        let mut counts = [0usize; BAND_CLASSES];
        for i in 0..n {
            let pb = sample_pretext_batch(&Rng::new(9).fork(&i.to_string()), &w, &cfg);
            counts[pb.band[0].label_index] += 1;
        }
        let p = 1.0 / 7.0;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * p).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    fn uniform_logits(g: &mut Graph<f64>, b: usize) -> [Var; 3] {
        [7, 8, 16].map(|k| g.constant(Tensor::zeros(&[b, k])))
    }

    #[test]
    fn uniform_loss_is_sum_of_logs() {
        let mut g = Graph::new();
        let l = uniform_logits(&mut g, 4);
        let labels = [0, 1, 2, 3];
        let out = ssl_loss(&mut g, l, [&labels, &labels, &labels], [1.0; 3]).unwrap();
        let want = 7f64.ln() + 8f64.ln() + 16f64.ln();
        assert!((out.value - want).abs() < 1e-12);
        assert!((g.value(out.total).item() - 6.798).abs() < 1e-3);
    }

    #[test]
    fn weights_mask_and_scale() {
        let mut rng = Rng::new(10);
        let mut g = Graph::new();
        let logits = [7, 8, 16].map(|k| g.constant(Tensor::new(vec![3, k], (0..3 * k).map(|_| rng.normal()).collect()).unwrap()));
        let labels = [[1, 2, 3], [0, 7, 4], [15, 0, 9]];
        let lbl = [&labels[0][..], &labels[1][..], &labels[2][..]];
        let one = ssl_loss(&mut g, logits, lbl, [1.0, 0.0, 0.0]).unwrap();
        assert_eq!(g.value(one.total).item(), one.components[0]);
        assert_eq!(one.value, one.components[0]);
        let two = ssl_loss(&mut g, logits, lbl, [2.0, 0.0, 0.0]).unwrap();
        assert_eq!(g.value(two.total).item(), 2.0 * g.value(one.total).item());
        assert!(one.components[1] > 0.0 && one.components[2] > 0.0);
    }

    #[test]
    fn class_count_mismatch() {
        let mut g = Graph::<f64>::new();
        let l = [7, 7, 16].map(|k| g.constant(Tensor::zeros(&[1, k])));
        assert!(matches!(ssl_loss(&mut g, l, [&[0], &[0], &[0]], [1.0; 3]), Err(Error::Shape(_))));
    }
}
