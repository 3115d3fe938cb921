//! Windowing, label alignment, splits and dataset-homogeneous batching.

use std::collections::BTreeMap;

use crate::data::io::EventTrack;
use crate::rng::Rng;
use crate::types::{Recording, Window, WindowOrigin};

pub fn window_samples(window_s: f64, sample_rate_hz: f64) -> usize {
    (window_s * sample_rate_hz).round() as usize
}

/// The window of `len` samples starting at `start`. Caller guarantees it fits.
pub fn cut_window(rec: &Recording, start: usize, len: usize) -> Window {
    let mut data = Vec::with_capacity(rec.sensors * len);
    for s in 0..rec.sensors {
        data.extend_from_slice(&rec.channel(s)[start..start + len]);
    }
    Window {
        data,
        sensors: rec.sensors,
        samples: len,
        sample_rate_hz: rec.sample_rate_hz,
        origin: WindowOrigin { recording: rec.id(), start_sample: start },
        dataset_id: rec.dataset_id.clone(),
        subject_id: rec.subject_id.clone(),
        standardised: false,
    }
}

/// Consecutive non-overlapping windows; a trailing partial window is dropped.
pub fn make_windows(rec: &Recording, window_s: f64) -> Vec<Window> {
    let len = window_samples(window_s, rec.sample_rate_hz);
    if len == 0 {
        return Vec::new();
    }
    (0..rec.samples / len).map(|i| cut_window(rec, i * len, len)).collect()
}

/// Block labels: event occupancy averaged over each `t / tau` block, 1 iff the mean is at least 0.5.
pub fn align_detection_labels(window: &Window, track: &EventTrack, tau: usize) -> Vec<usize> {
    let occ = track.occupancy(window.origin.start_sample, window.samples);
    let block = window.samples / tau.max(1);
    occ.chunks(block)
        .take(tau)
        .map(|c| usize::from(2 * c.iter().map(|&v| v as usize).sum::<usize>() >= c.len()))
        .collect()
}

/// One onset-aligned window per event that fits in the recording, labelled with the event class.
pub fn align_voicing_windows(track: &EventTrack, rec: &Recording, window_s: f64) -> Vec<(Window, usize)> {
    let len = window_samples(window_s, rec.sample_rate_hz);
    track
        .events
        .iter()
        .filter(|e| e.onset_sample + len <= rec.samples)
        .map(|e| (cut_window(rec, e.onset_sample, len), e.class as usize))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SplitPlan {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitPlan {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Splits each recording's windows temporally. Held-out windows form one
/// contiguous block (validation then test) whose position in the recording is
/// drawn from `seed`; the remainder is training data.
pub fn plan_splits(windows: &[Window], ratios: [f64; 3], seed: u64) -> SplitPlan {
    let mut by_rec: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, w) in windows.iter().enumerate() {
        by_rec.entry(w.origin.recording.as_str()).or_default().push(i);
    }
    let root = Rng::new(seed).fork("splits");
    let mut plan = SplitPlan::default();
    for (rec, mut idx) in by_rec {
        idx.sort_by_key(|&i| windows[i].origin.start_sample);
        let n = idx.len();
        let n_val = ((ratios[1] * n as f64).round() as usize).min(n);
        let n_test = ((ratios[2] * n as f64).round() as usize).min(n - n_val);
        let held = n_val + n_test;
        let start = root.fork(rec).below(n - held + 1);
        plan.train.extend(idx[..start].iter().chain(&idx[start + held..]));
        plan.val.extend(&idx[start..start + n_val]);
        plan.test.extend(&idx[start + n_val..start + held]);
    }
    plan
}

/// One epoch of batches: indices grouped by dataset, shuffled within each
/// group, chunked (last chunk may be short), then the batch order shuffled.
pub fn batch_iter<'a>(indices: &[usize], dataset_of: impl Fn(usize) -> &'a str, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for &i in indices {
        groups.entry(dataset_of(i)).or_default().push(i);
    }
    let mut batches = Vec::new();
    for (_, mut g) in groups {
        rng.shuffle(&mut g);
        batches.extend(g.chunks(batch_size.max(1)).map(<[usize]>::to_vec));
    }
    rng.shuffle(&mut batches);
    batches
}
