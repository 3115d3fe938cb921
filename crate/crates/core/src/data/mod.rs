//! Recording IO, synthetic data, windows, labels, splits and batches.

pub mod io;
pub mod synth;
pub mod windows;

pub use io::{read_recording, write_recording, Event, EventTrack, TrackKind};
pub use synth::{generate_subject, generate_synthetic, SynthSpec, SynthSubject};
pub use windows::{
    align_detection_labels, align_voicing_windows, batch_iter, cut_window, make_windows, plan_splits, window_samples, SplitPlan,
};
