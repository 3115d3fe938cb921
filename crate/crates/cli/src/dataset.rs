//! Dataset directories: one `<subject>.hdr` container per recording plus its tracks.

use std::fs;
use std::path::{Path, PathBuf};

use neurossl::data::{read_recording, EventTrack, TrackKind};
use neurossl::types::Recording;

use crate::failure::{CliResult, Failure};

#[derive(Debug, Clone)]
pub struct Subject {
    pub recording: Recording,
    pub tracks: Vec<EventTrack>,
}

impl Subject {
    pub fn track(&self, kind: TrackKind) -> CliResult<&EventTrack> {
        self.tracks.iter().find(|t| t.kind == kind).ok_or_else(|| {
            Failure::compat(format!("recording {} has no {} track", self.recording.id(), kind.name()))
        })
    }
}

/// Header files in `dir`, sorted by name.
pub fn headers(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Failure::compat(format!("{}: {e}", dir.display())))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Failure::compat(format!("{}: {e}", dir.display())))?.path();
        if path.extension().is_some_and(|x| x == "hdr") {
            out.push(path);
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Failure::compat(format!("{}: no recordings found", dir.display())));
    }
    Ok(out)
}

pub fn load(dir: &Path) -> CliResult<Vec<Subject>> {
    headers(dir)?
        .iter()
        .map(|p| {
            let (recording, tracks) = read_recording(p)?;
            Ok(Subject { recording, tracks })
        })
        .collect()
}

/// All subjects of several dataset directories, in argument order.
pub fn load_all(dirs: &[PathBuf]) -> CliResult<Vec<Subject>> {
    let mut out = Vec::new();
    for d in dirs {
        out.extend(load(d)?);
    }
    Ok(out)
}

/// The common sample rate of `subjects`.
pub fn sample_rate(subjects: &[Subject]) -> CliResult<f64> {
    let fs = subjects[0].recording.sample_rate_hz;
    if let Some(s) = subjects.iter().find(|s| s.recording.sample_rate_hz != fs) {
        return Err(Failure::compat(format!(
            "recording {} is at {} Hz, others at {fs} Hz; preprocess first",
            s.recording.id(),
            s.recording.sample_rate_hz
        )));
    }
    Ok(fs)
}
