//! Recording container: `<stem>.hdr` text header, `<stem>.bin` channel-major
//! f32 little-endian payload, and `<stem>.<kind>.csv` event tracks.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::types::Recording;

const MAGIC: &str = "neurossl-recording 1";
const EVENTS_HEADER: &str = "onset_sample,duration_samples,class";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TrackKind {
    Detection,
    Voicing,
}

impl TrackKind {
    pub fn name(&self) -> &'static str {
        match self {
            TrackKind::Detection => "detection",
            TrackKind::Voicing => "voicing",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub onset_sample: usize,
    pub duration_samples: usize,
    /// Speech is 1 on detection tracks; voiced 1 / voiceless 0 on voicing tracks.
    pub class: u8,
}

impl Event {
    pub fn end(&self) -> usize {
        self.onset_sample + self.duration_samples
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventTrack {
    pub kind: TrackKind,
    pub events: Vec<Event>,
}

impl EventTrack {
    /// Checks sorting, non-overlap and that every event ends by `total_samples`.
    pub fn new(kind: TrackKind, events: Vec<Event>, total_samples: usize) -> Result<Self> {
        for (i, e) in events.iter().enumerate() {
            if e.end() > total_samples {
                return Err(Error::Overlap(format!("event {i} ends at {} beyond {total_samples} samples", e.end())));
            }
            if kind == TrackKind::Detection && e.class != 1 {
                return Err(Error::shape(format!("detection event {i} has class {}", e.class)));
            }
            if e.class > 1 {
                return Err(Error::shape(format!("event {i} has class {}", e.class)));
            }
            if i > 0 && events[i - 1].end() > e.onset_sample {
                return Err(Error::Overlap(format!("events {} and {i} overlap", i - 1)));
            }
        }
        Ok(EventTrack { kind, events })
    }

    /// Per-sample 0/1 occupancy over `[start, start + len)`.
    pub fn occupancy(&self, start: usize, len: usize) -> Vec<u8> {
        let mut occ = vec![0u8; len];
        for e in &self.events {
            let lo = e.onset_sample.max(start);
            let hi = e.end().min(start + len);
            if lo < hi {
                occ[lo - start..hi - start].iter_mut().for_each(|v| *v = 1);
            }
        }
        occ
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{EVENTS_HEADER}\n");
        for e in &self.events {
            s.push_str(&format!("{},{},{}\n", e.onset_sample, e.duration_samples, e.class));
        }
        s
    }

    pub fn from_csv(text: &str, kind: TrackKind, total_samples: usize) -> Result<Self> {
        let mut offset = 0u64;
        let mut events = Vec::new();
        for (i, line) in text.split_inclusive('\n').enumerate() {
            let row = line.trim_end();
            if i == 0 {
                if row != EVENTS_HEADER {
                    return Err(Error::Format { offset, message: format!("expected header `{EVENTS_HEADER}`") });
                }
            } else if !row.is_empty() {
                let f: Vec<&str> = row.split(',').collect();
                let parsed: Option<Vec<usize>> = (f.len() == 3).then(|| f.iter().map(|x| x.trim().parse().ok()).collect()).flatten();
                let Some(v) = parsed else {
                    return Err(Error::Format { offset, message: format!("bad event row `{row}`") });
                };
                events.push(Event { onset_sample: v[0], duration_samples: v[1], class: v[2].min(255) as u8 });
            }
            offset += line.len() as u64;
        }
        EventTrack::new(kind, events, total_samples)
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

/// Path of the payload that belongs to header `path`.
pub fn payload_path(path: &Path) -> PathBuf {
    sibling(path, ".bin")
}

pub fn track_path(path: &Path, kind: TrackKind) -> PathBuf {
    sibling(path, &format!(".{}.csv", kind.name()))
}

fn encode_payload(rec: &Recording) -> Vec<u8> {
    rec.data.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

/// Header text for `rec`, including the CRC32 of its payload.
pub fn header_text(rec: &Recording, payload: &[u8]) -> String {
    let mut s = format!("{MAGIC}\n");
    s.push_str(&format!("sample_rate_hz = {}\n", rec.sample_rate_hz));
    s.push_str(&format!("sensors = {}\n", rec.sensors));
    s.push_str(&format!("samples = {}\n", rec.samples));
    s.push_str(&format!("dataset_id = {}\n", rec.dataset_id));
    s.push_str(&format!("subject_id = {}\n", rec.subject_id));
    s.push_str(&format!("payload_crc32 = {:08x}\n", crc32fast::hash(payload)));
    for (i, p) in rec.sensor_positions.iter().enumerate() {
        s.push_str(&format!("position.{i} = {} {} {}\n", p[0], p[1], p[2]));
    }
    s
}

/// Writes header `path`, its payload and one CSV per track.
pub fn write_recording(path: &Path, rec: &Recording, tracks: &[EventTrack]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let payload = encode_payload(rec);
    fs::write(path, header_text(rec, &payload)).map_err(|e| Error::io(path, e))?;
    let bin = payload_path(path);
    fs::write(&bin, &payload).map_err(|e| Error::io(&bin, e))?;
    for t in tracks {
        let p = track_path(path, t.kind);
        fs::write(&p, t.to_csv()).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

struct Header {
    sample_rate_hz: f64,
    sensors: usize,
    samples: usize,
    dataset_id: String,
    subject_id: String,
    crc: u32,
    positions: Vec<[f64; 3]>,
}

fn parse_header(text: &str) -> Result<Header> {
    let mut offset = 0u64;
    let mut fields = std::collections::BTreeMap::new();
    let mut positions = std::collections::BTreeMap::new();
    for (i, line) in text.split_inclusive('\n').enumerate() {
        let row = line.trim_end();
        let fail = |message: String| Error::Format { offset, message };
        if i == 0 {
            if row != MAGIC {
                return Err(fail(format!("expected `{MAGIC}`")));
            }
        } else if !row.is_empty() {
            let (k, v) = row.split_once(" = ").ok_or_else(|| fail(format!("malformed header line `{row}`")))?;
            if let Some(idx) = k.strip_prefix("position.") {
                let idx: usize = idx.parse().map_err(|_| fail(format!("bad position index `{idx}`")))?;
                let xyz: Vec<f64> = v.split(' ').filter_map(|x| x.parse().ok()).collect();
                if xyz.len() != 3 {
                    return Err(fail(format!("position.{idx} needs three coordinates")));
                }
                positions.insert(idx, [xyz[0], xyz[1], xyz[2]]);
            } else {
                fields.insert(k.to_string(), (v.to_string(), offset));
            }
        }
        offset += line.len() as u64;
    }
    let end = offset;
    let field = |k: &str| fields.get(k).cloned().ok_or(Error::Format { offset: end, message: format!("missing `{k}`") });
    fn num<T: std::str::FromStr>(k: &str, (v, at): (String, u64)) -> Result<T> {
        v.parse().map_err(|_| Error::Format { offset: at, message: format!("cannot parse {k} `{v}`") })
    }
    let crc_field = field("payload_crc32")?;
    let crc = u32::from_str_radix(&crc_field.0, 16)
        .map_err(|_| Error::Format { offset: crc_field.1, message: format!("bad crc `{}`", crc_field.0) })?;
    let sensors: usize = num("sensors", field("sensors")?)?;
    if positions.len() != sensors || positions.keys().enumerate().any(|(i, k)| i != *k) {
        return Err(Error::Format { offset: end, message: format!("{} sensor positions for {sensors} sensors", positions.len()) });
    }
    Ok(Header {
        sample_rate_hz: num("sample_rate_hz", field("sample_rate_hz")?)?,
        sensors,
        samples: num("samples", field("samples")?)?,
        dataset_id: field("dataset_id")?.0,
        subject_id: field("subject_id")?.0,
        crc,
        positions: positions.into_values().collect(),
    })
}

/// Decodes a header and payload pair.
pub fn decode_recording(header: &str, payload: &[u8]) -> Result<Recording> {
    let h = parse_header(header)?;
    let expected = h.sensors * h.samples * 4;
    if payload.len() != expected {
        return Err(Error::Format {
            offset: payload.len().min(expected) as u64,
            message: format!(
                "payload holds {} bytes, header ({} sensors x {} samples) needs {expected}",
                payload.len(),
                h.sensors,
                h.samples
            ),
        });
    }
    let actual = crc32fast::hash(payload);
    if actual != h.crc {
        return Err(Error::Checksum { expected: h.crc, actual });
    }
    let data = payload.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect();
    Recording::new(data, h.sensors, h.sample_rate_hz, h.positions, h.dataset_id, h.subject_id)
}

/// Reads header `path`, its payload and whichever track CSVs exist beside it.
pub fn read_recording(path: &Path) -> Result<(Recording, Vec<EventTrack>)> {
    let header = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bin = payload_path(path);
    let payload = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let rec = decode_recording(&header, &payload)?;
    let mut tracks = Vec::new();
    for kind in [TrackKind::Detection, TrackKind::Voicing] {
        let p = track_path(path, kind);
        if p.exists() {
            let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            tracks.push(EventTrack::from_csv(&text, kind, rec.samples)?);
        }
    }
    Ok((rec, tracks))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn rec(sensors: usize, samples: usize) -> Recording {
        let mut r = Rng::new(3);
        let data = (0..sensors * samples).map(|_| r.normal() as f32 as f64).collect();
        let pos = (0..sensors).map(|i| [i as f64 * 0.01, -0.02, 0.1 / 3.0]).collect();
        Recording::new(data, sensors, 250.0, pos, "ds", "sub-01").unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let r = rec(4, 300);
        let track = EventTrack::new(
            TrackKind::Voicing,
            vec![Event { onset_sample: 3, duration_samples: 10, class: 0 }, Event { onset_sample: 20, duration_samples: 5, class: 1 }],
            300,
        )
        .unwrap();
        let path = dir.path().join("a/rec.hdr");
        write_recording(&path, &r, std::slice::from_ref(&track)).unwrap();
        let (back, tracks) = read_recording(&path).unwrap();
        assert_eq!(back, r);
        assert!(back.data.iter().zip(&r.data).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(tracks, vec![track]);
    }

    #[test]
    fn truncated_payload_names_byte_counts() {
        let r = rec(2, 10);
        let payload = encode_payload(&r);
        let err = decode_recording(&header_text(&r, &payload), &payload[..70]).unwrap_err();
        match err {
            Error::Format { message, offset } => {
                assert_eq!(offset, 70);
                assert!(message.contains("70") && message.contains("80"), "{message}");
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn sensor_count_mismatch_is_format_error() {
        let four = rec(4, 10);
        let five = rec(5, 10);
        let payload = encode_payload(&five);
        let err = decode_recording(&header_text(&four, &payload), &payload).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let r = rec(2, 10);
        let mut payload = encode_payload(&r);
        let header = header_text(&r, &payload);
        payload[5] ^= 0x40;
        assert!(matches!(decode_recording(&header, &payload), Err(Error::Checksum { .. })));
    }

    #[test]
    fn malformed_header_reports_offset() {
        let r = rec(1, 4);
        let payload = encode_payload(&r);
        let text = header_text(&r, &payload).replace("samples = 4", "samples: 4");
        match decode_recording(&text, &payload) {
            Err(Error::Format { offset, .. }) => assert_eq!(&text[offset as usize..offset as usize + 7], "samples"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn tracks_reject_overlap_and_overrun() {
        let e = |o, d| Event { onset_sample: o, duration_samples: d, class: 1 };
        assert!(matches!(EventTrack::new(TrackKind::Detection, vec![e(0, 10), e(5, 3)], 100), Err(Error::Overlap(_))));
        assert!(matches!(EventTrack::new(TrackKind::Detection, vec![e(95, 10)], 100), Err(Error::Overlap(_))));
        assert!(EventTrack::new(TrackKind::Detection, vec![e(0, 10), e(10, 3)], 100).is_ok());
        let bad = "onset_sample,duration_samples,class\n1,2,1\nx,2,1\n";
        match EventTrack::from_csv(bad, TrackKind::Detection, 100) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 42),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn occupancy_clips_to_range() {
        let t = EventTrack::new(TrackKind::Detection, vec![Event { onset_sample: 8, duration_samples: 4, class: 1 }], 20).unwrap();
        assert_eq!(t.occupancy(10, 4), vec![1, 1, 0, 0]);
        assert_eq!(t.occupancy(0, 9), vec![0, 0, 0, 0, 0, 0, 0, 0, 1]);
    }
}
