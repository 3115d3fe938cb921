//! Named flat parameter checkpoints.
//!
//! ```text
//! neurossl-checkpoint 1
//! meta <key> = <value>        (any number)
//! param <name> <d0>x<d1>...   (one per entry, in payload order)
//! end
//! <f32 little-endian payload>
//! ```

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::param::ParamStore;
use super::scalar::Scalar;
use crate::error::{Error, Result};

const MAGIC: &str = "neurossl-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub entries: Vec<Entry>,
}

fn shape_text(shape: &[usize]) -> String {
    if shape.is_empty() {
        return "scalar".into();
    }
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

impl Checkpoint {
    pub fn from_store<T: Scalar>(store: &ParamStore<T>, meta: Vec<(String, String)>) -> Self {
        let entries = store
            .iter()
            .map(|(_, p)| Entry {
                name: p.name.clone(),
                shape: p.value.shape.clone(),
                values: p.value.data.iter().map(|v| v.as_f64() as f32).collect(),
            })
            .collect();
        Checkpoint { meta, entries }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut head = format!("{MAGIC} {VERSION}\n");
        for (k, v) in &self.meta {
            let _ = writeln!(head, "meta {k} = {v}");
        }
        for e in &self.entries {
            let _ = writeln!(head, "param {} {}", e.name, shape_text(&e.shape));
        }
        head.push_str("end\n");
        let mut out = head.into_bytes();
        for e in &self.entries {
            for v in &e.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let fmt = |offset: usize, message: String| Error::Format { offset: offset as u64, message };
        let mut pos = 0;
        let next_line = |pos: &mut usize| -> Result<(usize, String)> {
            let start = *pos;
            let rel = bytes[start..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| fmt(start, "unterminated header line".into()))?;
            *pos = start + rel + 1;
            let line = std::str::from_utf8(&bytes[start..start + rel])
                .map_err(|_| fmt(start, "header is not UTF-8".into()))?;
            Ok((start, line.to_string()))
        };
        let (_, first) = next_line(&mut pos)?;
        let version = first
            .strip_prefix(MAGIC)
            .and_then(|r| r.trim().parse::<u32>().ok())
            .ok_or_else(|| fmt(0, format!("not a checkpoint (first line {first:?})")))?;
        if version != VERSION {
            return Err(fmt(0, format!("unsupported checkpoint version {version}")));
        }
        let mut ck = Checkpoint::default();
        loop {
            let (at, line) = next_line(&mut pos)?;
            if line == "end" {
                break;
            }
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once(" = ").ok_or_else(|| fmt(at, format!("bad meta line {line:?}")))?;
                ck.meta.push((k.to_string(), v.to_string()));
            } else if let Some(rest) = line.strip_prefix("param ") {
                let (name, shape) = rest.rsplit_once(' ').ok_or_else(|| fmt(at, format!("bad param line {line:?}")))?;
                let shape = if shape == "scalar" {
                    Vec::new()
                } else {
                    shape
                        .split('x')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| fmt(at, format!("bad shape {shape:?}")))?
                };
                ck.entries.push(Entry { name: name.to_string(), shape, values: Vec::new() });
            } else {
                return Err(fmt(at, format!("unexpected header line {line:?}")));
            }
        }
        let need: usize = ck.entries.iter().map(|e| e.shape.iter().product::<usize>() * 4).sum();
        let have = bytes.len() - pos;
        if have != need {
            return Err(fmt(pos, format!("payload holds {have} bytes, header describes {need}")));
        }
        for e in &mut ck.entries {
            let n: usize = e.shape.iter().product();
            e.values = bytes[pos..pos + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            pos += 4 * n;
        }
        Ok(ck)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::decode(&bytes)
    }

    /// Copies every entry into the same-named parameter of `store`. Entries
    /// absent from the store are an error unless `allow_missing` is set;
    /// shape mismatches always are.
    pub fn load_into<T: Scalar>(&self, store: &mut ParamStore<T>, allow_missing: bool) -> Result<usize> {
        let mut loaded = 0;
        for e in &self.entries {
            let Some(id) = store.id(&e.name) else {
                if allow_missing {
                    continue;
                }
                return Err(Error::shape(format!("checkpoint entry {} has no matching parameter", e.name)));
            };
            let p = store.get_mut(id);
            if p.value.shape != e.shape {
                return Err(Error::shape(format!(
                    "parameter {} has shape {:?}, checkpoint has {:?}",
                    e.name, p.value.shape, e.shape
                )));
            }
            p.value.data = e.values.iter().map(|&v| T::cast_from(f64::from(v))).collect();
            loaded += 1;
        }
        Ok(loaded)
    }

    /// SHA-256 over the name, shape and bytes of the entries selected by `pred`, hex-encoded.
    pub fn digest(&self, pred: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for e in self.entries.iter().filter(|e| pred(&e.name)) {
            h.update(e.name.as_bytes());
            h.update(shape_text(&e.shape).as_bytes());
            for v in &e.values {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("encoder.w", Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-7, -0.25]).unwrap()).unwrap();
        s.add("head.b", Tensor::scalar(4.0)).unwrap();
        s
    }

    #[test]
    fn round_trip_is_exact() {
        let meta = vec![("d_shared".to_string(), "512".to_string())];
        let ck = Checkpoint::from_store(&store(), meta);
        let back = Checkpoint::decode(&ck.encode()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.meta("d_shared"), Some("512"));
        let mut fresh = store();
        fresh.get_mut(crate::autodiff::ParamId(0)).value.data[0] = 9.0;
        back.load_into(&mut fresh, false).unwrap();
        assert_eq!(fresh, store());
    }

    #[test]
    fn truncated_payload_is_reported() {
        let bytes = Checkpoint::from_store(&store(), Vec::new()).encode();
        let err = Checkpoint::decode(&bytes[..bytes.len() - 2]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
    }

    #[test]
    fn shape_mismatch_on_load() {
        let ck = Checkpoint::from_store(&store(), Vec::new());
        let mut other = ParamStore::<f32>::new();
        other.add("encoder.w", Tensor::zeros(&[3, 2])).unwrap();
        assert!(matches!(ck.load_into(&mut other, true), Err(Error::Shape(_))));
    }

    #[test]
    fn digest_tracks_selected_entries() {
        let ck = Checkpoint::from_store(&store(), Vec::new());
        let mut s = store();
        s.get_mut(crate::autodiff::ParamId(1)).value.data[0] = 5.0;
        let changed = Checkpoint::from_store(&s, Vec::new());
        let enc = |n: &str| n.starts_with("encoder.");
        assert_eq!(ck.digest(enc), changed.digest(enc));
        assert_ne!(ck.digest(|_| true), changed.digest(|_| true));
        assert_eq!(ck.digest(enc).len(), 64);
    }
}
