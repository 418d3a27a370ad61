//! File formats.
//!
//! Binary files are little-endian. Feature files:
//!
//! ```text
//! "TDFT" | u32 version = 1 | u32 T | u32 D | T*D f32 values, row-major
//! ```
//!
//! Checkpoints:
//!
//! ```text
//! "TDCK" | u32 version = 1 | u32 len | config JSON
//!        | u32 count | count * (u32 len | name | u32 rank | rank * u32 dim | f64 values)
//! ```
//!
//! Every writer goes through [`write_atomic`], so a failed run never leaves a
//! partial file behind.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infer::Detection;
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"TDFT";
pub const FEATURE_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn fail<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            offset: self.pos,
            message: message.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return self.fail(format!(
                "truncated {what}: need {n} bytes, {} left",
                self.buf.len() - self.pos
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let m = self.take(4, "magic")?;
        if m != expected {
            self.pos -= 4;
            return self.fail(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(m),
                String::from_utf8_lossy(expected)
            ));
        }
        Ok(())
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn version(&mut self, expected: u32) -> Result<()> {
        let v = self.u32("version")?;
        if v != expected {
            self.pos -= 4;
            return self.fail(format!("unsupported version {v}, expected {expected}"));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return self.fail(format!("{} trailing bytes", self.buf.len() - self.pos));
        }
        Ok(())
    }
}

/// Per-video features `[T, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureFile {
    pub features: Tensor,
}

impl FeatureFile {
    pub fn new(features: Tensor) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::Validation(format!(
                "features must be [T, D], got {:?}",
                features.shape()
            )));
        }
        if !features.is_finite() {
            return Err(Error::Validation(
                "features contain non-finite values".into(),
            ));
        }
        Ok(Self { features })
    }

    /// Encodes the features; values are stored as `f32`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let (t, d) = (self.features.rows(), self.features.row_len());
        let mut out = Vec::with_capacity(16 + 4 * t * d);
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.extend_from_slice(&(t as u32).to_le_bytes());
        out.extend_from_slice(&(d as u32).to_le_bytes());
        for &v in self.features.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        r.magic(FEATURE_MAGIC)?;
        r.version(FEATURE_VERSION)?;
        let t = r.u32("T")? as usize;
        let d = r.u32("D")? as usize;
        let n = t.checked_mul(d).filter(|n| n.checked_mul(4).is_some());
        let Some(n) = n else {
            return r.fail(format!("shape {t}x{d} overflows"));
        };
        let expected = 16 + 4 * n;
        if buf.len() != expected {
            return Err(Error::Format {
                offset: buf.len().min(expected),
                message: format!(
                    "length {} does not match [{t}, {d}] ({expected} bytes)",
                    buf.len()
                ),
            });
        }
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let b = r.take(4, "value")?;
            let v = f32::from_le_bytes(b.try_into().expect("4 bytes"));
            if !v.is_finite() {
                r.pos -= 4;
                return r.fail("non-finite feature value");
            }
            data.push(v as f64);
        }
        r.finish()?;
        Ok(Self {
            features: Tensor::new(vec![t, d], data)?,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }
}

/// Named parameter values plus the configuration they were trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_json: String,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config_json.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_json.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        r.magic(CHECKPOINT_MAGIC)?;
        r.version(CHECKPOINT_VERSION)?;
        let len = r.u32("config length")? as usize;
        let at = r.pos;
        let cfg = r.take(len, "config")?;
        let config_json = String::from_utf8(cfg.to_vec()).map_err(|_| Error::Format {
            offset: at,
            message: "config is not UTF-8".into(),
        })?;
        let count = r.u32("parameter count")? as usize;
        let mut params = Vec::new();
        for _ in 0..count {
            let len = r.u32("name length")? as usize;
            let at = r.pos;
            let name =
                String::from_utf8(r.take(len, "name")?.to_vec()).map_err(|_| Error::Format {
                    offset: at,
                    message: "parameter name is not UTF-8".into(),
                })?;
            let rank = r.u32("rank")? as usize;
            if rank == 0 || rank > 8 {
                r.pos -= 4;
                return r.fail(format!("parameter `{name}` has rank {rank}"));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dimension")? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= buf.len()));
            let Some(n) = n else {
                return r.fail(format!(
                    "parameter `{name}` shape {shape:?} exceeds the file"
                ));
            };
            let bytes = r.take(8 * n, "parameter values")?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.push((name, Tensor::new(shape, data)?));
        }
        r.finish()?;
        Ok(Self {
            config_json,
            params,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionRecord {
    start: f64,
    end: f64,
    label: usize,
    score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VideoDetections {
    video_id: String,
    detections: Vec<DetectionRecord>,
}

/// One JSON object per video, in first-appearance order of `video_id`.
pub fn detections_to_jsonl(dets: &[Detection]) -> String {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<DetectionRecord>> = BTreeMap::new();
    for d in dets {
        let e = groups.entry(&d.video_id).or_insert_with(|| {
            order.push(&d.video_id);
            Vec::new()
        });
        e.push(DetectionRecord {
            start: d.start,
            end: d.end,
            label: d.label,
            score: d.score,
        });
    }
    let mut out = String::new();
    for id in order {
        let rec = VideoDetections {
            video_id: id.to_string(),
            detections: groups.remove(id).unwrap_or_default(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("detections serialize"));
        out.push('\n');
    }
    out
}

pub fn detections_from_jsonl(s: &str) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (i, line) in s.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let de = &mut serde_json::Deserializer::from_str(line);
        let rec: VideoDetections =
            serde_path_to_error::deserialize(de).map_err(|e| Error::Json {
                path: format!("line {}: {}", i + 1, e.path()),
                message: e.inner().to_string(),
            })?;
        for (j, d) in rec.detections.into_iter().enumerate() {
            if !(d.start.is_finite() && d.end.is_finite() && d.start <= d.end) {
                return Err(Error::Validation(format!(
                    "line {}: detections[{j}] has start {} after end {}",
                    i + 1,
                    d.start,
                    d.end
                )));
            }
            if !(d.score > 0.0 && d.score <= 1.0) {
                return Err(Error::Validation(format!(
                    "line {}: detections[{j}] score {} outside (0, 1]",
                    i + 1,
                    d.score
                )));
            }
            out.push(Detection {
                video_id: rec.video_id.clone(),
                start: d.start,
                end: d.end,
                label: d.label,
                score: d.score,
            });
        }
    }
    Ok(out)
}

pub fn save_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    write_atomic(path, detections_to_jsonl(dets).as_bytes())
}

pub fn load_detections(path: &Path) -> Result<Vec<Detection>> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    detections_from_jsonl(&s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn features(t: usize, d: usize) -> Tensor {
        Tensor::new(
            vec![t, d],
            (0..t * d).map(|i| (i as f64 * 0.37).sin()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn feature_layout() {
        let f = FeatureFile::new(features(3, 2)).unwrap();
        let b = f.to_bytes();
        assert_eq!(b.len(), 16 + 4 * 6);
        assert_eq!(&b[..4], b"TDFT");
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 2);
    }

    #[test]
    fn feature_errors_have_offsets() {
        let b = FeatureFile::new(features(4, 3)).unwrap().to_bytes();
        match FeatureFile::from_bytes(&b[..20]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 20),
            other => panic!("{other:?}"),
        }
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(
            FeatureFile::from_bytes(&bad),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut bad = b.clone();
        bad[4] = 9;
        assert!(matches!(
            FeatureFile::from_bytes(&bad),
            Err(Error::Format { offset: 4, .. })
        ));
        let mut bad = b.clone();
        bad[16..20].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            FeatureFile::from_bytes(&bad),
            Err(Error::Format { offset: 16, .. })
        ));
    }

    #[test]
    fn checkpoint_round_trip_and_truncation() {
        let ck = Checkpoint {
            config_json: "{\"bins\":4}".into(),
            params: vec![
                ("a.w".into(), features(2, 3)),
                ("a.b".into(), Tensor::vector(vec![1.5, -0.25])),
            ],
        };
        let b = ck.to_bytes();
        assert_eq!(Checkpoint::from_bytes(&b).unwrap(), ck);
        for cut in [3, 10, b.len() - 1] {
            assert!(matches!(
                Checkpoint::from_bytes(&b[..cut]),
                Err(Error::Format { .. })
            ));
        }
        let mut extra = b.clone();
        extra.push(0);
        assert!(matches!(
            Checkpoint::from_bytes(&extra),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn atomic_write_leaves_no_partial_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.bin");
        write_atomic(&p, b"hello").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"hello");
        let missing = dir.path().join("no/such/dir/f.bin");
        assert!(write_atomic(&missing, b"x").is_err());
        assert!(!missing.exists());
        let names: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(names.len(), 1);
    }

    #[test]
    fn detections_round_trip() {
        let dets = vec![
            Detection::new("b", 1.0, 4.0, 0, 0.9),
            Detection::new("a", 0.5, 2.0, 2, 0.3),
            Detection::new("b", 5.0, 9.0, 1, 0.1),
        ];
        let s = detections_to_jsonl(&dets);
        assert_eq!(s.lines().count(), 2);
        assert!(s.starts_with("{\"video_id\":\"b\""));
        let back = detections_from_jsonl(&s).unwrap();
        let mut expect = dets.clone();
        expect.swap(1, 2);
        assert_eq!(back, expect);
        assert!(detections_from_jsonl("{\"video_id\":\"a\",\"detections\":[{\"start\":3,\"end\":1,\"label\":0,\"score\":0.5}]}").is_err());
        assert!(detections_from_jsonl("{\"video\":\"a\"}").is_err());
    }

    proptest! {
        #[test]
        fn detection_floats_round_trip_exactly(
            start in 0.0f64..1e4,
            len in 0.0f64..1e3,
            score in 1e-6f64..1.0,
        ) {
            let d = vec![Detection::new("v", start, start + len, 1, score)];
            prop_assert_eq!(detections_from_jsonl(&detections_to_jsonl(&d)).unwrap(), d);
        }

        #[test]
        fn feature_bytes_round_trip(t in 0usize..20, d in 1usize..6, seed in any::<u64>()) {
            let vals: Vec<f64> = (0..t * d)
                .map(|i| ((seed.wrapping_add(i as u64) % 1000) as f64 - 500.0) * 0.013)
                .collect();
            let f = FeatureFile::new(Tensor::new(vec![t, d], vals).unwrap()).unwrap();
            let b = f.to_bytes();
            let back = FeatureFile::from_bytes(&b).unwrap();
            prop_assert_eq!(back.to_bytes(), b);
        }

        #[test]
        fn checkpoint_bytes_round_trip(vals in proptest::collection::vec(-1e6f64..1e6, 1..40)) {
            let n = vals.len();
            let ck = Checkpoint {
                config_json: "{}".into(),
                params: vec![("p".into(), Tensor::vector(vals)), ("q".into(), Tensor::zeros(&[n, 1]))],
            };
            let b = ck.to_bytes();
            let back = Checkpoint::from_bytes(&b).unwrap();
            prop_assert_eq!(back.to_bytes(), b);
        }
    }
}
