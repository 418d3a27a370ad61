//! Ground-truth segments and the JSON annotation file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;

/// A labelled interval in input-instant coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionSegment {
    pub start: f64,
    pub end: f64,
    pub label: usize,
}

impl ActionSegment {
    pub fn new(start: f64, end: f64, label: usize) -> Self {
        Self { start, end, label }
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.start + self.end)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.start.is_finite() && self.end.is_finite()) || self.end <= self.start {
            return Err(Error::Validation(format!(
                "segment [{}, {}] must satisfy start < end",
                self.start, self.end
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoAnnotation {
    pub video_id: String,
    pub num_instants: usize,
    pub segments: Vec<ActionSegment>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationFile {
    pub videos: Vec<VideoAnnotation>,
    pub num_classes: usize,
}

impl AnnotationFile {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Validation("num_classes must be positive".into()));
        }
        for (vi, v) in self.videos.iter().enumerate() {
            for (si, s) in v.segments.iter().enumerate() {
                let at = format!("videos[{vi}].segments[{si}] (video `{}`)", v.video_id);
                if !(s.start.is_finite() && s.end.is_finite()) || s.end <= s.start {
                    return Err(Error::Validation(format!(
                        "{at}: end {} must exceed start {}",
                        s.end, s.start
                    )));
                }
                if s.start < 0.0 || s.end > v.num_instants as f64 {
                    return Err(Error::Validation(format!(
                        "{at}: [{}, {}] lies outside 0..{}",
                        s.start, s.end, v.num_instants
                    )));
                }
                if s.label >= self.num_classes {
                    return Err(Error::Validation(format!(
                        "{at}: label {} not below num_classes {}",
                        s.label, self.num_classes
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(s);
        let file: Self = serde_path_to_error::deserialize(de).map_err(|e| Error::Json {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        file.validate()?;
        Ok(file)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("annotations serialize")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        write_atomic(path, self.to_json().as_bytes())
    }

    pub fn video(&self, id: &str) -> Option<&VideoAnnotation> {
        self.videos.iter().find(|v| v.video_id == id)
    }
}
