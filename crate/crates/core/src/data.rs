//! Datasets on disk and the synthetic generator.
//!
//! A dataset directory holds `annotations.json` and one feature file per
//! video under `features/<video_id>.tdft`.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::annotation::{ActionSegment, AnnotationFile, VideoAnnotation};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::io::FeatureFile;
use crate::tensor::Tensor;

pub const ANNOTATION_FILE: &str = "annotations.json";
pub const FEATURE_DIR: &str = "features";
pub const FEATURE_EXT: &str = "tdft";

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub video_id: String,
    /// `[T, D]`
    pub features: Tensor,
    pub segments: Vec<ActionSegment>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
}

pub fn feature_path(dir: &Path, video_id: &str) -> PathBuf {
    dir.join(FEATURE_DIR)
        .join(format!("{video_id}.{FEATURE_EXT}"))
}

impl Dataset {
    pub fn annotations(&self) -> AnnotationFile {
        AnnotationFile {
            videos: self
                .samples
                .iter()
                .map(|s| VideoAnnotation {
                    video_id: s.video_id.clone(),
                    num_instants: s.features.rows(),
                    segments: s.segments.clone(),
                })
                .collect(),
            num_classes: self.num_classes,
        }
    }

    /// First `n` samples and the rest.
    pub fn split(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.samples.len());
        let head = Dataset {
            samples: self.samples[..n].to_vec(),
            num_classes: self.num_classes,
        };
        let tail = Dataset {
            samples: self.samples[n..].to_vec(),
            num_classes: self.num_classes,
        };
        (head, tail)
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.samples.first().map(|s| s.features.row_len())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let ann = AnnotationFile::load(&dir.join(ANNOTATION_FILE))?;
        let mut samples = Vec::with_capacity(ann.videos.len());
        let mut dim = None;
        for v in &ann.videos {
            let f = FeatureFile::load(&feature_path(dir, &v.video_id))?.features;
            if f.rows() != v.num_instants {
                return Err(Error::Validation(format!(
                    "video `{}`: annotation says {} instants, features have {}",
                    v.video_id,
                    v.num_instants,
                    f.rows()
                )));
            }
            if *dim.get_or_insert(f.row_len()) != f.row_len() {
                return Err(Error::Validation(format!(
                    "video `{}` has feature width {}, expected {}",
                    v.video_id,
                    f.row_len(),
                    dim.unwrap_or(0)
                )));
            }
            samples.push(Sample {
                video_id: v.video_id.clone(),
                features: f,
                segments: v.segments.clone(),
            });
        }
        Ok(Self {
            samples,
            num_classes: ann.num_classes,
        })
    }

    /// Writes feature files first and the annotation file last, each
    /// atomically.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let ann = self.annotations();
        ann.validate()?;
        let fdir = dir.join(FEATURE_DIR);
        std::fs::create_dir_all(&fdir).map_err(|e| Error::io(&fdir, e))?;
        for s in &self.samples {
            FeatureFile::new(s.features.clone())?.save(&feature_path(dir, &s.video_id))?;
        }
        ann.save(&dir.join(ANNOTATION_FILE))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_videos: usize,
    pub len: usize,
    pub dim: usize,
    pub num_classes: usize,
    /// Mean number of segments per video.
    pub density: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_videos: 10,
            len: 256,
            dim: 32,
            num_classes: 3,
            density: 3.0,
            noise_std: 1.0,
            seed: 0,
        }
    }
}

/// Attempts at placing a video's segments before giving up.
pub const PLACEMENT_RETRIES: usize = 200;
/// Instants over which a segment's signal ramps in from its start.
pub const ONSET_RAMP: f64 = 2.0;
const TEMPLATE_SEED: u64 = 0x7d_7e_3a_11;

/// Class-specific signal shared by every dataset: a per-channel offset plus
/// a per-channel oscillation whose frequency depends on the class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassTemplate {
    pub offset: Vec<f64>,
    pub amplitude: Vec<f64>,
    pub phase: Vec<f64>,
    /// Cycles per instant.
    pub frequency: f64,
}

impl ClassTemplate {
    pub fn new(class: usize, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(TEMPLATE_SEED.wrapping_add(class as u64));
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        Self {
            offset: (0..dim).map(|_| 1.5 * unit.sample(&mut rng)).collect(),
            amplitude: (0..dim).map(|_| rng.random_range(0.5..1.0)).collect(),
            phase: (0..dim)
                .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
                .collect(),
            frequency: 1.0 / (4.0 + 3.0 * class as f64),
        }
    }

    /// Signal at instant `tau` of a segment starting at `start`, before the
    /// onset ramp.
    pub fn value(&self, j: usize, tau: f64, start: f64) -> f64 {
        let x = tau - start;
        self.offset[j]
            + self.amplitude[j] * (std::f64::consts::TAU * self.frequency * x + self.phase[j]).sin()
    }

    pub fn ramp(tau: f64, start: f64) -> f64 {
        ((tau - start + 1.0) / ONSET_RAMP).min(1.0)
    }
}

fn place_segments(
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
    count: usize,
) -> Option<Vec<ActionSegment>> {
    let t = cfg.len;
    let (lo, hi) = ((t / 32).max(1), (t / 4).max(1));
    let lens: Vec<usize> = (0..count).map(|_| rng.random_range(lo..=hi)).collect();
    let used: usize = lens.iter().sum();
    if used > t {
        return None;
    }
    // Spread the free instants over the count + 1 gaps by sorted cut points.
    let free = t - used;
    let mut cuts: Vec<usize> = (0..count).map(|_| rng.random_range(0..=free)).collect();
    cuts.sort_unstable();
    let mut segs = Vec::with_capacity(count);
    let mut cursor = 0;
    let mut prev_cut = 0;
    for (len, cut) in lens.into_iter().zip(cuts) {
        cursor += cut - prev_cut;
        prev_cut = cut;
        let label = rng.random_range(0..cfg.num_classes);
        segs.push(ActionSegment::new(
            cursor as f64,
            (cursor + len) as f64,
            label,
        ));
        cursor += len;
    }
    Some(segs)
}

fn video(cfg: &SynthConfig, templates: &[ClassTemplate], index: usize) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let count = if cfg.density > 0.0 {
        Poisson::new(cfg.density)
            .map_err(|e| Error::Generation(e.to_string()))?
            .sample(&mut rng) as usize
    } else {
        0
    };
    let segments = (0..PLACEMENT_RETRIES)
        .find_map(|_| place_segments(cfg, &mut rng, count))
        .ok_or_else(|| {
            Error::Generation(format!(
                "could not place {count} disjoint segments in {} instants after {PLACEMENT_RETRIES} attempts",
                cfg.len
            ))
        })?;
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Generation(e.to_string()))?;
    let mut x = Tensor::zeros(&[cfg.len, cfg.dim]);
    for v in x.data_mut() {
        *v = noise.sample(&mut rng);
    }
    add_signal(&mut x, &segments, templates);
    Ok(Sample {
        video_id: format!("video_{index:04}"),
        features: x,
        segments,
    })
}

/// Adds every segment's ramped class template onto `x`.
pub fn add_signal(x: &mut Tensor, segments: &[ActionSegment], templates: &[ClassTemplate]) {
    let d = x.row_len();
    for s in segments {
        let tpl = &templates[s.label];
        for tau in s.start as usize..s.end as usize {
            let r = ClassTemplate::ramp(tau as f64, s.start);
            for j in 0..d {
                let v = x.get2(tau, j) + r * tpl.value(j, tau as f64, s.start);
                x.set2(tau, j, v);
            }
        }
    }
}

pub fn class_templates(num_classes: usize, dim: usize) -> Vec<ClassTemplate> {
    (0..num_classes)
        .map(|c| ClassTemplate::new(c, dim))
        .collect()
}

/// Deterministic synthetic dataset: Gaussian background with disjoint
/// segments of length `len/32 ..= len/4`, each carrying its class template.
pub fn generate_synthetic(cfg: &SynthConfig, exec: Execution) -> Result<Dataset> {
    if cfg.num_classes == 0 {
        return Err(Error::Config("num_classes must be at least 1".into()));
    }
    if cfg.len < 32 {
        return Err(Error::Config(format!(
            "sequence length must be at least 32, got {}",
            cfg.len
        )));
    }
    if cfg.dim == 0 {
        return Err(Error::Config("feature dimension must be positive".into()));
    }
    if !(cfg.density >= 0.0 && cfg.density.is_finite()) {
        return Err(Error::Config(format!("invalid density {}", cfg.density)));
    }
    if !(cfg.noise_std >= 0.0 && cfg.noise_std.is_finite()) {
        return Err(Error::Config(format!(
            "invalid noise_std {}",
            cfg.noise_std
        )));
    }
    let templates = class_templates(cfg.num_classes, cfg.dim);
    let samples = exec::map_range(exec, cfg.num_videos, |i| video(cfg, &templates, i))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        samples,
        num_classes: cfg.num_classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_density_is_pure_noise() {
        let cfg = SynthConfig {
            num_videos: 3,
            density: 0.0,
            ..Default::default()
        };
        let d = generate_synthetic(&cfg, Execution::Sequential).unwrap();
        assert!(d.samples.iter().all(|s| s.segments.is_empty()));
        let x = &d.samples[0].features;
        let mean = x.sum() / x.len() as f64;
        let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.len() as f64;
        assert!(mean.abs() < 0.05 && (var - 1.0).abs() < 0.1, "{mean} {var}");
    }

    #[test]
    fn deterministic_and_execution_independent() {
        let cfg = SynthConfig {
            num_videos: 6,
            seed: 7,
            ..Default::default()
        };
        let a = generate_synthetic(&cfg, Execution::Sequential).unwrap();
        let b = generate_synthetic(&cfg, Execution::Parallel).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&SynthConfig { seed: 8, ..cfg }, Execution::Sequential).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn segments_are_valid_and_disjoint() {
        let cfg = SynthConfig {
            num_videos: 40,
            density: 4.0,
            ..Default::default()
        };
        let d = generate_synthetic(&cfg, Execution::Sequential).unwrap();
        d.annotations().validate().unwrap();
        for s in &d.samples {
            for w in s.segments.windows(2) {
                assert!(w[0].end <= w[1].start);
            }
            for seg in &s.segments {
                assert!((8.0..=64.0).contains(&seg.length()));
            }
        }
    }

    #[test]
    fn infeasible_density_fails() {
        let cfg = SynthConfig {
            num_videos: 1,
            len: 64,
            density: 60.0,
            ..Default::default()
        };
        assert!(matches!(
            generate_synthetic(&cfg, Execution::Sequential),
            Err(Error::Generation(_))
        ));
        assert!(matches!(
            generate_synthetic(&SynthConfig { len: 16, ..cfg }, Execution::Sequential),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn nearest_template_recovers_classes() {
        // clean segments, classified by distance between the segment mean and
        // each class's channel offsets
        let cfg = SynthConfig {
            num_videos: 30,
            noise_std: 0.0,
            density: 3.0,
            ..Default::default()
        };
        let d = generate_synthetic(&cfg, Execution::Sequential).unwrap();
        let templates = class_templates(cfg.num_classes, cfg.dim);
        let mut checked = 0;
        for s in &d.samples {
            for seg in &s.segments {
                let n = seg.length();
                let mean: Vec<f64> = (0..cfg.dim)
                    .map(|j| {
                        (seg.start as usize..seg.end as usize)
                            .map(|t| s.features.get2(t, j))
                            .sum::<f64>()
                            / n
                    })
                    .collect();
                let best = (0..cfg.num_classes)
                    .min_by(|&a, &b| {
                        let da: f64 = mean
                            .iter()
                            .zip(&templates[a].offset)
                            .map(|(m, o)| (m - o).powi(2))
                            .sum();
                        let db: f64 = mean
                            .iter()
                            .zip(&templates[b].offset)
                            .map(|(m, o)| (m - o).powi(2))
                            .sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                assert_eq!(best, seg.label);
                checked += 1;
            }
        }
        assert!(checked >= 50, "{checked}");
    }

    #[test]
    fn directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            num_videos: 3,
            len: 40,
            dim: 4,
            ..Default::default()
        };
        let d = generate_synthetic(&cfg, Execution::Sequential).unwrap();
        d.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.samples.len(), 3);
        assert_eq!(back.annotations(), d.annotations());
        for (a, b) in back.samples.iter().zip(&d.samples) {
            for (x, y) in a.features.data().iter().zip(b.features.data()) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
    }
}
