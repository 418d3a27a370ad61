//! Architecture and training hyperparameters.
//!
//! [`TrainConfig`] is the single flat configuration record; it is echoed into
//! checkpoints so a model can be rebuilt from the file alone. [`RunConfig`]
//! adds filesystem paths for the command-line tool.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Start, end and center-offset branches with bin-expectation decoding.
    #[default]
    Trident,
    /// Direct non-negative regression of the two boundary distances.
    Plain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Bins per boundary distribution (`B`).
    pub bins: usize,
    /// Depthwise window of the SGP window-level branch (`w`).
    pub window: usize,
    /// Scale factor for the wide window (`k`).
    pub scale_k: f64,
    pub levels: usize,
    pub dim: usize,
    pub num_classes: usize,
    pub input_dim: usize,
    pub ffn_ratio: usize,
    pub gn_groups: usize,
    pub head: HeadKind,
    /// Cut the gradient between the pyramid and the start/end branches.
    pub detach_boundary_heads: bool,

    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    /// Clip the global gradient norm to this value; 0 disables clipping.
    pub clip_grad_norm: f64,
    pub center_radius: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub seed: u64,

    /// Score threshold `λ` for candidate collection.
    pub score_threshold: f64,
    pub nms_sigma: f64,
    pub nms_min_score: f64,
    pub max_detections: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            bins: 16,
            window: 1,
            scale_k: 1.5,
            levels: 6,
            dim: 64,
            num_classes: 1,
            input_dim: 32,
            ffn_ratio: 4,
            gn_groups: 4,
            head: HeadKind::Trident,
            detach_boundary_heads: true,
            lr: 1e-4,
            weight_decay: 0.05,
            epochs: 40,
            warmup_epochs: 5,
            batch_size: 4,
            clip_grad_norm: 1.0,
            center_radius: 1.5,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            seed: 0,
            score_threshold: 0.01,
            nms_sigma: 0.5,
            nms_min_score: 1e-3,
            max_detections: 200,
        }
    }
}

/// Smallest odd integer at or above `round(k * w)`, rounding half up.
pub fn scaled_window(window: usize, k: f64) -> usize {
    let r = (k * window as f64 + 0.5).floor() as usize;
    if r.is_multiple_of(2) {
        r + 1
    } else {
        r
    }
}

impl TrainConfig {
    pub fn wide_window(&self) -> usize {
        scaled_window(self.window, self.scale_k)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("bins", self.bins),
            ("window", self.window),
            ("levels", self.levels),
            ("dim", self.dim),
            ("num_classes", self.num_classes),
            ("input_dim", self.input_dim),
            ("ffn_ratio", self.ffn_ratio),
            ("gn_groups", self.gn_groups),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("max_detections", self.max_detections),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("`{name}` must be positive")));
            }
        }
        if self.window.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "`window` must be odd, got {}",
                self.window
            )));
        }
        if !(self.scale_k >= 1.0 && self.scale_k.is_finite()) {
            return Err(Error::Config(format!(
                "`scale_k` must be >= 1, got {}",
                self.scale_k
            )));
        }
        if !self.dim.is_multiple_of(self.gn_groups) {
            return Err(Error::Config(format!(
                "`dim` ({}) must be divisible by `gn_groups` ({})",
                self.dim, self.gn_groups
            )));
        }
        if self.warmup_epochs >= self.epochs && self.warmup_epochs > 0 {
            return Err(Error::Config(format!(
                "`warmup_epochs` ({}) must be below `epochs` ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        let reals = [
            ("lr", self.lr, false),
            ("weight_decay", self.weight_decay, true),
            ("clip_grad_norm", self.clip_grad_norm, true),
            ("center_radius", self.center_radius, false),
            ("focal_gamma", self.focal_gamma, true),
            ("nms_sigma", self.nms_sigma, false),
            ("nms_min_score", self.nms_min_score, true),
        ];
        for (name, v, zero_ok) in reals {
            if !v.is_finite() || v < 0.0 || (!zero_ok && v == 0.0) {
                return Err(Error::Config(format!("`{name}` has invalid value {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) {
            return Err(Error::Config(format!(
                "`focal_alpha` must be in [0, 1], got {}",
                self.focal_alpha
            )));
        }
        if !(0.0..1.0).contains(&self.score_threshold) {
            return Err(Error::Config(format!(
                "`score_threshold` must be in [0, 1), got {}",
                self.score_threshold
            )));
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(s);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| Error::Json {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

/// Command-line configuration: every [`TrainConfig`] field plus paths. All
/// fields are optional in the JSON file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

const PATH_KEYS: [&str; 3] = ["data", "test_data", "output"];

impl RunConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let mut value: serde_json::Value = serde_json::from_str(s).map_err(|e| Error::Json {
            path: ".".into(),
            message: e.to_string(),
        })?;
        let obj = value.as_object_mut().ok_or_else(|| Error::Json {
            path: ".".into(),
            message: "config must be a JSON object".into(),
        })?;
        let mut paths = [None, None, None];
        for (slot, key) in paths.iter_mut().zip(PATH_KEYS) {
            if let Some(v) = obj.remove(key) {
                let s = v.as_str().ok_or_else(|| Error::Json {
                    path: key.into(),
                    message: "expected a path string".into(),
                })?;
                *slot = Some(PathBuf::from(s));
            }
        }
        let train: TrainConfig =
            serde_path_to_error::deserialize(value).map_err(|e| Error::Json {
                path: e.path().to_string(),
                message: e.inner().to_string(),
            })?;
        train.validate()?;
        let [data, test_data, output] = paths;
        Ok(Self {
            train,
            data,
            test_data,
            output,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&s)
    }

    /// Applies the `TRIDET_SEED` environment override, if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(s) = std::env::var("TRIDET_SEED") {
            self.train.seed = s.trim().parse().map_err(|_| {
                Error::Config(format!(
                    "TRIDET_SEED must be an unsigned integer, got `{s}`"
                ))
            })?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaled_window_rounds_up_to_odd() {
        assert_eq!(scaled_window(1, 1.5), 3);
        assert_eq!(scaled_window(3, 1.5), 5);
        assert_eq!(scaled_window(3, 1.0), 3);
        assert_eq!(scaled_window(15, 1.3), 21);
        assert_eq!(scaled_window(11, 1.0), 11);
        for w in (1..30).step_by(2) {
            for k10 in 10..40 {
                let kw = scaled_window(w, k10 as f64 / 10.0);
                assert!(kw % 2 == 1 && kw >= w);
            }
        }
    }

    #[test]
    fn defaults_validate() {
        TrainConfig::default().validate().unwrap();
        let c = TrainConfig::from_json_str("{}").unwrap();
        assert_eq!(c, TrainConfig::default());
        assert_eq!(c.bins, 16);
        assert_eq!(c.window, 1);
        assert_eq!(c.levels, 6);
    }

    #[test]
    fn unknown_field_reports_path() {
        let err = RunConfig::from_json_str(r#"{"bins": 8, "binz": 3}"#).unwrap_err();
        assert!(err.to_string().contains("binz"), "{err}");
        let err = RunConfig::from_json_str(r#"{"bins": "many"}"#).unwrap_err();
        assert!(err.to_string().contains("bins"), "{err}");
    }

    #[test]
    fn run_config_paths_and_validation() {
        let c = RunConfig::from_json_str(r#"{"data": "d", "dim": 32, "head": "plain"}"#).unwrap();
        assert_eq!(c.data.as_deref(), Some(Path::new("d")));
        assert_eq!(c.train.dim, 32);
        assert_eq!(c.train.head, HeadKind::Plain);
        assert!(matches!(
            RunConfig::from_json_str(r#"{"dim": 30}"#),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_json_str(r#"{"window": 2}"#),
            Err(Error::Config(_))
        ));
    }
}
