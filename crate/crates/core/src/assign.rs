//! Center-sampling label assignment.
//!
//! Instant `t` of level `l` sits at input position `p = t * 2^l`. It is
//! positive for a segment when `p` lies inside the segment, within
//! `radius * 2^l` of its midpoint, and when `max(p - s, e - p)` falls in the
//! level's regression range. Several matches resolve to the shortest segment.

use crate::annotation::ActionSegment;
use crate::error::{Error, Result};
use crate::pyramid::{level_len, level_stride};

/// Regression range `[lo, hi)` of level `l` in input instants:
/// `[0, 4), [4, 8), [8, 16), ...`, with the top level open-ended.
pub fn regression_range(level: usize, num_levels: usize) -> (f64, f64) {
    let lo = if level == 0 {
        0.0
    } else {
        (2usize << level) as f64
    };
    let hi = if level + 1 == num_levels {
        f64::INFINITY
    } else {
        (4usize << level) as f64
    };
    (lo, hi)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LevelTargets {
    /// Class of each positive instant, `None` for background.
    pub labels: Vec<Option<usize>>,
    /// Index into the ground-truth list of each positive instant.
    pub segment: Vec<Option<usize>>,
    /// Target start distance in level instants (0 for negatives).
    pub d_start: Vec<f64>,
    /// Target end distance in level instants (0 for negatives).
    pub d_end: Vec<f64>,
}

impl LevelTargets {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(t, l)| l.map(|_| t))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AssignedTargets {
    pub levels: Vec<LevelTargets>,
    pub segments: Vec<ActionSegment>,
}

impl AssignedTargets {
    pub fn num_positives(&self) -> usize {
        self.levels.iter().map(|l| l.positives().count()).sum()
    }

    pub fn num_negatives(&self) -> usize {
        self.levels.iter().map(LevelTargets::len).sum::<usize>() - self.num_positives()
    }
}

/// Assigns every instant of an `num_levels`-level pyramid over a sequence of
/// length `len`.
pub fn assign_targets(
    gt: &[ActionSegment],
    len: usize,
    num_levels: usize,
    center_radius: f64,
) -> Result<AssignedTargets> {
    for (i, s) in gt.iter().enumerate() {
        if s.validate().is_err() {
            return Err(Error::Validation(format!(
                "segment {i}: end {} must exceed start {}",
                s.end, s.start
            )));
        }
    }
    let mut levels = Vec::with_capacity(num_levels);
    for l in 0..num_levels {
        let n = level_len(len, l);
        let stride = level_stride(l) as f64;
        let (lo, hi) = regression_range(l, num_levels);
        let mut lt = LevelTargets {
            labels: vec![None; n],
            segment: vec![None; n],
            d_start: vec![0.0; n],
            d_end: vec![0.0; n],
        };
        for t in 0..n {
            let p = t as f64 * stride;
            let mut best: Option<usize> = None;
            for (k, s) in gt.iter().enumerate() {
                if p < s.start || p > s.end {
                    continue;
                }
                if (p - s.center()).abs() > center_radius * stride {
                    continue;
                }
                let reach = (p - s.start).max(s.end - p);
                if reach < lo || reach >= hi {
                    continue;
                }
                if best.is_none_or(|b| s.length() < gt[b].length()) {
                    best = Some(k);
                }
            }
            if let Some(k) = best {
                let s = &gt[k];
                lt.labels[t] = Some(s.label);
                lt.segment[t] = Some(k);
                lt.d_start[t] = (p - s.start) / stride;
                lt.d_end[t] = (s.end - p) / stride;
            }
        }
        levels.push(lt);
    }
    Ok(AssignedTargets {
        levels,
        segments: gt.to_vec(),
    })
}
