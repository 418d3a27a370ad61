//! Candidate collection and Gaussian Soft-NMS.

use std::cmp::Ordering;

use crate::error::Result;
use crate::eval::temporal_iou;
use crate::head::HeadOutputs;
use crate::model::Model;
use crate::ops::sigmoid;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub video_id: String,
    pub start: f64,
    pub end: f64,
    pub label: usize,
    pub score: f64,
}

impl Detection {
    pub fn new(
        video_id: impl Into<String>,
        start: f64,
        end: f64,
        label: usize,
        score: f64,
    ) -> Self {
        Self {
            video_id: video_id.into(),
            start,
            end,
            label,
            score,
        }
    }

    fn span(&self) -> (f64, f64) {
        (self.start, self.end)
    }
}

/// Output order: score descending, then earlier start, then lower label.
pub fn output_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.start.total_cmp(&b.start))
        .then(a.label.cmp(&b.label))
}

/// Every `(level, instant, class)` whose sigmoid score exceeds `threshold`,
/// decoded and clipped to `[0, len]`.
pub fn collect_candidates(
    heads: &HeadOutputs,
    video_id: &str,
    len: usize,
    threshold: f64,
) -> Vec<Detection> {
    let t_max = len as f64;
    let mut out = Vec::new();
    for lo in &heads.levels {
        let c = lo.cls_logits.row_len();
        for t in 0..lo.len() {
            let (s, e) = lo.segment(t);
            let (s, e) = (s.clamp(0.0, t_max), e.clamp(0.0, t_max));
            for k in 0..c {
                let score = sigmoid(lo.cls_logits.get2(t, k));
                if score > threshold {
                    out.push(Detection::new(video_id, s, e, k, score));
                }
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SoftNmsParams {
    pub sigma: f64,
    pub min_score: f64,
    pub max_keep: usize,
}

impl Default for SoftNmsParams {
    fn default() -> Self {
        Self {
            sigma: 0.5,
            min_score: 1e-3,
            max_keep: 200,
        }
    }
}

fn decay(score: f64, iou: f64, sigma: f64) -> f64 {
    score * (-(iou * iou) / sigma).exp()
}

/// Selection preference among live candidates of one group: higher score,
/// then earlier start, then lower label, then earlier input position.
fn prefer(dets: &[Detection], a: (usize, f64), b: (usize, f64)) -> bool {
    let (da, db) = (&dets[a.0], &dets[b.0]);
    b.1.total_cmp(&a.1)
        .then(da.start.total_cmp(&db.start))
        .then(da.label.cmp(&db.label))
        .then(a.0.cmp(&b.0))
        == Ordering::Less
}

/// Gaussian Soft-NMS. Decay applies only between detections of the same
/// video and class; at most `max_keep` detections survive in total.
pub fn soft_nms(dets: &[Detection], p: SoftNmsParams) -> Vec<Detection> {
    // group indices by (video, label), keeping first-appearance order
    let mut keys: Vec<(&str, usize)> = Vec::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, d) in dets.iter().enumerate() {
        let key = (d.video_id.as_str(), d.label);
        match keys.iter().position(|k| *k == key) {
            Some(g) => groups[g].push(i),
            None => {
                keys.push(key);
                groups.push(vec![i]);
            }
        }
    }
    let mut kept = Vec::new();
    for idx in groups {
        let mut live: Vec<(usize, f64)> = idx
            .into_iter()
            .map(|i| (i, dets[i].score))
            .filter(|&(_, s)| s >= p.min_score)
            .collect();
        let mut taken = 0;
        while !live.is_empty() && taken < p.max_keep {
            let mut best = 0;
            for j in 1..live.len() {
                if prefer(dets, live[j], live[best]) {
                    best = j;
                }
            }
            let (bi, bs) = live.swap_remove(best);
            let span = dets[bi].span();
            kept.push(Detection {
                score: bs,
                ..dets[bi].clone()
            });
            taken += 1;
            live.retain_mut(|(i, s)| {
                *s = decay(*s, temporal_iou(span, dets[*i].span()), p.sigma);
                *s >= p.min_score
            });
        }
    }
    kept.sort_by(output_order);
    kept.truncate(p.max_keep);
    kept
}

/// Full inference on one video.
pub fn detect(model: &Model, features: &Tensor, video_id: &str) -> Result<Vec<Detection>> {
    let heads = model.predict(features)?;
    let cfg = &model.cfg;
    let cands = collect_candidates(&heads, video_id, features.rows(), cfg.score_threshold);
    Ok(soft_nms(
        &cands,
        SoftNmsParams {
            sigma: cfg.nms_sigma,
            min_score: cfg.nms_min_score,
            max_keep: cfg.max_detections,
        },
    ))
}
