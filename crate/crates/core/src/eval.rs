//! Temporal IoU and mean average precision over IoU thresholds.

use std::collections::{BTreeMap, HashMap};

use crate::annotation::AnnotationFile;
use crate::error::Result;
use crate::infer::Detection;
use crate::io::write_atomic;

pub const DEFAULT_THRESHOLDS: [f64; 5] = [0.3, 0.4, 0.5, 0.6, 0.7];

/// Intersection over union of two `(start, end)` intervals. Disjoint or
/// zero-length intervals give 0.
pub fn temporal_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= 0.0 || inter <= 0.0 {
        return 0.0;
    }
    inter / union
}

/// All-point interpolated area under a precision/recall curve given
/// per-detection match flags (in score order) and the number of ground
/// truths.
pub fn average_precision(matched: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut prec = Vec::with_capacity(matched.len());
    let mut rec = Vec::with_capacity(matched.len());
    for (i, &m) in matched.iter().enumerate() {
        tp += m as usize;
        prec.push(tp as f64 / (i + 1) as f64);
        rec.push(tp as f64 / num_gt as f64);
    }
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let mut ap = 0.0;
    let mut last_recall = 0.0;
    for (p, r) in prec.iter().zip(&rec) {
        if *r > last_recall {
            ap += (r - last_recall) * p;
            last_recall = *r;
        }
    }
    ap
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapReport {
    pub thresholds: Vec<f64>,
    /// `ap[i][c]`: AP of class `c` at threshold `i`; `None` for classes
    /// without ground truth.
    pub ap: Vec<Vec<Option<f64>>>,
    /// Mean over classes with ground truth, per threshold.
    pub map: Vec<f64>,
    pub average_map: f64,
}

impl MapReport {
    /// mAP at `threshold`, if it was evaluated.
    pub fn map_at(&self, threshold: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|&t| (t - threshold).abs() < 1e-12)
            .map(|i| self.map[i])
    }

    pub fn to_json(&self) -> String {
        let mut m = BTreeMap::new();
        for (t, v) in self.thresholds.iter().zip(&self.map) {
            m.insert(format!("{t}"), serde_json::json!(v));
        }
        m.insert(
            "average_mAP".to_string(),
            serde_json::json!(self.average_map),
        );
        serde_json::to_string_pretty(&m).expect("report serializes")
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        write_atomic(path, self.to_json().as_bytes())
    }
}

/// Greedy one-to-one matching per video and class: each detection, in
/// descending score order, takes the unmatched ground truth of highest IoU
/// at or above the threshold.
pub fn mean_ap(dets: &[Detection], gt: &AnnotationFile, thresholds: &[f64]) -> MapReport {
    let c = gt.num_classes;
    // ground truth per class: (video, start, end)
    let mut gts: Vec<Vec<(&str, f64, f64)>> = vec![Vec::new(); c];
    for v in &gt.videos {
        for s in &v.segments {
            if s.label < c {
                gts[s.label].push((&v.video_id, s.start, s.end));
            }
        }
    }
    let mut by_class: Vec<Vec<&Detection>> = vec![Vec::new(); c];
    for d in dets {
        if d.label < c {
            by_class[d.label].push(d);
        }
    }
    for list in &mut by_class {
        list.sort_by(|a, b| b.score.total_cmp(&a.score));
    }

    let mut ap = Vec::with_capacity(thresholds.len());
    let mut map = Vec::with_capacity(thresholds.len());
    for &thr in thresholds {
        let mut row = Vec::with_capacity(c);
        for k in 0..c {
            if gts[k].is_empty() {
                row.push(None);
                continue;
            }
            let mut index: HashMap<&str, Vec<usize>> = HashMap::new();
            for (i, g) in gts[k].iter().enumerate() {
                index.entry(g.0).or_default().push(i);
            }
            let mut used = vec![false; gts[k].len()];
            let matched: Vec<bool> = by_class[k]
                .iter()
                .map(|d| {
                    let mut best: Option<(usize, f64)> = None;
                    for &i in index.get(d.video_id.as_str()).into_iter().flatten() {
                        if used[i] {
                            continue;
                        }
                        let iou = temporal_iou((d.start, d.end), (gts[k][i].1, gts[k][i].2));
                        if iou >= thr && best.is_none_or(|(_, b)| iou > b) {
                            best = Some((i, iou));
                        }
                    }
                    if let Some((i, _)) = best {
                        used[i] = true;
                    }
                    best.is_some()
                })
                .collect();
            row.push(Some(average_precision(&matched, gts[k].len())));
        }
        let vals: Vec<f64> = row.iter().flatten().copied().collect();
        map.push(if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        });
        ap.push(row);
    }
    let average_map = if map.is_empty() {
        0.0
    } else {
        map.iter().sum::<f64>() / map.len() as f64
    };
    MapReport {
        thresholds: thresholds.to_vec(),
        ap,
        map,
        average_map,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::{ActionSegment, VideoAnnotation};
    use proptest::prelude::*;

    fn gt(segs: &[(f64, f64, usize)], c: usize) -> AnnotationFile {
        AnnotationFile {
            videos: vec![VideoAnnotation {
                video_id: "v".into(),
                num_instants: 1000,
                segments: segs
                    .iter()
                    .map(|&(s, e, l)| ActionSegment::new(s, e, l))
                    .collect(),
            }],
            num_classes: c,
        }
    }

    #[test]
    fn iou_hand_values() {
        assert_eq!(temporal_iou((2.0, 7.0), (2.0, 7.0)), 1.0);
        assert!((temporal_iou((0.0, 10.0), (5.0, 15.0)) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(temporal_iou((0.0, 1.0), (2.0, 3.0)), 0.0);
        assert_eq!(temporal_iou((3.0, 3.0), (3.0, 3.0)), 0.0);
    }

    #[test]
    fn perfect_and_empty() {
        let a = gt(&[(0.0, 10.0, 0), (20.0, 30.0, 1)], 2);
        let dets = vec![
            Detection::new("v", 0.0, 10.0, 0, 0.2),
            Detection::new("v", 20.0, 30.0, 1, 0.9),
        ];
        let r = mean_ap(&dets, &a, &DEFAULT_THRESHOLDS);
        assert_eq!(r.map, vec![1.0; 5]);
        assert_eq!(r.average_map, 1.0);
        let r = mean_ap(&[], &a, &DEFAULT_THRESHOLDS);
        assert_eq!(r.average_map, 0.0);
    }

    #[test]
    fn lower_scored_match_gives_half() {
        let a = gt(&[(10.0, 20.0, 0)], 1);
        let dets = vec![
            Detection::new("v", 50.0, 60.0, 0, 0.9),
            Detection::new("v", 10.0, 20.0, 0, 0.4),
        ];
        let r = mean_ap(&dets, &a, &[0.5]);
        assert!((r.map[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn report_json_keys() {
        let a = gt(&[(10.0, 20.0, 0)], 1);
        let r = mean_ap(
            &[Detection::new("v", 10.0, 20.0, 0, 0.5)],
            &a,
            &DEFAULT_THRESHOLDS,
        );
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(v["0.3"], 1.0);
        assert_eq!(v["0.7"], 1.0);
        assert_eq!(v["average_mAP"], 1.0);
    }

    proptest! {
        #[test]
        fn monotone_score_transform_is_invariant(
            raw in proptest::collection::vec((0.0f64..90.0, 1.0f64..20.0, 0usize..2, 0.01f64..1.0), 1..25),
        ) {
            let a = gt(&[(5.0, 20.0, 0), (30.0, 45.0, 1), (60.0, 70.0, 0)], 2);
            let dets: Vec<Detection> = raw.iter().map(|&(s, l, c, p)| Detection::new("v", s, s + l, c, p)).collect();
            let squashed: Vec<Detection> = dets
                .iter()
                .map(|d| Detection { score: d.score.powi(3) * 0.5 + 1e-3, ..d.clone() })
                .collect();
            let r1 = mean_ap(&dets, &a, &DEFAULT_THRESHOLDS);
            let r2 = mean_ap(&squashed, &a, &DEFAULT_THRESHOLDS);
            prop_assert_eq!(r1.map, r2.map);
            for ap in r1.ap.iter().flatten().flatten() {
                prop_assert!((0.0..=1.0).contains(ap));
            }
        }

        #[test]
        fn extra_low_miss_never_helps(
            raw in proptest::collection::vec((0.0f64..90.0, 1.0f64..20.0, 0.01f64..1.0), 0..15),
        ) {
            let a = gt(&[(5.0, 20.0, 0), (60.0, 70.0, 0)], 1);
            let mut dets: Vec<Detection> = raw.iter().map(|&(s, l, p)| Detection::new("v", s, s + l, 0, p)).collect();
            let before = mean_ap(&dets, &a, &[0.5]).map[0];
            dets.push(Detection::new("v", 500.0, 510.0, 0, 1e-4));
            let after = mean_ap(&dets, &a, &[0.5]).map[0];
            prop_assert!(after <= before + 1e-15);
        }
    }
}
