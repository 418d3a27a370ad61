//! Focal classification loss, 1-D GIoU regression loss and their
//! combination over a pyramid.
//!
//! ```text
//! loss = 1/N_pos * sum_pos (q * L_cls + L_reg) + 1/N_neg * sum_neg L_cls
//! ```
//!
//! `q` is the temporal IoU between the decoded segment and its target. It is
//! read from the forward values and carries no gradient.

use std::cmp::Ordering;

use crate::assign::AssignedTargets;
use crate::error::{Error, Result};
use crate::eval::temporal_iou;
use crate::graph::{Backward, Graph, Var};
use crate::head::LevelVars;
use crate::ops::sigmoid;
use crate::pyramid::level_stride;
use crate::tensor::Tensor;

pub const PROB_CLAMP: f64 = 1e-7;

/// Focal loss of a probability `p` against a binary target.
pub fn focal_loss(p: f64, y: bool, alpha: f64, gamma: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if y {
        -alpha * (1.0 - p).powf(gamma) * p.ln()
    } else {
        -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln()
    }
}

/// Focal loss of a logit and its derivative with respect to that logit.
fn focal_from_logit(x: f64, y: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let raw = sigmoid(x);
    let p = raw.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let loss = focal_loss(p, y, alpha, gamma);
    if p != raw {
        return (loss, 0.0);
    }
    let q = 1.0 - p;
    let dldp = if y {
        let pow_m1 = if gamma == 0.0 {
            0.0
        } else {
            gamma * q.powf(gamma - 1.0)
        };
        alpha * (pow_m1 * p.ln() - q.powf(gamma) / p)
    } else {
        let pow_m1 = if gamma == 0.0 {
            0.0
        } else {
            gamma * p.powf(gamma - 1.0)
        };
        -(1.0 - alpha) * (pow_m1 * q.ln() - p.powf(gamma) / q)
    };
    (loss, dldp * p * q)
}

/// 1-D GIoU loss `1 - GIoU` between a prediction and a target segment.
pub fn iou_loss(pred: (f64, f64), gt: (f64, f64)) -> Result<f64> {
    if gt.1.partial_cmp(&gt.0) != Some(Ordering::Greater) {
        return Err(Error::Validation(format!(
            "target segment [{}, {}] is degenerate",
            gt.0, gt.1
        )));
    }
    if !matches!(
        pred.1.partial_cmp(&pred.0),
        Some(Ordering::Greater | Ordering::Equal)
    ) {
        return Err(Error::Validation(format!(
            "predicted segment [{}, {}] is reversed",
            pred.0, pred.1
        )));
    }
    Ok(giou_terms(pred, gt).0)
}

/// Loss and its derivatives with respect to the predicted start and end.
fn giou_terms(pred: (f64, f64), gt: (f64, f64)) -> (f64, f64, f64) {
    let (ps, pe) = pred;
    let (s, e) = gt;
    let inter = (pe.min(e) - ps.max(s)).max(0.0);
    let union = (pe - ps) + (e - s) - inter;
    let hull = pe.max(e) - ps.min(s);
    let loss = 2.0 - inter / union - union / hull;

    let (di_ds, di_de) = if inter > 0.0 {
        (
            if ps > s { -1.0 } else { 0.0 },
            if pe < e { 1.0 } else { 0.0 },
        )
    } else {
        (0.0, 0.0)
    };
    let du_ds = -1.0 - di_ds;
    let du_de = 1.0 - di_de;
    let dh_ds = if ps < s { -1.0 } else { 0.0 };
    let dh_de = if pe > e { 1.0 } else { 0.0 };
    let d = |di: f64, du: f64, dh: f64| {
        -(di * union - inter * du) / (union * union) - (du * hull - union * dh) / (hull * hull)
    };
    (loss, d(di_ds, du_ds, dh_ds), d(di_de, du_de, dh_de))
}

/// Weighted focal loss summed over a `[T, C]` logit tensor; the gradient is
/// computed alongside the value.
struct FocalRule {
    grad: Vec<f64>,
}

impl Backward for FocalRule {
    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        grad: &[f64],
        _needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let g = grad[0];
        vec![Some(self.grad.iter().map(|v| v * g).collect())]
    }
}

/// `sum_t weight[t] * sum_c focal(sigmoid(x[t, c]), label[t] == c)`.
pub fn focal_term(
    g: &mut Graph,
    logits: Var,
    labels: &[Option<usize>],
    weights: &[f64],
    alpha: f64,
    gamma: f64,
) -> Result<Var> {
    let x = g.value(logits);
    if x.shape().len() != 2 || x.rows() != labels.len() || weights.len() != labels.len() {
        return Err(Error::dim(
            "focal_term",
            x.shape(),
            &[labels.len(), weights.len()],
        ));
    }
    let c = x.row_len();
    let mut total = 0.0;
    let mut grad = vec![0.0; x.len()];
    for (t, (&lab, &w)) in labels.iter().zip(weights).enumerate() {
        if w == 0.0 {
            continue;
        }
        for k in 0..c {
            let (l, d) = focal_from_logit(x.get2(t, k), lab == Some(k), alpha, gamma);
            total += w * l;
            grad[t * c + k] = w * d;
        }
    }
    Ok(g.custom(
        &[logits],
        Tensor::scalar(total),
        Box::new(FocalRule { grad }),
    ))
}

struct GiouRule {
    d_start: Vec<f64>,
    d_end: Vec<f64>,
}

impl Backward for GiouRule {
    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        grad: &[f64],
        _needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let g = grad[0];
        vec![
            Some(self.d_start.iter().map(|v| v * g).collect()),
            Some(self.d_end.iter().map(|v| v * g).collect()),
        ]
    }
}

/// `weight * sum_pos (1 - GIoU)` over the positive instants of one level,
/// with predicted distances in level instants.
pub fn giou_term(
    g: &mut Graph,
    start_offsets: Var,
    end_offsets: Var,
    level: usize,
    targets: &[Option<(f64, f64)>],
    weight: f64,
) -> Result<Var> {
    let (ds, de) = (g.value(start_offsets), g.value(end_offsets));
    if ds.len() != targets.len() || de.len() != targets.len() {
        return Err(Error::dim("giou_term", ds.shape(), de.shape()));
    }
    let stride = level_stride(level) as f64;
    let mut total = 0.0;
    let mut gs = vec![0.0; targets.len()];
    let mut ge = vec![0.0; targets.len()];
    for (t, tgt) in targets.iter().enumerate() {
        let Some(gt) = *tgt else { continue };
        let p = t as f64 * stride;
        let pred = (p - ds.data()[t] * stride, p + de.data()[t] * stride);
        let (l, dps, dpe) = giou_terms(pred, gt);
        total += weight * l;
        gs[t] = -weight * dps * stride;
        ge[t] = weight * dpe * stride;
    }
    Ok(g.custom(
        &[start_offsets, end_offsets],
        Tensor::scalar(total),
        Box::new(GiouRule {
            d_start: gs,
            d_end: ge,
        }),
    ))
}

/// Per-level, per-instant classification weights of positives.
#[derive(Clone, Debug, PartialEq)]
pub struct QualityWeights {
    pub levels: Vec<Vec<f64>>,
}

/// Temporal IoU of every positive's decoded segment with its target; zero
/// elsewhere.
pub fn quality_weights(
    g: &Graph,
    heads: &[LevelVars],
    targets: &AssignedTargets,
) -> QualityWeights {
    let levels = heads
        .iter()
        .zip(&targets.levels)
        .map(|(lv, lt)| {
            let stride = level_stride(lv.level) as f64;
            let (ds, de) = (
                g.value(lv.start_offsets).data(),
                g.value(lv.end_offsets).data(),
            );
            (0..lt.len())
                .map(|t| match lt.segment[t] {
                    Some(k) => {
                        let gt = &targets.segments[k];
                        let p = t as f64 * stride;
                        temporal_iou((p - ds[t] * stride, p + de[t] * stride), (gt.start, gt.end))
                    }
                    None => 0.0,
                })
                .collect()
        })
        .collect();
    QualityWeights { levels }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub cls_pos: f64,
    pub cls_neg: f64,
    pub reg: f64,
    pub num_pos: usize,
    pub num_neg: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

/// Full training loss of one sequence. `quality` overrides the IoU weights,
/// which makes the loss a smooth function of the parameters for gradient
/// checking.
pub fn total_loss(
    g: &mut Graph,
    heads: &[LevelVars],
    targets: &AssignedTargets,
    focal: FocalParams,
    quality: Option<&QualityWeights>,
) -> Result<(Var, LossParts)> {
    if heads.len() != targets.levels.len() {
        return Err(Error::Validation(format!(
            "{} head levels but {} target levels",
            heads.len(),
            targets.levels.len()
        )));
    }
    let computed;
    let q = match quality {
        Some(q) => q,
        None => {
            computed = quality_weights(g, heads, targets);
            &computed
        }
    };
    let num_pos = targets.num_positives();
    let num_neg = targets.num_negatives();
    let inv_pos = if num_pos > 0 {
        1.0 / num_pos as f64
    } else {
        0.0
    };
    let inv_neg = if num_neg > 0 {
        1.0 / num_neg as f64
    } else {
        0.0
    };

    let mut parts = LossParts {
        num_pos,
        num_neg,
        ..Default::default()
    };
    let mut terms = Vec::new();
    for ((lv, lt), ql) in heads.iter().zip(&targets.levels).zip(&q.levels) {
        let pos_w: Vec<f64> = (0..lt.len())
            .map(|t| {
                if lt.labels[t].is_some() {
                    ql[t] * inv_pos
                } else {
                    0.0
                }
            })
            .collect();
        let neg_w: Vec<f64> = (0..lt.len())
            .map(|t| if lt.labels[t].is_none() { inv_neg } else { 0.0 })
            .collect();
        let cp = focal_term(
            g,
            lv.cls_logits,
            &lt.labels,
            &pos_w,
            focal.alpha,
            focal.gamma,
        )?;
        let cn = focal_term(
            g,
            lv.cls_logits,
            &lt.labels,
            &neg_w,
            focal.alpha,
            focal.gamma,
        )?;
        let gts: Vec<Option<(f64, f64)>> = lt
            .segment
            .iter()
            .map(|k| k.map(|k| (targets.segments[k].start, targets.segments[k].end)))
            .collect();
        let rg = giou_term(g, lv.start_offsets, lv.end_offsets, lv.level, &gts, inv_pos)?;
        parts.cls_pos += g.value(cp).data()[0];
        parts.cls_neg += g.value(cn).data()[0];
        parts.reg += g.value(rg).data()[0];
        terms.extend([cp, cn, rg]);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    parts.total = g.value(total).data()[0];
    if !parts.total.is_finite() {
        return Err(Error::Numeric("total_loss"));
    }
    Ok((total, parts))
}
