//! Classification head and boundary heads.
//!
//! The Trident head predicts a start response `F_s`, an end response `F_e`
//! and per-instant center offsets `F_c` of shape `[T, 2, B + 1]`. The start
//! distance of instant `t` is the expectation of the softmax over the `B + 1`
//! instants ending at `t` (responses plus `F_c[t, 0]`); the end distance
//! mirrors this over the instants starting at `t`. The same head parameters
//! are applied at every pyramid level and distances are scaled by the
//! level stride.

use rand::Rng;

use crate::config::HeadKind;
use crate::error::{Error, Result};
use crate::graph::{Backward, Graph, Var};
use crate::layers::{SeparableStack, StackInit};
use crate::ops::{self, BoundarySide, MASKED_LOGIT};
use crate::param::ParamStore;
use crate::pyramid::level_stride;
use crate::tensor::Tensor;

pub const HEAD_WINDOW: usize = 3;
pub const HEAD_LAYERS: usize = 3;
/// Std of the start/end branch weights.
pub const BOUNDARY_INIT_STD: f64 = 0.1;
/// Initial foreground probability encoded in the classifier bias.
pub const CLS_PRIOR: f64 = 0.01;

#[derive(Clone, Debug)]
pub enum RegressionHead {
    Trident {
        start: SeparableStack,
        end: SeparableStack,
        center: SeparableStack,
        bins: usize,
    },
    Plain {
        reg: SeparableStack,
    },
}

#[derive(Clone, Debug)]
pub struct HeadParams {
    pub cls: SeparableStack,
    pub regression: RegressionHead,
    pub num_classes: usize,
}

fn stack_dims(dim: usize, out: usize) -> Vec<usize> {
    let mut dims = vec![dim; HEAD_LAYERS];
    dims.push(out);
    dims
}

impl HeadParams {
    pub fn new(
        store: &mut ParamStore,
        kind: HeadKind,
        dim: usize,
        num_classes: usize,
        bins: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let cls = SeparableStack::new(
            store,
            "head.cls",
            &stack_dims(dim, num_classes),
            HEAD_WINDOW,
            StackInit::FanIn,
            false,
            true,
            rng,
        );
        let prior = -((1.0 - CLS_PRIOR) / CLS_PRIOR).ln();
        store
            .get_mut(cls.last().pointwise.bias())
            .value
            .data_mut()
            .fill(prior);

        let regression = match kind {
            HeadKind::Trident => {
                let mut boundary = |name: &str| {
                    SeparableStack::new(
                        store,
                        name,
                        &stack_dims(dim, 1),
                        HEAD_WINDOW,
                        StackInit::Normal(BOUNDARY_INIT_STD),
                        false,
                        // a shared shift of every bin logit is invisible
                        // to the bin softmax, so a bias would never learn
                        false,
                        rng,
                    )
                };
                let start = boundary("head.start");
                let end = boundary("head.end");
                let center = SeparableStack::new(
                    store,
                    "head.center",
                    &stack_dims(dim, 2 * (bins + 1)),
                    HEAD_WINDOW,
                    StackInit::FanIn,
                    false,
                    true,
                    rng,
                );
                RegressionHead::Trident {
                    start,
                    end,
                    center,
                    bins,
                }
            }
            HeadKind::Plain => RegressionHead::Plain {
                reg: SeparableStack::new(
                    store,
                    "head.reg",
                    &stack_dims(dim, 2),
                    HEAD_WINDOW,
                    StackInit::FanIn,
                    false,
                    true,
                    rng,
                ),
            },
        };
        Self {
            cls,
            regression,
            num_classes,
        }
    }
}

/// Graph handles for one pyramid level.
#[derive(Clone, Copy, Debug)]
pub struct LevelVars {
    pub level: usize,
    /// `[T_l, C]`
    pub cls_logits: Var,
    /// Start distance in level instants, `[T_l]`.
    pub start_offsets: Var,
    /// End distance in level instants, `[T_l]`.
    pub end_offsets: Var,
    /// `(F_s, F_e, F_c)` when the Trident head is used.
    pub boundary: Option<(Var, Var, Var)>,
}

struct BoundaryRule {
    side: BoundarySide,
    bins: usize,
    probs: Vec<f64>,
}

impl Backward for BoundaryRule {
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &[f64],
        _needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (dresp, dcenter) = ops::boundary_expectation_backward(
            &self.probs,
            output.data(),
            grad,
            self.side,
            self.bins,
            inputs[1].len(),
        );
        vec![Some(dresp), Some(dcenter)]
    }
}

/// Differentiable expected boundary distance for every instant.
pub fn boundary_offsets(
    g: &mut Graph,
    response: Var,
    center: Var,
    side: BoundarySide,
    bins: usize,
) -> Result<Var> {
    let (offsets, probs) =
        ops::boundary_expectation(g.value(response).data(), g.value(center), side, bins)?;
    Ok(g.custom(
        &[response, center],
        Tensor::vector(offsets),
        Box::new(BoundaryRule { side, bins, probs }),
    ))
}

/// Applies the shared heads to every pyramid level.
pub fn run_heads(
    g: &mut Graph,
    store: &ParamStore,
    heads: &HeadParams,
    feats: &[Var],
    detach_boundary: bool,
) -> Result<Vec<LevelVars>> {
    let mut out = Vec::with_capacity(feats.len());
    for (level, &f) in feats.iter().enumerate() {
        let t = g.value(f).rows();
        let cls_logits = heads.cls.forward(g, store, f)?;
        let lv = match &heads.regression {
            RegressionHead::Trident {
                start,
                end,
                center,
                bins,
            } => {
                let fb = if detach_boundary { g.detach(f) } else { f };
                let fs = start.forward(g, store, fb)?;
                let fs = g.reshape(fs, &[t])?;
                let fe = end.forward(g, store, fb)?;
                let fe = g.reshape(fe, &[t])?;
                let fc = center.forward(g, store, f)?;
                let fc = g.reshape(fc, &[t, 2, bins + 1])?;
                let ds = boundary_offsets(g, fs, fc, BoundarySide::Start, *bins)?;
                let de = boundary_offsets(g, fe, fc, BoundarySide::End, *bins)?;
                LevelVars {
                    level,
                    cls_logits,
                    start_offsets: ds,
                    end_offsets: de,
                    boundary: Some((fs, fe, fc)),
                }
            }
            RegressionHead::Plain { reg } => {
                let r = reg.forward(g, store, f)?;
                let r = g.relu(r);
                let ds = g.column(r, 0)?;
                let de = g.column(r, 1)?;
                LevelVars {
                    level,
                    cls_logits,
                    start_offsets: ds,
                    end_offsets: de,
                    boundary: None,
                }
            }
        };
        out.push(lv);
    }
    Ok(out)
}

/// Raw Trident responses of one level.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryResponses {
    pub f_start: Tensor,
    pub f_end: Tensor,
    pub f_center: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelOutput {
    pub level: usize,
    pub cls_logits: Tensor,
    pub start_offsets: Vec<f64>,
    pub end_offsets: Vec<f64>,
    pub boundary: Option<BoundaryResponses>,
}

impl LevelOutput {
    pub fn len(&self) -> usize {
        self.cls_logits.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Decoded `(start, end)` of instant `t` in input instants.
    pub fn segment(&self, t: usize) -> (f64, f64) {
        decode_segment(self.level, t, self.start_offsets[t], self.end_offsets[t])
    }
}

/// Materialized head outputs for all levels.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutputs {
    pub levels: Vec<LevelOutput>,
}

impl HeadOutputs {
    pub fn from_graph(g: &Graph, vars: &[LevelVars]) -> Self {
        let levels = vars
            .iter()
            .map(|lv| LevelOutput {
                level: lv.level,
                cls_logits: g.value(lv.cls_logits).clone(),
                start_offsets: g.value(lv.start_offsets).data().to_vec(),
                end_offsets: g.value(lv.end_offsets).data().to_vec(),
                boundary: lv.boundary.map(|(s, e, c)| BoundaryResponses {
                    f_start: g.value(s).clone(),
                    f_end: g.value(e).clone(),
                    f_center: g.value(c).clone(),
                }),
            })
            .collect();
        Self { levels }
    }
}

fn decode_offset(
    response: &Tensor,
    center_bins: &Tensor,
    t: usize,
    side: BoundarySide,
) -> Result<f64> {
    let len = response.len();
    if t >= len {
        return Err(Error::Validation(format!("instant {t} outside 0..{len}")));
    }
    if center_bins.rows() != len || center_bins.shape().len() != 2 {
        return Err(Error::dim(
            "decode_offset",
            response.shape(),
            center_bins.shape(),
        ));
    }
    let nb = center_bins.shape()[1];
    let mut z: Vec<f64> = (0..nb)
        .map(|b| {
            side.bin_instant(t, b, len)
                .map_or(MASKED_LOGIT, |i| response.data()[i])
                + center_bins.get2(t, b)
        })
        .collect();
    ops::softmax_in_place(&mut z);
    Ok(z.iter().enumerate().map(|(b, p)| b as f64 * p).sum())
}

/// Expected start distance at instant `t`. `f_center_left` is `[T_l, B + 1]`.
pub fn decode_start_offset(f_start: &Tensor, f_center_left: &Tensor, t: usize) -> Result<f64> {
    decode_offset(f_start, f_center_left, t, BoundarySide::Start)
}

/// Expected end distance at instant `t`. `f_center_right` is `[T_l, B + 1]`.
pub fn decode_end_offset(f_end: &Tensor, f_center_right: &Tensor, t: usize) -> Result<f64> {
    decode_offset(f_end, f_center_right, t, BoundarySide::End)
}

/// Converts level-instant distances into input-instant coordinates.
/// `level` is 0-based, so the stride is `2^level`.
pub fn decode_segment(level: usize, t: usize, d_start: f64, d_end: f64) -> (f64, f64) {
    let s = level_stride(level) as f64;
    ((t as f64 - d_start) * s, (t as f64 + d_end) * s)
}

/// Decoding for the plain regression head: `reg_out` is `[T_l, 2]` raw
/// distances, clamped at zero.
pub fn plain_regression_decode(reg_out: &Tensor, level: usize, t: usize) -> (f64, f64) {
    let ds = reg_out.get2(t, 0).max(0.0);
    let de = reg_out.get2(t, 1).max(0.0);
    decode_segment(level, t, ds, de)
}

/// Splits a `[T, 2, B + 1]` center tensor into its `[T, B + 1]` halves.
pub fn split_center(f_center: &Tensor) -> (Tensor, Tensor) {
    let t = f_center.rows();
    let nb = f_center.row_len() / 2;
    let mut left = Vec::with_capacity(t * nb);
    let mut right = Vec::with_capacity(t * nb);
    for ti in 0..t {
        let r = f_center.row(ti);
        left.extend_from_slice(&r[..nb]);
        right.extend_from_slice(&r[nb..]);
    }
    (
        Tensor::new(vec![t, nb], left).expect("shape"),
        Tensor::new(vec![t, nb], right).expect("shape"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| StandardNormal.sample(rng)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn uniform_logits_give_half_range() {
        let bins = 16;
        let t = 40;
        let zeros = Tensor::zeros(&[t]);
        let c = Tensor::zeros(&[t, bins + 1]);
        assert!((decode_start_offset(&zeros, &c, 20).unwrap() - 8.0).abs() < 1e-12);
        assert!((decode_end_offset(&zeros, &c, 20).unwrap() - 8.0).abs() < 1e-12);
    }

    #[test]
    fn concentrated_mass() {
        let bins = 16;
        let t = 40;
        let zeros = Tensor::zeros(&[t]);
        let mut c = Tensor::zeros(&[t, bins + 1]);
        c.set2(20, 3, 100.0);
        assert!((decode_start_offset(&zeros, &c, 20).unwrap() - 3.0).abs() < 1e-6);
        let mut c = Tensor::zeros(&[t, bins + 1]);
        c.set2(20, 0, 100.0);
        assert!(decode_end_offset(&zeros, &c, 20).unwrap().abs() < 1e-6);
    }

    #[test]
    fn two_bin_hand_case() {
        // combined logits [0.5, -1.0, 2.0] at t = 2 with B = 2
        let f_start = Tensor::vector(vec![2.0, -1.0, 0.5]);
        let c = Tensor::zeros(&[3, 3]);
        let e = [0.5f64.exp(), (-1.0f64).exp(), 2.0f64.exp()];
        let z: f64 = e.iter().sum();
        let expected = (e[1] + 2.0 * e[2]) / z;
        assert!((decode_start_offset(&f_start, &c, 2).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn segment_arithmetic() {
        assert_eq!(decode_segment(2, 7, 3.0, 2.0), (16.0, 36.0));
        assert_eq!(decode_segment(0, 7, 3.0, 2.0), (4.0, 9.0));
        let reg = Tensor::from_rows(&vec![vec![3.0, 2.0]; 8]).unwrap();
        assert_eq!(plain_regression_decode(&reg, 2, 7), (16.0, 36.0));
        let neg = Tensor::from_rows(&vec![vec![-1.0, -4.0]; 8]).unwrap();
        assert_eq!(plain_regression_decode(&neg, 1, 3), (6.0, 6.0));
    }

    #[test]
    fn decoded_segment_brackets_anchor() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        use rand::Rng;
        for _ in 0..1000 {
            let level = rng.random_range(0..6);
            let t = rng.random_range(0..100);
            let (ds, de) = (rng.random_range(0.0..=16.0), rng.random_range(0.0..=16.0));
            let (s, e) = decode_segment(level, t, ds, de);
            let p = (t * level_stride(level)) as f64;
            assert!(s <= p && p <= e);
        }
    }

    #[test]
    fn shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let resp = random(&mut rng, &[20]);
        let c = random(&mut rng, &[20, 9]);
        let shifted = c.map(|v| v + 3.7);
        for t in 8..20 {
            let a = decode_start_offset(&resp, &c, t).unwrap();
            let b = decode_start_offset(&resp, &shifted, t).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn start_end_mirror_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let t = 24;
        let bins = 6;
        let resp = random(&mut rng, &[t]);
        let cl = random(&mut rng, &[t, bins + 1]);
        let rev_resp = Tensor::vector(resp.data().iter().rev().copied().collect());
        let mut rev_c = Tensor::zeros(&[t, bins + 1]);
        for ti in 0..t {
            for b in 0..=bins {
                rev_c.set2(t - 1 - ti, b, cl.get2(ti, b));
            }
        }
        for ti in 0..t {
            let s = decode_start_offset(&resp, &cl, ti).unwrap();
            let e = decode_end_offset(&rev_resp, &rev_c, t - 1 - ti).unwrap();
            assert!((s - e).abs() < 1e-12);
        }
    }

    #[test]
    fn batched_expectation_matches_per_instant() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let (t, bins) = (12, 4);
        let resp = random(&mut rng, &[t]);
        let fc = random(&mut rng, &[t, 2, bins + 1]);
        let (left, right) = split_center(&fc);
        let (ds, _) =
            ops::boundary_expectation(resp.data(), &fc, BoundarySide::Start, bins).unwrap();
        let (de, _) = ops::boundary_expectation(resp.data(), &fc, BoundarySide::End, bins).unwrap();
        for ti in 0..t {
            assert!((ds[ti] - decode_start_offset(&resp, &left, ti).unwrap()).abs() < 1e-14);
            assert!((de[ti] - decode_end_offset(&resp, &right, ti).unwrap()).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_final_layer_gives_zero_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let mut store = ParamStore::new();
        let heads = HeadParams::new(&mut store, HeadKind::Trident, 8, 3, 4, &mut rng);
        let RegressionHead::Trident {
            start, end, center, ..
        } = &heads.regression
        else {
            unreachable!()
        };
        for stack in [&heads.cls, start, end, center] {
            let last = stack.last().pointwise;
            store.get_mut(last.w).value.data_mut().fill(0.0);
            if let Some(b) = last.b {
                store.get_mut(b).value.data_mut().fill(0.0);
            }
        }
        let mut g = Graph::new();
        let feats: Vec<Var> = [16, 8]
            .iter()
            .map(|&t| g.constant(random(&mut rng, &[t, 8])))
            .collect();
        let lv = run_heads(&mut g, &store, &heads, &feats, true).unwrap();
        let out = HeadOutputs::from_graph(&g, &lv);
        for (l, lo) in out.levels.iter().enumerate() {
            let tl = [16, 8][l];
            assert_eq!(lo.cls_logits.shape(), &[tl, 3]);
            let b = lo.boundary.as_ref().unwrap();
            assert_eq!(b.f_start.shape(), &[tl]);
            assert_eq!(b.f_end.shape(), &[tl]);
            assert_eq!(b.f_center.shape(), &[tl, 2, 5]);
            assert!(lo.cls_logits.data().iter().all(|&v| v == 0.0));
            assert!(b.f_start.data().iter().all(|&v| v == 0.0));
            assert!(b.f_center.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn detached_boundary_branches_do_not_reach_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let mut store = ParamStore::new();
        let heads = HeadParams::new(&mut store, HeadKind::Trident, 4, 2, 3, &mut rng);
        for detach in [true, false] {
            let mut g = Graph::new();
            let f = g.input(random(&mut rng, &[8, 4]));
            let lv = run_heads(&mut g, &store, &heads, &[f], detach).unwrap();
            let (fs, _, _) = lv[0].boundary.unwrap();
            let loss = g.sum(fs);
            let grads = g.backward(loss).unwrap();
            let touched = grads
                .input(f)
                .is_some_and(|gx| gx.iter().any(|&v| v != 0.0));
            assert_eq!(touched, !detach);
        }
    }
}
