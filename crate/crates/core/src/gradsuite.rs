//! The full finite-difference suite: every primitive op, the SGP block, the
//! pyramid, both head kinds and the total loss on a two-action clip.
//!
//! Primitive inputs are registered as parameters so the checker perturbs
//! them directly. Outputs are reduced with a fixed random weighting rather
//! than a plain sum, so that every output entry carries a distinct
//! gradient.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::annotation::ActionSegment;
use crate::assign::assign_targets;
use crate::config::HeadKind;
use crate::error::Result;
use crate::exec::{self, Execution};
use crate::gradcheck::{grad_check, GradCheckReport, DEFAULT_STEP};
use crate::graph::{Graph, Var};
use crate::head::{run_heads, HeadParams};
use crate::loss::{quality_weights, total_loss, FocalParams};
use crate::param::ParamStore;
use crate::pyramid::{build_pyramid, Embedding};
use crate::sgp::{sgp_block, SgpConfig, SgpInit, SgpLayerParams};
use crate::tensor::Tensor;

/// Pass threshold on the worst relative error of every case.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: &'static str,
    pub report: GradCheckReport,
    pub elapsed: Duration,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < TOLERANCE
    }
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub cases: Vec<CaseResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(CaseResult::passed)
    }

    pub fn worst(&self) -> Option<&CaseResult> {
        self.cases
            .iter()
            .max_by(|a, b| a.report.max_rel_error.total_cmp(&b.report.max_rel_error))
    }

    pub fn max_rel_error(&self) -> f64 {
        self.worst().map_or(0.0, |c| c.report.max_rel_error)
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| StandardNormal.sample(rng)).collect(),
    )
    .expect("shape matches data")
}

/// Entries bounded away from zero, so ReLU never sits within a step of its kink.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    random(rng, shape).map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 })
}

/// Distinct, well separated values so max pooling never ties within a step.
fn spaced(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| 0.1 * i as f64 - 0.05 * n as f64).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape.to_vec(), vals).expect("shape matches data")
}

/// `sum(y ⊙ r)` for a fixed random `r` shaped like `y`.
fn weighted_sum(g: &mut Graph, y: Var, r: &Tensor) -> Result<Var> {
    let rv = g.constant(r.clone());
    let p = g.mul(y, rv)?;
    Ok(g.sum(p))
}

type Builder = Box<dyn Fn(&ParamStore, &mut Graph) -> Result<Var> + Send + Sync>;

struct Case {
    name: &'static str,
    store: ParamStore,
    f: Builder,
}

impl Case {
    fn run(&self) -> Result<CaseResult> {
        let start = Instant::now();
        let report = grad_check(&self.store, &self.f, DEFAULT_STEP)?;
        Ok(CaseResult {
            name: self.name,
            report,
            elapsed: start.elapsed(),
        })
    }
}

/// A primitive case: inputs are drawn once, then `op` runs on their vars
/// and the result is reduced by a fixed random weighting.
fn primitive(
    name: &'static str,
    rng: &mut ChaCha8Rng,
    inputs: Vec<Tensor>,
    out_shape: &[usize],
    op: impl Fn(&mut Graph, &[Var]) -> Result<Var> + Send + Sync + 'static,
) -> Case {
    let mut store = ParamStore::new();
    let ids: Vec<_> = inputs
        .into_iter()
        .enumerate()
        .map(|(i, t)| store.add(format!("{name}.in{i}"), t))
        .collect();
    let r = random(rng, out_shape);
    Case {
        name,
        store,
        f: Box::new(move |s, g| {
            let vars: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
            let y = op(g, &vars)?;
            weighted_sum(g, y, &r)
        }),
    }
}

fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let (t, d) = (7, 4);
    let mut v = Vec::new();
    let ins = vec![
        random(rng, &[t, 3]),
        random(rng, &[3, d]),
        random(rng, &[d]),
    ];
    v.push(primitive("fc", rng, ins, &[t, d], |g, x| {
        g.fc(x[0], x[1], x[2])
    }));
    let ins = vec![random(rng, &[t, d]), random(rng, &[d, 5])];
    v.push(primitive("dwconv", rng, ins, &[t, d], |g, x| {
        g.dwconv(x[0], x[1])
    }));
    let ins = vec![random(rng, &[t, d])];
    v.push(primitive("avg_pool", rng, ins, &[1, d], |g, x| {
        g.avg_pool(x[0])
    }));
    let ins = vec![spaced(rng, &[t, d])];
    v.push(primitive("max_pool2", rng, ins, &[4, d], |g, x| {
        g.max_pool2(x[0])
    }));
    let ins = vec![random(rng, &[t, d]), random(rng, &[t, d])];
    v.push(primitive("add", rng, ins, &[t, d], |g, x| {
        g.add(x[0], x[1])
    }));
    let ins = vec![random(rng, &[t, d]), random(rng, &[t, d])];
    v.push(primitive("mul", rng, ins, &[t, d], |g, x| {
        g.mul(x[0], x[1])
    }));
    let ins = vec![random(rng, &[t, d]), random(rng, &[1, d])];
    v.push(primitive("mul_row", rng, ins, &[t, d], |g, x| {
        g.mul_row(x[0], x[1])
    }));
    let ins = vec![off_kink(rng, &[t, d])];
    v.push(primitive(
        "relu",
        rng,
        ins,
        &[t, d],
        |g, x| Ok(g.relu(x[0])),
    ));
    let ins = vec![random(rng, &[t, d])];
    v.push(primitive("sigmoid", rng, ins, &[t, d], |g, x| {
        Ok(g.sigmoid(x[0]))
    }));
    let ins = vec![random(rng, &[t, d])];
    v.push(primitive("scale", rng, ins, &[t, d], |g, x| {
        Ok(g.scale(x[0], -1.7))
    }));
    let ins = vec![random(rng, &[t, d])];
    v.push(primitive("sum", rng, ins, &[1], |g, x| Ok(g.sum(x[0]))));
    let ins = vec![random(rng, &[t, d])];
    v.push(primitive("softmax", rng, ins, &[t, d], |g, x| {
        g.softmax(x[0])
    }));
    let ins = vec![random(rng, &[t, d]), random(rng, &[d]), random(rng, &[d])];
    v.push(primitive("group_norm", rng, ins, &[t, d], |g, x| {
        g.group_norm(x[0], 2, x[1], x[2])
    }));
    let ins = vec![random(rng, &[t, d]), random(rng, &[d]), random(rng, &[d])];
    v.push(primitive("layer_norm", rng, ins, &[t, d], |g, x| {
        g.layer_norm(x[0], x[1], x[2])
    }));
    let ins = vec![random(rng, &[t, d])];
    v.push(primitive("reshape", rng, ins, &[d, t], move |g, x| {
        g.reshape(x[0], &[d, t])
    }));
    let ins = vec![random(rng, &[t, d])];
    v.push(primitive("column", rng, ins, &[t], |g, x| {
        g.column(x[0], 2)
    }));
    v
}

fn sgp_config(dim: usize) -> SgpConfig {
    SgpConfig {
        dim,
        window: 3,
        scale_k: 1.5,
        gn_groups: 2,
        ffn_ratio: 2,
    }
}

fn perturb_norm_affine(store: &mut ParamStore, p: &SgpLayerParams, rng: &mut ChaCha8Rng) {
    for id in [p.ln.gamma, p.ln.beta, p.gn.gamma, p.gn.beta] {
        for v in store.get_mut(id).value.data_mut() {
            *v += 0.3 * Distribution::<f64>::sample(&StandardNormal, rng);
        }
    }
}

fn block_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let mut v = Vec::new();

    let mut store = ParamStore::new();
    let e = Embedding::new(&mut store, 3, 4, rng);
    let x = random(rng, &[10, 3]);
    let r = random(rng, &[10, 4]);
    v.push(Case {
        name: "embedding",
        store,
        f: Box::new(move |s, g| {
            let xv = g.constant(x.clone());
            let y = e.forward(g, s, xv)?;
            weighted_sum(g, y, &r)
        }),
    });

    let mut store = ParamStore::new();
    let p = SgpLayerParams::new(&mut store, "sgp", &sgp_config(8), SgpInit::FanIn, rng);
    perturb_norm_affine(&mut store, &p, rng);
    let x = random(rng, &[16, 8]);
    let r = random(rng, &[16, 8]);
    v.push(Case {
        name: "sgp_block",
        store,
        f: Box::new(move |s, g| {
            let xv = g.constant(x.clone());
            let z = sgp_block(g, s, &p, xv)?;
            weighted_sum(g, z, &r)
        }),
    });

    let mut store = ParamStore::new();
    let blocks: Vec<SgpLayerParams> = (0..3)
        .map(|l| {
            let p = SgpLayerParams::new(
                &mut store,
                &format!("l{l}"),
                &sgp_config(4),
                SgpInit::FanIn,
                rng,
            );
            perturb_norm_affine(&mut store, &p, rng);
            p
        })
        .collect();
    let x = random(rng, &[12, 4]);
    let rs: Vec<Tensor> = [12, 6, 3].iter().map(|&t| random(rng, &[t, 4])).collect();
    v.push(Case {
        name: "pyramid",
        store,
        f: Box::new(move |s, g| {
            let xv = g.constant(x.clone());
            let levels = build_pyramid(g, s, &blocks, xv)?;
            let mut total = None;
            for (lv, r) in levels.iter().zip(&rs) {
                let part = weighted_sum(g, *lv, r)?;
                total = Some(match total {
                    None => part,
                    Some(acc) => g.add(acc, part)?,
                });
            }
            Ok(total.expect("at least one level"))
        }),
    });
    v
}

/// Random heads redrawn for a well-conditioned difference check: weights
/// `N(0, 1/fan_in)` and biases `N(0, 0.25)`, so activations are of order
/// one. At the default init the regression stacks shrink activations to
/// near the step size and the classifier bias makes most gradients tiny.
fn head_store(
    kind: HeadKind,
    rng: &mut ChaCha8Rng,
    classes: usize,
    bins: usize,
) -> (ParamStore, HeadParams) {
    let mut store = ParamStore::new();
    let heads = HeadParams::new(&mut store, kind, 4, classes, bins, rng);
    for p in store.iter_mut() {
        let shape = p.value.shape().to_vec();
        let std = match shape.as_slice() {
            // depthwise kernels are [D, w], pointwise weights [in, out]
            [_, w] if p.name.ends_with(".dw") => 1.0 / (*w as f64).sqrt(),
            [fan_in, _] => 1.0 / (*fan_in as f64).sqrt(),
            _ => 0.5,
        };
        p.value = random(rng, &shape).map(|v| v * std);
    }
    (store, heads)
}

fn head_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let mut v = Vec::new();
    for (name, kind) in [
        ("trident_head", HeadKind::Trident),
        ("plain_head", HeadKind::Plain),
    ] {
        let (store, heads) = head_store(kind, rng, 2, 3);
        let feats = [random(rng, &[10, 4]), random(rng, &[5, 4])];
        let rs: Vec<[Tensor; 3]> = [10, 5]
            .iter()
            .map(|&t| [random(rng, &[t, 2]), random(rng, &[t]), random(rng, &[t])])
            .collect();
        v.push(Case {
            name,
            store,
            f: Box::new(move |s, g| {
                let fv: Vec<Var> = feats.iter().map(|f| g.constant(f.clone())).collect();
                let lv = run_heads(g, s, &heads, &fv, false)?;
                let mut total = None;
                for (l, r) in lv.iter().zip(&rs) {
                    let a = weighted_sum(g, l.cls_logits, &r[0])?;
                    let b = weighted_sum(g, l.start_offsets, &r[1])?;
                    let c = weighted_sum(g, l.end_offsets, &r[2])?;
                    let ab = g.add(a, b)?;
                    let part = g.add(ab, c)?;
                    total = Some(match total {
                        None => part,
                        Some(acc) => g.add(acc, part)?,
                    });
                }
                Ok(total.expect("at least one level"))
            }),
        });
    }
    v
}

/// Segments of the two-action clip used by the loss cases.
pub fn toy_clip() -> (usize, Vec<ActionSegment>) {
    (
        16,
        vec![
            ActionSegment::new(2.0, 9.0, 1),
            ActionSegment::new(11.0, 15.0, 0),
        ],
    )
}

fn loss_cases(rng: &mut ChaCha8Rng) -> Result<Vec<Case>> {
    let (n, segs) = toy_clip();
    let targets = assign_targets(&segs, n, 2, 1.5)?;
    let fp = FocalParams {
        alpha: 0.25,
        gamma: 2.0,
    };
    let mut v = Vec::new();
    for (name, kind) in [
        ("loss_trident", HeadKind::Trident),
        ("loss_plain", HeadKind::Plain),
    ] {
        let (store, heads) = head_store(kind, rng, 2, 4);
        let feats = [random(rng, &[n, 4]), random(rng, &[n / 2, 4])];
        let build = move |s: &ParamStore, g: &mut Graph| {
            let fv: Vec<Var> = feats.iter().map(|f| g.constant(f.clone())).collect();
            run_heads(g, s, &heads, &fv, false)
        };
        // The IoU quality weight carries no gradient; hold it at its value
        // at the base point so the perturbed losses share it.
        let mut g = Graph::new();
        let lv = build(&store, &mut g)?;
        let q = quality_weights(&g, &lv, &targets);
        let targets = targets.clone();
        v.push(Case {
            name,
            store,
            f: Box::new(move |s, g| {
                let lv = build(s, g)?;
                Ok(total_loss(g, &lv, &targets, fp, Some(&q))?.0)
            }),
        });
    }
    Ok(v)
}

/// Runs every case, spreading them over `exec`. Cases are seeded from
/// `seed` and come back in a fixed order.
pub fn run_suite(seed: u64, exec: Execution) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = primitive_cases(&mut rng);
    cases.extend(block_cases(&mut rng));
    cases.extend(head_cases(&mut rng));
    cases.extend(loss_cases(&mut rng)?);
    let cases = exec::map(exec, &cases, Case::run)
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(SuiteReport { cases })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_and_covers_every_block() {
        let r = run_suite(0, Execution::Parallel).unwrap();
        for c in &r.cases {
            assert!(c.passed(), "{}: {:?}", c.name, c.report);
            assert!(c.report.entries_checked > 0, "{}", c.name);
        }
        for name in [
            "fc",
            "softmax",
            "group_norm",
            "sgp_block",
            "pyramid",
            "trident_head",
            "loss_trident",
        ] {
            assert!(r.cases.iter().any(|c| c.name == name), "{name}");
        }
    }
}
