//! Numerical checks of feature collapse under convex averaging.
//!
//! Softmax attention with the identity value map replaces each feature by a
//! convex combination of all features. When the points lie in an open half
//! space (so their hull excludes the origin) the largest pairwise angle can
//! only shrink. This module measures that, and compares how quickly stacked
//! attention and stacked SGP blocks drive features towards their temporal
//! mean.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::graph::Graph;
use crate::ops;
use crate::param::ParamStore;
use crate::sgp::{sgp_block, SgpConfig, SgpInit, SgpLayerParams};
use crate::tensor::Tensor;

/// Slack allowed when comparing angles before and after averaging.
pub const ANGLE_SLACK: f64 = 1e-9;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Largest angle between any two rows, in radians.
pub fn max_pairwise_angle(ps: &Tensor) -> Result<f64> {
    let n = ps.rows();
    let norms: Vec<f64> = (0..n).map(|i| norm(ps.row(i))).collect();
    if let Some(i) = norms.iter().position(|&v| v == 0.0) {
        return Err(Error::Domain(format!("point {i} is the zero vector")));
    }
    let mut best: f64 = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let c = (dot(ps.row(i), ps.row(j)) / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            best = best.max(c.acos());
        }
    }
    Ok(best)
}

/// `weights · ps` for a row-stochastic `weights` of shape `[m, n]`.
pub fn convex_combine(ps: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let (n, d) = (ps.rows(), ps.row_len());
    if weights.shape().len() != 2 || weights.row_len() != n {
        return Err(Error::dim("convex_combine", weights.shape(), ps.shape()));
    }
    for r in 0..weights.rows() {
        let row = weights.row(r);
        if row.iter().any(|&w| w.is_nan() || w < 0.0) {
            return Err(Error::Validation(format!(
                "weight row {r} has a negative entry"
            )));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(Error::Validation(format!(
                "weight row {r} sums to {s}, not 1"
            )));
        }
    }
    let mut out = Tensor::zeros(&[weights.rows(), d]);
    for r in 0..weights.rows() {
        for (k, &w) in weights.row(r).iter().enumerate() {
            let p = ps.row(k);
            for (j, &pj) in p.iter().enumerate() {
                let v = out.get2(r, j) + w * pj;
                out.set2(r, j, v);
            }
        }
    }
    Ok(out)
}

fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    ops::fc_forward(a, b, &Tensor::zeros(&[b.row_len()]))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    /// `[T, T]`, every row stochastic.
    pub weights: Tensor,
    pub output: Tensor,
}

/// `softmax(Q Kᵀ / √d) · V` with `Q = x Wq`, `K = x Wk`, `V = x Wv`, where
/// `d` is the query width.
pub fn self_attention_forward(
    x: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
) -> Result<Attention> {
    let q = matmul(x, wq)?;
    let k = matmul(x, wk)?;
    let v = matmul(x, wv)?;
    if q.row_len() != k.row_len() {
        return Err(Error::dim("self_attention", q.shape(), k.shape()));
    }
    let t = x.rows();
    let scale = 1.0 / (q.row_len() as f64).sqrt();
    let mut logits = Tensor::zeros(&[t, t]);
    for i in 0..t {
        for j in 0..t {
            logits.set2(i, j, dot(q.row(i), k.row(j)) * scale);
        }
    }
    let weights = ops::softmax(&logits)?;
    let output = matmul(&weights, &v)?;
    Ok(Attention { weights, output })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CombineKind {
    Stochastic,
    Attention,
}

impl CombineKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CombineKind::Stochastic => "stochastic",
            CombineKind::Attention => "attention",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AngleTrial {
    pub trial: usize,
    pub n: usize,
    pub d: usize,
    pub kind: CombineKind,
    pub angle_before: f64,
    pub angle_after: f64,
}

impl AngleTrial {
    pub fn margin(&self) -> f64 {
        self.angle_after - self.angle_before
    }

    pub fn violation(&self) -> bool {
        self.margin() > ANGLE_SLACK
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AngleReport {
    pub records: Vec<AngleTrial>,
    pub violations: usize,
    /// Largest `after - before` over all records.
    pub worst_margin: f64,
}

impl AngleReport {
    pub fn passed(&self) -> usize {
        self.records.len() - self.violations
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("trial,n,d,kind,angle_before,angle_after,violation_flag\n");
        for r in &self.records {
            writeln!(
                s,
                "{},{},{},{},{:.17e},{:.17e},{}",
                r.trial,
                r.n,
                r.d,
                r.kind.as_str(),
                r.angle_before,
                r.angle_after,
                r.violation() as u8
            )
            .expect("write to string");
        }
        s
    }
}

/// `n` points in `d` dimensions inside the half space `x₀ > 0`.
pub fn origin_excluding_points(rng: &mut impl Rng, n: usize, d: usize) -> Tensor {
    let offset = rng.random_range(0.1..2.0);
    let mut v = Tensor::zeros(&[n, d]);
    for i in 0..n {
        for j in 0..d {
            let z: f64 = StandardNormal.sample(rng);
            v.set2(i, j, if j == 0 { z.abs() + offset } else { z });
        }
    }
    v
}

/// Random row-stochastic matrix with exponentially distributed weights.
pub fn random_stochastic(rng: &mut impl Rng, m: usize, n: usize) -> Tensor {
    let mut w = Tensor::zeros(&[m, n]);
    for r in 0..m {
        let raw: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
        let s: f64 = raw.iter().sum();
        for (k, v) in raw.iter().enumerate() {
            w.set2(r, k, v / s);
        }
        // land the row sum on 1 up to one rounding step
        let s: f64 = w.row(r).iter().sum();
        let fix = w.get2(r, 0) + (1.0 - s);
        w.set2(r, 0, fix.max(0.0));
    }
    w
}

fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols).map(|_| dist.sample(rng)).collect(),
    )
    .expect("shape")
}

fn identity(d: usize) -> Tensor {
    let mut m = Tensor::zeros(&[d, d]);
    for i in 0..d {
        m.set2(i, i, 1.0);
    }
    m
}

fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    rng
}

fn angle_trial(
    trial: usize,
    n_range: (usize, usize),
    d_range: (usize, usize),
    seed: u64,
) -> Result<[AngleTrial; 2]> {
    let mut rng = trial_rng(seed, trial);
    let n = rng.random_range(n_range.0..=n_range.1);
    let d = rng.random_range(d_range.0..=d_range.1);
    let v = origin_excluding_points(&mut rng, n, d);
    let before = max_pairwise_angle(&v)?;

    let w = random_stochastic(&mut rng, n, n);
    let after_stoch = max_pairwise_angle(&convex_combine(&v, &w)?)?;

    let std = (1.0 / d as f64).sqrt();
    let wq = normal_matrix(&mut rng, d, d, std);
    let wk = normal_matrix(&mut rng, d, d, std);
    let att = self_attention_forward(&v, &wq, &wk, &identity(d))?;
    let after_att = max_pairwise_angle(&att.output)?;

    let rec = |kind, angle_after| AngleTrial {
        trial,
        n,
        d,
        kind,
        angle_before: before,
        angle_after,
    };
    Ok([
        rec(CombineKind::Stochastic, after_stoch),
        rec(CombineKind::Attention, after_att),
    ])
}

/// Runs `trials` seeded trials, each checking one random stochastic matrix
/// and one softmax attention matrix on the same origin-excluding points.
pub fn verify_angle_contraction(
    trials: usize,
    n_range: (usize, usize),
    d_range: (usize, usize),
    seed: u64,
    exec: Execution,
) -> Result<AngleReport> {
    if n_range.0 < 1 || n_range.0 > n_range.1 || d_range.0 < 1 || d_range.0 > d_range.1 {
        return Err(Error::Config(format!(
            "invalid ranges n {n_range:?}, d {d_range:?}"
        )));
    }
    let per_trial = exec::map_range(exec, trials, |i| angle_trial(i, n_range, d_range, seed));
    let mut records = Vec::with_capacity(2 * trials);
    for r in per_trial {
        records.extend(r?);
    }
    let violations = records.iter().filter(|r| r.violation()).count();
    let worst_margin = records
        .iter()
        .map(AngleTrial::margin)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(AngleReport {
        records,
        violations,
        worst_margin,
    })
}

/// Mean cosine similarity between each row and the mean row. Zero rows
/// contribute 0.
///
/// Evaluated as `1 - |r/|r| - m/|m||^2 / 2`, which stays exact once the rows
/// have collapsed onto one direction; `dot / (|r| |m|)` wobbles by an ulp there.
pub fn mean_cosine_to_mean(x: &Tensor) -> f64 {
    let t = x.rows();
    let d = x.row_len();
    let mut mean = vec![0.0; d];
    for i in 0..t {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v / t as f64;
        }
    }
    let mn = norm(&mean);
    let total: f64 = (0..t)
        .map(|i| {
            let r = x.row(i);
            let rn = norm(r);
            if rn == 0.0 || mn == 0.0 {
                0.0
            } else {
                let gap: f64 = r
                    .iter()
                    .zip(&mean)
                    .map(|(a, b)| (a / rn - b / mn).powi(2))
                    .sum();
                1.0 - 0.5 * gap
            }
        })
        .sum();
    total / t as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    SelfAttention,
    Sgp,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::SelfAttention => "self_attention",
            LayerKind::Sgp => "sgp",
        }
    }
}

/// One fixed random layer, applied repeatedly.
pub enum ProfileLayer {
    SelfAttention {
        wq: Tensor,
        wk: Tensor,
    },
    Sgp {
        store: ParamStore,
        params: SgpLayerParams,
    },
}

impl ProfileLayer {
    /// Weights drawn from `N(0, 1/d)`; attention uses the identity value map.
    pub fn random(kind: LayerKind, d: usize, rng: &mut impl Rng) -> Self {
        let std = (1.0 / d as f64).sqrt();
        match kind {
            LayerKind::SelfAttention => ProfileLayer::SelfAttention {
                wq: normal_matrix(rng, d, d, std),
                wk: normal_matrix(rng, d, d, std),
            },
            LayerKind::Sgp => {
                let mut store = ParamStore::new();
                let cfg = SgpConfig {
                    dim: d,
                    window: 1,
                    scale_k: 1.5,
                    gn_groups: if d.is_multiple_of(4) { 4 } else { 1 },
                    ffn_ratio: 4,
                };
                let params =
                    SgpLayerParams::new(&mut store, "sgp", &cfg, SgpInit::Normal(std), rng);
                ProfileLayer::Sgp { store, params }
            }
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            ProfileLayer::SelfAttention { wq, wk } => {
                Ok(self_attention_forward(x, wq, wk, &identity(x.row_len()))?.output)
            }
            ProfileLayer::Sgp { store, params } => {
                let mut g = Graph::new();
                let xv = g.constant(x.clone());
                let y = sgp_block(&mut g, store, params, xv)?;
                Ok(g.value(y).clone())
            }
        }
    }
}

/// Statistic at depths `0..=depth`.
pub fn cosine_similarity_profile(
    x: &Tensor,
    layer: &ProfileLayer,
    depth: usize,
) -> Result<Vec<f64>> {
    let mut out = vec![mean_cosine_to_mean(x)];
    let mut h = x.clone();
    for _ in 0..depth {
        h = layer.apply(&h)?;
        out.push(mean_cosine_to_mean(&h));
    }
    Ok(out)
}

/// Near-identical rows: a shared base plus small noise, all with a
/// positive first coordinate.
pub fn near_identical_input(rng: &mut impl Rng, t: usize, d: usize, spread: f64) -> Tensor {
    let base: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let mut x = Tensor::zeros(&[t, d]);
    for i in 0..t {
        for (j, &bj) in base.iter().enumerate() {
            let z: f64 = StandardNormal.sample(rng);
            let v = bj + spread * z;
            x.set2(i, j, if j == 0 { v.abs() + 0.5 } else { v });
        }
    }
    x
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProfileSettings {
    pub trials: usize,
    pub len: usize,
    pub dim: usize,
    pub depth: usize,
    pub spread: f64,
    pub seed: u64,
}

impl Default for ProfileSettings {
    fn default() -> Self {
        Self {
            trials: 100,
            len: 32,
            dim: 16,
            depth: 4,
            spread: 0.3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProfileReport {
    pub depth: usize,
    /// Per trial, statistic at depths `0..=depth`.
    pub attention: Vec<Vec<f64>>,
    pub sgp: Vec<Vec<f64>>,
}

impl ProfileReport {
    /// Trials whose attention statistic never decreases with depth.
    pub fn attention_monotone_trials(&self) -> usize {
        self.attention
            .iter()
            .filter(|p| p.windows(2).all(|w| w[1] >= w[0]))
            .count()
    }

    /// Trials where SGP ends strictly below attention at the final depth.
    pub fn sgp_below_trials(&self) -> usize {
        self.attention
            .iter()
            .zip(&self.sgp)
            .filter(|(a, s)| s[self.depth] < a[self.depth])
            .count()
    }

    pub fn mean_profile(&self, kind: LayerKind) -> Vec<f64> {
        let rows = match kind {
            LayerKind::SelfAttention => &self.attention,
            LayerKind::Sgp => &self.sgp,
        };
        (0..=self.depth)
            .map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / rows.len().max(1) as f64)
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("depth,layer_kind,mean_cosine\n");
        for kind in [LayerKind::SelfAttention, LayerKind::Sgp] {
            for (k, v) in self.mean_profile(kind).iter().enumerate() {
                writeln!(s, "{k},{},{v:.17e}", kind.as_str()).expect("write to string");
            }
        }
        s
    }
}

/// Both stacks on the same input per trial, each with its own random layer.
pub fn run_profiles(settings: &ProfileSettings, exec: Execution) -> Result<ProfileReport> {
    let s = *settings;
    let per = exec::map_range(exec, s.trials, |i| -> Result<(Vec<f64>, Vec<f64>)> {
        let mut rng = trial_rng(s.seed, i);
        let x = near_identical_input(&mut rng, s.len, s.dim, s.spread);
        let sa = ProfileLayer::random(LayerKind::SelfAttention, s.dim, &mut rng);
        let sgp = ProfileLayer::random(LayerKind::Sgp, s.dim, &mut rng);
        Ok((
            cosine_similarity_profile(&x, &sa, s.depth)?,
            cosine_similarity_profile(&x, &sgp, s.depth)?,
        ))
    });
    let mut attention = Vec::with_capacity(s.trials);
    let mut sgp = Vec::with_capacity(s.trials);
    for r in per {
        let (a, b) = r?;
        attention.push(a);
        sgp.push(b);
    }
    Ok(ProfileReport {
        depth: s.depth,
        attention,
        sgp,
    })
}
