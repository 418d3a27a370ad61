//! Value-level forward kernels and their hand-written backward passes.
//!
//! [`crate::graph::Graph`] records these on a tape; they are also usable on
//! their own when no gradient is needed.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Logit given to boundary bins that fall outside the sequence.
pub const MASKED_LOGIT: f64 = -1e4;

pub const NORM_EPS: f64 = 1e-5;

fn expect_rank2(op: &'static str, x: &Tensor) -> Result<(usize, usize)> {
    match *x.shape() {
        [t, d] => Ok((t, d)),
        _ => Err(Error::dim(op, x.shape(), &[0, 0])),
    }
}

pub fn fc_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (t, din) = expect_rank2("fc", x)?;
    let (win, dout) = expect_rank2("fc", w)?;
    if din != win {
        return Err(Error::dim("fc", x.shape(), w.shape()));
    }
    if b.len() != dout {
        return Err(Error::dim("fc bias", w.shape(), b.shape()));
    }
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let mut out = vec![0.0; t * dout];
    for (xr, orow) in xd.chunks_exact(din).zip(out.chunks_exact_mut(dout)) {
        orow.copy_from_slice(bd);
        for (&xi, wr) in xr.iter().zip(wd.chunks_exact(dout)) {
            for (o, &wv) in orow.iter_mut().zip(wr) {
                *o += xi * wv;
            }
        }
    }
    Tensor::new(vec![t, dout], out)
}

/// Returns `(dx, dw, db)`; `dx` is skipped unless requested.
pub(crate) fn fc_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &[f64],
    want_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let din = x.shape()[1];
    let dout = w.shape()[1];
    let (xd, wd) = (x.data(), w.data());
    let mut dw = vec![0.0; din * dout];
    let mut db = vec![0.0; dout];
    let mut dx = want_dx.then(|| vec![0.0; xd.len()]);
    for (ti, (xr, gr)) in xd.chunks_exact(din).zip(dy.chunks_exact(dout)).enumerate() {
        for (b, &g) in db.iter_mut().zip(gr) {
            *b += g;
        }
        for (&xi, dwr) in xr.iter().zip(dw.chunks_exact_mut(dout)) {
            for (d, &g) in dwr.iter_mut().zip(gr) {
                *d += xi * g;
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dxr = &mut dx[ti * din..(ti + 1) * din];
            for (dxi, wr) in dxr.iter_mut().zip(wd.chunks_exact(dout)) {
                *dxi = wr.iter().zip(gr).map(|(a, b)| a * b).sum();
            }
        }
    }
    (dx, dw, db)
}

/// "Same"-padded depthwise convolution along time. `kernel` is `[D, w]`
/// with odd `w`.
pub fn depthwise_conv1d(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (t, d) = expect_rank2("depthwise_conv1d", x)?;
    let (kd, w) = expect_rank2("depthwise_conv1d", kernel)?;
    if kd != d {
        return Err(Error::dim("depthwise_conv1d", x.shape(), kernel.shape()));
    }
    if w % 2 == 0 {
        return Err(Error::Config(format!(
            "depthwise convolution window must be odd, got {w}"
        )));
    }
    let half = (w - 1) / 2;
    let kt = transpose(kernel.data(), d, w);
    let xd = x.data();
    let mut out = vec![0.0; t * d];
    for ti in 0..t {
        let orow = &mut out[ti * d..(ti + 1) * d];
        for j in 0..w {
            let Some(src) = (ti + j).checked_sub(half).filter(|&s| s < t) else {
                continue;
            };
            let xr = &xd[src * d..(src + 1) * d];
            let kr = &kt[j * d..(j + 1) * d];
            for ((o, &xv), &kv) in orow.iter_mut().zip(xr).zip(kr) {
                *o += xv * kv;
            }
        }
    }
    Tensor::new(vec![t, d], out)
}

pub(crate) fn depthwise_conv1d_backward(
    x: &Tensor,
    kernel: &Tensor,
    dy: &[f64],
    want_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>) {
    let (t, d) = (x.shape()[0], x.shape()[1]);
    let w = kernel.shape()[1];
    let half = (w - 1) / 2;
    let kt = transpose(kernel.data(), d, w);
    let xd = x.data();
    // accumulated as [w, D] then transposed back
    let mut dkt = vec![0.0; w * d];
    let mut dx = want_dx.then(|| vec![0.0; t * d]);
    for ti in 0..t {
        let gr = &dy[ti * d..(ti + 1) * d];
        for j in 0..w {
            let Some(src) = (ti + j).checked_sub(half).filter(|&s| s < t) else {
                continue;
            };
            let xr = &xd[src * d..(src + 1) * d];
            let dkr = &mut dkt[j * d..(j + 1) * d];
            for ((dk, &xv), &g) in dkr.iter_mut().zip(xr).zip(gr) {
                *dk += xv * g;
            }
            if let Some(dx) = dx.as_mut() {
                let kr = &kt[j * d..(j + 1) * d];
                let dxr = &mut dx[src * d..(src + 1) * d];
                for ((dxv, &kv), &g) in dxr.iter_mut().zip(kr).zip(gr) {
                    *dxv += kv * g;
                }
            }
        }
    }
    (dx, transpose(&dkt, w, d))
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Mean over time: `[T, D] -> [1, D]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (t, d) = expect_rank2("global_avg_pool", x)?;
    if t == 0 {
        return Err(Error::EmptyInput("global_avg_pool"));
    }
    let mut out = vec![0.0; d];
    for row in x.data().chunks_exact(d) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    let inv = 1.0 / t as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    Tensor::new(vec![1, d], out)
}

/// Kernel-2, stride-2 max pooling over time. An odd tail forms its own
/// window. Returns the pooled tensor and, per output element, the flat
/// index of the winning input element (first one on ties).
pub fn max_pool_stride2(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (t, d) = expect_rank2("max_pool_stride2", x)?;
    if t == 0 {
        return Err(Error::EmptyInput("max_pool_stride2"));
    }
    let to = t.div_ceil(2);
    let xd = x.data();
    let mut out = Vec::with_capacity(to * d);
    let mut argmax = Vec::with_capacity(to * d);
    for ot in 0..to {
        let a = 2 * ot;
        for c in 0..d {
            let ia = a * d + c;
            let mut best = ia;
            if a + 1 < t && xd[ia + d] > xd[ia] {
                best = ia + d;
            }
            out.push(xd[best]);
            argmax.push(best);
        }
    }
    Ok((Tensor::new(vec![to, d], out)?, argmax))
}

/// Softmax over the last axis.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let n = *x.shape().last().expect("rank >= 1");
    if n == 0 {
        return Err(Error::EmptyInput("softmax"));
    }
    if !x.is_finite() {
        return Err(Error::Numeric("softmax"));
    }
    let mut out = x.data().to_vec();
    for row in out.chunks_exact_mut(n) {
        softmax_in_place(row);
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    let inv = 1.0 / z;
    row.iter_mut().for_each(|v| *v *= inv);
}

pub(crate) fn softmax_backward(y: &[f64], dy: &[f64], n: usize) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for ((yr, gr), dr) in y
        .chunks_exact(n)
        .zip(dy.chunks_exact(n))
        .zip(dx.chunks_exact_mut(n))
    {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((d, &yv), &g) in dr.iter_mut().zip(yr).zip(gr) {
            *d = yv * (g - dot);
        }
    }
    dx
}

/// Cached statistics of a normalization forward pass.
#[derive(Clone, Debug)]
pub struct NormCache {
    pub xhat: Vec<f64>,
    /// One entry per (instant, group).
    pub inv_std: Vec<f64>,
}

/// Per-instant group normalization over contiguous channel groups of size
/// `D / groups`, followed by a per-channel affine map.
pub fn group_norm(
    x: &Tensor,
    groups: usize,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, NormCache)> {
    let (t, d) = expect_rank2("group_norm", x)?;
    if groups == 0 || d % groups != 0 {
        return Err(Error::Config(format!(
            "channel dim {d} is not divisible by {groups} groups"
        )));
    }
    if gamma.len() != d || beta.len() != d {
        return Err(Error::dim("group_norm affine", x.shape(), gamma.shape()));
    }
    let gs = d / groups;
    let (gd, bd) = (gamma.data(), beta.data());
    let mut xhat = vec![0.0; t * d];
    let mut inv_std = Vec::with_capacity(t * groups);
    let mut out = vec![0.0; t * d];
    for ((xg, hg), (og, c0)) in x
        .data()
        .chunks_exact(gs)
        .zip(xhat.chunks_exact_mut(gs))
        .zip(
            out.chunks_exact_mut(gs)
                .zip((0..t * groups).map(|i| (i % groups) * gs)),
        )
    {
        let mean = xg.iter().sum::<f64>() / gs as f64;
        let var = xg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / gs as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std.push(is);
        for (i, (h, o)) in hg.iter_mut().zip(og.iter_mut()).enumerate() {
            *h = (xg[i] - mean) * is;
            *o = gd[c0 + i] * *h + bd[c0 + i];
        }
    }
    Ok((Tensor::new(vec![t, d], out)?, NormCache { xhat, inv_std }))
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(group_norm(x, 1, gamma, beta, eps)?.0)
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn group_norm_backward(
    cache: &NormCache,
    shape: &[usize],
    groups: usize,
    gamma: &Tensor,
    dy: &[f64],
    want_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let d = shape[1];
    let gs = d / groups;
    let gd = gamma.data();
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    for (hr, gr) in cache.xhat.chunks_exact(d).zip(dy.chunks_exact(d)) {
        for c in 0..d {
            dgamma[c] += gr[c] * hr[c];
            dbeta[c] += gr[c];
        }
    }
    let dx = want_dx.then(|| {
        let mut dx = vec![0.0; dy.len()];
        let m = gs as f64;
        for (gi, ((hg, gg), dg)) in cache
            .xhat
            .chunks_exact(gs)
            .zip(dy.chunks_exact(gs))
            .zip(dx.chunks_exact_mut(gs))
            .enumerate()
        {
            let c0 = (gi % groups) * gs;
            let is = cache.inv_std[gi];
            let mut mean_dh = 0.0;
            let mut mean_dh_h = 0.0;
            for i in 0..gs {
                let dh = gg[i] * gd[c0 + i];
                mean_dh += dh;
                mean_dh_h += dh * hg[i];
            }
            mean_dh /= m;
            mean_dh_h /= m;
            for i in 0..gs {
                let dh = gg[i] * gd[c0 + i];
                dg[i] = is * (dh - mean_dh - hg[i] * mean_dh_h);
            }
        }
        dx
    });
    (dx, dgamma, dbeta)
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Which boundary a bin set belongs to: start bins look backwards in time,
/// end bins forwards.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoundarySide {
    Start,
    End,
}

impl BoundarySide {
    /// Index into the `2` axis of the center-offset tensor.
    pub fn center_slot(self) -> usize {
        match self {
            BoundarySide::Start => 0,
            BoundarySide::End => 1,
        }
    }

    /// Instant that bin `b` of instant `t` refers to, if inside `0..len`.
    pub fn bin_instant(self, t: usize, b: usize, len: usize) -> Option<usize> {
        match self {
            BoundarySide::Start => t.checked_sub(b),
            BoundarySide::End => Some(t + b).filter(|&i| i < len),
        }
    }
}

/// Relative boundary distribution and its expectation for every instant.
///
/// `response` is `[T]`, `center` is `[T, 2, bins + 1]` (or any layout with
/// `2 * (bins + 1)` values per instant). Returns the expected offset per
/// instant and the `[T, bins + 1]` probabilities.
pub fn boundary_expectation(
    response: &[f64],
    center: &Tensor,
    side: BoundarySide,
    bins: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let t = response.len();
    let nb = bins + 1;
    if center.rows() != t || center.row_len() != 2 * nb {
        return Err(Error::dim(
            "boundary_expectation",
            &[t, 2, nb],
            center.shape(),
        ));
    }
    let slot = side.center_slot() * nb;
    let mut offsets = Vec::with_capacity(t);
    let mut probs = vec![0.0; t * nb];
    for ti in 0..t {
        let crow = &center.row(ti)[slot..slot + nb];
        let p = &mut probs[ti * nb..(ti + 1) * nb];
        for b in 0..nb {
            let s = side
                .bin_instant(ti, b, t)
                .map_or(MASKED_LOGIT, |i| response[i]);
            p[b] = s + crow[b];
        }
        softmax_in_place(p);
        offsets.push(p.iter().enumerate().map(|(b, &q)| b as f64 * q).sum());
    }
    Ok((offsets, probs))
}

/// Gradients of `boundary_expectation` with respect to the response and the
/// full center tensor (only the `side` slot is touched).
pub(crate) fn boundary_expectation_backward(
    probs: &[f64],
    offsets: &[f64],
    dy: &[f64],
    side: BoundarySide,
    bins: usize,
    center_len: usize,
) -> (Vec<f64>, Vec<f64>) {
    let t = offsets.len();
    let nb = bins + 1;
    let slot = side.center_slot() * nb;
    let mut dresp = vec![0.0; t];
    let mut dcenter = vec![0.0; center_len];
    for ti in 0..t {
        let g = dy[ti];
        if g == 0.0 {
            continue;
        }
        let p = &probs[ti * nb..(ti + 1) * nb];
        let dc = &mut dcenter[ti * 2 * nb + slot..ti * 2 * nb + slot + nb];
        for b in 0..nb {
            let dz = g * p[b] * (b as f64 - offsets[ti]);
            dc[b] += dz;
            if let Some(i) = side.bin_instant(ti, b, t) {
                dresp[i] += dz;
            }
        }
    }
    (dresp, dcenter)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn fc_identity_and_bias_only() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let y = fc_forward(&x, &eye, &Tensor::zeros(&[2])).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
        let y = fc_forward(&x, &Tensor::zeros(&[2, 2]), &Tensor::vector(vec![3.0, 4.0])).unwrap();
        assert_eq!(y.data(), &[3.0, 4.0]);
    }

    #[test]
    fn fc_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, &[4, 3]);
        let w = random(&mut rng, &[3, 2]);
        let b = random(&mut rng, &[2]);
        let y = fc_forward(&x, &w, &b).unwrap();
        for t in 0..4 {
            for j in 0..2 {
                let mut acc = b.data()[j];
                for i in 0..3 {
                    acc += x.get2(t, i) * w.get2(i, j);
                }
                assert!((y.get2(t, j) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fc_shape_mismatch_names_both_shapes() {
        let err = fc_forward(
            &Tensor::zeros(&[2, 3]),
            &Tensor::zeros(&[4, 2]),
            &Tensor::zeros(&[2]),
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn conv_identity_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, &[6, 3]);
        let y = depthwise_conv1d(&x, &Tensor::full(&[3, 1], 1.0)).unwrap();
        assert_eq!(y, x);
        let mut k = Tensor::zeros(&[3, 3]);
        for d in 0..3 {
            k.set2(d, 1, 1.0);
        }
        assert_eq!(depthwise_conv1d(&x, &k).unwrap(), x);
    }

    #[test]
    fn conv_matches_padded_window_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, &[4, 2]);
        let k = random(&mut rng, &[2, 3]);
        let y = depthwise_conv1d(&x, &k).unwrap();
        for t in 0..4i64 {
            for d in 0..2 {
                let mut acc = 0.0;
                for j in 0..3i64 {
                    let s = t + j - 1;
                    if (0..4).contains(&s) {
                        acc += x.get2(s as usize, d) * k.get2(d, j as usize);
                    }
                }
                assert!((y.get2(t as usize, d) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_rejects_even_window() {
        let err = depthwise_conv1d(&Tensor::zeros(&[4, 2]), &Tensor::zeros(&[2, 2])).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn avg_pool_cases() {
        let x = Tensor::from_rows(&[vec![1.0], vec![3.0]]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[2.0]);
        let c = Tensor::full(&[5, 2], 0.25);
        assert_eq!(global_avg_pool(&c).unwrap().data(), &[0.25, 0.25]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, &[16, 8]);
        let y = global_avg_pool(&x).unwrap();
        for d in 0..8 {
            let m = (0..16).map(|t| x.get2(t, d)).sum::<f64>() / 16.0;
            assert!((y.data()[d] - m).abs() < 1e-14);
        }
        assert!(matches!(
            global_avg_pool(&Tensor::zeros(&[0, 3])),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn max_pool_cases() {
        let x = Tensor::from_rows(&[vec![1.0], vec![5.0], vec![2.0], vec![3.0]]).unwrap();
        assert_eq!(max_pool_stride2(&x).unwrap().0.data(), &[5.0, 3.0]);
        let x = Tensor::from_rows(&[vec![1.0], vec![2.0], vec![9.0]]).unwrap();
        assert_eq!(max_pool_stride2(&x).unwrap().0.data(), &[2.0, 9.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, &[64, 4]);
        let (y, _) = max_pool_stride2(&x).unwrap();
        for t in 0..32 {
            for d in 0..4 {
                assert_eq!(y.get2(t, d), x.get2(2 * t, d).max(x.get2(2 * t + 1, d)));
            }
        }
        for t in 1..=64 {
            let (y, _) = max_pool_stride2(&Tensor::zeros(&[t, 1])).unwrap();
            assert_eq!(y.rows(), t.div_ceil(2));
        }
    }

    #[test]
    fn softmax_cases() {
        let y = softmax(&Tensor::vector(vec![0.0; 3])).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = softmax(&Tensor::vector(vec![1000.0, 0.0])).unwrap();
        assert!(y.is_finite());
        assert!((y.data()[0] - 1.0).abs() < 1e-15);
        assert!(y.data()[1] < 1e-300);
        // unshifted formula is safe for small logits
        let v = [1.0f64, 2.0, 3.0];
        let z: f64 = v.iter().map(|x| x.exp()).sum();
        let y = softmax(&Tensor::vector(v.to_vec())).unwrap();
        for (a, x) in y.data().iter().zip(v) {
            assert!((a - x.exp() / z).abs() < 1e-12);
        }
        assert!(matches!(
            softmax(&Tensor::vector(vec![f64::NAN, 0.0])),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&mut rng, &[8, 16]);
        let y = layer_norm(
            &x,
            &Tensor::full(&[16], 1.0),
            &Tensor::zeros(&[16]),
            NORM_EPS,
        )
        .unwrap();
        for t in 0..8 {
            let r = y.row(t);
            let m = r.iter().sum::<f64>() / 16.0;
            let v = r.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 16.0;
            assert!(m.abs() < 1e-6);
            // eps shrinks the variance slightly below one
            assert!((v - 1.0).abs() < 1e-3);
            let xr = x.row(t);
            let xm = xr.iter().sum::<f64>() / 16.0;
            let xv = xr.iter().map(|a| (a - xm) * (a - xm)).sum::<f64>() / 16.0;
            for (a, b) in r.iter().zip(xr) {
                assert!((a - (b - xm) / (xv + NORM_EPS).sqrt()).abs() < 1e-12);
            }
        }
        let c = Tensor::full(&[2, 4], 3.0);
        let y = layer_norm(&c, &Tensor::full(&[4], 1.0), &Tensor::zeros(&[4]), NORM_EPS).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn group_norm_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&mut rng, &[4, 8]);
        let g = random(&mut rng, &[8]);
        let b = random(&mut rng, &[8]);
        let ln = layer_norm(&x, &g, &b, NORM_EPS).unwrap();
        assert_eq!(group_norm(&x, 1, &g, &b, NORM_EPS).unwrap().0, ln);
        let (y, _) = group_norm(
            &x,
            8,
            &Tensor::full(&[8], 1.0),
            &Tensor::zeros(&[8]),
            NORM_EPS,
        )
        .unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        let (y, _) = group_norm(&x, 2, &g, &b, NORM_EPS).unwrap();
        for t in 0..4 {
            for grp in 0..2 {
                let vals: Vec<f64> = (0..4).map(|i| x.get2(t, grp * 4 + i)).collect();
                let m = vals.iter().sum::<f64>() / 4.0;
                let v = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 4.0;
                for (i, &vi) in vals.iter().enumerate() {
                    let c = grp * 4 + i;
                    let e = g.data()[c] * (vi - m) / (v + NORM_EPS).sqrt() + b.data()[c];
                    assert!((y.get2(t, c) - e).abs() < 1e-12);
                }
            }
        }
        assert!(matches!(
            group_norm(&x, 3, &g, &b, NORM_EPS),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn boundary_expectation_uniform_and_masked() {
        let bins = 4;
        let center = Tensor::zeros(&[6, 2, bins + 1]);
        let resp = vec![0.0; 6];
        let (off, _) = boundary_expectation(&resp, &center, BoundarySide::End, bins).unwrap();
        // instant 0 sees all five end bins inside the sequence
        assert!((off[0] - 2.0).abs() < 1e-12);
        // last instant: only bin 0 is in range
        assert!(off[5].abs() < 1e-12);
        let (off, _) = boundary_expectation(&resp, &center, BoundarySide::Start, bins).unwrap();
        assert!(off[0].abs() < 1e-12);
        assert!((off[5] - 2.0).abs() < 1e-12);
    }
}
